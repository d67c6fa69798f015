//! Word histogram over a document corpus.
//!
//! The conventional variant maps on every rank, builds the global key set
//! with an all-gather and sums per-key counts with a reduction to rank 0.
//! The decoupled variant splits the ranks into mappers, reducers and a
//! master: mappers stream `(word, count)` pairs to the reducer owning the
//! word while they map, reducers accumulate on the fly and hand their
//! partial histograms to the master at the end.

mod corpus;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{self, Write};

pub use corpus::{word_for, Corpus, SyntheticCorpus};

use crate::codec::fnv1a64;
use crate::error::{Error, Result};
use crate::layout::{decoupled_rank_count, GroupLayout};
use crate::runtime::{run, EventTrace, Rank, SimConfig, SimTime, TransportStats};
use crate::stream::{operator, NoOperator, Stream, StreamChannel, StreamElementType};

/// Longest key kept; longer tokens are truncated.
pub const MAX_KEY_BYTES: usize = 64;
/// Bytes of one encoded pair: the zero-padded key and a `u64` count.
pub const PAIR_BYTES: usize = MAX_KEY_BYTES + 8;
pub const DEFAULT_BATCH_PAIRS: usize = 128;

pub type Histogram = BTreeMap<String, u64>;

/// Splits `text` on every byte that is not an ASCII letter or digit and
/// yields lowercased tokens of at most [`MAX_KEY_BYTES`] bytes.
pub fn tokenize(text: &[u8]) -> impl Iterator<Item = Vec<u8>> + '_ {
    text.split(|b| !b.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t[..t.len().min(MAX_KEY_BYTES)].to_ascii_lowercase())
}

/// The map step: one `(w, 1)` per token, or one `(w, n)` per distinct word
/// when `combine` is set.
pub fn map_document(text: &[u8], combine: bool) -> Vec<(String, u64)> {
    let as_string = |t: Vec<u8>| String::from_utf8(t).expect("ASCII token");
    if !combine {
        return tokenize(text).map(|t| (as_string(t), 1)).collect();
    }
    let mut counts: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
    for t in tokenize(text) {
        *counts.entry(t).or_insert(0) += 1;
    }
    counts.into_iter().map(|(k, v)| (as_string(k), v)).collect()
}

/// Reference histogram computed on one thread.
pub fn serial_histogram(corpus: &Corpus) -> Result<Histogram> {
    let mut h = Histogram::new();
    for i in 0..corpus.len() {
        let Ok(text) = corpus.read(i) else { continue };
        for t in tokenize(&text) {
            *h.entry(String::from_utf8(t).expect("ASCII token")).or_insert(0) += 1;
        }
    }
    Ok(h)
}

/// Writes `word<TAB>count` lines in key order.
pub fn write_histogram<W: Write>(h: &Histogram, mut out: W) -> io::Result<()> {
    for (k, v) in h {
        writeln!(out, "{k}\t{v}")?;
    }
    Ok(())
}

/// Reducer index responsible for `key`.
pub fn reducer_for(key: &[u8], reducers: usize) -> usize {
    (fnv1a64(key) % reducers as u64) as usize
}

/// Encodes up to `batch` pairs into one stream element, padding unused
/// slots with empty keys.
pub fn encode_batch(pairs: &[(Vec<u8>, u64)], batch: usize) -> Vec<u8> {
    assert!(pairs.len() <= batch, "batch overflow");
    let mut out = vec![0u8; batch * PAIR_BYTES];
    for (slot, (k, v)) in out.chunks_exact_mut(PAIR_BYTES).zip(pairs) {
        slot[..k.len()].copy_from_slice(k);
        slot[MAX_KEY_BYTES..].copy_from_slice(&v.to_le_bytes());
    }
    out
}

/// Pairs of a batch element, skipping padding.
pub fn decode_batch(element: &[u8]) -> impl Iterator<Item = (&[u8], u64)> {
    element.chunks_exact(PAIR_BYTES).filter_map(|slot| {
        let key = &slot[..MAX_KEY_BYTES];
        let len = key.iter().position(|&b| b == 0).unwrap_or(MAX_KEY_BYTES);
        (len > 0).then(|| {
            (
                &key[..len],
                u64::from_le_bytes(slot[MAX_KEY_BYTES..].try_into().expect("8 bytes")),
            )
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Conventional,
    Decoupled,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Conventional => "conventional",
            Variant::Decoupled => "decoupled",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conventional" => Ok(Variant::Conventional),
            "decoupled" => Ok(Variant::Decoupled),
            _ => Err(Error::usage(format!("unknown wordcount variant `{s}`"))),
        }
    }
}

/// Virtual-time costs in microseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WordcountCosts {
    /// Reading and tokenizing one token.
    pub map_per_token: f64,
    /// Packing one pair into an outgoing batch.
    pub emit_per_pair: f64,
    /// Adding one pair to a hash table.
    pub insert_per_pair: f64,
    /// Merging one key into a sorted key set or histogram.
    pub merge_per_key: f64,
    /// Adding one entry of a count vector.
    pub add_per_entry: f64,
}

impl Default for WordcountCosts {
    fn default() -> Self {
        WordcountCosts {
            map_per_token: 1.0,
            emit_per_pair: 0.005,
            insert_per_pair: 0.02,
            merge_per_key: 0.05,
            add_per_entry: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordcountConfig {
    pub variant: Variant,
    /// Fraction of ranks given to reducers and master.
    pub alpha: f64,
    /// Pairs per stream element.
    pub batch_pairs: usize,
    /// Pre-aggregate pairs on the mappers.
    pub combine: bool,
    /// Forward raw pair batches to the master instead of partial
    /// histograms.
    pub raw_to_master: bool,
    pub costs: WordcountCosts,
}

impl Default for WordcountConfig {
    fn default() -> Self {
        WordcountConfig {
            variant: Variant::Decoupled,
            alpha: 1.0 / 16.0,
            batch_pairs: DEFAULT_BATCH_PAIRS,
            combine: false,
            raw_to_master: false,
            costs: WordcountCosts::default(),
        }
    }
}

/// Per-rank outcome.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankOutcome {
    /// Present on the rank that holds the final result.
    pub histogram: Option<Histogram>,
    pub tokens_mapped: u64,
    pub read_errors: u64,
}

#[derive(Debug)]
pub struct WordcountRun {
    pub histogram: Histogram,
    pub tokens_mapped: u64,
    pub read_errors: u64,
    pub layout: GroupLayout,
    pub makespan: SimTime,
    pub trace: EventTrace,
    pub stats: TransportStats,
}

/// Group layout used by a variant on `total_ranks` ranks.
pub fn layout_for(config: &WordcountConfig, total_ranks: usize) -> Result<GroupLayout> {
    match config.variant {
        Variant::Conventional => GroupLayout::single(total_ranks, "all")?
            .with_op("map", "all")?
            .with_op("reduce", "all"),
        Variant::Decoupled => {
            let r = decoupled_rank_count(total_ranks, config.alpha)?;
            if r == 1 {
                GroupLayout::contiguous(&[("map", total_ranks - 1), ("reduce", 1)])?
                    .with_op("map", "map")?
                    .with_op("reduce", "reduce")?
                    .with_op("merge", "reduce")
            } else {
                GroupLayout::contiguous(&[("map", total_ranks - r), ("reduce", r - 1), ("master", 1)])?
                    .with_op("map", "map")?
                    .with_op("reduce", "reduce")?
                    .with_op("merge", "master")
            }
        }
    }
}

pub fn run_wordcount(corpus: &Corpus, config: &WordcountConfig, sim: &SimConfig) -> Result<WordcountRun> {
    if config.batch_pairs == 0 {
        return Err(Error::invalid("batch_pairs must be positive"));
    }
    let layout = layout_for(config, sim.total_ranks)?;
    let out = run(&layout, sim, |rank| match config.variant {
        Variant::Conventional => conventional(rank, corpus, config),
        Variant::Decoupled => decoupled(rank, corpus, config),
    })?;
    let makespan = out.makespan();
    let mut histogram = None;
    let (mut tokens_mapped, mut read_errors) = (0, 0);
    for r in out.results {
        tokens_mapped += r.tokens_mapped;
        read_errors += r.read_errors;
        if let Some(h) = r.histogram {
            histogram = Some(h);
        }
    }
    Ok(WordcountRun {
        histogram: histogram.ok_or_else(|| Error::protocol("no rank produced the histogram"))?,
        tokens_mapped,
        read_errors,
        layout,
        makespan,
        trace: out.trace,
        stats: out.stats,
    })
}

/// Feeds the tokens of every document assigned to this mapper to `emit`
/// in chunks, charging the map cost per chunk.
fn map_documents(
    rank: &mut Rank<'_>,
    corpus: &Corpus,
    docs: &[usize],
    chunk: usize,
    cost: f64,
    outcome: &mut RankOutcome,
    mut emit: impl FnMut(&mut Rank<'_>, Vec<Vec<u8>>) -> Result<()>,
) -> Result<()> {
    for &d in docs {
        let text = match corpus.read(d) {
            Ok(t) => t,
            Err(_) => {
                outcome.read_errors += 1;
                continue;
            }
        };
        let mut tokens = tokenize(&text).peekable();
        while tokens.peek().is_some() {
            let batch: Vec<Vec<u8>> = tokens.by_ref().take(chunk).collect();
            rank.compute("map", batch.len() as f64 * cost)?;
            outcome.tokens_mapped += batch.len() as u64;
            emit(rank, batch)?;
        }
    }
    Ok(())
}

fn encode_keys(keys: &[&Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::new();
    for k in keys {
        out.push(k.len() as u8);
        out.extend_from_slice(k);
    }
    out
}

fn decode_keys(block: &[u8]) -> Result<Vec<&[u8]>> {
    let mut keys = Vec::new();
    let mut i = 0;
    while i < block.len() {
        let n = block[i] as usize;
        let k = block
            .get(i + 1..i + 1 + n)
            .ok_or_else(|| Error::protocol("truncated key list"))?;
        keys.push(k);
        i += 1 + n;
    }
    Ok(keys)
}

fn conventional(rank: &mut Rank<'_>, corpus: &Corpus, config: &WordcountConfig) -> Result<RankOutcome> {
    let c = config.costs;
    let members: Vec<usize> = (0..rank.size()).collect();
    let docs = corpus.assign(rank.size()).swap_remove(rank.id());
    let mut outcome = RankOutcome::default();
    let mut local: HashMap<Vec<u8>, u64> = HashMap::new();
    map_documents(rank, corpus, &docs, config.batch_pairs, c.map_per_token, &mut outcome, |rank, batch| {
        rank.compute("reduce", batch.len() as f64 * c.insert_per_pair)?;
        for t in batch {
            *local.entry(t).or_insert(0) += 1;
        }
        Ok(())
    })?;

    // global key set
    let mut keys: Vec<&Vec<u8>> = local.keys().collect();
    keys.sort_unstable();
    let blocks = rank.allgatherv(&members, encode_keys(&keys))?;
    let mut all: Vec<&[u8]> = Vec::new();
    for b in &blocks {
        all.extend(decode_keys(b)?);
    }
    rank.compute("merge", all.len() as f64 * c.merge_per_key)?;
    all.sort_unstable();
    all.dedup();

    // per-key sums into rank 0
    let mut counts = Vec::with_capacity(all.len() * 8);
    for k in &all {
        counts.extend_from_slice(&local.get(*k).copied().unwrap_or(0).to_le_bytes());
    }
    let n = all.len();
    let summed = rank.reduce_bytes(&members, counts, |rank, mut a, b| {
        rank.compute("merge", n as f64 * c.add_per_entry)?;
        for (x, y) in a.chunks_exact_mut(8).zip(b.chunks_exact(8)) {
            let s = u64::from_le_bytes(x.try_into().expect("8 bytes")) + u64::from_le_bytes(y.try_into().expect("8 bytes"));
            x.copy_from_slice(&s.to_le_bytes());
        }
        Ok(a)
    })?;
    if let Some(summed) = summed {
        let mut h = Histogram::new();
        for (k, v) in all.iter().zip(summed.chunks_exact(8)) {
            let v = u64::from_le_bytes(v.try_into().expect("8 bytes"));
            if v > 0 {
                h.insert(String::from_utf8(k.to_vec()).expect("ASCII key"), v);
            }
        }
        outcome.histogram = Some(h);
    }
    Ok(outcome)
}

fn add_batch(h: &mut HashMap<Vec<u8>, u64>, element: &[u8]) -> usize {
    let mut n = 0;
    for (k, v) in decode_batch(element) {
        match h.get_mut(k) {
            Some(c) => *c += v,
            None => {
                h.insert(k.to_vec(), v);
            }
        }
        n += 1;
    }
    n
}

fn into_histogram(h: HashMap<Vec<u8>, u64>) -> Histogram {
    h.into_iter()
        .map(|(k, v)| (String::from_utf8(k).expect("ASCII key"), v))
        .collect()
}

/// Streams `pairs` in batches to consumer `dest`.
fn send_pairs<O: crate::stream::Operator>(
    rank: &mut Rank<'_>,
    stream: &mut Stream<O>,
    dest: usize,
    pairs: &[(Vec<u8>, u64)],
    batch: usize,
    emit_cost: f64,
) -> Result<()> {
    for chunk in pairs.chunks(batch) {
        rank.compute("emit", chunk.len() as f64 * emit_cost)?;
        stream.isend_to(rank, dest, &encode_batch(chunk, batch))?;
    }
    Ok(())
}

fn decoupled(rank: &mut Rank<'_>, corpus: &Corpus, config: &WordcountConfig) -> Result<RankOutcome> {
    let c = config.costs;
    let batch = config.batch_pairs;
    let layout = rank.layout();
    let has_master = layout.group_index("master").is_ok();
    let ty = StreamElementType::new(format!("kv-batch-{batch}"), batch * PAIR_BYTES)?;
    ty.register(rank)?;
    let mut outcome = RankOutcome::default();
    let group = rank.group().name.clone();

    match group.as_str() {
        "map" => {
            let mappers = layout.members("map")?.len();
            let reducers = layout.members("reduce")?.len();
            let me = layout.index_in_group(rank.id()).expect("member");
            let docs = corpus.assign(mappers).swap_remove(me);
            let mut ch = StreamChannel::create(rank, "map", "reduce")?;
            let mut out = ch.attach(rank, &ty, NoOperator)?;
            let mut raw: Vec<Vec<(Vec<u8>, u64)>> = vec![Vec::new(); reducers];
            let mut combined: Vec<HashMap<Vec<u8>, u64>> = vec![HashMap::new(); reducers];
            map_documents(rank, corpus, &docs, batch, c.map_per_token, &mut outcome, |rank, tokens| {
                for t in tokens {
                    let r = reducer_for(&t, reducers);
                    if config.combine {
                        *combined[r].entry(t).or_insert(0) += 1;
                        if combined[r].len() == batch {
                            let mut pairs: Vec<_> = combined[r].drain().collect();
                            pairs.sort_unstable();
                            send_pairs(rank, &mut out, r, &pairs, batch, c.emit_per_pair)?;
                        }
                    } else {
                        raw[r].push((t, 1));
                        if raw[r].len() == batch {
                            let pairs = std::mem::take(&mut raw[r]);
                            send_pairs(rank, &mut out, r, &pairs, batch, c.emit_per_pair)?;
                        }
                    }
                }
                Ok(())
            })?;
            for r in 0..reducers {
                let mut pairs: Vec<_> = raw[r].drain(..).chain(combined[r].drain()).collect();
                pairs.sort_unstable();
                send_pairs(rank, &mut out, r, &pairs, batch, c.emit_per_pair)?;
            }
            out.terminate(rank)?;
            drop(out);
            ch.free(rank)?;
        }
        "reduce" => {
            let mut ch = StreamChannel::create(rank, "map", "reduce")?;
            let mut to_master = if has_master {
                let ch2 = StreamChannel::create(rank, "reduce", "master")?;
                let s = ch2.attach(rank, &ty, NoOperator)?;
                Some((ch2, s))
            } else {
                None
            };
            let mut partial: HashMap<Vec<u8>, u64> = HashMap::new();
            let raw_mode = config.raw_to_master && to_master.is_some();
            {
                let forward = to_master.as_mut().map(|(_, s)| s);
                let mut forward = forward.filter(|_| raw_mode);
                let mut input = ch.attach(
                    rank,
                    &ty,
                    operator(|rank, _, element| {
                        if let Some(fwd) = forward.as_deref_mut() {
                            fwd.isend(rank, element)?;
                        } else {
                            let n = add_batch(&mut partial, element);
                            rank.compute("reduce", n as f64 * c.insert_per_pair)?;
                        }
                        Ok(())
                    }),
                )?;
                input.operate(rank)?;
            }
            ch.free(rank)?;
            match to_master {
                Some((mut ch2, mut s)) => {
                    if !raw_mode {
                        let mut pairs: Vec<_> = partial.drain().collect();
                        pairs.sort_unstable();
                        send_pairs(rank, &mut s, 0, &pairs, batch, c.emit_per_pair)?;
                    }
                    s.terminate(rank)?;
                    drop(s);
                    ch2.free(rank)?;
                }
                None => outcome.histogram = Some(into_histogram(partial)),
            }
        }
        "master" => {
            let mut ch2 = StreamChannel::create(rank, "reduce", "master")?;
            let mut total: HashMap<Vec<u8>, u64> = HashMap::new();
            let per_pair = if config.raw_to_master { c.insert_per_pair } else { c.merge_per_key };
            let mut input = ch2.attach(
                rank,
                &ty,
                operator(|rank, _, element| {
                    let n = add_batch(&mut total, element);
                    rank.compute("merge", n as f64 * per_pair)?;
                    Ok(())
                }),
            )?;
            input.operate(rank)?;
            drop(input);
            ch2.free(rank)?;
            outcome.histogram = Some(into_histogram(total));
        }
        other => return Err(Error::usage(format!("unexpected group `{other}`"))),
    }
    Ok(outcome)
}
