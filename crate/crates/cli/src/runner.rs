//! Executes an experiment run by run and checks every run against an
//! oracle before its timing is kept.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::ffi::OsStr;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use groupflow::apps::cg::{cg_solve, discretization_error, serial_cg, CgConfig, CgVariant, Rhs};
use groupflow::apps::grid::{dims_create, GridTopology};
use groupflow::apps::particles::{
    read_records, read_sidecar, reference_state, run_particles, ExchangeVariant, IoVariant, Particle, ParticleGen,
    ParticlesConfig, RECORD_BYTES,
};
use groupflow::apps::wordcount::{
    run_wordcount, serial_histogram, write_histogram, Corpus, Histogram, SyntheticCorpus, Variant, WordcountConfig,
    PAIR_BYTES,
};
use groupflow::apps::workload::{example_workload_analysis, min_max_median, write_stats, WorkloadSource};
use groupflow::model::predict_decoupled;
use groupflow::runtime::{EventTrace, SimTime};
use groupflow::{decoupled_rank_count, SimConfig};
use serde::Serialize;

use crate::experiment::{App, AppParams, CgParams, CorpusSource, Experiment, ParticlesParams, WordcountParams, WorkloadParams};
use crate::results::{ensure_parent, resolve_output, Phases, ResultRow};

/// What one run produced, before it becomes a row.
struct Run {
    variant: String,
    alpha: f64,
    granularity: usize,
    makespan: SimTime,
    trace: EventTrace,
    oracle_pass: bool,
}

/// Drives the runs of one experiment and collects their rows.
/// Per-rank particles, one list per compute rank.
type Layout = Vec<Vec<Particle>>;

pub struct Runner<'a> {
    exp: &'a Experiment,
    results_dir: Option<&'a OsStr>,
    rows: Vec<ResultRow>,
    log: Box<dyn FnMut(&str) + 'a>,
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs())
}

fn alpha_label(a: f64) -> String {
    format!("{a:.4}").trim_end_matches('0').trim_end_matches('.').to_string()
}

impl<'a> Runner<'a> {
    pub fn new(exp: &'a Experiment, results_dir: Option<&'a OsStr>, log: impl FnMut(&str) + 'a) -> Self {
        Runner {
            exp,
            results_dir,
            rows: Vec::new(),
            log: Box::new(log),
        }
    }

    /// Runs everything and returns one row per run.
    pub fn run(mut self) -> Result<Vec<ResultRow>> {
        match &self.exp.params {
            AppParams::Wordcount(w) => self.wordcount(w)?,
            AppParams::Cg(c) => self.cg(c)?,
            AppParams::Particles(p) => self.particles(p)?,
            AppParams::Workload(w) => self.workload(w)?,
            AppParams::Model(_) => bail!("the model is evaluated, not run"),
        }
        Ok(self.rows)
    }

    fn output(&self, path: &Path) -> PathBuf {
        resolve_output(path, self.results_dir)
    }

    fn sim(&self, ranks: usize, rep: usize) -> SimConfig {
        SimConfig::new(ranks)
            .with_seed(self.exp.seed + rep as u64)
            .with_noise(self.exp.noise)
            .with_latency(self.exp.latency_us)
    }

    /// Decoupled variants sweep every `α`; the others run once with `α = 0`.
    fn alphas(&self, decoupled: bool) -> Vec<f64> {
        if decoupled {
            self.exp.alphas.clone()
        } else {
            vec![0.0]
        }
    }

    fn record(&mut self, ranks: usize, rep: usize, run: Run) -> Result<()> {
        let exp = self.exp;
        if let Some(dir) = &exp.gantt {
            let dir = self.output(dir);
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let name = format!(
                "{}_{}_p{ranks}_a{}_s{}_rep{rep}.csv",
                exp.app,
                run.variant.replace('+', "-"),
                alpha_label(run.alpha),
                run.granularity
            );
            run.trace.export_csv(&dir.join(name))?;
        }
        let phases = Phases::from_trace(&run.trace, ranks)?;
        let makespan_us = run.makespan.as_micros();
        (self.log)(&format!(
            "{} {} P={ranks} alpha={} S={} rep={rep}: {makespan_us:.1} us, oracle {}",
            exp.app,
            run.variant,
            alpha_label(run.alpha),
            run.granularity,
            if run.oracle_pass { "ok" } else { "FAILED" }
        ));
        self.rows.push(ResultRow {
            app: exp.app.to_string(),
            variant: run.variant,
            ranks,
            alpha: run.alpha,
            granularity: run.granularity,
            seed: exp.seed + rep as u64,
            rep,
            makespan_us,
            compute_us: phases.compute_us,
            idle_us: phases.idle_us,
            send_us: phases.send_us,
            recv_us: phases.recv_us,
            io_us: phases.io_us,
            oracle_pass: run.oracle_pass,
        });
        Ok(())
    }

    fn wordcount(&mut self, w: &WordcountParams) -> Result<()> {
        let exp = self.exp;
        let mut last: Option<Histogram> = None;
        for &p in &exp.ranks {
            for rep in 0..exp.reps {
                let corpus = match &w.corpus {
                    CorpusSource::Directory(dir) => Corpus::directory(dir)?,
                    CorpusSource::Synthetic => {
                        let scale = exp.scale(p);
                        Corpus::synthetic(SyntheticCorpus {
                            vocabulary: w.vocabulary,
                            zipf_exponent: w.zipf,
                            total_tokens: (w.tokens as f64 * scale).round() as u64,
                            documents: ((w.documents as f64 * scale).round() as usize).max(1),
                            size_skew: w.doc_skew,
                            seed: exp.seed + rep as u64,
                        })?
                        .materialize()?
                    }
                };
                let oracle = serial_histogram(&corpus)?;
                for &variant in &w.variants {
                    let decoupled = variant == Variant::Decoupled;
                    let sizes = if decoupled { exp.granularities.clone() } else { vec![0] };
                    for alpha in self.alphas(decoupled) {
                        for &s in &sizes {
                            let batch = (s / PAIR_BYTES).max(1);
                            let cfg = WordcountConfig {
                                variant,
                                alpha: if decoupled { alpha } else { WordcountConfig::default().alpha },
                                batch_pairs: batch,
                                combine: w.combine,
                                ..WordcountConfig::default()
                            };
                            let r = run_wordcount(&corpus, &cfg, &self.sim(p, rep))?;
                            let oracle_pass = r.histogram == oracle && r.read_errors == 0;
                            last = Some(r.histogram);
                            self.record(
                                p,
                                rep,
                                Run {
                                    variant: variant.to_string(),
                                    alpha,
                                    granularity: if decoupled { batch * PAIR_BYTES } else { 0 },
                                    makespan: r.makespan,
                                    trace: r.trace,
                                    oracle_pass,
                                },
                            )?;
                        }
                    }
                }
            }
        }
        if let (Some(path), Some(h)) = (&w.histogram, last) {
            let path = self.output(path);
            ensure_parent(&path)?;
            let f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            write_histogram(&h, std::io::BufWriter::new(f))?;
        }
        Ok(())
    }

    fn cg(&mut self, c: &CgParams) -> Result<()> {
        let exp = self.exp;
        // first history seen per (grid, rhs, rep); later variants must agree
        let mut seen: HashMap<([usize; 3], String, usize), Vec<f64>> = HashMap::new();
        let mut serial: HashMap<([usize; 3], String, usize), Vec<f64>> = HashMap::new();
        for &p in &exp.ranks {
            for rep in 0..exp.reps {
                let rhs = match c.rhs {
                    Rhs::Random { seed } => Rhs::Random { seed: seed + rep as u64 },
                    other => other,
                };
                for &variant in &c.variants {
                    let decoupled = variant == CgVariant::Decoupled;
                    for alpha in self.alphas(decoupled) {
                        let exchange = if decoupled { decoupled_rank_count(p, alpha)? } else { 0 };
                        let compute = p - exchange;
                        let dims = match c.dims {
                            Some(d) if d.iter().product::<usize>() == compute => d,
                            Some(d) => bail!("dims {d:?} hold {} ranks but {variant} at P={p} has {compute} compute ranks", d.iter().product::<usize>()),
                            None => dims_create(compute)?,
                        };
                        let local = match c.global {
                            Some(g) => split_global(g, dims)?,
                            None => c.local,
                        };
                        let cfg = CgConfig {
                            variant,
                            dims,
                            local,
                            iterations: c.iterations,
                            rhs,
                            exchange_ranks: exchange.max(1),
                            ..CgConfig::default()
                        };
                        let r = cg_solve(&cfg, &self.sim(p, rep))?;
                        let key = (r.global, format!("{rhs:?}"), rep);
                        let mut pass = match rhs {
                            Rhs::Manufactured => {
                                let want = discretization_error(r.global);
                                rel_close(r.max_error(), want, 1e-6)
                            }
                            _ => {
                                let reference = match serial.get(&key) {
                                    Some(h) => h.clone(),
                                    None => {
                                        let (h, _) = serial_cg(r.global, c.iterations, rhs)?;
                                        serial.insert(key.clone(), h.clone());
                                        h
                                    }
                                };
                                let floor = reference.first().copied().unwrap_or(0.0) * 1e-20;
                                r.history.len() == reference.len()
                                    && r.history.iter().zip(&reference).all(|(a, b)| (a - b).abs() <= 1e-6 * b.abs().max(floor))
                            }
                        };
                        match seen.get(&key) {
                            Some(h) => {
                                pass &= h.len() == r.history.len() && h.iter().zip(&r.history).all(|(a, b)| rel_close(*a, *b, 1e-10));
                            }
                            None => {
                                seen.insert(key, r.history.clone());
                            }
                        }
                        if let Some(dir) = &c.history {
                            let dir = self.output(dir);
                            fs::create_dir_all(&dir)?;
                            let path = dir.join(format!("cg_{variant}_p{p}_a{}_rep{rep}.csv", alpha_label(alpha)));
                            let f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                            groupflow::apps::cg::write_history(&r.history, std::io::BufWriter::new(f))?;
                        }
                        self.record(
                            p,
                            rep,
                            Run {
                                variant: variant.to_string(),
                                alpha,
                                granularity: 0,
                                makespan: r.makespan,
                                trace: r.trace,
                                oracle_pass: pass,
                            },
                        )?;
                    }
                }
            }
        }
        Ok(())
    }

    fn particles(&mut self, pp: &ParticlesParams) -> Result<()> {
        let exp = self.exp;
        let scratch = tempfile::tempdir()?;
        let data_dir = match &pp.data {
            Some(d) => {
                let d = self.output(d);
                fs::create_dir_all(&d)?;
                d
            }
            None => scratch.path().to_path_buf(),
        };
        for &p in &exp.ranks {
            for rep in 0..exp.reps {
                let generator = ParticleGen {
                    count: (pp.particles as f64 * exp.scale(p)).round() as u64,
                    hot_fraction: pp.skew,
                    max_speed: pp.max_speed,
                    seed: exp.seed + rep as u64,
                };
                let mut references: HashMap<[usize; 3], (Layout, Layout)> = HashMap::new();
                for &exchange in &pp.exchanges {
                    for &io in &pp.ios {
                        let decoupled = exchange == ExchangeVariant::Decoupled || io == IoVariant::Decoupled;
                        let sizes = if decoupled { exp.granularities.clone() } else { vec![0] };
                        for alpha in self.alphas(decoupled) {
                            let exchange_ranks = if exchange == ExchangeVariant::Decoupled { decoupled_rank_count(p, alpha)? } else { 0 };
                            let io_ranks = if io == IoVariant::Decoupled { decoupled_rank_count(p, alpha)? } else { 0 };
                            let Some(compute) = p.checked_sub(exchange_ranks + io_ranks).filter(|&c| c > 0) else {
                                bail!("P={p} leaves no compute ranks at alpha={alpha}");
                            };
                            let dims = match pp.dims {
                                Some(d) if d.iter().product::<usize>() == compute => d,
                                Some(d) => bail!("dims {d:?} do not match the {compute} compute ranks at P={p}"),
                                None => dims_create(compute)?,
                            };
                            let (initial, reference) = match references.entry(dims) {
                                Entry::Occupied(e) => e.into_mut(),
                                Entry::Vacant(e) => {
                                    let topo = GridTopology::new(dims)?;
                                    let initial = generator.generate(&topo)?;
                                    let reference = reference_state(&topo, &initial, pp.steps, 1.0)?;
                                    e.insert((initial, reference))
                                }
                            };
                            for &s in &sizes {
                                let batch = (s / RECORD_BYTES).max(1);
                                let variant = match exp.app {
                                    App::Pio => io.to_string(),
                                    _ if io == IoVariant::None => exchange.to_string(),
                                    _ => format!("{exchange}+{io}"),
                                };
                                let output = (io != IoVariant::None)
                                    .then(|| data_dir.join(format!("{}_p{p}_a{}_s{s}_rep{rep}.bin", variant.replace('+', "-"), alpha_label(alpha))));
                                let cfg = ParticlesConfig {
                                    dims,
                                    generator: generator.clone(),
                                    steps: pp.steps,
                                    exchange,
                                    io,
                                    exchange_ranks: exchange_ranks.max(1),
                                    io_ranks: io_ranks.max(1),
                                    batch_particles: if decoupled { batch } else { ParticlesConfig::default().batch_particles },
                                    output: output.clone(),
                                    ..ParticlesConfig::default()
                                };
                                let r = run_particles(&cfg, initial, &self.sim(p, rep))?;
                                let mut pass = &r.per_rank == reference;
                                if let Some(path) = &output {
                                    pass &= particle_file_matches(path, &r.per_rank, io, r.io.as_ref().map(|i| i.offsets.as_slice()))?;
                                    if pp.data.is_none() {
                                        let _ = fs::remove_file(path);
                                        let mut meta = path.as_os_str().to_owned();
                                        meta.push(".meta");
                                        let _ = fs::remove_file(meta);
                                    }
                                }
                                self.record(
                                    p,
                                    rep,
                                    Run {
                                        variant,
                                        alpha,
                                        granularity: if decoupled { batch * RECORD_BYTES } else { 0 },
                                        makespan: r.makespan,
                                        trace: r.trace,
                                        oracle_pass: pass,
                                    },
                                )?;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn workload(&mut self, w: &WorkloadParams) -> Result<()> {
        let exp = self.exp;
        let mut last = None;
        for &p in &exp.ranks {
            for rep in 0..exp.reps {
                let source = WorkloadSource::Uniform {
                    seed: exp.seed + rep as u64,
                    lo: w.min,
                    hi: w.max.max(w.min + f64::MIN_POSITIVE),
                };
                let r = example_workload_analysis(w.steps, source, &self.sim(p, rep))?;
                let pass = r.stats.len() == w.steps
                    && r.stats.iter().enumerate().all(|(step, s)| {
                        let values: Vec<f64> = (0..p - 1).map(|k| source.value(k, step)).collect();
                        s.step == step && min_max_median(&values) == Some((s.min, s.max, s.median))
                    });
                self.record(
                    p,
                    rep,
                    Run {
                        variant: "decoupled".into(),
                        alpha: 1.0 / p as f64,
                        granularity: 0,
                        makespan: r.makespan,
                        trace: r.trace,
                        oracle_pass: pass,
                    },
                )?;
                last = Some(r.stats);
            }
        }
        if let (Some(path), Some(stats)) = (&w.stats, last) {
            let path = self.output(path);
            ensure_parent(&path)?;
            let f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            write_stats(&stats, std::io::BufWriter::new(f))?;
        }
        Ok(())
    }
}

/// Parses a particle file and compares it with the in-memory state.
fn particle_file_matches(path: &Path, per_rank: &[Vec<Particle>], io: IoVariant, offsets: Option<&[u64]>) -> Result<bool> {
    let mut on_disk: Vec<_> = read_records(path)?.iter().map(Particle::bits).collect();
    let mut in_memory: Vec<_> = per_rank.iter().flatten().map(Particle::bits).collect();
    on_disk.sort_unstable();
    in_memory.sort_unstable();
    let sidecar = read_sidecar(path)?;
    let mut ok = on_disk == in_memory && sidecar.records == in_memory.len() as u64 && sidecar.record_bytes == RECORD_BYTES;
    if io == IoVariant::Collective {
        let mut acc = 0u64;
        let want: Vec<u64> = per_rank
            .iter()
            .map(|b| {
                let o = acc;
                acc += (b.len() * RECORD_BYTES) as u64;
                o
            })
            .collect();
        ok &= offsets == Some(want.as_slice());
    }
    Ok(ok)
}

fn split_global(global: [usize; 3], dims: [usize; 3]) -> Result<[usize; 3]> {
    let mut local = [0; 3];
    for i in 0..3 {
        if global[i] % dims[i] != 0 || global[i] < dims[i] {
            bail!("global grid {global:?} does not split evenly over rank grid {dims:?}");
        }
        local[i] = global[i] / dims[i];
    }
    Ok(local)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelRow {
    pub alpha: f64,
    #[serde(rename = "S")]
    pub s: f64,
    pub beta: f64,
    pub t_conventional: f64,
    pub t_decoupled: f64,
    pub speedup: f64,
}

pub const MODEL_HEADER: &str = "alpha,S,beta,t_conventional,t_decoupled,speedup";

/// Evaluates the model over every `(α, S)` pair of the experiment.
pub fn model_table(exp: &Experiment) -> Result<Vec<ModelRow>> {
    let AppParams::Model(m) = &exp.params else { bail!("not a model experiment") };
    let mut rows = Vec::new();
    for &alpha in &exp.alphas {
        for &s in &exp.granularities {
            let mut params = m.params;
            params.alpha = alpha;
            params.granularity_s = s as f64;
            let pred = predict_decoupled(&params, &m.beta)?;
            rows.push(ModelRow {
                alpha,
                s: s as f64,
                beta: pred.breakdown.beta,
                t_conventional: pred.t_conventional,
                t_decoupled: pred.t_decoupled,
                speedup: pred.speedup,
            });
        }
    }
    Ok(rows)
}
