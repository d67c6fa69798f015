use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::error::{Error, Result};

/// Parameters of a generated corpus with Zipf-distributed word frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub vocabulary: u64,
    pub zipf_exponent: f64,
    pub total_tokens: u64,
    pub documents: usize,
    /// Ratio of the largest to the smallest document; 1 gives equal sizes.
    pub size_skew: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpus {
    fn default() -> Self {
        SyntheticCorpus {
            vocabulary: 50_000,
            zipf_exponent: 1.1,
            total_tokens: 1_000_000,
            documents: 64,
            size_skew: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticCorpus {
    pub fn validate(&self) -> Result<()> {
        if self.vocabulary == 0 || self.documents == 0 {
            return Err(Error::invalid("synthetic corpus needs a vocabulary and at least one document"));
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return Err(Error::invalid(format!("zipf exponent must be >= 0, got {}", self.zipf_exponent)));
        }
        if !(self.size_skew.is_finite() && self.size_skew >= 1.0) {
            return Err(Error::invalid(format!("size skew must be >= 1, got {}", self.size_skew)));
        }
        Ok(())
    }

    /// Token count of every document. Weights rise linearly from 1 to
    /// `size_skew` and are shuffled by the seed.
    pub fn document_tokens(&self) -> Vec<u64> {
        let n = self.documents;
        let mut weights: Vec<f64> = (0..n)
            .map(|i| {
                if n == 1 {
                    1.0
                } else {
                    1.0 + (self.size_skew - 1.0) * i as f64 / (n - 1) as f64
                }
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_d0c5);
        weights.shuffle(&mut rng);
        let sum: f64 = weights.iter().sum();
        let mut sizes: Vec<u64> = weights
            .iter()
            .map(|w| (self.total_tokens as f64 * w / sum).floor() as u64)
            .collect();
        let mut rest = self.total_tokens - sizes.iter().sum::<u64>();
        for s in sizes.iter_mut() {
            if rest == 0 {
                break;
            }
            *s += 1;
            rest -= 1;
        }
        sizes
    }

    /// Text of document `index` with `tokens` words. Words are separated by
    /// a mix of whitespace and punctuation and are sometimes capitalized.
    pub fn document_text(&self, index: usize, tokens: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64 + 1);
        let zipf = Zipf::new(self.vocabulary as f64, self.zipf_exponent).expect("validated parameters");
        let mut text = Vec::with_capacity(tokens as usize * 7);
        let mut word = Vec::with_capacity(16);
        for i in 0..tokens {
            if i > 0 {
                text.extend_from_slice(match rng.random_range(0..16u8) {
                    0 => b", ",
                    1 => b".\n",
                    2 => b"\t",
                    _ => b" ",
                });
            }
            let rank = zipf.sample(&mut rng) as u64;
            word_for(rank, &mut word);
            if rng.random_range(0..10u8) == 0 {
                word[0] = word[0].to_ascii_uppercase();
            }
            text.extend_from_slice(&word);
        }
        text
    }
}

/// Lowercase spelling of vocabulary entry `rank` (1-based), bijective
/// base 26.
pub fn word_for(rank: u64, out: &mut Vec<u8>) {
    out.clear();
    let mut n = rank;
    while n > 0 {
        n -= 1;
        out.push(b'a' + (n % 26) as u8);
        n /= 26;
    }
    out.reverse();
}

#[derive(Debug, Clone)]
enum Source {
    Synthetic { synth: SyntheticCorpus, tokens: Vec<u64> },
    Directory { files: Vec<PathBuf>, sizes: Vec<u64> },
    Memory(Vec<Vec<u8>>),
}

/// A set of documents, read on demand by whichever rank maps them.
#[derive(Debug, Clone)]
pub struct Corpus {
    source: Source,
}

impl Corpus {
    pub fn synthetic(synth: SyntheticCorpus) -> Result<Self> {
        synth.validate()?;
        let tokens = synth.document_tokens();
        Ok(Corpus {
            source: Source::Synthetic { synth, tokens },
        })
    }

    /// Every regular file directly inside `dir`, in name order.
    pub fn directory(dir: &Path) -> Result<Self> {
        let mut files = Vec::new();
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            if entry.file_type()?.is_file() {
                files.push(entry.path());
            }
        }
        files.sort();
        let sizes = files
            .iter()
            .map(|f| fs::metadata(f).map(|m| m.len()).unwrap_or(0))
            .collect();
        Ok(Corpus {
            source: Source::Directory { files, sizes },
        })
    }

    pub fn from_documents<I, D>(docs: I) -> Self
    where
        I: IntoIterator<Item = D>,
        D: Into<Vec<u8>>,
    {
        Corpus {
            source: Source::Memory(docs.into_iter().map(Into::into).collect()),
        }
    }

    /// Generates every document once and keeps the text in memory.
    pub fn materialize(&self) -> Result<Corpus> {
        let docs = (0..self.len()).map(|i| self.read(i)).collect::<io::Result<Vec<_>>>()?;
        Ok(Corpus::from_documents(docs))
    }

    pub fn len(&self) -> usize {
        match &self.source {
            Source::Synthetic { tokens, .. } => tokens.len(),
            Source::Directory { files, .. } => files.len(),
            Source::Memory(docs) => docs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Relative size of document `i`, used to balance the assignment.
    pub fn size_hint(&self, i: usize) -> u64 {
        match &self.source {
            Source::Synthetic { tokens, .. } => tokens[i],
            Source::Directory { sizes, .. } => sizes[i],
            Source::Memory(docs) => docs[i].len() as u64,
        }
    }

    pub fn read(&self, i: usize) -> io::Result<Vec<u8>> {
        match &self.source {
            Source::Synthetic { synth, tokens } => Ok(synth.document_text(i, tokens[i])),
            Source::Directory { files, .. } => fs::read(&files[i]),
            Source::Memory(docs) => Ok(docs[i].clone()),
        }
    }

    /// Splits the documents over `workers` by size, largest first onto the
    /// least loaded worker. Returns document indices per worker.
    pub fn assign(&self, workers: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&i| (std::cmp::Reverse(self.size_hint(i)), i));
        let mut load = vec![0u64; workers];
        let mut out = vec![Vec::new(); workers];
        for i in order {
            let w = (0..workers).min_by_key(|&w| (load[w], w)).expect("at least one worker");
            load[w] += self.size_hint(i).max(1);
            out[w].push(i);
        }
        for docs in &mut out {
            docs.sort_unstable();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_are_distinct_and_lowercase() {
        let mut seen = std::collections::HashSet::new();
        let mut w = Vec::new();
        for r in 1..=2000 {
            word_for(r, &mut w);
            assert!(w.iter().all(u8::is_ascii_lowercase));
            assert!(seen.insert(w.clone()));
        }
        word_for(1, &mut w);
        assert_eq!(w, b"a");
        word_for(27, &mut w);
        assert_eq!(w, b"aa");
    }

    #[test]
    fn document_sizes_sum_and_skew() {
        let synth = SyntheticCorpus {
            total_tokens: 10_007,
            documents: 10,
            size_skew: 4.0,
            ..SyntheticCorpus::default()
        };
        let sizes = synth.document_tokens();
        assert_eq!(sizes.iter().sum::<u64>(), 10_007);
        let (min, max) = (*sizes.iter().min().unwrap(), *sizes.iter().max().unwrap());
        assert!((max as f64 / min as f64 - 4.0).abs() < 0.01);
    }

    #[test]
    fn generation_is_deterministic() {
        let synth = SyntheticCorpus {
            total_tokens: 500,
            documents: 3,
            ..SyntheticCorpus::default()
        };
        let a = Corpus::synthetic(synth.clone()).unwrap();
        let b = Corpus::synthetic(synth).unwrap();
        for i in 0..3 {
            assert_eq!(a.read(i).unwrap(), b.read(i).unwrap());
        }
    }

    #[test]
    fn assignment_covers_every_document_once() {
        let c = Corpus::from_documents(vec![vec![0u8; 10], vec![0; 50], vec![0; 20], vec![0; 5], vec![0; 40]]);
        let a = c.assign(2);
        let mut all: Vec<usize> = a.concat();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        let loads: Vec<u64> = a.iter().map(|d| d.iter().map(|&i| c.size_hint(i)).sum()).collect();
        assert_eq!(loads.iter().sum::<u64>(), 125);
        assert!(loads.iter().all(|&l| l >= 55));
    }

    #[test]
    fn directory_corpus_reads_files_in_name_order() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b.txt"), "two").unwrap();
        fs::write(dir.path().join("a.txt"), "one").unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        let c = Corpus::directory(dir.path()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.read(0).unwrap(), b"one");
        assert_eq!(c.size_hint(1), 3);
    }
}
