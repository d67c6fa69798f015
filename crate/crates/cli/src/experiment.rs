//! One experiment: an application, the variants to compare and the sweep
//! over rank counts, group fractions, element sizes and repetitions.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Result};
use groupflow::apps::cg::{CgVariant, Rhs};
use groupflow::apps::grid::parse_dims;
use groupflow::apps::particles::{ExchangeVariant, IoVariant, RECORD_BYTES};
use groupflow::apps::wordcount::{Variant, DEFAULT_BATCH_PAIRS, PAIR_BYTES};
use groupflow::model::{BetaModel, PerfParams};
use groupflow::NoiseSpec;

use crate::settings::{Fraction, Settings};

pub const DEFAULT_RANKS: [usize; 4] = [8, 16, 32, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum App {
    Wordcount,
    Cg,
    Particles,
    /// Particle output only: neighbor exchange, one I/O variant per row.
    Pio,
    Model,
    Workload,
}

impl App {
    pub fn name(self) -> &'static str {
        match self {
            App::Wordcount => "wordcount",
            App::Cg => "cg",
            App::Particles => "particles",
            App::Pio => "pio",
            App::Model => "model",
            App::Workload => "example-workload-analysis",
        }
    }
}

impl fmt::Display for App {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for App {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "wordcount" => App::Wordcount,
            "cg" => App::Cg,
            "particles" => App::Particles,
            "pio" => App::Pio,
            "model" => App::Model,
            "example-workload-analysis" | "example_workload_analysis" | "workload" => App::Workload,
            other => bail!("unknown app `{other}`"),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CorpusSource {
    Synthetic,
    Directory(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordcountParams {
    pub variants: Vec<Variant>,
    pub corpus: CorpusSource,
    pub zipf: f64,
    /// Tokens at the smallest rank count; scaled with `P`.
    pub tokens: u64,
    /// Documents at the smallest rank count; scaled with `P`.
    pub documents: usize,
    pub vocabulary: u64,
    pub doc_skew: f64,
    pub combine: bool,
    pub histogram: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgParams {
    pub variants: Vec<CgVariant>,
    /// Compute grid; derived from the rank count when absent.
    pub dims: Option<[usize; 3]>,
    pub local: [usize; 3],
    /// Fixed global grid split over each variant's compute grid; overrides
    /// `local` so variants with different rank layouts solve one problem.
    pub global: Option<[usize; 3]>,
    pub iterations: usize,
    pub rhs: Rhs,
    pub history: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticlesParams {
    pub exchanges: Vec<ExchangeVariant>,
    pub ios: Vec<IoVariant>,
    pub dims: Option<[usize; 3]>,
    /// Particles at the smallest rank count; scaled with `P`.
    pub particles: u64,
    pub steps: usize,
    /// Fraction of compute ranks holding particles at the start.
    pub skew: f64,
    pub max_speed: f64,
    /// Keeps particle files here instead of a temporary directory.
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadParams {
    pub steps: usize,
    pub min: f64,
    pub max: f64,
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub params: PerfParams,
    pub beta: BetaModel,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AppParams {
    Wordcount(WordcountParams),
    Cg(CgParams),
    Particles(ParticlesParams),
    Workload(WorkloadParams),
    Model(ModelParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub app: App,
    pub ranks: Vec<usize>,
    pub alphas: Vec<f64>,
    /// Stream element sizes in bytes.
    pub granularities: Vec<usize>,
    pub noise: NoiseSpec,
    pub latency_us: f64,
    pub seed: u64,
    pub reps: usize,
    pub out: Option<PathBuf>,
    pub gantt: Option<PathBuf>,
    pub allow_failures: bool,
    pub params: AppParams,
}

fn fractions(s: &mut Settings, key: &str, default: &[f64]) -> Result<Vec<f64>> {
    Ok(s.take_list::<Fraction>(key)?
        .map(|v| v.into_iter().map(|f| f.0).collect())
        .unwrap_or_else(|| default.to_vec()))
}

fn parse_items<T>(v: &str) -> Result<Vec<T>>
where
    T: FromStr,
    T::Err: fmt::Display,
{
    let items: Vec<T> = v
        .split(',')
        .map(str::trim)
        .filter(|i| !i.is_empty())
        .map(|i| i.parse().map_err(|e| anyhow!("`{i}`: {e}")))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        bail!("empty variant list");
    }
    Ok(items)
}

fn parse_rhs(s: &str) -> Result<Rhs> {
    let (name, arg) = s.split_once(':').unwrap_or((s, ""));
    Ok(match name.trim() {
        "zero" => Rhs::Zero,
        "manufactured" => Rhs::Manufactured,
        "random" => Rhs::Random {
            seed: if arg.is_empty() { 0 } else { arg.trim().parse()? },
        },
        other => bail!("unknown rhs `{other}`; expected zero, manufactured or random[:SEED]"),
    })
}

fn parse_local(s: &str) -> Result<[usize; 3]> {
    if let Ok(n) = s.trim().parse::<usize>() {
        return Ok([n; 3]);
    }
    let v: Vec<usize> = s.split(',').map(|t| t.trim().parse()).collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| anyhow!("local extent `{s}` must be N or X,Y,Z"))
}

fn dims(s: &mut Settings) -> Result<Option<[usize; 3]>> {
    s.take("dims").map(|d| parse_dims(&d).map_err(Into::into)).transpose()
}

impl Experiment {
    /// Consumes `settings`; every key must be understood.
    pub fn from_settings(mut s: Settings) -> Result<Self> {
        let app: App = s.take("app").ok_or_else(|| anyhow!("no `app` given"))?.parse()?;
        let default_granularity = match app {
            App::Wordcount => vec![DEFAULT_BATCH_PAIRS * PAIR_BYTES],
            App::Particles | App::Pio => vec![64 * RECORD_BYTES],
            App::Model => vec![64, 256, 1024, 4096, 16384],
            App::Cg | App::Workload => vec![0],
        };
        let default_alpha: &[f64] = if app == App::Model { &[1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0] } else { &[1.0 / 16.0] };
        let ranks = s.take_list("ranks")?.unwrap_or_else(|| DEFAULT_RANKS.to_vec());
        let alphas = fractions(&mut s, "alpha", default_alpha)?;
        let granularities = s.take_list("granularity")?.unwrap_or(default_granularity);
        let noise = match s.take("noise") {
            Some(n) => NoiseSpec::parse(&n)?,
            None => NoiseSpec::None,
        };
        let latency_us = s.take_or("latency", 0.0)?;
        let seed = s.take_or("seed", 1u64)?;
        let reps = s.take_or("reps", 1usize)?;
        let out = s.take_parsed::<PathBuf>("out")?;
        let gantt = s.take_parsed::<PathBuf>("gantt")?;
        let allow_failures = s.take_bool("allow_failures")?;

        let params = match app {
            App::Wordcount => {
                let variants = s
                    .take_list("variant")?
                    .unwrap_or_else(|| vec![Variant::Conventional, Variant::Decoupled]);
                let corpus = match s.take("corpus").as_deref() {
                    None | Some("synthetic") => CorpusSource::Synthetic,
                    Some(dir) => CorpusSource::Directory(PathBuf::from(dir)),
                };
                let first = ranks.first().copied().unwrap_or(1);
                AppParams::Wordcount(WordcountParams {
                    variants,
                    corpus,
                    zipf: s.take_or("zipf", 1.1)?,
                    tokens: s.take_or("tokens", 250_000)?,
                    documents: s.take_or("documents", 4 * first)?,
                    vocabulary: s.take_or("vocabulary", 50_000)?,
                    doc_skew: s.take_or("doc_skew", 1.0)?,
                    combine: s.take_bool("combine")?,
                    histogram: s.take_parsed("histogram")?,
                })
            }
            App::Cg => AppParams::Cg(CgParams {
                variants: s.take_list("variant")?.unwrap_or_else(|| CgVariant::ALL.to_vec()),
                dims: dims(&mut s)?,
                global: match (s.get("global").is_some(), s.get("local").is_some()) {
                    (true, true) => bail!("give either `local` or `global`, not both"),
                    (true, false) => s.take("global").map(|g| parse_local(&g)).transpose()?,
                    _ => None,
                },
                local: s.take("local").map(|l| parse_local(&l)).transpose()?.unwrap_or([24; 3]),
                iterations: s.take_or("iters", 50)?,
                rhs: s.take("rhs").map(|r| parse_rhs(&r)).transpose()?.unwrap_or(Rhs::Manufactured),
                history: s.take_parsed("history")?,
            }),
            App::Particles | App::Pio => {
                let variant = s.take("variant");
                let mut exchange = s.take("exchange");
                let mut io = s.take("io");
                if let Some(v) = variant {
                    let slot = if app == App::Pio { &mut io } else { &mut exchange };
                    if slot.is_some() {
                        bail!("give either `variant` or `{}`, not both", if app == App::Pio { "io" } else { "exchange" });
                    }
                    *slot = Some(v);
                }
                let exchanges: Vec<ExchangeVariant> = match exchange {
                    Some(v) => parse_items(&v)?,
                    None if app == App::Pio => vec![ExchangeVariant::Neighbor],
                    None => vec![ExchangeVariant::Neighbor, ExchangeVariant::Decoupled],
                };
                let ios: Vec<IoVariant> = match io {
                    Some(v) => parse_items(&v)?,
                    None if app == App::Pio => vec![IoVariant::Shared, IoVariant::Collective, IoVariant::Decoupled],
                    None => vec![IoVariant::None],
                };
                if app == App::Pio && ios.contains(&IoVariant::None) {
                    bail!("pio needs an I/O variant other than none");
                }
                AppParams::Particles(ParticlesParams {
                    exchanges,
                    ios,
                    dims: dims(&mut s)?,
                    particles: s.take_or("n_particles", 100_000)?,
                    steps: s.take_or("steps", if app == App::Pio { 1 } else { 3 })?,
                    skew: s.take_or("skew", 1.0)?,
                    max_speed: s.take_or("max_speed", 0.25)?,
                    data: s.take_parsed("data")?,
                })
            }
            App::Workload => {
                s.take("variant");
                AppParams::Workload(WorkloadParams {
                    steps: s.take_or("steps", 10)?,
                    min: s.take_or("workload_min", 10.0)?,
                    max: s.take_or("workload_max", 100.0)?,
                    stats: s.take_parsed("stats")?,
                })
            }
            App::Model => {
                let beta = match (s.take_parsed::<Fraction>("beta")?, s.take_parsed::<Fraction>("beta0")?, s.take_parsed::<f64>("beta_k")?) {
                    (Some(b), None, None) => BetaModel::Constant(b.0),
                    (None, b0, k) => BetaModel::Affine {
                        beta0: b0.map_or(0.0, |b| b.0),
                        k: k.unwrap_or(1.0),
                    },
                    _ => bail!("give either `beta` or `beta0`/`beta_k`"),
                };
                let params = PerfParams {
                    t_w0: s.take_or("t_w0", 1000.0)?,
                    t_w1: s.take_or("t_w1", 400.0)?,
                    t_w1_prime: s.take_or("t_w1_prime", 400.0)?,
                    t_sigma: s.take_or("t_sigma", 100.0)?,
                    data_volume_d: s.take_or("data_volume_d", 4.0 * 1024.0 * 1024.0)?,
                    overhead_o: s.take_or("overhead_o", 0.05)?,
                    total_ranks: ranks.first().copied().unwrap_or(2),
                    ..PerfParams::default()
                };
                AppParams::Model(ModelParams { params, beta })
            }
        };
        s.finish(app.name())?;
        let e = Experiment {
            app,
            ranks,
            alphas,
            granularities,
            noise,
            latency_us,
            seed,
            reps,
            out,
            gantt,
            allow_failures,
            params,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            bail!("reps must be at least 1");
        }
        if self.ranks.is_empty() || self.ranks.windows(2).any(|w| w[0] >= w[1]) {
            bail!("rank list must be non-empty and strictly ascending: {:?}", self.ranks);
        }
        if self.app != App::Model && self.ranks[0] < 2 {
            bail!("every run needs at least two ranks");
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            bail!("alpha must lie in (0, 1), got {a}");
        }
        if self.app != App::Cg && self.app != App::Workload && self.granularities.contains(&0) {
            bail!("granularity must be positive");
        }
        if !(self.latency_us.is_finite() && self.latency_us >= 0.0) {
            bail!("latency must be >= 0");
        }
        match &self.params {
            AppParams::Wordcount(w) if w.documents == 0 => bail!("documents must be positive"),
            AppParams::Cg(c) if c.iterations == 0 => bail!("iters must be positive"),
            AppParams::Particles(p) if !(p.skew > 0.0 && p.skew <= 1.0) => bail!("skew must lie in (0, 1]"),
            AppParams::Workload(w) if !(w.min <= w.max && w.min >= 0.0) => bail!("need 0 <= workload_min <= workload_max"),
            _ => Ok(()),
        }
    }

    /// Weak scaling: workload grows with `P` relative to the first count.
    pub fn scale(&self, ranks: usize) -> f64 {
        ranks as f64 / self.ranks[0] as f64
    }
}
