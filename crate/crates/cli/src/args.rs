//! Command-line surface. Every flag maps onto a settings key, so a config
//! file and flags mix freely and flags win.

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use crate::experiment::App;
use crate::settings::Settings;

#[derive(Debug, Parser)]
#[command(name = "groupflow", version, about = "Run decoupled and conventional variants of the sample applications on the rank simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Word histogram over a synthetic or on-disk corpus.
    Wordcount(WordcountCmd),
    /// Conjugate gradient on a 3-D Poisson problem.
    Cg(CgCmd),
    /// Particle mover with neighbor or decoupled exchange.
    Particles(ParticlesCmd),
    /// Particle output through shared, collective or decoupled writers.
    Pio(ParticlesCmd),
    /// Tabulates the analytical model over alpha and element size.
    Model(ModelCmd),
    /// Streams per-step workloads to one rank that reports min, max and median.
    #[command(alias = "example-workload-analysis")]
    Workload(WorkloadCmd),
    /// Runs the experiment described by a config file.
    Run(RunCmd),
}

/// Flags shared by every simulated application.
#[derive(Debug, Args, Default)]
pub struct Common {
    /// key=value file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Rank counts, ascending, e.g. 8,16,32.
    #[arg(long)]
    pub ranks: Option<String>,
    /// Decoupled group fractions, e.g. 1/16,0.125.
    #[arg(long)]
    pub alpha: Option<String>,
    /// Stream element sizes in bytes.
    #[arg(long)]
    pub granularity: Option<String>,
    /// Variants to run, comma separated.
    #[arg(long)]
    pub variant: Option<String>,
    /// none, uniform:LO:HI, exponential:MEAN or normal:MEAN:CV.
    #[arg(long)]
    pub noise: Option<String>,
    /// Per-message link latency in microseconds.
    #[arg(long)]
    pub latency: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    /// Repetitions per configuration; rep r uses seed + r.
    #[arg(long)]
    pub reps: Option<String>,
    /// Result table; the summary goes next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for one rank,t_start,t_end,tag file per run.
    #[arg(long)]
    pub gantt: Option<PathBuf>,
    /// Exit 0 even when an oracle check fails.
    #[arg(long)]
    pub allow_failures: bool,
    /// Any other key=value setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct WordcountCmd {
    #[command(flatten)]
    pub common: Common,
    /// `synthetic` or a directory of text files.
    #[arg(long)]
    pub corpus: Option<String>,
    #[arg(long)]
    pub zipf: Option<String>,
    /// Tokens at the smallest rank count.
    #[arg(long)]
    pub tokens: Option<String>,
    #[arg(long)]
    pub documents: Option<String>,
    #[arg(long)]
    pub vocabulary: Option<String>,
    /// Ratio of the largest to the smallest document.
    #[arg(long)]
    pub doc_skew: Option<String>,
    /// Pre-aggregate pairs on the mappers.
    #[arg(long)]
    pub combine: bool,
    /// Writes the final histogram as word<TAB>count lines.
    #[arg(long)]
    pub histogram: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CgCmd {
    #[command(flatten)]
    pub common: Common,
    /// Compute grid X,Y,Z; derived from the rank count when omitted.
    #[arg(long)]
    pub dims: Option<String>,
    /// Points per rank: N or X,Y,Z.
    #[arg(long)]
    pub local: Option<String>,
    /// Whole grid N or X,Y,Z, split over each variant's rank grid.
    #[arg(long, conflicts_with = "local")]
    pub global: Option<String>,
    #[arg(long)]
    pub iters: Option<String>,
    /// zero, manufactured or random[:SEED].
    #[arg(long)]
    pub rhs: Option<String>,
    /// Directory for iter,rho residual files.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParticlesCmd {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dims: Option<String>,
    /// Particles at the smallest rank count.
    #[arg(long)]
    pub n_particles: Option<String>,
    #[arg(long)]
    pub steps: Option<String>,
    /// neighbor and/or decoupled.
    #[arg(long)]
    pub exchange: Option<String>,
    /// none, shared, collective and/or decoupled.
    #[arg(long)]
    pub io: Option<String>,
    /// Fraction of compute ranks that start with particles.
    #[arg(long)]
    pub skew: Option<String>,
    #[arg(long)]
    pub max_speed: Option<String>,
    /// Keep particle files in this directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WorkloadCmd {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub steps: Option<String>,
    #[arg(long)]
    pub workload_min: Option<String>,
    #[arg(long)]
    pub workload_max: Option<String>,
    /// Writes step,min,max,median lines of the last run.
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelCmd {
    /// key=value file with t_w0, t_w1, t_w1_prime, t_sigma, data_volume_d,
    /// overhead_o and beta or beta0/beta_k.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<String>,
    #[arg(long)]
    pub granularity: Option<String>,
    /// Also write the table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RunCmd {
    #[command(flatten)]
    pub common: Common,
}

fn put(s: &mut Settings, key: &str, v: &Option<String>) {
    if let Some(v) = v {
        s.set(key, v.as_str());
    }
}

fn put_path(s: &mut Settings, key: &str, v: &Option<PathBuf>) {
    if let Some(v) = v {
        s.set(key, v.to_string_lossy());
    }
}

fn put_flag(s: &mut Settings, key: &str, on: bool) {
    if on {
        s.set(key, "true");
    }
}

impl Common {
    fn apply(&self, s: &mut Settings) -> Result<()> {
        put(s, "ranks", &self.ranks);
        put(s, "alpha", &self.alpha);
        put(s, "granularity", &self.granularity);
        put(s, "variant", &self.variant);
        put(s, "noise", &self.noise);
        put(s, "latency", &self.latency);
        put(s, "seed", &self.seed);
        put(s, "reps", &self.reps);
        put_path(s, "out", &self.out);
        put_path(s, "gantt", &self.gantt);
        put_flag(s, "allow_failures", self.allow_failures);
        for pair in &self.set {
            s.set_pair(pair)?;
        }
        Ok(())
    }
}

fn base(config: &Option<PathBuf>) -> Result<Settings> {
    match config {
        Some(p) => Settings::load(p),
        None => Ok(Settings::new()),
    }
}

/// Settings for `app`: the config file, then the flags.
fn with_app(app: &str, config: &Option<PathBuf>, flags: Settings) -> Result<Settings> {
    let mut s = base(config)?;
    if let Some(file_app) = s.get("app") {
        if file_app.parse::<App>()? != app.parse::<App>()? {
            bail!("config file is for `{file_app}`, not `{app}`");
        }
    }
    s.merge(flags);
    s.set("app", app);
    Ok(s)
}

impl Command {
    /// Collects the settings this invocation describes.
    pub fn settings(&self) -> Result<Settings> {
        let mut f = Settings::new();
        match self {
            Command::Wordcount(c) => {
                c.common.apply(&mut f)?;
                put(&mut f, "corpus", &c.corpus);
                put(&mut f, "zipf", &c.zipf);
                put(&mut f, "tokens", &c.tokens);
                put(&mut f, "documents", &c.documents);
                put(&mut f, "vocabulary", &c.vocabulary);
                put(&mut f, "doc_skew", &c.doc_skew);
                put_flag(&mut f, "combine", c.combine);
                put_path(&mut f, "histogram", &c.histogram);
                with_app("wordcount", &c.common.config, f)
            }
            Command::Cg(c) => {
                c.common.apply(&mut f)?;
                put(&mut f, "dims", &c.dims);
                put(&mut f, "local", &c.local);
                put(&mut f, "global", &c.global);
                put(&mut f, "iters", &c.iters);
                put(&mut f, "rhs", &c.rhs);
                put_path(&mut f, "history", &c.history);
                with_app("cg", &c.common.config, f)
            }
            Command::Particles(c) | Command::Pio(c) => {
                c.common.apply(&mut f)?;
                put(&mut f, "dims", &c.dims);
                put(&mut f, "n_particles", &c.n_particles);
                put(&mut f, "steps", &c.steps);
                put(&mut f, "exchange", &c.exchange);
                put(&mut f, "io", &c.io);
                put(&mut f, "skew", &c.skew);
                put(&mut f, "max_speed", &c.max_speed);
                put_path(&mut f, "data", &c.data);
                let app = if matches!(self, Command::Pio(_)) { "pio" } else { "particles" };
                with_app(app, &c.common.config, f)
            }
            Command::Workload(c) => {
                c.common.apply(&mut f)?;
                put(&mut f, "steps", &c.steps);
                put(&mut f, "workload_min", &c.workload_min);
                put(&mut f, "workload_max", &c.workload_max);
                put_path(&mut f, "stats", &c.stats);
                with_app("example-workload-analysis", &c.common.config, f)
            }
            Command::Model(c) => {
                put(&mut f, "alpha", &c.alpha);
                put(&mut f, "granularity", &c.granularity);
                put_path(&mut f, "out", &c.out);
                for pair in &c.set {
                    f.set_pair(pair)?;
                }
                with_app("model", &c.config, f)
            }
            Command::Run(c) => {
                let Some(path) = &c.common.config else { bail!("run needs --config FILE") };
                let mut s = Settings::load(path)?;
                c.common.apply(&mut f)?;
                s.merge(f);
                Ok(s)
            }
        }
    }
}
