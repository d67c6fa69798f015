//! Result rows, per-configuration summaries and output locations.

use std::collections::BTreeMap;
use std::ffi::OsStr;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use groupflow::runtime::{EventTrace, SimTime};
use serde::Serialize;

/// Environment variable that redirects every output file into one
/// directory.
pub const RESULTS_DIR_VAR: &str = "DS_RESULTS_DIR";

/// One run. Phase times are per-rank means in microseconds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub app: String,
    pub variant: String,
    pub ranks: usize,
    pub alpha: f64,
    pub granularity: usize,
    pub seed: u64,
    pub rep: usize,
    pub makespan_us: f64,
    pub compute_us: f64,
    pub idle_us: f64,
    pub send_us: f64,
    pub recv_us: f64,
    pub io_us: f64,
    pub oracle_pass: bool,
}

pub const RESULT_HEADER: &str =
    "app,variant,ranks,alpha,granularity,seed,rep,makespan_us,compute_us,idle_us,send_us,recv_us,io_us,oracle_pass";

/// Phase columns from a run's trace.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Phases {
    pub compute_us: f64,
    pub idle_us: f64,
    pub send_us: f64,
    pub recv_us: f64,
    pub io_us: f64,
}

impl Phases {
    pub fn from_trace(trace: &EventTrace, ranks: usize) -> Result<Self> {
        if trace.is_empty() || ranks == 0 {
            return Ok(Phases::default());
        }
        let total = trace.summary()?.total();
        let mean = |t: SimTime| t.as_micros() / ranks as f64;
        Ok(Phases {
            compute_us: mean(total.compute),
            idle_us: mean(total.idle),
            send_us: mean(total.send),
            recv_us: mean(total.recv),
            io_us: mean(total.io),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub app: String,
    pub variant: String,
    pub ranks: usize,
    pub alpha: f64,
    pub granularity: usize,
    pub runs: usize,
    pub mean_makespan_us: f64,
    /// Sample standard deviation; 0 for a single run.
    pub stddev_makespan_us: f64,
    pub oracle_pass: bool,
}

pub fn mean_stddev(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Groups rows by configuration, keeping first-seen order.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<(String, String, usize, u64, usize), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.app.clone(), r.variant.clone(), r.ranks, r.alpha.to_bits(), r.granularity);
        let entry = groups.entry(key.clone()).or_default();
        if entry.is_empty() {
            order.push(key);
        }
        entry.push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let times: Vec<f64> = g.iter().map(|r| r.makespan_us).collect();
            let (mean, sd) = mean_stddev(&times);
            SummaryRow {
                app: key.0,
                variant: key.1,
                ranks: key.2,
                alpha: f64::from_bits(key.3),
                granularity: key.4,
                runs: g.len(),
                mean_makespan_us: mean,
                stddev_makespan_us: sd,
                oracle_pass: g.iter().all(|r| r.oracle_pass),
            }
        })
        .collect()
}

/// Where an output file goes: `path` itself, or its file name inside the
/// results directory when one is set.
pub fn resolve_output(path: &Path, results_dir: Option<&OsStr>) -> PathBuf {
    match results_dir.filter(|d| !d.is_empty()) {
        Some(dir) => Path::new(dir).join(path.file_name().unwrap_or(path.as_os_str())),
        None => path.to_path_buf(),
    }
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

/// `results.csv` becomes `results.summary.csv`.
pub fn summary_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "results".into());
    out.with_file_name(format!("{stem}.summary.csv"))
}

pub fn write_csv<T: Serialize>(rows: &[T], header: Option<&str>, out: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(header.is_none()).from_writer(out);
    if let Some(h) = header {
        w.write_record(h.split(','))?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file<T: Serialize>(rows: &[T], header: Option<&str>, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_csv(rows, header, std::io::BufWriter::new(f)).with_context(|| format!("writing {}", path.display()))
}
