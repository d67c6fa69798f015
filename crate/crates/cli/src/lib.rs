//! Experiment driver for the groupflow sample applications.

pub mod args;
pub mod experiment;
pub mod results;
pub mod runner;
pub mod settings;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Result;

use crate::experiment::{App, Experiment};
use crate::results::{resolve_output, summarize, summary_path, write_csv, write_csv_file, RESULT_HEADER, RESULTS_DIR_VAR};
use crate::runner::{model_table, Runner, MODEL_HEADER};
use crate::settings::Settings;

/// How an invocation ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outcome {
    pub all_passed: bool,
    pub allow_failures: bool,
}

impl Outcome {
    pub fn success(&self) -> bool {
        self.all_passed || self.allow_failures
    }
}

/// Parses settings and runs the experiment they describe.
pub fn execute(cli: &args::Cli) -> Result<Outcome> {
    let settings = cli.command.settings()?;
    let results_dir = std::env::var_os(RESULTS_DIR_VAR);
    run_settings(settings, results_dir, &mut std::io::stdout().lock(), &mut |line| eprintln!("{line}"))
}

/// Runs an experiment from settings, writing tables to `stdout` and
/// progress to `log`.
pub fn run_settings(
    settings: Settings,
    results_dir: Option<OsString>,
    stdout: &mut dyn Write,
    log: &mut dyn FnMut(&str),
) -> Result<Outcome> {
    let exp = Experiment::from_settings(settings)?;
    exp.validate()?;
    let dir = results_dir.as_deref();

    if exp.app == App::Model {
        let rows = model_table(&exp)?;
        write_csv(&rows, Some(MODEL_HEADER), &mut *stdout)?;
        if let Some(out) = &exp.out {
            let path = resolve_output(out, dir);
            write_csv_file(&rows, Some(MODEL_HEADER), &path)?;
            log(&format!("wrote {}", path.display()));
        }
        return Ok(Outcome { all_passed: true, allow_failures: exp.allow_failures });
    }

    let rows = Runner::new(&exp, dir, |line| log(line)).run()?;
    let out = exp.out.clone().unwrap_or_else(|| default_output(exp.app));
    let path = resolve_output(&out, dir);
    write_csv_file(&rows, Some(RESULT_HEADER), &path)?;
    let summary = summarize(&rows);
    let spath = summary_path(&path);
    write_csv_file(&summary, None, &spath)?;
    write_csv(&summary, None, &mut *stdout)?;
    log(&format!("wrote {} and {}", path.display(), spath.display()));

    let failed = rows.iter().filter(|r| !r.oracle_pass).count();
    if failed > 0 {
        log(&format!("{failed} of {} runs failed their oracle check", rows.len()));
    }
    Ok(Outcome { all_passed: failed == 0, allow_failures: exp.allow_failures })
}

fn default_output(app: App) -> PathBuf {
    Path::new("results").join(format!("{}.csv", app.name()))
}
