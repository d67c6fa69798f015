use std::fs;
use std::path::Path;
use std::process::Command;

use groupflow_cli::results::RESULT_HEADER;
use groupflow_cli::run_settings;
use groupflow_cli::runner::MODEL_HEADER;
use groupflow_cli::settings::Settings;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_groupflow"))
}

fn settings(text: &str) -> Settings {
    Settings::parse(text).unwrap()
}

fn run(text: &str, dir: &Path) -> (groupflow_cli::Outcome, String) {
    let mut out = Vec::new();
    let outcome = run_settings(settings(text), Some(dir.as_os_str().to_owned()), &mut out, &mut |_| {}).unwrap();
    (outcome, String::from_utf8(out).unwrap())
}

fn rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(Result::unwrap).collect()
}

#[test]
fn wordcount_sweep_writes_one_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let (outcome, summary) = run(
        "app=wordcount\nranks=8,16,32\nreps=3\nvariant=conventional,decoupled\ntokens=20000\nnoise=exponential:1\nout=wc.csv",
        dir.path(),
    );
    assert!(outcome.all_passed);
    let text = fs::read_to_string(dir.path().join("wc.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), RESULT_HEADER);
    let rows = rows(&dir.path().join("wc.csv"));
    assert_eq!(rows.len(), 18);
    assert!(rows.iter().all(|r| &r[13] == "true"));
    let summary_rows = rows_from_str(&summary);
    assert_eq!(summary_rows.len(), 6);
    assert!(summary_rows.iter().all(|r| &r[5] == "3"));
    assert!(dir.path().join("wc.summary.csv").exists());
}

fn rows_from_str(s: &str) -> Vec<csv::StringRecord> {
    csv::Reader::from_reader(s.as_bytes()).records().map(Result::unwrap).collect()
}

#[test]
fn single_rep_has_zero_stddev() {
    let dir = tempfile::tempdir().unwrap();
    let (_, summary) = run("app=cg\nranks=8\nlocal=8\niters=10\nnoise=exponential:1", dir.path());
    for r in rows_from_str(&summary) {
        assert_eq!(&r[5], "1");
        assert_eq!(r[7].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn binary_honours_results_dir_and_gantt() {
    let dir = tempfile::tempdir().unwrap();
    let gantt = dir.path().join("g");
    let status = bin()
        .args(["particles", "--ranks", "8", "--alpha", "1/8", "--n-particles", "5000", "--out", "sub/p.csv"])
        .arg("--gantt")
        .arg(&gantt)
        .env("DS_RESULTS_DIR", dir.path())
        .current_dir(dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.path().join("p.csv").exists());
    assert!(dir.path().join("p.summary.csv").exists());
    let traces: Vec<_> = fs::read_dir(dir.path().join("g")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(traces.len(), 2);
    for t in traces {
        let text = fs::read_to_string(t).unwrap();
        assert_eq!(text.lines().next().unwrap(), "rank,t_start,t_end,tag");
        assert!(text.lines().count() > 1);
    }
}

#[test]
fn model_table_has_fixed_header() {
    let dir = tempfile::tempdir().unwrap();
    let (outcome, table) = run(
        "app=model\nt_w0=1000\nt_w1=400\nt_w1_prime=400\nt_sigma=100\ndata_volume_d=4194304\noverhead_o=0.05\nbeta=0.5\nalpha=1/16,1/8\ngranularity=1024,4096",
        dir.path(),
    );
    assert!(outcome.all_passed);
    let mut lines = table.lines();
    assert_eq!(lines.next().unwrap(), MODEL_HEADER);
    assert_eq!(lines.count(), 4);
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.conf");
    fs::write(&cfg, "# workload sweep\napp=example-workload-analysis\nranks=4\nsteps=3\nseed=5\n").unwrap();
    let out = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--seed", "7", "--reps", "2"])
        .env("DS_RESULTS_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = rows(&dir.path().join("example-workload-analysis.csv"));
    let seeds: Vec<_> = rows.iter().map(|r| r[5].to_string()).collect();
    assert_eq!(seeds, ["7", "8"]);
    let reps: Vec<_> = rows.iter().map(|r| r[6].to_string()).collect();
    assert_eq!(reps, ["0", "1"]);
}

#[test]
fn mismatched_or_unknown_settings_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cg.conf");
    fs::write(&cfg, "app=cg\n").unwrap();
    let st = bin().args(["wordcount", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(st.code(), Some(2));
    let st = bin().args(["cg", "--set", "bogus=1"]).status().unwrap();
    assert_eq!(st.code(), Some(2));
    let st = bin().args(["cg", "--ranks", "16,8"]).status().unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn cg_variants_share_history() {
    let dir = tempfile::tempdir().unwrap();
    let hist = dir.path().join("h");
    // 9 ranks: 3x3x1 for the halo-exchange variants, 2x2x2 plus one exchange rank for decoupled
    let text = format!(
        "app=cg\nranks=9\nalpha=1/9\nglobal=12\niters=15\nrhs=random:3\nlatency=2\nout=cg.csv\nhistory={}",
        hist.display()
    );
    let (outcome, _) = run(&text, dir.path());
    assert!(outcome.all_passed);
    let mut files: Vec<_> = fs::read_dir(&hist).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert_eq!(files.len(), 3);
    let histories: Vec<Vec<f64>> = files
        .iter()
        .map(|f| rows(f).iter().map(|r| r[1].parse().unwrap()).collect())
        .collect();
    assert_eq!(histories[0].len(), 15);
    for h in &histories[1..] {
        for (a, b) in h.iter().zip(&histories[0]) {
            assert!((a - b).abs() <= 1e-10 * b.abs(), "{a} vs {b}");
        }
    }
    let makespans: Vec<f64> = rows(&dir.path().join("cg.csv")).iter().map(|r| r[7].parse().unwrap()).collect();
    assert_ne!(makespans[0], makespans[2]);
}
