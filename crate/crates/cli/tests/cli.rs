use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn sdbcd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdbcd"))
        .args(args)
        .arg("--out-dir")
        .arg(dir.join("out"))
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = sdbcd(dir, args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
}

/// A temporary directory holding a small config file.
fn workspace(body: &str) -> (TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, format!("n = 300\nm = 20\nmachines = 3\nT = 30\n{body}")).unwrap();
    let cfg = cfg.to_str().unwrap().to_string();
    (dir, cfg)
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join("out").join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn table(text: &str) -> toml::Table {
    text.parse().unwrap()
}

#[test]
fn gen_data_defaults_follow_the_reference_experiment() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data"]);
    let data = read(dir.path(), "data.csv");
    let mut lines = data.lines();
    assert_eq!(lines.next().unwrap(), "machine_id,s1,s2,z,x1,x2,x3,x4,x5");
    assert_eq!(lines.count(), 10_000);
    assert_eq!(read(dir.path(), "knots.csv").lines().count(), 101);
    let cfg = table(&read(dir.path(), "gen-data.config.toml"));
    let gamma: Vec<f64> = cfg["gamma"].as_array().unwrap().iter().map(|v| v.as_float().unwrap()).collect();
    assert_eq!(gamma, vec![-1.0, 2.0, 3.0, -2.0, 1.0]);
}

#[test]
fn file_keys_are_overridden_by_flags() {
    let (dir, cfg) = workspace("seed = 3\n");
    ok(dir.path(), &["gen-data", "--config", &cfg, "--seed", "9"]);
    assert_eq!(read(dir.path(), "data.csv").lines().count(), 301);
    let resolved = table(&read(dir.path(), "gen-data.config.toml"));
    assert_eq!(resolved["seed"].as_integer(), Some(9));
    assert_eq!(resolved["n"].as_integer(), Some(300));
}

#[test]
fn same_seed_gives_identical_bytes() {
    let (a, cfg) = workspace("");
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        ok(dir, &["gen-data", "--config", &cfg]);
        ok(dir, &["fit", "--config", &cfg, "--T", "5"]);
    }
    for name in ["data.csv", "knots.csv", "trace.csv"] {
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name}");
    }
}

#[test]
fn worker_count_does_not_change_the_trace() {
    let (dir, cfg) = workspace("");
    ok(dir.path(), &["gen-data", "--config", &cfg]);
    ok(dir.path(), &["fit", "--config", &cfg, "--T", "8", "--workers", "1"]);
    let one = read(dir.path(), "trace.csv");
    ok(dir.path(), &["fit", "--config", &cfg, "--T", "8", "--workers", "3"]);
    assert_eq!(one, read(dir.path(), "trace.csv"));
}

#[test]
fn partition_labels_every_row() {
    let (dir, cfg) = workspace("partition = \"area\"\n");
    ok(dir.path(), &["gen-data", "--config", &cfg]);
    ok(dir.path(), &["partition", "--config", &cfg]);
    let text = read(dir.path(), "partitioned.csv");
    let mut counts = [0usize; 3];
    for line in text.lines().skip(1) {
        let id: usize = line.split(',').next().unwrap().parse().unwrap();
        counts[id] += 1;
    }
    assert_eq!(counts.iter().sum::<usize>(), 300);
    assert!(counts.iter().all(|&c| c > 0));
}

#[test]
fn trace_has_one_row_per_machine_and_iteration() {
    let (dir, cfg) = workspace("");
    ok(dir.path(), &["gen-data", "--config", &cfg]);
    ok(dir.path(), &["fit", "--config", &cfg, "--T", "6", "--K", "4", "--topology", "er:0.9", "--reference", "central"]);
    let trace = read(dir.path(), "trace.csv");
    assert_eq!(trace.lines().count(), 1 + 7 * 3);
    let report = table(&read(dir.path(), "fit.toml"));
    assert_eq!(report["summary"]["kind"].as_str(), Some("decentralized"));
    assert_eq!(report["machine"].as_array().unwrap().len(), 3);
    assert!(report["summary"]["final_log_rel_err"].as_float().is_some());
}

#[test]
fn single_machine_fit_is_the_centralized_fit() {
    let (dir, cfg) = workspace("");
    ok(dir.path(), &["gen-data", "--config", &cfg]);
    ok(dir.path(), &["fit-central", "--config", &cfg]);
    let central = table(&read(dir.path(), "fit.toml"));
    ok(dir.path(), &["fit", "--config", &cfg, "--machines", "1"]);
    let single = table(&read(dir.path(), "fit.toml"));
    assert_eq!(central["estimate"], single["estimate"]);
    assert_eq!(single["summary"]["kind"].as_str(), Some("centralized"));
}

#[test]
fn topology_file_is_read_and_a_disconnected_one_is_rejected() {
    let (dir, cfg) = workspace("");
    ok(dir.path(), &["gen-data", "--config", &cfg]);
    let path = dir.path().join("path.txt");
    fs::write(&path, "0,1\n1,2\n").unwrap();
    ok(dir.path(), &["fit", "--config", &cfg, "--T", "3", "--topology", path.to_str().unwrap()]);

    let broken = dir.path().join("broken.txt");
    fs::write(&broken, "0,1\n").unwrap();
    fs::remove_file(dir.path().join("out/fit.toml")).unwrap();
    let out = sdbcd(dir.path(), &["fit", "--config", &cfg, "--T", "3", "--topology", broken.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    assert!(!dir.path().join("out/fit.toml").exists());
}

#[test]
fn failures_leave_no_partial_outputs() {
    let (dir, cfg) = workspace("");
    let out = sdbcd(dir.path(), &["fit", "--config", &cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-data"));
    let out = sdbcd(dir.path(), &["ci", "--config", &cfg]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("fit"));
    let leftovers: Vec<_> = fs::read_dir(dir.path().join("out"))
        .map(|d| d.map(|e| e.unwrap().file_name()).collect())
        .unwrap_or_default();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn bad_flags_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["fit", "--reference", "truth"][..], &["fit", "--topology", "er:2"], &["fit", "--machines", "0"], &["nope"]] {
        assert!(!sdbcd(dir.path(), args).status.success(), "{args:?}");
    }
}

#[test]
fn predict_writes_one_row_per_site() {
    let (dir, cfg) = workspace("");
    ok(dir.path(), &["gen-data", "--config", &cfg]);
    ok(dir.path(), &["fit", "--config", &cfg]);
    fs::write(dir.path().join("out/predict_sites.csv"), "s1,s2,x1,x2,x3,x4,x5\n0.1,0.1,0,0,0,0,0\n0.2,0.3,1,1,1,1,1\n0.9,0.9,0,0,0,0,1\n").unwrap();
    ok(dir.path(), &["predict", "--config", &cfg]);
    let pred = read(dir.path(), "predictions.csv");
    let rows: Vec<Vec<f64>> = pred.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(pred.lines().next(), Some("s1,s2,mean,std"));
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r[3] > 0.0 && r[2].is_finite()));
}

#[test]
fn intervals_are_symmetric_about_the_estimates() {
    let (dir, cfg) = workspace("level = 0.9\n");
    ok(dir.path(), &["gen-data", "--config", &cfg]);
    ok(dir.path(), &["fit", "--config", &cfg]);
    ok(dir.path(), &["ci", "--config", &cfg]);
    let report = table(&read(dir.path(), "ci.toml"));
    assert_eq!(report["level"].as_float(), Some(0.9));
    let names = ["gamma_1", "gamma_2", "gamma_3", "gamma_4", "gamma_5", "delta", "sigma", "beta"];
    for name in names {
        let s = &report[name];
        let (est, sd) = (s["estimate"].as_float().unwrap(), s["std"].as_float().unwrap());
        let (lo, hi) = (s["lower"].as_float().unwrap(), s["upper"].as_float().unwrap());
        assert!(sd > 0.0 && lo < est && est < hi, "{name}");
        assert!(((hi - est) - (est - lo)).abs() < 1e-9 * hi.abs().max(1.0), "{name}");
        assert!(((hi - est) / sd - 1.6448536269514722).abs() < 1e-9, "{name}");
    }
    assert!(report.contains_key("config"));
}

#[test]
fn estimate_nu_reports_every_candidate() {
    let (dir, cfg) = workspace("nu_candidates = [0.3, 0.5, 0.8]\n");
    ok(dir.path(), &["gen-data", "--config", &cfg]);
    ok(dir.path(), &["estimate-nu", "--config", &cfg]);
    let csv = read(dir.path(), "nu.csv");
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    let best = rows
        .iter()
        .map(|r| {
            let f: Vec<&str> = r.split(',').collect();
            (f[0].parse::<f64>().unwrap(), f[1].parse::<f64>().unwrap())
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let report = table(&read(dir.path(), "nu.toml"));
    assert_eq!(report["nu_hat"].as_float(), Some(best.0));
}
