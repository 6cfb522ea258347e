use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use rainsense_cli::{run, EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_USAGE};
use rainsense_core::dataio::{load_dataset, read_csv};
use rainsense_core::{RainLabel, Split};
use rainsense_models::{evaluate, Model};

const CONFIG: &str = "\
# small three-class run
train_count = 4
test_count = 2
window = 20
session_len = 40
geometry = los
high_wind = true
";

fn rs(args: &[&str]) -> i32 {
    let mut argv = vec!["rainsense"];
    argv.extend_from_slice(args);
    run(argv)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulated(dir: &Path) -> PathBuf {
    let cfg = dir.join("s.cfg");
    fs::write(&cfg, CONFIG).unwrap();
    let out = dir.join("d.rgn");
    assert_eq!(
        rs(&[
            "simulate",
            "--config",
            p(&cfg),
            "--out",
            p(&out),
            "--seed",
            "7"
        ]),
        EXIT_OK
    );
    out
}

#[test]
fn simulate_is_byte_identical_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulated(dir.path());
    let first = fs::read(&a).unwrap();
    let b = dir.path().join("again.rgn");
    let status = Command::new(env!("CARGO_BIN_EXE_rainsense"))
        .args([
            "simulate",
            "--config",
            p(&dir.path().join("s.cfg")),
            "--out",
            p(&b),
            "--seed",
            "7",
        ])
        .env("RAINSENSE_THREADS", "3")
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(first, fs::read(&b).unwrap());

    let ds = load_dataset(&a).unwrap();
    assert_eq!(ds.len(), 18);
    for l in RainLabel::ALL {
        assert_eq!(ds.count(l, Split::Train), 4);
        assert_eq!(ds.count(l, Split::Test), 2);
    }
    assert!(ds
        .records
        .iter()
        .all(|r| r.condition.high_wind && !r.condition.nlos));
}

#[test]
fn fit_powerlaw_table_and_idempotence() {
    let dir = tempfile::tempdir().unwrap();
    let d = simulated(dir.path());
    let out = dir.path().join("fit.csv");
    let args = [
        "fit-powerlaw",
        "--in",
        p(&d),
        "--frames",
        "50",
        "--seed",
        "1",
        "--out",
        p(&out),
    ];
    assert_eq!(rs(&args), EXIT_OK);
    let first = fs::read(&out).unwrap();
    assert_eq!(rs(&args), EXIT_OK);
    assert_eq!(first, fs::read(&out).unwrap());

    let (header, rows) = read_csv(&out).unwrap();
    assert_eq!(header, ["scenario", "eta0_db", "n_pdp", "rmse_db"]);
    assert_eq!(rows.len(), 3);
    for r in &rows {
        let n: f64 = r[2].parse().unwrap();
        assert!(n > 0.0);
        assert!(r[3].parse::<f64>().unwrap() >= 0.0);
    }

    let aligned = dir.path().join("aligned.csv");
    assert_eq!(
        rs(&[
            "fit-powerlaw",
            "--in",
            p(&d),
            "--frames",
            "50",
            "--align-peak",
            "--out",
            p(&aligned)
        ]),
        EXIT_OK
    );
}

#[test]
fn analysis_tables_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let d = simulated(dir.path());
    let out = dir.path().join("plots");
    assert_eq!(
        rs(&[
            "export-plots",
            "--in",
            p(&d),
            "--out-dir",
            p(&out),
            "--frames",
            "40"
        ]),
        EXIT_OK
    );
    let expect = [
        ("rss_series.csv", vec!["class", "t", "rss_db"]),
        (
            "rss_windowed.csv",
            vec!["class", "window_start", "mean_db", "var_db2"],
        ),
        (
            "rss_distribution.csv",
            vec!["class", "kind", "x_db", "value"],
        ),
        (
            "rss_summary.csv",
            vec!["class", "mean_db", "mean_window_var_db2"],
        ),
        (
            "pdp_average.csv",
            vec!["class", "tap", "delay_ns", "power_db"],
        ),
        (
            "pdp_example.csv",
            vec!["class", "tap", "delay_ns", "power_db"],
        ),
        (
            "mpc_components.csv",
            vec!["class", "tap", "delay_ns", "power_db", "threshold_db"],
        ),
        (
            "mpc_summary.csv",
            vec![
                "class",
                "total_power_db",
                "max_power_db",
                "rms_delay_spread_ns",
                "mean_components",
                "frames",
            ],
        ),
        (
            "powerlaw_fit.csv",
            vec!["scenario", "eta0_db", "n_pdp", "rmse_db"],
        ),
        (
            "powerlaw_curve.csv",
            vec!["scenario", "log_delay_db", "mean_power_db", "fit_power_db"],
        ),
    ];
    for (name, header) in expect {
        let (h, rows) = read_csv(out.join(name)).unwrap();
        assert_eq!(h, header, "{name}");
        assert!(!rows.is_empty(), "{name}");
    }
    let (_, series) = read_csv(out.join("rss_series.csv")).unwrap();
    assert_eq!(series.len(), 18 * 20);
    let (_, avg) = read_csv(out.join("pdp_average.csv")).unwrap();
    assert_eq!(avg.len(), 3 * 40);

    let single = dir.path().join("single");
    assert_eq!(
        rs(&["analyze-rss", "--in", p(&d), "--out-dir", p(&single)]),
        EXIT_OK
    );
    assert_eq!(
        rs(&["analyze-pdp", "--in", p(&d), "--out-dir", p(&single)]),
        EXIT_OK
    );
    assert_eq!(
        rs(&[
            "extract-mpc",
            "--in",
            p(&d),
            "--out-dir",
            p(&single),
            "--noise-floor-db",
            "-116"
        ]),
        EXIT_OK
    );
    assert!(single.join("mpc_summary.csv").exists());
}

#[test]
fn train_then_eval_matches_library_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let d = simulated(dir.path());
    let ck = dir.path().join("m.ckpt");
    let log = dir.path().join("log.csv");
    let args = [
        "train",
        "--in",
        p(&d),
        "--arch",
        "rss-net",
        "--seed",
        "3",
        "--epochs",
        "2",
        "--batch",
        "4",
        "--out",
        p(&ck),
        "--log",
        p(&log),
    ];
    assert_eq!(rs(&args), EXIT_OK);
    let (h, rows) = read_csv(&log).unwrap();
    assert_eq!(h, ["epoch", "lr", "loss", "train_accuracy"]);
    assert_eq!(rows.len(), 2);

    let res = dir.path().join("res.csv");
    assert_eq!(
        rs(&["eval", "--model", p(&ck), "--in", p(&d), "--out", p(&res)]),
        EXIT_OK
    );
    let (h, rows) = read_csv(&res).unwrap();
    assert_eq!(h, ["condition", "class", "accuracy", "average"]);
    assert_eq!(rows.len(), 3);

    let mut model = Model::load(&ck).unwrap();
    let test = load_dataset(&d).unwrap().subset(Split::Test).records;
    let table = evaluate(&mut model, &test).unwrap();
    for (row, label) in rows.iter().zip(RainLabel::ALL) {
        assert_eq!(row[0], "los_high_wind");
        assert_eq!(row[1], label.name());
        assert_eq!(row[2], format!("{:.2}", table.per_class[label.index()]));
        assert_eq!(row[3], format!("{:.2}", table.average));
    }

    // retraining with the same seed reproduces the checkpoint
    let ck2 = dir.path().join("m2.ckpt");
    let mut again = args;
    again[12] = p(&ck2);
    assert_eq!(rs(&again), EXIT_OK);
    assert_eq!(fs::read(&ck).unwrap(), fs::read(&ck2).unwrap());
}

#[test]
fn failures_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(rs(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(rs(&[]), EXIT_USAGE);

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "test_count = 2\n").unwrap();
    let out = dir.path().join("x.rgn");
    assert_eq!(
        rs(&["simulate", "--config", p(&cfg), "--out", p(&out)]),
        EXIT_CONFIG
    );
    fs::write(&cfg, "train_count = 2\ntest_count = 2\nbogus = 1\n").unwrap();
    assert_eq!(
        rs(&["simulate", "--config", p(&cfg), "--out", p(&out)]),
        EXIT_CONFIG
    );

    let missing = dir.path().join("nope.rgn");
    assert_eq!(
        rs(&[
            "analyze-pdp",
            "--in",
            p(&missing),
            "--out-dir",
            p(dir.path())
        ]),
        EXIT_IO
    );
    assert_eq!(
        rs(&["simulate", "--config", p(&missing), "--out", p(&out)]),
        EXIT_IO
    );

    let d = simulated(dir.path());
    assert_ne!(
        rs(&["train", "--in", p(&d), "--arch", "lstm", "--out", p(&out)]),
        EXIT_OK
    );
}

#[test]
fn binary_reports_errors_on_stderr() {
    let o = Command::new(env!("CARGO_BIN_EXE_rainsense"))
        .args([
            "simulate",
            "--config",
            "/nonexistent.cfg",
            "--out",
            "/tmp/x.rgn",
        ])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(EXIT_IO));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("cannot read config"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, "train_count = 1\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_rainsense"))
        .args([
            "simulate",
            "--config",
            p(&cfg),
            "--out",
            p(&dir.path().join("x")),
        ])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&o.stderr).contains("test_count"));
}
