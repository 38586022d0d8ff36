use std::path::Path;
use std::process::{Command, Output};

fn mains(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mains"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn rms_horizontal(metrics: &Path) -> f64 {
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(metrics).unwrap()).unwrap();
    v["rms_horizontal"].as_f64().unwrap()
}

#[test]
fn simulate_run_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(mains(
        &["simulate", "--seed", "3", "--duration", "80", "--out", "ds"],
        d,
    ));
    ok(mains(&["run", "--dataset", "ds", "--out", "traj.csv"], d));
    let table = ok(mains(
        &[
            "eval",
            "--trajectory",
            "traj.csv",
            "--dataset",
            "ds",
            "--out",
            "m.json",
        ],
        d,
    ));
    assert!(table.contains("RMS Horizontal Error (m)"));

    ok(mains(
        &["run", "--dataset", "ds", "--no-mag", "--out", "ins.csv"],
        d,
    ));
    ok(mains(
        &[
            "eval",
            "--trajectory",
            "ins.csv",
            "--dataset",
            "ds",
            "--out",
            "ins.json",
        ],
        d,
    ));
    let (mains_rms, ins_rms) = (
        rms_horizontal(&d.join("m.json")),
        rms_horizontal(&d.join("ins.json")),
    );
    assert!(
        ins_rms > 3.0 * mains_rms,
        "MAINS {mains_rms} m, INS {ins_rms} m"
    );

    ok(mains(
        &[
            "plotdata",
            "--trajectory",
            "traj.csv",
            "--dataset",
            "ds",
            "--out",
            "plot.csv",
        ],
        d,
    ));
    let plot = std::fs::read_to_string(d.join("plot.csv")).unwrap();
    assert_eq!(plot.lines().count(), 8002);
}

#[test]
fn table_has_a_column_per_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (name, seed) in [("a", "1"), ("b", "2")] {
        ok(mains(
            &[
                "simulate",
                "--seed",
                seed,
                "--duration",
                "65",
                "--out",
                name,
            ],
            d,
        ));
    }
    ok(mains(
        &[
            "simulate",
            "--seed",
            "3",
            "--duration",
            "65",
            "--exact-model",
            "--out",
            "c",
        ],
        d,
    ));
    let out = ok(mains(
        &[
            "table",
            "--dataset",
            "a",
            "b",
            "c",
            "--order",
            "1",
            "--out",
            "grid.json",
        ],
        d,
    ));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(
        lines[0].split_whitespace().collect::<Vec<_>>(),
        ["a", "b", "c"]
    );
    let metric_rows = lines.iter().filter(|l| l.contains("Error")).count();
    assert_eq!(metric_rows, 5);
    for l in &lines[1..] {
        assert_eq!(
            l.split_whitespace()
                .filter(|w| w.parse::<f64>().is_ok())
                .count(),
            3,
            "{l}"
        );
    }
    let grid: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("grid.json")).unwrap()).unwrap();
    assert_eq!(grid.as_object().unwrap().len(), 3);
}

#[test]
fn errors_exit_non_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = mains(
        &["run", "--dataset", "missing", "--out", "t.csv"],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));

    std::fs::write(dir.path().join("bad.toml"), "order = 0\n").unwrap();
    ok(mains(
        &["simulate", "--duration", "10", "--out", "ds"],
        dir.path(),
    ));
    let out = mains(
        &["run", "--dataset", "ds", "--config", "bad.toml"],
        dir.path(),
    );
    assert!(!out.status.success());
}
