use std::path::Path;
use std::process::{Command, Output};

fn droplet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_droplet"))
        .args(args)
        .output()
        .expect("spawn droplet")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate(dir: &Path, stem: &str, seed: u64) {
    let out = droplet(&[
        "simulate",
        "--width",
        "160",
        "--height",
        "128",
        "--n-spheres",
        "8",
        "--r-min",
        "3",
        "--r-max",
        "8",
        "--seed",
        &seed.to_string(),
        "--out-image",
        p(&dir.join(format!("{stem}.png"))),
        "--out-truth",
        p(&dir.join(format!("{stem}.csv"))),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_errors_exit_with_1() {
    assert_eq!(droplet(&[]).status.code(), Some(1));
    assert_eq!(droplet(&["frobnicate"]).status.code(), Some(1));
    // randomized commands need an explicit seed
    let dir = tempfile::tempdir().unwrap();
    let out = droplet(&[
        "simulate",
        "--r-min",
        "3",
        "--r-max",
        "8",
        "--out-image",
        p(&dir.path().join("a.png")),
        "--out-truth",
        p(&dir.path().join("a.csv")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = droplet(&[
        "bench",
        "--sweep",
        "n_bin",
        "--values",
        "2,3",
        "--backend",
        "fft",
        "--out",
        "x.csv",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(
        droplet(&["detect", "--input", "a.png", "--out-json", "b.json", "--backend", "gpu"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(droplet(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = droplet(&[
        "detect",
        "--input",
        p(&dir.path().join("missing.png")),
        "--out-json",
        p(&dir.path().join("o.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    simulate(dir.path(), "s", 1);
    // invalid ladder is caught at run time
    let out = droplet(&[
        "detect",
        "--input",
        p(&dir.path().join("s.png")),
        "--out-json",
        p(&dir.path().join("o.json")),
        "--min-sigma",
        "5",
        "--max-sigma",
        "5",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = droplet(&[
        "parity",
        "--scenes",
        p(&dir.path().join("nowhere")),
        "--out",
        p(&dir.path().join("x.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_detect_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "a", 3);
    simulate(d, "b", 3);
    assert_eq!(
        std::fs::read(d.join("a.png")).unwrap(),
        std::fs::read(d.join("b.png")).unwrap()
    );
    let truth = std::fs::read_to_string(d.join("a.csv")).unwrap();
    assert!(truth.starts_with("# seed=3\n"));
    assert_eq!(truth.lines().count(), 1 + 1 + 8);

    let out = droplet(&[
        "detect",
        "--input",
        p(&d.join("a.png")),
        "--min-sigma",
        "1.5",
        "--max-sigma",
        "7",
        "--n-bin",
        "11",
        "--out-json",
        p(&d.join("a.json")),
        "--out-hist",
        p(&d.join("a.hist.csv")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("a.json")).unwrap()).unwrap();
    assert_eq!(doc["image"], "a.png");
    assert_eq!(doc["params"]["n_bin"], 11);
    let hist = std::fs::read_to_string(d.join("a.hist.csv")).unwrap();
    assert_eq!(hist.lines().next(), Some("bin_center_px,count,volume_weight"));
    assert_eq!(hist.lines().count(), 1 + 12);

    let out = droplet(&[
        "evaluate",
        "--pred",
        p(&d.join("a.json")),
        "--truth",
        p(&d.join("a.csv")),
        "--out",
        p(&d.join("r.json")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert!(report["recall"].as_f64().unwrap() >= 0.8, "{report}");
    assert!(report["precision"].as_f64().unwrap() >= 0.8, "{report}");
    assert_eq!(report["iou_threshold"], 0.5);
}

#[test]
fn parity_over_a_scene_directory() {
    let dir = tempfile::tempdir().unwrap();
    for (i, seed) in [11u64, 12].iter().enumerate() {
        simulate(dir.path(), &format!("s{i}"), *seed);
    }
    let out_csv = dir.path().join("parity.csv");
    let out = droplet(&[
        "parity",
        "--scenes",
        p(dir.path()),
        "--backend-a",
        "direct",
        "--backend-b",
        "fft",
        "--min-sigma",
        "1.5",
        "--max-sigma",
        "6",
        "--n-bin",
        "9",
        "--out",
        p(&out_csv),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&out_csv).unwrap();
    let rows: Vec<_> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 3, "{text}");
    assert!(rows[1].starts_with("s0,") && rows[2].starts_with("s1,"));
}

#[test]
fn bench_writes_one_record_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let out_csv = dir.path().join("bench.csv");
    let out = droplet(&[
        "bench",
        "--sweep",
        "max_sigma",
        "--values",
        "3,4",
        "--backend",
        "fft",
        "--reps",
        "3",
        "--seed",
        "1",
        "--width",
        "96",
        "--height",
        "80",
        "--n-spheres",
        "4",
        "--n-bin",
        "4",
        "--out",
        p(&out_csv),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&out_csv).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().contains("median_ms"));
    let records: Vec<_> = lines.collect();
    assert_eq!(records.len(), 2);
    assert!(records[0].starts_with("fft,4,1.0,3.0,96,80,1,3,"), "{}", records[0]);

    let out = droplet(&[
        "bench",
        "--sweep",
        "n_bin",
        "--values",
        "2",
        "--backend",
        "fft",
        "--reps",
        "2",
        "--seed",
        "1",
        "--out",
        p(&out_csv),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
