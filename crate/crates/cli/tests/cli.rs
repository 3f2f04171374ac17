use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_codebook-iqa"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn")
}

fn ok(dir: &Path, args: &[&str]) -> Vec<u8> {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn images(dir: &Path) {
    ok(dir, &["synth-gen", "--count", "2", "--size", "64", "--color", "greyscale", "--out-dir", "syn"]);
    ok(dir, &["build-codebook", "--images", "syn", "--per-image", "128", "--k", "8", "--out", "cb.bin"]);
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["--help"][..], &["--version"], &["encode", "--help"]] {
        let out = run(dir.path(), args);
        assert_eq!(out.status.code(), Some(0), "{args:?}");
        assert!(!out.stdout.is_empty());
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&[][..], &["frobnicate"], &["encode"], &["rescale", "--bitrate", "x", "--c", "1", "--k", "1"]] {
        assert_eq!(run(dir.path(), args).status.code(), Some(1), "{args:?}");
    }
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = run(dir.path(), &["build-codebook", "--images", "absent", "--out", "cb.bin"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("absent"));
    std::fs::write(dir.path().join("bad.toml"), "[codebook]\ncodevectors = 0\n").unwrap();
    let bad = run(dir.path(), &["eval", "--config", "bad.toml", "--out", "r.json"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("codebook.codevectors"));
    let negative = run(dir.path(), &["rescale", "--bitrate=-5", "--c", "1", "--k", "1"]);
    assert_eq!(negative.status.code(), Some(2));
}

#[test]
fn thread_count_does_not_change_features() {
    let dir = tempfile::tempdir().unwrap();
    images(dir.path());
    let encode = |threads: &str, out: &str| {
        ok(
            dir.path(),
            &[
                "--threads",
                threads,
                "encode",
                "--codebook",
                "cb.bin",
                "--image",
                "syn/synth_00000.png",
                "syn/synth_00001.png",
                "--descriptors",
                "256",
                "--out",
                out,
            ],
        );
        std::fs::read(dir.path().join(out)).unwrap()
    };
    assert_eq!(encode("1", "a.csv"), encode("3", "b.csv"));
    let env = bin()
        .current_dir(dir.path())
        .env("CODEBOOK_IQA_THREADS", "2")
        .args([
            "encode",
            "--codebook",
            "cb.bin",
            "--image",
            "syn/synth_00000.png",
            "syn/synth_00001.png",
            "--descriptors",
            "256",
            "--out",
            "c.csv",
        ])
        .status()
        .unwrap();
    assert!(env.success());
    assert_eq!(std::fs::read(dir.path().join("c.csv")).unwrap(), encode("1", "a.csv"));
}

#[test]
fn encode_train_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    images(dir.path());
    ok(
        dir.path(),
        &[
            "encode",
            "--codebook",
            "cb.bin",
            "--image",
            "syn/synth_00000.png",
            "syn/synth_00001.png",
            "--chroma",
            "--descriptors",
            "128",
            "--out",
            "f.csv",
        ],
    );
    let text = std::fs::read_to_string(dir.path().join("f.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().all(|l| l.split(',').count() == 16));
    std::fs::write(dir.path().join("y.csv"), "10\n90\n").unwrap();
    ok(dir.path(), &["train", "--features", "f.csv", "--labels", "y.csv", "--kernel", "linear", "--out", "m.svr"]);
    let scores = String::from_utf8(ok(dir.path(), &["predict", "--model", "m.svr", "--features", "f.csv"])).unwrap();
    let scores: Vec<f64> = scores.lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(scores.len(), 2);
    assert!(scores.iter().all(|s| s.is_finite()));
}

#[test]
fn eigen_spectrum_is_descending() {
    let dir = tempfile::tempdir().unwrap();
    images(dir.path());
    ok(dir.path(), &["eigen-spectrum", "--images", "syn", "--per-image", "256", "--out", "e.csv"]);
    let rows: Vec<(usize, f64)> = std::fs::read_to_string(dir.path().join("e.csv"))
        .unwrap()
        .lines()
        .map(|l| {
            let (i, v) = l.split_once(',').unwrap();
            (i.parse().unwrap(), v.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 64);
    assert!(rows.iter().enumerate().all(|(i, r)| r.0 == i));
    assert!(rows.windows(2).all(|w| w[0].1 >= w[1].1));
}

#[test]
fn rescale_calibration_prints_constants() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cal.csv"), "40,250\n60,1000\n80,4000\n").unwrap();
    let out = String::from_utf8(ok(dir.path(), &["rescale", "--calibrate", "cal.csv"])).unwrap();
    let (c, k) = out.trim().split_once(',').unwrap();
    let (c, k): (f64, f64) = (c.parse().unwrap(), k.parse().unwrap());
    assert!((k - 1000f64.sqrt()).abs() < 1e-9);
    let top = [(40.0, 250f64), (60.0, 1000.0), (80.0, 4000.0)]
        .iter()
        .map(|&(s, b)| s * b.sqrt() / (k + b.sqrt()))
        .fold(0.0, f64::max);
    assert!((c * top - 100.0).abs() < 1e-9);
}

#[test]
fn bench_prints_timing_json() {
    let dir = tempfile::tempdir().unwrap();
    images(dir.path());
    let out = ok(dir.path(), &["bench", "--codebook", "cb.bin", "--descriptors", "64", "--repetitions", "2"]);
    let v: serde_json::Value = serde_json::from_slice(&out).unwrap();
    assert_eq!(v["codevectors"], 8);
    assert_eq!(v["encoding"]["samples"], 6);
    assert!(v["encoding"]["mean_ms"].as_f64().unwrap() >= 0.0);
    assert!(v["prediction"].is_null());
}

#[test]
fn desk_bench_manifest_lists_every_file() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["desk-bench", "--out-dir", "desk", "--references", "2", "--size", "32"]);
    let manifest = std::fs::read_to_string(dir.path().join("desk/manifest.csv")).unwrap();
    let rows: Vec<&str> = manifest.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * 12);
    for row in rows {
        assert!(dir.path().join("desk").join(row.split(',').next().unwrap()).exists());
    }
}
