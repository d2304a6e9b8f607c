use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn muse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_muse")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = muse(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// synth -> ingest -> train, returning the checkpoint bytes.
fn pipeline(dir: &Path, seed: &str) -> Vec<u8> {
    let log = dir.join("log.tsv");
    let data = dir.join("data");
    let ckpt = dir.join("model.ckpt");
    ok(&["--seed", seed, "synth", "--out", s(&log), "--n-tracks", "60", "--n-clusters", "3", "--n-sessions", "300"]);
    ok(&["ingest", "--log", s(&log), "--out-dir", s(&data)]);
    let cfg = dir.join("cfg.txt");
    fs::write(&cfg, "epochs = 2\nhidden_dim = 6\nbatch_size = 16\noptimizer = adam\nlearning_rate = 0.01\n").unwrap();
    ok(&["--seed", seed, "--threads", "2", "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt)]);
    fs::read(ckpt).unwrap()
}

#[test]
fn full_pipeline_and_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), "4");
    let data = dir.path().join("data");
    for f in ["train.tsv", "valid.tsv", "test.tsv", "vocab.tsv"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let log_csv = dir.path().join("model.csv");
    let mut r = csv::Reader::from_path(&log_csv).unwrap();
    assert_eq!(
        r.headers().unwrap().iter().collect::<Vec<_>>(),
        ["epoch", "loss_total", "loss_rec", "loss_match", "loss_align", "valid_mrr5"]
    );
    assert_eq!(r.records().count(), 2);

    let metrics = dir.path().join("metrics.csv");
    let test = data.join("test.tsv");
    ok(&["evaluate", "--model", s(&dir.path().join("model.ckpt")), "--sessions", s(&test), "--out", s(&metrics)]);
    let mut r = csv::Reader::from_path(&metrics).unwrap();
    assert_eq!(r.headers().unwrap().iter().collect::<Vec<_>>(), ["segment", "metric", "K", "value", "count"]);
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3 * 3 * 2);

    // Writing the parsed rows back reproduces the file byte for byte.
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["segment", "metric", "K", "value", "count"]).unwrap();
    for row in &rows {
        w.write_record(row).unwrap();
        if !row[3].is_empty() {
            let v: f64 = row[3].parse().unwrap();
            assert!((0.0..=1.0).contains(&v), "{row:?}");
        }
    }
    assert_eq!(w.into_inner().unwrap(), fs::read(&metrics).unwrap());

    let pop = dir.path().join("pop.csv");
    ok(&["evaluate", "--popularity-from", s(&data.join("train.tsv")), "--sessions", s(&test), "--out", s(&pop)]);
    assert_eq!(csv::Reader::from_path(&pop).unwrap().records().count(), 18);
}

#[test]
fn same_seed_gives_identical_outputs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(pipeline(a.path(), "9"), pipeline(b.path(), "9"));
    assert_eq!(fs::read(a.path().join("log.tsv")).unwrap(), fs::read(b.path().join("log.tsv")).unwrap());

    let train = a.path().join("data/train.tsv");
    let (x, y) = (a.path().join("x.tsv"), a.path().join("y.tsv"));
    ok(&["--seed", "1", "augment", "--sessions", s(&train), "--out", s(&x), "--gamma", "0.7"]);
    ok(&["--seed", "1", "augment", "--sessions", s(&train), "--out", s(&y), "--gamma", "0.7"]);
    assert_eq!(fs::read(&x).unwrap(), fs::read(&y).unwrap());
}

#[test]
fn stats_reports_each_segment() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("s.tsv");
    fs::write(&f, "a\t1\t1,2,3\nb\t0\t1,2,3\nc\t0\t1,2\n").unwrap();
    let out = String::from_utf8(ok(&["stats", "--sessions", s(&f)]).stdout).unwrap();
    // Pairs: (1,2) x3, (2,3) x2. Shuffle alone has two unique pairs.
    assert!(out.contains("all\t3\t0.00"), "{out}");
    assert!(out.contains("shuffle\t1\t100.00"), "{out}");
    assert!(out.contains("non_shuffle\t2\t33.33"), "{out}");
    assert!(out.contains("shuffle_proportion\t0.3333"), "{out}");
}

#[test]
fn missing_input_exits_2_naming_the_path() {
    let out = muse(&["stats", "--sessions", "/definitely/not/here.tsv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/definitely/not/here.tsv"));
}

#[test]
fn malformed_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("bad.tsv");
    fs::write(&f, "a\t1\n").unwrap();
    let out = muse(&["stats", "--sessions", s(&f)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.tsv") && err.contains("line 1"), "{err}");

    let out = muse(&["augment", "--sessions", s(&f), "--out", s(&dir.path().join("o")), "--gamma", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(muse(&["stats", "--sessions", "x", "--bogus"]).status.code(), Some(1));
    assert_eq!(muse(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(muse(&["evaluate", "--sessions", "x", "--out", "y"]).status.code(), Some(1));
}

#[test]
fn help_on_every_subcommand() {
    for sub in ["synth", "ingest", "stats", "augment", "train", "evaluate"] {
        let out = muse(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{sub}");
    }
}
