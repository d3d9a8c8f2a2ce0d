use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pal_core::checkpoint::load_checkpoint;
use pal_core::cli::{retrieval_rows, SplitFiles, CHECKPOINT_FILE, LAST_GOOD_FILE};
use pal_core::eval::{anchor_overlap, metrics_csv};
use pal_core::io::{read_corpus, read_labels, read_pairs, PairedDataset};
use pal_core::relrep::pool_all;
use pal_core::trainer::init_anchors;

fn pal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pal")).args(args).output().expect("spawn pal")
}

fn ok(args: &[&str]) -> Output {
    let out = pal(args);
    assert!(out.status.success(), "pal {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(args: &[&str]) -> i32 {
    pal(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--out", s(dir), "--train", "120", "--test", "30", "--jitter", "0.3"];
    args.extend_from_slice(extra);
    ok(&args);
}

fn train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec![
        "train", "--out", s(out), "--data", s(data), "--anchors", "8", "--epochs", "2", "--batch-size", "16",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

/// Directory contents with the manifest's wall-clock lines removed.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            let name = e.file_name().to_string_lossy().into_owned();
            let mut bytes = fs::read(e.path()).unwrap();
            if name == "manifest.txt" {
                let text = String::from_utf8(bytes).unwrap();
                bytes = text.lines().filter(|l| !is_timestamp(l)).collect::<Vec<_>>().join("\n").into_bytes();
            }
            (name, bytes)
        })
        .collect();
    files.sort();
    files
}

fn is_timestamp(line: &str) -> bool {
    line.starts_with("started_unix=") || line.starts_with("finished_unix=")
}

#[test]
fn synth_is_reproducible_and_complete() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, &[]);
    synth(&b, &[]);
    assert_eq!(snapshot(&a), snapshot(&b));
    let names: Vec<String> = snapshot(&a).into_iter().map(|(n, _)| n).collect();
    for f in [
        "manifest.txt",
        "prompts_language.palt",
        "test_language.labels",
        "test_language.palt",
        "test_pairs.tsv",
        "test_vision.labels",
        "test_vision.palt",
        "train_language.labels",
        "train_language.palt",
        "train_pairs.tsv",
        "train_vision.labels",
        "train_vision.palt",
    ] {
        assert!(names.iter().any(|n| n == f), "missing {f}");
    }
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert!(manifest.contains("command=synth"));
    assert!(manifest.contains("jitter=0.3"));
    assert!(manifest.contains("started_unix="));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(code(&["synth", "--out", s(&out), "--concepts", "1"]), 2);
    assert_eq!(code(&["gradcheck", "--out", s(&out), "--instances", "0"]), 2);
    assert_eq!(code(&["train", "--out", s(&out)]), 2);
    assert_eq!(code(&["frobnicate"]), 2);

    let data = tmp.path().join("d");
    synth(&data, &[]);
    let missing = tmp.path().join("none.tsv");
    let (vision, language) = (data.join("train_vision.palt"), data.join("train_language.palt"));
    let args = [
        "train",
        "--out",
        s(&out),
        "--vision",
        s(&vision),
        "--language",
        s(&language),
        "--pairs",
        s(&missing),
    ];
    let res = pal(&args);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("none.tsv"));

    train(&data, &tmp.path().join("run"), &[]);
    let ckpt = tmp.path().join("run").join(CHECKPOINT_FILE);
    let dense = ["eval", "--out", s(&out), "--checkpoint", s(&ckpt), "--data", s(&data), "--task", "dense"];
    assert_eq!(code(&dense), 2);
    let heat = ["heatmap", "--out", s(&out), "--checkpoint", s(&ckpt), "--data", s(&data), "--samples", "0", "--anchors", "0"];
    assert_eq!(code(&heat), 2);
}

#[test]
fn gradcheck_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("g");
    let res = ok(&["gradcheck", "--out", s(&out), "--instances", "8"]);
    assert!(String::from_utf8_lossy(&res.stdout).contains("passed"));
    assert!(fs::read_to_string(out.join("gradcheck.csv")).unwrap().lines().count() == 9);
    let res = pal(&["gradcheck", "--out", s(&out), "--instances", "8", "--break-gradient"]);
    assert_eq!(res.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&res.stderr).contains("worst is instance"));
}

#[test]
fn training_is_deterministic_across_thread_counts_and_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    synth(&data, &[]);
    let [a, b, half, rest] = ["a", "b", "half", "rest"].map(|n| tmp.path().join(n));
    train(&data, &a, &["--threads", "4"]);
    train(&data, &b, &["--threads", "1"]);
    let bytes = |d: &Path| fs::read(d.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(fs::read(a.join("loss.csv")).unwrap(), fs::read(b.join("loss.csv")).unwrap());

    ok(&["train", "--out", s(&half), "--data", s(&data), "--anchors", "8", "--epochs", "1", "--batch-size", "16"]);
    let ckpt = half.join(CHECKPOINT_FILE);
    ok(&["train", "--out", s(&rest), "--data", s(&data), "--resume", s(&ckpt), "--epochs", "2"]);
    assert_eq!(bytes(&rest), bytes(&a));

    let loss = fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("epoch,step,loss"));
    assert_eq!(loss.lines().count(), 1 + 2 * 120usize.div_ceil(16));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    synth(&data, &[]);
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# small run\nanchors=4\nepochs=1\nbatch_size=20\n").unwrap();
    let out = tmp.path().join("r");
    ok(&["train", "--out", s(&out), "--data", s(&data), "--config", s(&cfg), "--anchors", "6"]);
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("\nanchors=6\n"));
    assert!(manifest.contains("\nepochs=1\n"));
    assert!(manifest.contains("\nbatch_size=20\n"));
    assert!(manifest.contains("input.pairs="));
    assert!(manifest.contains("sha256:"));
    assert_eq!(load_checkpoint(out.join(CHECKPOINT_FILE)).unwrap().anchors_v.k(), 6);

    fs::write(&cfg, "anchors=lots\n").unwrap();
    assert_eq!(code(&["train", "--out", s(&out), "--data", s(&data), "--config", s(&cfg)]), 2);
}

#[test]
fn eval_retrieval_matches_library() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    synth(&data, &[]);
    let run = tmp.path().join("run");
    train(&data, &run, &[]);
    let ckpt = run.join(CHECKPOINT_FILE);
    let ev = tmp.path().join("ev");
    let res = ok(&["eval", "--out", s(&ev), "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "test", "--task", "retrieval", "--ks", "1,5"]);
    assert!(String::from_utf8_lossy(&res.stdout).contains("recall@1 a2b"));

    let ds = load_split(&data, "test");
    let state = load_checkpoint(&ckpt).unwrap();
    let expected = metrics_csv(&retrieval_rows(&state, &ds, &[1, 5], "test").unwrap());
    assert_eq!(fs::read_to_string(ev.join("metrics.csv")).unwrap(), expected);
    assert!(expected.starts_with("metric,dataset,direction,k,value\n"));
}

#[test]
fn classify_dense_analyze_heatmap() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    synth(&data, &["--grid", "2x3", "--concepts-max", "1", "--noise", "0"]);
    let run = tmp.path().join("run");
    train(&data, &run, &[]);
    let ckpt = run.join(CHECKPOINT_FILE);
    let common = |out: &Path| vec!["--out".to_string(), s(out).to_string(), "--checkpoint".into(), s(&ckpt).into(), "--data".into(), s(&data).into(), "--split".into(), "test".into()];

    for task in ["classify", "dense"] {
        let out = tmp.path().join(task);
        let mut args = vec!["eval".to_string()];
        args.extend(common(&out));
        args.extend(["--task".into(), task.into()]);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&refs);
        let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
        let value: f64 = csv.lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&value), "{task}: {csv}");
    }

    let out = tmp.path().join("an");
    let mut args = vec!["analyze".to_string()];
    args.extend(common(&out));
    args.extend(["--k-top".into(), "3".into()]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let report = fs::read_to_string(out.join("overlap.txt")).unwrap();
    assert!(report.contains("mean_hard_overlap_matched="));

    let out = tmp.path().join("hm");
    let mut args = vec!["heatmap".to_string()];
    args.extend(common(&out));
    args.extend(["--samples".into(), "0,1".into(), "--anchors".into(), "2".into()]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let pgm = fs::read(out.join(format!("sample_{}_anchor_2_vision.pgm", 120))).unwrap();
    assert!(pgm.starts_with(b"P5\n3 2\n255\n"));
    assert_eq!(pgm.len(), b"P5\n3 2\n255\n".len() + 6);

    let mut args = vec!["heatmap".to_string()];
    args.extend(common(&out));
    args.extend(["--samples".into(), "0".into(), "--anchors".into(), "8".into()]);
    assert_eq!(code(&args.iter().map(String::as_str).collect::<Vec<_>>()), 2);

    let labels = read_labels(SplitFiles::new(&data, "test").vision_labels).unwrap();
    assert_eq!(labels.samples.len(), 30);
}

#[test]
fn numeric_abort_exits_3_with_last_good_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    synth(&data, &[]);
    let out = tmp.path().join("run");
    let res = pal(&["train", "--out", s(&out), "--data", s(&data), "--anchors", "8", "--batch-size", "16", "--lr", "1e308"]);
    assert_eq!(res.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains(LAST_GOOD_FILE), "{stderr}");
    let state = load_checkpoint(out.join(LAST_GOOD_FILE)).unwrap();
    assert!(state.anchors_v.matrix().is_finite() && state.anchors_l.matrix().is_finite());
}

fn load_split(data: &Path, split: &str) -> PairedDataset {
    let f = SplitFiles::new(data, split);
    PairedDataset::new(
        read_corpus(&f.vision).unwrap().sequences,
        read_corpus(&f.language).unwrap().sequences,
        read_pairs(&f.pairs).unwrap(),
    )
    .unwrap()
}

#[test]
fn default_run_lowers_epoch_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("d"), tmp.path().join("r"));
    ok(&["synth", "--out", s(&data)]);
    ok(&["train", "--out", s(&run), "--data", s(&data)]);
    let csv = fs::read_to_string(run.join("loss.csv")).unwrap();
    let mut sums = std::collections::BTreeMap::<u64, (f64, usize)>::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let e = sums.entry(f[0].parse().unwrap()).or_default();
        e.0 += f[2].parse::<f64>().unwrap();
        e.1 += 1;
    }
    let means: Vec<f64> = sums.values().map(|(s, n)| s / *n as f64).collect();
    assert_eq!(means.len(), 10);
    assert!(means.last().unwrap() < means.first().unwrap(), "{means:?}");
}

#[test]
fn zero_learning_rate_keeps_initial_anchors() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("d"), tmp.path().join("r"));
    synth(&data, &[]);
    train(&data, &run, &["--lr", "0", "--seed", "5"]);
    let state = load_checkpoint(run.join(CHECKPOINT_FILE)).unwrap();
    let ds = load_split(&data, "train");
    let (av, al) = init_anchors(&ds, &state.config).unwrap();
    assert_eq!(state.anchors_v, av);
    assert_eq!(state.anchors_l, al);
    assert!(state.step > 0);
}

#[test]
fn analyze_matches_library() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run, out) = (tmp.path().join("d"), tmp.path().join("r"), tmp.path().join("a"));
    synth(&data, &[]);
    train(&data, &run, &[]);
    let ckpt = run.join(CHECKPOINT_FILE);
    ok(&["analyze", "--out", s(&out), "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "test", "--seed", "3"]);
    let state = load_checkpoint(&ckpt).unwrap();
    let ds = load_split(&data, "test");
    let c = &state.config;
    let pv = pool_all(&ds.vision, &state.anchors_v, c.tau_p, c.pooling).unwrap();
    let pl = pool_all(&ds.language, &state.anchors_l, c.tau_p, c.pooling).unwrap();
    let expected = anchor_overlap(&pv, &pl, &ds.pairs, 5, 3).unwrap().to_kv();
    assert_eq!(fs::read_to_string(out.join("overlap.txt")).unwrap(), expected);
}
