use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn frmseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_frmseg")).args(args).output().expect("spawn frmseg")
}

/// Runs `args` with each `{}` placeholder replaced by the next path.
fn run(args: &str, paths: &[&Path]) -> Output {
    let mut it = paths.iter();
    let resolved: Vec<String> = args
        .split_whitespace()
        .map(|a| if a == "{}" { it.next().unwrap().display().to_string() } else { a.to_string() })
        .collect();
    let refs: Vec<&str> = resolved.iter().map(String::as_str).collect();
    frmseg(&refs)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.clone(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Small training setup: 32x32 crops, batch 2, 8 held-out scenes.
fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.txt");
    fs::write(&p, "iters = 4\nbatch = 2\ncrop = 32\nval_count = 8\nlog_every = 2\n").unwrap();
    p
}

fn miou(text: &str) -> f64 {
    let line = text.lines().find(|l| l.starts_with("mIoU")).expect("mIoU line");
    line[4..].trim().parse().unwrap()
}

#[test]
fn gradcheck_passes_and_is_seeded() {
    let a = ok(frmseg(&["gradcheck", "--seed", "7"]));
    let b = ok(frmseg(&["gradcheck", "--seed", "7"]));
    assert_eq!(a, b);
    assert!(a.lines().filter(|l| l.ends_with(" ok")).count() >= 8, "{a}");
}

#[test]
fn injected_fault_is_reported() {
    let o = frmseg(&["gradcheck", "--inject-fault", "conv2d"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("conv2d"), "{err}");
    assert!(stdout(&o).contains("FAIL"));
    assert_eq!(frmseg(&["gradcheck", "--inject-fault", "nonsense"]).status.code(), Some(2));
}

#[test]
fn oracle_sweep_passes() {
    let out = ok(frmseg(&["oracle"]));
    assert!(out.contains("32 cases"), "{out}");
}

fn bench_rows(size: &str, dir: &Path) -> Vec<(String, String, String, u64, u64)> {
    ok(run(&format!("bench --size {size} --out {{}}"), &[dir]));
    fs::read_to_string(dir.join("bench.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].into(), f[1].into(), f[2].into(), f[3].parse().unwrap(), f[4].parse().unwrap())
        })
        .collect()
}

#[test]
fn bench_compares_heads_on_shared_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let small = bench_rows("64x64", &tmp.path().join("a"));
    let big = bench_rows("128x128", &tmp.path().join("b"));
    let shared = |head: &str| -> Vec<_> {
        small
            .iter()
            .filter(|r| r.0 == head && r.1 == "infer" && !r.2.starts_with("context."))
            .map(|r| (r.2.clone(), r.3, r.4))
            .collect()
    };
    assert_eq!(shared("frm"), shared("ppm"));
    assert_eq!(shared("frm"), shared("dappm"));
    let attention = |rows: &[(String, String, String, u64, u64)]| {
        rows.iter()
            .find(|r| r.0 == "frm" && r.1 == "infer" && r.2 == "context.dnl.attention")
            .unwrap()
            .4
    };
    assert_eq!(attention(&big), 16 * attention(&small));
    assert!(tmp.path().join("a/run.txt").is_file());
    assert_eq!(run("bench --size 8x8", &[]).status.code(), Some(2));
}

#[test]
fn gen_train_eval_infer_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run_dir) = (tmp.path().join("data"), tmp.path().join("run"));
    ok(run("gen --count 24 --classes 3 --size 32x32 --seed 4 --out {}", &[&data]));
    let before = snapshot(&data);
    let cfg = tiny_config(tmp.path());

    let out = ok(run("train --data {} --config {} --out {}", &[&data, &cfg, &run_dir]));
    assert!(out.contains("validation mIoU"), "{out}");
    for f in ["metrics.csv", "loss_curve.csv", "summary.txt", "params.bin", "momentum.bin", "train.txt", "run.txt"] {
        assert!(run_dir.join(f).is_file(), "{f}");
    }
    let metrics = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");

    // resuming extends the same log and counter
    ok(run("train --data {} --checkpoint {} --iters 6", &[&data, &run_dir]));
    let train = fs::read_to_string(run_dir.join("train.txt")).unwrap();
    assert!(train.lines().any(|l| l.replace(' ', "") == "iteration=6"), "{train}");
    let metrics = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    let last = metrics.lines().last().unwrap();
    assert!(last.starts_with("6,"), "{metrics}");

    let e1 = ok(run("eval --data {} --checkpoint {} --split val", &[&data, &run_dir]));
    let e2 = ok(run("eval --data {} --checkpoint {} --split val", &[&data, &run_dir]));
    assert_eq!(e1, e2);
    assert!(e1.starts_with("8 images"), "{e1}");
    assert!((0.0..=1.0).contains(&miou(&e1)));

    let mask = tmp.path().join("mask.pgm");
    let image = data.join("images/0003.frmt");
    ok(run("infer --checkpoint {} --image {} --out {}", &[&run_dir, &image, &mask]));
    let (labels, h, w) = frm_core::datagen::read_pgm(&mask).unwrap();
    assert_eq!((h, w), (32, 32));
    assert!(labels.iter().all(|&y| y < 3));

    assert_eq!(snapshot(&data), before);
}

#[test]
fn baseline_heads_train() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(run("gen --count 12 --size 32x32 --out {}", &[&data]));
    let cfg = tiny_config(tmp.path());
    for head in ["ppm", "dappm"] {
        let out_dir = tmp.path().join(head);
        ok(run(&format!("train --data {{}} --config {{}} --context-head {head} --iters 2 --out {{}}"), &[&data, &cfg, &out_dir]));
        let saved = fs::read_to_string(out_dir.join("config.txt")).unwrap();
        assert!(saved.contains(head), "{saved}");
    }
}

#[test]
fn untrained_model_scores_low() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run_dir) = (tmp.path().join("data"), tmp.path().join("run"));
    ok(run("gen --count 16 --size 32x32 --out {}", &[&data]));
    let cfg = tiny_config(tmp.path());
    ok(run("train --data {} --config {} --iters 0 --out {}", &[&data, &cfg, &run_dir]));
    let out = ok(run("eval --data {} --checkpoint {} --split all", &[&data, &run_dir]));
    assert!(miou(&out) < 0.3, "{out}");
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    assert_eq!(run("train --data {}", &[&missing]).status.code(), Some(2));

    let (three, four, run_dir) = (tmp.path().join("k3"), tmp.path().join("k4"), tmp.path().join("run"));
    ok(run("gen --count 10 --classes 3 --size 32x32 --out {}", &[&three]));
    ok(run("gen --count 10 --classes 4 --size 32x32 --out {}", &[&four]));
    let cfg = tiny_config(tmp.path());
    ok(run("train --data {} --config {} --iters 0 --out {}", &[&three, &cfg, &run_dir]));
    let o = run("eval --data {} --checkpoint {}", &[&four, &run_dir]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));

    let bad = tmp.path().join("bad.txt");
    fs::write(&bad, "learning_rate = 3\n").unwrap();
    assert_eq!(run("train --data {} --config {}", &[&three, &bad]).status.code(), Some(2));
    let o = run("eval --data {} --checkpoint {}", &[&three, &missing]);
    assert_eq!(o.status.code(), Some(3));
}
