//! Acceptance gate. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; exits nonzero if any line fails.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use frm_core::datagen::{generate, Dataset, SceneSpec};
use frm_core::frm::attention_weights;
use frm_core::gradcheck::{self, random_tensor};
use frm_core::losses::{contrastive_from_sample, cross_entropy, hybrid_loss, AnchorSample, LossConfig};
use frm_core::graph::ContrastiveAnchor;
use frm_core::trainer::{split_indices, TrainConfig, Trainer};
use frm_core::{oracle, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ORACLE_TOL: f64 = 1e-5;
const ORACLE_BUDGET: Duration = Duration::from_secs(10);
const ROW_SUM_TOL: f64 = 1e-5;
const SHIFT_TOL: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-5;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const LOSS_TOL: f64 = 1e-6;
/// Held-out mIoU floor for the default toy run. Calibrated by pilot runs of
/// the default configuration at seeds 0, 1 and 2, which reached 0.858, 0.867
/// and 0.864.
const MIOU_FLOOR: f64 = 0.85;
const TRAIN_BUDGET: Duration = Duration::from_secs(15 * 60);

struct Outcome {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn dnl_oracle() -> Outcome {
    let t = Instant::now();
    let report = oracle::sweep(0, 4, &[4, 8], 2).expect("oracle sweep");
    let (dev, took) = (report.max_abs_dev(), t.elapsed());
    verdict(
        dev < ORACLE_TOL && took < ORACLE_BUDGET,
        format!("{} cases, max abs dev {dev:.3e} < {ORACLE_TOL:e}, {took:.1?}", report.cases.len()),
    )
}

fn weights(q: Tensor<f64>, k: Tensor<f64>, m: Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::<f64>::new();
    let (q, k, m) = (g.constant(q), g.constant(k), g.constant(m));
    let w = attention_weights(&mut g, q, k, m).expect("weights");
    g.value(w).clone()
}

fn row_sums() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let (h, w, c) = (1 + (seed % 4) as usize, 1 + (seed / 4 % 4) as usize, 4);
        let wt = weights(
            random_tensor([2, c, h, w], 1000 + seed),
            random_tensor([2, c, h, w], 2000 + seed),
            random_tensor([2, 1, h, w], 3000 + seed),
        );
        let [n, _, rows, cols] = wt.shape();
        for b in 0..n {
            for i in 0..rows {
                let s: f64 = (0..cols).map(|j| wt.at(b, 0, i, j)).sum();
                worst = worst.max((s - 2.0).abs());
            }
        }
    }
    verdict(worst < ROW_SUM_TOL, format!("50 inputs, max |row sum - 2| {worst:.3e}"))
}

fn shift_invariance() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..8u64 {
        let (base_store, block) = oracle::random_block(8, 4, seed).expect("block");
        let x = random_tensor([2, 8, 3, 4], seed + 50);
        let run = |store: &frm_core::ParamStore| {
            let mut g = Graph::<f64>::from_store(store, false);
            let xv = g.constant(x.clone());
            let y = block.forward(&mut g, xv).expect("forward");
            g.value(y).clone()
        };
        let base = run(&base_store);
        // a bias offset moves one map by the same constant at every position
        for conv in [&block.query, &block.key, &block.unary] {
            let mut store = base_store.clone();
            for (i, v) in store.value_mut(conv.bias.expect("bias")).data_mut().iter_mut().enumerate() {
                *v += 1.5 - 0.4 * i as f32;
            }
            worst = worst.max(run(&store).max_abs_diff(&base));
        }
    }
    verdict(worst < SHIFT_TOL, format!("q, k, m shifted on 8 blocks, max change {worst:.3e}"))
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let reports = gradcheck::suite(0, None).expect("gradient suite");
    let took = t.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.component.as_str()).collect();
    verdict(
        failed.is_empty() && worst < GRAD_TOL && took < GRAD_BUDGET,
        format!(
            "{} components, max rel err {worst:.3e} < {GRAD_TOL:e}, failed [{}], {took:.1?}",
            reports.len(),
            failed.join(", ")
        ),
    )
}

fn loss_closed_forms() -> Outcome {
    let k = 5;
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::full([1, k, 2, 2], 0.3));
    let ce = cross_entropy(&mut g, logits, &[0, 1, 4, 2], 255).expect("ce");
    let uniform = g.value(ce.value).item();

    let rows = [[1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
    let sample = AnchorSample {
        pixels: (0..3).map(|w| (0, 0, w)).collect(),
        anchors: vec![ContrastiveAnchor { anchor: 0, positives: vec![1], negatives: vec![2] }],
    };
    let mut g = Graph::<f64>::new();
    let e = g.constant(Tensor::from_fn([1, 2, 1, 3], |_, c, _, w| rows[w][c]));
    let cl = contrastive_from_sample(&mut g, e, &sample, 0.1).expect("contrastive");
    let symmetric = g.value(cl.value).item();

    let labels: Vec<u8> = (0..2 * 16 * 16).map(|i| ((i % 16) / 6) as u8).collect();
    let mut g = Graph::<f64>::new();
    let logits = g.constant(random_tensor([2, 3, 16, 16], 1));
    let emb = g.constant(random_tensor([2, 8, 4, 4], 2));
    let cfg = LossConfig { lambda: 0.0, ..Default::default() };
    let r = hybrid_loss(&mut g, logits, Some(emb), &labels, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).expect("hybrid");
    let (total, ce0, _) = r.values(&g);

    let (d_ce, d_cl) = ((uniform - (k as f64).ln()).abs(), (symmetric - 2f64.ln()).abs());
    verdict(
        d_ce < LOSS_TOL && d_cl < LOSS_TOL && total == ce0,
        format!("|ce - ln {k}| {d_ce:.1e}, |cl - ln 2| {d_cl:.1e}, lambda 0 total == ce: {}", total == ce0),
    )
}

fn is_non_increasing(curve: &[(usize, f64)]) -> bool {
    curve.windows(2).all(|w| w[1].1 <= w[0].1)
}

fn toy_training(data: &Path) -> (Outcome, Outcome) {
    let t = Instant::now();
    let ds = Dataset::open(data).expect("dataset");
    let all = ds.load_all().expect("load");
    let config = TrainConfig::default();
    let (tr, va) = split_indices(all.len(), config.val_count);
    let mut trainer = Trainer::new(config).expect("trainer");
    let summary = trainer.run(&all.select(&tr), &all.select(&va), None, |_| {}).expect("training");
    let took = t.elapsed();
    let miou = summary.val.as_ref().map(|v| v.miou).unwrap_or(0.0);
    let curve: Vec<String> = summary.curve.iter().map(|(_, l)| format!("{l:.3}")).collect();
    (
        verdict(
            miou >= MIOU_FLOOR && took < TRAIN_BUDGET,
            format!("{} train / {} held out, mIoU {miou:.4} >= {MIOU_FLOOR}, {took:.1?}", tr.len(), va.len()),
        ),
        verdict(is_non_increasing(&summary.curve), format!("segment means [{}]", curve.join(", "))),
    )
}

fn bench_structure(scratch: &Path) -> Outcome {
    let out = scratch.join("bench");
    let status = Command::new(env!("CARGO_BIN_EXE_frmseg"))
        .args(["bench", "--size", "64x64", "--out"])
        .arg(&out)
        .output()
        .expect("run frmseg bench");
    if !status.status.success() {
        return verdict(false, format!("bench exited with {}", status.status));
    }
    let csv = std::fs::read_to_string(out.join("bench.csv")).expect("bench.csv");
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let sum = |head: &str, mode: &str, pred: &dyn Fn(&str) -> bool| -> (u64, u64) {
        rows.iter()
            .filter(|r| r[0] == head && r[1] == mode && pred(r[2]))
            .fold((0, 0), |(p, f), r| (p + r[3].parse::<u64>().unwrap(), f + r[4].parse::<u64>().unwrap()))
    };
    let heads = ["frm", "ppm", "dappm"];
    let shared: Vec<_> = heads.iter().map(|h| sum(h, "infer", &|m| !m.starts_with("context."))).collect();
    let context: Vec<_> = heads.iter().map(|h| sum(h, "infer", &|m| m.starts_with("context."))).collect();
    let embed_infer: u64 = heads.iter().map(|h| sum(h, "infer", &|m| m.starts_with("embed")).1).sum();
    let embed_train = sum("frm", "train", &|m| m.starts_with("embed")).1;
    let pass = shared.iter().all(|s| *s == shared[0])
        && context.iter().all(|&(p, f)| p > 0 && f > 0)
        && embed_infer == 0
        && embed_train > 0;
    let listing: Vec<String> = heads
        .iter()
        .zip(&context)
        .map(|(h, (p, f))| format!("{h} {p} params/{f} flops"))
        .collect();
    verdict(
        pass,
        format!(
            "context {}; shared rows identical; embed head {embed_train} train flops, {embed_infer} inference",
            listing.join(", ")
        ),
    )
}

fn determinism(data: &Path) -> Outcome {
    let ds = Dataset::open(data).expect("dataset");
    let all = ds.load(&(0..32).collect::<Vec<_>>()).expect("load");
    let run = || {
        let config = TrainConfig {
            iters: 20,
            seed: 9,
            ..Default::default()
        };
        let mut trainer = Trainer::new(config).expect("trainer");
        let s = trainer.run(&all, &all.select(&[]), None, |_| {}).expect("training");
        let params: Vec<u32> = trainer
            .model
            .store
            .entries()
            .iter()
            .flat_map(|e| e.value.data().iter().map(|v| v.to_bits()))
            .collect();
        (s.last.expect("stepped").total.to_bits(), params)
    };
    let (a, b) = (run(), run());
    verdict(
        a == b,
        format!(
            "final loss {} vs {}, parameters identical: {}",
            f32::from_bits(a.0),
            f32::from_bits(b.0),
            a.1 == b.1
        ),
    )
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().expect("tempdir");
    let data = scratch.path().join("shapes");
    generate(&SceneSpec::default(), 320, &data).expect("generate scenes");

    let mut lines: Vec<(&str, Outcome)> = vec![
        ("vectorized attention vs literal loops", dnl_oracle()),
        ("attention rows sum to two", row_sums()),
        ("shift invariance of q, k, m", shift_invariance()),
        ("finite-difference gradient suite", gradients()),
        ("loss closed forms", loss_closed_forms()),
    ];
    let (train, curve) = toy_training(&data);
    lines.push(("toy training held-out mIoU", train));
    lines.push(("cost profile of context heads", bench_structure(scratch.path())));
    lines.push(("seeded runs are bit-identical", determinism(&data)));

    let mut failed = 0;
    for (name, o) in &lines {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    // reported alongside the gate, not counted towards it
    println!(
        "{} (info) smoothed loss curve non-increasing: {}",
        if curve.pass { "PASS" } else { "FAIL" },
        curve.detail
    );
    println!("{} of {} criteria passed", lines.len() - failed, lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
