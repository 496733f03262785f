//! Argument parsing and subcommand implementations for `frmseg`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use frm_core::config::KeyValues;
use frm_core::datagen::{self, Dataset, SceneSpec};
use frm_core::profiler::{comparison_table, count_costs};
use frm_core::trainer::{evaluate, split_indices, TrainConfig, Trainer};
use frm_core::{gradcheck, oracle, ContextHeadKind, Error, Mode, OpKind, SegModel, Tensor};

/// Oracle tolerance: vectorized attention vs the literal double loop.
pub const ORACLE_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(name = "frmseg", version, about = "Feature refinement segmentation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// key = value configuration file; flags override its entries
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (file for `infer`)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic shapes dataset
    Gen {
        /// Number of scenes [default: 320]
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        /// Image size as HxW
        #[arg(long, value_parser = parse_size)]
        size: Option<(usize, usize)>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes metrics.csv, summary.txt and a checkpoint to --out
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        context_head: Option<ContextHeadKind>,
        #[arg(long)]
        iters: Option<usize>,
        /// Resume from this checkpoint directory
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Per-class IoU and mIoU of a checkpoint
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient checks of every layer and the full model
    Gradcheck {
        /// Corrupt one backward rule (testing aid)
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare vectorized attention against the literal double-loop evaluation
    Oracle {
        #[command(flatten)]
        common: Common,
    },
    /// Parameter and FLOP counts of every context head on the same input
    Bench {
        #[arg(long, value_parser = parse_size, default_value = "64x64")]
        size: (usize, usize),
        #[command(flatten)]
        common: Common,
    },
    /// Segment one FRMT image into a PGM mask
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Val,
    All,
}

pub fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h.trim().parse().map_err(|e| format!("height {h:?}: {e}"))?;
    let w = w.trim().parse().map_err(|e| format!("width {w:?}: {e}"))?;
    Ok((h, w))
}

#[derive(Debug)]
pub enum Failure {
    /// A check ran and did not pass.
    Check(String),
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Core(Error::Config(_)) => 2,
            Failure::Core(Error::Io { .. } | Error::Format { .. }) => 3,
            Failure::Core(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Check(m) => write!(f, "check failed: {m}"),
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn read_config(common: &Common) -> std::result::Result<KeyValues, Failure> {
    match &common.config {
        Some(p) => Ok(KeyValues::read(p)?),
        None => Ok(KeyValues::default()),
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Records the resolved settings of this invocation in `dir/run.txt`.
fn write_provenance(dir: &Path, command: &str, resolved: &KeyValues) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let mut kv = KeyValues::default();
    kv.insert("command", command);
    kv.insert("version", env!("CARGO_PKG_VERSION"));
    kv.merge(resolved);
    kv.write(&dir.join("run.txt"))?;
    Ok(())
}

pub fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Gen { count, classes, size, common } => gen(count, classes, size, &common),
        Command::Train {
            data,
            context_head,
            iters,
            checkpoint,
            common,
        } => train(data, context_head, iters, checkpoint, &common),
        Command::Eval {
            data,
            checkpoint,
            split,
            common,
        } => eval(&data, &checkpoint, split, &common),
        Command::Gradcheck { inject_fault, common } => gradcheck_cmd(inject_fault.as_deref(), &common),
        Command::Oracle { common } => oracle_cmd(&common),
        Command::Bench { size, common } => bench(size, &common),
        Command::Infer {
            checkpoint,
            image,
            common,
        } => infer(&checkpoint, &image, &common),
    }
}

fn gen(count: Option<usize>, classes: Option<usize>, size: Option<(usize, usize)>, common: &Common) -> Outcome {
    let out = common
        .out
        .as_deref()
        .ok_or_else(|| Failure::Usage("gen needs --out".into()))?;
    let kv = read_config(common)?;
    let defaults = SceneSpec::default().to_kv();
    let mut known: Vec<&str> = defaults.keys().collect();
    known.push("count");
    kv.reject_unknown(&known)?;
    let mut spec = SceneSpec::default();
    spec.apply(&kv)?;
    let count_v = match count {
        Some(n) => n,
        None => kv.parsed("count")?.unwrap_or(320),
    };
    if let Some(k) = classes {
        spec.num_classes = k;
    }
    if let Some((h, w)) = size {
        (spec.height, spec.width) = (h, w);
    }
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let mut resolved = spec.to_kv();
    resolved.insert("count", count_v);
    write_provenance(out, "gen", &resolved)?;
    let m = datagen::generate(&spec, count_v, out)?;
    println!("wrote {} scenes to {}", m.count, out.display());
    let total: u64 = m.histogram.iter().sum();
    for (c, n) in m.histogram.iter().enumerate() {
        println!("class {c}: {:.2}% of pixels", 100.0 * *n as f64 / total.max(1) as f64);
    }
    Ok(())
}

fn train(
    data: Option<PathBuf>,
    context_head: Option<ContextHeadKind>,
    iters: Option<usize>,
    checkpoint: Option<PathBuf>,
    common: &Common,
) -> Outcome {
    let data = data.ok_or_else(|| Failure::Usage("train needs --data".into()))?;
    if !data.join("manifest.txt").is_file() {
        return Err(Failure::Usage(format!("no dataset at {} (run `frmseg gen` first)", data.display())));
    }
    let ds = Dataset::open(&data)?;
    let mut trainer = match &checkpoint {
        Some(dir) => Trainer::resume(dir, iters)?,
        None => {
            let kv = read_config(common)?;
            let mut cfg = TrainConfig::default();
            cfg.apply(&kv)?;
            if kv.get("num_classes").is_none() {
                cfg.model.num_classes = ds.num_classes();
            }
            if let Some(h) = context_head {
                cfg.model.context_head = h;
            }
            if let Some(n) = iters {
                cfg.iters = n;
            }
            if let Some(s) = common.seed {
                cfg.seed = s;
                cfg.model.init_seed = s;
            }
            Trainer::new(cfg)?
        }
    };
    let cfg = trainer.config.clone();
    if cfg.model.num_classes != ds.num_classes() {
        return Err(Error::Config(format!(
            "model has {} classes, dataset {}",
            cfg.model.num_classes,
            ds.num_classes()
        ))
        .into());
    }
    let out = common
        .out
        .clone()
        .or(checkpoint.clone())
        .unwrap_or_else(|| PathBuf::from("run"));
    let mut resolved = cfg.to_kv();
    resolved.insert("data", data.display());
    resolved.insert("start_iteration", trainer.iteration);
    write_provenance(&out, "train", &resolved)?;

    let all = ds.load_all()?;
    let (tr, va) = split_indices(all.len(), cfg.val_count);
    let (train_set, val_set) = (all.select(&tr), all.select(&va));
    println!(
        "training {} head on {} images ({} held out) from iteration {} to {}",
        cfg.model.context_head,
        train_set.len(),
        val_set.len(),
        trainer.iteration,
        cfg.iters
    );
    println!("{}", frm_core::trainer::METRICS_HEADER);
    let summary = trainer.run(&train_set, &val_set, Some(&out), |r| println!("{}", r.csv_row()))?;
    if let Some(last) = summary.last {
        println!("final loss {} (ce {}, contrastive {})", last.total, last.ce, last.cl);
    }
    if let Some(v) = &summary.val {
        println!("validation mIoU {:.4}", v.miou);
    }
    println!("checkpoint written to {} ({:.1} s)", out.display(), summary.seconds);
    Ok(())
}

fn eval(data: &Path, checkpoint: &Path, split: Split, common: &Common) -> Outcome {
    let model = SegModel::load(checkpoint)?;
    let ds = Dataset::open(data)?;
    if model.config.num_classes != ds.num_classes() {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes, dataset has {}",
            model.config.num_classes,
            ds.num_classes()
        ))
        .into());
    }
    let val_count = match KeyValues::read(&checkpoint.join("train.txt")) {
        Ok(kv) => kv.parsed("val_count")?.unwrap_or(64),
        Err(_) => TrainConfig::default().val_count,
    };
    let (tr, va) = split_indices(ds.len(), val_count);
    let indices = match split {
        Split::Train => tr,
        Split::Val => va,
        Split::All => (0..ds.len()).collect(),
    };
    if let Some(out) = &common.out {
        let mut kv = KeyValues::default();
        kv.insert("data", data.display());
        kv.insert("checkpoint", checkpoint.display());
        kv.insert("split", format!("{split:?}").to_lowercase());
        kv.insert("images", indices.len());
        write_provenance(out, "eval", &kv)?;
    }
    let batch = ds.load(&indices)?;
    let report = evaluate(&model, &batch, 255)?;
    println!("{} images, {:?} split", batch.len(), split);
    for (c, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => println!("class {c}: IoU {v:.4}"),
            None => println!("class {c}: absent"),
        }
    }
    println!("mIoU {:.4}", report.miou);
    Ok(())
}

fn gradcheck_cmd(fault: Option<&str>, common: &Common) -> Outcome {
    let fault = match fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Failure::Usage(format!("unknown op {name:?}")))?),
        None => None,
    };
    let seed = common.seed.unwrap_or(0);
    if let Some(out) = &common.out {
        let mut kv = KeyValues::default();
        kv.insert("seed", seed);
        kv.insert("tolerance", gradcheck::REL_TOLERANCE);
        write_provenance(out, "gradcheck", &kv)?;
    }
    let reports = gradcheck::suite(seed, fault)?;
    println!(
        "{:<22} {:>12} {:>7} {:>7}  worst element",
        "component", "max rel err", "probed", "skipped"
    );
    for r in &reports {
        println!(
            "{:<22} {:>12.3e} {:>7} {:>7}  {}[{}] {}",
            r.component,
            r.max_rel_error,
            r.probed,
            r.skipped,
            r.worst.0,
            r.worst.1,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.component.as_str()).collect();
    if failed.is_empty() {
        println!("all {} components within {:e}", reports.len(), gradcheck::REL_TOLERANCE);
        return Ok(());
    }
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("non-empty suite");
    let cause = fault.map(|k| format!(" (backward rule of {} corrupted)", k.name())).unwrap_or_default();
    Err(Failure::Check(format!(
        "{} of {} components failed: {}; worst {} at {:.3e}{cause}",
        failed.len(),
        reports.len(),
        failed.join(", "),
        worst.component,
        worst.max_rel_error
    )))
}

fn oracle_cmd(common: &Common) -> Outcome {
    let seed = common.seed.unwrap_or(0);
    if let Some(out) = &common.out {
        let mut kv = KeyValues::default();
        kv.insert("seed", seed);
        kv.insert("tolerance", ORACLE_TOLERANCE);
        write_provenance(out, "oracle", &kv)?;
    }
    let report = oracle::sweep(seed, 4, &[4, 8], 2)?;
    for c in &report.cases {
        println!("C={} {}x{}: max abs dev {:.3e}", c.channels, c.height, c.width, c.max_abs_dev);
    }
    let worst = report.max_abs_dev();
    println!("{} cases, max abs dev {worst:.3e}", report.cases.len());
    if worst < ORACLE_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::Check(format!("max abs deviation {worst:.3e} >= {ORACLE_TOLERANCE:e}")))
    }
}

fn bench(size: (usize, usize), common: &Common) -> Outcome {
    let kv = read_config(common)?;
    let mut cfg = TrainConfig::default();
    cfg.apply(&kv)?;
    if let Some(s) = common.seed {
        cfg.model.init_seed = s;
    }
    let (h, w) = size;
    let mut reports = Vec::new();
    let mut csv = String::from("head,mode,module,params,flops\n");
    for head in ContextHeadKind::ALL {
        let model = SegModel::new(frm_core::ModelConfig {
            context_head: head,
            ..cfg.model.clone()
        })?;
        for mode in [Mode::Infer, Mode::Train] {
            let r = count_costs(&model, h, w, mode)?;
            for row in &r.rows {
                csv.push_str(&format!("{head},{mode:?},{},{},{}\n", row.path, row.params, row.flops).to_lowercase());
            }
            if mode == Mode::Infer {
                reports.push(r);
            }
        }
    }
    if let Some(out) = &common.out {
        let mut resolved = cfg.model.to_kv();
        resolved.insert("size", format!("{h}x{w}"));
        write_provenance(out, "bench", &resolved)?;
        let p = out.join("bench.csv");
        std::fs::write(&p, &csv).map_err(|e| io_error(&p, e))?;
    }
    for r in &reports {
        println!("{}", r.to_table());
    }
    println!("{}", comparison_table(&reports));
    let model = SegModel::new(cfg.model.clone())?;
    let train = count_costs(&model, h, w, Mode::Train)?;
    let infer = count_costs(&model, h, w, Mode::Infer)?;
    let embed = train.row("embed_head").map(|r| r.flops).unwrap_or(0);
    println!(
        "embedding head: {embed} training flops, {} inference flops",
        train.total_flops() - embed - infer.total_flops()
    );
    Ok(())
}

fn infer(checkpoint: &Path, image: &Path, common: &Common) -> Outcome {
    let out = common
        .out
        .as_deref()
        .ok_or_else(|| Failure::Usage("infer needs --out for the mask".into()))?;
    let model = SegModel::load(checkpoint)?;
    let img = Tensor::<f32>::load(image)?;
    let [n, c, h, w] = img.shape();
    if n != 1 || c != 3 {
        return Err(Error::Format {
            path: image.to_path_buf(),
            msg: format!("expected a [1, 3, H, W] image, got {:?}", img.shape()),
        }
        .into());
    }
    let mask = model.predict(&img)?;
    datagen::write_pgm(out, &mask, h, w)?;
    println!("wrote {h}x{w} mask to {}", out.display());
    Ok(())
}
