//! Analytic parameter and FLOP counts per named submodule.
//!
//! Counting rules: convolutions `2 * oh * ow * oc * (ic / groups) * k * k`
//! plus one add per output when biased; matmuls `2 * m * n * k`; pooling,
//! upsampling, softmax, ReLU and elementwise adds one op per output element;
//! batch norm two per element. Concatenation and reshapes are free.

use std::fmt::Write as _;

use crate::baselines::{DappmHead, PpmHead};
use crate::error::{Error, Result};
use crate::frm::FrmHead;
use crate::layers::{Conv2d, ConvBnRelu};
use crate::model::{ContextHead, ContextHeadKind, Mode, SegModel, MIN_INPUT_EXTENT};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub path: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub head: ContextHeadKind,
    pub mode: Mode,
    /// Input `(H, W)` for a single image.
    pub input: (usize, usize),
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    pub fn row(&self, path: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.path == path)
    }

    /// `(params, flops)` summed over rows whose path starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> (u64, u64) {
        self.rows
            .iter()
            .filter(|r| r.path.starts_with(prefix))
            .fold((0, 0), |(p, f), r| (p + r.params, f + r.flops))
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.path.len()).max().unwrap_or(0).max(10);
        let mut out = String::new();
        let (h, w) = self.input;
        let _ = writeln!(out, "context head {}, input {h}x{w}, {:?} mode", self.head, self.mode);
        let _ = writeln!(out, "{:<width$}  {:>12}  {:>16}", "module", "params", "flops");
        for r in &self.rows {
            let _ = writeln!(out, "{:<width$}  {:>12}  {:>16}", r.path, r.params, r.flops);
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>12}  {:>16}",
            "total",
            self.total_params(),
            self.total_flops()
        );
        let _ = writeln!(
            out,
            "Params(M) {:.4}  GFLOPs {:.4}",
            self.total_params() as f64 / 1e6,
            self.total_flops() as f64 / 1e9
        );
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("head,module,params,flops\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", self.head, r.path, r.params, r.flops);
        }
        out
    }
}

fn conv_row(path: &str, c: &Conv2d, oh: usize, ow: usize) -> CostRow {
    CostRow {
        path: path.to_string(),
        params: c.param_count() as u64,
        flops: c.flops(oh, ow),
    }
}

/// A conv-BN-ReLU block; returns the row and the output extent.
fn block_row(path: &str, b: &ConvBnRelu, h: usize, w: usize) -> (CostRow, usize, usize) {
    let (oh, ow) = (b.conv.out_extent(h), b.conv.out_extent(w));
    let row = CostRow {
        path: path.to_string(),
        params: b.param_count() as u64,
        flops: b.flops(oh, ow),
    };
    (row, oh, ow)
}

fn ops_row(path: &str, flops: usize) -> CostRow {
    CostRow {
        path: path.to_string(),
        params: 0,
        flops: flops as u64,
    }
}

/// Rows for the DNL block, FFN and channel cut on an `h x w` map.
fn frm_rows(rows: &mut Vec<CostRow>, f: &FrmHead, h: usize, w: usize) {
    let d = &f.dnl;
    let (c, cr, n) = (d.channels, d.reduced, h * w);
    for (name, conv) in [("query", &d.query), ("key", &d.key), ("unary", &d.unary), ("value", &d.value)] {
        rows.push(conv_row(&format!("context.dnl.{name}"), conv, h, w));
    }
    // per-position work: whitening means and subtraction for q and k, unary softmax
    rows.push(ops_row("context.dnl.whiten", 4 * cr * n + n));
    // pairwise work: q^T k, its softmax, adding the unary term, weighted sum
    rows.push(ops_row("context.dnl.attention", 2 * n * n * cr + 2 * n * n + 2 * c * n * n));
    let mut proj = conv_row("context.dnl.proj", &d.proj, h, w);
    if d.residual {
        proj.flops += (c * n) as u64;
    }
    rows.push(proj);
    let ffn = &f.ffn;
    let hidden = ffn.channels * ffn.ratio;
    let mut ffn_row = conv_row("context.ffn", &ffn.expand, h, w);
    for conv in [&ffn.depthwise, &ffn.reduce] {
        ffn_row.params += conv.param_count() as u64;
        ffn_row.flops += conv.flops(h, w);
    }
    ffn_row.flops += (hidden * n + c * n) as u64; // ReLU, residual add
    rows.push(ffn_row);
    rows.push(conv_row("context.cut", &f.cut, h, w));
}

fn ppm_rows(rows: &mut Vec<CostRow>, p: &PpmHead, h: usize, w: usize) -> Result<()> {
    for (i, conv) in p.branches.iter().enumerate() {
        let (bh, bw) = p.bin_extent(p.bins[i], h, w)?;
        let mut r = conv_row(&format!("context.branch{i}"), conv, bh, bw);
        // pool, ReLU, upsample
        r.flops += (p.in_channels * bh * bw + p.branch_width * bh * bw + p.branch_width * h * w) as u64;
        rows.push(r);
    }
    rows.push(conv_row("context.fusion", &p.fusion, h, w));
    Ok(())
}

fn dappm_rows(rows: &mut Vec<CostRow>, d: &DappmHead, h: usize, w: usize) {
    let bw = d.branch_width;
    rows.push(conv_row("context.scale0", &d.scale0, h, w));
    for (i, b) in d.branches.iter().enumerate() {
        let (ph, pw) = b.pooled_extent(h, w);
        let mut r = conv_row(&format!("context.branch{}", i + 1), &b.conv, ph, pw);
        r.params += b.process.param_count() as u64;
        r.flops += b.process.flops(h, w);
        // pool, ReLU, upsample, add, ReLU after processing
        r.flops += (d.in_channels * ph * pw + bw * ph * pw + 3 * bw * h * w) as u64;
        rows.push(r);
    }
    rows.push(conv_row("context.compression", &d.compression, h, w));
    let mut s = conv_row("context.shortcut", &d.shortcut, h, w);
    s.flops += (d.out_channels * h * w) as u64;
    rows.push(s);
}

/// Per-module costs of one `h x w` image. [`Mode::Infer`] omits the
/// embedding head, which only exists for the training loss.
pub fn count_costs(model: &SegModel, h: usize, w: usize, mode: Mode) -> Result<CostReport> {
    if h < MIN_INPUT_EXTENT || w < MIN_INPUT_EXTENT {
        return Err(Error::config(format!(
            "profile input {h}x{w} smaller than {MIN_INPUT_EXTENT}x{MIN_INPUT_EXTENT}"
        )));
    }
    let mut rows = Vec::new();
    let bb = &model.backbone;
    let (mut ch, mut cw) = (h, w);
    for (i, b) in bb.stem.iter().enumerate() {
        let (r, oh, ow) = block_row(&format!("backbone.stem.{i}"), b, ch, cw);
        rows.push(r);
        (ch, cw) = (oh, ow);
    }
    let mut extents = Vec::with_capacity(4);
    for (k, (down, conv)) in bb.stages.iter().enumerate() {
        if let Some(d) = down {
            let (r, oh, ow) = block_row(&format!("backbone.stage{}.down", k + 1), d, ch, cw);
            rows.push(r);
            (ch, cw) = (oh, ow);
        }
        let (r, oh, ow) = block_row(&format!("backbone.stage{}.conv", k + 1), conv, ch, cw);
        rows.push(r);
        (ch, cw) = (oh, ow);
        extents.push((ch, cw));
    }
    let (h4, w4) = extents[3];
    let pooled: usize = bb.plan[..3].iter().map(|c| c * h4 * w4).sum();
    rows.push(ops_row("aggregate", pooled));

    match &model.context {
        ContextHead::Frm(f) => frm_rows(&mut rows, f, h4, w4),
        ContextHead::Ppm(p) => ppm_rows(&mut rows, p, h4, w4)?,
        ContextHead::Dappm(d) => dappm_rows(&mut rows, d, h4, w4),
    }

    let dec = &model.decoder;
    let dw = dec.width;
    for k in (0..3).rev() {
        let (lh, lw) = extents[k];
        rows.push(conv_row(&format!("decoder.lateral{}", k + 1), &dec.laterals[k], lh, lw));
        // upsample the coarser map and add it to the lateral
        rows.push(ops_row(&format!("decoder.merge{}", k + 1), 2 * dw * lh * lw));
        let (r, _, _) = block_row(&format!("decoder.smooth{}", k + 1), &dec.smooth[k], lh, lw);
        rows.push(r);
    }
    let (h1, w1) = extents[0];
    let mut cls = conv_row("decoder.classifier", &dec.classifier, h1, w1);
    cls.flops += (dec.classifier.out_channels * h * w) as u64; // final upsample
    rows.push(cls);
    if mode == Mode::Train {
        rows.push(conv_row("embed_head", &model.embed.conv, h1, w1));
    }
    Ok(CostReport {
        head: model.config.context_head,
        mode,
        input: (h, w),
        rows,
    })
}

/// Side-by-side totals of several reports sharing an input size.
pub fn comparison_table(reports: &[CostReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<8}  {:>12}  {:>16}  {:>12}  {:>16}  {:>16}  {:>16}",
        "head", "params", "flops", "ctx params", "ctx flops", "backbone flops", "decoder flops"
    );
    for r in reports {
        let (cp, cf) = r.subtotal("context.");
        let (_, bf) = r.subtotal("backbone.");
        let (_, df) = r.subtotal("decoder.");
        let _ = writeln!(
            out,
            "{:<8}  {:>12}  {:>16}  {:>12}  {:>16}  {:>16}  {:>16}",
            r.head.to_string(),
            r.total_params(),
            r.total_flops(),
            cp,
            cf,
            bf,
            df
        );
    }
    out
}
