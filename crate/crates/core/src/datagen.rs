//! Synthetic shape-segmentation scenes and the on-disk dataset format.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.txt        key = value: count, geometry, seed, class histogram
//! images/0000.frmt    [1, 3, H, W] float image in [0, 1]
//! labels/0000.pgm     binary P5, maxval 255, one class id per pixel
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::losses::IGNORE_INDEX;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Background plus `num_classes - 1` shape classes.
    pub num_classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Per-pixel uniform noise amplitude.
    pub noise: f32,
    /// Per-shape uniform colour offset amplitude.
    pub jitter: f32,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 5,
            shapes_min: 2,
            shapes_max: 5,
            noise: 0.1,
            jitter: 0.15,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::config(format!("num_classes {} outside [2, 255]", self.num_classes)));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::config(format!("scene {}x{} smaller than 8x8", self.height, self.width)));
        }
        if self.shapes_min > self.shapes_max {
            return Err(Error::config("shapes_min exceeds shapes_max"));
        }
        Ok(())
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.set(&mut self.height, "height")?;
        kv.set(&mut self.width, "width")?;
        kv.set(&mut self.num_classes, "num_classes")?;
        kv.set(&mut self.shapes_min, "shapes_min")?;
        kv.set(&mut self.shapes_max, "shapes_max")?;
        kv.set(&mut self.noise, "noise")?;
        kv.set(&mut self.jitter, "jitter")?;
        kv.set(&mut self.seed, "seed")?;
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.insert("height", self.height);
        kv.insert("width", self.width);
        kv.insert("num_classes", self.num_classes);
        kv.insert("shapes_min", self.shapes_min);
        kv.insert("shapes_max", self.shapes_max);
        kv.insert("noise", self.noise);
        kv.insert("jitter", self.jitter);
        kv.insert("seed", self.seed);
        kv
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Disk,
    Stripes,
}

/// Shape classes cycle through rectangles, disks and stripes; stripes are
/// bars one eighth of the shorter image side wide, alternating with background.
pub fn shape_kind(class: usize) -> ShapeKind {
    match (class - 1) % 3 {
        0 => ShapeKind::Rectangle,
        1 => ShapeKind::Disk,
        _ => ShapeKind::Stripes,
    }
}

const PALETTE: [[f32; 3]; 8] = [
    [0.25, 0.25, 0.25],
    [0.85, 0.25, 0.25],
    [0.25, 0.75, 0.30],
    [0.25, 0.35, 0.85],
    [0.85, 0.80, 0.25],
    [0.75, 0.30, 0.80],
    [0.25, 0.80, 0.80],
    [0.90, 0.55, 0.20],
];

/// Base colour of a class; beyond the fixed palette, hues are spread evenly.
pub fn class_color(class: usize, num_classes: usize) -> [f32; 3] {
    if class < PALETTE.len() {
        return PALETTE[class];
    }
    let hue = (class - PALETTE.len()) as f32 / (num_classes - PALETTE.len()).max(1) as f32;
    let value = if class % 2 == 0 { 0.85 } else { 0.6 };
    let channel = |offset: f32| {
        let t = (hue + offset).fract() * 6.0;
        let k = (t - 3.0).abs() - 1.0;
        0.2 + (value - 0.2) * k.clamp(0.0, 1.0)
    };
    [channel(0.0), channel(2.0 / 3.0), channel(1.0 / 3.0)]
}

/// Placement of one drawn shape, in pixel units; `extent` is `[y0, x0, y1, x1)`
/// for rectangles and stripes, `[cy, cx, r, 0]` (scaled by 2) for disks.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeRecord {
    pub class: usize,
    pub kind: ShapeKind,
    pub extent: [usize; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Tensor<f32>,
    pub labels: Vec<u8>,
    pub shapes: Vec<ShapeRecord>,
}

/// Renders scene `index` of `spec`. Each index draws from its own stream of
/// the seeded generator, so scenes are independent of generation order.
pub fn render_scene(spec: &SceneSpec, index: u64) -> Scene {
    let (h, w, k) = (spec.height, spec.width, spec.num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let mut labels = vec![0u8; h * w];
    let count = rng.gen_range(spec.shapes_min..=spec.shapes_max);
    let mut shapes = Vec::with_capacity(count);
    let mut colors = vec![jittered(class_color(0, k), spec.jitter, &mut rng)];
    let mut instance = vec![0u16; h * w];
    for s in 0..count {
        let class = rng.gen_range(1..k);
        let kind = shape_kind(class);
        colors.push(jittered(class_color(class, k), spec.jitter, &mut rng));
        let id = (s + 1) as u16;
        let extent = match kind {
            ShapeKind::Rectangle | ShapeKind::Stripes => {
                let rh = rng.gen_range(h / 5..=h / 2);
                let rw = rng.gen_range(w / 5..=w / 2);
                let y0 = rng.gen_range(0..=h - rh);
                let x0 = rng.gen_range(0..=w - rw);
                let vertical = rng.gen_bool(0.5);
                let bar = (h.min(w) / 6).max(1);
                for y in y0..y0 + rh {
                    for x in x0..x0 + rw {
                        let on = kind == ShapeKind::Rectangle || (if vertical { x - x0 } else { y - y0 }) / bar % 2 == 0;
                        if on {
                            labels[y * w + x] = class as u8;
                            instance[y * w + x] = id;
                        }
                    }
                }
                [y0, x0, y0 + rh, x0 + rw]
            }
            ShapeKind::Disk => {
                let r = rng.gen_range((h.min(w) / 10).max(2)..=h.min(w) / 4);
                let cy = rng.gen_range(0..h);
                let cx = rng.gen_range(0..w);
                for y in 0..h {
                    for x in 0..w {
                        let dy = y as f64 + 0.5 - cy as f64;
                        let dx = x as f64 + 0.5 - cx as f64;
                        if dy * dy + dx * dx <= (r * r) as f64 {
                            labels[y * w + x] = class as u8;
                            instance[y * w + x] = id;
                        }
                    }
                }
                [cy, cx, r, 0]
            }
        };
        shapes.push(ShapeRecord { class, kind, extent });
    }
    let mut image = Tensor::zeros([1, 3, h, w]);
    let data = image.data_mut();
    for c in 0..3 {
        for p in 0..h * w {
            let base = colors[instance[p] as usize][c];
            let noise = rng.gen_range(-spec.noise..=spec.noise);
            data[c * h * w + p] = (base + noise).clamp(0.0, 1.0);
        }
    }
    Scene { image, labels, shapes }
}

fn jittered<R: Rng>(base: [f32; 3], amplitude: f32, rng: &mut R) -> [f32; 3] {
    base.map(|v| v + rng.gen_range(-amplitude..=amplitude))
}

pub fn write_pgm(path: &Path, labels: &[u8], height: usize, width: usize) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write!(out, "P5\n{width} {height}\n255\n")
        .and_then(|_| out.write_all(labels))
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

/// Reads a binary P5 PGM with maxval 255; returns `(labels, height, width)`.
pub fn read_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::format(path, msg);
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval}, expected 255")));
    }
    // exactly one whitespace byte separates the header from the raster
    let raster = &bytes[(pos + 1).min(bytes.len())..];
    if raster.len() != width * height {
        return Err(bad(&format!("raster has {} bytes, expected {}", raster.len(), width * height)));
    }
    Ok((raster.to_vec(), height, width))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub count: usize,
    pub spec: SceneSpec,
    /// Pixel count per class id.
    pub histogram: Vec<u64>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.txt");
        let kv = KeyValues::read(&path)?;
        let mut spec = SceneSpec::default();
        spec.apply(&kv)?;
        let count = kv
            .parsed("count")?
            .ok_or_else(|| Error::format(&path, "missing count"))?;
        let histogram = kv.list("histogram")?.unwrap_or_default();
        Ok(Self { count, spec, histogram })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut kv = self.spec.to_kv();
        kv.insert("count", self.count);
        let hist: Vec<String> = self.histogram.iter().map(u64::to_string).collect();
        kv.insert("histogram", hist.join(","));
        kv.write(&dir.join("manifest.txt"))
    }
}

fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("images").join(format!("{i:04}.frmt"))
}

fn label_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("labels").join(format!("{i:04}.pgm"))
}

/// Writes `count` scenes and a manifest; identical arguments give identical bytes.
pub fn generate(spec: &SceneSpec, count: usize, dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    for sub in ["images", "labels"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut histogram = vec![0u64; spec.num_classes];
    for i in 0..count {
        let scene = render_scene(spec, i as u64);
        for &y in &scene.labels {
            histogram[y as usize] += 1;
        }
        scene.image.save(&image_path(dir, i))?;
        write_pgm(&label_path(dir, i), &scene.labels, spec.height, spec.width)?;
    }
    let manifest = Manifest {
        count,
        spec: spec.clone(),
        histogram,
    };
    manifest.write(dir)?;
    Ok(manifest)
}

/// Images `N x 3 x H x W` in `[0, 1]` with aligned `N x H x W` labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SegBatch {
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
}

impl SegBatch {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hw(&self) -> (usize, usize) {
        let s = self.images.shape();
        (s[2], s[3])
    }

    /// Copies items `indices` into a new batch.
    pub fn select(&self, indices: &[usize]) -> SegBatch {
        let [_, c, h, w] = self.images.shape();
        let (plane, img) = (h * w, c * h * w);
        let mut data = Vec::with_capacity(indices.len() * img);
        let mut labels = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * img..(i + 1) * img]);
            labels.extend_from_slice(&self.labels[i * plane..(i + 1) * plane]);
        }
        SegBatch {
            images: Tensor::new([indices.len(), c, h, w], data).expect("sizes match"),
            labels,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: Manifest::read(dir)?,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.spec.num_classes
    }

    /// Loads `indices` in order, validating every file against the manifest.
    pub fn load(&self, indices: &[usize]) -> Result<SegBatch> {
        let (h, w) = (self.manifest.spec.height, self.manifest.spec.width);
        let k = self.num_classes();
        let mut data = Vec::with_capacity(indices.len() * 3 * h * w);
        let mut labels = Vec::with_capacity(indices.len() * h * w);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::contract(format!("index {i} outside dataset of {}", self.len())));
            }
            let ip = image_path(&self.dir, i);
            let img = Tensor::load(&ip)?;
            if img.shape() != [1, 3, h, w] {
                return Err(Error::format(&ip, format!("shape {:?}, expected [1, 3, {h}, {w}]", img.shape())));
            }
            let lp = label_path(&self.dir, i);
            let (lab, lh, lw) = read_pgm(&lp)?;
            if (lh, lw) != (h, w) {
                return Err(Error::format(&lp, format!("{lh}x{lw} labels, expected {h}x{w}")));
            }
            if let Some(bad) = lab.iter().find(|&&y| y as usize >= k && y != IGNORE_INDEX) {
                return Err(Error::format(&lp, format!("label {bad} outside [0, {k})")));
            }
            data.extend_from_slice(img.data());
            labels.extend_from_slice(&lab);
        }
        Ok(SegBatch {
            images: Tensor::new([indices.len(), 3, h, w], data)?,
            labels,
        })
    }

    pub fn load_all(&self) -> Result<SegBatch> {
        self.load(&(0..self.len()).collect::<Vec<_>>())
    }
}
