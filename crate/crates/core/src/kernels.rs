//! Slice-level kernels shared by the autodiff graph and by non-differentiable
//! utilities (augmentation, evaluation).
//!
//! Every accumulation runs in a fixed sequential order so results are
//! bit-reproducible. Products are written in axpy form (`c[i, :] += a * b[k, :]`)
//! which keeps that order per output element while letting the compiler vectorize
//! across the row.

use crate::tensor::{lit, Element};

/// `c[m, n] += a[m, k] * b[k, n]`, all row-major.
pub fn matmul_acc<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == E::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// Transposes a row-major `rows x cols` matrix.
pub fn transpose<E: Element>(src: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if padded < kernel || self.stride == 0 {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

/// Geometry of one convolution call.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.spec.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.spec.groups
    }
    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.oh * self.ow
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.pad == 0
    }
}

/// Unfolds the channels `[c0, c0 + cin_g)` of one image into `[cin_g*kh*kw, oh*ow]`.
fn im2col<E: Element>(img: &[E], g: &ConvGeom, c0: usize, cols: &mut [E]) {
    let (h, w, oh, ow) = (g.h as isize, g.w as isize, g.oh, g.ow);
    let (s, pad) = (g.spec.stride as isize, g.spec.pad as isize);
    let p = g.p();
    let mut row = 0;
    for c in c0..c0 + g.cin_g() {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh as isize {
            for kx in 0..g.kw as isize {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = oy as isize * s - pad + ky;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h {
                        line.fill(E::zero());
                        continue;
                    }
                    let src = &plane[(iy * w) as usize..((iy + 1) * w) as usize];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s - pad + kx;
                        *v = if ix < 0 || ix >= w { E::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Folds `[cin_g*kh*kw, oh*ow]` column gradients back onto image channels.
fn col2im_acc<E: Element>(cols: &[E], g: &ConvGeom, c0: usize, img: &mut [E]) {
    let (h, w, oh, ow) = (g.h as isize, g.w as isize, g.oh, g.ow);
    let (s, pad) = (g.spec.stride as isize, g.spec.pad as isize);
    let p = g.p();
    let mut row = 0;
    for c in c0..c0 + g.cin_g() {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh as isize {
            for kx in 0..g.kw as isize {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = oy as isize * s - pad + ky;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = ox as isize * s - pad + kx;
                        if ix >= 0 && ix < w {
                            plane[(iy * w + ix) as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward<E: Element>(x: &[E], weight: &[E], bias: Option<&[E]>, g: &ConvGeom) -> Vec<E> {
    let (k, p, cin_g, cout_g) = (g.k(), g.p(), g.cin_g(), g.cout_g());
    let mut out = vec![E::zero(); g.n * g.cout * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![E::zero(); k * p] };
    for n in 0..g.n {
        let img = &x[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        for grp in 0..g.spec.groups {
            let w_g = &weight[grp * cout_g * k..(grp + 1) * cout_g * k];
            let o0 = (n * g.cout + grp * cout_g) * p;
            let out_g = &mut out[o0..o0 + cout_g * p];
            if g.is_pointwise() {
                let src = &img[grp * cin_g * p..(grp + 1) * cin_g * p];
                matmul_acc(w_g, src, out_g, cout_g, k, p);
            } else {
                im2col(img, g, grp * cin_g, &mut cols);
                matmul_acc(w_g, &cols, out_g, cout_g, k, p);
            }
        }
        if let Some(b) = bias {
            for oc in 0..g.cout {
                let row = &mut out[(n * g.cout + oc) * p..(n * g.cout + oc + 1) * p];
                for v in row {
                    *v += b[oc];
                }
            }
        }
    }
    out
}

/// Returns `(dx, dweight, dbias)`; `dx` is skipped when `want_dx` is false.
pub fn conv2d_backward<E: Element>(
    x: &[E],
    weight: &[E],
    dout: &[E],
    g: &ConvGeom,
    want_dx: bool,
    want_bias: bool,
) -> (Option<Vec<E>>, Vec<E>, Option<Vec<E>>) {
    let (k, p, cin_g, cout_g) = (g.k(), g.p(), g.cin_g(), g.cout_g());
    let mut dw = vec![E::zero(); weight.len()];
    let mut dx = if want_dx { Some(vec![E::zero(); x.len()]) } else { None };
    let mut cols = vec![E::zero(); k * p];
    let mut dcols = vec![E::zero(); k * p];
    let w_t: Vec<Vec<E>> = (0..g.spec.groups)
        .map(|grp| transpose(&weight[grp * cout_g * k..(grp + 1) * cout_g * k], cout_g, k))
        .collect();
    for n in 0..g.n {
        let img = &x[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        for grp in 0..g.spec.groups {
            let o0 = (n * g.cout + grp * cout_g) * p;
            let dout_g = &dout[o0..o0 + cout_g * p];
            if g.is_pointwise() {
                cols.copy_from_slice(&img[grp * cin_g * p..(grp + 1) * cin_g * p]);
            } else {
                im2col(img, g, grp * cin_g, &mut cols);
            }
            let cols_t = transpose(&cols, k, p);
            matmul_acc(dout_g, &cols_t, &mut dw[grp * cout_g * k..(grp + 1) * cout_g * k], cout_g, p, k);
            if let Some(dx) = dx.as_mut() {
                dcols.fill(E::zero());
                matmul_acc(&w_t[grp], dout_g, &mut dcols, k, cout_g, p);
                let dimg = &mut dx[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
                if g.is_pointwise() {
                    for (d, &v) in dimg[grp * cin_g * p..(grp + 1) * cin_g * p].iter_mut().zip(&dcols) {
                        *d += v;
                    }
                } else {
                    col2im_acc(&dcols, g, grp * cin_g, dimg);
                }
            }
        }
    }
    let db = want_bias.then(|| {
        let mut db = vec![E::zero(); g.cout];
        for n in 0..g.n {
            for (oc, acc) in db.iter_mut().enumerate() {
                for &v in &dout[(n * g.cout + oc) * p..(n * g.cout + oc + 1) * p] {
                    *acc += v;
                }
            }
        }
        db
    });
    (dx, dw, db)
}

/// Input window `[start, end)` feeding adaptive-pool output cell `i`.
#[inline]
pub fn pool_window(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

/// Adaptive average pooling over `planes` independent `h x w` planes.
pub fn adaptive_avg_pool<E: Element>(x: &[E], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<E> {
    let mut out = vec![E::zero(); planes * oh * ow];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = pool_window(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = pool_window(ox, w, ow);
                let mut acc = E::zero();
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += src[y * w + xx];
                    }
                }
                let count = lit::<E>(((y1 - y0) * (x1 - x0)) as f64);
                out[(pl * oh + oy) * ow + ox] = acc / count;
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward<E: Element>(
    dout: &[E],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let mut dx = vec![E::zero(); planes * h * w];
    for pl in 0..planes {
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = pool_window(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = pool_window(ox, w, ow);
                let count = lit::<E>(((y1 - y0) * (x1 - x0)) as f64);
                let gv = dout[(pl * oh + oy) * ow + ox] / count;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        dst[y * w + xx] += gv;
                    }
                }
            }
        }
    }
    dx
}

/// Per-output-index `(lo, hi, frac)` for half-pixel-centred linear interpolation.
pub fn linear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn bilinear<E: Element>(x: &[E], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<E> {
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut out = vec![E::zero(); planes * oh * ow];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy: E = lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx: E = lit(fx);
                let top = src[y0 * w + x0] * (E::one() - fx) + src[y0 * w + x1] * fx;
                let bottom = src[y1 * w + x0] * (E::one() - fx) + src[y1 * w + x1] * fx;
                out[(pl * oh + oy) * ow + ox] = top * (E::one() - fy) + bottom * fy;
            }
        }
    }
    out
}

pub fn bilinear_backward<E: Element>(dout: &[E], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<E> {
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut dx = vec![E::zero(); planes * h * w];
    for pl in 0..planes {
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy: E = lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx: E = lit(fx);
                let gv = dout[(pl * oh + oy) * ow + ox];
                let gt = gv * (E::one() - fy);
                let gb = gv * fy;
                dst[y0 * w + x0] += gt * (E::one() - fx);
                dst[y0 * w + x1] += gt * fx;
                dst[y1 * w + x0] += gb * (E::one() - fx);
                dst[y1 * w + x1] += gb * fx;
            }
        }
    }
    dx
}

/// Nearest-neighbour source index (floor convention).
#[inline]
pub fn nearest_index(o: usize, input: usize, output: usize) -> usize {
    ((o * input) / output).min(input - 1)
}

/// Nearest-neighbour resize of a `h x w` label plane.
pub fn resize_nearest<T: Copy>(src: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let sy = nearest_index(oy, h, oh);
        for ox in 0..ow {
            out.push(src[sy * w + nearest_index(ox, w, ow)]);
        }
    }
    out
}
