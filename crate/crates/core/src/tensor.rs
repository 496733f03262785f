//! Dense rank-4 tensors (N, C, H, W) and the `FRMT` binary format.

use std::fmt::Debug;
use std::io::{Read, Write};
use std::iter::Sum;
use std::path::Path;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

use crate::error::{Error, Result};

/// Extents in N, C, H, W order.
pub type Shape = [usize; 4];

/// Scalar type a graph can be evaluated in. Training runs in `f32`,
/// gradient checks replay the same graph in `f64`.
pub trait Element:
    Float + NumAssign + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + Sum + 'static
{
}

impl Element for f32 {}
impl Element for f64 {}

/// Converts an `f64` literal into the element type.
#[inline]
pub fn lit<E: Element>(x: f64) -> E {
    E::from_f64(x).expect("element conversion")
}

pub fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E = f32> {
    shape: Shape,
    data: Vec<E>,
    pub grad: Option<Vec<E>>,
    pub requires_grad: bool,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Shape, data: Vec<E>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn full(shape: Shape, value: E) -> Self {
        Self {
            shape,
            data: vec![value; numel(&shape)],
            grad: None,
            requires_grad: false,
        }
    }

    /// Builds a tensor by evaluating `f(n, c, h, w)` in row-major order.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> E) -> Self {
        let mut data = Vec::with_capacity(numel(&shape));
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for h in 0..shape[2] {
                    for w in 0..shape[3] {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    /// A `rows x cols` matrix stored as `[1, 1, rows, cols]`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<E>) -> Result<Self> {
        Self::new([1, 1, rows, cols], data)
    }

    pub fn scalar(value: E) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((n * cs + c) * hs + h) * ws + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> E {
        self.data[self.index(n, c, h, w)]
    }

    pub fn item(&self) -> E {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if numel(&shape) != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), self.data.len());
        }
        Ok(self)
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| F::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[E]) {
        match &mut self.grad {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<E>) -> E {
        self.data
            .iter()
            .zip(&other.data)
            .fold(E::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

const FRMT_MAGIC: &[u8; 4] = b"FRMT";
const FRMT_VERSION: u32 = 1;

impl Tensor<f32> {
    /// Serializes as `FRMT`, version, rank, extents, then the little-endian payload.
    pub fn write_frmt<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        out.write_all(FRMT_MAGIC)?;
        out.write_all(&FRMT_VERSION.to_le_bytes())?;
        out.write_all(&4u32.to_le_bytes())?;
        for &e in &self.shape {
            out.write_all(&(e as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)
    }

    /// Reads one `FRMT` record. Ranks below 4 are padded with leading unit extents.
    pub fn read_frmt<R: Read>(input: &mut R, origin: &Path) -> Result<Self> {
        let fmt = |msg: String| Error::format(origin, msg);
        let mut magic = [0u8; 4];
        input
            .read_exact(&mut magic)
            .map_err(|e| fmt(format!("truncated header: {e}")))?;
        if &magic != FRMT_MAGIC {
            return Err(fmt(format!("bad magic {magic:?}")));
        }
        let version = read_u32(input).map_err(|e| fmt(e.to_string()))?;
        if version != FRMT_VERSION {
            return Err(fmt(format!("unsupported FRMT version {version}")));
        }
        let rank = read_u32(input).map_err(|e| fmt(e.to_string()))? as usize;
        if rank == 0 || rank > 4 {
            return Err(fmt(format!("unsupported rank {rank}")));
        }
        let mut shape = [1usize; 4];
        for slot in shape.iter_mut().skip(4 - rank) {
            *slot = read_u32(input).map_err(|e| fmt(e.to_string()))? as usize;
        }
        let count = numel(&shape);
        let mut raw = vec![0u8; count * 4];
        input
            .read_exact(&mut raw)
            .map_err(|e| fmt(format!("payload of {count} floats truncated: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_frmt(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cursor = bytes.as_slice();
        let t = Self::read_frmt(&mut cursor, path)?;
        if !cursor.is_empty() {
            return Err(Error::format(path, format!("{} trailing bytes", cursor.len())));
        }
        Ok(t)
    }
}

pub(crate) fn read_u32<R: Read>(input: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(Tensor::<f32>::new([1, 2, 2, 2], vec![0.0; 7]).is_err());
    }

    #[test]
    fn frmt_header_layout() {
        let t = Tensor::new([1, 1, 1, 2], vec![1.0f32, -2.0]).unwrap();
        let mut buf = Vec::new();
        t.write_frmt(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"FRMT");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 4);
        assert_eq!(buf.len(), 12 + 16 + 8);
        assert_eq!(&buf[28..32], &1.0f32.to_le_bytes());
    }

    #[test]
    fn frmt_rejects_bad_magic() {
        let bytes = b"FRMX\x01\0\0\0\x01\0\0\0\x01\0\0\0\0\0\0\0";
        let err = Tensor::read_frmt(&mut bytes.as_slice(), Path::new("x.frmt")).unwrap_err();
        assert!(err.to_string().contains("x.frmt"));
    }

    #[test]
    fn frmt_pads_low_rank() {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"FRMT");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&3u32.to_le_bytes());
        for i in 0..6 {
            buf.extend_from_slice(&(i as f32).to_le_bytes());
        }
        let t = Tensor::read_frmt(&mut buf.as_slice(), Path::new("m")).unwrap();
        assert_eq!(t.shape(), [1, 1, 2, 3]);
        assert_eq!(t.at(0, 0, 1, 2), 5.0);
    }

    proptest! {
        #[test]
        fn frmt_round_trip(n in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
            let mut state = seed;
            let t = Tensor::from_fn([n, c, h, w], |_, _, _, _| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f32::from_bits((state >> 33) as u32 & 0x3f7f_ffff)
            });
            let mut buf = Vec::new();
            t.write_frmt(&mut buf).unwrap();
            let back = Tensor::read_frmt(&mut buf.as_slice(), Path::new("p")).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
