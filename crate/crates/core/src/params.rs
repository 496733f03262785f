//! Named parameter storage shared by all layers, plus the checkpoint manifest format.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_u32, Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution kernels; the only kind that receives weight decay.
    Weight,
    /// Biases and normalization scale/shift.
    NoDecay,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::Buffer)
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<f32>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<f32>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<f32> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Element count of trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.trainable())
            .map(|e| e.value.numel())
            .sum()
    }

    /// All values converted to `E`, indexed by `ParamId`.
    pub fn values<E: Element>(&self) -> Vec<Tensor<E>> {
        self.entries.iter().map(|e| e.value.cast()).collect()
    }

    /// Writes the manifest: per entry a u32 name length, the UTF-8 name, then one FRMT record.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(e.name.as_bytes());
            e.value.write_frmt(&mut buf).map_err(|err| Error::io(path, err))?;
        }
        std::fs::write(path, buf).map_err(|err| Error::io(path, err))
    }

    /// Reads a manifest as `(name, tensor)` pairs.
    pub fn read_manifest(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cur = bytes.as_slice();
        let fmt = |msg: String| Error::format(path, msg);
        let count = read_u32(&mut cur).map_err(|e| fmt(e.to_string()))? as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(&mut cur).map_err(|e| fmt(e.to_string()))? as usize;
            let mut name = vec![0u8; len];
            cur.read_exact(&mut name).map_err(|e| fmt(e.to_string()))?;
            let name = String::from_utf8(name).map_err(|e| fmt(format!("parameter name: {e}")))?;
            let t = Tensor::read_frmt(&mut cur, path)?;
            out.push((name, t));
        }
        if !cur.is_empty() {
            return Err(fmt(format!("{} trailing bytes", cur.len())));
        }
        Ok(out)
    }

    /// Loads values by name into an already-constructed store; every entry must
    /// be present with an identical shape.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let records = Self::read_manifest(path)?;
        if records.len() != self.entries.len() {
            return Err(Error::format(
                path,
                format!("expected {} tensors, found {}", self.entries.len(), records.len()),
            ));
        }
        for (name, t) in records {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::format(path, format!("unknown parameter {name}")))?;
            let want: Shape = self.entries[id.0].value.shape();
            if t.shape() != want {
                return Err(Error::format(
                    path,
                    format!("shape of {name}: expected {want:?}, found {:?}", t.shape()),
                ));
            }
            self.entries[id.0].value = t;
        }
        Ok(())
    }
}
