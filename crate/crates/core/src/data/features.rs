//! Binary image-feature container.
//!
//! Layout (little-endian): magic `MMXI`, u32 version, u32 count, u32 grid
//! positions, u32 grid dim, u32 pooled dim; then per record a u32-length
//! prefixed UTF-8 id, the grid as f32 values, the pooled vector as f32 values.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::ImageFeatures;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"MMXI";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub grid_positions: usize,
    pub grid_dim: usize,
    pub pooled_dim: usize,
    records: Vec<(String, Arc<ImageFeatures>)>,
    index: HashMap<String, usize>,
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated data at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub(crate) fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Rounds every value through f32 so in-memory features match their
/// serialized form exactly.
pub fn round_to_f32(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

impl FeatureFile {
    pub fn new(grid_positions: usize, grid_dim: usize, pooled_dim: usize) -> Self {
        FeatureFile {
            grid_positions,
            grid_dim,
            pooled_dim,
            records: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, features: ImageFeatures) -> Result<()> {
        let id = id.into();
        if features.grid.shape() != [self.grid_positions, self.grid_dim] {
            return Err(Error::Input(format!(
                "features for {id} have grid shape {:?}",
                features.grid.shape()
            )));
        }
        if features.pooled.len() != self.pooled_dim {
            return Err(Error::Input(format!(
                "features for {id} have {} pooled values",
                features.pooled.len()
            )));
        }
        if self.index.contains_key(&id) {
            return Err(Error::Input(format!("duplicate feature id {id}")));
        }
        self.index.insert(id.clone(), self.records.len());
        self.records.push((id, Arc::new(features)));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Arc<ImageFeatures>> {
        self.index.get(id).map(|&i| &self.records[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<ImageFeatures>)> {
        self.records.iter().map(|(id, f)| (id.as_str(), f))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(FEATURE_MAGIC);
        for v in [
            FEATURE_VERSION,
            self.records.len() as u32,
            self.grid_positions as u32,
            self.grid_dim as u32,
            self.pooled_dim as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (id, f) in &self.records {
            put_string(&mut out, id);
            for v in f.grid.data().iter().chain(f.pooled.data()) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != FEATURE_MAGIC {
            return Err(Error::Format("not a feature file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FEATURE_VERSION {
            return Err(Error::Format(format!(
                "unsupported feature file version {version}"
            )));
        }
        let count = r.u32()? as usize;
        let (p, c, n) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        if p == 0 || c == 0 || n == 0 {
            return Err(Error::Format("feature dimensions must be positive".into()));
        }
        let mut file = FeatureFile::new(p, c, n);
        for _ in 0..count {
            let id = r.string()?;
            let grid: Vec<f64> = (0..p * c)
                .map(|_| r.f32().map(f64::from))
                .collect::<Result<_>>()?;
            let pooled: Vec<f64> = (0..n)
                .map(|_| r.f32().map(f64::from))
                .collect::<Result<_>>()?;
            let feats = ImageFeatures::new(Tensor::new(vec![p, c], grid)?, Tensor::vector(pooled))
                .map_err(|e| Error::Format(format!("record {id}: {e}")))?;
            file.insert(id, feats)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after feature records".into()));
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        FeatureFile::from_bytes(&bytes)
    }
}
