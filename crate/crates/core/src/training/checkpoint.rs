//! Checkpoint archives.
//!
//! Layout (little-endian): magic `MMXF`, u32 version, u32 entry count; per
//! entry a u32-length-prefixed UTF-8 name, u32 rank and `rank` u32 dims; the
//! payload as f32 values in manifest order; then a u32 count of metadata pairs,
//! each a length-prefixed key and value.

use std::collections::HashSet;
use std::path::Path;

use crate::data::{put_string, Reader};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMXF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointArchive {
    pub manifest: Vec<(String, Vec<usize>)>,
    pub payload: Vec<f32>,
    pub meta: Vec<(String, String)>,
}

impl CheckpointArchive {
    pub fn new(
        manifest: Vec<(String, Vec<usize>)>,
        payload: Vec<f32>,
        meta: Vec<(String, String)>,
    ) -> Result<Self> {
        let mut names = HashSet::new();
        for (name, shape) in &manifest {
            if !names.insert(name.as_str()) {
                return Err(Error::Format(format!(
                    "duplicate parameter {name} in manifest"
                )));
            }
            if shape.is_empty() || shape.contains(&0) {
                return Err(Error::Format(format!(
                    "parameter {name} has invalid shape {shape:?}"
                )));
            }
        }
        let expected: usize = manifest
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        if expected != payload.len() {
            return Err(Error::Format(format!(
                "manifest needs {expected} values, payload has {}",
                payload.len()
            )));
        }
        Ok(CheckpointArchive {
            manifest,
            payload,
            meta,
        })
    }

    /// Snapshots `params` at 32-bit precision.
    pub fn from_params(params: &ParamStore, meta: Vec<(String, String)>) -> Self {
        let manifest = params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        let payload = params
            .tensors()
            .iter()
            .flat_map(|t| t.data().iter().map(|&v| v as f32))
            .collect();
        CheckpointArchive {
            manifest,
            payload,
            meta,
        }
    }

    /// Writes the archived values into `params`, which must have the same manifest.
    pub fn apply_to(&self, params: &mut ParamStore) -> Result<()> {
        if params.len() != self.manifest.len() {
            return Err(Error::Structural(format!(
                "checkpoint has {} parameters, model has {}",
                self.manifest.len(),
                params.len()
            )));
        }
        let mut offset = 0;
        for (id, (name, shape)) in params
            .ids()
            .collect::<Vec<_>>()
            .into_iter()
            .zip(&self.manifest)
        {
            if params.name(id) != name || params.get(id).shape() != shape.as_slice() {
                return Err(Error::Structural(format!(
                    "checkpoint entry {name} {shape:?} does not match model parameter {} {:?}",
                    params.name(id),
                    params.get(id).shape()
                )));
            }
            let n: usize = shape.iter().product();
            let values = self.payload[offset..offset + n]
                .iter()
                .map(|&v| f64::from(v))
                .collect();
            *params.get_mut(id) = Tensor::new(shape.clone(), values)?;
            offset += n;
        }
        Ok(())
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn step(&self) -> Option<usize> {
        self.meta_value("step")?.parse().ok()
    }

    pub fn score(&self) -> Option<f64> {
        self.meta_value("score")?.parse().ok()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.payload.len() * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.manifest.len() as u32).to_le_bytes());
        for (name, shape) in &self.manifest {
            put_string(&mut out, name);
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_string(&mut out, k);
            put_string(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            manifest.push((name, shape));
        }
        let total: usize = manifest
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        let payload = (0..total).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let n_meta = r.u32()? as usize;
        let meta = (0..n_meta)
            .map(|_| Ok((r.string()?, r.string()?)))
            .collect::<Result<Vec<_>>>()?;
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        CheckpointArchive::new(manifest, payload, meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        CheckpointArchive::from_bytes(&bytes)
    }
}

/// Parameter-wise mean of archives sharing one manifest. The mean is taken in
/// f64 and rounded once to f32. Metadata other than step and score is kept
/// where every archive agrees on it.
pub fn average_checkpoints(archives: &[CheckpointArchive]) -> Result<CheckpointArchive> {
    let first = archives
        .first()
        .ok_or_else(|| Error::Contract("nothing to average".into()))?;
    for (k, a) in archives.iter().enumerate().skip(1) {
        if a.manifest.len() != first.manifest.len() {
            return Err(Error::Structural(format!(
                "checkpoint {k} has {} entries, checkpoint 0 has {}",
                a.manifest.len(),
                first.manifest.len()
            )));
        }
        if let Some(i) = a
            .manifest
            .iter()
            .zip(&first.manifest)
            .position(|(x, y)| x != y)
        {
            return Err(Error::Structural(format!(
                "checkpoint {k} entry {i} is {:?}, checkpoint 0 has {:?}",
                a.manifest[i], first.manifest[i]
            )));
        }
    }
    let n = archives.len() as f64;
    let payload = (0..first.payload.len())
        .map(|i| {
            (archives
                .iter()
                .map(|a| f64::from(a.payload[i]))
                .sum::<f64>()
                / n) as f32
        })
        .collect();
    let steps: Vec<String> = archives
        .iter()
        .map(|a| a.meta_value("step").unwrap_or("?").to_string())
        .collect();
    let mut meta = vec![("source_steps".to_string(), steps.join(","))];
    for (k, v) in &first.meta {
        if k != "step"
            && k != "score"
            && k != "source_steps"
            && archives.iter().all(|a| a.meta_value(k) == Some(v.as_str()))
        {
            meta.push((k.clone(), v.clone()));
        }
    }
    CheckpointArchive::new(first.manifest.clone(), payload, meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn archive(values: &[f32]) -> CheckpointArchive {
        CheckpointArchive::new(
            vec![("w".into(), vec![values.len()])],
            values.to_vec(),
            vec![("step".into(), "1".into())],
        )
        .unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let a = archive(&[1.0, -2.5, 3.25]);
        let bytes = a.to_bytes();
        assert_eq!(&bytes[..4], b"MMXF");
        let back = CheckpointArchive::from_bytes(&bytes).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn mean_of_two_scalars() {
        let avg = average_checkpoints(&[archive(&[1.0]), archive(&[3.0])]).unwrap();
        assert_eq!(avg.payload, vec![2.0]);
        assert_eq!(avg.meta_value("source_steps"), Some("1,1"));
    }

    #[test]
    fn mismatched_manifests_are_structural_errors() {
        let a = archive(&[1.0, 2.0]);
        let b =
            CheckpointArchive::new(vec![("v".into(), vec![2])], vec![1.0, 2.0], vec![]).unwrap();
        let err = average_checkpoints(&[a, b]).unwrap_err();
        assert!(matches!(err, Error::Structural(ref m) if m.contains("entry 0")));
        assert!(average_checkpoints(&[]).is_err());
    }

    #[test]
    fn payload_length_checked() {
        assert!(CheckpointArchive::new(vec![("w".into(), vec![3])], vec![1.0], vec![]).is_err());
    }
}
