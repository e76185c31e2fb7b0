use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// One line of a JSONL dataset. Either modality may be missing, but not both.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub id: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

impl Example {
    pub fn validate(&self) -> Result<()> {
        if self.target.is_none() && self.image_ref.is_none() {
            return Err(Error::Input(format!(
                "example {} has neither a target nor an image",
                self.id
            )));
        }
        Ok(())
    }
}

pub fn validate_dataset(examples: &[Example]) -> Result<()> {
    let mut seen = HashSet::new();
    for ex in examples {
        ex.validate()?;
        if !seen.insert(ex.id.as_str()) {
            return Err(Error::Input(format!("duplicate example id {}", ex.id)));
        }
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(ex);
    }
    validate_dataset(&out)?;
    Ok(out)
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let mut buf = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut buf, ex).map_err(|e| Error::Format(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Repeats each part `factor` times and shuffles the union with `rng`.
///
/// Ids are suffixed with `#k` for the k-th extra copy so they stay unique.
pub fn mix_datasets(parts: &[(&[Example], usize)], rng: &mut SplitMix64) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, (part, factor)) in parts.iter().enumerate() {
        if *factor == 0 {
            return Err(Error::Config(format!(
                "oversampling factor of part {i} must be at least 1"
            )));
        }
        if part.is_empty() {
            log::warn!("dataset part {i} is empty; skipped");
            continue;
        }
        for copy in 0..*factor {
            for ex in part.iter() {
                let mut ex = ex.clone();
                if copy > 0 {
                    ex.id = format!("{}#{copy}", ex.id);
                }
                out.push(ex);
            }
        }
    }
    rng.shuffle(&mut out);
    Ok(out)
}
