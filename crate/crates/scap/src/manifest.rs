//! Dataset manifest, a JSON document next to a feature file.
//!
//! ```json
//! {
//!   "dataset": "synthetic-seed0",
//!   "classes": ["class_000", "class_001"],
//!   "samples": [{"id": 0, "class_index": 1, "source": "img/0.png"}],
//!   "encoder": "synthetic",
//!   "dim": 32
//! }
//! ```
//!
//! `class_index` and `source` may be omitted. Unknown keys are rejected.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub dataset: String,
    pub classes: Vec<String>,
    pub samples: Vec<SampleRecord>,
    /// Free-form provenance of the embeddings.
    pub encoder: String,
    pub dim: usize,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Manifest(format!("need at least 2 classes, found {}", self.classes.len())));
        }
        if self.dim == 0 {
            return Err(Error::Manifest("dim must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(self.samples.len());
        for s in &self.samples {
            if !seen.insert(s.id) {
                return Err(Error::IdMismatch {
                    id: s.id,
                    detail: "appears twice in the manifest",
                });
            }
            if let Some(c) = s.class_index {
                if c >= self.classes.len() {
                    return Err(Error::Manifest(format!(
                        "sample {} has class_index {c} but there are {} classes",
                        s.id,
                        self.classes.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
