//! Per-sample results as JSON lines, one object per line in arrival order:
//!
//! ```json
//! {"sample_id":12,"batch_index":0,"predicted":1,"probability":0.61,"contexts":[0,1],"cliques":[{"class_id":1,"clique_index":0}]}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use scap_core::pipeline::{CliqueRef, SamplePrediction};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultsRecord {
    pub sample_id: u64,
    pub batch_index: usize,
    pub predicted: usize,
    /// Aggregated probability of `predicted`.
    pub probability: f64,
    pub contexts: Vec<usize>,
    pub cliques: Vec<CliqueRef>,
}

impl From<&SamplePrediction> for ResultsRecord {
    fn from(p: &SamplePrediction) -> Self {
        Self {
            sample_id: p.sample_id,
            batch_index: p.batch_index,
            predicted: p.predicted,
            probability: p.confidence,
            contexts: p.contexts.clone(),
            cliques: p.cliques.clone(),
        }
    }
}

pub fn write_jsonl<W: Write>(mut out: W, records: &[ResultsRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn write_results(path: &Path, records: &[ResultsRecord]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_jsonl(BufWriter::new(f), records).map_err(|e| Error::io(path, e))
}

/// Blank lines are skipped.
pub fn read_results(path: &Path) -> Result<Vec<ResultsRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?);
    }
    Ok(out)
}
