//! Loading a feature file + manifest pair into core samples, and writing
//! synthetic data back out in the same formats.
//!
//! Class text embeddings come from an optional second feature file with one
//! row per class: ids `0..classes` in order, same dimension as the image
//! features. Without it the catalog is derived from the class names.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use scap_core::numeric::normalize_slice;
use scap_core::{ClassCatalog, EncoderMode, ImageSample, Matrix, SampleInput, Vector};

use crate::error::{Error, Result};
use crate::features::FeatureFile;
use crate::manifest::{Manifest, SampleRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Manifest order.
    pub samples: Vec<ImageSample>,
    pub catalog: ClassCatalog,
    pub manifest: Manifest,
}

pub fn load_dataset(features: &Path, manifest: &Path, mode: EncoderMode, text_features: Option<&Path>) -> Result<Dataset> {
    let file = FeatureFile::read(features)?;
    let manifest = Manifest::read(manifest)?;
    let text = text_features.map(FeatureFile::read).transpose()?;
    assemble(&file, manifest, mode, text.as_ref())
}

/// Joins already-parsed parts. Nothing is returned unless every check passes.
pub fn assemble(file: &FeatureFile, manifest: Manifest, mode: EncoderMode, text: Option<&FeatureFile>) -> Result<Dataset> {
    manifest.validate()?;
    if file.dim() != manifest.dim {
        return Err(Error::DimMismatch {
            what: "feature file",
            expected: manifest.dim,
            found: file.dim(),
        });
    }
    let mut row_of = HashMap::with_capacity(file.count());
    for (i, &id) in file.ids().iter().enumerate() {
        if row_of.insert(id, i).is_some() {
            return Err(Error::IdMismatch {
                id,
                detail: "appears twice in the feature file",
            });
        }
    }
    if file.count() != manifest.samples.len() {
        let listed: std::collections::HashSet<u64> = manifest.samples.iter().map(|s| s.id).collect();
        if let Some(&id) = file.ids().iter().find(|id| !listed.contains(id)) {
            return Err(Error::IdMismatch {
                id,
                detail: "is in the feature file but not in the manifest",
            });
        }
    }

    let mut samples = Vec::with_capacity(manifest.samples.len());
    for rec in &manifest.samples {
        let &row = row_of.get(&rec.id).ok_or(Error::IdMismatch {
            id: rec.id,
            detail: "is missing from the feature file",
        })?;
        let v = widen(file.row(row), !file.unit_norm())?;
        samples.push(ImageSample {
            id: rec.id,
            input: match mode {
                EncoderMode::TokenEncoder => SampleInput::Descriptor(v),
                EncoderMode::FeatureSpace => SampleInput::Feature(v),
            },
            label: rec.class_index,
        });
    }

    let catalog = match text {
        None => ClassCatalog::from_names(manifest.classes.clone(), manifest.dim)?,
        Some(t) => {
            if t.dim() != manifest.dim {
                return Err(Error::DimMismatch {
                    what: "text feature file",
                    expected: manifest.dim,
                    found: t.dim(),
                });
            }
            if t.count() != manifest.classes.len() {
                return Err(Error::DimMismatch {
                    what: "text feature rows",
                    expected: manifest.classes.len(),
                    found: t.count(),
                });
            }
            if let Some((_, &id)) = t.ids().iter().enumerate().find(|(i, &id)| id != *i as u64) {
                return Err(Error::IdMismatch {
                    id,
                    detail: "is not the class index of its row in the text feature file",
                });
            }
            let rows: Vec<Vec<f64>> = (0..t.count())
                .map(|i| widen(t.row(i), !t.unit_norm()).map(Vector::into_inner))
                .collect::<Result<_>>()?;
            ClassCatalog::from_embeddings(manifest.classes.clone(), Matrix::from_rows(&rows)?)?
        }
    };
    Ok(Dataset {
        samples,
        catalog,
        manifest,
    })
}

fn widen(row: &[f32], renormalize: bool) -> Result<Vector> {
    let v: Vec<f64> = row.iter().map(|&x| x as f64).collect();
    let v = if renormalize { normalize_slice(&v)?.0 } else { v };
    Ok(Vector::new(v)?)
}

pub struct SavedPaths {
    pub features: PathBuf,
    pub manifest: PathBuf,
    pub text_features: PathBuf,
}

impl SavedPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            features: dir.join("features.scapf"),
            manifest: dir.join("manifest.json"),
            text_features: dir.join("text_features.scapf"),
        }
    }
}

/// Writes samples (labels into `class_index`) plus the catalog embeddings.
pub fn save_dataset(dir: &Path, name: &str, encoder: &str, samples: &[ImageSample], catalog: &ClassCatalog) -> Result<SavedPaths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = SavedPaths::in_dir(dir);
    let rows: Vec<&[f64]> = samples
        .iter()
        .map(|s| match &s.input {
            SampleInput::Descriptor(v) | SampleInput::Feature(v) => &v[..],
        })
        .collect();
    let ids = samples.iter().map(|s| s.id).collect();
    let file = FeatureFile::from_rows(&rows, ids).map_err(|source| Error::Format {
        path: paths.features.clone(),
        source,
    })?;
    file.write(&paths.features)?;

    let emb: Vec<&[f64]> = catalog.embeddings().row_iter().collect();
    let text = FeatureFile::from_rows(&emb, (0..catalog.len() as u64).collect()).map_err(|source| Error::Format {
        path: paths.text_features.clone(),
        source,
    })?;
    text.write(&paths.text_features)?;

    let manifest = Manifest {
        dataset: name.into(),
        classes: catalog.names().to_vec(),
        samples: samples
            .iter()
            .map(|s| SampleRecord {
                id: s.id,
                class_index: s.label,
                source: None,
            })
            .collect(),
        encoder: encoder.into(),
        dim: file.dim(),
    };
    manifest.write(&paths.manifest)?;
    Ok(paths)
}
