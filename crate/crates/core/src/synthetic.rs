//! Synthetic benchmark with class-level attributes and a global domain shift.
//!
//! Every class has a unit center (its catalog embedding) and a handful of
//! attribute offsets. A sample is
//! `normalize(center + attribute + shift * domain + noise)`, where the domain
//! direction is shared by all samples. Attribute offsets are drawn orthogonal
//! to the span of the class centers (when `dim` leaves room), so they bind
//! samples into cliques without favouring any class; the classification
//! errors come from the noise and the domain shift.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{ClassCatalog, EncoderMode, ImageSample, SampleInput};
use crate::numeric::{axpy, dot, normalize_slice, Vector};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub num_attributes: usize,
    /// Norm of each attribute offset.
    pub attribute_strength: f64,
    /// Weight of the shared domain direction.
    pub domain_shift: f64,
    /// Expected norm of the per-sample Gaussian noise.
    pub noise: f64,
    pub dim: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            samples_per_class: 64,
            num_attributes: 3,
            attribute_strength: 5.0,
            domain_shift: 0.6,
            noise: 2.0,
            dim: 32,
            seed: 0,
        }
    }
}

pub fn class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes).map(|i| format!("class_{i:03}")).collect()
}

fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok((u, _)) = normalize_slice(&v) {
            return u;
        }
    }
}

/// Orthonormal basis of the span of `rows` (modified Gram-Schmidt).
fn orthonormal_basis<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for r in rows {
        let mut v = r.to_vec();
        for b in &basis {
            let c = dot(&v, b);
            axpy(-c, b, &mut v);
        }
        if let Ok((u, n)) = normalize_slice(&v) {
            if n > 1e-9 {
                basis.push(u);
            }
        }
    }
    basis
}

/// Unit vector orthogonal to `basis`; plain random unit when the complement
/// is empty.
fn random_unit_outside<R: Rng>(rng: &mut R, dim: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    if basis.len() >= dim {
        return random_unit(rng, dim);
    }
    loop {
        let mut v = random_unit(rng, dim);
        for b in basis {
            let c = dot(&v, b);
            axpy(-c, b, &mut v);
        }
        if let Ok((u, n)) = normalize_slice(&v) {
            if n > 1e-6 {
                return u;
            }
        }
    }
}

/// Generates a shuffled labelled dataset and the matching catalog. Sample
/// ids are `class * samples_per_class + j`; stream order is a seeded shuffle.
pub fn generate_synthetic(spec: &SyntheticSpec, mode: EncoderMode) -> Result<(Vec<ImageSample>, ClassCatalog)> {
    if spec.num_classes < 2 {
        return Err(Error::TooFew {
            needed: 2,
            found: spec.num_classes,
        });
    }
    if spec.dim == 0 || spec.num_attributes == 0 {
        return Err(Error::InvalidConfig("dim and num_attributes must be positive".into()));
    }
    let catalog = ClassCatalog::from_names(class_names(spec.num_classes), spec.dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let domain = random_unit(&mut rng, spec.dim);
    let basis = orthonormal_basis(catalog.embeddings().row_iter());
    let attributes: Vec<Vec<Vec<f64>>> = (0..spec.num_classes)
        .map(|_| {
            (0..spec.num_attributes)
                .map(|_| {
                    random_unit_outside(&mut rng, spec.dim, &basis)
                        .into_iter()
                        .map(|x| x * spec.attribute_strength)
                        .collect()
                })
                .collect()
        })
        .collect();
    let noise_scale = spec.noise / libm::sqrt(spec.dim as f64);

    let mut samples = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for class in 0..spec.num_classes {
        let center = catalog.embedding(class);
        for j in 0..spec.samples_per_class {
            let attr = &attributes[class][rng.random_range(0..spec.num_attributes)];
            let raw: Vec<f64> = (0..spec.dim)
                .map(|c| {
                    let eps: f64 = rng.sample(StandardNormal);
                    center[c] + attr[c] + spec.domain_shift * domain[c] + noise_scale * eps
                })
                .collect();
            let v = Vector::new(normalize_slice(&raw)?.0)?;
            samples.push(ImageSample {
                id: (class * spec.samples_per_class + j) as u64,
                input: match mode {
                    EncoderMode::TokenEncoder => SampleInput::Descriptor(v),
                    EncoderMode::FeatureSpace => SampleInput::Feature(v),
                },
                label: Some(class),
            });
        }
    }
    samples.shuffle(&mut rng);
    Ok((samples, catalog))
}
