//! Toy prompted encoders.
//!
//! Each tower maps its input through a fixed linear projection, adds a
//! projected attention-pooled prompt, and normalizes:
//!
//! ```text
//! image:  f = normalize(W_x · x + W_p · pool(P, q))      (token-encoder mode)
//!         f = normalize(x_raw + W_p · pool(P, q))        (feature-space mode)
//! text:   g = normalize(W_t · e_class + W_p · pool(P, q))
//! ```
//!
//! `pool` is a softmax attention over prompt tokens against a frozen query,
//! so concatenating prompts is not the same as averaging them.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numeric::{self, dot, normalize_slice, softmax_with_temperature, Matrix, Vector};

/// Learnable token matrix, one token per row.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PromptTokens {
    tokens: Matrix,
}

impl PromptTokens {
    pub fn new(tokens: Matrix) -> Self {
        Self { tokens }
    }

    pub fn zeros(n_tokens: usize, dim: usize) -> Self {
        Self {
            tokens: Matrix::zeros(n_tokens, dim),
        }
    }

    /// Entries drawn i.i.d. from uniform(-1, 1).
    pub fn uniform<R: Rng>(n_tokens: usize, dim: usize, rng: &mut R) -> Self {
        let data = (0..n_tokens * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self {
            tokens: Matrix::from_raw(n_tokens, dim, data),
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.rows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn as_slice(&self) -> &[f64] {
        self.tokens.as_slice()
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.tokens.as_mut_slice()
    }

    pub fn is_zero(&self) -> bool {
        self.as_slice().iter().all(|x| *x == 0.0)
    }

    fn check_same_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::ShapeMismatch {
                context,
                expected: self.dim(),
                found: other.dim(),
            });
        }
        if self.n_tokens() != other.n_tokens() {
            return Err(Error::ShapeMismatch {
                context,
                expected: self.n_tokens(),
                found: other.n_tokens(),
            });
        }
        Ok(())
    }

    /// Stacks the parts along the token axis, in order.
    pub fn concat(parts: &[&PromptTokens]) -> Result<PromptTokens> {
        let first = parts.first().ok_or(Error::TooFew { needed: 1, found: 0 })?;
        let dim = first.dim();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.dim() != dim {
                return Err(Error::ShapeMismatch {
                    context: "prompt concat",
                    expected: dim,
                    found: p.dim(),
                });
            }
            rows += p.n_tokens();
            data.extend_from_slice(p.as_slice());
        }
        Ok(Self {
            tokens: Matrix::from_raw(rows, dim, data),
        })
    }

    /// Entrywise mean of equally shaped prompts.
    pub fn mean(parts: &[&PromptTokens]) -> Result<PromptTokens> {
        let first = parts.first().ok_or(Error::TooFew { needed: 1, found: 0 })?;
        let mut acc = vec![0.0; first.as_slice().len()];
        for p in parts {
            first.check_same_shape(p, "prompt mean")?;
            numeric::axpy(1.0, p.as_slice(), &mut acc);
        }
        let n = parts.len() as f64;
        for x in &mut acc {
            *x /= n;
        }
        Ok(Self {
            tokens: Matrix::from_raw(first.n_tokens(), first.dim(), acc),
        })
    }

    /// `a · self + b · other`.
    pub fn lincomb(&self, a: f64, other: &PromptTokens, b: f64) -> Result<PromptTokens> {
        self.check_same_shape(other, "prompt combination")?;
        let data = self
            .as_slice()
            .iter()
            .zip(other.as_slice())
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(Self {
            tokens: Matrix::from_raw(self.n_tokens(), self.dim(), data),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum EncoderMode {
    /// Raw descriptors pass through the image projection.
    #[default]
    TokenEncoder,
    /// Pre-extracted features; the prompt acts as an additive offset.
    FeatureSpace,
}

/// One modality of the encoder pair.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tower {
    /// `d × input_dim`. Unused by the image tower in feature-space mode.
    pub projection: Matrix,
    /// `d × d_tok`.
    pub prompt_projection: Matrix,
    /// Frozen pooling query of length `d_tok`.
    pub query: Vec<f64>,
}

impl Tower {
    pub fn feature_dim(&self) -> usize {
        self.prompt_projection.rows()
    }

    pub fn token_dim(&self) -> usize {
        self.prompt_projection.cols()
    }

    fn validate(&self, name: &'static str) -> Result<()> {
        if self.projection.rows() != self.feature_dim() {
            return Err(Error::ShapeMismatch {
                context: name,
                expected: self.feature_dim(),
                found: self.projection.rows(),
            });
        }
        if self.query.len() != self.token_dim() {
            return Err(Error::ShapeMismatch {
                context: name,
                expected: self.token_dim(),
                found: self.query.len(),
            });
        }
        Ok(())
    }

    fn check_prompt(&self, prompt: &PromptTokens) -> Result<()> {
        if prompt.dim() != self.token_dim() {
            return Err(Error::ShapeMismatch {
                context: "prompt token dim",
                expected: self.token_dim(),
                found: prompt.dim(),
            });
        }
        Ok(())
    }

    /// `W_p · pool(P, q)`.
    pub fn prompt_offset(&self, prompt: &PromptTokens) -> Result<Vec<f64>> {
        self.check_prompt(prompt)?;
        Ok(self.prompt_projection.matvec(&attention_pool(prompt, &self.query)))
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EncoderParams {
    pub image: Tower,
    pub text: Tower,
    pub temp: f64,
    pub mode: EncoderMode,
}

impl EncoderParams {
    pub fn new(image: Tower, text: Tower, temp: f64, mode: EncoderMode) -> Result<Self> {
        image.validate("image tower")?;
        text.validate("text tower")?;
        if image.feature_dim() != text.feature_dim() {
            return Err(Error::ShapeMismatch {
                context: "tower feature dims",
                expected: image.feature_dim(),
                found: text.feature_dim(),
            });
        }
        if !(temp > 0.0) || !temp.is_finite() {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if mode == EncoderMode::FeatureSpace && image.token_dim() != image.feature_dim() {
            return Err(Error::ShapeMismatch {
                context: "feature-space prompt dim",
                expected: image.feature_dim(),
                found: image.token_dim(),
            });
        }
        Ok(Self {
            image,
            text,
            temp,
            mode,
        })
    }

    /// Towers whose input projections are the identity, so descriptors and
    /// class embeddings share one space.
    ///
    /// Prompt projections are `gain / sqrt(d_tok)`-scaled Gaussian matrices in
    /// token-encoder mode and `gain · I` in feature-space mode (which needs
    /// `d_tok == dim`). Pooling queries are `N(0, 1/d_tok)`, drawn once from
    /// `seed` per modality.
    pub fn aligned(
        mode: EncoderMode,
        dim: usize,
        d_tok: usize,
        prompt_gain: f64,
        temp: f64,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 || d_tok == 0 {
            return Err(Error::InvalidConfig("dimensions must be positive".into()));
        }
        let tower = |stream: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            let prompt_projection = match mode {
                EncoderMode::FeatureSpace if d_tok == dim => {
                    let mut m = Matrix::identity(dim);
                    m.as_mut_slice().iter_mut().for_each(|x| *x *= prompt_gain);
                    m
                }
                _ => {
                    let scale = prompt_gain / libm::sqrt(d_tok as f64);
                    let data =
                        (0..dim * d_tok).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
                    Matrix::from_raw(dim, d_tok, data)
                }
            };
            let qs = 1.0 / libm::sqrt(d_tok as f64);
            let query = (0..d_tok).map(|_| qs * rng.sample::<f64, _>(StandardNormal)).collect();
            Tower {
                projection: Matrix::identity(dim),
                prompt_projection,
                query,
            }
        };
        Self::new(tower(1), tower(2), temp, mode)
    }

    pub fn feature_dim(&self) -> usize {
        self.image.feature_dim()
    }
}

/// Raw model input.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum SampleInput {
    Descriptor(Vector),
    Feature(Vector),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ImageSample {
    pub id: u64,
    pub input: SampleInput,
    /// Evaluation only; adaptation never reads it.
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassCatalog {
    names: Vec<String>,
    embeddings: Matrix,
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ClassCatalog {
    /// Each class embedding is a unit Gaussian direction seeded by the FNV-1a
    /// hash of its name.
    pub fn from_names(names: Vec<String>, dim: usize) -> Result<Self> {
        let rows: Vec<Vec<f64>> = names
            .iter()
            .map(|name| {
                let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(name.as_bytes()));
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                normalize_slice(&v).map(|(u, _)| u)
            })
            .collect::<Result<_>>()?;
        Self::from_embeddings(names, Matrix::from_rows(&rows)?)
    }

    pub fn from_embeddings(names: Vec<String>, embeddings: Matrix) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::TooFew {
                needed: 2,
                found: names.len(),
            });
        }
        if embeddings.rows() != names.len() {
            return Err(Error::ShapeMismatch {
                context: "class embeddings",
                expected: names.len(),
                found: embeddings.rows(),
            });
        }
        Ok(Self { names, embeddings })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn embedding(&self, class_id: usize) -> &[f64] {
        self.embeddings.row(class_id)
    }
}

/// Softmax attention weights of the tokens against `query`.
pub fn pool_weights(prompt: &PromptTokens, query: &[f64]) -> Vec<f64> {
    let scores: Vec<f64> = prompt.tokens().row_iter().map(|t| dot(t, query)).collect();
    softmax_with_temperature(&scores, 1.0)
}

pub fn attention_pool(prompt: &PromptTokens, query: &[f64]) -> Vec<f64> {
    let w = pool_weights(prompt, query);
    let mut out = vec![0.0; prompt.dim()];
    for (t, wj) in prompt.tokens().row_iter().zip(&w) {
        numeric::axpy(*wj, t, &mut out);
    }
    out
}

/// Gradient of a scalar w.r.t. the token entries, given its gradient w.r.t.
/// the pooled vector. Returned flat, row-major, same shape as `prompt`.
pub fn attention_pool_backward(prompt: &PromptTokens, query: &[f64], grad_pooled: &[f64]) -> Vec<f64> {
    let w = pool_weights(prompt, query);
    let pooled = attention_pool(prompt, query);
    let g_dot_pooled = dot(grad_pooled, &pooled);
    let mut grad = Vec::with_capacity(prompt.as_slice().len());
    for (t, wj) in prompt.tokens().row_iter().zip(&w) {
        let ds = wj * (dot(grad_pooled, t) - g_dot_pooled);
        grad.extend(grad_pooled.iter().zip(query).map(|(g, q)| wj * g + ds * q));
    }
    grad
}

/// Prompt-independent part of the image feature.
pub fn image_base(x: &ImageSample, params: &EncoderParams) -> Result<Vec<f64>> {
    match (&x.input, params.mode) {
        (SampleInput::Descriptor(desc), EncoderMode::TokenEncoder) => {
            if desc.dim() != params.image.projection.cols() {
                return Err(Error::ShapeMismatch {
                    context: "image descriptor",
                    expected: params.image.projection.cols(),
                    found: desc.dim(),
                });
            }
            Ok(params.image.projection.matvec(desc))
        }
        (SampleInput::Feature(raw), EncoderMode::FeatureSpace) => {
            if raw.dim() != params.feature_dim() {
                return Err(Error::ShapeMismatch {
                    context: "raw feature",
                    expected: params.feature_dim(),
                    found: raw.dim(),
                });
            }
            Ok(raw.to_vec())
        }
        _ => Err(Error::ModeMismatch { id: x.id }),
    }
}

/// Prompt-independent part of the text feature.
pub fn text_base(class_id: usize, params: &EncoderParams, catalog: &ClassCatalog) -> Result<Vec<f64>> {
    if class_id >= catalog.len() {
        return Err(Error::ClassOutOfRange {
            class_id,
            num_classes: catalog.len(),
        });
    }
    let emb = catalog.embedding(class_id);
    if emb.len() != params.text.projection.cols() {
        return Err(Error::ShapeMismatch {
            context: "class embedding",
            expected: params.text.projection.cols(),
            found: emb.len(),
        });
    }
    Ok(params.text.projection.matvec(emb))
}

fn offset_and_normalize(mut base: Vec<f64>, offset: &[f64]) -> Result<Vector> {
    numeric::axpy(1.0, offset, &mut base);
    normalize_slice(&base).map(|(u, _)| Vector::from_raw(u))
}

pub fn encode_image(x: &ImageSample, prompt: &PromptTokens, params: &EncoderParams) -> Result<Vector> {
    let base = image_base(x, params)?;
    offset_and_normalize(base, &params.image.prompt_offset(prompt)?)
}

pub fn encode_text(
    class_id: usize,
    prompt: &PromptTokens,
    params: &EncoderParams,
    catalog: &ClassCatalog,
) -> Result<Vector> {
    let base = text_base(class_id, params, catalog)?;
    offset_and_normalize(base, &params.text.prompt_offset(prompt)?)
}

/// Text features of every class under one prompt, one row per class.
pub fn text_features(prompt: &PromptTokens, params: &EncoderParams, catalog: &ClassCatalog) -> Result<Matrix> {
    let offset = params.text.prompt_offset(prompt)?;
    let rows = (0..catalog.len())
        .map(|n| offset_and_normalize(text_base(n, params, catalog)?, &offset).map(Vector::into_inner))
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

/// Softmax over classes of `cos(a, f_n) / temp`. `text_feats` rows must be unit norm.
pub fn class_probabilities(a: &[f64], text_feats: &Matrix, temp: f64) -> Result<Vec<f64>> {
    let (unit, _) = normalize_slice(a)?;
    Ok(softmax_with_temperature(&text_feats.matvec(&unit), temp))
}

/// The `k` most probable classes, most probable first, ties to the lower id.
pub fn topk_classes(probs: &[f64], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..probs.len()).collect();
    ids.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

/// Index of the largest entry, ties to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
