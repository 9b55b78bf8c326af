//! Per-clique attribute prompt learning.
//!
//! For a clique `C` with visual prompt `V` and text prompt `T`:
//!
//! ```text
//! f_j = E_I(x_j, V)            a = mean_j f_j
//! g_n = E_T(c_n, T)            p = softmax_n(cos(a, g_n) / temp)
//! loss = H(p) + lambda * sum_j |f_j - a|^2
//! ```
//!
//! Gradients are exact and flow through `a` in the concentration term. Since
//! the residuals `f_j - a` sum to zero, that term's full derivative w.r.t.
//! `f_j` reduces to `2 (f_j - a)`.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clique::{CliqueSet, SupportiveClique};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::model::{attention_pool_backward, fnv1a64, image_base, text_base, ClassCatalog, EncoderParams, ImageSample, PromptTokens};
use crate::numeric::{self, dot, log_softmax_with_temperature, normalize_slice, Matrix, Vector};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttributePromptPair {
    pub class_id: usize,
    pub clique_index: usize,
    pub visual: PromptTokens,
    pub text: PromptTokens,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBreakdown {
    pub entropy: f64,
    pub concentration: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn new(entropy: f64, concentration: f64, lambda: f64) -> Self {
        Self {
            entropy,
            concentration,
            total: entropy + lambda * concentration,
            lambda,
        }
    }
}

/// Adam with bias correction, beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// One in-place update of `params`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        for len in [params.len(), grads.len()] {
            if len != self.m.len() {
                return Err(Error::ShapeMismatch {
                    context: "adam parameters",
                    expected: self.m.len(),
                    found: len,
                });
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(self.beta1, t);
        let c2 = 1.0 - libm::pow(self.beta2, t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (libm::sqrt(v_hat) + self.eps);
        }
        Ok(())
    }
}

/// Row mean, not renormalized.
pub fn attribute_feature(clique_feats: &Matrix) -> Vector {
    let mut a = vec![0.0; clique_feats.cols()];
    for r in clique_feats.row_iter() {
        numeric::axpy(1.0, r, &mut a);
    }
    let n = clique_feats.rows() as f64;
    a.iter_mut().for_each(|x| *x /= n);
    Vector::from_raw(a)
}

/// Shannon entropy in nats, with `0 · ln 0 = 0`.
pub fn entropy_loss(probs: &[f64]) -> f64 {
    let h: f64 = probs.iter().filter(|p| **p > 0.0).map(|p| -p * libm::log(*p)).sum();
    h.max(0.0)
}

pub fn concentration_loss(clique_feats: &Matrix, a: &[f64]) -> f64 {
    clique_feats.row_iter().map(|f| numeric::sq_dist(f, a)).sum()
}

/// Loss and gradients for one clique, with prompt-independent encoder parts
/// computed once.
pub struct CliqueObjective<'a> {
    params: &'a EncoderParams,
    image_bases: Vec<Vec<f64>>,
    text_bases: Vec<Vec<f64>>,
    lambda: f64,
}

pub struct Evaluation {
    pub loss: LossBreakdown,
    pub probs: Vec<f64>,
    /// Mean of the prompted member features.
    pub attribute: Vec<f64>,
    pub grad_visual: Option<PromptTokens>,
    pub grad_text: Option<PromptTokens>,
}

impl<'a> CliqueObjective<'a> {
    pub fn new(
        members: &[&ImageSample],
        params: &'a EncoderParams,
        catalog: &ClassCatalog,
        lambda: f64,
    ) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::TooFew {
                needed: 2,
                found: members.len(),
            });
        }
        let image_bases = members.iter().map(|x| image_base(x, params)).collect::<Result<_>>()?;
        let text_bases = (0..catalog.len())
            .map(|n| text_base(n, params, catalog))
            .collect::<Result<_>>()?;
        Ok(Self {
            params,
            image_bases,
            text_bases,
            lambda,
        })
    }

    pub fn evaluate(&self, visual: &PromptTokens, text: &PromptTokens, with_grads: bool) -> Result<Evaluation> {
        let img = &self.params.image;
        let txt = &self.params.text;
        let temp = self.params.temp;
        let size = self.image_bases.len() as f64;

        let offset_v = img.prompt_offset(visual)?;
        let mut feats = Vec::with_capacity(self.image_bases.len());
        let mut feat_norms = Vec::with_capacity(self.image_bases.len());
        for b in &self.image_bases {
            let mut z = b.clone();
            numeric::axpy(1.0, &offset_v, &mut z);
            let (f, n) = normalize_slice(&z)?;
            feats.push(f);
            feat_norms.push(n);
        }
        let mut attribute = vec![0.0; offset_v.len()];
        for f in &feats {
            numeric::axpy(1.0 / size, f, &mut attribute);
        }
        let (attr_unit, attr_norm) = normalize_slice(&attribute)?;

        let offset_t = txt.prompt_offset(text)?;
        let mut text_feats = Vec::with_capacity(self.text_bases.len());
        let mut text_norms = Vec::with_capacity(self.text_bases.len());
        for b in &self.text_bases {
            let mut z = b.clone();
            numeric::axpy(1.0, &offset_t, &mut z);
            let (g, n) = normalize_slice(&z)?;
            text_feats.push(g);
            text_norms.push(n);
        }

        let scores: Vec<f64> = text_feats.iter().map(|g| dot(&attr_unit, g)).collect();
        let log_probs = log_softmax_with_temperature(&scores, temp);
        let probs: Vec<f64> = log_probs.iter().map(|l| libm::exp(*l)).collect();
        let entropy = -probs.iter().zip(&log_probs).map(|(p, l)| p * l).sum::<f64>();
        let entropy = entropy.max(0.0);
        let concentration: f64 = feats.iter().map(|f| numeric::sq_dist(f, &attribute)).sum();
        let loss = LossBreakdown::new(entropy, concentration, self.lambda);

        if !with_grads {
            return Ok(Evaluation {
                loss,
                probs,
                attribute,
                grad_visual: None,
                grad_text: None,
            });
        }

        // dH/dscore_n
        let grad_scores: Vec<f64> = probs
            .iter()
            .zip(&log_probs)
            .map(|(p, l)| -p * (l + entropy) / temp)
            .collect();

        let mut grad_attr_unit = vec![0.0; attr_unit.len()];
        for (g, gs) in text_feats.iter().zip(&grad_scores) {
            numeric::axpy(*gs, g, &mut grad_attr_unit);
        }
        let grad_attr = normalize_backward(&attr_unit, attr_norm, &grad_attr_unit);

        let mut grad_offset_v = vec![0.0; offset_v.len()];
        for ((f, n), _) in feats.iter().zip(&feat_norms).zip(&self.image_bases) {
            let mut grad_f: Vec<f64> = grad_attr.iter().map(|g| g / size).collect();
            let residual: Vec<f64> = f.iter().zip(&attribute).map(|(x, y)| x - y).collect();
            numeric::axpy(2.0 * self.lambda, &residual, &mut grad_f);
            let grad_z = normalize_backward(f, *n, &grad_f);
            numeric::axpy(1.0, &grad_z, &mut grad_offset_v);
        }
        let grad_pool_v = img.prompt_projection.matvec_t(&grad_offset_v);
        let grad_visual = attention_pool_backward(visual, &img.query, &grad_pool_v);

        let mut grad_offset_t = vec![0.0; offset_t.len()];
        for ((g, n), gs) in text_feats.iter().zip(&text_norms).zip(&grad_scores) {
            let grad_g: Vec<f64> = attr_unit.iter().map(|x| gs * x).collect();
            let grad_z = normalize_backward(g, *n, &grad_g);
            numeric::axpy(1.0, &grad_z, &mut grad_offset_t);
        }
        let grad_pool_t = txt.prompt_projection.matvec_t(&grad_offset_t);
        let grad_text = attention_pool_backward(text, &txt.query, &grad_pool_t);

        Ok(Evaluation {
            loss,
            probs,
            attribute,
            grad_visual: Some(PromptTokens::new(Matrix::from_raw(visual.n_tokens(), visual.dim(), grad_visual))),
            grad_text: Some(PromptTokens::new(Matrix::from_raw(text.n_tokens(), text.dim(), grad_text))),
        })
    }
}

/// Backprop through `u = z / |z|` given `u`, `|z|` and `dL/du`.
fn normalize_backward(unit: &[f64], norm: f64, grad_unit: &[f64]) -> Vec<f64> {
    let proj = dot(unit, grad_unit);
    unit.iter().zip(grad_unit).map(|(u, g)| (g - u * proj) / norm).collect()
}

pub fn clique_loss_and_grads(
    members: &[&ImageSample],
    prompts: &AttributePromptPair,
    params: &EncoderParams,
    catalog: &ClassCatalog,
    lambda: f64,
) -> Result<(LossBreakdown, PromptTokens, PromptTokens)> {
    let eval = CliqueObjective::new(members, params, catalog, lambda)?.evaluate(&prompts.visual, &prompts.text, true)?;
    Ok((eval.loss, eval.grad_visual.unwrap(), eval.grad_text.unwrap()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnConfig {
    pub lambda: f64,
    pub lr: f64,
    pub steps: usize,
    pub visual_tokens: usize,
    pub text_tokens: usize,
    pub learn_visual: bool,
    pub learn_text: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnedClique {
    pub clique: SupportiveClique,
    pub prompts: AttributePromptPair,
    pub initial_loss: LossBreakdown,
    pub final_loss: LossBreakdown,
    /// Attribute feature under the learned visual prompt.
    pub attribute: Vector,
    /// Entropy of every attribute distribution computed during learning.
    pub entropies: Vec<f64>,
}

/// Seed for one clique's prompt initialization, independent of batch order
/// and scheduling.
pub fn clique_seed(seed: u64, clique: &SupportiveClique) -> u64 {
    let mut bytes = Vec::with_capacity(16 + 8 * clique.member_ids.len());
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(&(clique.class_id as u64).to_le_bytes());
    for id in &clique.member_ids {
        bytes.extend_from_slice(&id.to_le_bytes());
    }
    fnv1a64(&bytes)
}

/// Optimizes one prompt pair against one clique.
pub fn learn_clique(
    clique: &SupportiveClique,
    clique_index: usize,
    samples: &BTreeMap<u64, &ImageSample>,
    params: &EncoderParams,
    catalog: &ClassCatalog,
    config: &LearnConfig,
) -> Result<LearnedClique> {
    let members = clique
        .member_ids
        .iter()
        .map(|id| {
            samples.get(id).copied().ok_or(Error::InvalidConfig(alloc::format!(
                "clique member {id} not in batch"
            )))
        })
        .collect::<Result<Vec<_>>>()?;
    let objective = CliqueObjective::new(&members, params, catalog, config.lambda)?;

    let d_img = params.image.token_dim();
    let d_txt = params.text.token_dim();
    let mut visual = if config.learn_visual {
        let mut rng = ChaCha8Rng::seed_from_u64(clique_seed(config.seed, clique));
        PromptTokens::uniform(config.visual_tokens, d_img, &mut rng)
    } else {
        PromptTokens::zeros(config.visual_tokens, d_img)
    };
    let mut text = PromptTokens::zeros(config.text_tokens, d_txt);
    let mut adam_v = AdamState::new(visual.as_slice().len(), config.lr);
    let mut adam_t = AdamState::new(text.as_slice().len(), config.lr);

    let mut entropies = Vec::with_capacity(config.steps + 1);
    let mut initial_loss = None;
    let trains = config.learn_visual || config.learn_text;
    for _ in 0..if trains { config.steps } else { 0 } {
        let eval = objective.evaluate(&visual, &text, true)?;
        entropies.push(eval.loss.entropy);
        initial_loss.get_or_insert(eval.loss);
        if config.learn_visual {
            adam_v.step(visual.as_mut_slice(), eval.grad_visual.as_ref().unwrap().as_slice())?;
        }
        if config.learn_text {
            adam_t.step(text.as_mut_slice(), eval.grad_text.as_ref().unwrap().as_slice())?;
        }
    }
    let last = objective.evaluate(&visual, &text, false)?;
    entropies.push(last.loss.entropy);
    Ok(LearnedClique {
        clique: clique.clone(),
        prompts: AttributePromptPair {
            class_id: clique.class_id,
            clique_index,
            visual,
            text,
        },
        initial_loss: initial_loss.unwrap_or(last.loss),
        final_loss: last.loss,
        attribute: Vector::from_raw(last.attribute),
        entropies,
    })
}

/// Learns prompts for every clique of every class. Output is ordered by
/// class id, then clique index.
pub fn learn_batch_prompts<E: Executor>(
    clique_sets: &BTreeMap<usize, CliqueSet>,
    samples: &BTreeMap<u64, &ImageSample>,
    params: &EncoderParams,
    catalog: &ClassCatalog,
    config: &LearnConfig,
    exec: &E,
) -> Result<Vec<LearnedClique>> {
    let tasks: Vec<(usize, &SupportiveClique)> = clique_sets
        .values()
        .flat_map(|cs| cs.cliques.iter().enumerate())
        .collect();
    exec.map(&tasks, |(k, clique)| learn_clique(clique, *k, samples, params, catalog, config))
        .into_iter()
        .collect()
}
