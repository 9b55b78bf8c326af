//! Per-batch orchestration and the stream loop.
//!
//! One batch runs: zero-prompt encoding and top-k, class subsets, clique
//! extraction, prompt learning, retention updates (a serialized barrier in
//! ascending class / clique order), composed-prompt inference. Labels are
//! only read by [`score_batch`], after predictions exist.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::clique::{build_class_subsets, extract_cliques, max_clique_size, ClassSubset, CliqueSet};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::inference::{aggregate_contexts, compose_image_prompt, compose_text_prompt, predict_with_text_features, CombineMode};
use crate::learner::{entropy_loss, learn_batch_prompts, LearnConfig, LearnedClique};
use crate::model::{class_probabilities, encode_image, text_features, ClassCatalog, EncoderMode, EncoderParams, ImageSample, PromptTokens};
use crate::numeric::{Matrix, Vector};
use crate::retention::{GraphParams, RetentionCache, RetentionEntry, TextRetentionState};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct RunConfig {
    pub batch_size: usize,
    /// Top-k used to form class subsets.
    pub topk: usize,
    /// Clique similarity threshold (strict).
    pub threshold: f64,
    pub lambda: f64,
    pub lr: f64,
    /// Adam iterations per batch.
    pub steps: usize,
    pub alpha_r: f64,
    pub sigma: f64,
    /// Retention cache capacity per class.
    pub cache_size: usize,
    /// Neighbours kept per row of the retention graph.
    pub neighbors: usize,
    pub temp: f64,
    /// Propagation self-retention complement.
    pub beta: f64,
    pub seed: u64,
    pub mode: EncoderMode,
    pub combine_mode: CombineMode,
    pub image_prompting: bool,
    pub text_prompting: bool,
    pub retention: bool,
    /// Tokens per attribute prompt.
    pub prompt_tokens: usize,
    /// Token width; forced to the feature dim in feature-space mode.
    pub token_dim: usize,
    /// Scale of the prompt projection.
    pub prompt_gain: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            topk: 3,
            threshold: 0.8,
            lambda: 1.0,
            lr: 0.003,
            steps: 100,
            alpha_r: 1.0,
            sigma: 0.3,
            cache_size: 6,
            neighbors: 3,
            temp: 0.07,
            beta: 0.5,
            seed: 0,
            mode: EncoderMode::TokenEncoder,
            combine_mode: CombineMode::Concat,
            image_prompting: true,
            text_prompting: true,
            retention: true,
            prompt_tokens: 4,
            token_dim: 32,
            prompt_gain: 0.03,
        }
    }
}

impl RunConfig {
    /// Every component switched off: plain zero-shot prediction.
    pub fn zero_shot(self) -> Self {
        Self {
            image_prompting: false,
            text_prompting: false,
            retention: false,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.topk == 0 {
            return fail("topk must be at least 1");
        }
        if !self.threshold.is_finite() {
            return fail("threshold must be finite");
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return fail("lambda must be non-negative");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return fail("lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.alpha_r) {
            return fail("alpha_r must lie in [0, 1]");
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return fail("sigma must be positive");
        }
        if self.cache_size == 0 || self.neighbors == 0 {
            return fail("cache_size and neighbors must be at least 1");
        }
        if !(self.temp > 0.0) || !self.temp.is_finite() {
            return fail("temp must be positive");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return fail("beta must lie in [0, 1]");
        }
        if self.prompt_tokens == 0 || self.token_dim == 0 {
            return fail("prompt_tokens and token_dim must be at least 1");
        }
        if !(self.prompt_gain >= 0.0) || !self.prompt_gain.is_finite() {
            return fail("prompt_gain must be non-negative");
        }
        Ok(())
    }

    pub fn graph(&self) -> GraphParams {
        GraphParams {
            sigma: self.sigma,
            neighbors: self.neighbors,
            beta: self.beta,
        }
    }
}

/// Identifies clique `clique_index` of class `class_id` within one batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CliqueRef {
    pub class_id: usize,
    pub clique_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SamplePrediction {
    pub sample_id: u64,
    pub batch_index: usize,
    pub predicted: usize,
    pub confidence: f64,
    pub probs: Vec<f64>,
    /// Classes whose subset produced an inference context for this sample.
    pub contexts: Vec<usize>,
    pub cliques: Vec<CliqueRef>,
}

/// Label-free per-batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BatchStats {
    pub size: usize,
    pub clique_count: usize,
    /// Largest clique over all classes of the batch.
    pub max_clique_size: usize,
    pub mean_entropy: f64,
    pub mean_concentration: f64,
    pub mean_total: f64,
    /// Extremes of the entropy of every distribution computed in the batch.
    pub entropy_min: f64,
    pub entropy_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub batch_index: usize,
    pub predictions: Vec<SamplePrediction>,
    pub stats: BatchStats,
    pub subsets: BTreeMap<usize, ClassSubset>,
    pub cliques: BTreeMap<usize, CliqueSet>,
    pub learned: Vec<LearnedClique>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BatchMetrics {
    pub batch_index: usize,
    pub stats: BatchStats,
    pub correct: usize,
    pub labeled: usize,
}

impl BatchMetrics {
    pub fn acc1(&self) -> Option<f64> {
        (self.labeled > 0).then(|| self.correct as f64 / self.labeled as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RunMetrics {
    pub batches: Vec<BatchMetrics>,
    pub samples: usize,
    pub correct: usize,
    pub labeled: usize,
}

impl RunMetrics {
    pub fn push(&mut self, m: BatchMetrics) {
        self.samples += m.stats.size;
        self.correct += m.correct;
        self.labeled += m.labeled;
        self.batches.push(m);
    }

    pub fn acc1(&self) -> Option<f64> {
        (self.labeled > 0).then(|| self.correct as f64 / self.labeled as f64)
    }

    pub fn avg_max_clique_size(&self) -> f64 {
        if self.batches.is_empty() {
            return 0.0;
        }
        self.batches.iter().map(|b| b.stats.max_clique_size as f64).sum::<f64>() / self.batches.len() as f64
    }

    pub fn clique_count(&self) -> usize {
        self.batches.iter().map(|b| b.stats.clique_count).sum()
    }

    pub fn entropy_range(&self) -> (f64, f64) {
        self.batches.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), b| {
            (lo.min(b.stats.entropy_min), hi.max(b.stats.entropy_max))
        })
    }
}

/// Compares predictions to labels. Unlabeled samples are skipped.
pub fn score_batch(outcome: &BatchOutcome, batch: &[ImageSample]) -> BatchMetrics {
    let labels: BTreeMap<u64, Option<usize>> = batch.iter().map(|s| (s.id, s.label)).collect();
    let mut correct = 0;
    let mut labeled = 0;
    for p in &outcome.predictions {
        if let Some(Some(label)) = labels.get(&p.sample_id) {
            labeled += 1;
            correct += usize::from(*label == p.predicted);
        }
    }
    BatchMetrics {
        batch_index: outcome.batch_index,
        stats: outcome.stats,
        correct,
        labeled,
    }
}

/// Everything retained across batches.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RetentionState {
    pub caches: BTreeMap<usize, RetentionCache>,
    pub text: TextRetentionState,
    pub batches_seen: usize,
}

pub struct Engine {
    config: RunConfig,
    params: EncoderParams,
    catalog: ClassCatalog,
    state: RetentionState,
}

impl Engine {
    pub fn new(config: RunConfig, params: EncoderParams, catalog: ClassCatalog) -> Result<Self> {
        config.validate()?;
        if catalog.embeddings().cols() != params.text.projection.cols() {
            return Err(Error::ShapeMismatch {
                context: "catalog embedding dim",
                expected: params.text.projection.cols(),
                found: catalog.embeddings().cols(),
            });
        }
        let text = TextRetentionState::new(config.prompt_tokens, params.text.token_dim());
        Ok(Self {
            config,
            params,
            catalog,
            state: RetentionState {
                caches: BTreeMap::new(),
                text,
                batches_seen: 0,
            },
        })
    }

    /// Engine with identity-aligned towers built from the config seed.
    pub fn with_aligned_encoders(config: RunConfig, catalog: ClassCatalog) -> Result<Self> {
        config.validate()?;
        let dim = catalog.embeddings().cols();
        let d_tok = match config.mode {
            EncoderMode::FeatureSpace => dim,
            EncoderMode::TokenEncoder => config.token_dim,
        };
        let params = EncoderParams::aligned(config.mode, dim, d_tok, config.prompt_gain, config.temp, config.seed)?;
        Self::new(config, params, catalog)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn catalog(&self) -> &ClassCatalog {
        &self.catalog
    }

    pub fn state(&self) -> &RetentionState {
        &self.state
    }

    /// Replaces the retained state, e.g. one loaded from disk. Shapes and
    /// capacities must agree with this engine's config.
    pub fn restore_state(&mut self, state: RetentionState) -> Result<()> {
        let tokens = |p: &PromptTokens, context| {
            let (n, d) = (self.config.prompt_tokens, self.params.text.token_dim());
            if p.n_tokens() != n || p.dim() != d || p.as_slice().len() != n * d {
                return Err(Error::ShapeMismatch {
                    context,
                    expected: n * d,
                    found: p.as_slice().len(),
                });
            }
            if !p.as_slice().iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(context));
            }
            Ok(())
        };
        tokens(&state.text.prompt, "retained text prompt")?;
        for (&class_id, cache) in &state.caches {
            if class_id >= self.catalog.len() || cache.class_id != class_id {
                return Err(Error::ClassOutOfRange {
                    class_id: cache.class_id.max(class_id),
                    num_classes: self.catalog.len(),
                });
            }
            if cache.capacity() != self.config.cache_size || cache.len() > cache.capacity() {
                return Err(Error::ShapeMismatch {
                    context: "retention cache capacity",
                    expected: self.config.cache_size,
                    found: cache.capacity().max(cache.len()),
                });
            }
            for e in cache.entries() {
                if e.key.dim() != self.params.feature_dim() {
                    return Err(Error::ShapeMismatch {
                        context: "retention key",
                        expected: self.params.feature_dim(),
                        found: e.key.dim(),
                    });
                }
                if !e.key.iter().all(|x| x.is_finite()) {
                    return Err(Error::NonFinite("retention key"));
                }
                tokens(&e.value, "retention value")?;
            }
        }
        self.state = state;
        Ok(())
    }

    fn learn_config(&self) -> LearnConfig {
        LearnConfig {
            lambda: self.config.lambda,
            lr: self.config.lr,
            steps: self.config.steps,
            visual_tokens: self.config.prompt_tokens,
            text_tokens: self.config.prompt_tokens,
            learn_visual: self.config.image_prompting,
            learn_text: self.config.text_prompting,
            seed: self.config.seed,
        }
    }

    pub fn run_batch<E: Executor>(&mut self, batch: &[ImageSample], exec: &E) -> Result<BatchOutcome> {
        if batch.is_empty() {
            return Err(Error::TooFew { needed: 1, found: 0 });
        }
        let cfg = &self.config;
        let params = &self.params;
        let catalog = &self.catalog;
        let batch_index = self.state.batches_seen;
        let k = cfg.topk.min(catalog.len());

        // zero-prompt features and initial predictions
        let zero_visual = PromptTokens::zeros(1, params.image.token_dim());
        let zero_text_feats = text_features(&PromptTokens::zeros(1, params.text.token_dim()), params, catalog)?;
        let zero_shot: Vec<(Vector, Vec<f64>)> = exec
            .map(batch, |x| {
                let f = encode_image(x, &zero_visual, params)?;
                let p = class_probabilities(&f, &zero_text_feats, params.temp)?;
                Ok((f, p))
            })
            .into_iter()
            .collect::<Result<_>>()?;
        let ids: Vec<u64> = batch.iter().map(|x| x.id).collect();
        let (feats, probs): (Vec<Vector>, Vec<Vec<f64>>) = zero_shot.into_iter().unzip();

        let subsets = build_class_subsets(&ids, &feats, &probs, k)?;
        let subset_list: Vec<&ClassSubset> = subsets.values().collect();
        let cliques: BTreeMap<usize, CliqueSet> = exec
            .map(&subset_list, |s| extract_cliques(s, cfg.threshold))
            .into_iter()
            .map(|cs| (cs.class_id, cs))
            .collect();

        let adaptive = cfg.image_prompting || cfg.text_prompting;
        let lookup: BTreeMap<u64, &ImageSample> = batch.iter().map(|x| (x.id, x)).collect();
        let learned = if adaptive {
            learn_batch_prompts(&cliques, &lookup, params, catalog, &self.learn_config(), exec)?
        } else {
            Vec::new()
        };

        // retention barrier, canonical order
        let graph = cfg.graph();
        if !cfg.retention {
            self.state.text = TextRetentionState::new(cfg.prompt_tokens, params.text.token_dim());
        }
        for lc in &learned {
            if cfg.text_prompting {
                self.state.text.update(&lc.prompts.text)?;
            }
            if cfg.retention && cfg.image_prompting {
                let class_id = lc.clique.class_id;
                let cache = match self.state.caches.entry(class_id) {
                    alloc::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
                    alloc::collections::btree_map::Entry::Vacant(e) => e.insert(RetentionCache::new(class_id, cfg.cache_size)?),
                };
                cache.insert(
                    RetentionEntry {
                        key: lc.attribute.clone(),
                        value: lc.prompts.visual.clone(),
                    },
                    &graph,
                )?;
            }
        }

        let mut by_class: BTreeMap<usize, Vec<&LearnedClique>> = BTreeMap::new();
        for lc in &learned {
            by_class.entry(lc.clique.class_id).or_default().push(lc);
        }

        // class-level text features under the composed text prompt
        let class_ids: Vec<usize> = subsets.keys().copied().collect();
        let text_state = &self.state.text;
        let class_text: BTreeMap<usize, Matrix> = if adaptive {
            exec.map(&class_ids, |c| {
                let prompts: Vec<&PromptTokens> = by_class
                    .get(c)
                    .map(|v| v.iter().map(|lc| &lc.prompts.text).collect())
                    .unwrap_or_default();
                let composed = compose_text_prompt(&prompts, text_state, cfg.alpha_r)?;
                Ok((*c, text_features(&composed, params, catalog)?))
            })
            .into_iter()
            .collect::<Result<_>>()?
        } else {
            BTreeMap::new()
        };

        let caches = &self.state.caches;
        let use_cache = cfg.retention && cfg.image_prompting;
        let positions: Vec<usize> = (0..batch.len()).collect();
        let predictions: Vec<(SamplePrediction, Vec<f64>)> = exec
            .map(&positions, |&j| {
                let x = &batch[j];
                let mut contexts = Vec::new();
                let mut context_probs = Vec::new();
                let mut memberships = Vec::new();
                if adaptive {
                    for (&class_id, subset) in &subsets {
                        if subset.member_ids.binary_search(&x.id).is_err() {
                            continue;
                        }
                        let mine: Vec<&LearnedClique> = by_class
                            .get(&class_id)
                            .map(|v| {
                                v.iter()
                                    .copied()
                                    .filter(|lc| lc.clique.member_ids.binary_search(&x.id).is_ok())
                                    .collect()
                            })
                            .unwrap_or_default();
                        let matched = if use_cache {
                            caches.get(&class_id).and_then(|c| c.best_match(&feats[j])).map(|(_, e)| &e.value)
                        } else {
                            None
                        };
                        if mine.is_empty() && matched.is_none() {
                            continue;
                        }
                        let image_prompt = if cfg.image_prompting {
                            let parts: Vec<&PromptTokens> = mine.iter().map(|lc| &lc.prompts.visual).collect();
                            compose_image_prompt(&parts, matched, cfg.combine_mode)?
                        } else {
                            zero_visual.clone()
                        };
                        let p = predict_with_text_features(x, &image_prompt, &class_text[&class_id], params)?;
                        contexts.push(class_id);
                        context_probs.push(p);
                        memberships.extend(mine.iter().map(|lc| CliqueRef {
                            class_id,
                            clique_index: lc.prompts.clique_index,
                        }));
                    }
                }
                let mut entropies: Vec<f64> = context_probs.iter().map(|p| entropy_loss(p)).collect();
                let (predicted, final_probs) = if context_probs.is_empty() {
                    let p = probs[j].clone();
                    (crate::model::argmax(&p), p)
                } else {
                    aggregate_contexts(&context_probs)?
                };
                entropies.push(entropy_loss(&final_probs));
                Ok((
                    SamplePrediction {
                        sample_id: x.id,
                        batch_index,
                        predicted,
                        confidence: final_probs[predicted],
                        probs: final_probs,
                        contexts,
                        cliques: memberships,
                    },
                    entropies,
                ))
            })
            .into_iter()
            .collect::<Result<_>>()?;

        let mut stats = BatchStats {
            size: batch.len(),
            clique_count: cliques.values().map(CliqueSet::len).sum(),
            max_clique_size: cliques.values().map(max_clique_size).max().unwrap_or(0),
            entropy_min: f64::INFINITY,
            entropy_max: f64::NEG_INFINITY,
            ..BatchStats::default()
        };
        let mut observe = |h: f64| {
            stats.entropy_min = stats.entropy_min.min(h);
            stats.entropy_max = stats.entropy_max.max(h);
        };
        for p in &probs {
            observe(entropy_loss(p));
        }
        for lc in &learned {
            lc.entropies.iter().copied().for_each(&mut observe);
        }
        for (_, hs) in &predictions {
            hs.iter().copied().for_each(&mut observe);
        }
        if !learned.is_empty() {
            let n = learned.len() as f64;
            stats.mean_entropy = learned.iter().map(|l| l.final_loss.entropy).sum::<f64>() / n;
            stats.mean_concentration = learned.iter().map(|l| l.final_loss.concentration).sum::<f64>() / n;
            stats.mean_total = learned.iter().map(|l| l.final_loss.total).sum::<f64>() / n;
        }

        self.state.batches_seen += 1;
        Ok(BatchOutcome {
            batch_index,
            predictions: predictions.into_iter().map(|(p, _)| p).collect(),
            stats,
            subsets,
            cliques,
            learned,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StreamReport {
    pub metrics: RunMetrics,
    pub predictions: Vec<SamplePrediction>,
}

/// Folds [`Engine::run_batch`] over consecutive `batch_size` chunks; the last
/// chunk may be short.
pub fn run_stream<E: Executor>(engine: &mut Engine, samples: &[ImageSample], exec: &E) -> Result<StreamReport> {
    if samples.is_empty() {
        return Err(Error::TooFew { needed: 1, found: 0 });
    }
    let batch_size = engine.config().batch_size;
    let mut report = StreamReport::default();
    for batch in samples.chunks(batch_size) {
        let outcome = engine.run_batch(batch, exec)?;
        report.metrics.push(score_batch(&outcome, batch));
        report.predictions.extend(outcome.predictions);
    }
    Ok(report)
}

/// Splits a stream into batches the way [`run_stream`] does.
pub fn batches(samples: &[ImageSample], batch_size: usize) -> Vec<&[ImageSample]> {
    samples.chunks(batch_size.max(1)).collect()
}
