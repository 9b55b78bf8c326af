//! Composed-prompt inference.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{argmax, class_probabilities, encode_image, text_features, ClassCatalog, EncoderParams, ImageSample, PromptTokens};
use crate::numeric::Matrix;
use crate::retention::TextRetentionState;

/// How several visual prompts are combined into one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum CombineMode {
    /// Stack along the token axis.
    #[default]
    Concat,
    /// Entrywise mean; constituents must share a token count.
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComposedPrompts {
    pub image: PromptTokens,
    pub text: PromptTokens,
    pub class_id: usize,
    pub sample_id: u64,
}

/// Clique prompts in the given order, then the retained prompt last.
pub fn compose_image_prompt(
    clique_prompts: &[&PromptTokens],
    matched: Option<&PromptTokens>,
    mode: CombineMode,
) -> Result<PromptTokens> {
    let parts: Vec<&PromptTokens> = clique_prompts.iter().copied().chain(matched).collect();
    if parts.is_empty() {
        return Err(Error::NoPromptSource);
    }
    match mode {
        CombineMode::Concat => PromptTokens::concat(&parts),
        CombineMode::Mean => PromptTokens::mean(&parts),
    }
}

/// `alpha_r · retained + (1 - alpha_r) · mean(clique prompts)`, or the retained
/// prompt alone when the class has no cliques.
pub fn compose_text_prompt(
    clique_text_prompts: &[&PromptTokens],
    retained: &TextRetentionState,
    alpha_r: f64,
) -> Result<PromptTokens> {
    if clique_text_prompts.is_empty() {
        return Ok(retained.prompt.clone());
    }
    let mean = PromptTokens::mean(clique_text_prompts)?;
    retained.prompt.lincomb(alpha_r, &mean, 1.0 - alpha_r)
}

pub fn predict_in_context(
    x: &ImageSample,
    composed: &ComposedPrompts,
    params: &EncoderParams,
    catalog: &ClassCatalog,
) -> Result<Vec<f64>> {
    let text = text_features(&composed.text, params, catalog)?;
    predict_with_text_features(x, &composed.image, &text, params)
}

/// [`predict_in_context`] with the class text features already computed.
pub fn predict_with_text_features(
    x: &ImageSample,
    image_prompt: &PromptTokens,
    text_feats: &Matrix,
    params: &EncoderParams,
) -> Result<Vec<f64>> {
    let f = encode_image(x, image_prompt, params)?;
    class_probabilities(&f, text_feats, params.temp)
}

/// Entrywise mean of the context distributions and its argmax.
pub fn aggregate_contexts(per_context: &[Vec<f64>]) -> Result<(usize, Vec<f64>)> {
    let first = per_context.first().ok_or(Error::EmptyContexts)?;
    if per_context.len() == 1 {
        return Ok((argmax(first), first.clone()));
    }
    let mut mean = vec![0.0; first.len()];
    for p in per_context {
        if p.len() != mean.len() {
            return Err(Error::ShapeMismatch {
                context: "context distribution",
                expected: mean.len(),
                found: p.len(),
            });
        }
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    let n = per_context.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok((argmax(&mean), mean))
}
