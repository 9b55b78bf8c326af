//! Supportive clique mining.
//!
//! A clique here is a thresholded row of a class subset's cosine similarity
//! matrix, not a graph-theoretic clique.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::topk_classes;
use crate::numeric::{gram_matrix, Matrix, Vector};

/// Batch samples whose top-k predictions include `class_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSubset {
    pub class_id: usize,
    /// Ascending.
    pub member_ids: Vec<u64>,
    /// Row `j` is the zero-prompt feature of `member_ids[j]`.
    pub features: Matrix,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SupportiveClique {
    pub class_id: usize,
    /// Ascending, at least two.
    pub member_ids: Vec<u64>,
    /// Row of the similarity matrix that produced this set.
    pub source_row: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CliqueSet {
    pub class_id: usize,
    /// Ordered by ascending `source_row`.
    pub cliques: Vec<SupportiveClique>,
}

impl CliqueSet {
    pub fn len(&self) -> usize {
        self.cliques.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cliques.is_empty()
    }
}

/// Groups samples by each class in their top-`k`. `probs` and `features` are
/// aligned with `ids`; classes nobody predicts are absent from the map.
pub fn build_class_subsets(
    ids: &[u64],
    features: &[Vector],
    probs: &[Vec<f64>],
    k: usize,
) -> Result<BTreeMap<usize, ClassSubset>> {
    if features.len() != ids.len() || probs.len() != ids.len() {
        return Err(Error::ShapeMismatch {
            context: "class subset inputs",
            expected: ids.len(),
            found: features.len().min(probs.len()),
        });
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&j| ids[j]);
    for w in order.windows(2) {
        if ids[w[0]] == ids[w[1]] {
            return Err(Error::DuplicateSample(ids[w[0]]));
        }
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &j in &order {
        for class in topk_classes(&probs[j], k) {
            members.entry(class).or_default().push(j);
        }
    }
    members
        .into_iter()
        .map(|(class_id, rows)| {
            let feats: Vec<&[f64]> = rows.iter().map(|&j| &*features[j]).collect();
            Ok((
                class_id,
                ClassSubset {
                    class_id,
                    member_ids: rows.iter().map(|&j| ids[j]).collect(),
                    features: Matrix::from_rows(&feats)?,
                },
            ))
        })
        .collect()
}

/// Row-threshold cliques: row `l` yields every member `j` with `M[l][j] > t`.
/// Singletons are dropped and duplicate sets keep their first row.
pub fn extract_cliques(subset: &ClassSubset, threshold: f64) -> CliqueSet {
    let sim = gram_matrix(&subset.features);
    let n = sim.rows();
    let mut cliques: Vec<SupportiveClique> = Vec::new();
    for l in 0..n {
        let members: Vec<u64> = (0..n)
            .filter(|&j| sim.get(l, j) > threshold)
            .map(|j| subset.member_ids[j])
            .collect();
        if members.len() <= 1 || cliques.iter().any(|c| c.member_ids == members) {
            continue;
        }
        cliques.push(SupportiveClique {
            class_id: subset.class_id,
            member_ids: members,
            source_row: l,
        });
    }
    CliqueSet {
        class_id: subset.class_id,
        cliques,
    }
}

pub fn max_clique_size(cs: &CliqueSet) -> usize {
    cs.cliques.iter().map(|c| c.member_ids.len()).max().unwrap_or(0)
}
