//! Cross-batch retention.
//!
//! Text knowledge is kept in one running-mean prompt. Visual knowledge is a
//! bounded per-class cache of `(attribute feature, visual prompt)` pairs.
//! On overflow the keys form a Gaussian-weighted K-nearest graph, one
//! smoothing step pulls neighbouring keys together, and the closest pair of
//! propagated keys is fused.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::PromptTokens;
use crate::numeric::{self, dot, sq_dist, Matrix, Vector};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TextRetentionState {
    pub prompt: PromptTokens,
    /// Prompts absorbed so far.
    pub count: u64,
}

impl TextRetentionState {
    pub fn new(n_tokens: usize, dim: usize) -> Self {
        Self {
            prompt: PromptTokens::zeros(n_tokens, dim),
            count: 0,
        }
    }

    /// `P <- a P + (1 - a) new` with `a = count / (count + 1)`, i.e. the
    /// running mean of everything absorbed.
    pub fn update(&mut self, new_prompt: &PromptTokens) -> Result<()> {
        let tau = self.count as f64;
        let alpha = tau / (1.0 + tau);
        self.prompt = self.prompt.lincomb(alpha, new_prompt, 1.0 - alpha)?;
        self.count += 1;
        Ok(())
    }
}

pub fn update_text_retention(state: &TextRetentionState, new_prompt: &PromptTokens) -> Result<TextRetentionState> {
    let mut next = state.clone();
    next.update(new_prompt)?;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RetentionEntry {
    pub key: Vector,
    pub value: PromptTokens,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphParams {
    pub sigma: f64,
    pub neighbors: usize,
    /// Weight of the neighbourhood mean in one propagation step.
    pub beta: f64,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            sigma: 0.3,
            neighbors: 3,
            beta: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RetentionCache {
    pub class_id: usize,
    entries: Vec<RetentionEntry>,
    capacity: usize,
}

impl RetentionCache {
    pub fn new(class_id: usize, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("retention capacity must be positive".into()));
        }
        Ok(Self {
            class_id,
            entries: Vec::new(),
            capacity,
        })
    }

    pub fn entries(&self) -> &[RetentionEntry] {
        &self.entries
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends, then compacts back to capacity on overflow.
    pub fn insert(&mut self, entry: RetentionEntry, graph: &GraphParams) -> Result<()> {
        if let Some(first) = self.entries.first() {
            if first.key.dim() != entry.key.dim() {
                return Err(Error::ShapeMismatch {
                    context: "retention key",
                    expected: first.key.dim(),
                    found: entry.key.dim(),
                });
            }
            if first.value.n_tokens() != entry.value.n_tokens() || first.value.dim() != entry.value.dim() {
                return Err(Error::ShapeMismatch {
                    context: "retention value",
                    expected: first.value.as_slice().len(),
                    found: entry.value.as_slice().len(),
                });
            }
        }
        self.entries.push(entry);
        if self.entries.len() <= self.capacity {
            return Ok(());
        }
        let keys: Vec<Vector> = self.entries.iter().map(|e| e.key.clone()).collect();
        let w = gaussian_adjacency(&keys, graph.sigma);
        let sparse = knn_sparsify(&w, graph.neighbors);
        let propagated = propagate(&keys, &sparse, graph.beta);
        self.entries = fuse_closest(&propagated, &self.entries)?;
        Ok(())
    }

    /// Entry with the largest inner product against `f`, ties to the lowest index.
    pub fn best_match(&self, f: &[f64]) -> Option<(usize, &RetentionEntry)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let s = dot(f, &e.key);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best.map(|(i, _)| (i, &self.entries[i]))
    }
}

pub fn insert_attribute_pair(cache: &RetentionCache, entry: RetentionEntry, graph: &GraphParams) -> Result<RetentionCache> {
    let mut next = cache.clone();
    next.insert(entry, graph)?;
    Ok(next)
}

pub fn match_retention<'c>(cache: &'c RetentionCache, f: &[f64]) -> Option<&'c RetentionEntry> {
    cache.best_match(f).map(|(_, e)| e)
}

/// `W[k][l] = exp(-|a_k - a_l|^2 / (2 sigma^2))`.
pub fn gaussian_adjacency(keys: &[Vector], sigma: f64) -> Matrix {
    let n = keys.len();
    let denom = 2.0 * sigma * sigma;
    let mut w = Matrix::zeros(n, n);
    for k in 0..n {
        w.set(k, k, 1.0);
        for l in k + 1..n {
            let v = libm::exp(-sq_dist(&keys[k], &keys[l]) / denom);
            w.set(k, l, v);
            w.set(l, k, v);
        }
    }
    w
}

/// Keeps each row's `k` largest off-diagonal weights (ties to the lower
/// column), symmetrizes by elementwise max and zeroes the diagonal.
pub fn knn_sparsify(w: &Matrix, k: usize) -> Matrix {
    let n = w.rows();
    let mut kept = Matrix::zeros(n, n);
    for r in 0..n {
        let mut cols: Vec<usize> = (0..n).filter(|&c| c != r).collect();
        cols.sort_by(|&a, &b| w.get(r, b).total_cmp(&w.get(r, a)).then(a.cmp(&b)));
        for &c in cols.iter().take(k) {
            kept.set(r, c, w.get(r, c));
        }
    }
    let mut out = Matrix::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            if r != c {
                out.set(r, c, kept.get(r, c).max(kept.get(c, r)));
            }
        }
    }
    out
}

/// One smoothing step: `a'_k = (1 - beta) a_k + beta * weighted mean of neighbours`.
/// Isolated vertices are unchanged.
pub fn propagate(keys: &[Vector], w: &Matrix, beta: f64) -> Vec<Vector> {
    (0..keys.len())
        .map(|k| {
            let degree: f64 = w.row(k).iter().sum();
            if !(degree > 0.0) {
                return keys[k].clone();
            }
            let mut out: Vec<f64> = keys[k].iter().map(|x| (1.0 - beta) * x).collect();
            for (l, wl) in w.row(k).iter().enumerate() {
                if *wl != 0.0 {
                    numeric::axpy(beta * wl / degree, &keys[l], &mut out);
                }
            }
            Vector::from_raw(out)
        })
        .collect()
}

/// Index pair `(j0, j1)`, `j0 < j1`, of the closest keys; ties to the
/// lexicographically smallest pair.
pub fn closest_pair(keys: &[Vector]) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for i in 0..keys.len() {
        for j in i + 1..keys.len() {
            let d = sq_dist(&keys[i], &keys[j]);
            if best.is_none_or(|(_, _, b)| d < b) {
                best = Some((i, j, d));
            }
        }
    }
    best.map(|(i, j, _)| (i, j))
}

/// Replaces the closest pair by its midpoint key and mean original prompt.
/// Every other entry takes its propagated key. The fused entry sits at the
/// position of `j0`.
pub fn fuse_closest(propagated: &[Vector], entries: &[RetentionEntry]) -> Result<Vec<RetentionEntry>> {
    if entries.len() < 2 {
        return Err(Error::TooFew {
            needed: 2,
            found: entries.len(),
        });
    }
    if propagated.len() != entries.len() {
        return Err(Error::ShapeMismatch {
            context: "propagated keys",
            expected: entries.len(),
            found: propagated.len(),
        });
    }
    let (j0, j1) = closest_pair(propagated).expect("at least two keys");
    let key: Vec<f64> = propagated[j0]
        .iter()
        .zip(propagated[j1].iter())
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    let value = entries[j0].value.lincomb(0.5, &entries[j1].value, 0.5)?;
    let mut out = Vec::with_capacity(entries.len() - 1);
    for (i, e) in entries.iter().enumerate() {
        if i == j0 {
            out.push(RetentionEntry {
                key: Vector::from_raw(key.clone()),
                value: value.clone(),
            });
        } else if i != j1 {
            out.push(RetentionEntry {
                key: propagated[i].clone(),
                value: e.value.clone(),
            });
        }
    }
    Ok(out)
}

/// Convenience for tests and snapshots: the cache's keys as rows.
pub fn key_matrix(cache: &RetentionCache) -> Option<Matrix> {
    let rows: Vec<&[f64]> = cache.entries.iter().map(|e| &*e.key).collect();
    Matrix::from_rows(&rows).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Vector {
        Vector::new(x.to_vec()).unwrap()
    }

    fn tok(x: &[f64]) -> PromptTokens {
        PromptTokens::new(Matrix::new(1, x.len(), x.to_vec()).unwrap())
    }

    #[test]
    fn text_retention_first_update_copies() {
        let s = TextRetentionState::new(1, 2);
        let s = update_text_retention(&s, &tok(&[0.3, -0.7])).unwrap();
        assert_eq!(s.prompt.as_slice(), &[0.3, -0.7]);
        assert_eq!(s.count, 1);
        let s = update_text_retention(&s, &tok(&[0.5, 0.1])).unwrap();
        assert!((s.prompt.as_slice()[0] - 0.4).abs() < 1e-15);
        assert!((s.prompt.as_slice()[1] + 0.3).abs() < 1e-15);
    }

    #[test]
    fn text_retention_rejects_wrong_shape() {
        let mut s = TextRetentionState::new(2, 2);
        assert!(s.update(&tok(&[1.0, 2.0])).is_err());
        assert_eq!(s.count, 0);
    }

    #[test]
    fn gaussian_examples() {
        let w = gaussian_adjacency(&[v(&[0.2, 0.1]), v(&[0.2, 0.1]), v(&[0.2, 0.1])], 0.3);
        assert!(w.as_slice().iter().all(|x| *x == 1.0));
        let sigma = 0.3;
        let d = sigma * libm::sqrt(2.0);
        let w = gaussian_adjacency(&[v(&[0.0, 0.0]), v(&[d, 0.0])], sigma);
        assert!((w.get(0, 1) - 0.367879).abs() < 1e-6);
        let keys = [v(&[0.1, 0.5, -0.2]), v(&[0.4, -0.1, 0.3]), v(&[-0.6, 0.2, 0.0]), v(&[0.0, 0.0, 0.9])];
        let w = gaussian_adjacency(&keys, 0.4);
        for i in 0..4 {
            for j in 0..4 {
                let mut d2 = 0.0;
                for c in 0..3 {
                    d2 += (keys[i][c] - keys[j][c]) * (keys[i][c] - keys[j][c]);
                }
                assert!((w.get(i, j) - libm::exp(-d2 / (2.0 * 0.16))).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn knn_small_cases() {
        let w = Matrix::from_rows(&[[1.0, 0.4], [0.4, 1.0]]).unwrap();
        let s = knn_sparsify(&w, 3);
        assert_eq!(s.as_slice(), &[0.0, 0.4, 0.4, 0.0]);
        let w = Matrix::from_rows(&[[1.0, 0.3, 0.2], [0.3, 1.0, 0.6], [0.2, 0.6, 1.0]]).unwrap();
        let s = knn_sparsify(&w, 2);
        assert_eq!(s.as_slice(), &[0.0, 0.3, 0.2, 0.3, 0.0, 0.6, 0.2, 0.6, 0.0]);
    }

    #[test]
    fn knn_hand_worked_k1() {
        let w = Matrix::from_rows(&[
            [1.0, 0.9, 0.1, 0.5],
            [0.9, 1.0, 0.3, 0.2],
            [0.1, 0.3, 1.0, 0.3],
            [0.5, 0.2, 0.3, 1.0],
        ])
        .unwrap();
        // row picks: 0->1, 1->0, 2->1 (tie 0.3 with col 3, lower col wins), 3->0
        let s = knn_sparsify(&w, 1);
        let expect = [
            [0.0, 0.9, 0.0, 0.5],
            [0.9, 0.0, 0.3, 0.0],
            [0.0, 0.3, 0.0, 0.0],
            [0.5, 0.0, 0.0, 0.0],
        ];
        for r in 0..4 {
            assert_eq!(s.row(r), &expect[r]);
        }
    }

    #[test]
    fn propagate_examples() {
        let keys = [v(&[0.5, 0.5]), v(&[0.5, 0.5]), v(&[0.5, 0.5])];
        let w = knn_sparsify(&gaussian_adjacency(&keys, 0.3), 2);
        assert_eq!(propagate(&keys, &w, 0.5), keys.to_vec());
        let keys = [v(&[1.0, 0.0]), v(&[0.0, 1.0]), v(&[0.3, 0.3])];
        let w = knn_sparsify(&gaussian_adjacency(&keys, 0.3), 1);
        assert_eq!(propagate(&keys, &w, 0.0), keys.to_vec());
        let keys = [v(&[1.0, 0.0]), v(&[0.0, 3.0])];
        let w = Matrix::from_rows(&[[0.0, 0.2], [0.2, 0.0]]).unwrap();
        let p = propagate(&keys, &w, 0.5);
        assert_eq!(&*p[0], &[0.5, 1.5]);
        assert_eq!(&*p[1], &[0.5, 1.5]);
        let isolated = Matrix::zeros(2, 2);
        assert_eq!(propagate(&keys, &isolated, 0.5), keys.to_vec());
    }

    fn entry(key: &[f64], val: &[f64]) -> RetentionEntry {
        RetentionEntry { key: v(key), value: tok(val) }
    }

    #[test]
    fn fuse_examples() {
        let entries = [entry(&[0.0, 1.0], &[2.0]), entry(&[1.0, 0.0], &[4.0])];
        let keys: Vec<Vector> = entries.iter().map(|e| e.key.clone()).collect();
        let out = fuse_closest(&keys, &entries).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(&*out[0].key, &[0.5, 0.5]);
        assert_eq!(out[0].value.as_slice(), &[3.0]);

        let entries = [entry(&[0.0, 1.0], &[1.0]), entry(&[0.7, 0.7], &[5.0]), entry(&[0.0, 1.0], &[3.0])];
        let keys: Vec<Vector> = entries.iter().map(|e| e.key.clone()).collect();
        let out = fuse_closest(&keys, &entries).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(&*out[0].key, &[0.0, 1.0]);
        assert_eq!(out[0].value.as_slice(), &[2.0]);
        assert_eq!(out[1].value.as_slice(), &[5.0]);

        assert_eq!(fuse_closest(&keys[..1], &entries[..1]), Err(Error::TooFew { needed: 2, found: 1 }));
    }

    #[test]
    fn fuse_uses_propagated_keys_and_original_prompts() {
        let entries = [entry(&[0.0, 0.0], &[1.0]), entry(&[5.0, 0.0], &[3.0]), entry(&[0.0, 9.0], &[7.0])];
        let propagated = [v(&[1.0, 1.0]), v(&[1.1, 1.0]), v(&[4.0, 4.0])];
        let out = fuse_closest(&propagated, &entries).unwrap();
        assert_eq!(&*out[0].key, &[1.05, 1.0]);
        assert_eq!(out[0].value.as_slice(), &[2.0]);
        assert_eq!(&*out[1].key, &[4.0, 4.0]);
        assert_eq!(out[1].value.as_slice(), &[7.0]);
    }

    #[test]
    fn cache_growth_and_bound() {
        let g = GraphParams::default();
        let mut c = RetentionCache::new(0, 6).unwrap();
        c.insert(entry(&[1.0, 0.0], &[0.0]), &g).unwrap();
        assert_eq!(c.len(), 1);
        for i in 0..10 {
            let a = i as f64 * 0.4;
            c.insert(entry(&[libm::cos(a), libm::sin(a)], &[i as f64]), &g).unwrap();
            assert!(c.len() <= 6);
        }
        assert_eq!(c.len(), 6);
        let mut wrong = entry(&[1.0, 0.0, 0.0], &[0.0]);
        assert!(c.insert(wrong.clone(), &g).is_err());
        wrong = entry(&[1.0, 0.0], &[0.0, 1.0]);
        assert!(c.insert(wrong, &g).is_err());
        assert_eq!(c.len(), 6);
    }

    #[test]
    fn matching() {
        let mut c = RetentionCache::new(0, 4).unwrap();
        assert_eq!(match_retention(&c, &[1.0, 0.0]), None);
        let g = GraphParams::default();
        c.insert(entry(&[0.6, 0.8], &[1.0]), &g).unwrap();
        assert_eq!(match_retention(&c, &[-1.0, 0.0]).unwrap().value.as_slice(), &[1.0]);
        c.insert(entry(&[1.0, 0.0], &[2.0]), &g).unwrap();
        c.insert(entry(&[0.0, 1.0], &[3.0]), &g).unwrap();
        assert_eq!(match_retention(&c, &[1.0, 0.0]).unwrap().value.as_slice(), &[2.0]);
        assert_eq!(match_retention(&c, &[0.0, 1.0]).unwrap().value.as_slice(), &[3.0]);
        // tie between two identical keys goes to the first
        c.insert(entry(&[1.0, 0.0], &[4.0]), &g).unwrap();
        assert_eq!(c.best_match(&[1.0, 0.0]).unwrap().0, 1);
    }
}
