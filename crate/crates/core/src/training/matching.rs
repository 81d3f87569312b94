//! Slice matching by embedding similarity.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{context_batch, SliceSource, TrainError};
use crate::data::{shuffle_with_permutation, SliceDataset};
use crate::losses::cosine_similarity;
use crate::nets::{Encoder, Network};
use crate::rng::{derive_seed, hash_str};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    /// Row-wise argmax; several LF slices may pick the same HF slice.
    Greedy,
    /// One-to-one assignment maximising total similarity.
    Hungarian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchAssignment {
    /// `(lf_index, hf_index)`, one per LF row in order.
    pub pairs: Vec<(usize, usize)>,
    /// Row-major `[N_lf, N_hf]` cosine similarities.
    pub scores: Vec<f64>,
    pub cols: usize,
}

impl MatchAssignment {
    pub fn hf_indices(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(_, j)| j).collect()
    }
}

/// Matches rows of `[N, d]` LF embeddings to rows of `[M, d]` HF embeddings.
pub fn match_embeddings(emb_lf: &Tensor<f32>, emb_hf: &Tensor<f32>, rule: MatchRule) -> Result<MatchAssignment, TrainError> {
    let (n, d) = emb_lf.dims2("match lf")?;
    let (m, dh) = emb_hf.dims2("match hf")?;
    if d != dh {
        return Err(TrainError::Config(format!("embedding widths differ: {d} vs {dh}")));
    }
    let lf = emb_lf.to_f64_vec();
    let hf = emb_hf.to_f64_vec();
    let mut scores = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            scores.push(cosine_similarity(&lf[i * d..(i + 1) * d], &hf[j * d..(j + 1) * d])?);
        }
    }
    let cols = match rule {
        MatchRule::Greedy => (0..n)
            .map(|i| {
                let row = &scores[i * m..(i + 1) * m];
                // strict comparison keeps the lowest index on ties
                (0..m).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect(),
        MatchRule::Hungarian => {
            if n != m {
                return Err(TrainError::Config(format!("one-to-one matching needs equal batch sizes, got {n} and {m}")));
            }
            hungarian_max(&scores, n)
        }
    };
    Ok(MatchAssignment {
        pairs: cols.into_iter().enumerate().collect(),
        scores,
        cols: m,
    })
}

/// Maximum-weight perfect matching of a square matrix (shortest augmenting
/// paths with potentials). Returns the column assigned to each row.
fn hungarian_max(w: &[f64], n: usize) -> Vec<usize> {
    let cost = |i: usize, j: usize| -w[i * n + j];
    // 1-based arrays; index 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut cols = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            cols[p[j] - 1] = j - 1;
        }
    }
    cols
}

/// Embeddings of `indices` (with the encoder's slice context).
pub fn embed<S: SliceSource + ?Sized>(
    encoder: &Network<Encoder>,
    context: usize,
    src: &S,
    indices: &[usize],
) -> Result<Tensor<f32>, TrainError> {
    Ok(encoder.infer(&context_batch(src, indices, context)?)?)
}

/// Embeds both batches and matches every LF slice to an HF slice.
pub fn match_slices(
    encoder: &Network<Encoder>,
    lf_batch: &Tensor<f32>,
    hf_batch: &Tensor<f32>,
    rule: MatchRule,
) -> Result<MatchAssignment, TrainError> {
    let n = lf_batch.shape().first().copied().unwrap_or(0);
    let m = hf_batch.shape().first().copied().unwrap_or(0);
    if n != m {
        return Err(TrainError::Config(format!("batch sizes differ: {n} LF vs {m} HF")));
    }
    match_embeddings(&encoder.infer(lf_batch)?, &encoder.infer(hf_batch)?, rule)
}

/// Mean matching accuracy over `batches` shuffled batches of `n` corresponding
/// (LF, HF) slices. Correspondence is by `(volume_id, slice_index)`.
#[allow(clippy::too_many_arguments)]
pub fn matching_accuracy(
    encoder: &Network<Encoder>,
    context: usize,
    lf: &SliceDataset,
    hf: &SliceDataset,
    batches: usize,
    n: usize,
    seed: u64,
    rule: MatchRule,
) -> Result<f64, TrainError> {
    let hf_at: HashMap<(&str, usize), usize> = hf
        .slices
        .iter()
        .enumerate()
        .map(|(k, s)| ((s.volume_id.as_str(), s.slice_index), k))
        .collect();
    let pairs: Vec<(usize, usize)> = lf
        .slices
        .iter()
        .enumerate()
        .filter_map(|(k, s)| hf_at.get(&(s.volume_id.as_str(), s.slice_index)).map(|&j| (k, j)))
        .collect();
    let mut correct = 0usize;
    for b in 0..batches {
        let picked = super::sample_batch(pairs.len(), n, seed, "match-eval", b as u64)?;
        let lf_idx: Vec<usize> = picked.iter().map(|&k| pairs[k].0).collect();
        let hf_idx: Vec<usize> = picked.iter().map(|&k| pairs[k].1).collect();
        let (shuffled, perm) = shuffle_with_permutation(&hf_idx, derive_seed(seed, &[hash_str("match-shuffle"), b as u64]))?;
        let e_lf = embed(encoder, context, lf, &lf_idx)?;
        let e_hf = embed(encoder, context, hf, &shuffled)?;
        let m = match_embeddings(&e_lf, &e_hf, rule)?;
        // LF row i's partner sits at the position k with perm[k] == i
        correct += m.pairs.iter().filter(|&&(i, j)| perm[j] == i).count();
    }
    Ok(correct as f64 / (batches * n) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identical_embeddings_self_match() {
        let e = t(&[3, 2], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let m = match_embeddings(&e, &e, MatchRule::Greedy).unwrap();
        // rows 0 and 1 are equal; ties resolve to the lowest column
        assert_eq!(m.pairs, vec![(0, 0), (1, 0), (2, 2)]);
        let distinct = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let m = match_embeddings(&distinct, &distinct, MatchRule::Greedy).unwrap();
        assert_eq!(m.hf_indices(), vec![0, 1, 2]);
    }

    #[test]
    fn one_hot_permutation_is_recovered() {
        let n = 6;
        let pi = [3usize, 0, 5, 1, 4, 2];
        let mut lf = vec![0.0f32; n * n];
        let mut hf = vec![0.0f32; n * n];
        for i in 0..n {
            lf[i * n + i] = 1.0;
            // hf row k holds the embedding of lf row pi[k]
            hf[i * n + pi[i]] = 1.0;
        }
        for rule in [MatchRule::Greedy, MatchRule::Hungarian] {
            let m = match_embeddings(&t(&[n, n], &lf), &t(&[n, n], &hf), rule).unwrap();
            for (i, j) in m.pairs {
                assert_eq!(pi[j], i);
            }
        }
    }

    #[test]
    fn hungarian_resolves_conflicts_greedy_cannot() {
        // both rows prefer column 0; the optimum gives row 1 column 0
        let w = [0.9, 0.8, 1.0, 0.1];
        assert_eq!(hungarian_max(&w, 2), vec![1, 0]);
        let brute = |w: &[f64], n: usize| {
            let mut best = (f64::NEG_INFINITY, vec![]);
            let mut perm: Vec<usize> = (0..n).collect();
            permute(&mut perm, 0, &mut |p| {
                let s: f64 = p.iter().enumerate().map(|(i, &j)| w[i * n + j]).sum();
                if s > best.0 {
                    best = (s, p.to_vec());
                }
            });
            best.0
        };
        for seed in 0..20u64 {
            let n = 5;
            let w: Vec<f64> = (0..n * n)
                .map(|k| ((k as u64 * 7919 + seed * 104729) % 1000) as f64 / 1000.0)
                .collect();
            let cols = hungarian_max(&w, n);
            let got: f64 = cols.iter().enumerate().map(|(i, &j)| w[i * n + j]).sum();
            assert!((got - brute(&w, n)).abs() < 1e-12);
        }
    }

    fn permute(p: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == p.len() {
            f(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permute(p, k + 1, f);
            p.swap(k, i);
        }
    }

    #[test]
    fn mismatched_batches_are_rejected() {
        let enc = crate::nets::build_encoder(&Default::default(), "encoder").unwrap();
        let a = Tensor::zeros(&[2, 1, 16, 16]);
        let b = Tensor::zeros(&[3, 1, 16, 16]);
        assert!(match_slices(&enc, &a, &b, MatchRule::Greedy).is_err());
    }
}
