//! Streaming passes over observation pairs.
//!
//! For residuals `r` the pairwise residual difference is `r_i - r_j`. Because
//! `L_h'` is odd and `X_i - X_j` is antisymmetric, every pair-sum used by the
//! estimator collapses onto per-observation weights:
//!
//! ```text
//! Σ_{i<j} L'(r_i - r_j) (X_i - X_j) = Σ_i a_i X_i,   a_i = Σ_{j≠i} L'(r_i - r_j)
//! ```
//!
//! so a pass costs `O(n²)` kernel evaluations plus one `O(np)` product, with
//! `O(n)` extra memory.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::kernels::LossConfig;

/// The unordered pairs a U-statistic averages over.
#[derive(Debug, Clone, PartialEq)]
pub enum PairSet {
    /// Every `i < j`.
    All,
    /// A fixed subsample of unordered pairs (incomplete U-statistic).
    Sampled(Vec<(u32, u32)>),
}

impl PairSet {
    /// Exact pairs unless `n(n-1)/2` exceeds `max_pairs`, in which case a
    /// seeded uniform subsample of `max_pairs` pairs is drawn.
    pub fn for_size(n: usize, max_pairs: Option<usize>, seed: u64) -> PairSet {
        let total = n * (n - 1) / 2;
        match max_pairs {
            Some(cap) if cap > 0 && total > cap => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut picks = rand::seq::index::sample(&mut rng, total, cap).into_vec();
                picks.sort_unstable();
                PairSet::Sampled(picks.into_iter().map(|k| decode_pair(n, k)).collect())
            }
            _ => PairSet::All,
        }
    }

    pub fn count(&self, n: usize) -> usize {
        match self {
            PairSet::All => n * (n - 1) / 2,
            PairSet::Sampled(v) => v.len(),
        }
    }

    fn for_each(&self, n: usize, mut f: impl FnMut(usize, usize)) {
        match self {
            PairSet::All => {
                for i in 0..n {
                    for j in (i + 1)..n {
                        f(i, j);
                    }
                }
            }
            PairSet::Sampled(v) => {
                for &(i, j) in v {
                    f(i as usize, j as usize);
                }
            }
        }
    }
}

/// Maps a linear index over `{(i, j): i < j}` in row-major order to the pair.
fn decode_pair(n: usize, mut k: usize) -> (u32, u32) {
    let mut i = 0;
    loop {
        let row = n - 1 - i;
        if k < row {
            return (i as u32, (i + 1 + k) as u32);
        }
        k -= row;
        i += 1;
    }
}

/// Result of one pass: the mean pair loss and the antisymmetric weights `a_i`.
#[derive(Debug, Clone)]
pub struct PairPass {
    pub mean_loss: f64,
    pub weights: Array1<f64>,
    pub pairs: usize,
}

/// Mean of `L_h(r_i - r_j)` over the pair set.
pub fn mean_loss(cfg: &LossConfig, r: ArrayView1<'_, f64>, pairs: &PairSet) -> f64 {
    let n = r.len();
    let r = r.to_vec();
    let mut total = 0.0;
    pairs.for_each(n, |i, j| total += cfg.loss(r[i] - r[j]));
    total / pairs.count(n) as f64
}

/// Loss mean and first-derivative weights in a single pass.
pub fn loss_pass(cfg: &LossConfig, r: ArrayView1<'_, f64>, pairs: &PairSet, with_loss: bool) -> PairPass {
    let n = r.len();
    let r = r.to_vec();
    let mut weights = vec![0.0; n];
    let mut total = 0.0;
    pairs.for_each(n, |i, j| {
        let d = r[i] - r[j];
        if with_loss {
            total += cfg.loss(d);
        }
        let g = cfg.loss_prime(d);
        weights[i] += g;
        weights[j] -= g;
    });
    let count = pairs.count(n);
    PairPass { mean_loss: total / count as f64, weights: Array1::from(weights), pairs: count }
}

/// Pair-averaged score `{n(n-1)}⁻¹ Σ_{i≠j} L'(r_i - r_j)(X_i - X_j)`.
pub fn score(cfg: &LossConfig, x: ArrayView2<'_, f64>, r: ArrayView1<'_, f64>) -> Array1<f64> {
    let pass = loss_pass(cfg, r, &PairSet::All, false);
    x.t().dot(&pass.weights) / pass.pairs as f64
}

/// Matrix of `L_h'(r_i - r_j)` for all ordered pairs (zero diagonal).
pub fn derivative_matrix(cfg: &LossConfig, r: ArrayView1<'_, f64>) -> Array2<f64> {
    let n = r.len();
    let mut a = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let g = cfg.loss_prime(r[i] - r[j]);
            a[[i, j]] = g;
            a[[j, i]] = -g;
        }
    }
    a
}
