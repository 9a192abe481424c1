//! Empirical Hessian, sparse inverse-Hessian estimate and the one-step
//! debiased estimator.

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::LossConfig;
use crate::linalg;
use crate::lp::{self, SimplexOptions};
use crate::pairs;
use crate::solver::FitResult;

/// Multiplier in the data-driven default `γ` (see [`default_gamma`]).
pub const DEFAULT_GAMMA_SCALE: f64 = 0.2;

/// Number of times a row's `γ` may be doubled before giving up.
pub const MAX_GAMMA_DOUBLINGS: u32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianEstimate {
    pub j_hat: Array2<f64>,
}

impl HessianEstimate {
    pub fn p(&self) -> usize {
        self.j_hat.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.j_hat.diag().sum()
    }
}

/// `Ĵ = {n(n−1)}⁻¹ Σ_{i≠j} L″(ε̂_i − ε̂_j)(X_i − X_j)(X_i − X_j)ᵀ`.
///
/// Accumulates `Σ_j w_ij (X_i − X_j)` per observation in one pass over
/// pairs, so memory stays `O(np)`. The upper triangle is mirrored and the
/// diagonal is summed directly, which keeps it nonnegative.
pub fn hessian(data: &Dataset, cfg: &LossConfig, residuals: ArrayView1<'_, f64>) -> Result<HessianEstimate> {
    data.check_residuals(residuals.len())?;
    let (n, p) = (data.n(), data.p());
    let x = data.x();
    let r = residuals.to_vec();
    let mut lx = Array2::<f64>::zeros((n, p));
    let mut diag = vec![0.0; p];
    let mut diff = vec![0.0; p];
    for i in 0..n {
        for j in (i + 1)..n {
            let w = cfg.loss_second(r[i] - r[j]);
            if w == 0.0 {
                continue;
            }
            for c in 0..p {
                let d = x[[i, c]] - x[[j, c]];
                diff[c] = d;
                diag[c] += w * d * d;
            }
            for c in 0..p {
                lx[[i, c]] += w * diff[c];
                lx[[j, c]] -= w * diff[c];
            }
        }
    }
    let scale = 2.0 / (n * (n - 1)) as f64;
    let m = x.t().dot(&lx);
    let mut j_hat = Array2::<f64>::zeros((p, p));
    for a in 0..p {
        j_hat[[a, a]] = scale * diag[a];
        for b in (a + 1)..p {
            let v = scale * m[[a, b]];
            j_hat[[a, b]] = v;
            j_hat[[b, a]] = v;
        }
    }
    Ok(HessianEstimate { j_hat })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClimeOptions {
    /// Overrides the data-driven default when set.
    pub gamma: Option<f64>,
    /// Constant `c` in the default `c·√(ln p / n)·tr(Ĵ)/p`.
    pub gamma_scale: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Up to this dimension the estimate is compared with a dense inverse
    /// and the gap is reported.
    pub dense_fastpath_p_max: usize,
}

impl Default for ClimeOptions {
    fn default() -> Self {
        ClimeOptions { gamma: None, gamma_scale: DEFAULT_GAMMA_SCALE, tol: 1e-9, max_iter: 20_000, dense_fastpath_p_max: 50 }
    }
}

impl ClimeOptions {
    fn simplex(&self) -> SimplexOptions {
        SimplexOptions { tol: self.tol, max_iter: self.max_iter }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionEstimate {
    pub w_hat: Array2<f64>,
    pub w_star: Array2<f64>,
    /// Largest `γ` actually used across rows.
    pub gamma_n: f64,
    /// `γ` requested before any inflation.
    pub gamma_requested: f64,
    /// Per-row `γ` after inflation.
    pub row_gamma: Vec<f64>,
    /// Rows whose `γ` had to be inflated (0-based).
    pub inflated_rows: Vec<usize>,
    /// Achieved `‖Ŵ Ĵ − I‖_max`.
    pub max_violation: f64,
    pub pivots: usize,
    /// `‖Ŵ* − Ĵ⁻¹‖_max` when `p` is small enough and `Ĵ` is invertible.
    pub inverse_gap: Option<f64>,
}

impl PrecisionEstimate {
    pub fn p(&self) -> usize {
        self.w_hat.nrows()
    }

    /// A synthetic estimate with `Ŵ = Ŵ* = w`, used to drive the bootstrap
    /// directly.
    pub fn from_matrix(w: Array2<f64>) -> Self {
        let p = w.nrows();
        PrecisionEstimate {
            w_star: symmetrize(&w),
            w_hat: w,
            gamma_n: 0.0,
            gamma_requested: 0.0,
            row_gamma: vec![0.0; p],
            inflated_rows: Vec::new(),
            max_violation: 0.0,
            pivots: 0,
            inverse_gap: None,
        }
    }
}

/// `scale · √(log p / n) · trace(Ĵ) / p`, with `log p` floored at `log 2`.
pub fn default_gamma(j: &HessianEstimate, n: usize, scale: f64) -> f64 {
    let p = j.p();
    let logp = (p.max(2) as f64).ln();
    scale * (logp / n as f64).sqrt() * j.trace() / p as f64
}

/// Entrywise selection: keep whichever of `ω_ij`, `ω_ji` is smaller in
/// magnitude, preferring `ω_ij` on ties.
pub fn symmetrize(w: &Array2<f64>) -> Array2<f64> {
    let p = w.nrows();
    Array2::from_shape_fn((p, p), |(i, j)| if w[[i, j]].abs() <= w[[j, i]].abs() { w[[i, j]] } else { w[[j, i]] })
}

/// Row-wise `min ‖w‖₁ s.t. ‖Ĵ w − e_k‖_∞ ≤ γ`, with per-row `γ` doubling
/// when a row is infeasible.
pub fn clime_rows(j: &HessianEstimate, gamma: f64, opts: &ClimeOptions) -> Result<PrecisionEstimate> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    let p = j.p();
    let jv = j.j_hat.view();
    let simplex = opts.simplex();
    let rows: Vec<Result<(lp::RowSolution, f64)>> = (0..p)
        .into_par_iter()
        .map(|k| {
            let mut g = gamma;
            for _ in 0..=MAX_GAMMA_DOUBLINGS {
                if let Some(sol) = lp::solve_row(jv, k, g, &simplex)? {
                    return Ok((sol, g));
                }
                g *= 2.0;
            }
            Err(Error::Infeasible { row: k + 1, gamma: g / 2.0 })
        })
        .collect();

    let mut w_hat = Array2::<f64>::zeros((p, p));
    let mut row_gamma = Vec::with_capacity(p);
    let mut inflated_rows = Vec::new();
    let mut max_violation = 0.0f64;
    let mut pivots = 0;
    for (k, row) in rows.into_iter().enumerate() {
        let (sol, g) = row?;
        w_hat.row_mut(k).assign(&sol.w);
        if g > gamma {
            inflated_rows.push(k);
        }
        row_gamma.push(g);
        max_violation = max_violation.max(sol.violation);
        pivots += sol.pivots;
    }
    let w_star = symmetrize(&w_hat);
    let inverse_gap = if p <= opts.dense_fastpath_p_max {
        linalg::inverse(&j.j_hat).map(|inv| linalg::max_abs((&w_star - &inv).iter().copied()))
    } else {
        None
    };
    Ok(PrecisionEstimate {
        gamma_n: row_gamma.iter().copied().fold(gamma, f64::max),
        gamma_requested: gamma,
        row_gamma,
        inflated_rows,
        max_violation,
        pivots,
        inverse_gap,
        w_star,
        w_hat,
    })
}

/// `‖W J − I‖_max`.
pub fn constraint_violation(w: &Array2<f64>, j: &HessianEstimate) -> f64 {
    let prod = w.dot(&j.j_hat);
    prod.indexed_iter().fold(0.0, |m, ((a, b), v)| m.max((v - if a == b { 1.0 } else { 0.0 }).abs()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasedResult {
    pub beta_hat: Array1<f64>,
    pub beta_tilde: Array1<f64>,
    pub correction: Array1<f64>,
    /// Diagonal of `Ŵ` used for studentization.
    pub s_vec_diag: Array1<f64>,
    /// Pair-averaged score `{n(n−1)}⁻¹ Σ_{i≠j} L′(ε̂_i − ε̂_j)(X_i − X_j)`.
    pub score: Array1<f64>,
}

/// `β̃ = β̂ + Ŵ* · score`.
pub fn debias(fit: &FitResult, prec: &PrecisionEstimate, data: &Dataset, cfg: &LossConfig) -> Result<DebiasedResult> {
    data.check_beta(fit.beta_hat.len())?;
    data.check_residuals(fit.residuals.len())?;
    if prec.p() != data.p() {
        return Err(Error::Dimension { what: "precision estimate", expected: data.p(), got: prec.p() });
    }
    let score = pairs::score(cfg, data.x().view(), fit.residuals.view());
    let correction = prec.w_star.dot(&score);
    Ok(DebiasedResult {
        beta_tilde: &fit.beta_hat + &correction,
        beta_hat: fit.beta_hat.clone(),
        correction,
        s_vec_diag: prec.w_hat.diag().to_owned(),
        score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| -> f64 { StandardNormal.sample(&mut rng) })
    }

    fn brute_hessian(data: &Dataset, cfg: &LossConfig, r: &Array1<f64>) -> Array2<f64> {
        let (n, p, x) = (data.n(), data.p(), data.x());
        let mut out = Array2::<f64>::zeros((p, p));
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = cfg.loss_second(r[i] - r[j]);
                for a in 0..p {
                    for b in 0..p {
                        out[[a, b]] += w * (x[[i, a]] - x[[j, a]]) * (x[[i, b]] - x[[j, b]]);
                    }
                }
            }
        }
        out / (n * (n - 1)) as f64
    }

    #[test]
    fn hessian_matches_double_loop() {
        let cfg = LossConfig::epanechnikov(1.0).unwrap();
        let x = normal_matrix(3, 2, 4);
        let d = Dataset::new(x, array![0.1, -0.3, 0.4]).unwrap();
        let r = array![0.1, -0.3, 0.4];
        let h = hessian(&d, &cfg, r.view()).unwrap();
        assert!(linalg::max_abs((&h.j_hat - &brute_hessian(&d, &cfg, &r)).iter().copied()) < 1e-12);
        assert_eq!(h.j_hat, h.j_hat.t());
    }

    #[test]
    fn hessian_vanishes_when_residuals_spread() {
        let cfg = LossConfig::epanechnikov(1.0).unwrap();
        let d = Dataset::new(normal_matrix(4, 3, 1), array![0.0, 1.0, 2.0, 3.0]).unwrap();
        let h = hessian(&d, &cfg, array![0.0, 2.0, 4.0, 6.0].view()).unwrap();
        assert!(h.j_hat.iter().all(|v| *v == 0.0));
        assert!(hessian(&d, &cfg, array![0.0, 1.0].view()).is_err());
    }

    #[test]
    fn diagonal_hessian_gives_scaled_rows() {
        let j = HessianEstimate { j_hat: Array2::from_diag(&array![2.0, 0.5, 4.0]) };
        let prec = clime_rows(&j, 0.2, &ClimeOptions::default()).unwrap();
        for k in 0..3 {
            assert!((prec.w_hat[[k, k]] - 0.8 / j.j_hat[[k, k]]).abs() < 1e-12);
        }
        assert!(prec.inflated_rows.is_empty());
        assert!(prec.max_violation <= 0.2 + 1e-8);
    }

    #[test]
    fn symmetrize_rule_and_idempotence() {
        let w = array![[1.0, -0.2, 0.5], [0.3, 2.0, 0.0], [-0.5, 0.1, 1.0]];
        let s = symmetrize(&w);
        assert_eq!(s[[0, 1]], -0.2);
        assert_eq!(s[[1, 0]], -0.2);
        assert_eq!(s[[0, 2]], 0.5);
        // Equal magnitudes keep their own entry, so opposite signs survive.
        assert_eq!(s[[2, 0]], -0.5);
        assert_eq!(s[[1, 2]], 0.0);
        assert_eq!(symmetrize(&s), s);
    }

    #[test]
    fn singular_hessian_inflates_then_fails() {
        // Rank one: rows demanding the orthogonal direction are infeasible for γ < 1.
        let v = array![1.0, 1.0];
        let j = HessianEstimate { j_hat: Array2::from_shape_fn((2, 2), |(a, b)| v[a] * v[b]) };
        let prec = clime_rows(&j, 0.3, &ClimeOptions::default()).unwrap();
        assert_eq!(prec.inflated_rows, vec![0, 1]);
        assert!(prec.gamma_n >= 0.5);
        assert!(prec.max_violation <= prec.gamma_n + 1e-8);
        let zero = HessianEstimate { j_hat: Array2::zeros((2, 2)) };
        assert!(matches!(clime_rows(&zero, 0.01, &ClimeOptions::default()), Err(Error::Infeasible { row: 1, .. })));
    }

    #[test]
    fn inverse_error_shrinks_with_gamma() {
        let a = normal_matrix(5, 5, 9);
        let j = HessianEstimate { j_hat: a.t().dot(&a) / 5.0 + Array2::<f64>::eye(5) };
        let inv = linalg::inverse(&j.j_hat).unwrap();
        let mut last = f64::INFINITY;
        for g in [1e-2, 1e-4, 1e-6] {
            let prec = clime_rows(&j, g, &ClimeOptions::default()).unwrap();
            let err = linalg::max_abs((&prec.w_star - &inv).iter().copied());
            assert!(err <= last + 1e-12);
            assert!(constraint_violation(&prec.w_hat, &j) <= g + 1e-8);
            last = err;
        }
        assert!(last < 1e-4);
    }

    #[test]
    fn noiseless_fit_needs_no_correction() {
        let x = normal_matrix(12, 3, 2);
        let beta = array![1.0, 0.0, -2.0];
        let d = Dataset::new(x.clone(), x.dot(&beta)).unwrap();
        let cfg = LossConfig::epanechnikov(1.0).unwrap();
        let fit = FitResult {
            residuals: d.residuals(beta.view()).unwrap(),
            beta_hat: beta.clone(),
            objective_value: 0.0,
            loss_value: 0.0,
            iterations: 0,
            converged: true,
            lambda_used: 1.0,
        };
        let prec = PrecisionEstimate::from_matrix(Array2::eye(3));
        let deb = debias(&fit, &prec, &d, &cfg).unwrap();
        assert!(deb.correction.iter().all(|v| v.abs() < 1e-15));
        assert_eq!(deb.beta_tilde, &deb.beta_hat + &deb.correction);
    }

    fn spd(p: usize, seed: u64) -> Array2<f64> {
        let a = normal_matrix(p, p, seed);
        a.dot(&a.t()) / p as f64 + Array2::<f64>::eye(p) * 0.5
    }

    #[test]
    fn scaling_the_hessian_scales_the_rows() {
        for (j, c) in [(Array2::from_diag(&array![2.0, 0.5, 4.0]), 3.0), (spd(4, 21), 0.25)] {
            let base = clime_rows(&HessianEstimate { j_hat: j.clone() }, 0.1, &ClimeOptions::default()).unwrap();
            let scaled_j = HessianEstimate { j_hat: &j * c };
            let scaled = clime_rows(&scaled_j, 0.1, &ClimeOptions::default()).unwrap();
            assert!(constraint_violation(&scaled.w_hat, &scaled_j) <= 0.1 + 1e-8);
            let expect = &base.w_hat / c;
            assert!(linalg::max_abs((&scaled.w_hat - &expect).iter().copied()) < 1e-9);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(40))]

            #[test]
            fn rows_are_feasible(p in 2usize..7, seed in any::<u64>(), gamma in 1e-4f64..0.6) {
                let j = HessianEstimate { j_hat: spd(p, seed) };
                let prec = clime_rows(&j, gamma, &ClimeOptions::default()).unwrap();
                prop_assert!(prec.max_violation <= prec.gamma_n + 1e-8);
                prop_assert!(constraint_violation(&prec.w_hat, &j) <= prec.gamma_n + 1e-8);
                prop_assert_eq!(symmetrize(&prec.w_star), prec.w_star.clone());
                for a in 0..p {
                    for b in 0..p {
                        prop_assert_eq!(prec.w_star[[a, b]].abs(), prec.w_star[[b, a]].abs());
                    }
                }
            }
        }
    }
}
