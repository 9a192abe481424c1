//! Penalized convoluted rank regression.
//!
//! The smooth part of the objective is the pairwise U-statistic
//! `{n(n-1)}⁻¹ Σ_{i≠j} L_h((Y_i - Y_j) - (X_i - X_j)ᵀβ)`. LASSO fits use
//! accelerated proximal gradient with backtracking; SCAD and MCP fits run a
//! few local linear approximation stages, each a weighted LASSO warm-started
//! from the previous stage.
//!
//! No intercept is fitted: the loss depends on the response only through
//! pairwise differences.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, ArrayView1, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::LossConfig;
use crate::pairs::{self, PairSet};

pub const SCAD_DEFAULT_A: f64 = 3.7;
pub const MCP_DEFAULT_A: f64 = 3.0;

/// Penalty constant in the high-dimensional BIC.
pub const HBIC_CONSTANT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyFamily {
    Lasso,
    Scad,
    Mcp,
}

impl PenaltyFamily {
    pub fn default_shape(self) -> f64 {
        match self {
            PenaltyFamily::Lasso => 0.0,
            PenaltyFamily::Scad => SCAD_DEFAULT_A,
            PenaltyFamily::Mcp => MCP_DEFAULT_A,
        }
    }
}

impl fmt::Display for PenaltyFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PenaltyFamily::Lasso => "lasso",
            PenaltyFamily::Scad => "scad",
            PenaltyFamily::Mcp => "mcp",
        })
    }
}

impl FromStr for PenaltyFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lasso" => Ok(PenaltyFamily::Lasso),
            "scad" => Ok(PenaltyFamily::Scad),
            "mcp" => Ok(PenaltyFamily::Mcp),
            other => Err(Error::Config(format!("unknown penalty `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub family: PenaltyFamily,
    pub lambda: f64,
    /// Shape parameter `a`; ignored for the LASSO.
    pub a: f64,
    /// Optional side constraint `‖β‖₁ ≤ R`.
    pub l1_radius: Option<f64>,
}

impl PenaltySpec {
    pub fn new(family: PenaltyFamily, lambda: f64) -> Result<Self> {
        let spec = PenaltySpec { family, lambda, a: family.default_shape(), l1_radius: None };
        spec.validate()?;
        Ok(spec)
    }

    pub fn lasso(lambda: f64) -> Result<Self> {
        Self::new(PenaltyFamily::Lasso, lambda)
    }

    pub fn scad(lambda: f64) -> Result<Self> {
        Self::new(PenaltyFamily::Scad, lambda)
    }

    pub fn mcp(lambda: f64) -> Result<Self> {
        Self::new(PenaltyFamily::Mcp, lambda)
    }

    pub fn with_shape(mut self, a: f64) -> Result<Self> {
        self.a = a;
        self.validate()?;
        Ok(self)
    }

    pub fn with_l1_radius(mut self, radius: f64) -> Result<Self> {
        self.l1_radius = Some(radius);
        self.validate()?;
        Ok(self)
    }

    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        self.lambda = lambda;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || self.lambda.is_nan() {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        match self.family {
            PenaltyFamily::Scad if !(self.a > 2.0) => {
                return Err(Error::Config(format!("SCAD requires a > 2, got {}", self.a)));
            }
            PenaltyFamily::Mcp if !(self.a > 1.0) => {
                return Err(Error::Config(format!("MCP requires a > 1, got {}", self.a)));
            }
            _ => {}
        }
        if let Some(r) = self.l1_radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("l1 radius must be positive, got {r}")));
            }
        }
        Ok(())
    }

    /// `p_λ(|t|)`.
    pub fn value(&self, t: f64) -> f64 {
        let (lam, a, t) = (self.lambda, self.a, t.abs());
        match self.family {
            PenaltyFamily::Lasso => lam * t,
            PenaltyFamily::Scad => {
                if t < lam {
                    lam * t
                } else if t <= a * lam {
                    (a * lam * t - 0.5 * (t * t + lam * lam)) / (a - 1.0)
                } else {
                    0.5 * (a + 1.0) * lam * lam
                }
            }
            PenaltyFamily::Mcp => {
                if t <= a * lam {
                    lam * t - t * t / (2.0 * a)
                } else {
                    0.5 * a * lam * lam
                }
            }
        }
    }

    /// `p_λ'(|t|)`, the right derivative at zero.
    pub fn derivative(&self, t: f64) -> f64 {
        let (lam, a, t) = (self.lambda, self.a, t.abs());
        match self.family {
            PenaltyFamily::Lasso => lam,
            PenaltyFamily::Scad => {
                if t <= lam {
                    lam
                } else {
                    ((a * lam - t) / (a - 1.0)).max(0.0)
                }
            }
            PenaltyFamily::Mcp => (lam - t / a).max(0.0),
        }
    }

    pub fn total(&self, beta: ArrayView1<'_, f64>) -> f64 {
        beta.iter().map(|&b| self.value(b)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Cap on unordered pairs used by the loss; `None` means exact.
    pub max_pairs: Option<usize>,
    pub seed: u64,
    pub lla_stages: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: 1e-7, max_iter: 5000, max_pairs: None, seed: 0, lla_stages: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub beta_hat: Array1<f64>,
    pub residuals: Array1<f64>,
    /// Loss plus penalty at `beta_hat`.
    pub objective_value: f64,
    /// Loss alone at `beta_hat`.
    pub loss_value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub lambda_used: f64,
}

impl FitResult {
    pub fn support(&self) -> Vec<usize> {
        self.beta_hat.iter().enumerate().filter(|(_, b)| **b != 0.0).map(|(j, _)| j).collect()
    }
}

/// The smooth pairwise loss bound to a dataset.
pub struct CrrObjective<'a> {
    data: &'a Dataset,
    cfg: LossConfig,
    pairs: PairSet,
}

impl<'a> CrrObjective<'a> {
    pub fn new(data: &'a Dataset, cfg: LossConfig) -> Self {
        CrrObjective { data, cfg, pairs: PairSet::All }
    }

    pub fn with_pairs(data: &'a Dataset, cfg: LossConfig, pairs: PairSet) -> Self {
        CrrObjective { data, cfg, pairs }
    }

    pub fn value(&self, beta: ArrayView1<'_, f64>) -> Result<f64> {
        let r = self.data.residuals(beta)?;
        Ok(pairs::mean_loss(&self.cfg, r.view(), &self.pairs))
    }

    pub fn gradient(&self, beta: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.value_and_gradient(beta)?.1)
    }

    pub fn value_and_gradient(&self, beta: ArrayView1<'_, f64>) -> Result<(f64, Array1<f64>)> {
        let r = self.data.residuals(beta)?;
        let pass = pairs::loss_pass(&self.cfg, r.view(), &self.pairs, true);
        let grad = self.data.x().t().dot(&pass.weights) * (-1.0 / pass.pairs as f64);
        Ok((pass.mean_loss, grad))
    }
}

/// Mean convoluted rank loss over all ordered pairs `i ≠ j` (penalty excluded).
pub fn objective(data: &Dataset, cfg: &LossConfig, beta: ArrayView1<'_, f64>) -> Result<f64> {
    CrrObjective::new(data, *cfg).value(beta)
}

/// Gradient of [`objective`] with respect to `beta`.
pub fn gradient(data: &Dataset, cfg: &LossConfig, beta: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    CrrObjective::new(data, *cfg).gradient(beta)
}

/// Smallest LASSO `λ` for which `β = 0` is optimal: `‖∇L(0)‖_∞`.
pub fn lambda_max(data: &Dataset, cfg: &LossConfig) -> Result<f64> {
    let g = gradient(data, cfg, Array1::zeros(data.p()).view())?;
    Ok(g.iter().fold(0.0, |m: f64, v| m.max(v.abs())))
}

/// `count` log-spaced values from `max` down to `ratio * max`.
pub fn lambda_grid(max: f64, count: usize, ratio: f64) -> Vec<f64> {
    if count <= 1 {
        return vec![max];
    }
    let (hi, lo) = (max.ln(), (max * ratio).ln());
    (0..count).map(|k| (hi + (lo - hi) * k as f64 / (count - 1) as f64).exp()).collect()
}

/// Default grid: 50 points from `λ_max` to `0.01 λ_max`.
pub fn default_lambda_grid(data: &Dataset, cfg: &LossConfig) -> Result<Vec<f64>> {
    let max = lambda_max(data, cfg)?;
    if !(max > 0.0) {
        return Err(Error::Data("gradient at zero vanishes; no informative lambda grid".into()));
    }
    Ok(lambda_grid(max, 50, 0.01))
}

/// Row permutation sorting observations by `(y, x)` lexicographically.
fn canonical_order(data: &Dataset) -> Vec<usize> {
    let (x, y) = (data.x(), data.y());
    let mut order: Vec<usize> = (0..data.n()).collect();
    order.sort_by(|&a, &b| {
        y[a].total_cmp(&y[b]).then_with(|| {
            x.row(a)
                .iter()
                .zip(x.row(b).iter())
                .map(|(u, v)| u.total_cmp(v))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        })
    });
    order
}

fn canonicalize(data: &Dataset) -> Result<(Dataset, Vec<usize>)> {
    let order = canonical_order(data);
    Ok((data.select_rows(&order)?, order))
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Euclidean projection onto `{β: ‖β‖₁ ≤ radius}`.
pub fn project_l1_ball(beta: &mut Array1<f64>, radius: f64) {
    let norm: f64 = beta.iter().map(|b| b.abs()).sum();
    if norm <= radius {
        return;
    }
    let mut mags: Vec<f64> = beta.iter().map(|b| b.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, &m) in mags.iter().enumerate() {
        cum += m;
        let t = (cum - radius) / (k + 1) as f64;
        if m > t {
            theta = t;
        } else {
            break;
        }
    }
    beta.mapv_inplace(|b| soft_threshold(b, theta));
    // Guard the rounding slack so the constraint holds exactly.
    let after: f64 = beta.iter().map(|b| b.abs()).sum();
    if after > radius {
        beta.mapv_inplace(|b| b * (radius / after));
    }
}

struct InnerFit {
    beta: Array1<f64>,
    iterations: usize,
    converged: bool,
}

/// Accelerated proximal gradient for `L(β) + Σ_j thresholds_j |β_j|`.
fn weighted_lasso(
    objective: &CrrObjective<'_>,
    thresholds: &Array1<f64>,
    start: Array1<f64>,
    radius: Option<f64>,
    opts: &SolverOptions,
) -> Result<InnerFit> {
    let data = objective.data;
    let max_var = data
        .x()
        .columns()
        .into_iter()
        .map(|c| crate::data::moments(c).1.powi(2))
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let lipschitz = objective.cfg.curvature_bound() * max_var * 2.0;
    let mut step = 1.0 / lipschitz;

    let mut x_prev = start;
    if let Some(r) = radius {
        project_l1_ball(&mut x_prev, r);
    }
    let mut y = x_prev.clone();
    let mut momentum = 1.0f64;

    for iter in 1..=opts.max_iter {
        let (f_y, g_y) = objective.value_and_gradient(y.view())?;
        let x = loop {
            let mut cand = Zip::from(&y)
                .and(&g_y)
                .and(thresholds)
                .map_collect(|&yv, &gv, &lam| soft_threshold(yv - step * gv, step * lam));
            if let Some(r) = radius {
                project_l1_ball(&mut cand, r);
            }
            let f_x = objective.value(cand.view())?;
            let d = &cand - &y;
            let bound = f_y + g_y.dot(&d) + d.dot(&d) / (2.0 * step);
            if f_x <= bound + 1e-13 * f_y.abs() || step < 1e-20 {
                break cand;
            }
            step *= 0.5;
        };

        let change = linf_dist(&x, &x_prev);
        let prox_gap = linf_dist(&x, &y);
        if change < opts.tol && prox_gap < opts.tol {
            return Ok(InnerFit { beta: x, iterations: iter, converged: true });
        }

        // Restart momentum when it points against the last step.
        let restart = (&y - &x).dot(&(&x - &x_prev)) > 0.0;
        if restart {
            momentum = 1.0;
            y = x.clone();
        } else {
            let next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
            let coef = (momentum - 1.0) / next;
            y = &x + &((&x - &x_prev) * coef);
            momentum = next;
        }
        x_prev = x;
    }
    Ok(InnerFit { beta: x_prev, iterations: opts.max_iter, converged: false })
}

fn linf_dist(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (u, v)| m.max((u - v).abs()))
}

/// Fits in the order given, without canonicalization.
fn fit_ordered(
    data: &Dataset,
    cfg: &LossConfig,
    pen: &PenaltySpec,
    opts: &SolverOptions,
    start: Option<&Array1<f64>>,
) -> Result<FitResult> {
    pen.validate()?;
    let p = data.p();
    let pairs = PairSet::for_size(data.n(), opts.max_pairs, opts.seed);
    let objective = CrrObjective::with_pairs(data, *cfg, pairs);
    let start = start.cloned().unwrap_or_else(|| Array1::zeros(p));

    let lasso_thresholds = Array1::from_elem(p, pen.lambda);
    let mut inner = weighted_lasso(&objective, &lasso_thresholds, start, pen.l1_radius, opts)?;
    let mut iterations = inner.iterations;
    let mut converged = inner.converged;

    if pen.family != PenaltyFamily::Lasso {
        for _ in 0..opts.lla_stages {
            let thresholds = inner.beta.mapv(|b| pen.derivative(b));
            let previous = inner.beta.clone();
            inner = weighted_lasso(&objective, &thresholds, previous.clone(), pen.l1_radius, opts)?;
            iterations += inner.iterations;
            converged = inner.converged;
            if linf_dist(&inner.beta, &previous) < opts.tol {
                break;
            }
        }
    }

    let beta_hat = inner.beta;
    let residuals = data.residuals(beta_hat.view())?;
    let loss_value = objective.value(beta_hat.view())?;
    Ok(FitResult {
        objective_value: loss_value + pen.total(beta_hat.view()),
        loss_value,
        residuals,
        beta_hat,
        iterations,
        converged,
        lambda_used: pen.lambda,
    })
}

/// Penalized convoluted rank regression fit.
///
/// Observations are put into a canonical order before solving, so the result
/// does not depend on the order rows were supplied in.
pub fn fit(data: &Dataset, cfg: &LossConfig, pen: &PenaltySpec, opts: &SolverOptions) -> Result<FitResult> {
    fit_from(data, cfg, pen, opts, None)
}

/// [`fit`] with an explicit starting point.
pub fn fit_from(
    data: &Dataset,
    cfg: &LossConfig,
    pen: &PenaltySpec,
    opts: &SolverOptions,
    start: Option<&Array1<f64>>,
) -> Result<FitResult> {
    if let Some(s) = start {
        data.check_beta(s.len())?;
    }
    let (sorted, _) = canonicalize(data)?;
    let mut result = fit_ordered(&sorted, cfg, pen, opts, start)?;
    result.residuals = data.residuals(result.beta_hat.view())?;
    Ok(result)
}

/// Fits along a grid (in the order given) with warm starts.
fn fit_path_ordered(
    data: &Dataset,
    cfg: &LossConfig,
    template: &PenaltySpec,
    grid: &[f64],
    opts: &SolverOptions,
) -> Result<Vec<FitResult>> {
    let mut out: Vec<FitResult> = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let pen = template.with_lambda(lambda)?;
        let start = out.last().map(|f| f.beta_hat.clone());
        out.push(fit_ordered(data, cfg, &pen, opts, start.as_ref())?);
    }
    Ok(out)
}

/// Warm-started fits along `grid`, returned in grid order.
pub fn fit_path(
    data: &Dataset,
    cfg: &LossConfig,
    template: &PenaltySpec,
    grid: &[f64],
    opts: &SolverOptions,
) -> Result<Vec<FitResult>> {
    let (sorted, _) = canonicalize(data)?;
    let mut path = fit_path_ordered(&sorted, cfg, template, grid, opts)?;
    for f in &mut path {
        f.residuals = data.residuals(f.beta_hat.view())?;
    }
    Ok(path)
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    if grid.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
        return Err(Error::Config("lambda grid values must be positive and finite".into()));
    }
    Ok(())
}

/// Index of the smallest score; ties go to the larger lambda.
fn argmin_prefer_large(grid: &[f64], scores: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..grid.len() {
        let better = scores[k] < scores[best]
            || (scores[k] == scores[best] && grid[k] > grid[best]);
        if better {
            best = k;
        }
    }
    best
}

/// K-fold cross-validation on held-out convoluted rank loss.
///
/// `grid` must be decreasing. Folds are assigned by a seeded shuffle of the
/// canonically ordered observations; the held-out loss of each fold averages
/// over pairs inside that fold.
pub fn select_lambda_cv(
    data: &Dataset,
    cfg: &LossConfig,
    template: &PenaltySpec,
    grid: &[f64],
    folds: usize,
    opts: &SolverOptions,
) -> Result<f64> {
    check_grid(grid)?;
    if grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config("cross-validation grid must be strictly decreasing".into()));
    }
    if grid.len() == 1 {
        return Ok(grid[0]);
    }
    let n = data.n();
    if n < 4 {
        return Err(Error::Config(format!("lambda selection needs at least 4 observations, got {n}")));
    }
    if folds < 2 || n / folds < 2 {
        return Err(Error::Config(format!(
            "{folds}-fold cross-validation on {n} observations leaves a fold with fewer than 2 observations"
        )));
    }
    let (sorted, _) = canonicalize(data)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_cf01));

    let mut totals = vec![0.0; grid.len()];
    for fold in 0..folds {
        let mut held: Vec<usize> = idx.iter().copied().enumerate().filter(|(k, _)| k % folds == fold).map(|(_, i)| i).collect();
        let mut train: Vec<usize> = idx.iter().copied().enumerate().filter(|(k, _)| k % folds != fold).map(|(_, i)| i).collect();
        held.sort_unstable();
        train.sort_unstable();
        let train_set = sorted.select_rows(&train)?;
        let held_set = sorted.select_rows(&held)?;
        let path = fit_path_ordered(&train_set, cfg, template, grid, opts)?;
        for (k, f) in path.iter().enumerate() {
            totals[k] += objective(&held_set, cfg, f.beta_hat.view())?;
        }
    }
    Ok(grid[argmin_prefer_large(grid, &totals)])
}

/// High-dimensional BIC: `log L(β̂_λ) + |supp β̂_λ| · C · log(log n) · log(p) / n`.
pub fn select_lambda_hbic(
    data: &Dataset,
    cfg: &LossConfig,
    template: &PenaltySpec,
    grid: &[f64],
    opts: &SolverOptions,
) -> Result<f64> {
    check_grid(grid)?;
    if grid.len() == 1 {
        return Ok(grid[0]);
    }
    let n = data.n();
    if n < 4 {
        return Err(Error::Config(format!("lambda selection needs at least 4 observations, got {n}")));
    }
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));
    let descending: Vec<f64> = order.iter().map(|&k| grid[k]).collect();
    let path = fit_path(data, cfg, template, &descending, opts)?;

    let nf = n as f64;
    let per_term = HBIC_CONSTANT * nf.ln().ln() * (data.p() as f64).ln() / nf;
    let scores: Vec<f64> = path
        .iter()
        .map(|f| f.loss_value.ln() + f.support().len() as f64 * per_term)
        .collect();
    Ok(descending[argmin_prefer_large(&descending, &scores)])
}

/// Residuals recomputed from scratch, for invariant checks.
pub fn recompute_residuals(data: &Dataset, fit: &FitResult) -> Result<Array1<f64>> {
    data.residuals(fit.beta_hat.view())
}
