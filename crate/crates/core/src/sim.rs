//! Monte Carlo coverage experiments and Kendall's τ screening.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::IndexSpec;
use crate::data::Dataset;
use crate::efficiency::ErrorLaw;
use crate::error::{Error, Result};
use crate::linalg;
use crate::pipeline::{self, BootSettings, FitSettings, InferenceSettings, LambdaSelect};
use crate::precision::ClimeOptions;
use crate::solver::PenaltyFamily;

/// Share of failed replications above which a report is marked invalid.
pub const MAX_FAILURE_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SigmaKind {
    /// `Σ_ij = ρ^{|i−j|}`.
    Toeplitz { rho: f64 },
    /// Unit diagonal, `offdiag` on the first off-diagonals.
    Banded { offdiag: f64 },
}

impl SigmaKind {
    pub fn toeplitz() -> Self {
        SigmaKind::Toeplitz { rho: 0.5 }
    }

    pub fn banded() -> Self {
        SigmaKind::Banded { offdiag: 0.48 }
    }

    pub fn matrix(&self, p: usize) -> Array2<f64> {
        Array2::from_shape_fn((p, p), |(i, j)| {
            let d = i.abs_diff(j);
            match *self {
                SigmaKind::Toeplitz { rho } => rho.powi(d as i32),
                SigmaKind::Banded { offdiag } => match d {
                    0 => 1.0,
                    1 => offdiag,
                    _ => 0.0,
                },
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Normal,
    Mixture,
    Cauchy,
}

impl ErrorKind {
    pub fn law(self) -> ErrorLaw {
        match self {
            ErrorKind::Normal => ErrorLaw::standard_normal(),
            ErrorKind::Mixture => ErrorLaw::contaminated_normal(),
            ErrorKind::Cauchy => ErrorLaw::standard_cauchy(),
        }
    }
}

impl std::str::FromStr for ErrorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "normal" => Ok(ErrorKind::Normal),
            "mixture" => Ok(ErrorKind::Mixture),
            "cauchy" => Ok(ErrorKind::Cauchy),
            other => Err(Error::Config(format!("unknown error law `{other}`"))),
        }
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErrorKind::Normal => "normal",
            ErrorKind::Mixture => "mixture",
            ErrorKind::Cauchy => "cauchy",
        })
    }
}

/// `(√3, √3, √3, 0, …, 0)`.
pub fn default_beta(p: usize) -> Array1<f64> {
    Array1::from_shape_fn(p, |j| if j < 3 { 3f64.sqrt() } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub n: usize,
    pub p: usize,
    pub sigma: SigmaKind,
    pub error: ErrorKind,
    pub beta_true: Array1<f64>,
    pub reps: usize,
    pub seed: u64,
    /// Fit, precision and bootstrap settings; the bootstrap seed is replaced
    /// per replication.
    pub inference: InferenceSettings,
}

impl Scenario {
    /// The desk-scale LASSO design: `n = 100`, Toeplitz `Σ`, `G = {1..5}`,
    /// 200 replications with `B = 300`.
    pub fn desk(id: impl Into<String>, p: usize, error: ErrorKind) -> Self {
        Scenario {
            id: id.into(),
            n: 100,
            p,
            sigma: SigmaKind::toeplitz(),
            error,
            beta_true: default_beta(p),
            reps: 200,
            seed: 2024,
            inference: InferenceSettings {
                fit: FitSettings { penalty: PenaltyFamily::Lasso, lambda_select: LambdaSelect::Cv, ..FitSettings::default() },
                clime: ClimeOptions::default(),
                boot: BootSettings { b: 300, alpha: 0.05, g: IndexSpec::Range(1, 5), studentized: true, seed: 0 },
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 4 || self.p < 1 {
            return Err(Error::Config(format!("scenario `{}` needs n >= 4 and p >= 1", self.id)));
        }
        if self.beta_true.len() != self.p {
            return Err(Error::Dimension { what: "beta_true", expected: self.p, got: self.beta_true.len() });
        }
        if self.reps == 0 {
            return Err(Error::Config(format!("scenario `{}` has zero replications", self.id)));
        }
        self.error.law().validate()?;
        self.inference.boot.g.resolve(self.p)?;
        Ok(())
    }

    fn replication_rng(&self, rep: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(rep as u64);
        rng
    }
}

/// One replication of the design, deterministic in `(seed, rep)`.
pub fn gen_dataset(sc: &Scenario, rep: usize) -> Result<Dataset> {
    let chol = linalg::cholesky(&sc.sigma.matrix(sc.p))?;
    gen_with_factor(sc, &chol, rep)
}

fn gen_with_factor(sc: &Scenario, chol: &Array2<f64>, rep: usize) -> Result<Dataset> {
    let mut rng = sc.replication_rng(rep);
    let z = Array2::from_shape_fn((sc.n, sc.p), |_| -> f64 { StandardNormal.sample(&mut rng) });
    let x = z.dot(&chol.t());
    let law = sc.error.law();
    let eps = Array1::from_shape_fn(sc.n, |_| law.sample(&mut rng));
    let y = x.dot(&sc.beta_true) + eps;
    Dataset::new(x, y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepOutcome {
    pub rep: usize,
    pub covered: bool,
    /// Mean interval width over `G`.
    pub mean_width: f64,
    /// `β̂_k` and `β̃_k` for `k ∈ G`.
    pub beta_hat: Vec<f64>,
    pub beta_tilde: Vec<f64>,
    pub lambda: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RepResult {
    Done(RepOutcome),
    Failed { rep: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub scenario_id: String,
    pub cr: f64,
    pub al: f64,
    pub mc_se: f64,
    pub reps_completed: usize,
    pub failures: usize,
    pub valid: bool,
    /// `mean(β̂_k) − β*_k` for `k ∈ G`.
    pub bias_hat: Vec<f64>,
    /// `mean(β̃_k) − β*_k` for `k ∈ G`.
    pub bias_tilde: Vec<f64>,
}

pub fn run_replication(sc: &Scenario, chol: &Array2<f64>, rep: usize) -> Result<RepOutcome> {
    let data = gen_with_factor(sc, chol, rep)?;
    let mut settings = sc.inference.clone();
    settings.boot.seed = sc.seed ^ (rep as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    settings.fit.solver.seed = settings.boot.seed;
    let out = pipeline::run_inference(&data, &settings)?;
    if !out.fit.fit.converged {
        return Err(Error::Stage { stage: "fit", source: Box::new(Error::Data("solver did not converge".into())) });
    }
    let ks: Vec<usize> = out.sci.rows.iter().map(|r| r.k - 1).collect();
    let widths = out.sci.widths();
    Ok(RepOutcome {
        rep,
        covered: out.sci.covers(sc.beta_true.view()),
        mean_width: widths.iter().sum::<f64>() / widths.len() as f64,
        beta_hat: ks.iter().map(|&k| out.debiased.beta_hat[k]).collect(),
        beta_tilde: ks.iter().map(|&k| out.debiased.beta_tilde[k]).collect(),
        lambda: out.fit.penalty.lambda,
        gamma: out.precision.gamma_n,
    })
}

/// Runs every replication, in parallel when a pool is available.
pub fn run_replications(sc: &Scenario) -> Result<Vec<RepResult>> {
    sc.validate()?;
    let chol = linalg::cholesky(&sc.sigma.matrix(sc.p))?;
    Ok((0..sc.reps)
        .into_par_iter()
        .map(|rep| match run_replication(sc, &chol, rep) {
            Ok(o) => RepResult::Done(o),
            Err(e) => RepResult::Failed { rep, reason: e.to_string() },
        })
        .collect())
}

pub fn summarize(sc: &Scenario, results: &[RepResult]) -> CoverageReport {
    let done: Vec<&RepOutcome> = results
        .iter()
        .filter_map(|r| match r {
            RepResult::Done(o) => Some(o),
            RepResult::Failed { .. } => None,
        })
        .collect();
    let failures = results.len() - done.len();
    let m = done.len();
    let covered = done.iter().filter(|o| o.covered).count();
    let (cr, al) = if m == 0 {
        (f64::NAN, f64::NAN)
    } else {
        (covered as f64 / m as f64, done.iter().map(|o| o.mean_width).sum::<f64>() / m as f64)
    };
    let g = sc.inference.boot.g.resolve(sc.p).map(|g| g.indices().to_vec()).unwrap_or_default();
    let bias = |pick: fn(&RepOutcome) -> &Vec<f64>| -> Vec<f64> {
        g.iter()
            .enumerate()
            .map(|(i, &k)| {
                if m == 0 {
                    f64::NAN
                } else {
                    done.iter().map(|o| pick(o)[i]).sum::<f64>() / m as f64 - sc.beta_true[k]
                }
            })
            .collect()
    };
    CoverageReport {
        scenario_id: sc.id.clone(),
        cr,
        al,
        mc_se: if m == 0 { f64::NAN } else { (cr * (1.0 - cr) / m as f64).sqrt() },
        reps_completed: m,
        failures,
        valid: m > 0 && (failures as f64) <= MAX_FAILURE_FRACTION * results.len() as f64,
        bias_hat: bias(|o| &o.beta_hat),
        bias_tilde: bias(|o| &o.beta_tilde),
    }
}

pub fn run_scenario(sc: &Scenario) -> Result<CoverageReport> {
    let results = run_replications(sc)?;
    Ok(summarize(sc, &results))
}

/// Kendall's τ-b in `O(n log n)`: sort by `(x, y)`, then count the
/// discordant pairs as inversions of `y` during a merge sort.
pub fn kendall_tau(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));
    let pairs = |run: u64| run * (run.saturating_sub(1)) / 2;

    let mut ties_x = 0u64;
    let mut ties_xy = 0u64;
    let (mut run_x, mut run_xy) = (1u64, 1u64);
    for w in idx.windows(2) {
        let (a, b) = (w[0], w[1]);
        if x[a] == x[b] {
            run_x += 1;
            if y[a] == y[b] {
                run_xy += 1;
            } else {
                ties_xy += pairs(run_xy);
                run_xy = 1;
            }
        } else {
            ties_x += pairs(run_x);
            ties_xy += pairs(run_xy);
            run_x = 1;
            run_xy = 1;
        }
    }
    ties_x += pairs(run_x);
    ties_xy += pairs(run_xy);

    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let swaps = merge_count(&mut ys);

    let mut ties_y = 0u64;
    let mut run_y = 1u64;
    for w in ys.windows(2) {
        if w[0] == w[1] {
            run_y += 1;
        } else {
            ties_y += pairs(run_y);
            run_y = 1;
        }
    }
    ties_y += pairs(run_y);

    let total = pairs(n as u64);
    let denom = ((total - ties_x) as f64 * (total - ties_y) as f64).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    let concordant_minus_discordant = total as f64 - ties_x as f64 - ties_y as f64 + ties_xy as f64 - 2.0 * swaps as f64;
    concordant_minus_discordant / denom
}

/// Sorts `v` ascending and returns the number of strict inversions.
fn merge_count(v: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid]) + merge_count(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            merged.push(v[j]);
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    swaps
}

/// `(column, τ)` for the `keep` columns with largest `|τ|`, ties to the lower index.
pub fn kendall_screen(data: &Dataset, keep: usize) -> Result<Vec<(usize, f64)>> {
    let p = data.p();
    if keep == 0 || keep > p {
        return Err(Error::Config(format!("keep must lie in 1..={p}, got {keep}")));
    }
    let y = data.y().view();
    let taus: Vec<f64> = (0..p).into_par_iter().map(|j| kendall_tau(data.x().column(j), y)).collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| taus[b].abs().total_cmp(&taus[a].abs()).then(a.cmp(&b)));
    Ok(order.into_iter().take(keep).map(|j| (j, taus[j])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn brute_tau(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len();
        let (mut s, mut tx, mut ty) = (0.0, 0.0, 0.0);
        let mut total = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let a = (x[i] - x[j]).signum() * if x[i] == x[j] { 0.0 } else { 1.0 };
                let b = (y[i] - y[j]).signum() * if y[i] == y[j] { 0.0 } else { 1.0 };
                s += a * b;
                total += 1.0;
                tx += if a == 0.0 { 1.0 } else { 0.0 };
                ty += if b == 0.0 { 1.0 } else { 0.0 };
            }
        }
        let d: f64 = (total - tx) * (total - ty);
        if d == 0.0 { 0.0 } else { s / d.sqrt() }
    }

    #[test]
    fn toeplitz_and_banded_matrices() {
        let t = SigmaKind::toeplitz().matrix(3);
        assert_eq!(t, array![[1.0, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 1.0]]);
        let b = SigmaKind::banded().matrix(60);
        assert_eq!(b[[3, 4]], 0.48);
        assert_eq!(b[[3, 5]], 0.0);
        assert!(linalg::cholesky(&b).is_ok());
    }

    #[test]
    fn tau_matches_pair_count() {
        let x = [1.0, 3.0, 2.0, 5.0, 4.0];
        let y = [2.0, 1.0, 4.0, 3.0, 5.0];
        let fast = kendall_tau(ArrayView1::from(&x), ArrayView1::from(&y));
        assert!((fast - brute_tau(&x, &y)).abs() < 1e-15);
        let xt = [1.0, 1.0, 2.0, 2.0, 3.0, 1.0];
        let yt = [1.0, 2.0, 2.0, 2.0, 0.0, 1.0];
        let fast = kendall_tau(ArrayView1::from(&xt), ArrayView1::from(&yt));
        assert!((fast - brute_tau(&xt, &yt)).abs() < 1e-14);
    }

    #[test]
    fn identical_column_ranks_first() {
        let y = array![0.3, -1.0, 2.0, 0.5, 1.1];
        let x = Array2::from_shape_fn((5, 3), |(i, j)| match j {
            0 => (i as f64 * 7.0) % 5.0,
            1 => y[i],
            _ => 1.0,
        });
        let d = Dataset::new(x, y).unwrap();
        let s = kendall_screen(&d, 3).unwrap();
        assert_eq!(s[0], (1, 1.0));
        assert!(s.iter().any(|&(j, t)| j == 2 && t == 0.0));
        assert!(kendall_screen(&d, 0).is_err());
        assert!(kendall_screen(&d, 4).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let sc = Scenario::desk("t", 5, ErrorKind::Normal);
        let a = gen_dataset(&sc, 3).unwrap();
        assert_eq!(a, gen_dataset(&sc, 3).unwrap());
        assert_ne!(a, gen_dataset(&sc, 4).unwrap());
    }

    #[test]
    fn single_replication_coverage_is_binary() {
        let mut sc = Scenario::desk("one", 8, ErrorKind::Normal);
        sc.reps = 1;
        sc.inference.boot.b = 100;
        let r = run_scenario(&sc).unwrap();
        assert!(r.cr == 0.0 || r.cr == 1.0);
        assert_eq!(r.reps_completed + r.failures, 1);
    }

    #[test]
    fn sample_covariance_matches_sigma() {
        let mut sc = Scenario::desk("cov", 5, ErrorKind::Normal);
        sc.n = 100_000;
        let d = gen_dataset(&sc, 0).unwrap();
        let cov = d.x().t().dot(d.x()) / sc.n as f64;
        let sigma = SigmaKind::toeplitz().matrix(5);
        assert!(linalg::max_abs((&cov - &sigma).iter().copied()) < 0.02);
    }

    #[test]
    fn mixture_tail_fraction() {
        let mut sc = Scenario::desk("tail", 1, ErrorKind::Mixture);
        sc.n = 100_000;
        sc.beta_true = Array1::zeros(1);
        let d = gen_dataset(&sc, 0).unwrap();
        let frac = d.y().iter().filter(|v| v.abs() > 10.0).count() as f64 / sc.n as f64;
        assert!((frac - 0.046).abs() < 0.005, "{frac}");
    }

    #[test]
    fn summary_counts_failures() {
        let sc = Scenario::desk("s", 6, ErrorKind::Normal);
        let ok = |covered, w| RepResult::Done(RepOutcome {
            rep: 0,
            covered,
            mean_width: w,
            beta_hat: vec![0.0; 5],
            beta_tilde: vec![0.1; 5],
            lambda: 0.1,
            gamma: 0.1,
        });
        let fail = RepResult::Failed { rep: 3, reason: "x".into() };
        let r = summarize(&sc, &[ok(true, 1.0), ok(false, 2.0), ok(true, 3.0), ok(true, 2.0), fail.clone()]);
        assert_eq!((r.reps_completed, r.failures), (4, 1));
        assert_eq!(r.cr, 0.75);
        assert_eq!(r.al, 2.0);
        assert!((r.mc_se - (0.75f64 * 0.25 / 4.0).sqrt()).abs() < 1e-15);
        assert!(!r.valid);
        assert!((r.bias_tilde[0] - (0.1 - 3f64.sqrt())).abs() < 1e-15);
        assert_eq!(r.bias_tilde[4], 0.1);
    }
}
