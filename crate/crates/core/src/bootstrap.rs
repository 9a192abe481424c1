//! Multiplier bootstrap for the max-norm statistic and simultaneous intervals.
//!
//! With `s_i = Σ_{j≠i} L′(ε̂_i − ε̂_j)(X_i − X_j)` the perturbed pair sum
//! `Σ_{i≠j} g_ij (e_i + e_j)` equals `2 Σ_i e_i s_i`, so every draw costs
//! `O(np)` once the `s_i` are known.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::LossConfig;
use crate::precision::{DebiasedResult, PrecisionEstimate};

pub const MIN_REPLICATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScoreAggregate {
    /// Row `i` is `s_i`.
    pub s_vec: Array2<f64>,
}

impl PairScoreAggregate {
    pub fn n(&self) -> usize {
        self.s_vec.nrows()
    }

    /// `2 Σ_i e_i s_i`.
    pub fn perturbed_sum(&self, e: ArrayView1<'_, f64>) -> Array1<f64> {
        self.s_vec.t().dot(&e) * 2.0
    }
}

pub fn pair_scores(data: &Dataset, cfg: &LossConfig, residuals: ArrayView1<'_, f64>) -> Result<PairScoreAggregate> {
    data.check_residuals(residuals.len())?;
    let (n, p) = (data.n(), data.p());
    let x = data.x();
    let r = residuals.to_vec();
    let mut s = Array2::<f64>::zeros((n, p));
    for i in 0..n {
        for j in (i + 1)..n {
            let g = cfg.loss_prime(r[i] - r[j]);
            if g == 0.0 {
                continue;
            }
            for c in 0..p {
                let v = g * (x[[i, c]] - x[[j, c]]);
                s[[i, c]] += v;
                s[[j, c]] += v;
            }
        }
    }
    Ok(PairScoreAggregate { s_vec: s })
}

/// A set of coordinates, stored 0-based and sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexSet(Vec<usize>);

/// Unresolved index-set syntax: `"all"`, `"1..k"`, or a 1-based list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum IndexSpec {
    All,
    Range(usize, usize),
    List(Vec<usize>),
}

impl FromStr for IndexSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(IndexSpec::All);
        }
        let bad = || Error::Config(format!("cannot parse index set `{s}`; use \"all\", \"a..b\" or a comma list"));
        if let Some((a, b)) = s.split_once("..") {
            let a: usize = a.trim().parse().map_err(|_| bad())?;
            let b: usize = b.trim().parse().map_err(|_| bad())?;
            if a == 0 || b < a {
                return Err(bad());
            }
            return Ok(IndexSpec::Range(a, b));
        }
        let list = s
            .split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        if list.is_empty() || list.contains(&0) {
            return Err(bad());
        }
        Ok(IndexSpec::List(list))
    }
}

impl fmt::Display for IndexSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IndexSpec::All => f.write_str("all"),
            IndexSpec::Range(a, b) => write!(f, "{a}..{b}"),
            IndexSpec::List(v) => {
                let parts: Vec<String> = v.iter().map(|k| k.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl IndexSpec {
    pub fn resolve(&self, p: usize) -> Result<IndexSet> {
        let one_based: Vec<usize> = match self {
            IndexSpec::All => (1..=p).collect(),
            IndexSpec::Range(a, b) => (*a..=*b).collect(),
            IndexSpec::List(v) => v.clone(),
        };
        IndexSet::from_one_based(&one_based, p)
    }
}

impl IndexSet {
    pub fn from_one_based(indices: &[usize], p: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Config("index set is empty".into()));
        }
        let mut v = Vec::with_capacity(indices.len());
        for &k in indices {
            if k == 0 || k > p {
                return Err(Error::Config(format!("index {k} outside 1..{p}")));
            }
            v.push(k - 1);
        }
        v.sort_unstable();
        v.dedup();
        Ok(IndexSet(v))
    }

    pub fn all(p: usize) -> Self {
        IndexSet((0..p).collect())
    }

    /// 0-based indices.
    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub draws: Vec<f64>,
    pub q_star: f64,
    pub alpha: f64,
    pub b: usize,
    pub n: usize,
    pub g: IndexSet,
    pub studentized: bool,
    /// Diagonal entries of `Ŵ` for the coordinates in `g` (studentized runs).
    pub scale: Vec<f64>,
}

/// `⌈(1−α)B⌉`-th order statistic of `draws` (1-based).
pub fn upper_quantile(draws: &[f64], alpha: f64) -> f64 {
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let b = sorted.len();
    // The small offset keeps products like 0.95 * 100 from rounding up.
    let rank = (((1.0 - alpha) * b as f64) - 1e-9).ceil().clamp(1.0, b as f64) as usize;
    sorted[rank - 1]
}

fn draw_stream(seed: u64, b: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64);
    rng
}

/// Multiplier bootstrap of `‖T_b‖_G`, `T_b = √n · M · {n(n−1)}⁻¹ · 2 Σ_i e_bi s_i`
/// with `M = Ŝ^{-1/2} Ŵ*` when studentized and `M = Ŵ*` otherwise.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap(
    prec: &PrecisionEstimate,
    agg: &PairScoreAggregate,
    n: usize,
    g: &IndexSet,
    alpha: f64,
    b: usize,
    studentized: bool,
    seed: u64,
) -> Result<BootstrapResult> {
    if b < MIN_REPLICATIONS {
        return Err(Error::Config(format!("bootstrap needs B >= {MIN_REPLICATIONS}, got {b}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if g.is_empty() {
        return Err(Error::Config("index set is empty".into()));
    }
    let p = prec.p();
    if agg.n() != n {
        return Err(Error::Dimension { what: "pair-score rows", expected: n, got: agg.n() });
    }
    if agg.s_vec.ncols() != p {
        return Err(Error::Dimension { what: "pair-score columns", expected: p, got: agg.s_vec.ncols() });
    }
    if let Some(&k) = g.indices().iter().find(|&&k| k >= p) {
        return Err(Error::Config(format!("index {} outside 1..{p}", k + 1)));
    }

    let mut scale = Vec::new();
    let rows: Vec<usize> = g.indices().to_vec();
    let mut m = prec.w_star.select(ndarray::Axis(0), &rows);
    if studentized {
        for (r, &k) in rows.iter().enumerate() {
            let w = prec.w_hat[[k, k]];
            if !(w > 0.0) {
                return Err(Error::NonPositiveDiagonal { coordinate: k + 1, value: w });
            }
            scale.push(w);
            m.row_mut(r).mapv_inplace(|v| v / w.sqrt());
        }
    }
    let nf = n as f64;
    let factor = nf.sqrt() * 2.0 / (nf * (nf - 1.0));
    // Project the scores once: each draw is then an n-vector times an n × |G| matrix.
    let projected = agg.s_vec.dot(&m.t()) * factor;

    let draws: Vec<f64> = (0..b)
        .into_par_iter()
        .map(|idx| {
            let mut rng = draw_stream(seed, idx);
            let e = Array1::from_shape_fn(n, |_| -> f64 { StandardNormal.sample(&mut rng) });
            let t = projected.t().dot(&e);
            t.iter().fold(0.0, |acc: f64, v| acc.max(v.abs()))
        })
        .collect();
    let q_star = upper_quantile(&draws, alpha);
    Ok(BootstrapResult { draws, q_star, alpha, b, n, g: g.clone(), studentized, scale })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SciRow {
    /// 1-based coordinate.
    pub k: usize,
    pub beta_tilde: f64,
    pub lower: f64,
    pub upper: f64,
    pub excludes_zero: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SciResult {
    pub rows: Vec<SciRow>,
    pub q_star: f64,
    pub n: usize,
    pub alpha: f64,
    pub studentized: bool,
}

impl SciResult {
    pub fn widths(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.upper - r.lower).collect()
    }

    /// Whether every interval covers the matching entry of `beta` (0-based vector).
    pub fn covers(&self, beta: ArrayView1<'_, f64>) -> bool {
        self.rows.iter().all(|r| r.lower <= beta[r.k - 1] && beta[r.k - 1] <= r.upper)
    }
}

/// `β̃_k ± ω̂_kk^{1/2} n^{-1/2} Q*` (studentized) or `β̃_k ± n^{-1/2} Q` (fixed width).
pub fn build_sci(deb: &DebiasedResult, boot: &BootstrapResult) -> Result<SciResult> {
    let n = boot.n;
    let p = deb.beta_tilde.len();
    let root_n = (n as f64).sqrt();
    let mut rows = Vec::with_capacity(boot.g.len());
    for &k in boot.g.indices() {
        if k >= p {
            return Err(Error::Dimension { what: "interval coordinate bound", expected: p, got: k + 1 });
        }
        let half = if boot.studentized {
            deb.s_vec_diag[k].sqrt() * boot.q_star / root_n
        } else {
            boot.q_star / root_n
        };
        let centre = deb.beta_tilde[k];
        let (lower, upper) = (centre - half, centre + half);
        rows.push(SciRow { k: k + 1, beta_tilde: centre, lower, upper, excludes_zero: lower > 0.0 || upper < 0.0 });
    }
    Ok(SciResult { rows, q_star: boot.q_star, n, alpha: boot.alpha, studentized: boot.studentized })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| -> f64 { StandardNormal.sample(&mut rng) })
    }

    #[test]
    fn two_observations_share_a_score() {
        let cfg = LossConfig::epanechnikov(1.0).unwrap();
        let d = Dataset::new(array![[1.0, 2.0], [0.0, -1.0]], array![0.0, 0.0]).unwrap();
        let r = array![0.4, -0.1];
        let agg = pair_scores(&d, &cfg, r.view()).unwrap();
        let g = cfg.loss_prime(0.5);
        let expected = array![1.0, 3.0] * g;
        assert_eq!(agg.s_vec.row(0), expected);
        assert_eq!(agg.s_vec.row(1), expected);
    }

    #[test]
    fn equal_residuals_give_zero_scores() {
        let cfg = LossConfig::epanechnikov(1.0).unwrap();
        let d = Dataset::new(rand_matrix(5, 2, 1), Array1::zeros(5)).unwrap();
        let agg = pair_scores(&d, &cfg, Array1::from_elem(5, 0.7).view()).unwrap();
        assert!(agg.s_vec.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn index_spec_parsing() {
        assert_eq!("all".parse::<IndexSpec>().unwrap().resolve(3).unwrap().indices(), &[0, 1, 2]);
        assert_eq!("2..4".parse::<IndexSpec>().unwrap().resolve(5).unwrap().indices(), &[1, 2, 3]);
        assert_eq!("3, 1".parse::<IndexSpec>().unwrap().resolve(5).unwrap().indices(), &[0, 2]);
        assert!("0..2".parse::<IndexSpec>().is_err());
        assert!("x".parse::<IndexSpec>().is_err());
        assert!("1..9".parse::<IndexSpec>().unwrap().resolve(5).is_err());
        assert_eq!("1..5".parse::<IndexSpec>().unwrap().to_string(), "1..5");
    }

    #[test]
    fn quantile_rank() {
        let draws: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        assert_eq!(upper_quantile(&draws, 0.05), 95.0);
        assert_eq!(upper_quantile(&draws, 0.10), 90.0);
        let odd: Vec<f64> = (1..=300).rev().map(|v| v as f64).collect();
        assert_eq!(upper_quantile(&odd, 0.05), 285.0);
    }

    #[test]
    fn zero_scores_give_zero_quantile() {
        let prec = PrecisionEstimate::from_matrix(Array2::eye(3));
        let agg = PairScoreAggregate { s_vec: Array2::zeros((10, 3)) };
        let boot = bootstrap(&prec, &agg, 10, &IndexSet::all(3), 0.05, 100, true, 1).unwrap();
        assert!(boot.draws.iter().all(|v| *v == 0.0));
        assert_eq!(boot.q_star, 0.0);
    }

    #[test]
    fn argument_validation() {
        let prec = PrecisionEstimate::from_matrix(Array2::eye(2));
        let agg = PairScoreAggregate { s_vec: Array2::ones((4, 2)) };
        let g = IndexSet::all(2);
        assert!(bootstrap(&prec, &agg, 4, &g, 0.05, 99, true, 0).is_err());
        assert!(bootstrap(&prec, &agg, 4, &g, 1.5, 100, true, 0).is_err());
        assert!(bootstrap(&prec, &agg, 5, &g, 0.05, 100, true, 0).is_err());
        let mut w = Array2::<f64>::eye(2);
        w[[1, 1]] = -0.5;
        let bad = PrecisionEstimate::from_matrix(w);
        let err = bootstrap(&bad, &agg, 4, &g, 0.05, 100, true, 0).unwrap_err();
        assert!(matches!(err, Error::NonPositiveDiagonal { coordinate: 2, .. }));
        assert!(bootstrap(&bad, &agg, 4, &g, 0.05, 100, false, 0).is_ok());
    }

    #[test]
    fn fixed_width_and_degenerate_intervals() {
        let deb = DebiasedResult {
            beta_hat: array![1.0, 0.0],
            beta_tilde: array![1.0, 0.1],
            correction: array![0.0, 0.1],
            s_vec_diag: array![4.0, 0.25],
            score: array![0.0, 0.0],
        };
        let mut boot = BootstrapResult {
            draws: vec![2.0; 100],
            q_star: 2.0,
            alpha: 0.05,
            b: 100,
            n: 16,
            g: IndexSet::all(2),
            studentized: false,
            scale: vec![],
        };
        let sci = build_sci(&deb, &boot).unwrap();
        assert!(sci.widths().iter().all(|w| (w - 1.0).abs() < 1e-15));
        assert!(sci.rows[0].excludes_zero && !sci.rows[1].excludes_zero);
        boot.studentized = true;
        let sci = build_sci(&deb, &boot).unwrap();
        assert!((sci.rows[0].upper - sci.rows[0].lower - 2.0).abs() < 1e-15);
        assert!((sci.rows[1].upper - sci.rows[1].lower - 0.5).abs() < 1e-15);
        boot.q_star = 0.0;
        let sci = build_sci(&deb, &boot).unwrap();
        assert!(sci.rows.iter().all(|r| r.lower == r.beta_tilde && r.upper == r.beta_tilde));
    }

    fn brute_perturbed(d: &Dataset, cfg: &LossConfig, r: &Array1<f64>, e: &Array1<f64>) -> Array1<f64> {
        let mut out = Array1::<f64>::zeros(d.p());
        for i in 0..d.n() {
            for j in 0..d.n() {
                if i != j {
                    let g = cfg.loss_prime(r[i] - r[j]) * (e[i] + e[j]);
                    out.scaled_add(g, &(&d.x().row(i) - &d.x().row(j)));
                }
            }
        }
        out
    }

    fn setup(n: usize, p: usize, seed: u64) -> (PrecisionEstimate, PairScoreAggregate) {
        let cfg = LossConfig::epanechnikov(1.0).unwrap();
        let d = Dataset::new(rand_matrix(n, p, seed), Array1::zeros(n)).unwrap();
        let r = rand_matrix(n, 1, seed + 1).column(0).to_owned();
        let agg = pair_scores(&d, &cfg, r.view()).unwrap();
        let mut w = rand_matrix(p, p, seed + 2) * 0.2;
        for k in 0..p {
            w[[k, k]] = 1.0 + 0.5 * k as f64;
        }
        (PrecisionEstimate::from_matrix(w), agg)
    }

    #[test]
    fn quantile_is_monotone_in_alpha_and_index_set() {
        let (prec, agg) = setup(30, 6, 3);
        let g = IndexSet::from_one_based(&[1, 2, 3], 6).unwrap();
        let q: Vec<f64> = [0.01, 0.05, 0.10]
            .iter()
            .map(|&a| bootstrap(&prec, &agg, 30, &g, a, 400, true, 9).unwrap().q_star)
            .collect();
        assert!(q[0] >= q[1] && q[1] >= q[2]);
        let small = bootstrap(&prec, &agg, 30, &g, 0.05, 400, true, 9).unwrap();
        let big = bootstrap(&prec, &agg, 30, &IndexSet::all(6), 0.05, 400, true, 9).unwrap();
        assert!(small.draws.iter().zip(&big.draws).all(|(a, b)| a <= b));
        assert!(small.q_star <= big.q_star);
    }

    #[test]
    fn identical_seeds_are_bit_identical() {
        let (prec, agg) = setup(25, 4, 5);
        let g = IndexSet::all(4);
        let a = bootstrap(&prec, &agg, 25, &g, 0.05, 200, true, 77).unwrap();
        let b = bootstrap(&prec, &agg, 25, &g, 0.05, 200, true, 77).unwrap();
        assert_eq!(a, b);
        let c = bootstrap(&prec, &agg, 25, &g, 0.05, 200, true, 78).unwrap();
        assert_ne!(a.draws, c.draws);
    }

    #[test]
    fn unit_diagonal_makes_modes_agree() {
        let (mut prec, agg) = setup(20, 5, 8);
        for k in 0..5 {
            prec.w_hat[[k, k]] = 1.0;
            prec.w_star[[k, k]] = 1.0;
        }
        let g = IndexSet::all(5);
        let s = bootstrap(&prec, &agg, 20, &g, 0.05, 150, true, 4).unwrap();
        let f = bootstrap(&prec, &agg, 20, &g, 0.05, 150, false, 4).unwrap();
        assert_eq!(s.draws, f.draws);
        assert_eq!(s.q_star, f.q_star);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(50))]

            #[test]
            fn fast_path_matches_double_sum(n in 2usize..12, p in 1usize..5, seed in any::<u64>(), h in 0.2f64..3.0) {
                let cfg = LossConfig::epanechnikov(h).unwrap();
                let d = Dataset::new(rand_matrix(n, p, seed), Array1::zeros(n)).unwrap();
                let r = rand_matrix(n, 1, seed ^ 1).column(0).to_owned() * 2.0;
                let e = rand_matrix(n, 1, seed ^ 2).column(0).to_owned();
                let agg = pair_scores(&d, &cfg, r.view()).unwrap();
                let fast = agg.perturbed_sum(e.view());
                let slow = brute_perturbed(&d, &cfg, &r, &e);
                for (a, b) in fast.iter().zip(slow.iter()) {
                    prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
                }
            }
        }
    }
}
