//! Asymptotic relative efficiency of the debiased estimator.
//!
//! Every ratio is built from two scalars of the error law `f`:
//!
//! ```text
//! numerator   = E[m(ε)²],          m(e) = E L_h′(e − ε') = 2∫F(e − v)K_h(v)dv − 1
//! denominator = E L_h″(ε − ε')  = 2∫K_h(v) g(v) dv,   g = density of ε − ε'
//! ```
//!
//! and a target-specific factor, so that `ARE = factor · denominator² / numerator`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Cauchy, Distribution, Normal};
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::kernels::LossConfig;
use crate::quadrature;

/// Bandwidth at which `h → 0` limits are checked numerically.
pub const LIMIT_H: f64 = 1e-3;
/// Absolute tolerance for each quadrature level.
pub const LEVEL_TOL: f64 = 1e-8;

type Density = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type Sampler = Arc<dyn Fn(&mut ChaCha8Rng) -> f64 + Send + Sync>;

/// A user-supplied error law.
#[derive(Clone)]
pub struct CustomLaw {
    pub name: String,
    pub density: Density,
    pub sampler: Sampler,
    pub cdf: Option<Density>,
    /// Whether `E ε²` exists; declared, never inferred.
    pub finite_variance: bool,
}

impl CustomLaw {
    pub fn new(
        name: impl Into<String>,
        density: impl Fn(f64) -> f64 + Send + Sync + 'static,
        sampler: impl Fn(&mut ChaCha8Rng) -> f64 + Send + Sync + 'static,
        finite_variance: bool,
    ) -> Self {
        CustomLaw { name: name.into(), density: Arc::new(density), sampler: Arc::new(sampler), cdf: None, finite_variance }
    }

    pub fn with_cdf(mut self, cdf: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.cdf = Some(Arc::new(cdf));
        self
    }
}

#[derive(Clone)]
pub enum ErrorLaw {
    Normal { sigma: f64 },
    /// `(1 − weight)·N(0, σ₁²) + weight·N(0, σ₂²)`.
    Mixture { weight: f64, sigma1: f64, sigma2: f64 },
    Cauchy { scale: f64 },
    Custom(CustomLaw),
}

impl fmt::Debug for ErrorLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ErrorLaw::Normal { sigma } => write!(f, "Normal(sigma={sigma})"),
            ErrorLaw::Mixture { weight, sigma1, sigma2 } => write!(f, "Mixture(weight={weight}, sigma1={sigma1}, sigma2={sigma2})"),
            ErrorLaw::Cauchy { scale } => write!(f, "Cauchy(scale={scale})"),
            ErrorLaw::Custom(c) => write!(f, "Custom({})", c.name),
        }
    }
}

fn normal_pdf(x: f64, s: f64) -> f64 {
    let z = x / s;
    (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
}

fn normal_cdf(x: f64, s: f64) -> f64 {
    0.5 * libm::erfc(-x / (s * std::f64::consts::SQRT_2))
}

fn cauchy_pdf(x: f64, s: f64) -> f64 {
    s / (std::f64::consts::PI * (s * s + x * x))
}

impl ErrorLaw {
    pub fn standard_normal() -> Self {
        ErrorLaw::Normal { sigma: 1.0 }
    }

    pub fn standard_cauchy() -> Self {
        ErrorLaw::Cauchy { scale: 1.0 }
    }

    /// `0.95·N(0, 1) + 0.05·N(0, 100²)`.
    pub fn contaminated_normal() -> Self {
        ErrorLaw::Mixture { weight: 0.05, sigma1: 1.0, sigma2: 100.0 }
    }

    pub fn name(&self) -> String {
        match self {
            ErrorLaw::Normal { .. } => "normal".into(),
            ErrorLaw::Mixture { .. } => "mixture".into(),
            ErrorLaw::Cauchy { .. } => "cauchy".into(),
            ErrorLaw::Custom(c) => c.name.clone(),
        }
    }

    /// Checks parameters, and for custom laws that the density is a
    /// nonnegative function integrating to one (to `1e-6`).
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, what: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} must be positive, got {v}")))
            }
        };
        match self {
            ErrorLaw::Normal { sigma } => positive(*sigma, "sigma"),
            ErrorLaw::Cauchy { scale } => positive(*scale, "Cauchy scale"),
            ErrorLaw::Mixture { weight, sigma1, sigma2 } => {
                positive(*sigma1, "sigma1")?;
                positive(*sigma2, "sigma2")?;
                if !(0.0..=1.0).contains(weight) {
                    return Err(Error::Config(format!("mixture weight must lie in [0, 1], got {weight}")));
                }
                Ok(())
            }
            ErrorLaw::Custom(c) => {
                let mut negative = None;
                let mass = quadrature::integrate_real_line(
                    |x| {
                        let v = (c.density)(x);
                        if v < 0.0 && negative.is_none() {
                            negative = Some(x);
                        }
                        v
                    },
                    0.0,
                    1e-9,
                )?;
                if let Some(x) = negative {
                    return Err(Error::Config(format!("density of `{}` is negative at {x}", c.name)));
                }
                if (mass.value - 1.0).abs() > 1e-6 {
                    return Err(Error::Config(format!("density of `{}` integrates to {}", c.name, mass.value)));
                }
                Ok(())
            }
        }
    }

    pub fn density(&self, x: f64) -> f64 {
        match self {
            ErrorLaw::Normal { sigma } => normal_pdf(x, *sigma),
            ErrorLaw::Mixture { weight, sigma1, sigma2 } => (1.0 - weight) * normal_pdf(x, *sigma1) + weight * normal_pdf(x, *sigma2),
            ErrorLaw::Cauchy { scale } => cauchy_pdf(x, *scale),
            ErrorLaw::Custom(c) => (c.density)(x),
        }
    }

    /// Closed-form CDF where available.
    pub fn cdf(&self, x: f64) -> Option<f64> {
        match self {
            ErrorLaw::Normal { sigma } => Some(normal_cdf(x, *sigma)),
            ErrorLaw::Mixture { weight, sigma1, sigma2 } => Some((1.0 - weight) * normal_cdf(x, *sigma1) + weight * normal_cdf(x, *sigma2)),
            ErrorLaw::Cauchy { scale } => Some(0.5 + (x / scale).atan() / std::f64::consts::PI),
            ErrorLaw::Custom(c) => c.cdf.as_ref().map(|f| f(x)),
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            ErrorLaw::Normal { sigma } => Normal::new(0.0, *sigma).expect("validated sigma").sample(rng),
            ErrorLaw::Mixture { weight, sigma1, sigma2 } => {
                let s = if rng.random::<f64>() < *weight { *sigma2 } else { *sigma1 };
                Normal::new(0.0, s).expect("validated sigma").sample(rng)
            }
            ErrorLaw::Cauchy { scale } => Cauchy::new(0.0, *scale).expect("validated scale").sample(rng),
            ErrorLaw::Custom(c) => (c.sampler)(rng),
        }
    }

    /// Smallest natural length scale of the law.
    pub fn scale(&self) -> f64 {
        match self {
            ErrorLaw::Normal { sigma } => *sigma,
            ErrorLaw::Mixture { sigma1, sigma2, .. } => sigma1.min(*sigma2),
            ErrorLaw::Cauchy { scale } => *scale,
            ErrorLaw::Custom(_) => 1.0,
        }
    }

    fn is_symmetric(&self) -> bool {
        !matches!(self, ErrorLaw::Custom(_))
    }

    /// `E ε²`, or `None` when it does not exist.
    pub fn second_moment(&self) -> Result<Option<f64>> {
        Ok(match self {
            ErrorLaw::Normal { sigma } => Some(sigma * sigma),
            ErrorLaw::Mixture { weight, sigma1, sigma2 } => Some((1.0 - weight) * sigma1 * sigma1 + weight * sigma2 * sigma2),
            ErrorLaw::Cauchy { .. } => None,
            ErrorLaw::Custom(c) if c.finite_variance => {
                Some(quadrature::integrate_real_line(|x| x * x * (c.density)(x), 0.0, LEVEL_TOL)?.value)
            }
            ErrorLaw::Custom(_) => None,
        })
    }

    /// Density of `ε − ε'` for independent copies.
    pub fn difference_density(&self, x: f64) -> Result<f64> {
        Ok(match self {
            ErrorLaw::Normal { sigma } => normal_pdf(x, sigma * std::f64::consts::SQRT_2),
            ErrorLaw::Cauchy { scale } => cauchy_pdf(x, 2.0 * scale),
            ErrorLaw::Mixture { weight, sigma1, sigma2 } => {
                let comps = [(1.0 - weight, *sigma1), (*weight, *sigma2)];
                let mut total = 0.0;
                for &(wa, sa) in &comps {
                    for &(wb, sb) in &comps {
                        total += wa * wb * normal_pdf(x, (sa * sa + sb * sb).sqrt());
                    }
                }
                total
            }
            ErrorLaw::Custom(c) => quadrature::integrate_real_line(|y| (c.density)(y) * (c.density)(y + x), 0.0, LEVEL_TOL)?.value,
        })
    }

    /// `∫ f²`, which equals the difference density at zero.
    pub fn integrated_square(&self) -> Result<f64> {
        self.difference_density(0.0)
    }
}

/// `m(e) = E L_h′(e − ε)`.
pub fn projection(law: &ErrorLaw, cfg: &LossConfig, e: f64) -> Result<f64> {
    let half = cfg.support_width();
    if law.cdf(0.0).is_some() {
        let inner = quadrature::integrate(
            |v| law.cdf(e - v).expect("closed-form cdf") * cfg.kernel_h(v),
            -half,
            half,
            0.1 * LEVEL_TOL,
        )?;
        Ok(2.0 * inner.value - 1.0)
    } else {
        let est = quadrature::integrate_real_line(|y| cfg.loss_prime(e - y) * law.density(y), e, 0.1 * LEVEL_TOL)?;
        Ok(est.value)
    }
}

/// `(E[m(ε)²], E L_h″(ε − ε'))`.
pub fn variance_scalar(law: &ErrorLaw, cfg: &LossConfig) -> Result<(f64, f64)> {
    law.validate()?;
    let half = cfg.support_width();
    let mut g_err = None;
    let den = quadrature::integrate(
        |v| match law.difference_density(v) {
            Ok(g) => 2.0 * cfg.kernel_h(v) * g,
            Err(e) => {
                g_err.get_or_insert(e);
                0.0
            }
        },
        -half,
        half,
        LEVEL_TOL,
    )?;
    if let Some(e) = g_err {
        return Err(e);
    }

    let mut inner_err = None;
    let mut integrand = |e: f64| match projection(law, cfg, e) {
        Ok(m) => m * m * law.density(e),
        Err(err) => {
            inner_err.get_or_insert(err);
            0.0
        }
    };
    let num = if law.is_symmetric() {
        2.0 * quadrature::integrate_upper(&mut integrand, 0.0, 0.5 * LEVEL_TOL)?.value
    } else {
        quadrature::integrate_real_line(&mut integrand, 0.0, LEVEL_TOL)?.value
    };
    if let Some(e) = inner_err {
        return Err(e);
    }
    Ok((num, den.value))
}

/// A ratio that may be infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AreValue {
    Finite(f64),
    Infinite,
}

impl AreValue {
    pub fn value(self) -> f64 {
        match self {
            AreValue::Finite(v) => v,
            AreValue::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, AreValue::Infinite)
    }
}

impl fmt::Display for AreValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AreValue::Finite(v) => write!(f, "{v:.6}"),
            AreValue::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for AreValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            AreValue::Finite(v) => s.serialize_f64(*v),
            AreValue::Infinite => s.serialize_str("inf"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AreTarget {
    Ols,
    Huber { tau: f64 },
    Cqr,
    Composite,
}

impl fmt::Display for AreTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AreTarget::Ols => f.write_str("ols"),
            AreTarget::Huber { tau } => write!(f, "huber(tau={tau})"),
            AreTarget::Cqr => f.write_str("cqr"),
            AreTarget::Composite => f.write_str("composite"),
        }
    }
}

/// Finite-bandwidth evaluation near zero, with a Richardson extrapolation
/// from `h` and `h/2` assuming an `O(h²)` error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SmallBandwidthCheck {
    pub h: f64,
    pub value: f64,
    pub half_h_value: f64,
    pub extrapolated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AreReport {
    pub target: AreTarget,
    pub law: String,
    pub h_used: f64,
    /// `E[E{L_h′(ε_i − ε_j) | ε_i}]²`.
    pub numerator: f64,
    /// `{E L_h″(ε_i − ε_j)}²`.
    pub denominator_sq: f64,
    /// Target-specific factor; infinite when the competitor's variance is undefined.
    pub factor: AreValue,
    /// The ratio at `h_used` (the limit itself for `cqr`).
    pub are_value: AreValue,
    /// Closed-form `h → 0` limit.
    pub limit: Option<AreValue>,
    pub small_h: Option<SmallBandwidthCheck>,
}

fn ratio(factor: AreValue, den: f64, num: f64) -> AreValue {
    match factor {
        AreValue::Infinite => AreValue::Infinite,
        AreValue::Finite(c) => AreValue::Finite(c * den * den / num),
    }
}

fn small_h_check(law: &ErrorLaw, cfg: &LossConfig, factor: f64) -> Result<SmallBandwidthCheck> {
    let at = |h: f64| -> Result<f64> {
        let c = LossConfig::new(cfg.kernel, h)?;
        let (num, den) = variance_scalar(law, &c)?;
        Ok(factor * den * den / num)
    };
    let value = at(LIMIT_H)?;
    let half_h_value = at(0.5 * LIMIT_H)?;
    Ok(SmallBandwidthCheck { h: LIMIT_H, value, half_h_value, extrapolated: (4.0 * half_h_value - value) / 3.0 })
}

fn report(law: &ErrorLaw, cfg: &LossConfig, target: AreTarget, factor: AreValue, limit: Option<AreValue>) -> Result<AreReport> {
    let (num, den) = variance_scalar(law, cfg)?;
    let small_h = match (factor, limit) {
        (AreValue::Finite(c), Some(_)) => Some(small_h_check(law, cfg, c)?),
        _ => None,
    };
    Ok(AreReport {
        target,
        law: law.name(),
        h_used: cfg.h,
        numerator: num,
        denominator_sq: den * den,
        factor,
        are_value: ratio(factor, den, num),
        limit,
        small_h,
    })
}

/// Against the least-squares debiased estimator: factor `E ε²`.
pub fn are_vs_ols(law: &ErrorLaw, cfg: &LossConfig) -> Result<AreReport> {
    let (factor, limit) = match law.second_moment()? {
        Some(m2) => {
            let f2 = law.integrated_square()?;
            (AreValue::Finite(m2), Some(AreValue::Finite(12.0 * f2 * f2 * m2)))
        }
        None => (AreValue::Infinite, Some(AreValue::Infinite)),
    };
    report(law, cfg, AreTarget::Ols, factor, limit)
}

/// Integrates over `[-t, t]` split at `±scale·2^k`, so that no single panel is
/// wide enough to step over the bulk of the density.
fn integrate_symmetric_range(f: impl Fn(f64) -> f64, t: f64, scale: f64, tol: f64) -> Result<f64> {
    let mut breaks = vec![0.0];
    let mut b = scale;
    while b < t {
        breaks.push(b);
        b *= 2.0;
    }
    breaks.push(t);
    let piece_tol = tol / (2 * breaks.len()) as f64;
    let mut total = 0.0;
    for w in breaks.windows(2) {
        total += quadrature::integrate(&f, w[0], w[1], piece_tol)?.value;
        total += quadrature::integrate(&f, -w[1], -w[0], piece_tol)?.value;
    }
    Ok(total)
}

/// `Ψ_τ(u) = sign(u)·min(|u|, τ)`; returns `(E Ψ², E Ψ′)`.
pub fn huber_moments(law: &ErrorLaw, tau: f64) -> Result<(f64, f64)> {
    let scale = law.scale();
    let inside = integrate_symmetric_range(|x| law.density(x), tau, scale, 0.1 * LEVEL_TOL)?;
    let second = integrate_symmetric_range(|x| x * x * law.density(x), tau, scale, 0.1 * LEVEL_TOL)?;
    let outside = (1.0 - inside).max(0.0);
    Ok((second + tau * tau * outside, inside))
}

/// Against the debiased Huber estimator with threshold `tau`.
pub fn are_vs_huber(law: &ErrorLaw, cfg: &LossConfig, tau: f64) -> Result<AreReport> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    law.validate()?;
    let (psi2, dpsi) = huber_moments(law, tau)?;
    let factor = psi2 / (dpsi * dpsi);
    let f2 = law.integrated_square()?;
    let limit = AreValue::Finite(12.0 * f2 * f2 * factor);
    report(law, cfg, AreTarget::Huber { tau }, AreValue::Finite(factor), Some(limit))
}

/// Against convoluted median regression; only the `h → 0` limit
/// `3(∫f²)²/f(0)²` is available.
pub fn are_vs_cqr(law: &ErrorLaw, cfg: &LossConfig) -> Result<AreReport> {
    law.validate()?;
    let f0 = law.density(0.0);
    if !(f0 > 0.0) {
        return Err(Error::Data(format!("error density vanishes at zero (f(0) = {f0}); the limit is undefined")));
    }
    let f2 = law.integrated_square()?;
    let limit = AreValue::Finite(3.0 * f2 * f2 / (f0 * f0));
    let (num, den) = variance_scalar(law, cfg)?;
    Ok(AreReport {
        target: AreTarget::Cqr,
        law: law.name(),
        h_used: cfg.h,
        numerator: num,
        denominator_sq: den * den,
        factor: AreValue::Finite(f64::NAN),
        are_value: limit,
        limit: Some(limit),
        small_h: None,
    })
}

/// Against composite quantile regression with infinitely many levels:
/// factor `1 / (12 (∫f²)²)`, limit 1.
pub fn are_vs_composite(law: &ErrorLaw, cfg: &LossConfig) -> Result<AreReport> {
    law.validate()?;
    let f2 = law.integrated_square()?;
    let factor = 1.0 / (12.0 * f2 * f2);
    report(law, cfg, AreTarget::Composite, AreValue::Finite(factor), Some(AreValue::Finite(1.0)))
}
