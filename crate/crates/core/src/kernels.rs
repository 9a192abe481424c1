//! Smoothing kernels and the convoluted rank loss.
//!
//! The loss is `L_h(u) = ∫ |u - v| K_h(v) dv` with `K_h(v) = K(v / h) / h`.
//! Its derivatives have simple forms for every symmetric kernel:
//! `L_h'(u) = ∫_{-u}^{u} K_h(v) dv` and `L_h''(u) = 2 K_h(u)`, so the loss is
//! convex whenever `K ≥ 0`.
//!
//! Every family has a closed form (the Epanechnikov one is the familiar
//! piecewise quartic). The `*_quadrature` methods on [`LossConfig`] evaluate
//! the defining integrals numerically and serve as an independent check.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature;

/// Half-width, in kernel units, beyond which the Gaussian kernel is treated as zero.
pub const GAUSSIAN_TRUNCATION: f64 = 8.0;

/// Absolute tolerance used by the quadrature evaluation path.
pub const QUADRATURE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Epanechnikov,
    Gaussian,
    Biweight,
    Cosine,
}

impl KernelFamily {
    /// Density of the unit-scale kernel.
    fn density(self, t: f64) -> f64 {
        if self != KernelFamily::Gaussian && t.abs() > 1.0 {
            return 0.0;
        }
        match self {
            KernelFamily::Epanechnikov => 0.75 * (1.0 - t * t),
            KernelFamily::Gaussian => (-0.5 * t * t).exp() / (2.0 * PI).sqrt(),
            KernelFamily::Biweight => {
                let s = 1.0 - t * t;
                15.0 / 16.0 * s * s
            }
            KernelFamily::Cosine => PI / 4.0 * (FRAC_PI_2 * t).cos(),
        }
    }

    /// Mass on `[-t, t]` for `t ≥ 0`.
    fn central_mass(self, t: f64) -> f64 {
        if self != KernelFamily::Gaussian && t >= 1.0 {
            return 1.0;
        }
        match self {
            KernelFamily::Epanechnikov => 1.5 * t - 0.5 * t * t * t,
            KernelFamily::Gaussian => libm::erf(t / std::f64::consts::SQRT_2),
            KernelFamily::Biweight => {
                let t2 = t * t;
                15.0 / 8.0 * t * (1.0 - 2.0 * t2 / 3.0 + t2 * t2 / 5.0)
            }
            KernelFamily::Cosine => (FRAC_PI_2 * t).sin(),
        }
    }

    /// `E|t - V|` for `V ~ K`, valid for `t ≥ 0`.
    fn mean_abs_deviation(self, t: f64) -> f64 {
        if self != KernelFamily::Gaussian && t >= 1.0 {
            return t;
        }
        // t * (2F(t) - 1) - 2 ∫_{-∞}^{t} v K(v) dv
        let t2 = t * t;
        match self {
            KernelFamily::Epanechnikov => 0.75 * t2 - 0.125 * t2 * t2 + 0.375,
            KernelFamily::Gaussian => t * self.central_mass(t) + 2.0 * self.density(t),
            KernelFamily::Biweight => {
                let partial = 15.0 / 16.0 * (t2 / 2.0 - t2 * t2 / 2.0 + t2 * t2 * t2 / 6.0 - 1.0 / 6.0);
                t * self.central_mass(t) - 2.0 * partial
            }
            KernelFamily::Cosine => {
                let partial = 0.5 * t * (FRAC_PI_2 * t).sin() + (FRAC_PI_2 * t).cos() / PI - 0.5;
                t * self.central_mass(t) - 2.0 * partial
            }
        }
    }

    pub fn sup_density(self) -> f64 {
        self.density(0.0)
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            KernelFamily::Epanechnikov => "epanechnikov",
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::Biweight => "biweight",
            KernelFamily::Cosine => "cosine",
        };
        f.write_str(name)
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "epanechnikov" => Ok(KernelFamily::Epanechnikov),
            "gaussian" | "normal" => Ok(KernelFamily::Gaussian),
            "biweight" | "quartic" => Ok(KernelFamily::Biweight),
            "cosine" => Ok(KernelFamily::Cosine),
            other => Err(Error::Config(format!("unknown kernel `{other}`"))),
        }
    }
}

/// A symmetric kernel density, optionally rescaled as `K_b(v) = K(v / b) / b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub scale: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily) -> Self {
        KernelSpec { family, scale: 1.0 }
    }

    pub fn with_scale(family: KernelFamily, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Config(format!("kernel scale must be positive, got {scale}")));
        }
        Ok(KernelSpec { family, scale })
    }

    pub fn epanechnikov() -> Self {
        Self::new(KernelFamily::Epanechnikov)
    }

    pub fn gaussian() -> Self {
        Self::new(KernelFamily::Gaussian)
    }

    /// Half-width of the support; `None` for the Gaussian kernel.
    pub fn support(&self) -> Option<f64> {
        match self.family {
            KernelFamily::Gaussian => None,
            _ => Some(self.scale),
        }
    }

    /// Half-width of the region integrated over numerically.
    pub fn effective_support(&self) -> f64 {
        self.support().unwrap_or(GAUSSIAN_TRUNCATION * self.scale)
    }

    pub fn eval(&self, v: f64) -> f64 {
        self.family.density(v / self.scale) / self.scale
    }

    pub fn sup(&self) -> f64 {
        self.family.sup_density() / self.scale
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::epanechnikov()
    }
}

/// `K(v)` for the given kernel.
pub fn kernel_eval(spec: &KernelSpec, v: f64) -> f64 {
    spec.eval(v)
}

/// Kernel and bandwidth defining `L_h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kernel: KernelSpec,
    pub h: f64,
}

impl LossConfig {
    pub fn new(kernel: KernelSpec, h: f64) -> Result<Self> {
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::Config(format!("bandwidth h must be positive, got {h}")));
        }
        Ok(LossConfig { kernel, h })
    }

    pub fn epanechnikov(h: f64) -> Result<Self> {
        Self::new(KernelSpec::epanechnikov(), h)
    }

    /// Bandwidth after folding in the kernel scale.
    #[inline]
    fn width(&self) -> f64 {
        self.h * self.kernel.scale
    }

    /// `K_h(v)`.
    #[inline]
    pub fn kernel_h(&self, v: f64) -> f64 {
        let w = self.width();
        self.kernel.family.density(v / w) / w
    }

    #[inline]
    pub fn loss(&self, u: f64) -> f64 {
        let w = self.width();
        let t = u.abs() / w;
        match self.kernel.family {
            KernelFamily::Epanechnikov => {
                let a = u.abs();
                if a >= w {
                    a
                } else {
                    3.0 * u * u / (4.0 * w) - u.powi(4) / (8.0 * w * w * w) + 3.0 * w / 8.0
                }
            }
            family => w * family.mean_abs_deviation(t),
        }
    }

    #[inline]
    pub fn loss_prime(&self, u: f64) -> f64 {
        let w = self.width();
        let t = u.abs() / w;
        let mass = match self.kernel.family {
            KernelFamily::Epanechnikov if t < 1.0 => 1.5 * t - 0.5 * t * t * t,
            KernelFamily::Epanechnikov => 1.0,
            family => family.central_mass(t),
        };
        if u < 0.0 { -mass } else { mass }
    }

    #[inline]
    pub fn loss_second(&self, u: f64) -> f64 {
        2.0 * self.kernel_h(u)
    }

    /// Loss and first derivative in one evaluation.
    #[inline]
    pub fn loss_and_prime(&self, u: f64) -> (f64, f64) {
        (self.loss(u), self.loss_prime(u))
    }

    /// Upper bound on `L_h''`.
    pub fn curvature_bound(&self) -> f64 {
        2.0 * self.kernel.family.sup_density() / self.width()
    }

    /// Half-width of the kernel support in residual units.
    pub fn support_width(&self) -> f64 {
        self.h * self.kernel.effective_support()
    }

    /// `∫|u - v| K_h(v) dv` evaluated by adaptive quadrature.
    pub fn loss_quadrature(&self, u: f64) -> Result<f64> {
        let half = self.support_width();
        let f = |v: f64| (u - v).abs() * self.kernel_h(v);
        // Split at the kink so each piece is smooth.
        let kink = u.clamp(-half, half);
        let lower = quadrature::integrate(f, -half, kink, 0.5 * QUADRATURE_TOL)?;
        let upper = quadrature::integrate(f, kink, half, 0.5 * QUADRATURE_TOL)?;
        Ok(lower.value + upper.value)
    }

    /// `∫_{-u}^{u} K_h(v) dv` evaluated by adaptive quadrature.
    pub fn loss_prime_quadrature(&self, u: f64) -> Result<f64> {
        let half = self.support_width();
        let a = u.abs().min(half);
        let mass = quadrature::integrate(|v| self.kernel_h(v), -a, a, QUADRATURE_TOL)?.value;
        Ok(if u < 0.0 { -mass } else { mass })
    }
}

pub fn loss(cfg: &LossConfig, u: f64) -> f64 {
    cfg.loss(u)
}

pub fn loss_prime(cfg: &LossConfig, u: f64) -> f64 {
    cfg.loss_prime(u)
}

pub fn loss_second(cfg: &LossConfig, u: f64) -> f64 {
    cfg.loss_second(u)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FAMILIES: [KernelFamily; 4] = [
        KernelFamily::Epanechnikov,
        KernelFamily::Gaussian,
        KernelFamily::Biweight,
        KernelFamily::Cosine,
    ];

    fn epa(h: f64) -> LossConfig {
        LossConfig::epanechnikov(h).unwrap()
    }

    #[test]
    fn kernel_values() {
        assert_eq!(kernel_eval(&KernelSpec::epanechnikov(), 0.0), 0.75);
        assert_eq!(kernel_eval(&KernelSpec::epanechnikov(), 1.5), 0.0);
        let g0 = kernel_eval(&KernelSpec::gaussian(), 0.0);
        assert!((g0 - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-15);
        assert!((g0 - 0.39894).abs() < 1e-5);
    }

    #[test]
    fn kernels_are_symmetric_densities() {
        for family in FAMILIES {
            for scale in [1.0, 1.7] {
                let spec = KernelSpec::with_scale(family, scale).unwrap();
                let half = spec.effective_support();
                let mass = quadrature::integrate(|v| spec.eval(v), -half, half, 1e-12).unwrap().value;
                assert!((mass - 1.0).abs() < 1e-8, "{family} mass {mass}");
                for i in 0..50 {
                    let v = -3.0 + 0.13 * i as f64;
                    assert!(spec.eval(v) >= 0.0);
                    assert_eq!(spec.eval(v), spec.eval(-v));
                    assert!(spec.eval(v) <= spec.sup());
                }
            }
        }
    }

    #[test]
    fn rejects_nonpositive_bandwidth() {
        assert!(LossConfig::epanechnikov(0.0).is_err());
        assert!(LossConfig::epanechnikov(-1.0).is_err());
        assert!(LossConfig::epanechnikov(f64::NAN).is_err());
        assert!(KernelSpec::with_scale(KernelFamily::Cosine, 0.0).is_err());
    }

    #[test]
    fn epanechnikov_loss_examples() {
        let cfg = epa(1.0);
        assert_eq!(cfg.loss(0.0), 0.375);
        assert_eq!(cfg.loss(2.0), 2.0);
        assert_eq!(cfg.loss(1.0), 1.0);
        assert_eq!(cfg.loss(-2.0), 2.0);
    }

    #[test]
    fn epanechnikov_loss_prime_examples() {
        let cfg = epa(1.0);
        assert_eq!(cfg.loss_prime(0.0), 0.0);
        assert_eq!(cfg.loss_prime(1.0), 1.0);
        assert_eq!(cfg.loss_prime(3.5), 1.0);
        assert_eq!(cfg.loss_prime(0.5), 0.6875);
        let quad = cfg.loss_prime_quadrature(0.5).unwrap();
        assert!((quad - 0.6875).abs() < 1e-12);
    }

    #[test]
    fn epanechnikov_loss_second_examples() {
        assert_eq!(epa(1.0).loss_second(0.0), 1.5);
        assert_eq!(epa(1.0).loss_second(2.0), 0.0);
        assert_eq!(epa(2.0).loss_second(0.0), 0.75);
    }

    #[test]
    fn closed_forms_match_quadrature_for_every_family() {
        for family in FAMILIES {
            for h in [0.25, 1.0, 2.0] {
                let cfg = LossConfig::new(KernelSpec::new(family), h).unwrap();
                for i in 0..=60 {
                    let u = -3.0 * h + 0.1 * h * i as f64;
                    let l = cfg.loss_quadrature(u).unwrap();
                    let lp = cfg.loss_prime_quadrature(u).unwrap();
                    assert!((cfg.loss(u) - l).abs() < 1e-8, "{family} h={h} u={u}");
                    assert!((cfg.loss_prime(u) - lp).abs() < 1e-8, "{family} h={h} u={u}");
                }
            }
        }
    }

    #[test]
    fn loss_approaches_absolute_value_as_bandwidth_vanishes() {
        for family in FAMILIES {
            let cfg = LossConfig::new(KernelSpec::new(family), 1e-3).unwrap();
            for u in [-2.0, -0.5, -0.1, 0.1, 0.7, 3.0] {
                assert!((cfg.loss(u) - f64::abs(u)).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn finite_differences_match_derivatives() {
        let delta = 1e-5;
        for family in FAMILIES {
            for scale in [1.0, 1.5] {
                let spec = KernelSpec::with_scale(family, scale).unwrap();
                let cfg = LossConfig::new(spec, 0.8).unwrap();
                for i in 0..40 {
                    let u = -2.0 + 0.1037 * i as f64;
                    let d1 = (cfg.loss(u + delta) - cfg.loss(u - delta)) / (2.0 * delta);
                    assert!((d1 - cfg.loss_prime(u)).abs() < 1e-7, "{family} u={u}");
                    let d2 = (cfg.loss_prime(u + delta) - cfg.loss_prime(u - delta)) / (2.0 * delta);
                    assert!((d2 - cfg.loss_second(u)).abs() < 1e-5, "{family} u={u}");
                }
            }
        }
    }

    #[test]
    fn parses_family_names() {
        assert_eq!("Epanechnikov".parse::<KernelFamily>().unwrap(), KernelFamily::Epanechnikov);
        assert_eq!("gaussian".parse::<KernelFamily>().unwrap(), KernelFamily::Gaussian);
        assert!("triangle".parse::<KernelFamily>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn family() -> impl Strategy<Value = KernelFamily> {
            prop::sample::select(FAMILIES.to_vec())
        }

        proptest! {
            #[test]
            fn derivative_bounds(f in family(), h in 0.05f64..5.0, u in -20.0f64..20.0) {
                let cfg = LossConfig::new(KernelSpec::new(f), h).unwrap();
                prop_assert!(cfg.loss_prime(u).abs() <= 1.0);
                prop_assert!(cfg.loss_second(u) >= 0.0);
                prop_assert!(cfg.loss(u) >= 0.0);
            }

            #[test]
            fn loss_is_even_and_prime_is_odd(f in family(), h in 0.05f64..5.0, u in -20.0f64..20.0) {
                let cfg = LossConfig::new(KernelSpec::new(f), h).unwrap();
                prop_assert_eq!(cfg.loss(u), cfg.loss(-u));
                prop_assert_eq!(cfg.loss_prime(u), -cfg.loss_prime(-u));
            }
        }
    }
}
