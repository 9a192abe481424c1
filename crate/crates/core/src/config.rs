//! TOML run configuration. Every section rejects unknown keys.
//!
//! ```toml
//! seed = 7
//! threads = 2
//! standardize = false
//! kernel = "epanechnikov"
//! h = 1.0
//!
//! [solver]
//! penalty = "scad"
//! lambda_select = "hbic"
//!
//! [clime]
//! gamma_scale = 0.2
//!
//! [boot]
//! B = 500
//! alpha = 0.05
//! G = "1..5"
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bootstrap::IndexSpec;
use crate::efficiency::ErrorLaw;
use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelSpec, LossConfig};
use crate::pipeline::{BootSettings, FitSettings, InferenceSettings, LambdaSelect};
use crate::precision::ClimeOptions;
use crate::sim::{default_beta, ErrorKind, Scenario, SigmaKind};
use crate::solver::{PenaltyFamily, SolverOptions};

/// `G` as written in a config file: a string (`"all"`, `"1..5"`, `"1,4,9"`)
/// or an array of 1-based indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IndexSetting {
    Text(String),
    List(Vec<usize>),
}

impl IndexSetting {
    pub fn spec(&self) -> Result<IndexSpec> {
        match self {
            IndexSetting::Text(s) => s.parse(),
            IndexSetting::List(v) => {
                if v.is_empty() || v.contains(&0) {
                    return Err(Error::Config("G must list 1-based indices".into()));
                }
                Ok(IndexSpec::List(v.clone()))
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub penalty: Option<PenaltyFamily>,
    pub lambda: Option<f64>,
    pub a: Option<f64>,
    #[serde(rename = "R")]
    pub r: Option<f64>,
    pub lambda_select: Option<LambdaSelect>,
    pub max_pairs: Option<usize>,
    pub seed: Option<u64>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub folds: Option<usize>,
    pub n_lambda: Option<usize>,
    pub lla_stages: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClimeSection {
    pub gamma: Option<f64>,
    pub gamma_scale: Option<f64>,
    pub clime_tol: Option<f64>,
    pub clime_max_iter: Option<usize>,
    pub dense_fastpath_p_max: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootSection {
    #[serde(rename = "B")]
    pub b: Option<usize>,
    pub alpha: Option<f64>,
    #[serde(rename = "G")]
    pub g: Option<IndexSetting>,
    pub studentized: Option<bool>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaName {
    Toeplitz,
    Banded,
}

/// Scenario fields shared by `[sim]` defaults and `[[scenario]]` entries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub n: Option<usize>,
    pub p: Option<usize>,
    pub sigma: Option<SigmaName>,
    pub rho: Option<f64>,
    pub offdiag: Option<f64>,
    pub error: Option<ErrorKind>,
    pub beta: Option<Vec<f64>>,
    pub reps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AreTargetName {
    Ols,
    Huber,
    Cqr,
    Composite,
}

impl std::str::FromStr for AreTargetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ols" => Ok(AreTargetName::Ols),
            "huber" => Ok(AreTargetName::Huber),
            "cqr" => Ok(AreTargetName::Cqr),
            "composite" => Ok(AreTargetName::Composite),
            other => Err(Error::Config(format!("unknown ARE target `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreSection {
    pub error: Option<ErrorKind>,
    pub target: Option<AreTargetName>,
    pub tau: Option<f64>,
}

/// One `[[scenario]]` table: an id, scenario fields and per-scenario
/// overrides of the run-wide settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioEntry {
    pub id: String,
    pub seed: Option<u64>,
    pub kernel: Option<KernelFamily>,
    pub h: Option<f64>,
    pub n: Option<usize>,
    pub p: Option<usize>,
    pub sigma: Option<SigmaName>,
    pub rho: Option<f64>,
    pub offdiag: Option<f64>,
    pub error: Option<ErrorKind>,
    pub beta: Option<Vec<f64>>,
    pub reps: Option<usize>,
    pub penalty: Option<PenaltyFamily>,
    pub lambda_select: Option<LambdaSelect>,
    pub lambda: Option<f64>,
    #[serde(rename = "B")]
    pub b: Option<usize>,
    pub alpha: Option<f64>,
    #[serde(rename = "G")]
    pub g: Option<IndexSetting>,
    pub studentized: Option<bool>,
    pub gamma: Option<f64>,
    pub gamma_scale: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    #[serde(default)]
    pub standardize: bool,
    pub kernel: Option<KernelFamily>,
    pub h: Option<f64>,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub clime: ClimeSection,
    #[serde(default)]
    pub boot: BootSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub are: AreSection,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scenario: Vec<ScenarioEntry>,
}

/// Environment variable that overrides `threads`.
pub const THREADS_ENV: &str = "CRR_THREADS";

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Worker count: `CRR_THREADS`, then `threads`; `None` leaves the choice
    /// to the runtime.
    pub fn threads(&self) -> Result<Option<usize>> {
        match std::env::var(THREADS_ENV) {
            Ok(v) => {
                let t: usize = v.trim().parse().map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
                if t == 0 {
                    return Err(Error::Config(format!("{THREADS_ENV} must be positive")));
                }
                Ok(Some(t))
            }
            Err(_) => match self.threads {
                Some(0) => Err(Error::Config("threads must be positive".into())),
                t => Ok(t),
            },
        }
    }

    pub fn loss(&self) -> Result<LossConfig> {
        loss_from(self.kernel, self.h)
    }

    pub fn fit_settings(&self) -> Result<FitSettings> {
        let s = &self.solver;
        let defaults = FitSettings::default();
        let penalty = s.penalty.unwrap_or(defaults.penalty);
        let solver = SolverOptions {
            tol: s.tol.unwrap_or(defaults.solver.tol),
            max_iter: s.max_iter.unwrap_or(defaults.solver.max_iter),
            max_pairs: s.max_pairs,
            seed: s.seed.unwrap_or(self.seed()),
            lla_stages: s.lla_stages.unwrap_or(defaults.solver.lla_stages),
        };
        let lambda_select = match (s.lambda_select, s.lambda) {
            (Some(sel), _) => sel,
            (None, Some(_)) => LambdaSelect::Fixed,
            (None, None) => LambdaSelect::default_for(penalty),
        };
        Ok(FitSettings {
            loss: self.loss()?,
            penalty,
            shape: s.a,
            l1_radius: s.r,
            lambda: s.lambda,
            lambda_select,
            folds: s.folds.unwrap_or(defaults.folds),
            n_lambda: s.n_lambda.unwrap_or(defaults.n_lambda),
            solver,
        })
    }

    pub fn clime_options(&self) -> ClimeOptions {
        let c = &self.clime;
        let d = ClimeOptions::default();
        ClimeOptions {
            gamma: c.gamma,
            gamma_scale: c.gamma_scale.unwrap_or(d.gamma_scale),
            tol: c.clime_tol.unwrap_or(d.tol),
            max_iter: c.clime_max_iter.unwrap_or(d.max_iter),
            dense_fastpath_p_max: c.dense_fastpath_p_max.unwrap_or(d.dense_fastpath_p_max),
        }
    }

    pub fn boot_settings(&self) -> Result<BootSettings> {
        let b = &self.boot;
        let d = BootSettings::default();
        Ok(BootSettings {
            b: b.b.unwrap_or(d.b),
            alpha: b.alpha.unwrap_or(d.alpha),
            g: b.g.as_ref().map(IndexSetting::spec).transpose()?.unwrap_or(d.g),
            studentized: b.studentized.unwrap_or(d.studentized),
            seed: b.seed.unwrap_or(self.seed()),
        })
    }

    pub fn inference_settings(&self) -> Result<InferenceSettings> {
        Ok(InferenceSettings { fit: self.fit_settings()?, clime: self.clime_options(), boot: self.boot_settings()? })
    }

    /// Resolves every `[[scenario]]` against `[sim]` and the run-wide sections.
    pub fn scenarios(&self) -> Result<Vec<Scenario>> {
        if self.scenario.is_empty() {
            return Err(Error::Config("no [[scenario]] tables found".into()));
        }
        let mut seen = std::collections::HashSet::new();
        self.scenario
            .iter()
            .map(|e| {
                if e.id.is_empty() || e.id.contains(',') {
                    return Err(Error::Config(format!("scenario id `{}` must be non-empty and contain no commas", e.id)));
                }
                if !seen.insert(e.id.as_str()) {
                    return Err(Error::Config(format!("duplicate scenario id `{}`", e.id)));
                }
                self.scenario_from(e)
            })
            .collect()
    }

    fn scenario_from(&self, e: &ScenarioEntry) -> Result<Scenario> {
        let d = &self.sim;
        let pick = |a: Option<usize>, b: Option<usize>, name: &str| {
            a.or(b).ok_or_else(|| Error::Config(format!("scenario `{}` needs `{name}`", e.id)))
        };
        let n = pick(e.n, d.n, "n")?;
        let p = pick(e.p, d.p, "p")?;
        let sigma = match e.sigma.or(d.sigma).unwrap_or(SigmaName::Toeplitz) {
            SigmaName::Toeplitz => SigmaKind::Toeplitz { rho: e.rho.or(d.rho).unwrap_or(0.5) },
            SigmaName::Banded => SigmaKind::Banded { offdiag: e.offdiag.or(d.offdiag).unwrap_or(0.48) },
        };
        let beta_true = match e.beta.as_ref().or(d.beta.as_ref()) {
            Some(b) => ndarray::Array1::from(b.clone()),
            None => default_beta(p),
        };

        let mut inference = self.inference_settings()?;
        let seed = e.seed.unwrap_or(self.seed());
        if e.kernel.is_some() || e.h.is_some() {
            inference.fit.loss = loss_from(e.kernel.or(self.kernel), e.h.or(self.h))?;
        }
        if let Some(pen) = e.penalty {
            inference.fit.penalty = pen;
            if self.solver.lambda_select.is_none() && e.lambda_select.is_none() {
                inference.fit.lambda_select = LambdaSelect::default_for(pen);
            }
        }
        if let Some(sel) = e.lambda_select {
            inference.fit.lambda_select = sel;
        }
        if let Some(l) = e.lambda {
            inference.fit.lambda = Some(l);
            if e.lambda_select.is_none() {
                inference.fit.lambda_select = LambdaSelect::Fixed;
            }
        }
        let boot = &mut inference.boot;
        boot.b = e.b.or(self.boot.b).unwrap_or(300);
        boot.alpha = e.alpha.unwrap_or(boot.alpha);
        if let Some(g) = &e.g {
            boot.g = g.spec()?;
        }
        boot.studentized = e.studentized.unwrap_or(boot.studentized);
        if e.gamma.is_some() {
            inference.clime.gamma = e.gamma;
        }
        if let Some(c) = e.gamma_scale {
            inference.clime.gamma_scale = c;
        }

        let sc = Scenario {
            id: e.id.clone(),
            n,
            p,
            sigma,
            error: e.error.or(d.error).unwrap_or(ErrorKind::Normal),
            beta_true,
            reps: e.reps.or(d.reps).unwrap_or(200),
            seed,
            inference,
        };
        sc.validate()?;
        Ok(sc)
    }

    pub fn are_law(&self) -> ErrorLaw {
        self.are.error.unwrap_or(ErrorKind::Normal).law()
    }
}

fn loss_from(kernel: Option<KernelFamily>, h: Option<f64>) -> Result<LossConfig> {
    LossConfig::new(KernelSpec::new(kernel.unwrap_or(KernelFamily::Epanechnikov)), h.unwrap_or(1.0))
}
