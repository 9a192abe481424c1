//! The full inference chain: fit, Hessian, precision rows, debiasing, pair
//! scores, bootstrap and intervals. Shared by the command-line tool and the
//! simulation harness.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bootstrap::{self, BootstrapResult, IndexSpec, SciResult};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::LossConfig;
use crate::precision::{self, ClimeOptions, DebiasedResult, HessianEstimate, PrecisionEstimate};
use crate::solver::{self, FitResult, PenaltyFamily, PenaltySpec, SolverOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaSelect {
    Cv,
    Hbic,
    Fixed,
}

impl LambdaSelect {
    /// Cross-validation for the LASSO, HBIC for the folded-concave penalties.
    pub fn default_for(family: PenaltyFamily) -> Self {
        match family {
            PenaltyFamily::Lasso => LambdaSelect::Cv,
            _ => LambdaSelect::Hbic,
        }
    }
}

impl FromStr for LambdaSelect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cv" => Ok(LambdaSelect::Cv),
            "hbic" => Ok(LambdaSelect::Hbic),
            "fixed" => Ok(LambdaSelect::Fixed),
            other => Err(Error::Config(format!("unknown lambda_select `{other}`"))),
        }
    }
}

impl fmt::Display for LambdaSelect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LambdaSelect::Cv => "cv",
            LambdaSelect::Hbic => "hbic",
            LambdaSelect::Fixed => "fixed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub loss: LossConfig,
    pub penalty: PenaltyFamily,
    /// Shape `a`; the family default when absent.
    pub shape: Option<f64>,
    pub l1_radius: Option<f64>,
    /// Required for fixed selection.
    pub lambda: Option<f64>,
    pub lambda_select: LambdaSelect,
    pub folds: usize,
    pub n_lambda: usize,
    pub solver: SolverOptions,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            loss: LossConfig::epanechnikov(1.0).expect("positive bandwidth"),
            penalty: PenaltyFamily::Lasso,
            shape: None,
            l1_radius: None,
            lambda: None,
            lambda_select: LambdaSelect::Cv,
            folds: 10,
            n_lambda: 50,
            solver: SolverOptions::default(),
        }
    }
}

impl FitSettings {
    fn penalty_at(&self, lambda: f64) -> Result<PenaltySpec> {
        let mut pen = PenaltySpec::new(self.penalty, lambda)?;
        if let Some(a) = self.shape {
            pen = pen.with_shape(a)?;
        }
        if let Some(r) = self.l1_radius {
            pen = pen.with_l1_radius(r)?;
        }
        Ok(pen)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootSettings {
    pub b: usize,
    pub alpha: f64,
    pub g: IndexSpec,
    pub studentized: bool,
    pub seed: u64,
}

impl Default for BootSettings {
    fn default() -> Self {
        BootSettings { b: 500, alpha: 0.05, g: IndexSpec::All, studentized: true, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct InferenceSettings {
    pub fit: FitSettings,
    pub clime: ClimeOptions,
    pub boot: BootSettings,
}

/// Wall-clock seconds per stage, in execution order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings(pub Vec<(String, f64)>);

impl StageTimings {
    pub fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage));
        self.0.push((stage.to_string(), start.elapsed().as_secs_f64()));
        out
    }

    pub fn total(&self) -> f64 {
        self.0.iter().map(|(_, s)| s).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedFit {
    pub fit: FitResult,
    pub penalty: PenaltySpec,
    pub selection: LambdaSelect,
    /// Grid searched, when a selector ran.
    pub grid: Option<Vec<f64>>,
}

/// Selects `λ` as configured and fits at the chosen value.
pub fn fit_selected(data: &Dataset, settings: &FitSettings) -> Result<SelectedFit> {
    let cfg = &settings.loss;
    let (lambda, grid) = match settings.lambda_select {
        LambdaSelect::Fixed => {
            let l = settings.lambda.ok_or_else(|| Error::Config("lambda_select = \"fixed\" requires `lambda`".into()))?;
            (l, None)
        }
        sel => {
            let max = solver::lambda_max(data, cfg)?;
            if !(max > 0.0) {
                return Err(Error::Data("gradient at zero vanishes; cannot build a lambda grid".into()));
            }
            let grid = solver::lambda_grid(max, settings.n_lambda, 0.01);
            let template = settings.penalty_at(grid[0])?;
            let l = match sel {
                LambdaSelect::Cv => solver::select_lambda_cv(data, cfg, &template, &grid, settings.folds, &settings.solver)?,
                _ => solver::select_lambda_hbic(data, cfg, &template, &grid, &settings.solver)?,
            };
            (l, Some(grid))
        }
    };
    let penalty = settings.penalty_at(lambda)?;
    let fit = solver::fit(data, cfg, &penalty, &settings.solver)?;
    Ok(SelectedFit { fit, penalty, selection: settings.lambda_select, grid })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceOutput {
    pub fit: SelectedFit,
    pub hessian: HessianEstimate,
    pub precision: PrecisionEstimate,
    pub debiased: DebiasedResult,
    pub bootstrap: BootstrapResult,
    pub sci: SciResult,
    pub timings: StageTimings,
}

/// Runs every stage; a failure is reported with the stage name attached.
pub fn run_inference(data: &Dataset, settings: &InferenceSettings) -> Result<InferenceOutput> {
    let cfg = &settings.fit.loss;
    let mut t = StageTimings::default();
    let g = t.time("index set", || settings.boot.g.resolve(data.p()))?;
    let fit = t.time("fit", || fit_selected(data, &settings.fit))?;
    let residuals = fit.fit.residuals.view();
    let hessian = t.time("hessian", || precision::hessian(data, cfg, residuals))?;
    let precision = t.time("precision", || {
        let gamma = settings.clime.gamma.unwrap_or_else(|| precision::default_gamma(&hessian, data.n(), settings.clime.gamma_scale));
        precision::clime_rows(&hessian, gamma, &settings.clime)
    })?;
    let debiased = t.time("debias", || precision::debias(&fit.fit, &precision, data, cfg))?;
    let scores = t.time("pair scores", || bootstrap::pair_scores(data, cfg, residuals))?;
    let boot = &settings.boot;
    let bootstrap = t.time("bootstrap", || {
        bootstrap::bootstrap(&precision, &scores, data.n(), &g, boot.alpha, boot.b, boot.studentized, boot.seed)
    })?;
    let sci = t.time("intervals", || bootstrap::build_sci(&debiased, &bootstrap))?;
    Ok(InferenceOutput { fit, hessian, precision, debiased, bootstrap, sci, timings: t })
}
