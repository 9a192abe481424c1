use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

/// Tolerance for the standardized-moments check.
pub const STANDARDIZE_TOL: f64 = 1e-8;

/// Design matrix (rows are observations) and response.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Array2<f64>,
    y: Array1<f64>,
    standardized: bool,
    names: Vec<String>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Array1<f64>) -> Result<Self> {
        let names = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        Self::with_names(x, y, names)
    }

    pub fn with_names(x: Array2<f64>, y: Array1<f64>, names: Vec<String>) -> Result<Self> {
        let (n, p) = x.dim();
        if y.len() != n {
            return Err(Error::Dimension { what: "response length", expected: n, got: y.len() });
        }
        if names.len() != p {
            return Err(Error::Dimension { what: "column names", expected: p, got: names.len() });
        }
        if n < 2 {
            return Err(Error::Data(format!("need at least 2 observations, got {n}")));
        }
        if p < 1 {
            return Err(Error::Data("need at least one predictor".into()));
        }
        if let Some(((i, j), v)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite predictor {v} at row {}, column {}", i + 1, j + 1)));
        }
        if let Some((i, v)) = y.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite response {v} at row {}", i + 1)));
        }
        Ok(Dataset { x, y, standardized: false, names })
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn y(&self) -> &Array1<f64> {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn is_standardized(&self) -> bool {
        self.standardized
    }

    /// `Y - X beta`.
    pub fn residuals(&self, beta: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check_beta(beta.len())?;
        Ok(&self.y - &self.x.dot(&beta))
    }

    pub(crate) fn check_beta(&self, len: usize) -> Result<()> {
        if len != self.p() {
            return Err(Error::Dimension { what: "coefficient vector", expected: self.p(), got: len });
        }
        Ok(())
    }

    pub(crate) fn check_residuals(&self, len: usize) -> Result<()> {
        if len != self.n() {
            return Err(Error::Dimension { what: "residual vector", expected: self.n(), got: len });
        }
        Ok(())
    }

    /// Centers every column of `X` and `Y` and scales it to unit sample variance.
    pub fn standardize(&self) -> Result<Dataset> {
        let n = self.n() as f64;
        let mut x = self.x.clone();
        for (j, mut col) in x.axis_iter_mut(Axis(1)).enumerate() {
            let (mean, sd) = moments(col.view());
            if !(sd > 0.0) {
                return Err(Error::Data(format!("column \"{}\" is constant; cannot standardize", self.names[j])));
            }
            col.mapv_inplace(|v| (v - mean) / sd);
        }
        let (mean, sd) = moments(self.y.view());
        if !(sd > 0.0) {
            return Err(Error::Data("response is constant; cannot standardize".into()));
        }
        let y = self.y.mapv(|v| (v - mean) / sd);
        debug_assert!(n >= 2.0);
        Ok(Dataset { x, y, standardized: true, names: self.names.clone() })
    }

    /// Whether every column and the response have mean 0 and variance 1.
    pub fn check_standardized(&self) -> bool {
        let ok = |v: ArrayView1<'_, f64>| {
            let (m, sd) = moments(v);
            m.abs() < STANDARDIZE_TOL && (sd * sd - 1.0).abs() < STANDARDIZE_TOL
        };
        self.x.axis_iter(Axis(1)).all(ok) && ok(self.y.view())
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Dataset> {
        let x = self.x.select(Axis(0), rows);
        let y = self.y.select(Axis(0), rows);
        let mut out = Dataset::with_names(x, y, self.names.clone())?;
        out.standardized = false;
        Ok(out)
    }

    pub fn select_columns(&self, cols: &[usize]) -> Result<Dataset> {
        let x = self.x.select(Axis(1), cols);
        let names = cols.iter().map(|&j| self.names[j].clone()).collect();
        Dataset::with_names(x, self.y.clone(), names)
    }

    /// Same observations with `c` added to every response.
    pub fn shift_response(&self, c: f64) -> Dataset {
        Dataset { y: self.y.mapv(|v| v + c), standardized: false, ..self.clone() }
    }
}

/// Sample mean and standard deviation (denominator `n - 1`).
pub fn moments(v: ArrayView1<'_, f64>) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.sum() / n;
    let ss: f64 = v.iter().map(|a| (a - mean) * (a - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}
