//! Row programs for the sparse inverse-Hessian estimate.
//!
//! Each row solves `min ‖w‖₁ s.t. ‖J w − e_k‖_∞ ≤ γ` as a linear program in
//! standard form with `w = u − v`, `u, v ≥ 0`:
//!
//! ```text
//!   J u − J v + s = e_k + γ1,     s ≥ 0
//!  −J u + J v + t = γ1 − e_k,     t ≥ 0
//! ```
//!
//! The only negative right-hand side is the `k`-th lower row when `γ < 1`, so
//! phase one needs a single artificial variable.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexOptions {
    /// Smallest magnitude accepted as a pivot or a negative reduced cost.
    pub tol: f64,
    /// Pivot limit per phase.
    pub max_iter: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions { tol: 1e-9, max_iter: 20_000 }
    }
}

#[derive(Debug, Clone)]
pub struct RowSolution {
    pub w: Array1<f64>,
    /// `‖J w − e_k‖_∞` recomputed from `w`.
    pub violation: f64,
    pub pivots: usize,
}

struct Tableau {
    /// `m × (cols + 1)`; the last column is the right-hand side.
    t: Array2<f64>,
    basis: Vec<usize>,
    cols: usize,
}

impl Tableau {
    fn rhs(&self, i: usize) -> f64 {
        self.t[[i, self.cols]]
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let width = self.cols + 1;
        let inv = 1.0 / self.t[[row, col]];
        for c in 0..width {
            self.t[[row, c]] *= inv;
        }
        self.t[[row, col]] = 1.0;
        let pivot_row = self.t.row(row).to_owned();
        for r in 0..self.t.nrows() {
            if r == row {
                continue;
            }
            let f = self.t[[r, col]];
            if f == 0.0 {
                continue;
            }
            let mut target = self.t.row_mut(r);
            for c in 0..width {
                target[c] -= f * pivot_row[c];
            }
            target[col] = 0.0;
        }
        self.basis[row] = col;
    }

    fn reduced_costs(&self, cost: &[f64]) -> Vec<f64> {
        let mut d = cost.to_vec();
        for (i, &b) in self.basis.iter().enumerate() {
            let cb = cost[b];
            if cb != 0.0 {
                for (j, dj) in d.iter_mut().enumerate() {
                    *dj -= cb * self.t[[i, j]];
                }
            }
        }
        d
    }

    /// Primal simplex from the current basic feasible solution.
    ///
    /// Entering column by most negative reduced cost; after a run of
    /// degenerate pivots the rule falls back to Bland's to rule out cycling.
    fn optimize(&mut self, cost: &[f64], allowed: &[bool], opts: &SimplexOptions, pivots: &mut usize) -> Result<()> {
        let m = self.t.nrows();
        let mut d = self.reduced_costs(cost);
        let mut degenerate_run = 0usize;
        let mut bland = false;
        for _ in 0..opts.max_iter {
            let entering = if bland {
                (0..self.cols).find(|&j| allowed[j] && d[j] < -opts.tol)
            } else {
                (0..self.cols)
                    .filter(|&j| allowed[j] && d[j] < -opts.tol)
                    .min_by(|&a, &b| d[a].total_cmp(&d[b]))
            };
            let Some(q) = entering else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..m {
                let a = self.t[[i, q]];
                if a > opts.tol {
                    let ratio = self.rhs(i).max(0.0) / a;
                    let better = match leave {
                        None => true,
                        Some((l, best)) => ratio < best || (ratio == best && self.basis[i] < self.basis[l]),
                    };
                    if better {
                        leave = Some((i, ratio));
                    }
                }
            }
            let Some((row, ratio)) = leave else {
                return Err(Error::Data("row program is unbounded".into()));
            };
            if ratio == 0.0 {
                degenerate_run += 1;
                if degenerate_run > 50 {
                    bland = true;
                }
            } else {
                degenerate_run = 0;
            }
            self.pivot(row, q);
            *pivots += 1;
            let dq = d[q];
            for j in 0..self.cols {
                d[j] -= dq * self.t[[row, j]];
            }
            d[q] = 0.0;
        }
        Err(Error::LpIterationLimit { row: usize::MAX, iterations: opts.max_iter })
    }
}

fn constraint_matrix(j: ArrayView2<'_, f64>, k: usize, gamma: f64) -> (Array2<f64>, Array1<f64>, bool) {
    let p = j.nrows();
    let m = 2 * p;
    let flip = gamma < 1.0;
    let cols = 4 * p + 1;
    let mut a = Array2::<f64>::zeros((m, cols));
    let mut b = Array1::<f64>::zeros(m);
    for i in 0..p {
        for c in 0..p {
            let v = j[[i, c]];
            a[[i, c]] = v;
            a[[i, p + c]] = -v;
            a[[p + i, c]] = -v;
            a[[p + i, p + c]] = v;
        }
        a[[i, 2 * p + i]] = 1.0;
        a[[p + i, 3 * p + i]] = 1.0;
        let e = if i == k { 1.0 } else { 0.0 };
        b[i] = e + gamma;
        b[p + i] = gamma - e;
    }
    if flip {
        let r = p + k;
        a.row_mut(r).mapv_inplace(|v| -v);
        b[r] = -b[r];
        a[[r, 4 * p]] = 1.0;
    }
    (a, b, flip)
}

fn violation(j: ArrayView2<'_, f64>, w: &Array1<f64>, k: usize) -> f64 {
    let jw = j.dot(w);
    jw.iter().enumerate().fold(0.0, |m, (i, v)| m.max((v - if i == k { 1.0 } else { 0.0 }).abs()))
}

/// Solves row `k` of the program for a symmetric `j`.
pub fn solve_row(j: ArrayView2<'_, f64>, k: usize, gamma: f64, opts: &SimplexOptions) -> Result<Option<RowSolution>> {
    let p = j.nrows();
    if j.ncols() != p {
        return Err(Error::Dimension { what: "Hessian columns", expected: p, got: j.ncols() });
    }
    if k >= p {
        return Err(Error::Dimension { what: "row index bound", expected: p, got: k });
    }
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    let (a, b, flip) = constraint_matrix(j, k, gamma);
    let m = a.nrows();
    let cols = a.ncols();
    let mut t = Array2::<f64>::zeros((m, cols + 1));
    t.slice_mut(ndarray::s![.., ..cols]).assign(&a);
    t.column_mut(cols).assign(&b);
    let mut basis: Vec<usize> = (0..p).map(|i| 2 * p + i).chain((0..p).map(|i| 3 * p + i)).collect();
    let artificial = 4 * p;
    if flip {
        basis[p + k] = artificial;
    }
    let mut tab = Tableau { t, basis, cols };
    let mut pivots = 0usize;
    let with_row = |e: Error| match e {
        Error::LpIterationLimit { iterations, .. } => Error::LpIterationLimit { row: k + 1, iterations },
        other => other,
    };

    if flip {
        let mut cost = vec![0.0; cols];
        cost[artificial] = 1.0;
        let allowed = vec![true; cols];
        tab.optimize(&cost, &allowed, opts, &mut pivots).map_err(with_row)?;
        let phase_one: f64 = tab.basis.iter().enumerate().filter(|(_, &c)| c == artificial).map(|(i, _)| tab.rhs(i)).sum();
        if phase_one > 1e-9 {
            return Ok(None);
        }
        if let Some(row) = tab.basis.iter().position(|&c| c == artificial) {
            let entering = (0..artificial).filter(|&c| tab.t[[row, c]].abs() > opts.tol).max_by(|&x, &y| tab.t[[row, x]].abs().total_cmp(&tab.t[[row, y]].abs()));
            if let Some(c) = entering {
                tab.pivot(row, c);
                pivots += 1;
            }
        }
    }

    let mut cost = vec![0.0; cols];
    cost[..2 * p].iter_mut().for_each(|c| *c = 1.0);
    let mut allowed = vec![true; cols];
    allowed[artificial] = false;
    tab.optimize(&cost, &allowed, opts, &mut pivots).map_err(with_row)?;

    let read = |tab: &Tableau, values: &dyn Fn(usize) -> f64| {
        let mut w = Array1::<f64>::zeros(p);
        for (i, &c) in tab.basis.iter().enumerate() {
            let v = values(i).max(0.0);
            if c < p {
                w[c] += v;
            } else if c < 2 * p {
                w[c - p] -= v;
            }
        }
        w
    };
    let mut w = read(&tab, &|i| tab.rhs(i));
    let mut viol = violation(j, &w, k);
    if viol > gamma + 1e-10 {
        // Tableau drift: recover the basic solution from the original columns.
        let basis_matrix = a.select(ndarray::Axis(1), &tab.basis);
        if let Some(xb) = linalg::solve(&basis_matrix, &b) {
            let refined = read(&tab, &|i| xb[i]);
            let refined_viol = violation(j, &refined, k);
            if refined_viol < viol {
                w = refined;
                viol = refined_viol;
            }
        }
    }
    Ok(Some(RowSolution { w, violation: viol, pivots }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_rows_shrink_by_gamma() {
        let j = Array2::<f64>::eye(4);
        for k in 0..4 {
            let s = solve_row(j.view(), k, 0.1, &SimplexOptions::default()).unwrap().unwrap();
            for i in 0..4 {
                let expect = if i == k { 0.9 } else { 0.0 };
                assert!((s.w[i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gamma_at_least_one_gives_zero() {
        let j = array![[2.0, 0.3], [0.3, 1.0]];
        let s = solve_row(j.view(), 0, 1.0, &SimplexOptions::default()).unwrap().unwrap();
        assert_eq!(s.w, array![0.0, 0.0]);
    }

    #[test]
    fn singular_matrix_can_be_infeasible() {
        let j = Array2::<f64>::zeros((2, 2));
        assert!(solve_row(j.view(), 0, 0.5, &SimplexOptions::default()).unwrap().is_none());
    }

    #[test]
    fn tiny_gamma_recovers_inverse_row() {
        let j = array![[2.0, 0.5, 0.1], [0.5, 1.5, 0.2], [0.1, 0.2, 1.0]];
        let inv = linalg::inverse(&j).unwrap();
        for k in 0..3 {
            let s = solve_row(j.view(), k, 1e-8, &SimplexOptions::default()).unwrap().unwrap();
            assert!(linalg::max_abs((&s.w - &inv.row(k)).iter().copied()) < 1e-6);
            assert!(s.violation <= 1e-8 + 1e-12);
        }
    }
}
