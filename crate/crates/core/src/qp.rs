//! Euclidean projection onto `{x >= 0, A x <= b}` with `b >= 0`, by the dual
//! active-set method of Goldfarb and Idnani specialised to an identity Hessian.
//!
//! The iterate starts at the unconstrained minimizer `y` and repeatedly adds
//! the most violated constraint, dropping active ones whose multipliers would
//! turn negative. Every full step strictly increases the dual objective, so
//! degenerate vertices cannot cause cycling, and a constraint whose normal
//! lies in the span of the active set is never added.
//!
//! Projection of `eps * c` equals the maximizer of `c.x - |x|^2 / (2 eps)`
//! over the same polytope, which is how both the regularized load-balancing
//! QP and (for large `eps`) the myopic LP are solved.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("right-hand side b[{row}] = {value} is negative; the origin must be feasible")]
    InfeasibleOrigin { row: usize, value: f64 },
    #[error("working set became rank deficient after {iterations} iterations")]
    RankDeficient { iterations: usize },
    #[error("active-set iteration limit {0} reached")]
    IterationLimit(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub x: Vec<f64>,
    /// Multipliers of the general rows (zero for inactive rows).
    pub row_multipliers: Vec<f64>,
    pub iterations: usize,
}

/// Dense `m x n` constraint system `A x <= b`.
#[derive(Debug, Clone)]
pub struct Polytope {
    pub a: DMatrix<f64>,
    pub b: Vec<f64>,
}

impl Polytope {
    pub fn new(a: DMatrix<f64>, b: Vec<f64>) -> Result<Self, QpError> {
        if a.nrows() != b.len() {
            return Err(QpError::Shape(format!("A has {} rows, b has {}", a.nrows(), b.len())));
        }
        if let Some((row, &value)) = b.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
            return Err(QpError::InfeasibleOrigin { row, value });
        }
        Ok(Self { a, b })
    }

    pub fn n_vars(&self) -> usize {
        self.a.ncols()
    }

    /// Largest violation of `A x <= b` and `x >= 0`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        let ax = &self.a * &xv;
        let rows = (0..self.b.len()).map(|i| ax[i] - self.b[i]);
        let bounds = x.iter().map(|v| -v);
        rows.chain(bounds).fold(0.0, f64::max)
    }

    pub fn project(&self, y: &[f64]) -> Result<Projection, QpError> {
        let (m, n) = (self.a.nrows(), self.a.ncols());
        if y.len() != n {
            return Err(QpError::Shape(format!("point has {} entries, A has {n} columns", y.len())));
        }
        let max_iters = 10 * (n + m) + 100;
        // constraint j reads n_j . x >= r_j: rows as -a_i . x >= -b_i, bounds as x_k >= 0
        let normal = |j: usize| -> DVector<f64> {
            if j < m {
                -self.a.row(j).transpose()
            } else {
                DVector::from_fn(n, |k, _| if k == j - m { 1.0 } else { 0.0 })
            }
        };
        let rhs = |j: usize| if j < m { -self.b[j] } else { 0.0 };
        let norms: Vec<f64> = (0..m + n).map(|j| normal(j).norm()).collect();

        let mut x = DVector::from_column_slice(y);
        let mut active: Vec<usize> = Vec::new();
        let mut u: Vec<f64> = Vec::new();
        let mut iterations = 0;
        // constraints shown redundant given the current active set
        let mut implied: Vec<usize> = Vec::new();

        loop {
            // most violated constraint, measured in distance
            let mut worst: Option<(usize, f64)> = None;
            let x_scale = 1.0 + x.amax();
            for j in (0..m + n).filter(|j| !active.contains(j) && !implied.contains(j) && norms[*j] > 0.0) {
                let slack = (normal(j).dot(&x) - rhs(j)) / norms[j];
                let tol = FEAS_TOL * (x_scale + rhs(j).abs() / norms[j]);
                if slack < -tol && worst.is_none_or(|(_, w)| slack < w) {
                    worst = Some((j, slack));
                }
            }
            let Some((p, _)) = worst else { break };
            let np = normal(p);
            let mut up = 0.0;

            loop {
                iterations += 1;
                if iterations > max_iters {
                    return Err(QpError::IterationLimit(max_iters));
                }
                let (z, r) = self.split(&active, &np, &normal).ok_or(QpError::RankDeficient { iterations })?;
                // partial step: largest move keeping active multipliers non-negative
                let mut t1 = f64::INFINITY;
                let mut drop = None;
                for (k, &rk) in r.iter().enumerate() {
                    if rk > 0.0 && u[k] / rk < t1 {
                        t1 = u[k] / rk;
                        drop = Some(k);
                    }
                }
                // full step: makes constraint p active
                let zn = z.dot(&np);
                let independent = active.len() < n && z.norm() > DEP_TOL * norms[p] && zn > 0.0;
                let t2 = if independent {
                    -(np.dot(&x) - rhs(p)) / zn
                } else {
                    f64::INFINITY
                };
                let t = t1.min(t2);
                if !t.is_finite() {
                    // n_p is a non-positive combination of active normals, so the
                    // origin's feasibility implies p holds; the violation is rounding
                    implied.push(p);
                    break;
                }
                if t2.is_finite() {
                    x += &z * t;
                }
                for (k, rk) in r.iter().enumerate() {
                    u[k] -= t * rk;
                }
                up += t;
                if t2 <= t1 {
                    active.push(p);
                    u.push(up);
                    break;
                }
                let k = drop.expect("finite partial step names a constraint");
                active.remove(k);
                u.remove(k);
                implied.clear();
            }
        }

        let mut row_multipliers = vec![0.0; m];
        for (&j, &uj) in active.iter().zip(&u) {
            if j < m {
                row_multipliers[j] = uj.max(0.0);
            }
        }
        let mut x: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
        for &j in &active {
            if j >= m {
                x[j - m] = 0.0;
            }
        }
        Ok(Projection { x, row_multipliers, iterations })
    }

    /// Splits `np` into its component `z` orthogonal to the active normals and
    /// the coefficients `r` of its projection onto their span.
    fn split(
        &self,
        active: &[usize],
        np: &DVector<f64>,
        normal: &impl Fn(usize) -> DVector<f64>,
    ) -> Option<(DVector<f64>, Vec<f64>)> {
        if active.is_empty() {
            return Some((np.clone(), Vec::new()));
        }
        let cols: Vec<DVector<f64>> = active.iter().map(|&j| normal(j)).collect();
        let nmat = DMatrix::from_columns(&cols);
        let gram = nmat.transpose() * &nmat;
        let r = gram.cholesky()?.solve(&(nmat.transpose() * np));
        let z = np - &nmat * &r;
        Some((z, r.iter().copied().collect()))
    }
}

/// Relative violation below which a constraint counts as satisfied.
const FEAS_TOL: f64 = 1e-9;
/// Relative norm below which a normal counts as dependent on the active set.
const DEP_TOL: f64 = 1e-8;
