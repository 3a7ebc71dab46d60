//! Dense box-constrained convex QP:
//!
//! ```text
//!     minimize    ½ xᵀ H x + gᵀ x
//!     subject to  lb ≤ x ≤ ub
//! ```
//!
//! solved with a primal active-set method. Iterates stay feasible and the
//! returned point is clipped onto the box, so bound compliance is exact.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KktResiduals {
    /// ‖projected gradient‖∞.
    pub stationarity: f64,
    /// Largest bound violation (zero after clipping).
    pub primal: f64,
    /// max multiplier × slack, multipliers read off the gradient sign.
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub residuals: KktResiduals,
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum QpError {
    #[error("QP dimensions inconsistent: {0}")]
    Dimension(String),
    #[error("QP data contains non-finite values")]
    NonFinite,
    #[error("QP bounds are inconsistent (lb > ub at index {0})")]
    InfeasibleBounds(usize),
    #[error("Hessian is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("QP did not converge in {iterations} iterations (KKT residual {residuals:?})")]
    NoConvergence {
        best: DVector<f64>,
        residuals: KktResiduals,
        iterations: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QpSettings {
    pub tol: f64,
    /// Iteration cap; `None` means `10·d + 100`.
    pub max_iter: Option<usize>,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bound {
    Free,
    Lower,
    Upper,
}

impl QpProblem {
    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.h * x + &self.g
    }

    fn check(&self) -> Result<(), QpError> {
        let d = self.dim();
        if self.h.shape() != (d, d) || self.lb.len() != d || self.ub.len() != d {
            return Err(QpError::Dimension(format!(
                "H {:?}, g {}, lb {}, ub {}",
                self.h.shape(),
                d,
                self.lb.len(),
                self.ub.len()
            )));
        }
        let finite = self.h.iter().chain(self.g.iter()).all(|v| v.is_finite())
            && self.lb.iter().chain(self.ub.iter()).all(|v| !v.is_nan());
        if !finite {
            return Err(QpError::NonFinite);
        }
        if let Some(i) = (0..d).find(|&i| self.lb[i] > self.ub[i]) {
            return Err(QpError::InfeasibleBounds(i));
        }
        let asym = (&self.h - self.h.transpose()).amax();
        if asym > 1e-10 * self.h.amax().max(1e-300) {
            return Err(QpError::NotPositiveDefinite);
        }
        Ok(())
    }

    /// KKT residuals of a feasible point.
    pub fn kkt_residuals(&self, x: &DVector<f64>) -> KktResiduals {
        let grad = self.gradient(x);
        let mut r = KktResiduals::default();
        for i in 0..self.dim() {
            let gi = grad[i];
            let to_lb = x[i] - self.lb[i];
            let to_ub = self.ub[i] - x[i];
            r.primal = r.primal.max((-to_lb).max(0.0)).max((-to_ub).max(0.0));
            let pg = if to_lb <= 0.0 && to_ub <= 0.0 {
                0.0
            } else if to_lb <= 0.0 {
                gi.min(0.0)
            } else if to_ub <= 0.0 {
                gi.max(0.0)
            } else {
                gi
            };
            r.stationarity = r.stationarity.max(pg.abs());
            let comp_lower = if self.lb[i].is_finite() { gi.max(0.0) * to_lb.max(0.0) } else { 0.0 };
            let comp_upper = if self.ub[i].is_finite() { (-gi).max(0.0) * to_ub.max(0.0) } else { 0.0 };
            r.complementarity = r.complementarity.max(comp_lower).max(comp_upper);
        }
        r
    }
}

fn solve_free(qp: &QpProblem, x: &DVector<f64>, free: &[usize]) -> Result<DVector<f64>, QpError> {
    let nf = free.len();
    let mut h_ff = DMatrix::zeros(nf, nf);
    let mut rhs = DVector::zeros(nf);
    let d = qp.dim();
    for (a, &i) in free.iter().enumerate() {
        let mut r = -qp.g[i];
        for j in 0..d {
            if !free.contains(&j) {
                r -= qp.h[(i, j)] * x[j];
            }
        }
        rhs[a] = r;
        for (b, &j) in free.iter().enumerate() {
            h_ff[(a, b)] = qp.h[(i, j)];
        }
    }
    let chol = h_ff.cholesky().ok_or(QpError::NotPositiveDefinite)?;
    Ok(chol.solve(&rhs))
}

/// Solve a box QP to KKT tolerance `settings.tol`.
pub fn solve_qp(qp: &QpProblem, settings: &QpSettings) -> Result<QpSolution, QpError> {
    qp.check()?;
    let d = qp.dim();
    if d == 0 {
        return Ok(QpSolution {
            x: DVector::zeros(0),
            objective: 0.0,
            iterations: 0,
            residuals: KktResiduals::default(),
        });
    }
    qp.h.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
    let max_iter = settings.max_iter.unwrap_or(10 * d + 100);
    let release_tol = 0.1 * settings.tol;

    // Start from the projected unconstrained minimiser.
    let all: Vec<usize> = (0..d).collect();
    let mut x = solve_free(qp, &DVector::zeros(d), &all)?;
    let mut state = vec![Bound::Free; d];
    for i in 0..d {
        if x[i] <= qp.lb[i] {
            x[i] = qp.lb[i];
            state[i] = Bound::Lower;
        } else if x[i] >= qp.ub[i] {
            x[i] = qp.ub[i];
            state[i] = Bound::Upper;
        }
    }

    for iter in 1..=max_iter {
        let free: Vec<usize> = (0..d).filter(|&i| state[i] == Bound::Free).collect();
        let target = if free.is_empty() {
            DVector::zeros(0)
        } else {
            solve_free(qp, &x, &free)?
        };

        // Longest feasible step towards the subspace minimiser.
        let mut alpha = 1.0;
        let mut blocking = None;
        for (a, &i) in free.iter().enumerate() {
            let p = target[a] - x[i];
            if p < 0.0 && qp.lb[i].is_finite() {
                let s = (qp.lb[i] - x[i]) / p;
                if s < alpha {
                    alpha = s;
                    blocking = Some((i, Bound::Lower));
                }
            } else if p > 0.0 && qp.ub[i].is_finite() {
                let s = (qp.ub[i] - x[i]) / p;
                if s < alpha {
                    alpha = s;
                    blocking = Some((i, Bound::Upper));
                }
            }
        }
        let alpha = alpha.max(0.0);
        for (a, &i) in free.iter().enumerate() {
            x[i] += alpha * (target[a] - x[i]);
        }
        if let Some((i, b)) = blocking {
            x[i] = if b == Bound::Lower { qp.lb[i] } else { qp.ub[i] };
            state[i] = b;
            continue;
        }
        for (a, &i) in free.iter().enumerate() {
            x[i] = target[a].clamp(qp.lb[i], qp.ub[i]);
        }

        // Subspace optimal: check multiplier signs of the active bounds.
        let grad = qp.gradient(&x);
        let mut worst: Option<(usize, f64)> = None;
        for i in 0..d {
            let violation = match state[i] {
                Bound::Lower if qp.lb[i] < qp.ub[i] => -grad[i],
                Bound::Upper if qp.lb[i] < qp.ub[i] => grad[i],
                _ => continue,
            };
            if violation > release_tol && worst.is_none_or(|(_, v)| violation > v) {
                worst = Some((i, violation));
            }
        }
        match worst {
            Some((i, _)) => state[i] = Bound::Free,
            None => {
                let residuals = qp.kkt_residuals(&x);
                if residuals.max() <= settings.tol {
                    return Ok(QpSolution {
                        objective: qp.objective(&x),
                        x,
                        iterations: iter,
                        residuals,
                    });
                }
                // Round-off left the free block short of tolerance: one more
                // Newton pass from the current point usually fixes it.
                if iter == max_iter {
                    break;
                }
            }
        }
    }
    let residuals = qp.kkt_residuals(&x);
    Err(QpError::NoConvergence {
        best: x,
        residuals,
        iterations: max_iter,
    })
}
