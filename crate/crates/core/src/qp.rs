//! Dense strictly-convex quadratic programming by a dual active-set method.
//!
//! Solves
//!
//! ```text
//! minimize   1/2 uᵀ P u + qᵀ u
//! subject to G u ≤ h
//! ```
//!
//! with `P` symmetric positive definite.  The solver follows the
//! Goldfarb–Idnani dual scheme: it starts from the unconstrained minimizer
//! `-P⁻¹q` (dual feasible by construction), repeatedly picks the most
//! violated inequality, and takes primal/dual steps that either activate
//! that inequality or drop a blocking one whose multiplier reaches zero.
//! Infeasibility shows up as an unbounded dual ray (the candidate normal is
//! linearly dependent on the active normals and no multiplier can give way)
//! and is reported as a distinct error rather than a garbage iterate.
//!
//! Problems here are tiny — a handful of variables and at most a few dozen
//! rows — so each step re-factors the small active-set system directly
//! instead of maintaining incremental QR updates.  Determinism matters more
//! than micro-performance: identical instances produce identical iterates,
//! active sets, and solutions.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Tolerance for constraint violation / activity decisions.
const FEAS_TOL: f64 = 1e-10;
/// Threshold below which a projected normal counts as linearly dependent.
const DEP_TOL: f64 = 1e-11;

/// A quadratic program `min 1/2 uᵀPu + qᵀu  s.t.  Gu ≤ h`.
#[derive(Debug, Clone)]
pub struct QpInstance {
    /// Symmetric positive-definite cost matrix, `n × n`.
    pub p: DMatrix<f64>,
    /// Linear cost term, length `n`.
    pub q: DVector<f64>,
    /// Constraint rows, `m × n` (`m` may be zero).
    pub g: DMatrix<f64>,
    /// Constraint right-hand sides, length `m`.
    pub h: DVector<f64>,
}

/// Result of a successful solve.
#[derive(Debug, Clone)]
pub struct QpSolution {
    /// Optimal point.
    pub u: DVector<f64>,
    /// Indices of constraints active at the optimum, ascending.
    pub active: Vec<usize>,
    /// Lagrange multipliers aligned with `active` (all nonnegative).
    pub lambda: Vec<f64>,
    /// Objective value at `u`.
    pub objective: f64,
    /// Stationarity residual `‖Pu + q + Gᵀλ‖∞`.
    pub kkt_residual: f64,
    /// Number of active-set changes performed.
    pub iterations: usize,
}

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    BadShape(String),
    #[error("cost matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("constraints are infeasible (unbounded dual ray on row {0})")]
    Infeasible(usize),
    #[error("active-set iteration limit {0} exceeded")]
    MaxIterations(usize),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

/// Solve a strictly convex QP from a cold start.
pub fn solve(qp: &QpInstance) -> Result<QpSolution, QpError> {
    solve_warm(qp, &[])
}

/// Solve with an active-set hint (typically the previous step's active set).
///
/// The hint only changes the order in which constraints are examined; the
/// returned solution is the unique optimum either way, so warm starting can
/// reduce iterations but never changes the answer.
pub fn solve_warm(qp: &QpInstance, hint: &[usize]) -> Result<QpSolution, QpError> {
    let n = qp.p.nrows();
    let m = qp.g.nrows();
    if qp.p.ncols() != n || qp.q.len() != n {
        return Err(QpError::BadShape(format!(
            "P is {}x{}, q has length {}",
            qp.p.nrows(),
            qp.p.ncols(),
            qp.q.len()
        )));
    }
    if m > 0 && qp.g.ncols() != n || qp.h.len() != m {
        return Err(QpError::BadShape(format!(
            "G is {}x{}, h has length {} (n = {n})",
            qp.g.nrows(),
            qp.g.ncols(),
            qp.h.len()
        )));
    }

    // Work with the symmetrized cost; callers occasionally assemble P from
    // products that are symmetric only up to roundoff.
    let p_sym = (&qp.p + qp.p.transpose()) * 0.5;
    let chol = p_sym
        .clone()
        .cholesky()
        .ok_or(QpError::NotPositiveDefinite)?;

    // Unconstrained minimizer: dual-feasible starting point.
    let mut u = -chol.solve(&qp.q);
    let mut active: Vec<usize> = Vec::new();
    let mut lambda: Vec<f64> = Vec::new();

    let max_iter = 100 * (n + m);
    let mut iterations = 0usize;

    // Violation of row p at the current point (negative = violated).
    let slack = |u: &DVector<f64>, p: usize| -> f64 {
        qp.h[p] - qp.g.row(p).transpose().dot(u)
    };

    // Constraints to try first (deduplicated hint), then the usual
    // most-violated scan.
    let mut hint_queue: Vec<usize> = Vec::new();
    for &p in hint {
        if p < m && !hint_queue.contains(&p) {
            hint_queue.push(p);
        }
    }
    let mut hint_pos = 0usize;

    loop {
        // Pick the next constraint to enforce.
        let mut cand: Option<usize> = None;
        while hint_pos < hint_queue.len() {
            let p = hint_queue[hint_pos];
            hint_pos += 1;
            if !active.contains(&p) && slack(&u, p) < -FEAS_TOL {
                cand = Some(p);
                break;
            }
        }
        if cand.is_none() {
            let mut worst = -FEAS_TOL;
            for p in 0..m {
                if active.contains(&p) {
                    continue;
                }
                let s = slack(&u, p);
                if s < worst {
                    worst = s;
                    cand = Some(p);
                }
            }
        }
        let Some(add) = cand else {
            // No violated rows: current iterate is optimal.
            let objective = 0.5 * u.dot(&(&p_sym * &u)) + qp.q.dot(&u);
            let mut grad = &p_sym * &u + &qp.q;
            for (j, &p) in active.iter().enumerate() {
                grad += qp.g.row(p).transpose() * lambda[j];
            }
            let kkt_residual = grad.amax();
            let mut order: Vec<usize> = (0..active.len()).collect();
            order.sort_by_key(|&j| active[j]);
            return Ok(QpSolution {
                u,
                active: order.iter().map(|&j| active[j]).collect(),
                lambda: order.iter().map(|&j| lambda[j]).collect(),
                objective,
                kkt_residual,
                iterations,
            });
        };

        // Inner loop: drive the violation of `add` to zero, dropping
        // blocking constraints as their multipliers hit zero.
        let n_plus = -qp.g.row(add).transpose(); // normal in ≥ orientation
        let mut lambda_add = 0.0f64;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpError::MaxIterations(max_iter));
            }

            // z: primal step direction; r: dual step direction.
            let pi_n = chol.solve(&n_plus);
            let k = active.len();
            let (z, r) = if k == 0 {
                (pi_n.clone(), DVector::zeros(0))
            } else {
                let mut nmat = DMatrix::zeros(n, k);
                for (j, &p) in active.iter().enumerate() {
                    nmat.set_column(j, &(-qp.g.row(p).transpose()));
                }
                let pinv_n = chol.solve(&nmat);
                let big_m = nmat.transpose() * &pinv_n;
                let mchol = big_m.cholesky().ok_or_else(|| {
                    QpError::Numerical("active-set normal system lost rank".into())
                })?;
                let r = mchol.solve(&(nmat.transpose() * &pi_n));
                let z = &pi_n - pinv_n * &r;
                (z, r)
            };

            let s_add = slack(&u, add);
            let znorm = z.norm();
            // Maximum dual step before a multiplier hits zero.
            let mut t1 = f64::INFINITY;
            let mut blocking: Option<usize> = None;
            for j in 0..active.len() {
                if r[j] > DEP_TOL {
                    let t = lambda[j] / r[j];
                    if t < t1 {
                        t1 = t;
                        blocking = Some(j);
                    }
                }
            }

            if znorm <= DEP_TOL * (1.0 + n_plus.norm()) {
                // New normal is dependent on the active ones: violation can
                // only be fixed through dual motion.
                if blocking.is_none() {
                    return Err(QpError::Infeasible(add));
                }
                let j = blocking.unwrap();
                for (jj, l) in lambda.iter_mut().enumerate() {
                    *l -= t1 * r[jj];
                }
                lambda_add += t1;
                active.remove(j);
                lambda.remove(j);
                continue;
            }

            // Full step length that zeroes the violation of `add`.
            let denom = z.dot(&n_plus);
            let t2 = -s_add / denom;
            let t = t1.min(t2);
            u += &z * t;
            for (jj, l) in lambda.iter_mut().enumerate() {
                *l -= t * r[jj];
            }
            lambda_add += t;

            if t2 <= t1 {
                active.push(add);
                lambda.push(lambda_add);
                break;
            }
            let j = blocking.expect("t1 finite implies a blocking index");
            active.remove(j);
            lambda.remove(j);
        }
    }
}

/// Unconstrained minimizer `-P⁻¹q`; exposed for controller fallbacks.
pub fn unconstrained_minimizer(qp: &QpInstance) -> Result<DVector<f64>, QpError> {
    let p_sym = (&qp.p + qp.p.transpose()) * 0.5;
    let chol = p_sym.cholesky().ok_or(QpError::NotPositiveDefinite)?;
    Ok(-chol.solve(&qp.q))
}
