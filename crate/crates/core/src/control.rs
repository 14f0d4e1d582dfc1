//! Waypoint tracking and collision avoidance for integrator robots.
//!
//! The planner hands each robot a sequence of waypoints; this module
//! closes the loop.  Robots are modeled as chains of 3-D integrators
//! (order 1: velocity-controlled, order 2: acceleration-controlled).
//! Between consecutive waypoints a fixed-final-state LQR steers the robot
//! exactly onto the next reference state with minimum control energy
//! `∫ ½uᵀRu dt`; the controllability Gramian has a closed form for both
//! orders, and the optimal cost-to-go doubles as a Lyapunov certificate
//! for the segment.
//!
//! Safety is enforced by filtering the LQR command through a small
//! quadratic program.  Each robot pair carries a super-ellipsoid barrier
//! `h = (Δx²+Δy²)² + (Δz/c)⁴ − D⁴` — flat enough in `z` to respect
//! rotor-wash style separation — and the filter constrains each robot's
//! input so that `h` obeys an exponential-stabilization condition of the
//! same degree as the dynamics.  Responsibility for a pair is split
//! between its two members, so each robot solves its own QP from a state
//! snapshot and the sum of the split conditions implies the joint one.
//! The QP minimizes `(u − u_des)ᵀ W(β) (u − u_des)` where `W(β)` inflates
//! the cost of deviating *along* the desired direction; larger `β` makes
//! the filter keep its commanded speed and yield by swerving sideways
//! instead of backing off.

use crate::qp::{self, QpError, QpInstance};
use crate::world::{MotionPrimitive, UnicycleState};
use nalgebra::{DMatrix, DVector, RowDVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("integrator order must be 1 or 2, got {0}")]
    BadOrder(usize),
    #[error("control weight must be 3×3 symmetric positive definite")]
    BadWeight,
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("stabilization gains must have one entry per integrator order, got {0}")]
    BadGains(usize),
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Robot dynamics: an `order`-chain of integrators in each of x, y, z,
/// with control penalty `R` (3×3 SPD).
#[derive(Debug, Clone)]
pub struct IntegratorSpec {
    order: usize,
    r_weight: DMatrix<f64>,
    r_inv: DMatrix<f64>,
}

impl IntegratorSpec {
    pub fn new(order: usize, r_weight: DMatrix<f64>) -> Result<Self, ControlError> {
        if !(1..=2).contains(&order) {
            return Err(ControlError::BadOrder(order));
        }
        if r_weight.nrows() != 3 || r_weight.ncols() != 3 {
            return Err(ControlError::BadWeight);
        }
        let sym = (&r_weight + r_weight.transpose()) * 0.5;
        let chol = sym.clone().cholesky().ok_or(ControlError::BadWeight)?;
        let r_inv = chol.inverse();
        Ok(Self { order, r_weight: sym, r_inv })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn state_dim(&self) -> usize {
        3 * self.order
    }

    pub fn r_weight(&self) -> &DMatrix<f64> {
        &self.r_weight
    }

    /// Drift matrix: a block shift, `ṗ = v`, `v̇ = u` (order 2).
    pub fn a(&self) -> DMatrix<f64> {
        let n = self.state_dim();
        let mut a = DMatrix::zeros(n, n);
        for block in 1..self.order {
            for k in 0..3 {
                a[((block - 1) * 3 + k, block * 3 + k)] = 1.0;
            }
        }
        a
    }

    /// Input matrix: control enters the last block.
    pub fn b(&self) -> DMatrix<f64> {
        let n = self.state_dim();
        let mut b = DMatrix::zeros(n, 3);
        for k in 0..3 {
            b[(n - 3 + k, k)] = 1.0;
        }
        b
    }

    /// Exact matrix exponential `e^{AΔ}`; `A` is nilpotent so the series
    /// terminates at the order.
    pub fn exp_a(&self, delta: f64) -> DMatrix<f64> {
        let n = self.state_dim();
        let mut out = DMatrix::identity(n, n);
        if self.order == 2 {
            for k in 0..3 {
                out[(k, 3 + k)] = delta;
            }
        }
        out
    }

    /// Controllability Gramian `∫₀^Δ e^{Aσ}BR⁻¹Bᵀe^{Aᵀσ} dσ`, closed form.
    pub fn gramian(&self, delta: f64) -> DMatrix<f64> {
        match self.order {
            1 => &self.r_inv * delta,
            2 => {
                let mut g = DMatrix::zeros(6, 6);
                let d3 = delta * delta * delta / 3.0;
                let d2 = delta * delta / 2.0;
                g.view_mut((0, 0), (3, 3)).copy_from(&(&self.r_inv * d3));
                g.view_mut((0, 3), (3, 3)).copy_from(&(&self.r_inv * d2));
                g.view_mut((3, 0), (3, 3)).copy_from(&(&self.r_inv * d2));
                g.view_mut((3, 3), (3, 3)).copy_from(&(&self.r_inv * delta));
                g
            }
            _ => unreachable!("order validated at construction"),
        }
    }

    /// Linear dynamics `ẋ = Ax + Bu` advanced by one RK4 step.  The
    /// vector field is affine, so RK4 is exact for these nilpotent
    /// chains.
    pub fn rk4_step(&self, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> DVector<f64> {
        let a = self.a();
        let b = self.b();
        let f = |x: &DVector<f64>| &a * x + &b * u;
        let k1 = f(x);
        let k2 = f(&(x + &k1 * (dt / 2.0)));
        let k3 = f(&(x + &k2 * (dt / 2.0)));
        let k4 = f(&(x + &k3 * dt));
        x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
    }
}

/// Minimum horizon used when evaluating the control law; at shorter
/// remaining times the Gramian degenerates and the tracker should hold
/// its previous command instead (see [`LqrSegment::saturated`]).
pub const HORIZON_FLOOR: f64 = 1e-3;

/// Fixed-final-state LQR segment: drive the state onto `x_ref` at
/// `t_final` while minimizing `∫ ½uᵀRu`.
#[derive(Debug, Clone)]
pub struct LqrSegment {
    spec: IntegratorSpec,
    pub t_final: f64,
    pub x_ref: DVector<f64>,
}

impl LqrSegment {
    pub fn new(spec: &IntegratorSpec, t_final: f64, x_ref: DVector<f64>) -> Result<Self, ControlError> {
        if x_ref.len() != spec.state_dim() {
            return Err(ControlError::Dim(format!(
                "reference has {} entries, state dimension is {}",
                x_ref.len(),
                spec.state_dim()
            )));
        }
        Ok(Self { spec: spec.clone(), t_final, x_ref })
    }

    fn remaining(&self, t: f64) -> f64 {
        (self.t_final - t).max(HORIZON_FLOOR)
    }

    /// True once the remaining horizon hit the floor; callers should hold
    /// the last command rather than chase a degenerate Gramian.
    pub fn saturated(&self, t: f64) -> bool {
        self.t_final - t < HORIZON_FLOOR
    }

    /// Reachability gap `d = x_ref − e^{AΔ}x`: what free drift would miss.
    pub fn gap(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        let delta = self.remaining(t);
        &self.x_ref - self.spec.exp_a(delta) * x
    }

    fn gramian_solve(&self, delta: f64, d: &DVector<f64>) -> DVector<f64> {
        self.spec
            .gramian(delta)
            .cholesky()
            .expect("Gramian is SPD for positive horizons")
            .solve(d)
    }

    /// Open-loop-optimal feedback `u = R⁻¹Bᵀe^{AᵀΔ}G(Δ)⁻¹d`.
    pub fn control(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        let delta = self.remaining(t);
        let d = self.gap(t, x);
        let gd = self.gramian_solve(delta, &d);
        &self.spec.r_inv * (self.spec.b().transpose() * self.spec.exp_a(delta).transpose() * gd)
    }

    /// Remaining optimal cost `V(t,x) = ½ dᵀG(Δ)⁻¹d`; a Lyapunov function
    /// for the tracking error on this segment.
    pub fn cost_to_go(&self, t: f64, x: &DVector<f64>) -> f64 {
        let delta = self.remaining(t);
        let d = self.gap(t, x);
        0.5 * d.dot(&self.gramian_solve(delta, &d))
    }

    /// State gradient `∂V/∂x = −dᵀG⁻¹e^{AΔ}`.
    pub fn cost_gradient(&self, t: f64, x: &DVector<f64>) -> RowDVector<f64> {
        let delta = self.remaining(t);
        let d = self.gap(t, x);
        let gd = self.gramian_solve(delta, &d);
        -(gd.transpose() * self.spec.exp_a(delta))
    }

    /// Total control energy `∫ ½uᵀRu` the segment will spend from `(t, x)`
    /// if left unfiltered; identical to [`Self::cost_to_go`] by
    /// optimality.
    pub fn energy(&self, t: f64, x: &DVector<f64>) -> f64 {
        self.cost_to_go(t, x)
    }
}

/// Coefficients `[a₀, …, a_{r−1}]` of the monic polynomial `∏(s − pⱼ) =
/// s^r + a_{r−1}s^{r−1} + … + a₀` built from the given (stable) poles.
/// Used as the stabilization gains for the barrier condition.
pub fn pole_gains(poles: &[f64]) -> Vec<f64> {
    let mut coeffs = vec![1.0];
    for &p in poles {
        let mut next = vec![0.0; coeffs.len() + 1];
        for (k, &c) in coeffs.iter().enumerate() {
            next[k + 1] += c;
            next[k] -= p * c;
        }
        coeffs = next;
    }
    coeffs.pop();
    coeffs
}

/// Pairwise separation barrier: positive outside the safety shape.
#[derive(Debug, Clone, Copy)]
pub struct BarrierShape {
    /// Safety distance (the shape's equatorial radius).
    pub d_s: f64,
    /// Vertical stretch: the shape spans `c·d_s` along z.
    pub c: f64,
}

fn split3(x: &DVector<f64>, order: usize) -> (DVector<f64>, DVector<f64>) {
    let p = x.rows(0, 3).into_owned();
    let v = if order == 2 { x.rows(3, 3).into_owned() } else { DVector::zeros(3) };
    (p, v)
}

/// `h = ρ² + Δz⁴ − D⁴` with `ρ = Δx² + Δy²`, `Δz = (z_i − z_j)/c`.
pub fn barrier_h(pi: &DVector<f64>, pj: &DVector<f64>, shape: &BarrierShape) -> f64 {
    let dx = pi[0] - pj[0];
    let dy = pi[1] - pj[1];
    let dz = (pi[2] - pj[2]) / shape.c;
    let rho = dx * dx + dy * dy;
    rho * rho + dz.powi(4) - shape.d_s.powi(4)
}

/// Gradient of `h` with respect to robot `i`'s position.
pub fn barrier_grad(pi: &DVector<f64>, pj: &DVector<f64>, shape: &BarrierShape) -> DVector<f64> {
    let dx = pi[0] - pj[0];
    let dy = pi[1] - pj[1];
    let dz = (pi[2] - pj[2]) / shape.c;
    let rho = dx * dx + dy * dy;
    DVector::from_column_slice(&[4.0 * rho * dx, 4.0 * rho * dy, 4.0 * dz.powi(3) / shape.c])
}

/// `ḣ` under the current velocities (control-independent for order 2).
pub fn barrier_hdot(
    pi: &DVector<f64>,
    pj: &DVector<f64>,
    vi: &DVector<f64>,
    vj: &DVector<f64>,
    shape: &BarrierShape,
) -> f64 {
    let dx = pi[0] - pj[0];
    let dy = pi[1] - pj[1];
    let dz = (pi[2] - pj[2]) / shape.c;
    let rho = dx * dx + dy * dy;
    let dvx = vi[0] - vj[0];
    let dvy = vi[1] - vj[1];
    let dvz = vi[2] - vj[2];
    4.0 * rho * (dx * dvx + dy * dvy) + 4.0 * dz.powi(3) * dvz / shape.c
}

/// Acceleration-free part of `ḧ` (the drift term); the full second
/// derivative is this plus `∇h · (a_i − a_j)`.
pub fn barrier_drift2(
    pi: &DVector<f64>,
    pj: &DVector<f64>,
    vi: &DVector<f64>,
    vj: &DVector<f64>,
    shape: &BarrierShape,
) -> f64 {
    let dx = pi[0] - pj[0];
    let dy = pi[1] - pj[1];
    let dz = (pi[2] - pj[2]) / shape.c;
    let rho = dx * dx + dy * dy;
    let dvx = vi[0] - vj[0];
    let dvy = vi[1] - vj[1];
    let dzdot = (vi[2] - vj[2]) / shape.c;
    let radial = dx * dvx + dy * dvy;
    8.0 * radial * radial + 4.0 * rho * (dvx * dvx + dvy * dvy)
        + 12.0 * dz * dz * dzdot * dzdot
}

/// One linear inequality `a·u ≤ rhs` on a robot's control.
#[derive(Debug, Clone)]
pub struct SafetyRow {
    pub a: DVector<f64>,
    pub rhs: f64,
}

/// Robot `i`'s share of the pairwise barrier condition against robot
/// `j`.  `share ∈ (0, 1]` is `αᵢ/(αᵢ+αⱼ)`; the two shares sum to the
/// joint condition, so satisfying both separately keeps the pair safe.
pub fn pairwise_safety_row(
    order: usize,
    xi: &DVector<f64>,
    xj: &DVector<f64>,
    shape: &BarrierShape,
    gains: &[f64],
    share: f64,
) -> Result<SafetyRow, ControlError> {
    if gains.len() != order {
        return Err(ControlError::BadGains(gains.len()));
    }
    let (pi, vi) = split3(xi, order);
    let (pj, vj) = split3(xj, order);
    let grad = barrier_grad(&pi, &pj, shape);
    let h = barrier_h(&pi, &pj, shape);
    let b = match order {
        1 => gains[0] * h,
        2 => {
            let hdot = barrier_hdot(&pi, &pj, &vi, &vj, shape);
            gains[0] * h + gains[1] * hdot + barrier_drift2(&pi, &pj, &vi, &vj, shape)
        }
        _ => return Err(ControlError::BadOrder(order)),
    };
    Ok(SafetyRow { a: -grad, rhs: share * b })
}

/// Deviation metric `W(β) = I + β·RuuᵀR/(uᵀR²u)` (with `u = u_des`):
/// identity for `β = 0` or a zero command, otherwise inflated along the
/// desired direction so the filter swerves rather than brakes.
pub fn deviation_weight(u_des: &DVector<f64>, r: &DMatrix<f64>, beta: f64) -> DMatrix<f64> {
    let n = u_des.len();
    let ru = r * u_des;
    let denom = ru.dot(&ru);
    if denom <= f64::EPSILON || beta == 0.0 {
        return DMatrix::identity(n, n);
    }
    DMatrix::identity(n, n) + (&ru * ru.transpose()) * (beta / denom)
}

/// Outcome of one safety-filter solve.
#[derive(Debug, Clone)]
pub struct FilteredControl {
    pub u: DVector<f64>,
    /// True when the QP was infeasible and the zero command was
    /// substituted.
    pub fallback: bool,
    /// Number of constraint rows tight at the optimum (all rows, on
    /// fallback).  Zero means the desired command passed through
    /// untouched.
    pub active_rows: usize,
}

/// Project `u_des` onto the constraint rows under the `W(β)` metric.
pub fn filter_control(
    u_des: &DVector<f64>,
    r: &DMatrix<f64>,
    beta: f64,
    rows: &[SafetyRow],
    u_max: Option<f64>,
) -> Result<FilteredControl, ControlError> {
    let n = u_des.len();
    let w = deviation_weight(u_des, r, beta);
    let mut g_rows: Vec<f64> = Vec::new();
    let mut h: Vec<f64> = Vec::new();
    for row in rows {
        if row.a.len() != n {
            return Err(ControlError::Dim(format!(
                "constraint row has {} entries, control has {}",
                row.a.len(),
                n
            )));
        }
        g_rows.extend(row.a.iter());
        h.push(row.rhs);
    }
    if let Some(umax) = u_max {
        for k in 0..n {
            let mut plus = vec![0.0; n];
            plus[k] = 1.0;
            g_rows.extend(&plus);
            h.push(umax);
            let mut minus = vec![0.0; n];
            minus[k] = -1.0;
            g_rows.extend(&minus);
            h.push(umax);
        }
    }
    let m = h.len();
    let qp = QpInstance {
        p: &w * 2.0,
        q: -(&w * u_des) * 2.0,
        g: DMatrix::from_row_slice(m, n, &g_rows),
        h: DVector::from_column_slice(&h),
    };
    match qp::solve(&qp) {
        Ok(sol) => {
            Ok(FilteredControl { u: sol.u, fallback: false, active_rows: sol.active.len() })
        }
        Err(QpError::Infeasible(_)) => {
            Ok(FilteredControl { u: DVector::zeros(n), fallback: true, active_rows: m })
        }
        Err(e) => Err(e.into()),
    }
}

/// Team-level safety parameters.
#[derive(Debug, Clone)]
pub struct SafetyParams {
    /// Stabilization gains, one per integrator order (see [`pole_gains`]).
    pub gains: Vec<f64>,
    /// Deviation-metric knob for [`deviation_weight`].
    pub beta: f64,
    /// Per-robot responsibility weights `αᵢ`.
    pub alphas: Vec<f64>,
    /// Per-robot safety radii; a pair uses the larger of the two.
    pub radii: Vec<f64>,
    /// Vertical stretch shared by every pair.
    pub c: f64,
    /// Per-axis control bound, if any.
    pub u_max: Option<f64>,
    /// Velocity bound enforced as a first-degree barrier (order 2 only):
    /// `(v_max, gain)`.
    pub v_limit: Option<(f64, f64)>,
}

/// Filter every robot's desired control against all pairwise barriers,
/// each robot solving its own QP from the shared state snapshot.
pub fn team_filter(
    spec: &IntegratorSpec,
    states: &[DVector<f64>],
    desired: &[DVector<f64>],
    params: &SafetyParams,
) -> Result<Vec<FilteredControl>, ControlError> {
    let n = states.len();
    if desired.len() != n || params.alphas.len() != n || params.radii.len() != n {
        return Err(ControlError::Dim(format!(
            "team of {n} needs matching desired/alphas/radii lengths"
        )));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rows = Vec::new();
        for j in 0..n {
            if i == j {
                continue;
            }
            let shape =
                BarrierShape { d_s: params.radii[i].max(params.radii[j]), c: params.c };
            let share = params.alphas[i] / (params.alphas[i] + params.alphas[j]);
            rows.push(pairwise_safety_row(
                spec.order(),
                &states[i],
                &states[j],
                &shape,
                &params.gains,
                share,
            )?);
        }
        if let (Some((vmax, gain)), 2) = (params.v_limit, spec.order()) {
            let v = states[i].rows(3, 3);
            for k in 0..3 {
                let mut e = DVector::zeros(3);
                e[k] = 1.0;
                rows.push(SafetyRow { a: e.clone(), rhs: gain * (vmax - v[k]) });
                rows.push(SafetyRow { a: -e, rhs: gain * (vmax + v[k]) });
            }
        }
        out.push(filter_control(&desired[i], spec.r_weight(), params.beta, &rows, params.u_max)?);
    }
    Ok(out)
}

/// Reference states for waypoint tracking: position from the waypoint
/// pose (altitude is the z coordinate); for order 2, velocity from the
/// primitive *entering* the waypoint, pointed along the arrival heading,
/// and zero at the final waypoint so the plan ends at rest.
pub fn map_to_reference(
    states: &[UnicycleState],
    controls: &[usize],
    primitives: &[MotionPrimitive],
    order: usize,
) -> Vec<DVector<f64>> {
    let last = states.len() - 1;
    states
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let mut x = DVector::zeros(3 * order);
            x[0] = s.x;
            x[1] = s.y;
            x[2] = s.alt;
            if order == 2 && k > 0 && k < last {
                let nu = primitives[controls[k - 1]].nu;
                x[3] = nu * s.theta.cos();
                x[4] = nu * s.theta.sin();
            }
            x
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Truncated-series matrix exponential, independent of the nilpotent
    /// closed form used by the implementation.
    fn exp_series(a: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
        let n = a.nrows();
        let at = a * t;
        let mut term = DMatrix::identity(n, n);
        let mut sum = term.clone();
        for k in 1..30 {
            term = &term * &at / k as f64;
            sum += &term;
        }
        sum
    }

    fn random_spd3(rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let m = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        &m * m.transpose() + DMatrix::identity(3, 3) * 0.5
    }

    #[test]
    fn dynamics_matrices_have_chain_structure() {
        let spec = IntegratorSpec::new(2, DMatrix::identity(3, 3)).unwrap();
        let a = spec.a();
        let b = spec.b();
        assert_eq!(a.nrows(), 6);
        // ṗ = v rows.
        for k in 0..3 {
            assert_eq!(a[(k, 3 + k)], 1.0);
            assert_eq!(b[(3 + k, k)], 1.0);
        }
        assert_eq!((&a * &a).amax(), 0.0, "A is nilpotent of degree 2");
        let e = spec.exp_a(0.7);
        let reference = exp_series(&a, 0.7);
        assert_abs_diff_eq!((e - reference).amax(), 0.0, epsilon = 1e-12);

        let first = IntegratorSpec::new(1, DMatrix::identity(3, 3)).unwrap();
        assert_eq!(first.a().amax(), 0.0);
        assert_eq!(first.exp_a(2.0), DMatrix::identity(3, 3));
        assert!(IntegratorSpec::new(3, DMatrix::identity(3, 3)).is_err());
        assert!(IntegratorSpec::new(0, DMatrix::identity(3, 3)).is_err());
    }

    #[test]
    fn gramian_closed_forms_match_hand_values() {
        let first = IntegratorSpec::new(1, DMatrix::identity(3, 3)).unwrap();
        let g1 = first.gramian(2.0);
        assert_abs_diff_eq!((g1 - DMatrix::identity(3, 3) * 2.0).amax(), 0.0, epsilon = 1e-15);

        let second = IntegratorSpec::new(2, DMatrix::identity(3, 3)).unwrap();
        let g2 = second.gramian(1.0);
        let mut expect = DMatrix::zeros(6, 6);
        for k in 0..3 {
            expect[(k, k)] = 1.0 / 3.0;
            expect[(k, 3 + k)] = 0.5;
            expect[(3 + k, k)] = 0.5;
            expect[(3 + k, 3 + k)] = 1.0;
        }
        assert_abs_diff_eq!((g2 - expect).amax(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn gramian_matches_simpson_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for order in [1usize, 2] {
            let r = random_spd3(&mut rng);
            let spec = IntegratorSpec::new(order, r.clone()).unwrap();
            let delta = 0.73;
            let n = spec.state_dim();
            let a = spec.a();
            let b = spec.b();
            let r_inv = r.clone().cholesky().unwrap().inverse();
            let integrand = |s: f64| {
                let e = exp_series(&a, s);
                &e * &b * &r_inv * b.transpose() * e.transpose()
            };
            // Composite Simpson with 200 panels.
            let panels = 200;
            let h = delta / panels as f64;
            let mut acc = DMatrix::zeros(n, n);
            for p in 0..panels {
                let s0 = p as f64 * h;
                acc += integrand(s0) + integrand(s0 + h / 2.0) * 4.0 + integrand(s0 + h);
            }
            acc *= h / 6.0;
            let err = (spec.gramian(delta) - acc).amax();
            assert!(err < 1e-8, "order {order}: quadrature gap {err}");
        }
    }

    #[test]
    fn lqr_reaches_the_reference_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = IntegratorSpec::new(2, random_spd3(&mut rng)).unwrap();
        for _ in 0..5 {
            let x0 = DVector::from_fn(6, |_, _| rng.random_range(-2.0..2.0));
            let x_ref = DVector::from_fn(6, |_, _| rng.random_range(-2.0..2.0));
            let seg = LqrSegment::new(&spec, 1.0, x_ref.clone()).unwrap();
            let dt = 1e-3;
            let mut x = x0;
            let mut t = 0.0;
            let mut u_hold = DVector::zeros(3);
            while t < 1.0 - 1e-12 {
                if !seg.saturated(t) {
                    u_hold = seg.control(t, &x);
                }
                x = spec.rk4_step(&x, &u_hold, dt);
                t += dt;
            }
            let err = (&x - &x_ref).amax();
            assert!(err < 1e-3, "terminal miss {err}");
        }
    }

    #[test]
    fn cost_to_go_equals_integrated_control_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let r = random_spd3(&mut rng);
        let spec = IntegratorSpec::new(2, r.clone()).unwrap();
        let x0 = DVector::from_column_slice(&[1.0, -2.0, 0.5, 0.0, 1.0, 0.0]);
        let x_ref = DVector::from_column_slice(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let seg = LqrSegment::new(&spec, 1.0, x_ref).unwrap();
        let predicted = seg.energy(0.0, &x0);
        let dt = 1e-4;
        let mut x = x0;
        let mut t = 0.0;
        let mut spent = 0.0;
        let mut u_hold = DVector::zeros(3);
        while t < 1.0 - 1e-12 {
            if !seg.saturated(t) {
                u_hold = seg.control(t, &x);
            }
            spent += 0.5 * u_hold.dot(&(&r * &u_hold)) * dt;
            x = spec.rk4_step(&x, &u_hold, dt);
            t += dt;
        }
        let rel = (spent - predicted).abs() / predicted;
        assert!(rel < 0.01, "energy mismatch: predicted {predicted}, spent {spent}");
    }

    #[test]
    fn cost_gradient_times_b_is_minus_weighted_control() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for order in [1usize, 2] {
            let r = random_spd3(&mut rng);
            let spec = IntegratorSpec::new(order, r.clone()).unwrap();
            let n = spec.state_dim();
            let x = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let x_ref = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let seg = LqrSegment::new(&spec, 0.8, x_ref).unwrap();
            let t = 0.1;
            let lhs = seg.cost_gradient(t, &x) * spec.b();
            let rhs = -(seg.control(t, &x).transpose() * &r);
            assert_abs_diff_eq!((lhs - rhs).amax(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn cost_to_go_decreases_under_the_optimal_control() {
        let spec = IntegratorSpec::new(2, DMatrix::identity(3, 3)).unwrap();
        let seg = LqrSegment::new(&spec, 1.0, DVector::zeros(6)).unwrap();
        let mut x = DVector::from_column_slice(&[2.0, 1.0, 0.0, -1.0, 0.0, 0.0]);
        let dt = 1e-3;
        let mut t = 0.0;
        let mut prev = seg.cost_to_go(t, &x);
        while t < 0.9 {
            let u = seg.control(t, &x);
            x = spec.rk4_step(&x, &u, dt);
            t += dt;
            let v = seg.cost_to_go(t, &x);
            assert!(v <= prev + 1e-9, "V rose from {prev} to {v} at t={t}");
            prev = v;
        }
    }

    #[test]
    fn pole_gains_expand_characteristic_polynomials() {
        let g = pole_gains(&[-5.0, -5.1]);
        assert_abs_diff_eq!(g[0], 25.5, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], 10.1, epsilon = 1e-12);
        let g = pole_gains(&[-3.0, -3.1]);
        assert_abs_diff_eq!(g[0], 9.3, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], 6.1, epsilon = 1e-12);
        let g = pole_gains(&[-2.0]);
        assert_abs_diff_eq!(g[0], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn barrier_value_and_gradient_at_a_hand_point() {
        let shape = BarrierShape { d_s: 0.5, c: 1.0 };
        let pi = DVector::from_column_slice(&[1.0, 0.0, 0.0]);
        let pj = DVector::zeros(3);
        assert_abs_diff_eq!(barrier_h(&pi, &pj, &shape), 0.9375, epsilon = 1e-15);
        let grad = barrier_grad(&pi, &pj, &shape);
        assert_abs_diff_eq!(grad[0], 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(grad[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(grad[2], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn barrier_rates_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let shape = BarrierShape { d_s: 0.5, c: 2.0 };
        for _ in 0..50 {
            let pi = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let pj = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let vi = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let vj = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let eps = 1e-4;
            let at = |s: f64| barrier_h(&(&pi + &vi * s), &(&pj + &vj * s), &shape);
            let fd1 = (at(eps) - at(-eps)) / (2.0 * eps);
            let hdot = barrier_hdot(&pi, &pj, &vi, &vj, &shape);
            assert_abs_diff_eq!(hdot, fd1, epsilon = 1e-5 * (1.0 + fd1.abs()));
            // Coasting (zero acceleration) second derivative.
            let fd2 = (at(eps) - 2.0 * at(0.0) + at(-eps)) / (eps * eps);
            let drift = barrier_drift2(&pi, &pj, &vi, &vj, &shape);
            assert_abs_diff_eq!(drift, fd2, epsilon = 1e-4 * (1.0 + fd2.abs()));
            // The gradient row carries all control dependence.
            let grad = barrier_grad(&pi, &pj, &shape);
            let fd_grad = {
                let mut g = DVector::zeros(3);
                for k in 0..3 {
                    let mut hi = pi.clone();
                    hi[k] += eps;
                    let mut lo = pi.clone();
                    lo[k] -= eps;
                    g[k] = (barrier_h(&hi, &pj, &shape) - barrier_h(&lo, &pj, &shape))
                        / (2.0 * eps);
                }
                g
            };
            assert!((grad - fd_grad).amax() < 1e-5 * (1.0 + fd1.abs()));
        }
    }

    #[test]
    fn deviation_weight_shapes() {
        let r = DMatrix::identity(3, 3) * 2.0;
        let zero = DVector::zeros(3);
        assert_eq!(deviation_weight(&zero, &r, 3.0), DMatrix::identity(3, 3));
        let u = DVector::from_column_slice(&[1.0, 0.0, 0.0]);
        let w = deviation_weight(&u, &r, 3.0);
        // Along u the metric stiffens by 1+β, orthogonal stays 1.
        assert_abs_diff_eq!(w[(0, 0)], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w[(1, 1)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w[(2, 2)], 1.0, epsilon = 1e-12);
        assert_eq!(deviation_weight(&u, &r, 0.0), DMatrix::identity(3, 3));
        // SPD for any β > −1.
        assert!(w.cholesky().is_some());
    }

    #[test]
    fn filter_is_identity_when_unconstrained_and_projects_when_not() {
        let r = DMatrix::identity(3, 3);
        let u_des = DVector::from_column_slice(&[2.0, 0.0, 0.0]);
        let loose = SafetyRow { a: DVector::from_column_slice(&[1.0, 0.0, 0.0]), rhs: 5.0 };
        let out = filter_control(&u_des, &r, 0.0, &[loose], None).unwrap();
        assert!(!out.fallback);
        assert_abs_diff_eq!((out.u.clone() - &u_des).amax(), 0.0, epsilon = 1e-9);

        let tight = SafetyRow { a: DVector::from_column_slice(&[1.0, 0.0, 0.0]), rhs: 1.0 };
        let out = filter_control(&u_des, &r, 0.0, &[tight], None).unwrap();
        assert_abs_diff_eq!(out.u[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(out.u[1], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn infeasible_filter_falls_back_to_zero() {
        let r = DMatrix::identity(3, 3);
        let u_des = DVector::zeros(3);
        // Demand u_x ≤ −5 while |u_x| ≤ 1.
        let row = SafetyRow { a: DVector::from_column_slice(&[1.0, 0.0, 0.0]), rhs: -5.0 };
        let out = filter_control(&u_des, &r, 0.0, &[row], Some(1.0)).unwrap();
        assert!(out.fallback);
        assert_eq!(out.u, DVector::zeros(3));
    }

    #[test]
    fn head_on_pair_never_violates_the_barrier() {
        let spec = IntegratorSpec::new(2, DMatrix::identity(3, 3)).unwrap();
        let params = SafetyParams {
            gains: pole_gains(&[-5.0, -5.1]),
            beta: 0.0,
            alphas: vec![1.0, 1.0],
            radii: vec![0.5, 0.5],
            c: 1.0,
            u_max: Some(10.0),
            v_limit: None,
        };
        // Start 6 m apart, flying straight at each other at 2 m/s.
        let mut states = vec![
            DVector::from_column_slice(&[-3.0, 0.0, 0.0, 2.0, 0.0, 0.0]),
            DVector::from_column_slice(&[3.0, 0.01, 0.0, -2.0, 0.0, 0.0]),
        ];
        let goals = [
            DVector::from_column_slice(&[3.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
            DVector::from_column_slice(&[-3.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
        ];
        let horizon = 6.0;
        let segs: Vec<LqrSegment> = goals
            .iter()
            .map(|g| LqrSegment::new(&spec, horizon, g.clone()).unwrap())
            .collect();
        let dt = 1e-2;
        let mut t = 0.0;
        let mut min_h = f64::INFINITY;
        let shape = BarrierShape { d_s: 0.5, c: 1.0 };
        while t < horizon {
            let desired: Vec<DVector<f64>> = segs
                .iter()
                .zip(&states)
                .map(|(seg, x)| if seg.saturated(t) { DVector::zeros(3) } else { seg.control(t, x) })
                .collect();
            let filtered = team_filter(&spec, &states, &desired, &params).unwrap();
            // Each robot's split row must hold after filtering; their sum
            // is the joint barrier condition.
            for (i, j) in [(0usize, 1usize), (1, 0)] {
                let row = pairwise_safety_row(2, &states[i], &states[j], &shape, &params.gains, 0.5)
                    .unwrap();
                assert!(!filtered[i].fallback, "infeasible at t={t}");
                assert!(
                    row.a.dot(&filtered[i].u) <= row.rhs + 1e-7,
                    "split condition broken at t={t}"
                );
            }
            for (x, f) in states.iter_mut().zip(&filtered) {
                *x = spec.rk4_step(x, &f.u, dt);
            }
            t += dt;
            let (pi, _) = split3(&states[0], 2);
            let (pj, _) = split3(&states[1], 2);
            min_h = min_h.min(barrier_h(&pi, &pj, &shape));
        }
        assert!(min_h >= -1e-6, "barrier dipped to {min_h}");
        // The robots actually made progress through the conflict.
        assert!(states[0][0] > 0.0 && states[1][0] < 0.0, "filter froze the robots");
    }

    #[test]
    fn reference_mapping_uses_entering_primitives() {
        let primitives =
            vec![MotionPrimitive { nu: 0.0, omega: 0.0 }, MotionPrimitive { nu: 8.0, omega: 0.0 }];
        let states = vec![
            UnicycleState::new(0.0, 0.0, 0.0),
            UnicycleState::new(4.0, 0.0, 0.0),
            UnicycleState::new(8.0, 0.0, 0.0),
        ];
        let controls = vec![1, 1];
        let refs = map_to_reference(&states, &controls, &primitives, 2);
        assert_eq!(refs.len(), 3);
        // Mid waypoint arrives at speed 8 along +x.
        assert_abs_diff_eq!(refs[1][0], 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(refs[1][3], 8.0, epsilon = 1e-15);
        assert_abs_diff_eq!(refs[1][4], 0.0, epsilon = 1e-15);
        // Final waypoint is a rest state.
        assert_abs_diff_eq!(refs[2][3], 0.0, epsilon = 1e-15);
        // Order 1 references carry positions only.
        let refs1 = map_to_reference(&states, &controls, &primitives, 1);
        assert_eq!(refs1[1].len(), 3);
    }
}
