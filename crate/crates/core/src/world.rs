//! Simulation world: robot kinematics, target processes, sensing geometry,
//! and energy cost fields.
//!
//! Robots are unicycles driven by a small set of motion primitives
//! (forward speed `ν`, turn rate `ω`) integrated exactly over one period:
//! straight lines for `ω = 0`, circular arcs otherwise.  Aerial robots use
//! the same planar kinematics at a fixed altitude.  Targets follow
//! linear-Gaussian processes `y⁺ = A y + w`.  Sensors measure planar range
//! and/or bearing to a target's position with noise that (by default)
//! grows linearly from 10% of the maximum standard deviation at zero
//! distance to the maximum at the sensing radius; outside the sensing
//! radius or field of view a measurement carries no information at all.
//! Energy expenditure is a per-step sum of a control cost (looked up per
//! primitive) and a state cost charged inside tagged arena regions — mud
//! for ground robots, wind for aerial ones — scaled by a per-robot weight.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("target coincides with the robot position; sensing geometry is degenerate")]
    DegenerateGeometry,
    #[error("process noise matrix is not symmetric positive semidefinite")]
    BadNoise,
    #[error("control index {0} out of range for {1} primitive costs")]
    BadControlIndex(usize, usize),
    #[error("need at least {need} rollout states, got {got}")]
    ShortRollout { need: usize, got: usize },
}

/// Wrap an angle to `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let t = theta.rem_euclid(two_pi);
    if t > std::f64::consts::PI {
        t - two_pi
    } else {
        t
    }
}

/// Planar unicycle pose plus a fixed altitude for aerial platforms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnicycleState {
    pub x: f64,
    pub y: f64,
    /// Heading in radians, kept in `(-π, π]`.
    pub theta: f64,
    /// Altitude in meters; ground robots use 0.
    pub alt: f64,
}

impl UnicycleState {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta: wrap_angle(theta), alt: 0.0 }
    }

    pub fn with_alt(x: f64, y: f64, theta: f64, alt: f64) -> Self {
        Self { x, y, theta: wrap_angle(theta), alt }
    }
}

/// One motion primitive: hold `(ν, ω)` for a full planning period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionPrimitive {
    /// Forward speed in m/s.
    pub nu: f64,
    /// Turn rate in rad/s.
    pub omega: f64,
}

/// Integrate the unicycle exactly over `tau` seconds under one primitive.
pub fn step_unicycle(state: &UnicycleState, u: &MotionPrimitive, tau: f64) -> UnicycleState {
    let (x, y, th) = (state.x, state.y, state.theta);
    if u.omega.abs() < 1e-12 {
        UnicycleState {
            x: x + u.nu * tau * th.cos(),
            y: y + u.nu * tau * th.sin(),
            theta: th,
            alt: state.alt,
        }
    } else {
        let r = u.nu / u.omega;
        let th1 = th + u.omega * tau;
        UnicycleState {
            x: x + r * (th1.sin() - th.sin()),
            y: y - r * (th1.cos() - th.cos()),
            theta: wrap_angle(th1),
            alt: state.alt,
        }
    }
}

/// Roll a primitive sequence out from `start`, returning all `K+1` states.
pub fn rollout(
    start: &UnicycleState,
    primitives: &[MotionPrimitive],
    controls: &[usize],
    tau: f64,
) -> Result<Vec<UnicycleState>, WorldError> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(*start);
    for &c in controls {
        let u = primitives
            .get(c)
            .ok_or(WorldError::BadControlIndex(c, primitives.len()))?;
        let next = step_unicycle(states.last().unwrap(), u, tau);
        states.push(next);
    }
    Ok(states)
}

/// Linear-Gaussian target process `y⁺ = A y + w`, `w ~ N(0, W)`.
#[derive(Debug, Clone)]
pub struct TargetModel {
    pub a: DMatrix<f64>,
    pub w: DMatrix<f64>,
}

impl TargetModel {
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// Static planar target: position-only state, optional jitter.
    pub fn static_2d(process_noise: f64) -> Self {
        Self {
            a: DMatrix::identity(2, 2),
            w: DMatrix::identity(2, 2) * process_noise,
        }
    }

    /// Discretized planar double integrator, state `[x, y, vx, vy]`,
    /// driven by white acceleration noise of intensity `accel_noise`.
    pub fn double_integrator_2d(tau: f64, accel_noise: f64) -> Self {
        let mut a = DMatrix::identity(4, 4);
        a[(0, 2)] = tau;
        a[(1, 3)] = tau;
        let mut w = DMatrix::zeros(4, 4);
        let (t2, t3, t4) = (tau * tau, tau * tau * tau, tau * tau * tau * tau);
        for axis in 0..2 {
            w[(axis, axis)] = accel_noise * t4 / 4.0;
            w[(axis, axis + 2)] = accel_noise * t3 / 2.0;
            w[(axis + 2, axis)] = accel_noise * t3 / 2.0;
            w[(axis + 2, axis + 2)] = accel_noise * t2;
        }
        Self { a, w }
    }

    /// Symmetric PSD square root `Q √Λ Qᵀ` of `W` for noise sampling;
    /// tolerates semidefinite noise (e.g. perfectly static targets).
    fn noise_sqrt(&self) -> Result<DMatrix<f64>, WorldError> {
        let sym = (&self.w + self.w.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let d = self.dim();
        let mut out = DMatrix::zeros(d, d);
        for (i, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam < -1e-9 {
                return Err(WorldError::BadNoise);
            }
            let q = eig.eigenvectors.column(i);
            out += q * q.transpose() * lam.max(0.0).sqrt();
        }
        Ok(out)
    }
}

/// Advance one target by one period, drawing process noise from `rng`.
pub fn simulate_target_step<R: Rng + ?Sized>(
    y: &DVector<f64>,
    model: &TargetModel,
    rng: &mut R,
) -> Result<DVector<f64>, WorldError> {
    let sqrt = model.noise_sqrt()?;
    let eps = DVector::from_fn(model.dim(), |_, _| StandardNormal.sample(rng));
    Ok(&model.a * y + sqrt * eps)
}

/// Which quantities a sensor measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorKind {
    Range,
    Bearing,
    RangeBearing,
}

/// How measurement noise scales with distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseProfile {
    /// Standard deviation ramps linearly from 10% of the maximum at zero
    /// distance to the maximum at the sensing radius.
    DistanceLinear,
    /// Constant standard deviation everywhere inside the footprint.
    Constant,
}

/// Range/bearing sensor with a circular-sector footprint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub kind: SensorKind,
    /// Sensing radius in meters.
    pub max_range: f64,
    /// Field of view in radians, centered on the heading; `2π` means
    /// omnidirectional.
    pub fov: f64,
    /// Range standard deviation at the sensing radius, meters.
    pub range_std_max: f64,
    /// Bearing standard deviation at the sensing radius, radians.
    pub bearing_std_max: f64,
    pub noise: NoiseProfile,
}

impl SensorModel {
    fn scale(&self, dist: f64) -> f64 {
        match self.noise {
            NoiseProfile::DistanceLinear => 0.1 + 0.9 * (dist / self.max_range).clamp(0.0, 1.0),
            NoiseProfile::Constant => 1.0,
        }
    }

    pub fn range_std(&self, dist: f64) -> f64 {
        self.range_std_max * self.scale(dist)
    }

    pub fn bearing_std(&self, dist: f64) -> f64 {
        self.bearing_std_max * self.scale(dist)
    }

    /// True when a target at planar distance `dist` and relative bearing
    /// `rel_bearing` falls inside the sensing footprint.
    pub fn in_footprint(&self, dist: f64, rel_bearing: f64) -> bool {
        if dist > self.max_range {
            return false;
        }
        if self.fov >= 2.0 * std::f64::consts::PI - 1e-12 {
            return true;
        }
        rel_bearing.abs() <= self.fov / 2.0
    }
}

/// One scalar measurement channel linearized about a target position:
/// the predicted value, its gradient with respect to the target's planar
/// position, and the noise standard deviation at this geometry.
#[derive(Debug, Clone, Copy)]
pub struct Channel {
    pub value: f64,
    pub grad: (f64, f64),
    pub std: f64,
}

/// Linearized measurement channels for a robot/target pair, or `None`
/// when the target is outside the sensing footprint.
pub fn sensor_channels(
    robot: &UnicycleState,
    sensor: &SensorModel,
    target_xy: (f64, f64),
) -> Result<Option<Vec<Channel>>, WorldError> {
    let dx = target_xy.0 - robot.x;
    let dy = target_xy.1 - robot.y;
    let d2 = dx * dx + dy * dy;
    let d = d2.sqrt();
    if d < 1e-12 {
        return Err(WorldError::DegenerateGeometry);
    }
    let rel_bearing = wrap_angle(dy.atan2(dx) - robot.theta);
    if !sensor.in_footprint(d, rel_bearing) {
        return Ok(None);
    }
    let mut out = Vec::with_capacity(2);
    if matches!(sensor.kind, SensorKind::Range | SensorKind::RangeBearing) {
        out.push(Channel {
            value: d,
            grad: (dx / d, dy / d),
            std: sensor.range_std(d),
        });
    }
    if matches!(sensor.kind, SensorKind::Bearing | SensorKind::RangeBearing) {
        out.push(Channel {
            value: rel_bearing,
            grad: (-dy / d2, dx / d2),
            std: sensor.bearing_std(d),
        });
    }
    Ok(Some(out))
}

/// Information matrix `HᵀV⁻¹H` contributed by one robot observing one
/// target whose position occupies indices 0 and 1 of a `dim`-dimensional
/// state block.  Outside the footprint the contribution is exactly zero.
pub fn sensor_info_matrix(
    robot: &UnicycleState,
    sensor: &SensorModel,
    target_xy: (f64, f64),
    dim: usize,
) -> Result<DMatrix<f64>, WorldError> {
    let mut m = DMatrix::zeros(dim, dim);
    let Some(channels) = sensor_channels(robot, sensor, target_xy)? else {
        return Ok(m);
    };
    for ch in channels {
        let inv_var = 1.0 / (ch.std * ch.std);
        m[(0, 0)] += ch.grad.0 * ch.grad.0 * inv_var;
        m[(0, 1)] += ch.grad.0 * ch.grad.1 * inv_var;
        m[(1, 0)] += ch.grad.1 * ch.grad.0 * inv_var;
        m[(1, 1)] += ch.grad.1 * ch.grad.1 * inv_var;
    }
    Ok(m)
}

/// Robot platform class; decides which arena regions charge state cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobotClass {
    Ugv,
    Uav,
}

/// Terrain kinds that penalize traversal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    /// Penalizes ground robots.
    Mud,
    /// Penalizes aerial robots.
    Wind,
}

impl RegionKind {
    pub fn affects(&self, class: RobotClass) -> bool {
        matches!(
            (self, class),
            (RegionKind::Mud, RobotClass::Ugv) | (RegionKind::Wind, RobotClass::Uav)
        )
    }
}

/// Axis-aligned rectangular cost region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub kind: RegionKind,
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
    /// State cost charged per step spent inside, for affected classes.
    pub cost: f64,
}

impl Region {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.xmin && x <= self.xmax && y >= self.ymin && y <= self.ymax
    }
}

/// Per-robot energy model: arena regions, per-primitive control costs,
/// the robot's energy weight `m`, and the per-trajectory cost bound.
#[derive(Debug, Clone)]
pub struct CostField {
    pub class: RobotClass,
    pub regions: Vec<Region>,
    /// Control cost per primitive, aligned with the robot's primitive set.
    pub ctrl_costs: Vec<f64>,
    /// Energy weight `m ≥ 0` multiplying this robot's trajectory cost.
    pub weight: f64,
    /// Upper bound on the unweighted per-trajectory cost (`Σ` over steps).
    pub cmax: f64,
}

impl CostField {
    /// State cost at a pose: sum of costs of containing regions whose kind
    /// affects this robot class.
    pub fn state_cost(&self, state: &UnicycleState) -> f64 {
        self.regions
            .iter()
            .filter(|r| r.kind.affects(self.class) && r.contains(state.x, state.y))
            .map(|r| r.cost)
            .sum()
    }

    /// Largest possible single-step cost (control plus state).
    pub fn max_step_cost(&self) -> f64 {
        let ctrl = self.ctrl_costs.iter().cloned().fold(0.0, f64::max);
        let state = self
            .regions
            .iter()
            .filter(|r| r.kind.affects(self.class))
            .map(|r| r.cost)
            .sum::<f64>();
        ctrl + state
    }

    /// Default cost bound for horizon `k`: every step at worst case.
    pub fn default_cmax(&self, k: usize) -> f64 {
        k as f64 * self.max_step_cost()
    }
}

/// Weighted trajectory energy `m · Σ_k (c_ctrl(u_k) + c_state(x_k))`.
///
/// `controls` index into `field.ctrl_costs`; state cost is charged at the
/// pre-transition states `x_0 … x_{K-1}`.
pub fn trajectory_energy(
    controls: &[usize],
    states: &[UnicycleState],
    field: &CostField,
) -> Result<f64, WorldError> {
    if states.len() < controls.len() {
        return Err(WorldError::ShortRollout { need: controls.len(), got: states.len() });
    }
    let mut total = 0.0;
    for (k, &c) in controls.iter().enumerate() {
        let ctrl = *field
            .ctrl_costs
            .get(c)
            .ok_or(WorldError::BadControlIndex(c, field.ctrl_costs.len()))?;
        total += ctrl + field.state_cost(&states[k]);
    }
    Ok(field.weight * total)
}
