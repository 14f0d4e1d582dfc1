//! Scenario configuration, closed-loop mission simulation, benchmarks, and
//! metrics export.
//!
//! A [`ScenarioConfig`] describes one mission: the robot team, the targets,
//! terrain cost regions, planner selection, and controller settings.  Five
//! built-in presets (see [`preset_names`]) cover the standard studies:
//!
//! * `sim1-dynamic-targets` — three ground robots with graded energy
//!   weights tracking three accelerating targets;
//! * `sim2-heterogeneous` — two ground robots and one aerial robot over
//!   overlapping mud/wind cost regions and six static targets;
//! * `sphere-bench` — three aerial robots, no targets; exercises the
//!   safety filter and the hold-position planning edge case;
//! * `hil-net-bench` — three aerial robots over a target grid with
//!   simulated network delay;
//! * `hw-analog` — a desk-scale analog of a hardware run: slow
//!   primitives, range-only sensing, and LQR-based candidate energies.
//!
//! [`run_tracking_sim`] closes the loop: replan from the shared belief,
//! hand each robot its waypoints, track them with the fixed-final-state
//! LQR under the pairwise safety filter, simulate target motion and noisy
//! measurements, and fold the measurements back into the belief.
//! [`run_plan_once`] performs a single planning solve.
//! [`run_sphere_benchmark`] runs the antipodal sphere exchange stress
//! test, and [`run_planner_bench`] sweeps team sizes and planner variants
//! over synthetic instances.
//!
//! # Metrics and export
//!
//! Every run produces a [`MetricsRecord`].  [`export`] writes CSV (plus a
//! JSON sidecar) or JSON alone when the output path ends in `.json`.  The
//! CSV layout is stable: two comment lines `# seed=<u64>` and
//! `# config_hash=<hex>`, the header [`CSV_HEADER`], then one line per
//! row, sections ordered `replan`, `estimate`, `control`, `run` — the
//! `kind` column names the section.  Floats are printed with nine
//! significant digits; inapplicable cells stay empty; vector-valued cells
//! (per-robot efforts and errors) join entries with `;`.  Wall-clock time
//! appears only in the JSON record, so CSV output is byte-identical for
//! a fixed configuration and seed.

use crate::control::{
    barrier_h, pole_gains, team_filter, map_to_reference, BarrierShape, ControlError,
    FilteredControl, IntegratorSpec, LqrSegment, SafetyParams,
};
use crate::estimation::{
    apply_measurements, predict_belief, synth, Belief, EstimationError, LinearMeasurement, Oracle,
    TrajId,
};
use crate::netsim::DelayModel;
use crate::planner::{
    centralized_local_search, coordinate_descent, distributed_local_search, exhaustive_best,
    CdOrdering, PlanError, PlanningProblem, SearchParams, Solution,
};
use crate::trajopt::{
    build_joint_model, generate_candidates, loiter_primitive, register_candidates,
    CandidateParams, CandidateTrajectory, RobotSpec, TrajoptError,
};
use crate::world::{
    rollout, sensor_channels, simulate_target_step, trajectory_energy, wrap_angle, CostField,
    MotionPrimitive, NoiseProfile, Region, RegionKind, RobotClass, SensorKind, SensorModel,
    TargetModel, UnicycleState, WorldError,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Trajopt(#[from] TrajoptError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("scenario parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 3 for runtime
    /// failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config(_) | HarnessError::Parse(_) => 2,
            _ => 3,
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Planner selection, tagged by `algo` in scenario files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "algo", rename_all = "snake_case")]
pub enum PlannerConfig {
    /// Distributed local search over the scenario's delay network.
    Dls {
        #[serde(default = "default_true")]
        lazy: bool,
        #[serde(default = "default_true")]
        warm_start: bool,
    },
    /// The same search evaluated in one process.
    Cls {
        #[serde(default = "default_true")]
        lazy: bool,
        #[serde(default = "default_true")]
        warm_start: bool,
    },
    /// Sequential coordinate-descent baseline.
    Cd {
        #[serde(default)]
        order: CdOrderConfig,
    },
}

/// Robot visiting order for the coordinate-descent baseline.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum CdOrderConfig {
    #[default]
    ByIndex,
    /// Lightest energy weight commits first.
    WeightAscending,
    /// Heaviest energy weight commits first.
    WeightDescending,
}

/// How a robot's trajectory energy is charged during planning.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum EnergyModel {
    /// Per-primitive control cost plus terrain state cost (the default).
    #[default]
    CtrlState,
    /// Minimum control energy of the tracking LQR along the candidate's
    /// waypoints, scaled by `scale`.  Requires an explicit `cmax`.
    Lqr { scale: f64 },
}

/// One robot: platform, pose, planning costs, sensing, and footprint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RobotConfig {
    pub class: RobotClass,
    pub x: f64,
    pub y: f64,
    /// Initial heading in radians.
    pub theta: f64,
    /// Altitude in meters; ground robots use 0.
    #[serde(default)]
    pub alt: f64,
    /// Energy weight `m ≥ 0` trading information against energy.
    pub weight: f64,
    /// Unweighted per-trajectory cost bound; defaults to the worst case
    /// over the planning horizon.
    #[serde(default)]
    pub cmax: Option<f64>,
    pub sensor: SensorModel,
    pub primitives: Vec<MotionPrimitive>,
    /// Control cost per primitive, aligned with `primitives`.
    pub ctrl_costs: Vec<f64>,
    /// Safety radius in meters; a pair's separation shape uses the larger
    /// of the two radii.
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default)]
    pub energy: EnergyModel,
}

/// One target, tagged by `motion` in scenario files.  The belief prior is
/// centered on the true initial state with standard deviation
/// `prior_std` per axis.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "motion", rename_all = "snake_case")]
pub enum TargetConfig {
    Static {
        x: f64,
        y: f64,
        #[serde(default = "default_process_noise")]
        process_noise: f64,
        prior_std: f64,
    },
    DoubleIntegrator {
        x: f64,
        y: f64,
        vx: f64,
        vy: f64,
        accel_noise: f64,
        /// Simulated speed is clamped to this bound.
        top_speed: f64,
        prior_std: f64,
    },
}

impl TargetConfig {
    pub fn model(&self, tau: f64) -> TargetModel {
        match *self {
            TargetConfig::Static { process_noise, .. } => TargetModel::static_2d(process_noise),
            TargetConfig::DoubleIntegrator { accel_noise, .. } => {
                TargetModel::double_integrator_2d(tau, accel_noise)
            }
        }
    }

    pub fn initial_state(&self) -> DVector<f64> {
        match *self {
            TargetConfig::Static { x, y, .. } => DVector::from_vec(vec![x, y]),
            TargetConfig::DoubleIntegrator { x, y, vx, vy, .. } => {
                DVector::from_vec(vec![x, y, vx, vy])
            }
        }
    }

    pub fn prior(&self) -> Belief {
        let mean = self.initial_state();
        let std = match *self {
            TargetConfig::Static { prior_std, .. }
            | TargetConfig::DoubleIntegrator { prior_std, .. } => prior_std,
        };
        let d = mean.len();
        Belief { mean, cov: DMatrix::identity(d, d) * std * std }
    }

    pub fn top_speed(&self) -> Option<f64> {
        match *self {
            TargetConfig::Static { .. } => None,
            TargetConfig::DoubleIntegrator { top_speed, .. } => Some(top_speed),
        }
    }
}

/// Tracking controller and safety filter settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    /// Integrator chain order: 1 (velocity control) or 2 (acceleration).
    pub order: usize,
    /// Stabilization poles, one per order; all strictly negative.
    pub poles: Vec<f64>,
    /// Run the pairwise safety filter; when false the LQR command is
    /// applied unmodified.
    #[serde(default = "default_true")]
    pub safety: bool,
    /// Deviation-metric knob: larger values make a filtered robot keep
    /// its speed and swerve rather than brake.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Vertical stretch of the separation shape.
    #[serde(default = "default_c")]
    pub c: f64,
    /// Per-axis control bound for the filter.
    #[serde(default)]
    pub u_max: Option<f64>,
    /// Speed bound `(v_max, gain)` enforced by the filter (order 2 only).
    #[serde(default)]
    pub v_limit: Option<(f64, f64)>,
    /// Per-robot responsibility weights; defaults to an equal split.
    #[serde(default)]
    pub alphas: Option<Vec<f64>>,
    /// Diagonal of the control-effort weight `R`.
    #[serde(default = "default_r_diag")]
    pub r_diag: [f64; 3],
}

/// One complete mission description.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// Master seed; every random stream in the run derives from it.
    pub seed: u64,
    /// Planning period in seconds (one primitive hold).
    pub tau: f64,
    /// Planning horizon in steps (candidate tree depth).
    pub depth: usize,
    /// Replan every this many planning steps.
    pub replan_every: usize,
    /// Mission length in planning steps.
    pub mission_steps: usize,
    /// Controller substep in seconds; must divide `tau`.
    pub control_dt: f64,
    /// Maximum candidates kept per robot.
    pub candidate_cap: usize,
    /// Information tolerance for candidate-tree thinning.
    pub eps: f64,
    /// State-distance tolerance for candidate-tree thinning.
    pub delta: f64,
    /// Planner approximation knob (acceptance threshold `1 + α/N⁴`).
    pub alpha: f64,
    pub planner: PlannerConfig,
    /// Message delay for the distributed planner.
    #[serde(default = "default_delay")]
    pub network: DelayModel,
    pub robots: Vec<RobotConfig>,
    #[serde(default)]
    pub targets: Vec<TargetConfig>,
    #[serde(default)]
    pub regions: Vec<Region>,
    pub control: ControlConfig,
}

fn default_true() -> bool {
    true
}
fn default_radius() -> f64 {
    0.5
}
fn default_process_noise() -> f64 {
    1e-3
}
fn default_beta() -> f64 {
    0.5
}
fn default_c() -> f64 {
    1.0
}
fn default_r_diag() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}
fn default_delay() -> DelayModel {
    DelayModel::Zero
}

/// Reject configurations that cannot be simulated.
pub fn validate(cfg: &ScenarioConfig) -> Result<(), HarnessError> {
    let err = |msg: String| Err(HarnessError::Config(msg));
    if cfg.name.is_empty() {
        return err("scenario name is empty".into());
    }
    if cfg.robots.is_empty() {
        return err("at least one robot is required".into());
    }
    if !(cfg.tau > 0.0) {
        return err(format!("tau must be positive, got {}", cfg.tau));
    }
    if cfg.depth == 0 || cfg.candidate_cap == 0 {
        return err("depth and candidate_cap must be at least 1".into());
    }
    if cfg.replan_every == 0 || cfg.replan_every > cfg.depth {
        return err(format!(
            "replan_every must be in 1..=depth ({}), got {}",
            cfg.depth, cfg.replan_every
        ));
    }
    if cfg.mission_steps == 0 {
        return err("mission_steps must be at least 1".into());
    }
    if !(cfg.control_dt > 0.0) {
        return err(format!("control_dt must be positive, got {}", cfg.control_dt));
    }
    let substeps = (cfg.tau / cfg.control_dt).round();
    if substeps < 1.0 || (cfg.tau - substeps * cfg.control_dt).abs() > 1e-9 * cfg.tau.max(1.0) {
        return err(format!(
            "control_dt {} must evenly divide tau {}",
            cfg.control_dt, cfg.tau
        ));
    }
    if cfg.eps < 0.0 || cfg.delta < 0.0 {
        return err("thinning tolerances must be nonnegative".into());
    }
    if !(cfg.alpha > 0.0) {
        return err(format!("alpha must be positive, got {}", cfg.alpha));
    }
    for (i, r) in cfg.robots.iter().enumerate() {
        if r.weight < 0.0 {
            return err(format!("robot {i}: energy weight must be nonnegative"));
        }
        if r.primitives.is_empty() {
            return err(format!("robot {i}: no motion primitives"));
        }
        if r.ctrl_costs.len() != r.primitives.len() {
            return err(format!(
                "robot {i}: {} control costs for {} primitives",
                r.ctrl_costs.len(),
                r.primitives.len()
            ));
        }
        if r.ctrl_costs.iter().any(|&c| c < 0.0) {
            return err(format!("robot {i}: control costs must be nonnegative"));
        }
        if !(r.radius > 0.0) {
            return err(format!("robot {i}: safety radius must be positive"));
        }
        if let Some(cm) = r.cmax {
            if !(cm > 0.0) {
                return err(format!("robot {i}: cmax must be positive when given"));
            }
        }
        if !(r.sensor.max_range > 0.0) || !(r.sensor.fov > 0.0) {
            return err(format!("robot {i}: sensor range and field of view must be positive"));
        }
        if !(r.sensor.range_std_max > 0.0) || !(r.sensor.bearing_std_max > 0.0) {
            return err(format!("robot {i}: sensor noise levels must be positive"));
        }
        match r.energy {
            EnergyModel::CtrlState => {}
            EnergyModel::Lqr { scale } => {
                if !(scale > 0.0) {
                    return err(format!("robot {i}: LQR energy scale must be positive"));
                }
                if r.cmax.is_none() {
                    return err(format!(
                        "robot {i}: the LQR energy model needs an explicit cmax bound"
                    ));
                }
            }
        }
    }
    for (t, tc) in cfg.targets.iter().enumerate() {
        match *tc {
            TargetConfig::Static { process_noise, prior_std, .. } => {
                if process_noise < 0.0 || !(prior_std > 0.0) {
                    return err(format!("target {t}: bad noise or prior"));
                }
            }
            TargetConfig::DoubleIntegrator { accel_noise, top_speed, prior_std, .. } => {
                if accel_noise < 0.0 || !(top_speed > 0.0) || !(prior_std > 0.0) {
                    return err(format!("target {t}: bad noise, top speed, or prior"));
                }
            }
        }
    }
    for (k, reg) in cfg.regions.iter().enumerate() {
        if reg.xmax < reg.xmin || reg.ymax < reg.ymin || reg.cost < 0.0 {
            return err(format!("region {k}: empty extent or negative cost"));
        }
    }
    let c = &cfg.control;
    if c.order != 1 && c.order != 2 {
        return err(format!("controller order must be 1 or 2, got {}", c.order));
    }
    if c.poles.len() != c.order || c.poles.iter().any(|&p| p >= 0.0) {
        return err(format!(
            "need {} strictly negative poles, got {:?}",
            c.order, c.poles
        ));
    }
    if c.r_diag.iter().any(|&v| !(v > 0.0)) {
        return err("control weight diagonal must be positive".into());
    }
    if !(c.c > 0.0) || c.beta < 0.0 {
        return err("barrier stretch must be positive and beta nonnegative".into());
    }
    if let Some(u) = c.u_max {
        if !(u > 0.0) {
            return err("u_max must be positive when given".into());
        }
    }
    if let Some((v, g)) = c.v_limit {
        if !(v > 0.0) || !(g > 0.0) {
            return err("v_limit entries must be positive".into());
        }
    }
    if let Some(alphas) = &c.alphas {
        if alphas.len() != cfg.robots.len() || alphas.iter().any(|&a| !(a > 0.0)) {
            return err(format!(
                "alphas must list {} positive weights",
                cfg.robots.len()
            ));
        }
    }
    Ok(())
}

/// SHA-256 of the canonical JSON serialization; embedded in every export
/// so records can be traced back to an exact configuration.
pub fn config_hash(cfg: &ScenarioConfig) -> Result<String, HarnessError> {
    Ok(hex_digest(&serde_json::to_vec(cfg)?))
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        let _ = write!(s, "{b:02x}");
    }
    s
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

/// Names accepted by [`preset`] and [`load_scenario`].
pub fn preset_names() -> &'static [&'static str] {
    &[
        "sim1-dynamic-targets",
        "sim2-heterogeneous",
        "sphere-bench",
        "hil-net-bench",
        "hw-analog",
    ]
}

fn cruise_primitives(nu: f64) -> Vec<MotionPrimitive> {
    vec![
        MotionPrimitive { nu: 0.0, omega: 0.0 },
        MotionPrimitive { nu: 0.0, omega: FRAC_PI_2 },
        MotionPrimitive { nu: 0.0, omega: -FRAC_PI_2 },
        MotionPrimitive { nu, omega: 0.0 },
        MotionPrimitive { nu, omega: FRAC_PI_2 },
        MotionPrimitive { nu, omega: -FRAC_PI_2 },
    ]
}

fn ugv_costs() -> Vec<f64> {
    vec![0.0, 1.0, 1.0, 2.0, 2.0, 2.0]
}

fn uav_costs() -> Vec<f64> {
    vec![2.0, 2.0, 2.0, 4.0, 4.0, 4.0]
}

fn range_bearing_sensor(max_range: f64, fov: f64) -> SensorModel {
    SensorModel {
        kind: SensorKind::RangeBearing,
        max_range,
        fov,
        range_std_max: 0.1,
        bearing_std_max: 5.0_f64.to_radians(),
        noise: NoiseProfile::DistanceLinear,
    }
}

fn order2_control(poles: [f64; 2], u_max: Option<f64>) -> ControlConfig {
    ControlConfig {
        order: 2,
        poles: poles.to_vec(),
        safety: true,
        beta: 0.5,
        c: 1.0,
        u_max,
        v_limit: None,
        alphas: None,
        r_diag: [1.0, 1.0, 1.0],
    }
}

fn sim1_dynamic_targets() -> ScenarioConfig {
    let robot = |x: f64, y: f64, theta: f64, weight: f64| RobotConfig {
        class: RobotClass::Ugv,
        x,
        y,
        theta,
        alt: 0.0,
        weight,
        cmax: None,
        sensor: range_bearing_sensor(8.0, 160.0_f64.to_radians()),
        primitives: cruise_primitives(4.0),
        ctrl_costs: ugv_costs(),
        radius: 0.5,
        energy: EnergyModel::CtrlState,
    };
    let target = |x: f64, y: f64, vx: f64, vy: f64| TargetConfig::DoubleIntegrator {
        x,
        y,
        vx,
        vy,
        accel_noise: 0.05,
        top_speed: 2.0,
        prior_std: 3.0,
    };
    ScenarioConfig {
        name: "sim1-dynamic-targets".into(),
        seed: 1,
        tau: 0.5,
        depth: 10,
        replan_every: 5,
        mission_steps: 20,
        control_dt: 0.1,
        candidate_cap: 48,
        eps: 1.0,
        delta: 2.0,
        alpha: 1.0,
        planner: PlannerConfig::Dls { lazy: true, warm_start: true },
        network: DelayModel::Normal { mean: 0.005, std: 0.001 },
        robots: vec![
            robot(-15.0, -15.0, 45.0_f64.to_radians(), 0.1),
            robot(15.0, -15.0, 135.0_f64.to_radians(), 0.2),
            robot(0.0, 15.0, -FRAC_PI_2, 0.3),
        ],
        targets: vec![
            target(-5.0, 0.0, 0.5, 0.3),
            target(5.0, 5.0, -0.4, 0.2),
            target(0.0, -8.0, 0.1, -0.5),
        ],
        regions: Vec::new(),
        control: order2_control([-5.0, -5.1], None),
    }
}

fn sim2_heterogeneous() -> ScenarioConfig {
    let ugv = |x: f64, y: f64, theta: f64| RobotConfig {
        class: RobotClass::Ugv,
        x,
        y,
        theta,
        alt: 0.0,
        weight: 0.2,
        cmax: None,
        sensor: range_bearing_sensor(15.0, 160.0_f64.to_radians()),
        primitives: cruise_primitives(4.0),
        ctrl_costs: ugv_costs(),
        radius: 0.5,
        energy: EnergyModel::CtrlState,
    };
    let target = |x: f64, y: f64| TargetConfig::Static { x, y, process_noise: 0.01, prior_std: 5.0 };
    ScenarioConfig {
        name: "sim2-heterogeneous".into(),
        seed: 2,
        tau: 0.5,
        depth: 10,
        replan_every: 5,
        mission_steps: 10,
        control_dt: 0.1,
        candidate_cap: 32,
        eps: 1.0,
        delta: 1.5,
        alpha: 1.0,
        planner: PlannerConfig::Dls { lazy: true, warm_start: true },
        network: DelayModel::Normal { mean: 0.005, std: 0.001 },
        robots: vec![
            ugv(-20.0, -20.0, 45.0_f64.to_radians()),
            ugv(20.0, -20.0, 135.0_f64.to_radians()),
            RobotConfig {
                class: RobotClass::Uav,
                x: 0.0,
                y: -22.0,
                theta: FRAC_PI_2,
                alt: 3.0,
                weight: 0.2,
                cmax: None,
                sensor: range_bearing_sensor(20.0, TAU),
                primitives: cruise_primitives(5.0),
                ctrl_costs: uav_costs(),
                radius: 0.75,
                energy: EnergyModel::CtrlState,
            },
        ],
        targets: vec![
            target(-15.0, 10.0),
            target(0.0, 17.0),
            target(15.0, 10.0),
            target(-10.0, -5.0),
            target(10.0, -5.0),
            target(0.0, 0.0),
        ],
        regions: vec![
            Region { kind: RegionKind::Mud, xmin: -7.0, xmax: 7.0, ymin: 2.0, ymax: 12.0, cost: 3.0 },
            Region { kind: RegionKind::Wind, xmin: -12.0, xmax: 0.0, ymin: -2.0, ymax: 15.0, cost: 3.0 },
        ],
        control: order2_control([-5.0, -5.1], None),
    }
}

fn sphere_bench_preset() -> ScenarioConfig {
    let robot = |x: f64, y: f64, theta: f64| RobotConfig {
        class: RobotClass::Uav,
        x,
        y,
        theta,
        alt: 1.5,
        weight: 0.1,
        cmax: None,
        sensor: range_bearing_sensor(5.0, TAU),
        primitives: vec![
            MotionPrimitive { nu: 0.0, omega: 0.0 },
            MotionPrimitive { nu: 2.0, omega: 0.0 },
            MotionPrimitive { nu: 2.0, omega: 1.0 },
            MotionPrimitive { nu: 2.0, omega: -1.0 },
        ],
        ctrl_costs: vec![0.0, 1.0, 1.0, 1.0],
        radius: 0.5,
        energy: EnergyModel::CtrlState,
    };
    ScenarioConfig {
        name: "sphere-bench".into(),
        seed: 3,
        tau: 0.5,
        depth: 4,
        replan_every: 2,
        mission_steps: 4,
        control_dt: 0.05,
        candidate_cap: 8,
        eps: 0.0,
        delta: 0.0,
        alpha: 1.0,
        planner: PlannerConfig::Dls { lazy: true, warm_start: true },
        network: DelayModel::Zero,
        robots: vec![
            robot(0.0, 0.0, 0.0),
            robot(6.0, 0.0, PI),
            robot(3.0, 5.2, -FRAC_PI_2),
        ],
        targets: Vec::new(),
        regions: Vec::new(),
        control: order2_control([-5.0, -5.1], Some(10.0)),
    }
}

fn hil_net_bench() -> ScenarioConfig {
    let robot = |x: f64, y: f64, theta: f64| RobotConfig {
        class: RobotClass::Uav,
        x,
        y,
        theta,
        alt: 3.0,
        weight: 0.3,
        cmax: None,
        sensor: range_bearing_sensor(20.0, TAU),
        primitives: cruise_primitives(8.0),
        ctrl_costs: uav_costs(),
        radius: 0.75,
        energy: EnergyModel::CtrlState,
    };
    let mut targets = Vec::new();
    for gy in [-20.0, 0.0, 20.0] {
        for gx in [-20.0, 0.0, 20.0] {
            targets.push(TargetConfig::Static { x: gx, y: gy, process_noise: 0.01, prior_std: 4.0 });
        }
    }
    ScenarioConfig {
        name: "hil-net-bench".into(),
        seed: 4,
        tau: 0.5,
        depth: 8,
        replan_every: 4,
        mission_steps: 8,
        control_dt: 0.1,
        candidate_cap: 24,
        eps: 1.0,
        delta: 2.0,
        alpha: 1.0,
        planner: PlannerConfig::Dls { lazy: true, warm_start: true },
        network: DelayModel::Normal { mean: 0.005, std: 0.001 },
        robots: vec![
            robot(-25.0, -25.0, 45.0_f64.to_radians()),
            robot(25.0, -25.0, 135.0_f64.to_radians()),
            robot(0.0, 25.0, -FRAC_PI_2),
        ],
        targets,
        regions: Vec::new(),
        control: order2_control([-5.0, -5.1], None),
    }
}

fn hw_analog() -> ScenarioConfig {
    let slow_primitives = |fast: f64| {
        vec![
            MotionPrimitive { nu: 0.0, omega: 0.0 },
            MotionPrimitive { nu: 0.3, omega: 0.0 },
            MotionPrimitive { nu: 0.3, omega: 0.5 },
            MotionPrimitive { nu: 0.3, omega: -0.5 },
            MotionPrimitive { nu: fast, omega: 0.0 },
            MotionPrimitive { nu: fast, omega: 0.5 },
            MotionPrimitive { nu: fast, omega: -0.5 },
        ]
    };
    let range_sensor = |max_range: f64, std: f64| SensorModel {
        kind: SensorKind::Range,
        max_range,
        fov: TAU,
        range_std_max: std,
        bearing_std_max: 1.0,
        noise: NoiseProfile::Constant,
    };
    let ugv = |x: f64, y: f64, theta: f64| RobotConfig {
        class: RobotClass::Ugv,
        x,
        y,
        theta,
        alt: 0.0,
        weight: 1.0,
        cmax: Some(5.0),
        sensor: range_sensor(5.0, 1.0),
        primitives: slow_primitives(0.6),
        ctrl_costs: vec![0.0; 7],
        radius: 1.0,
        energy: EnergyModel::Lqr { scale: 0.1 },
    };
    ScenarioConfig {
        name: "hw-analog".into(),
        seed: 5,
        tau: 3.0,
        depth: 8,
        replan_every: 2,
        mission_steps: 6,
        control_dt: 0.1,
        candidate_cap: 24,
        eps: 5.0,
        delta: 1.5,
        alpha: 1.0,
        planner: PlannerConfig::Dls { lazy: true, warm_start: true },
        network: DelayModel::Normal { mean: 0.005, std: 0.001 },
        robots: vec![
            ugv(-4.0, -3.0, 0.0),
            ugv(4.0, -3.0, PI),
            RobotConfig {
                class: RobotClass::Uav,
                x: 0.0,
                y: -4.5,
                theta: FRAC_PI_2,
                alt: 3.0,
                weight: 1.0,
                cmax: Some(5.0),
                sensor: range_sensor(8.0, 0.4),
                primitives: slow_primitives(0.8),
                ctrl_costs: vec![0.0; 7],
                radius: 1.5,
                energy: EnergyModel::Lqr { scale: 0.1 },
            },
        ],
        targets: vec![
            TargetConfig::Static { x: 0.0, y: 1.5, process_noise: 0.001, prior_std: 1.0 },
            TargetConfig::DoubleIntegrator {
                x: 2.0,
                y: -1.0,
                vx: -0.15,
                vy: 0.0,
                accel_noise: 0.005,
                top_speed: 0.15,
                prior_std: 1.0,
            },
            TargetConfig::DoubleIntegrator {
                x: -2.0,
                y: -1.0,
                vx: 0.15,
                vy: 0.0,
                accel_noise: 0.005,
                top_speed: 0.15,
                prior_std: 1.0,
            },
        ],
        regions: Vec::new(),
        control: ControlConfig {
            order: 2,
            poles: vec![-3.0, -3.1],
            safety: true,
            beta: 0.5,
            c: 1.0,
            u_max: Some(3.0),
            v_limit: None,
            alphas: None,
            r_diag: [1.0, 1.0, 1.0],
        },
    }
}

/// Build a named preset, or `None` for unknown names.
pub fn preset(name: &str) -> Option<ScenarioConfig> {
    match name {
        "sim1-dynamic-targets" => Some(sim1_dynamic_targets()),
        "sim2-heterogeneous" => Some(sim2_heterogeneous()),
        "sphere-bench" => Some(sphere_bench_preset()),
        "hil-net-bench" => Some(hil_net_bench()),
        "hw-analog" => Some(hw_analog()),
        _ => None,
    }
}

/// Resolve a scenario argument: preset names first, then a JSON file path.
pub fn load_scenario(arg: &str) -> Result<ScenarioConfig, HarnessError> {
    if let Some(cfg) = preset(arg) {
        return Ok(cfg);
    }
    let path = Path::new(arg);
    if !path.exists() {
        return Err(HarnessError::Config(format!(
            "unknown scenario '{arg}': not one of the presets ({}) and not a file",
            preset_names().join(", ")
        )));
    }
    let text = fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("cannot read scenario file '{arg}': {e}")))?;
    let cfg: ScenarioConfig = serde_json::from_str(&text)?;
    validate(&cfg)?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Metrics rows and export
// ---------------------------------------------------------------------------

/// One planning solve inside a mission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplanRow {
    pub step: usize,
    pub time: f64,
    /// Team information value of the selected set.
    pub mi: f64,
    /// Total weighted energy of the selected set.
    pub energy: f64,
    /// Objective offset `Ω = Σ mᵢ·C_max,i`.
    pub omega: f64,
    /// Planner objective `g(S) = mi − energy + omega`.
    pub objective: f64,
    /// Oracle evaluations that ran the filter (cache misses).
    pub evals: u64,
    /// All oracle lookups including cache hits.
    pub queries: u64,
    /// Synchronized proposal-exchange rounds.
    pub rounds: u64,
    /// Network messages sent.
    pub messages: u64,
}

/// Tracking-filter quality after one planning step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub step: usize,
    pub time: f64,
    /// RMS position error of the belief means against the true targets.
    pub rmse_true: f64,
    /// RMS predicted position standard deviation from the covariances.
    pub rmse_est: f64,
}

/// Safety-filter outcome at one controller substep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRow {
    pub step: usize,
    pub time: f64,
    /// Smallest pairwise barrier value (`None` for a single robot).
    pub min_h: Option<f64>,
    /// Robots whose QP fell back to the stop command this substep.
    pub fallbacks: u64,
    /// Total constraint rows tight at the optimum across the team.
    pub active_rows: u64,
    /// Instantaneous control power `½uᵀRu` per robot.
    pub powers: Vec<f64>,
}

/// One complete run (mission, benchmark trial, or sweep point).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub index: usize,
    pub label: String,
    pub mi: Option<f64>,
    pub energy: Option<f64>,
    pub objective: Option<f64>,
    pub evals: Option<f64>,
    pub queries: Option<f64>,
    pub rounds: Option<f64>,
    pub messages: Option<f64>,
    /// Exhaustive optimum (benchmarks only).
    pub ground: Option<f64>,
    pub min_h: Option<f64>,
    pub fallbacks: u64,
    /// False when any safety QP fell back during the run.
    pub feasible: bool,
    /// Executed control effort `∫½uᵀRu` per robot.
    pub efforts: Vec<f64>,
    /// Final distance to the tracked reference (or goal) per robot.
    pub final_errors: Vec<f64>,
    /// Planned LQR effort per robot, accumulated segment by segment.
    pub planned_efforts: Vec<f64>,
}

/// Everything a run produces; serializes losslessly to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub config_hash: String,
    pub n_robots: usize,
    pub replans: Vec<ReplanRow>,
    pub estimates: Vec<EstimateRow>,
    pub controls: Vec<ControlRow>,
    pub runs: Vec<RunRow>,
    /// Wall-clock seconds; never written to CSV.
    pub wall_s: f64,
}

/// Fixed CSV column order shared by all row kinds.
pub const CSV_HEADER: &str = "kind,step,time,index,label,mi,energy,omega,objective,evals,queries,\
rounds,messages,ground,min_h,fallbacks,active_rows,rmse_true,rmse_est,feasible,efforts,\
final_errors,planned_efforts";

const N_COLS: usize = 23;
const COL_KIND: usize = 0;
const COL_STEP: usize = 1;
const COL_TIME: usize = 2;
const COL_INDEX: usize = 3;
const COL_LABEL: usize = 4;
const COL_MI: usize = 5;
const COL_ENERGY: usize = 6;
const COL_OMEGA: usize = 7;
const COL_OBJECTIVE: usize = 8;
const COL_EVALS: usize = 9;
const COL_QUERIES: usize = 10;
const COL_ROUNDS: usize = 11;
const COL_MESSAGES: usize = 12;
const COL_GROUND: usize = 13;
const COL_MIN_H: usize = 14;
const COL_FALLBACKS: usize = 15;
const COL_ACTIVE_ROWS: usize = 16;
const COL_RMSE_TRUE: usize = 17;
const COL_RMSE_EST: usize = 18;
const COL_FEASIBLE: usize = 19;
const COL_EFFORTS: usize = 20;
const COL_FINAL_ERRORS: usize = 21;
const COL_PLANNED_EFFORTS: usize = 22;

/// Nine significant digits, deterministic across runs.
fn fmt9(x: f64) -> String {
    format!("{x:.8e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt9).unwrap_or_default()
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|&x| fmt9(x)).collect::<Vec<_>>().join(";")
}

fn push_row(out: &mut String, fields: &[String; N_COLS]) {
    out.push_str(&fields.join(","));
    out.push('\n');
}

/// Render the record in the documented CSV layout.
pub fn to_csv(rec: &MetricsRecord) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# seed={}", rec.seed);
    let _ = writeln!(out, "# config_hash={}", rec.config_hash);
    let _ = writeln!(out, "{CSV_HEADER}");
    let empty = || -> [String; N_COLS] { std::array::from_fn(|_| String::new()) };
    for r in &rec.replans {
        let mut f = empty();
        f[COL_KIND] = "replan".into();
        f[COL_STEP] = r.step.to_string();
        f[COL_TIME] = fmt9(r.time);
        f[COL_MI] = fmt9(r.mi);
        f[COL_ENERGY] = fmt9(r.energy);
        f[COL_OMEGA] = fmt9(r.omega);
        f[COL_OBJECTIVE] = fmt9(r.objective);
        f[COL_EVALS] = r.evals.to_string();
        f[COL_QUERIES] = r.queries.to_string();
        f[COL_ROUNDS] = r.rounds.to_string();
        f[COL_MESSAGES] = r.messages.to_string();
        push_row(&mut out, &f);
    }
    for r in &rec.estimates {
        let mut f = empty();
        f[COL_KIND] = "estimate".into();
        f[COL_STEP] = r.step.to_string();
        f[COL_TIME] = fmt9(r.time);
        f[COL_RMSE_TRUE] = fmt9(r.rmse_true);
        f[COL_RMSE_EST] = fmt9(r.rmse_est);
        push_row(&mut out, &f);
    }
    for r in &rec.controls {
        let mut f = empty();
        f[COL_KIND] = "control".into();
        f[COL_STEP] = r.step.to_string();
        f[COL_TIME] = fmt9(r.time);
        f[COL_MIN_H] = fmt_opt(r.min_h);
        f[COL_FALLBACKS] = r.fallbacks.to_string();
        f[COL_ACTIVE_ROWS] = r.active_rows.to_string();
        f[COL_EFFORTS] = fmt_vec(&r.powers);
        push_row(&mut out, &f);
    }
    for r in &rec.runs {
        let mut f = empty();
        f[COL_KIND] = "run".into();
        f[COL_INDEX] = r.index.to_string();
        f[COL_LABEL] = r.label.clone();
        f[COL_MI] = fmt_opt(r.mi);
        f[COL_ENERGY] = fmt_opt(r.energy);
        f[COL_OBJECTIVE] = fmt_opt(r.objective);
        f[COL_EVALS] = fmt_opt(r.evals);
        f[COL_QUERIES] = fmt_opt(r.queries);
        f[COL_ROUNDS] = fmt_opt(r.rounds);
        f[COL_MESSAGES] = fmt_opt(r.messages);
        f[COL_GROUND] = fmt_opt(r.ground);
        f[COL_MIN_H] = fmt_opt(r.min_h);
        f[COL_FALLBACKS] = r.fallbacks.to_string();
        f[COL_FEASIBLE] = r.feasible.to_string();
        f[COL_EFFORTS] = fmt_vec(&r.efforts);
        f[COL_FINAL_ERRORS] = fmt_vec(&r.final_errors);
        f[COL_PLANNED_EFFORTS] = fmt_vec(&r.planned_efforts);
        push_row(&mut out, &f);
    }
    out
}

/// Pretty JSON rendering; round-trips exactly through serde.
pub fn to_json(rec: &MetricsRecord) -> Result<String, HarnessError> {
    Ok(serde_json::to_string_pretty(rec)?)
}

/// Write the record to disk.  A `.json` path gets JSON only; any other
/// path gets the CSV plus a JSON sidecar with the extension swapped.
pub fn export(rec: &MetricsRecord, path: &Path) -> Result<(), HarnessError> {
    if path.extension().and_then(|e| e.to_str()) == Some("json") {
        fs::write(path, to_json(rec)?)?;
    } else {
        fs::write(path, to_csv(rec))?;
        fs::write(path.with_extension("json"), to_json(rec)?)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Planning plumbing shared by the runners
// ---------------------------------------------------------------------------

/// One planning solve's ingredients: the registered oracle, each robot's
/// scored menu, and the generated candidates behind the menu entries.
pub struct PlanningInputs {
    pub oracle: Oracle,
    pub menus: Vec<Vec<(TrajId, f64)>>,
    pub candidates: Vec<Vec<CandidateTrajectory>>,
    pub omega: f64,
}

fn cost_field(rc: &RobotConfig, regions: &[Region], depth: usize) -> CostField {
    let mut field = CostField {
        class: rc.class,
        regions: regions.to_vec(),
        ctrl_costs: rc.ctrl_costs.clone(),
        weight: rc.weight,
        cmax: 0.0,
    };
    field.cmax = rc.cmax.unwrap_or_else(|| field.default_cmax(depth));
    field
}

fn scenario_omega(cfg: &ScenarioConfig) -> f64 {
    cfg.robots
        .iter()
        .map(|rc| rc.weight * cost_field(rc, &cfg.regions, cfg.depth).cmax)
        .sum()
}

fn r_matrix(c: &ControlConfig) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_row_slice(&c.r_diag))
}

fn initial_poses(cfg: &ScenarioConfig) -> Vec<UnicycleState> {
    cfg.robots
        .iter()
        .map(|r| UnicycleState::with_alt(r.x, r.y, r.theta, r.alt))
        .collect()
}

/// Replace control/terrain energies with scaled LQR tracking energies and
/// re-rank the menu.
fn lqr_rescore(
    cands: &mut Vec<CandidateTrajectory>,
    rc: &RobotConfig,
    spec: &IntegratorSpec,
    tau: f64,
    scale: f64,
) -> Result<(), HarnessError> {
    for cand in cands.iter_mut() {
        let refs = map_to_reference(&cand.states, &cand.controls, &rc.primitives, spec.order());
        let mut total = 0.0;
        for k in 0..cand.controls.len() {
            let seg = LqrSegment::new(spec, tau, refs[k + 1].clone())?;
            total += seg.energy(0.0, &refs[k]);
        }
        cand.energy = rc.weight * scale * total;
        cand.standalone = cand.mi - cand.energy;
    }
    cands.sort_by(|a, b| {
        b.standalone.total_cmp(&a.standalone).then_with(|| a.controls.cmp(&b.controls))
    });
    for (i, cand) in cands.iter_mut().enumerate() {
        cand.id = TrajId::new(cand.id.robot, i);
    }
    Ok(())
}

/// Generate, score, and register every robot's candidates from the given
/// poses and target beliefs.
pub fn build_planning_inputs_at(
    cfg: &ScenarioConfig,
    poses: &[UnicycleState],
    targets: &[(TargetModel, Belief)],
) -> Result<PlanningInputs, HarnessError> {
    let (joint, offsets) = build_joint_model(targets, cfg.depth);
    let omega = scenario_omega(cfg);
    let mut oracle = Oracle::new(joint.clone(), omega);
    let spec = IntegratorSpec::new(cfg.control.order, r_matrix(&cfg.control))?;
    let params = CandidateParams {
        depth: cfg.depth,
        cap: cfg.candidate_cap,
        eps: cfg.eps,
        delta: cfg.delta,
    };
    let mut menus = Vec::with_capacity(cfg.robots.len());
    let mut candidates = Vec::with_capacity(cfg.robots.len());
    for (r, rc) in cfg.robots.iter().enumerate() {
        let rspec = RobotSpec {
            start: poses[r],
            sensor: rc.sensor,
            cost: cost_field(rc, &cfg.regions, cfg.depth),
            primitives: rc.primitives.clone(),
            tau: cfg.tau,
        };
        let mut cands = generate_candidates(r, &rspec, &joint, &offsets, &params)?;
        if let EnergyModel::Lqr { scale } = rc.energy {
            lqr_rescore(&mut cands, rc, &spec, cfg.tau, scale)?;
        }
        let menu = register_candidates(&mut oracle, &cands)?;
        menus.push(menu);
        candidates.push(cands);
    }
    oracle.reset_counters();
    Ok(PlanningInputs { oracle, menus, candidates, omega })
}

/// Planning inputs from the scenario's initial poses and target priors.
pub fn build_planning_inputs(cfg: &ScenarioConfig) -> Result<PlanningInputs, HarnessError> {
    let poses = initial_poses(cfg);
    let targets: Vec<(TargetModel, Belief)> =
        cfg.targets.iter().map(|t| (t.model(cfg.tau), t.prior())).collect();
    build_planning_inputs_at(cfg, &poses, &targets)
}

/// Run the configured planner over prepared inputs.  Counters are reset
/// first so the solution's statistics cover exactly this solve.
pub fn solve_scenario(
    cfg: &ScenarioConfig,
    inputs: &PlanningInputs,
    net_seed: u64,
) -> Result<Solution, HarnessError> {
    inputs.oracle.reset_counters();
    let problem = PlanningProblem::from_scored(&inputs.oracle, inputs.menus.clone());
    let sol = match &cfg.planner {
        PlannerConfig::Dls { lazy, warm_start } => {
            let params = SearchParams {
                alpha: cfg.alpha,
                lazy: *lazy,
                warm_start: *warm_start,
                max_resolutions: 10_000,
            };
            distributed_local_search(&problem, &params, cfg.network, net_seed)?
        }
        PlannerConfig::Cls { lazy, warm_start } => {
            let params = SearchParams {
                alpha: cfg.alpha,
                lazy: *lazy,
                warm_start: *warm_start,
                max_resolutions: 10_000,
            };
            centralized_local_search(&problem, &params)?
        }
        PlannerConfig::Cd { order } => {
            let weights: Vec<f64> = cfg.robots.iter().map(|r| r.weight).collect();
            let ordering = match order {
                CdOrderConfig::ByIndex => CdOrdering::ByIndex,
                CdOrderConfig::WeightAscending => CdOrdering::WeightAscending(weights),
                CdOrderConfig::WeightDescending => CdOrdering::WeightDescending(weights),
            };
            coordinate_descent(&problem, &ordering)?
        }
    };
    Ok(sol)
}

fn plan_outcome(
    inputs: &PlanningInputs,
    sol: &Solution,
    step: usize,
    time: f64,
) -> Result<ReplanRow, HarnessError> {
    let evals = inputs.oracle.evals();
    let queries = inputs.oracle.queries();
    let mi = inputs.oracle.mi(&sol.set)?;
    let mut energy = 0.0;
    for id in &sol.set {
        energy += inputs.oracle.energy(*id)?;
    }
    Ok(ReplanRow {
        step,
        time,
        mi,
        energy,
        omega: inputs.omega,
        objective: sol.value,
        evals,
        queries,
        rounds: sol.stats.resolutions as u64,
        messages: sol.stats.messages,
    })
}

/// The trajectory each robot will execute: its selected candidate, or the
/// all-stop trajectory when the planner left it unassigned.
fn chosen_plans(
    cfg: &ScenarioConfig,
    inputs: &PlanningInputs,
    sol: &Solution,
    poses: &[UnicycleState],
) -> Result<Vec<CandidateTrajectory>, HarnessError> {
    let mut out = Vec::with_capacity(cfg.robots.len());
    for (r, rc) in cfg.robots.iter().enumerate() {
        if let Some(id) = sol.set.iter().find(|id| id.robot == r) {
            let cand = inputs.candidates[r]
                .iter()
                .find(|c| c.id == *id)
                .ok_or_else(|| {
                    HarnessError::Config(format!("planner selected unregistered candidate {id:?}"))
                })?;
            out.push(cand.clone());
        } else {
            let field = cost_field(rc, &cfg.regions, cfg.depth);
            let li = loiter_primitive(&rc.primitives, &field);
            let controls = vec![li; cfg.depth];
            let states = rollout(&poses[r], &rc.primitives, &controls, cfg.tau)?;
            let energy = trajectory_energy(&controls, &states, &field)?;
            out.push(CandidateTrajectory {
                id: TrajId::new(r, usize::MAX),
                controls,
                states,
                mi: 0.0,
                energy,
                standalone: -energy,
                step_infos: Vec::new(),
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Mission simulation
// ---------------------------------------------------------------------------

fn clamp_speed(y: &mut DVector<f64>, top: Option<f64>) {
    if let Some(top) = top {
        if y.len() >= 4 {
            let v = (y[2] * y[2] + y[3] * y[3]).sqrt();
            if v > top {
                let s = top / v;
                y[2] *= s;
                y[3] *= s;
            }
        }
    }
}

fn pair_min_h(states: &[DVector<f64>], radii: &[f64], c: f64) -> Option<f64> {
    let n = states.len();
    if n < 2 {
        return None;
    }
    let mut min = f64::INFINITY;
    for i in 0..n {
        let pi = states[i].rows(0, 3).into_owned();
        for j in (i + 1)..n {
            let pj = states[j].rows(0, 3).into_owned();
            let shape = BarrierShape { d_s: radii[i].max(radii[j]), c };
            min = min.min(barrier_h(&pi, &pj, &shape));
        }
    }
    Some(min)
}

fn estimate_row(step: usize, time: f64, beliefs: &[Belief], truths: &[DVector<f64>]) -> EstimateRow {
    let n = beliefs.len() as f64;
    let mut se = 0.0;
    let mut var = 0.0;
    for (b, y) in beliefs.iter().zip(truths) {
        let dx = b.mean[0] - y[0];
        let dy = b.mean[1] - y[1];
        se += dx * dx + dy * dy;
        var += b.cov[(0, 0)] + b.cov[(1, 1)];
    }
    EstimateRow { step, time, rmse_true: (se / n).sqrt(), rmse_est: (var / n).sqrt() }
}

fn is_bearing_channel(kind: SensorKind, idx: usize) -> bool {
    match kind {
        SensorKind::Range => false,
        SensorKind::Bearing => true,
        SensorKind::RangeBearing => idx == 1,
    }
}

fn build_safety(cfg: &ScenarioConfig) -> Option<SafetyParams> {
    let c = &cfg.control;
    if !c.safety {
        return None;
    }
    let n = cfg.robots.len();
    Some(SafetyParams {
        gains: pole_gains(&c.poles),
        beta: c.beta,
        alphas: c.alphas.clone().unwrap_or_else(|| vec![1.0; n]),
        radii: cfg.robots.iter().map(|r| r.radius).collect(),
        c: c.c,
        u_max: c.u_max,
        v_limit: c.v_limit,
    })
}

/// Simulate one full mission: replan on schedule, track waypoints through
/// the safety filter, move the targets, and assimilate noisy
/// measurements into the shared belief.
///
/// Robots measure from their executed position combined with the planned
/// heading; a target is measured only when both its true and its
/// predicted position fall inside the sensing footprint (the robot must
/// both see the target and know where to look).  Degenerate geometry
/// (a robot exactly on top of a target) contributes no measurement and
/// the run continues.
pub fn run_tracking_sim(cfg: &ScenarioConfig) -> Result<MetricsRecord, HarnessError> {
    validate(cfg)?;
    let wall = Instant::now();
    let n = cfg.robots.len();
    let n_t = cfg.targets.len();
    let order = cfg.control.order;
    let r_mat = r_matrix(&cfg.control);
    let spec = IntegratorSpec::new(order, r_mat.clone())?;
    let substeps = (cfg.tau / cfg.control_dt).round() as usize;
    let safety = build_safety(cfg);
    let radii: Vec<f64> = cfg.robots.iter().map(|r| r.radius).collect();

    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let target_seed: u64 = master.random();
    let meas_seed: u64 = master.random();
    let net_base: u64 = master.random();
    let mut target_rng = ChaCha8Rng::seed_from_u64(target_seed);
    let mut meas_rng = ChaCha8Rng::seed_from_u64(meas_seed);

    let models: Vec<TargetModel> = cfg.targets.iter().map(|t| t.model(cfg.tau)).collect();
    let mut truths: Vec<DVector<f64>> = cfg.targets.iter().map(|t| t.initial_state()).collect();
    let mut beliefs: Vec<Belief> = cfg.targets.iter().map(|t| t.prior()).collect();

    let mut exec: Vec<DVector<f64>> = cfg
        .robots
        .iter()
        .map(|r| {
            let mut x = DVector::zeros(3 * order);
            x[0] = r.x;
            x[1] = r.y;
            x[2] = r.alt;
            x
        })
        .collect();
    let mut planned_theta: Vec<f64> = cfg.robots.iter().map(|r| wrap_angle(r.theta)).collect();

    let mut replans = Vec::new();
    let mut estimates = Vec::new();
    let mut controls = Vec::new();
    let (mut total_mi, mut total_energy, mut total_obj) = (0.0, 0.0, 0.0);
    let (mut total_evals, mut total_queries) = (0u64, 0u64);
    let (mut total_rounds, mut total_messages) = (0u64, 0u64);
    let mut min_h_global: Option<f64> = None;
    let mut fallbacks_total = 0u64;
    let mut efforts = vec![0.0; n];
    let mut planned_efforts = vec![0.0; n];

    if n_t > 0 {
        estimates.push(estimate_row(0, 0.0, &beliefs, &truths));
    }

    let mut plan: Vec<CandidateTrajectory> = Vec::new();
    let mut refs: Vec<Vec<DVector<f64>>> = Vec::new();
    let mut plan_step = 0usize;
    let mut replan_idx = 0u64;

    for step in 0..cfg.mission_steps {
        let time = step as f64 * cfg.tau;
        if step % cfg.replan_every == 0 {
            let poses: Vec<UnicycleState> = (0..n)
                .map(|r| UnicycleState::with_alt(exec[r][0], exec[r][1], planned_theta[r], exec[r][2]))
                .collect();
            let targets: Vec<(TargetModel, Belief)> =
                models.iter().cloned().zip(beliefs.iter().cloned()).collect();
            let inputs = build_planning_inputs_at(cfg, &poses, &targets)?;
            let sol = solve_scenario(cfg, &inputs, net_base.wrapping_add(replan_idx))?;
            let row = plan_outcome(&inputs, &sol, step, time)?;
            total_mi += row.mi;
            total_energy += row.energy;
            total_obj += row.objective;
            total_evals += row.evals;
            total_queries += row.queries;
            total_rounds += row.rounds;
            total_messages += row.messages;
            replans.push(row);
            plan = chosen_plans(cfg, &inputs, &sol, &poses)?;
            refs = plan
                .iter()
                .enumerate()
                .map(|(r, c)| map_to_reference(&c.states, &c.controls, &cfg.robots[r].primitives, order))
                .collect();
            plan_step = 0;
            replan_idx += 1;
        }

        let mut segments = Vec::with_capacity(n);
        for r in 0..n {
            let seg = LqrSegment::new(&spec, cfg.tau, refs[r][plan_step + 1].clone())?;
            planned_efforts[r] += seg.energy(0.0, &exec[r]);
            segments.push(seg);
        }
        for s in 0..substeps {
            let t_local = s as f64 * cfg.control_dt;
            let desired: Vec<DVector<f64>> =
                (0..n).map(|r| segments[r].control(t_local, &exec[r])).collect();
            let filtered: Vec<FilteredControl> = match &safety {
                Some(p) => team_filter(&spec, &exec, &desired, p)?,
                None => desired
                    .iter()
                    .map(|u| FilteredControl { u: u.clone(), fallback: false, active_rows: 0 })
                    .collect(),
            };
            let min_h = pair_min_h(&exec, &radii, cfg.control.c);
            if let Some(h) = min_h {
                min_h_global = Some(min_h_global.map_or(h, |m: f64| m.min(h)));
            }
            let fb = filtered.iter().filter(|f| f.fallback).count() as u64;
            fallbacks_total += fb;
            let active: u64 = filtered.iter().map(|f| f.active_rows as u64).sum();
            let powers: Vec<f64> = filtered
                .iter()
                .map(|f| 0.5 * f.u.dot(&(&r_mat * &f.u)))
                .collect();
            for r in 0..n {
                efforts[r] += powers[r] * cfg.control_dt;
            }
            controls.push(ControlRow {
                step,
                time: time + t_local,
                min_h,
                fallbacks: fb,
                active_rows: active,
                powers,
            });
            for r in 0..n {
                exec[r] = spec.rk4_step(&exec[r], &filtered[r].u, cfg.control_dt);
            }
        }
        for r in 0..n {
            planned_theta[r] = plan[r].states[plan_step + 1].theta;
        }
        plan_step += 1;

        if n_t > 0 {
            for t in 0..n_t {
                truths[t] = simulate_target_step(&truths[t], &models[t], &mut target_rng)?;
                clamp_speed(&mut truths[t], cfg.targets[t].top_speed());
                beliefs[t] = predict_belief(&beliefs[t], &models[t].a, &models[t].w);
            }
            let poses: Vec<UnicycleState> = (0..n)
                .map(|r| UnicycleState::with_alt(exec[r][0], exec[r][1], planned_theta[r], exec[r][2]))
                .collect();
            let mut per_target: Vec<Vec<LinearMeasurement>> = vec![Vec::new(); n_t];
            for (r, rc) in cfg.robots.iter().enumerate() {
                for t in 0..n_t {
                    let truth_xy = (truths[t][0], truths[t][1]);
                    let mean_xy = (beliefs[t].mean[0], beliefs[t].mean[1]);
                    let (Ok(Some(truth_ch)), Ok(Some(mean_ch))) = (
                        sensor_channels(&poses[r], &rc.sensor, truth_xy),
                        sensor_channels(&poses[r], &rc.sensor, mean_xy),
                    ) else {
                        continue;
                    };
                    if truth_ch.len() != mean_ch.len() {
                        continue;
                    }
                    let d = beliefs[t].mean.len();
                    for (k, (tc, mc)) in truth_ch.iter().zip(&mean_ch).enumerate() {
                        let noise: f64 = meas_rng.sample(StandardNormal);
                        let z = tc.value + tc.std * noise;
                        let mut innovation = z - mc.value;
                        if is_bearing_channel(rc.sensor.kind, k) {
                            innovation = wrap_angle(innovation);
                        }
                        let mut h_row = DVector::zeros(d);
                        h_row[0] = mc.grad.0;
                        h_row[1] = mc.grad.1;
                        per_target[t].push(LinearMeasurement {
                            h_row,
                            variance: mc.std * mc.std,
                            innovation,
                        });
                    }
                }
            }
            for t in 0..n_t {
                beliefs[t] = apply_measurements(&beliefs[t], &per_target[t])?;
            }
            estimates.push(estimate_row(step + 1, time + cfg.tau, &beliefs, &truths));
        }
    }

    let final_errors: Vec<f64> = (0..n)
        .map(|r| {
            let target = &refs[r][plan_step];
            let dx = exec[r][0] - target[0];
            let dy = exec[r][1] - target[1];
            let dz = exec[r][2] - target[2];
            (dx * dx + dy * dy + dz * dz).sqrt()
        })
        .collect();
    let mission = RunRow {
        index: 0,
        label: "mission".into(),
        mi: Some(total_mi),
        energy: Some(total_energy),
        objective: Some(total_obj),
        evals: Some(total_evals as f64),
        queries: Some(total_queries as f64),
        rounds: Some(total_rounds as f64),
        messages: Some(total_messages as f64),
        ground: None,
        min_h: min_h_global,
        fallbacks: fallbacks_total,
        feasible: fallbacks_total == 0,
        efforts,
        final_errors,
        planned_efforts,
    };
    Ok(MetricsRecord {
        seed: cfg.seed,
        config_hash: config_hash(cfg)?,
        n_robots: n,
        replans,
        estimates,
        controls,
        runs: vec![mission],
        wall_s: wall.elapsed().as_secs_f64(),
    })
}

/// One planning solve from the scenario's initial poses and priors; no
/// simulation.
pub fn run_plan_once(cfg: &ScenarioConfig) -> Result<MetricsRecord, HarnessError> {
    validate(cfg)?;
    let wall = Instant::now();
    let inputs = build_planning_inputs(cfg)?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let _target_seed: u64 = master.random();
    let _meas_seed: u64 = master.random();
    let net_base: u64 = master.random();
    let sol = solve_scenario(cfg, &inputs, net_base)?;
    let row = plan_outcome(&inputs, &sol, 0, 0.0)?;
    let run = RunRow {
        index: 0,
        label: "plan".into(),
        mi: Some(row.mi),
        energy: Some(row.energy),
        objective: Some(row.objective),
        evals: Some(row.evals as f64),
        queries: Some(row.queries as f64),
        rounds: Some(row.rounds as f64),
        messages: Some(row.messages as f64),
        ground: None,
        min_h: None,
        fallbacks: 0,
        feasible: true,
        efforts: Vec::new(),
        final_errors: Vec::new(),
        planned_efforts: Vec::new(),
    };
    Ok(MetricsRecord {
        seed: cfg.seed,
        config_hash: config_hash(cfg)?,
        n_robots: cfg.robots.len(),
        replans: vec![row],
        estimates: Vec::new(),
        controls: Vec::new(),
        runs: vec![run],
        wall_s: wall.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Sphere exchange benchmark
// ---------------------------------------------------------------------------

/// Settings for [`run_sphere_benchmark`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SphereParams {
    pub robots: usize,
    pub beta: f64,
    pub trials: usize,
    pub seed: u64,
}

const SPHERE_RADIUS: f64 = 6.0;
const SPHERE_T_FINAL: f64 = 6.0;
const SPHERE_DT: f64 = 0.01;
const SPHERE_D_S: f64 = 0.5;
const SPHERE_U_MAX: f64 = 10.0;
const SPHERE_POLES: [f64; 2] = [-5.0, -5.1];

fn randn3<R: Rng + ?Sized>(rng: &mut R) -> DVector<f64> {
    DVector::from_fn(3, |_, _| rng.sample(StandardNormal))
}

fn sphere_trial(spec: &IntegratorSpec, p: &SphereParams, trial: usize) -> Result<RunRow, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        p.seed.wrapping_add((trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
    );
    let n = p.robots;
    // Start directions are rejection-sampled so every pair begins (and,
    // by antipodal symmetry, ends) well clear of the separation shape;
    // the barrier guarantee only covers trajectories that start safe.
    let mut dirs: Vec<DVector<f64>> = Vec::with_capacity(n);
    while dirs.len() < n {
        let mut dir = randn3(&mut rng);
        let norm = dir.norm();
        if norm < 1e-9 {
            continue;
        }
        dir /= norm;
        if dirs
            .iter()
            .all(|d| (SPHERE_RADIUS * (&dir - d)).norm() >= 3.0 * SPHERE_D_S)
        {
            dirs.push(dir);
        }
    }
    let mut states = Vec::with_capacity(n);
    let mut goals = Vec::with_capacity(n);
    let mut segments = Vec::with_capacity(n);
    for dir in &dirs {
        let pos = dir * SPHERE_RADIUS + randn3(&mut rng) * 0.1;
        let vel = randn3(&mut rng) * 0.1;
        let mut x = DVector::zeros(6);
        x.rows_mut(0, 3).copy_from(&pos);
        x.rows_mut(3, 3).copy_from(&vel);
        states.push(x);
        let goal = -dir * SPHERE_RADIUS;
        let mut x_ref = DVector::zeros(6);
        x_ref.rows_mut(0, 3).copy_from(&goal);
        segments.push(LqrSegment::new(spec, SPHERE_T_FINAL, x_ref)?);
        goals.push(goal);
    }
    let params = SafetyParams {
        gains: pole_gains(&SPHERE_POLES),
        beta: p.beta,
        alphas: vec![1.0; n],
        radii: vec![SPHERE_D_S; n],
        c: 1.0,
        u_max: Some(SPHERE_U_MAX),
        v_limit: None,
    };
    let steps = (SPHERE_T_FINAL / SPHERE_DT).round() as usize;
    let mut min_h = f64::INFINITY;
    let mut fallbacks = 0u64;
    let mut efforts = vec![0.0; n];
    for s in 0..steps {
        let t = s as f64 * SPHERE_DT;
        if let Some(h) = pair_min_h(&states, &params.radii, params.c) {
            min_h = min_h.min(h);
        }
        let desired: Vec<DVector<f64>> =
            (0..n).map(|i| segments[i].control(t, &states[i])).collect();
        let filtered = team_filter(spec, &states, &desired, &params)?;
        fallbacks += filtered.iter().filter(|f| f.fallback).count() as u64;
        for i in 0..n {
            efforts[i] += 0.5 * filtered[i].u.dot(&filtered[i].u) * SPHERE_DT;
            states[i] = spec.rk4_step(&states[i], &filtered[i].u, SPHERE_DT);
        }
    }
    if let Some(h) = pair_min_h(&states, &params.radii, params.c) {
        min_h = min_h.min(h);
    }
    let final_errors: Vec<f64> = (0..n)
        .map(|i| (states[i].rows(0, 3).into_owned() - &goals[i]).norm())
        .collect();
    let feasible = fallbacks == 0;
    Ok(RunRow {
        index: trial,
        label: if feasible { "sphere".into() } else { "infeasible".into() },
        mi: None,
        energy: None,
        objective: None,
        evals: None,
        queries: None,
        rounds: None,
        messages: None,
        ground: None,
        min_h: Some(min_h),
        fallbacks,
        feasible,
        efforts,
        final_errors,
        planned_efforts: Vec::new(),
    })
}

/// Antipodal sphere exchange: each robot starts on a radius-6 sphere with
/// perturbed position and velocity and must reach the opposite pole in
/// 6 s under the safety filter (separation 0.5 m, acceleration bound
/// 10 m/s²).  Infeasible trials are labeled, counted, and still
/// simulated.  Trials run in parallel; rows are emitted in trial order.
pub fn run_sphere_benchmark(p: &SphereParams) -> Result<MetricsRecord, HarnessError> {
    if p.robots < 2 {
        return Err(HarnessError::Config("sphere benchmark needs at least 2 robots".into()));
    }
    if p.trials == 0 {
        return Err(HarnessError::Config("sphere benchmark needs at least 1 trial".into()));
    }
    if !(p.beta >= 0.0) {
        return Err(HarnessError::Config(format!("beta must be nonnegative, got {}", p.beta)));
    }
    let wall = Instant::now();
    let spec = IntegratorSpec::new(2, DMatrix::identity(3, 3))?;
    let runs: Result<Vec<RunRow>, HarnessError> = (0..p.trials)
        .into_par_iter()
        .map(|trial| sphere_trial(&spec, p, trial))
        .collect();
    Ok(MetricsRecord {
        seed: p.seed,
        config_hash: hex_digest(&serde_json::to_vec(p)?),
        n_robots: p.robots,
        replans: Vec::new(),
        estimates: Vec::new(),
        controls: Vec::new(),
        runs: runs?,
        wall_s: wall.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Planner benchmark
// ---------------------------------------------------------------------------

/// Settings for [`run_planner_bench`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetBenchParams {
    pub robots: usize,
    /// Mean simulated message delay in milliseconds.
    pub delay_ms: f64,
    pub seed: u64,
}

enum BenchVariant {
    Dls { lazy: bool, warm: bool },
    Cls,
    Cd { reverse: bool },
}

/// Sweep team sizes 2..=`robots` over six planner variants on eight
/// synthetic instances each.  Per row: `objective` is the mean ratio of
/// the achieved value to the exhaustive optimum, `ground` the mean
/// optimum itself, `evals`/`queries` are oracle calls per candidate
/// (normalized by instance size), and `rounds`/`messages` are raw means.
pub fn run_planner_bench(p: &NetBenchParams) -> Result<MetricsRecord, HarnessError> {
    if !(2..=8).contains(&p.robots) {
        return Err(HarnessError::Config(format!(
            "planner benchmark sweeps 2..=8 robots, got {}",
            p.robots
        )));
    }
    if p.delay_ms < 0.0 {
        return Err(HarnessError::Config("delay must be nonnegative".into()));
    }
    let wall = Instant::now();
    let delay = if p.delay_ms > 0.0 {
        DelayModel::Normal { mean: p.delay_ms / 1000.0, std: 0.2 * p.delay_ms / 1000.0 }
    } else {
        DelayModel::Zero
    };
    const SEEDS: u64 = 8;
    let variants: [(&str, BenchVariant); 6] = [
        ("dls", BenchVariant::Dls { lazy: true, warm: true }),
        ("dls_eager", BenchVariant::Dls { lazy: false, warm: true }),
        ("dls_cold", BenchVariant::Dls { lazy: true, warm: false }),
        ("cls", BenchVariant::Cls),
        ("cd_fwd", BenchVariant::Cd { reverse: false }),
        ("cd_rev", BenchVariant::Cd { reverse: true }),
    ];
    let mut runs = Vec::new();
    let mut index = 0;
    for n in 2..=p.robots {
        // Instances are rebuilt from the same seed for every variant so
        // each one is measured against a cold oracle cache.
        let fresh_instance = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ ((n as u64) << 32) ^ s);
            synth::random_instance(&mut rng, n, 6, 3, 2)
        };
        let mut grounds = Vec::with_capacity(SEEDS as usize);
        for s in 0..SEEDS {
            let inst = fresh_instance(s);
            let problem = PlanningProblem::from_scored(&inst.oracle, inst.per_robot.clone());
            let (_, value) = exhaustive_best(&problem)?;
            grounds.push(value);
        }
        for (label, variant) in &variants {
            let mut sums = [0.0f64; 6]; // ratio, ground, evals, queries, rounds, messages
            for s in 0..SEEDS as usize {
                let inst = fresh_instance(s as u64);
                let problem = PlanningProblem::from_scored(&inst.oracle, inst.per_robot.clone());
                let total = problem.total_candidates().max(1) as f64;
                let params = |lazy: bool, warm: bool| SearchParams {
                    alpha: 1.0,
                    lazy,
                    warm_start: warm,
                    max_resolutions: 10_000,
                };
                let sol = match variant {
                    BenchVariant::Dls { lazy, warm } => distributed_local_search(
                        &problem,
                        &params(*lazy, *warm),
                        delay,
                        p.seed ^ ((n as u64) << 16) ^ s as u64,
                    )?,
                    BenchVariant::Cls => centralized_local_search(&problem, &params(true, true))?,
                    BenchVariant::Cd { reverse } => {
                        let ordering = if *reverse {
                            CdOrdering::Custom((0..n).rev().collect())
                        } else {
                            CdOrdering::ByIndex
                        };
                        coordinate_descent(&problem, &ordering)?
                    }
                };
                sums[0] += sol.value / grounds[s];
                sums[1] += grounds[s];
                sums[2] += sol.stats.evals as f64 / total;
                sums[3] += sol.stats.queries as f64 / total;
                sums[4] += sol.stats.resolutions as f64;
                sums[5] += sol.stats.messages as f64;
            }
            let m = SEEDS as f64;
            runs.push(RunRow {
                index,
                label: format!("n{n}_{label}"),
                mi: None,
                energy: None,
                objective: Some(sums[0] / m),
                evals: Some(sums[2] / m),
                queries: Some(sums[3] / m),
                rounds: Some(sums[4] / m),
                messages: Some(sums[5] / m),
                ground: Some(sums[1] / m),
                min_h: None,
                fallbacks: 0,
                feasible: true,
                efforts: Vec::new(),
                final_errors: Vec::new(),
                planned_efforts: Vec::new(),
            });
            index += 1;
        }
    }
    Ok(MetricsRecord {
        seed: p.seed,
        config_hash: hex_digest(&serde_json::to_vec(p)?),
        n_robots: p.robots,
        replans: Vec::new(),
        estimates: Vec::new(),
        controls: Vec::new(),
        runs,
        wall_s: wall.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n_robots: usize, n_targets: usize, safety: bool) -> ScenarioConfig {
        let robots = (0..n_robots)
            .map(|r| RobotConfig {
                class: RobotClass::Ugv,
                x: r as f64 * 6.0 - 3.0,
                y: -4.0,
                theta: FRAC_PI_2,
                alt: 0.0,
                weight: 0.5,
                cmax: None,
                sensor: SensorModel {
                    kind: SensorKind::RangeBearing,
                    max_range: 8.0,
                    fov: TAU,
                    range_std_max: 0.2,
                    bearing_std_max: 0.1,
                    noise: NoiseProfile::DistanceLinear,
                },
                primitives: vec![
                    MotionPrimitive { nu: 0.0, omega: 0.0 },
                    MotionPrimitive { nu: 3.0, omega: 0.0 },
                    MotionPrimitive { nu: 3.0, omega: FRAC_PI_2 },
                    MotionPrimitive { nu: 3.0, omega: -FRAC_PI_2 },
                ],
                ctrl_costs: vec![0.0, 1.0, 1.0, 1.0],
                radius: 0.4,
                energy: EnergyModel::CtrlState,
            })
            .collect();
        let targets = [
            TargetConfig::Static { x: 0.0, y: 2.0, process_noise: 0.01, prior_std: 4.0 },
            TargetConfig::Static { x: 4.0, y: 3.0, process_noise: 0.01, prior_std: 4.0 },
        ];
        ScenarioConfig {
            name: "tiny".into(),
            seed: 11,
            tau: 0.5,
            depth: 3,
            replan_every: 3,
            mission_steps: 3,
            control_dt: 0.1,
            candidate_cap: 8,
            eps: 0.0,
            delta: 0.0,
            alpha: 1.0,
            planner: PlannerConfig::Dls { lazy: true, warm_start: true },
            network: DelayModel::Zero,
            robots,
            targets: targets[..n_targets].to_vec(),
            regions: Vec::new(),
            control: ControlConfig {
                order: 2,
                poles: vec![-5.0, -5.1],
                safety,
                beta: 0.5,
                c: 1.0,
                u_max: if safety { Some(10.0) } else { None },
                v_limit: None,
                alphas: None,
                r_diag: [1.0, 1.0, 1.0],
            },
        }
    }

    #[test]
    fn presets_validate_and_hash_deterministically() {
        let mut hashes = Vec::new();
        for name in preset_names() {
            let cfg = preset(name).expect("preset exists");
            assert_eq!(cfg.name, *name);
            validate(&cfg).expect("preset validates");
            let h1 = config_hash(&cfg).unwrap();
            let h2 = config_hash(&cfg).unwrap();
            assert_eq!(h1, h2);
            assert_eq!(h1.len(), 64);
            hashes.push(h1);
            let loaded = load_scenario(name).unwrap();
            assert_eq!(config_hash(&loaded).unwrap(), hashes.last().unwrap().clone());
        }
        hashes.sort();
        hashes.dedup();
        assert_eq!(hashes.len(), preset_names().len(), "hashes are distinct");
    }

    #[test]
    fn scenario_json_roundtrip_preserves_hash() {
        let cfg = preset("sim1-dynamic-targets").unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ScenarioConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(config_hash(&cfg).unwrap(), config_hash(&back).unwrap());
        assert_eq!(cfg, back);
    }

    #[test]
    fn bad_scenarios_are_rejected() {
        // Unknown top-level field.
        let mut v = serde_json::to_value(preset("sphere-bench").unwrap()).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ScenarioConfig>(v).is_err());
        // Missing mandatory seed.
        let mut v = serde_json::to_value(preset("sphere-bench").unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("seed");
        assert!(serde_json::from_value::<ScenarioConfig>(v).is_err());
        // Unknown scenario argument.
        match load_scenario("definitely-not-a-scenario") {
            Err(HarnessError::Config(msg)) => assert!(msg.contains("sim1-dynamic-targets")),
            other => panic!("expected a config error, got {other:?}"),
        }
        // Semantic failures.
        let mut cfg = tiny(1, 1, false);
        cfg.replan_every = cfg.depth + 1;
        assert!(matches!(validate(&cfg), Err(HarnessError::Config(_))));
        let mut cfg = tiny(1, 1, false);
        cfg.control.poles = vec![1.0, 2.0];
        assert!(matches!(validate(&cfg), Err(HarnessError::Config(_))));
        let mut cfg = tiny(1, 1, false);
        cfg.control_dt = 0.3;
        assert!(matches!(validate(&cfg), Err(HarnessError::Config(_))));
    }

    #[test]
    fn zero_target_mission_holds_position() {
        let cfg = preset("sphere-bench").unwrap();
        let rec = run_tracking_sim(&cfg).unwrap();
        assert!(rec.estimates.is_empty());
        for row in &rec.replans {
            assert_eq!(row.mi, 0.0);
            assert!((row.objective - row.omega).abs() < 1e-12);
        }
        let run = &rec.runs[0];
        assert!(run.feasible);
        for err in &run.final_errors {
            assert!(*err < 1e-6, "robot should hold its pose, drifted {err}");
        }
        // Nobody moves, so barriers stay comfortably positive.
        assert!(run.min_h.unwrap() > 1.0);
    }

    #[test]
    fn objective_identity_holds_at_every_replan() {
        let cfg = tiny(2, 2, true);
        let rec = run_tracking_sim(&cfg).unwrap();
        assert!(!rec.replans.is_empty());
        for row in &rec.replans {
            let reconstructed = row.mi - row.energy + row.omega;
            assert!(
                (row.objective - reconstructed).abs() < 1e-9,
                "objective {} vs mi - energy + omega {}",
                row.objective,
                reconstructed
            );
        }
    }

    #[test]
    fn planned_and_executed_effort_agree_without_safety() {
        let mut cfg = tiny(1, 1, false);
        cfg.control_dt = 0.005;
        cfg.depth = 2;
        cfg.replan_every = 2;
        cfg.mission_steps = 2;
        let rec = run_tracking_sim(&cfg).unwrap();
        let run = &rec.runs[0];
        let planned = run.planned_efforts[0];
        let executed = run.efforts[0];
        assert!(planned > 1e-6, "robot should move toward the target");
        let rel = (planned - executed).abs() / planned;
        assert!(rel < 0.01, "planned {planned} vs executed {executed} (rel {rel})");
    }

    #[test]
    fn measurements_shrink_uncertainty() {
        let cfg = tiny(1, 1, true);
        let rec = run_tracking_sim(&cfg).unwrap();
        let first = rec.estimates.first().unwrap();
        let last = rec.estimates.last().unwrap();
        assert!(last.rmse_est < first.rmse_est, "{} -> {}", first.rmse_est, last.rmse_est);
        assert!(last.rmse_true.is_finite());
        assert_eq!(rec.estimates.len(), cfg.mission_steps + 1);
    }

    #[test]
    fn csv_layout_is_documented_and_stable() {
        let empty = MetricsRecord {
            seed: 9,
            config_hash: "abc".into(),
            n_robots: 0,
            replans: Vec::new(),
            estimates: Vec::new(),
            controls: Vec::new(),
            runs: Vec::new(),
            wall_s: 0.5,
        };
        let text = to_csv(&empty);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "# seed=9");
        assert_eq!(lines[1], "# config_hash=abc");
        assert_eq!(lines[2], CSV_HEADER);

        let cfg = tiny(2, 2, true);
        let rec = run_tracking_sim(&cfg).unwrap();
        let text = to_csv(&rec);
        let cols = CSV_HEADER.split(',').count();
        for line in text.lines().skip(2) {
            assert_eq!(line.split(',').count(), cols, "ragged line: {line}");
        }
        assert!(text.contains("\nreplan,"));
        assert!(text.contains("\nestimate,"));
        assert!(text.contains("\ncontrol,"));
        assert!(text.contains("\nrun,"));
        assert!(!text.contains("wall"), "wall time must stay out of the CSV");
    }

    #[test]
    fn export_writes_csv_and_json_sidecar() {
        let cfg = tiny(1, 1, false);
        let rec = run_tracking_sim(&cfg).unwrap();
        let dir = std::env::temp_dir().join(format!(
            "infogather-harness-{}-{}",
            std::process::id(),
            line!()
        ));
        fs::create_dir_all(&dir).unwrap();
        let csv_path = dir.join("out.csv");
        export(&rec, &csv_path).unwrap();
        assert!(csv_path.exists());
        let json_path = dir.join("out.json");
        assert!(json_path.exists());
        let parsed: MetricsRecord =
            serde_json::from_str(&fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(parsed, rec, "JSON round-trip must be lossless");
        // A .json output path gets JSON only.
        let solo = dir.join("solo.json");
        export(&rec, &solo).unwrap();
        assert!(solo.exists());
        assert!(!dir.join("solo.csv").exists());
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn same_seed_gives_byte_identical_csv() {
        let cfg = tiny(2, 2, true);
        let a = to_csv(&run_tracking_sim(&cfg).unwrap());
        let b = to_csv(&run_tracking_sim(&cfg).unwrap());
        assert_eq!(a, b);
        let p1 = to_csv(&run_plan_once(&cfg).unwrap());
        let p2 = to_csv(&run_plan_once(&cfg).unwrap());
        assert_eq!(p1, p2);
    }

    #[test]
    fn sphere_benchmark_accounts_for_feasibility() {
        let p = SphereParams { robots: 2, beta: 0.5, trials: 3, seed: 7 };
        let rec = run_sphere_benchmark(&p).unwrap();
        assert_eq!(rec.runs.len(), 3);
        for (i, run) in rec.runs.iter().enumerate() {
            assert_eq!(run.index, i);
            assert_eq!(run.feasible, run.label == "sphere");
            assert_eq!(!run.feasible, run.label == "infeasible");
            assert!(run.min_h.unwrap().is_finite());
            assert_eq!(run.efforts.len(), 2);
            assert_eq!(run.final_errors.len(), 2);
        }
        // Deterministic across invocations.
        let again = run_sphere_benchmark(&p).unwrap();
        assert_eq!(to_csv(&rec), to_csv(&again));
        assert!(run_sphere_benchmark(&SphereParams { robots: 1, ..p }).is_err());
    }

    #[test]
    fn planner_bench_covers_all_variants() {
        let p = NetBenchParams { robots: 2, delay_ms: 5.0, seed: 3 };
        let rec = run_planner_bench(&p).unwrap();
        let labels: Vec<&str> = rec.runs.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(
            labels,
            ["n2_dls", "n2_dls_eager", "n2_dls_cold", "n2_cls", "n2_cd_fwd", "n2_cd_rev"]
        );
        for run in &rec.runs {
            assert!(run.evals.unwrap() > 0.0);
            let ratio = run.objective.unwrap();
            assert!(ratio <= 1.0 + 1e-9, "no variant can beat the exhaustive optimum");
            assert!(ratio > 0.0);
        }
        // The lazy and network variants solve the same instances to the
        // same value as the centralized search.
        let dls = rec.runs[0].objective.unwrap();
        let eager = rec.runs[1].objective.unwrap();
        let cls = rec.runs[3].objective.unwrap();
        assert!((dls - eager).abs() < 1e-12);
        assert!((dls - cls).abs() < 1e-12);
        // Coordinate descent hands the partial solution down the line
        // exactly n − 1 times.
        assert_eq!(rec.runs[4].messages, Some(1.0));
        assert_eq!(rec.runs[5].messages, Some(1.0));
    }

    #[test]
    fn lqr_energy_model_rescores_menus() {
        let cfg = preset("hw-analog").unwrap();
        let inputs = build_planning_inputs(&cfg).unwrap();
        for (r, menu) in inputs.menus.iter().enumerate() {
            assert!(!menu.is_empty());
            for pair in menu.windows(2) {
                assert!(pair[0].1 >= pair[1].1, "menu must stay sorted after rescoring");
            }
            assert!(
                inputs.candidates[r].iter().any(|c| c.energy > 0.0),
                "moving candidates must pick up LQR energy"
            );
            for cand in &inputs.candidates[r] {
                assert!(cand.energy >= 0.0);
                assert!((cand.standalone - (cand.mi - cand.energy)).abs() < 1e-12);
            }
        }
    }
}
