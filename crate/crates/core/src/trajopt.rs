//! Candidate trajectory generation over motion-primitive trees.
//!
//! Each robot expands a tree of primitive sequences to a fixed depth,
//! scoring every node with an incremental Kalman filter: the node carries
//! the per-target covariance blocks after the measurements its path would
//! collect, and the accumulated information gain.  Targets evolve and are
//! measured independently, so the joint covariance is block-diagonal and
//! the filter runs one small block per target instead of one joint
//! matrix.  Measurement models are linearized about the open-loop
//! predicted target means — which do not depend on what any robot does —
//! so every candidate's contribution is a fixed sequence of information
//! matrices and the team objective stays submodular.
//!
//! Exhaustive expansion is exponential in the depth, so after each level
//! the frontier is thinned: nodes are ranked by information gathered so
//! far and a node is dropped when some retained node sits within `delta`
//! in state space while having gathered at least as much information
//! minus `eps`.  Setting both tolerances to zero disables thinning and
//! keeps the full tree.
//!
//! Leaves become [`CandidateTrajectory`] values, ranked by standalone
//! gain (information minus weighted energy) and truncated to a per-robot
//! cap.  The "all-stop" trajectory — holding the cheapest stationary
//! primitive for the whole horizon — is always injected back if the cap
//! would squeeze it out, so a robot can always elect to do (almost)
//! nothing; the only exception is a cap of one, which keeps strictly the
//! best candidate.

use crate::estimation::{
    kf_predict, kf_update, logdet_clamped, Belief, CandidateData, EstimationError, JointModel,
    Oracle, TrajId,
};
use crate::world::{
    sensor_info_matrix, step_unicycle, trajectory_energy, wrap_angle, CostField, MotionPrimitive,
    SensorModel, TargetModel, UnicycleState, WorldError,
};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrajoptError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error("bad candidate parameters: {0}")]
    BadParams(String),
}

/// Everything needed to roll a single robot through the arena.
#[derive(Debug, Clone)]
pub struct RobotSpec {
    pub start: UnicycleState,
    pub sensor: SensorModel,
    pub cost: CostField,
    pub primitives: Vec<MotionPrimitive>,
    /// Primitive hold time in seconds (one planning step).
    pub tau: f64,
}

/// Tree-search tolerances and budget.
#[derive(Debug, Clone, Copy)]
pub struct CandidateParams {
    /// Planning steps (tree depth).
    pub depth: usize,
    /// Maximum candidates kept per robot.
    pub cap: usize,
    /// Information tolerance for frontier thinning.
    pub eps: f64,
    /// State-distance tolerance for frontier thinning.
    pub delta: f64,
}

/// A fully scored open-loop candidate.
#[derive(Debug, Clone)]
pub struct CandidateTrajectory {
    pub id: TrajId,
    /// Primitive indices, one per planning step.
    pub controls: Vec<usize>,
    /// Visited states, `depth + 1` entries starting at the initial pose.
    pub states: Vec<UnicycleState>,
    /// Information gathered along the path (standalone).
    pub mi: f64,
    /// Weighted energy spent along the path.
    pub energy: f64,
    /// `mi − energy`; the candidate's solo contribution to the objective.
    pub standalone: f64,
    /// Per-step joint information matrices, for oracle registration.
    pub step_infos: Vec<DMatrix<f64>>,
}

/// Stack independent targets into one block-diagonal joint model.
/// Returns the model plus each target's offset into the joint state.
pub fn build_joint_model(
    targets: &[(TargetModel, Belief)],
    horizon: usize,
) -> (JointModel, Vec<usize>) {
    let dims: Vec<usize> = targets.iter().map(|(m, _)| m.dim()).collect();
    let total: usize = dims.iter().sum();
    let mut a = DMatrix::zeros(total, total);
    let mut w = DMatrix::zeros(total, total);
    let mut cov = DMatrix::zeros(total, total);
    let mut mean = DVector::zeros(total);
    let mut offsets = Vec::with_capacity(targets.len());
    let mut off = 0;
    for ((model, prior), &d) in targets.iter().zip(&dims) {
        offsets.push(off);
        a.view_mut((off, off), (d, d)).copy_from(&model.a);
        w.view_mut((off, off), (d, d)).copy_from(&model.w);
        cov.view_mut((off, off), (d, d)).copy_from(&prior.cov);
        mean.rows_mut(off, d).copy_from(&prior.mean);
        off += d;
    }
    (JointModel { a, w, prior: Belief { mean, cov }, horizon }, offsets)
}

/// Joint information matrix for one robot pose observing every target.
pub fn pose_info_matrix(
    pose: &UnicycleState,
    sensor: &SensorModel,
    joint_dim: usize,
    offsets: &[usize],
    target_dims: &[usize],
    predicted_mean: &DVector<f64>,
) -> Result<DMatrix<f64>, WorldError> {
    let mut info = DMatrix::zeros(joint_dim, joint_dim);
    for (&off, &d) in offsets.iter().zip(target_dims) {
        let txy = (predicted_mean[off], predicted_mean[off + 1]);
        let local = sensor_info_matrix(pose, sensor, txy, d)?;
        let mut block = info.view_mut((off, off), (d, d));
        block += local;
    }
    Ok(info)
}

struct Node {
    state: UnicycleState,
    controls: Vec<usize>,
    states: Vec<UnicycleState>,
    /// Per-target covariance blocks; targets are independent, so the
    /// joint covariance stays block-diagonal and is never materialized.
    covs: Vec<DMatrix<f64>>,
    mi: f64,
    step_infos: Vec<DMatrix<f64>>,
}

/// Per-target diagonal blocks of the joint model, used to filter each
/// target independently during tree expansion.
struct Blocks {
    a: Vec<DMatrix<f64>>,
    w: Vec<DMatrix<f64>>,
    prior: Vec<DMatrix<f64>>,
    offsets: Vec<usize>,
    dims: Vec<usize>,
    joint_dim: usize,
}

impl Blocks {
    fn split(joint: &JointModel, offsets: &[usize], dims: &[usize]) -> Self {
        let take = |m: &DMatrix<f64>| -> Vec<DMatrix<f64>> {
            offsets
                .iter()
                .zip(dims)
                .map(|(&off, &d)| m.view((off, off), (d, d)).into_owned())
                .collect()
        };
        Self {
            a: take(&joint.a),
            w: take(&joint.w),
            prior: take(&joint.prior.cov),
            offsets: offsets.to_vec(),
            dims: dims.to_vec(),
            joint_dim: joint.dim(),
        }
    }

    /// One filter step at pose `s`: predict every block, fold in this
    /// pose's information, and return (updated blocks, joint step info,
    /// information gain).
    fn step(
        &self,
        covs: &[DMatrix<f64>],
        sensor: &SensorModel,
        pose: &UnicycleState,
        mean: &DVector<f64>,
    ) -> Result<(Vec<DMatrix<f64>>, DMatrix<f64>, f64), TrajoptError> {
        let mut next = Vec::with_capacity(covs.len());
        let mut joint_info = DMatrix::zeros(self.joint_dim, self.joint_dim);
        let mut gain = 0.0;
        for t in 0..covs.len() {
            let (off, d) = (self.offsets[t], self.dims[t]);
            let pred = kf_predict(&covs[t], &self.a[t], &self.w[t]);
            let info = sensor_info_matrix(pose, sensor, (mean[off], mean[off + 1]), d)?;
            let upd = kf_update(&pred, &[&info])?;
            gain += 0.5 * (logdet_clamped(&pred) - logdet_clamped(&upd));
            joint_info.view_mut((off, off), (d, d)).copy_from(&info);
            next.push(upd);
        }
        Ok((next, joint_info, gain))
    }
}

fn state_distance(a: &UnicycleState, b: &UnicycleState) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dalt = a.alt - b.alt;
    let dth = wrap_angle(a.theta - b.theta);
    (dx * dx + dy * dy + dalt * dalt + dth * dth).sqrt()
}

/// Drop frontier nodes dominated by a retained near-identical node.
fn thin_frontier(nodes: Vec<Node>, eps: f64, delta: f64) -> Vec<Node> {
    let mut ranked = nodes;
    ranked.sort_by(|a, b| b.mi.total_cmp(&a.mi).then_with(|| a.controls.cmp(&b.controls)));
    let mut kept: Vec<Node> = Vec::new();
    'next: for node in ranked {
        for m in &kept {
            if state_distance(&m.state, &node.state) <= delta && m.mi >= node.mi - eps {
                continue 'next;
            }
        }
        kept.push(node);
    }
    kept
}

/// Index of the primitive used to loiter: an exact stop if available,
/// otherwise the cheapest primitive by control cost (ties toward the
/// lower index).
pub fn loiter_primitive(primitives: &[MotionPrimitive], cost: &CostField) -> usize {
    if let Some(i) = primitives.iter().position(|p| p.nu == 0.0 && p.omega == 0.0) {
        return i;
    }
    let mut best = 0;
    for (i, _) in primitives.iter().enumerate().skip(1) {
        if cost.ctrl_costs[i] < cost.ctrl_costs[best] {
            best = i;
        }
    }
    best
}

/// Expand, score, thin, and rank one robot's candidate set.
///
/// The joint model must be block-diagonal over the target blocks named by
/// `offsets` (as produced by [`build_joint_model`]); cross-target terms
/// in its transition, noise, or prior are ignored.
pub fn generate_candidates(
    robot: usize,
    spec: &RobotSpec,
    joint: &JointModel,
    offsets: &[usize],
    params: &CandidateParams,
) -> Result<Vec<CandidateTrajectory>, TrajoptError> {
    if params.depth == 0 {
        return Err(TrajoptError::BadParams("depth must be at least 1".into()));
    }
    if params.cap == 0 {
        return Err(TrajoptError::BadParams("cap must be at least 1".into()));
    }
    if params.eps < 0.0 || params.delta < 0.0 {
        return Err(TrajoptError::BadParams("thinning tolerances must be nonnegative".into()));
    }
    if spec.primitives.is_empty() {
        return Err(TrajoptError::BadParams("no motion primitives".into()));
    }
    if spec.cost.ctrl_costs.len() != spec.primitives.len() {
        return Err(TrajoptError::BadParams(format!(
            "{} control costs for {} primitives",
            spec.cost.ctrl_costs.len(),
            spec.primitives.len()
        )));
    }
    if joint.horizon != params.depth {
        return Err(TrajoptError::BadParams(format!(
            "joint model horizon {} does not match depth {}",
            joint.horizon, params.depth
        )));
    }
    let dim = joint.dim();
    let target_dims: Vec<usize> = {
        let mut dims = Vec::with_capacity(offsets.len());
        for (i, &off) in offsets.iter().enumerate() {
            let end = offsets.get(i + 1).copied().unwrap_or(dim);
            dims.push(end - off);
        }
        dims
    };
    let blocks = Blocks::split(joint, offsets, &target_dims);
    let means = joint.predicted_means();
    let thin = !(params.eps == 0.0 && params.delta == 0.0);

    let mut frontier = vec![Node {
        state: spec.start,
        controls: Vec::new(),
        states: vec![spec.start],
        covs: blocks.prior.clone(),
        mi: 0.0,
        step_infos: Vec::new(),
    }];
    for depth in 0..params.depth {
        let mut next = Vec::with_capacity(frontier.len() * spec.primitives.len());
        for node in &frontier {
            for (c, prim) in spec.primitives.iter().enumerate() {
                let s2 = step_unicycle(&node.state, prim, spec.tau);
                let (covs, info, step_mi) =
                    blocks.step(&node.covs, &spec.sensor, &s2, &means[depth + 1])?;
                let mut controls = node.controls.clone();
                controls.push(c);
                let mut states = node.states.clone();
                states.push(s2);
                let mut step_infos = node.step_infos.clone();
                step_infos.push(info);
                next.push(Node {
                    state: s2,
                    controls,
                    states,
                    covs,
                    mi: node.mi + step_mi,
                    step_infos,
                });
            }
        }
        frontier = if thin { thin_frontier(next, params.eps, params.delta) } else { next };
    }

    let loiter = loiter_primitive(&spec.primitives, &spec.cost);
    let loiter_controls = vec![loiter; params.depth];

    let mut cands: Vec<CandidateTrajectory> = Vec::with_capacity(frontier.len());
    for node in frontier {
        cands.push(finalize(robot, spec, node)?);
    }
    cands.sort_by(|a, b| {
        b.standalone.total_cmp(&a.standalone).then_with(|| a.controls.cmp(&b.controls))
    });
    cands.truncate(params.cap);

    // Guarantee the loiter candidate survives the cap (unless cap == 1).
    if params.cap >= 2 && !cands.iter().any(|c| c.controls == loiter_controls) {
        let node = roll_path(spec, &blocks, &means, &loiter_controls)?;
        let loiter_cand = finalize(robot, spec, node)?;
        if cands.len() == params.cap {
            cands.pop();
        }
        cands.push(loiter_cand);
        cands.sort_by(|a, b| {
            b.standalone.total_cmp(&a.standalone).then_with(|| a.controls.cmp(&b.controls))
        });
    }

    for (i, cand) in cands.iter_mut().enumerate() {
        cand.id = TrajId::new(robot, i);
    }
    Ok(cands)
}

/// Score one explicit control sequence through the same filter pipeline.
fn roll_path(
    spec: &RobotSpec,
    blocks: &Blocks,
    means: &[DVector<f64>],
    controls: &[usize],
) -> Result<Node, TrajoptError> {
    let mut node = Node {
        state: spec.start,
        controls: Vec::new(),
        states: vec![spec.start],
        covs: blocks.prior.clone(),
        mi: 0.0,
        step_infos: Vec::new(),
    };
    for (depth, &c) in controls.iter().enumerate() {
        let s2 = step_unicycle(&node.state, &spec.primitives[c], spec.tau);
        let (covs, info, step_mi) =
            blocks.step(&node.covs, &spec.sensor, &s2, &means[depth + 1])?;
        node.mi += step_mi;
        node.state = s2;
        node.controls.push(c);
        node.states.push(s2);
        node.covs = covs;
        node.step_infos.push(info);
    }
    Ok(node)
}

fn finalize(
    robot: usize,
    spec: &RobotSpec,
    node: Node,
) -> Result<CandidateTrajectory, TrajoptError> {
    let energy = trajectory_energy(&node.controls, &node.states, &spec.cost)?;
    let mi = node.mi.max(0.0);
    Ok(CandidateTrajectory {
        id: TrajId::new(robot, 0), // reassigned after ranking
        controls: node.controls,
        states: node.states,
        mi,
        energy,
        standalone: mi - energy,
        step_infos: node.step_infos,
    })
}

/// Register candidates with the oracle and return the scored menu in
/// scan order.
pub fn register_candidates(
    oracle: &mut Oracle,
    cands: &[CandidateTrajectory],
) -> Result<Vec<(TrajId, f64)>, EstimationError> {
    let mut menu = Vec::with_capacity(cands.len());
    for cand in cands {
        oracle.register(
            cand.id,
            CandidateData {
                robot: cand.id.robot,
                step_infos: cand.step_infos.clone(),
                energy: cand.energy,
            },
        )?;
        menu.push((cand.id, cand.standalone));
    }
    Ok(menu)
}
