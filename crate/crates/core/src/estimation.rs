//! Target-state estimation and the planning objective oracle.
//!
//! The joint state of all targets follows one block linear-Gaussian model
//! `y⁺ = A y + w`, `w ~ N(0, W)`.  Planning never sees future
//! measurements, so candidate trajectories are scored on covariance alone:
//! each candidate contributes a fixed sequence of information matrices
//! `M_k = HᵀV⁻¹H` (one per step, linearized about the open-loop predicted
//! mean), and the mutual information accumulated by a set `S` of
//! trajectories over the horizon is the telescoping sum
//!
//! ```text
//! MI(S) = 1/2 Σ_k [ logdet Σ_k|k-1  −  logdet Σ_k|k ]
//! ```
//!
//! with `Σ_k|k = (Σ_k|k-1⁻¹ + Σ_{i∈S} M_{i,k})⁻¹` (information-form
//! update — no explicit inverse of a near-singular covariance is formed).
//! The planner's set objective is the shifted trade-off
//!
//! ```text
//! g(S) = MI(S) − Σ_{a∈S} energy(a) + Ω,
//! ```
//!
//! where `energy(a)` is the weighted trajectory cost cached on each
//! candidate and `Ω = Σ_i m_i c_i^max` shifts the objective so that
//! `g ≥ 0` on every feasible set.  `g` is memoized by the sorted candidate
//! id set, and the oracle keeps two counters: `queries` (every request)
//! and `evals` (cache misses, i.e. fresh Kalman rolls) — the currency in
//! which search-cost comparisons are made.
//!
//! Eigenvalues are clamped at `1e-9` before any log-determinant, so
//! near-singular covariances degrade gracefully instead of producing
//! `-inf`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use thiserror::Error;

/// Eigenvalue floor applied before log-determinants.
pub const EIG_FLOOR: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: {0}")]
    BadShape(String),
    #[error("unknown trajectory id ({0}, {1})")]
    UnknownId(usize, usize),
    #[error("candidate ({0}, {1}) registered twice")]
    DuplicateId(usize, usize),
}

/// Identifier of one candidate trajectory: owning robot and its index in
/// that robot's candidate list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TrajId {
    pub robot: usize,
    pub index: usize,
}

impl TrajId {
    pub fn new(robot: usize, index: usize) -> Self {
        Self { robot, index }
    }
}

/// Gaussian belief over the joint target state.
#[derive(Debug, Clone)]
pub struct Belief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Joint linear-Gaussian target model plus the planning horizon.
#[derive(Debug, Clone)]
pub struct JointModel {
    pub a: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub prior: Belief,
    /// Number of filter steps per candidate trajectory.
    pub horizon: usize,
}

impl JointModel {
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// Open-loop predicted means `μ_k = A^k μ_0` for `k = 0..=horizon`;
    /// these are the linearization points for sensor Jacobians (they do not
    /// depend on which trajectories are selected).
    pub fn predicted_means(&self) -> Vec<DVector<f64>> {
        let mut means = Vec::with_capacity(self.horizon + 1);
        means.push(self.prior.mean.clone());
        for _ in 0..self.horizon {
            let next = &self.a * means.last().unwrap();
            means.push(next);
        }
        means
    }
}

/// Covariance prediction `A Σ Aᵀ + W`.
pub fn kf_predict(cov: &DMatrix<f64>, a: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    a * cov * a.transpose() + w
}

/// Information-form covariance update `(Σ⁻¹ + Σ_i M_i)⁻¹`.
///
/// A zero total information matrix returns the input unchanged.
pub fn kf_update(
    cov: &DMatrix<f64>,
    infos: &[&DMatrix<f64>],
) -> Result<DMatrix<f64>, EstimationError> {
    let d = cov.nrows();
    let mut total = DMatrix::zeros(d, d);
    let mut any = false;
    for m in infos {
        if m.nrows() != d || m.ncols() != d {
            return Err(EstimationError::BadShape(format!(
                "info matrix is {}x{}, covariance is {d}x{d}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|&v| v != 0.0) {
            total += *m;
            any = true;
        }
    }
    if !any {
        return Ok(cov.clone());
    }
    let chol = cov
        .clone()
        .cholesky()
        .ok_or(EstimationError::NotPositiveDefinite)?;
    let precision = chol.inverse();
    let post_info = precision + total;
    let chol2 = post_info
        .cholesky()
        .ok_or(EstimationError::NotPositiveDefinite)?;
    let post = chol2.inverse();
    Ok((&post + post.transpose()) * 0.5)
}

/// Log-determinant of a symmetric PSD matrix with eigenvalues clamped at
/// [`EIG_FLOOR`].
pub fn logdet_clamped(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|&lam| lam.max(EIG_FLOOR).ln())
        .sum()
}

/// Mean/covariance prediction for the tracking filter.
pub fn predict_belief(belief: &Belief, a: &DMatrix<f64>, w: &DMatrix<f64>) -> Belief {
    Belief {
        mean: a * &belief.mean,
        cov: kf_predict(&belief.cov, a, w),
    }
}

/// One scalar measurement row for the tracking filter: Jacobian over the
/// joint state, noise variance, and the innovation `z − ẑ`.
#[derive(Debug, Clone)]
pub struct LinearMeasurement {
    pub h_row: DVector<f64>,
    pub variance: f64,
    pub innovation: f64,
}

/// Information-form measurement update of mean and covariance.
pub fn apply_measurements(
    predicted: &Belief,
    measurements: &[LinearMeasurement],
) -> Result<Belief, EstimationError> {
    if measurements.is_empty() {
        return Ok(predicted.clone());
    }
    let d = predicted.cov.nrows();
    let mut info = DMatrix::zeros(d, d);
    let mut info_vec = DVector::zeros(d);
    for m in measurements {
        if m.h_row.len() != d {
            return Err(EstimationError::BadShape(format!(
                "measurement row length {} vs state dim {d}",
                m.h_row.len()
            )));
        }
        let iv = 1.0 / m.variance;
        info += &m.h_row * m.h_row.transpose() * iv;
        info_vec += &m.h_row * (iv * m.innovation);
    }
    let cov = kf_update(&predicted.cov, &[&info])?;
    let mean = &predicted.mean + &cov * info_vec;
    Ok(Belief { cov, mean })
}

/// Per-candidate data registered with the oracle: owning robot, one
/// information matrix per filter step, and the cached weighted energy.
#[derive(Debug, Clone)]
pub struct CandidateData {
    pub robot: usize,
    pub step_infos: Vec<DMatrix<f64>>,
    pub energy: f64,
}

/// Memoizing objective oracle for `g(S) = MI(S) − Σ energy + Ω`.
///
/// Shareable across threads; the cache is insert-only under a mutex and
/// evaluation is deterministic, so concurrent use cannot change any value.
pub struct Oracle {
    model: JointModel,
    omega: f64,
    candidates: HashMap<TrajId, CandidateData>,
    cache: Mutex<HashMap<Box<[TrajId]>, f64>>,
    queries: AtomicU64,
    evals: AtomicU64,
}

impl Oracle {
    pub fn new(model: JointModel, omega: f64) -> Self {
        Self {
            model,
            omega,
            candidates: HashMap::new(),
            cache: Mutex::new(HashMap::new()),
            queries: AtomicU64::new(0),
            evals: AtomicU64::new(0),
        }
    }

    /// Register one candidate trajectory.  `step_infos` must hold exactly
    /// `horizon` matrices of the joint dimension.
    pub fn register(&mut self, id: TrajId, data: CandidateData) -> Result<(), EstimationError> {
        if self.candidates.contains_key(&id) {
            return Err(EstimationError::DuplicateId(id.robot, id.index));
        }
        if data.step_infos.len() != self.model.horizon {
            return Err(EstimationError::BadShape(format!(
                "{} step infos for horizon {}",
                data.step_infos.len(),
                self.model.horizon
            )));
        }
        let d = self.model.dim();
        for m in &data.step_infos {
            if m.nrows() != d || m.ncols() != d {
                return Err(EstimationError::BadShape(format!(
                    "info matrix {}x{} vs joint dim {d}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        self.candidates.insert(id, data);
        Ok(())
    }

    pub fn model(&self) -> &JointModel {
        &self.model
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn contains(&self, id: TrajId) -> bool {
        self.candidates.contains_key(&id)
    }

    pub fn energy(&self, id: TrajId) -> Result<f64, EstimationError> {
        self.candidates
            .get(&id)
            .map(|c| c.energy)
            .ok_or(EstimationError::UnknownId(id.robot, id.index))
    }

    /// Total oracle queries (including cache hits).
    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    /// Fresh evaluations (cache misses): the unit of search cost.
    pub fn evals(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.queries.store(0, Ordering::Relaxed);
        self.evals.store(0, Ordering::Relaxed);
    }

    fn canonical_key(&self, ids: &[TrajId]) -> Result<Box<[TrajId]>, EstimationError> {
        let mut key: Vec<TrajId> = ids.to_vec();
        key.sort_unstable();
        key.dedup();
        for id in &key {
            if !self.candidates.contains_key(id) {
                return Err(EstimationError::UnknownId(id.robot, id.index));
            }
        }
        Ok(key.into_boxed_slice())
    }

    /// Objective value `g(S)`.  Duplicate ids are collapsed; the empty set
    /// evaluates to `Ω`.
    pub fn g(&self, ids: &[TrajId]) -> Result<f64, EstimationError> {
        let key = self.canonical_key(ids)?;
        self.queries.fetch_add(1, Ordering::Relaxed);
        if let Some(&v) = self.cache.lock().unwrap().get(&key) {
            return Ok(v);
        }
        self.evals.fetch_add(1, Ordering::Relaxed);
        let mi = self.mi_uncached(&key)?;
        let energy: f64 = key.iter().map(|id| self.candidates[id].energy).sum();
        let value = mi - energy + self.omega;
        self.cache.lock().unwrap().insert(key, value);
        Ok(value)
    }

    /// Marginal gain `g(S ∪ {a}) − g(S)`.
    pub fn marginal(&self, a: TrajId, base: &[TrajId]) -> Result<f64, EstimationError> {
        let mut with: Vec<TrajId> = base.to_vec();
        with.push(a);
        Ok(self.g(&with)? - self.g(base)?)
    }

    /// Mutual information of a set (derived from the cached `g`).
    pub fn mi(&self, ids: &[TrajId]) -> Result<f64, EstimationError> {
        let key = self.canonical_key(ids)?;
        let energy: f64 = key.iter().map(|id| self.candidates[id].energy).sum();
        Ok(self.g(&key)? + energy - self.omega)
    }

    fn mi_uncached(&self, key: &[TrajId]) -> Result<f64, EstimationError> {
        let d = self.model.dim();
        if d == 0 || self.model.horizon == 0 {
            return Ok(0.0);
        }
        let mut cov = self.model.prior.cov.clone();
        let mut mi = 0.0;
        for k in 0..self.model.horizon {
            let pred = kf_predict(&cov, &self.model.a, &self.model.w);
            let infos: Vec<&DMatrix<f64>> = key
                .iter()
                .map(|id| &self.candidates[id].step_infos[k])
                .collect();
            let upd = kf_update(&pred, &infos)?;
            let term = 0.5 * (logdet_clamped(&pred) - logdet_clamped(&upd));
            debug_assert!(term > -1e-6, "information term {term} far below zero");
            mi += term;
            cov = upd;
        }
        Ok(mi.max(0.0))
    }
}

/// Randomized abstract planning instances: linear-Gaussian target models
/// with synthetic per-candidate information sequences and energies.  Used
/// by planner tests and benchmarks that exercise search behavior without
/// the geometric pipeline.
pub mod synth {
    use super::*;
    use rand::Rng;

    /// A generated instance: the oracle plus, per robot, the candidate ids
    /// paired with their standalone gains `g({a}) − g(∅)`.
    pub struct SynthInstance {
        pub oracle: Oracle,
        pub per_robot: Vec<Vec<(TrajId, f64)>>,
    }

    fn random_psd<R: Rng + ?Sized>(rng: &mut R, d: usize, scale: f64) -> DMatrix<f64> {
        let ranks = 1 + rng.random_range(0..2);
        let mut m = DMatrix::zeros(d, d);
        for _ in 0..ranks {
            let v = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            m += &v * v.transpose() * scale * rng.random_range(0.0..1.0f64);
        }
        m
    }

    /// Build a random instance with `n_robots` robots holding up to
    /// `max_cands` candidates each.  Roughly a third of the candidates are
    /// "dud" trajectories with zero information and positive energy, which
    /// both makes the objective non-monotone and gives lazy candidate scans
    /// something to skip.
    pub fn random_instance<R: Rng + ?Sized>(
        rng: &mut R,
        n_robots: usize,
        max_cands: usize,
        dim: usize,
        horizon: usize,
    ) -> SynthInstance {
        let a = DMatrix::identity(dim, dim);
        let w = random_psd(rng, dim, 0.02) + DMatrix::identity(dim, dim) * 0.01;
        let prior_cov = random_psd(rng, dim, 0.5) + DMatrix::identity(dim, dim) * 1.0;
        let model = JointModel {
            a,
            w,
            prior: Belief { mean: DVector::zeros(dim), cov: prior_cov },
            horizon,
        };

        let weights: Vec<f64> = (0..n_robots).map(|_| rng.random_range(0.2..2.0)).collect();
        let cmax = 1.0;
        let omega: f64 = weights.iter().map(|m| m * cmax).sum();

        let mut oracle = Oracle::new(model, omega);
        let mut ids: Vec<Vec<TrajId>> = Vec::new();
        for (robot, weight) in weights.iter().enumerate() {
            let count = rng.random_range(1..=max_cands);
            let mut robot_ids = Vec::new();
            for index in 0..count {
                let dud = rng.random_range(0.0..1.0f64) < 0.33;
                let step_infos: Vec<DMatrix<f64>> = (0..horizon)
                    .map(|_| {
                        if dud {
                            DMatrix::zeros(dim, dim)
                        } else {
                            random_psd(rng, dim, 1.5)
                        }
                    })
                    .collect();
                let energy = weight * cmax * rng.random_range(0.0..1.0f64);
                let id = TrajId::new(robot, index);
                oracle
                    .register(id, CandidateData { robot, step_infos, energy })
                    .expect("fresh id");
                robot_ids.push(id);
            }
            ids.push(robot_ids);
        }

        let per_robot = ids
            .into_iter()
            .map(|robot_ids| {
                let mut with_gain: Vec<(TrajId, f64)> = robot_ids
                    .into_iter()
                    .map(|id| {
                        let gain = oracle.g(&[id]).expect("registered") - oracle.omega();
                        (id, gain)
                    })
                    .collect();
                with_gain.sort_by(|a, b| {
                    b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0))
                });
                with_gain
            })
            .collect();
        oracle.reset_counters();
        SynthInstance { oracle, per_robot }
    }

    /// Build an instance with heavily overlapping coverage.
    ///
    /// Every robot's highest-standalone candidate observes the same
    /// high-variance "hotspot" target, which saturates after a single
    /// observation; each robot also carries two candidates covering a
    /// private territory nobody else can see.  A first-fit candidate scan
    /// therefore stacks redundant hotspot picks (each still clears the
    /// acceptance threshold) and has to repair them with swaps later,
    /// while a greedy scan takes the complementary territory candidate
    /// directly.  This is the texture of teams whose sensor footprints
    /// overlap, and it is where the warm start pays for its extra phase
    /// rounds.
    ///
    /// With `monotone` set, candidate energies are zeroed so the
    /// objective is monotone non-decreasing in the set.
    pub fn overlap_instance<R: Rng + ?Sized>(
        rng: &mut R,
        n_robots: usize,
        monotone: bool,
    ) -> SynthInstance {
        let dim = n_robots + 1;
        let mut prior_cov = DMatrix::zeros(dim, dim);
        prior_cov[(0, 0)] = 1.0e4 * (1.0 + rng.random_range(0.0..0.2));
        for t in 1..dim {
            prior_cov[(t, t)] = 50.0 * (1.0 + rng.random_range(0.0..0.2));
        }
        let model = JointModel {
            a: DMatrix::identity(dim, dim),
            w: DMatrix::identity(dim, dim) * 0.01,
            prior: Belief { mean: DVector::zeros(dim), cov: prior_cov },
            horizon: 1,
        };

        let weights: Vec<f64> = (0..n_robots).map(|_| rng.random_range(0.2..0.5)).collect();
        let cmax = 1.0;
        let omega: f64 = weights.iter().map(|m| m * cmax).sum();

        let mut oracle = Oracle::new(model, omega);
        let mut ids: Vec<Vec<TrajId>> = Vec::new();
        for (robot, weight) in weights.iter().enumerate() {
            // (observed dim, sensing strength, energy): one hotspot
            // observer and two private-territory observers of descending
            // quality.
            let menu = [
                (0, 10.0 * (1.0 + rng.random_range(0.0..0.1)), weight * 0.10),
                (robot + 1, 1.0 * (1.0 + rng.random_range(0.0..0.1)), weight * 0.05),
                (robot + 1, 0.5 * (1.0 + rng.random_range(0.0..0.1)), weight * 0.05),
            ];
            let mut robot_ids = Vec::new();
            for (index, (target, strength, energy)) in menu.into_iter().enumerate() {
                let mut info = DMatrix::zeros(dim, dim);
                info[(target, target)] = strength;
                let id = TrajId::new(robot, index);
                let energy = if monotone { 0.0 } else { energy };
                oracle
                    .register(id, CandidateData { robot, step_infos: vec![info], energy })
                    .expect("fresh id");
                robot_ids.push(id);
            }
            ids.push(robot_ids);
        }

        let per_robot = ids
            .into_iter()
            .map(|robot_ids| {
                let mut with_gain: Vec<(TrajId, f64)> = robot_ids
                    .into_iter()
                    .map(|id| {
                        let gain = oracle.g(&[id]).expect("registered") - oracle.omega();
                        (id, gain)
                    })
                    .collect();
                with_gain.sort_by(|a, b| {
                    b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0))
                });
                with_gain
            })
            .collect();
        oracle.reset_counters();
        SynthInstance { oracle, per_robot }
    }
}
