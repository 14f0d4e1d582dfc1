//! Trajectory assignment by non-monotone submodular local search.
//!
//! Each robot owns a finite menu of candidate trajectories and the team
//! may select at most one per robot (a partition constraint).  The
//! objective `g` — information gain minus weighted energy plus a constant
//! offset — is submodular but not monotone, so plain greedy selection can
//! be arbitrarily bad.  The search here starts from the best single
//! candidate and repeatedly applies the best improving deletion, addition,
//! or swap, where "improving" means the objective grows by at least a
//! factor `1 + α/N⁴` (`N` = total number of candidates).  Two passes are
//! run, the second over the ground set minus the first pass's picks, and
//! the better of the two answers is returned; the winner's value is within
//! a provable factor `4(1+α)` of the best feasible set.
//!
//! The same proposal/resolution dynamic runs in two modes:
//!
//! * [`centralized_local_search`] evaluates every robot's proposal in one
//!   process and resolves immediately.
//! * [`distributed_local_search`] pushes each proposal through a
//!   [`Network`] with stochastic delays; every robot resolves the round
//!   independently from its own inbox and the runs are checked for
//!   agreement.  Message timing never changes the answer — only the
//!   logical completion time.
//!
//! Candidate scans are *lazy* by default: a robot's menu is pre-sorted by
//! standalone gain, which upper-bounds every later marginal gain by
//! submodularity, so the scan stops at the first candidate whose bound
//! falls below the acceptance threshold.  Lazy and eager scans return
//! identical proposals; lazy simply evaluates fewer sets.
//!
//! A *warm start* phase restricts early rounds to additions only, which
//! builds up the solution with cheap scans before the full
//! deletion/swap machinery engages.
//!
//! [`coordinate_descent`] implements the classical sequential baseline
//! (each robot greedily picks once, in a fixed order) for comparison.

use crate::estimation::{EstimationError, Oracle, TrajId};
use crate::netsim::{self, DelayModel, NetError, Network, RoundEntry};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("local search exceeded {0} resolution rounds without converging")]
    RoundLimitExceeded(usize),
    #[error("bad robot ordering: {0}")]
    BadOrdering(String),
}

/// Tunables for the local search.
#[derive(Debug, Clone, Copy)]
pub struct SearchParams {
    /// Approximation knob: larger α accepts only larger improvements,
    /// trading solution quality (bound `4(1+α)`) for convergence speed.
    pub alpha: f64,
    /// Stop candidate scans at the first standalone-gain bound below the
    /// acceptance threshold.  Never changes the answer.
    pub lazy: bool,
    /// Run an additions-only phase before enabling deletions and swaps.
    pub warm_start: bool,
    /// Hard cap on resolution rounds per pass, as a cycle guard.
    pub max_resolutions: usize,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self { alpha: 1.0, lazy: true, warm_start: true, max_resolutions: 10_000 }
    }
}

/// One robot's contribution to a synchronized round: change `delete` →
/// `add` (either may be absent), yielding objective `new_value`.  Both
/// absent is the sentinel "no improving move found".
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub robot: usize,
    pub delete: Option<TrajId>,
    pub add: Option<TrajId>,
    pub new_value: f64,
}

impl Proposal {
    fn sentinel(robot: usize) -> Self {
        Proposal { robot, delete: None, add: None, new_value: f64::NEG_INFINITY }
    }
}

impl RoundEntry for Proposal {
    fn proposer(&self) -> usize {
        self.robot
    }
    fn is_noop(&self) -> bool {
        self.delete.is_none() && self.add.is_none()
    }
    fn value(&self) -> f64 {
        self.new_value
    }
}

/// Outcome of one full search pass.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub set: Vec<TrajId>,
    pub value: f64,
    pub resolutions: usize,
}

#[derive(Debug, Clone, Default)]
pub struct SearchStats {
    /// Objective evaluations that actually ran the filter (cache misses).
    pub evals: u64,
    /// All objective lookups including cache hits.
    pub queries: u64,
    pub adds: usize,
    pub deletes: usize,
    pub swaps: usize,
    /// Synchronized proposal rounds across both passes.
    pub resolutions: usize,
    /// Network messages sent (zero for the centralized variant).
    pub messages: u64,
    /// Logical time when the networked run finished (zero centralized).
    pub logical_time: f64,
    /// False if any robot's independently resolved state ever diverged.
    pub agreement_ok: bool,
}

#[derive(Debug, Clone)]
pub struct Solution {
    /// Selected trajectory ids, sorted; at most one per robot.
    pub set: Vec<TrajId>,
    pub value: f64,
    /// Which pass (1 or 2) produced the returned set.
    pub chosen_round: usize,
    /// Both passes' outcomes, index 0 = pass 1.
    pub rounds: Vec<RoundOutcome>,
    pub stats: SearchStats,
    /// Hex digest of the sorted id list; used for agreement checks.
    pub hash: String,
}

/// A candidate-assignment instance: shared objective plus each robot's
/// menu sorted by descending standalone gain `g({a}) − g(∅)`.
pub struct PlanningProblem<'a> {
    pub oracle: &'a Oracle,
    pub per_robot: Vec<Vec<(TrajId, f64)>>,
}

impl<'a> PlanningProblem<'a> {
    /// Compute standalone gains for every candidate and sort each menu.
    pub fn new(oracle: &'a Oracle, per_robot_ids: Vec<Vec<TrajId>>) -> Result<Self, PlanError> {
        let omega = oracle.g(&[])?;
        let mut per_robot = Vec::with_capacity(per_robot_ids.len());
        for ids in per_robot_ids {
            let mut menu = Vec::with_capacity(ids.len());
            for id in ids {
                menu.push((id, oracle.g(&[id])? - omega));
            }
            sort_menu(&mut menu);
            per_robot.push(menu);
        }
        Ok(Self { oracle, per_robot })
    }

    /// Adopt menus that already carry standalone gains (e.g. from the
    /// candidate generator); re-sorts to enforce the scan order.
    pub fn from_scored(oracle: &'a Oracle, mut per_robot: Vec<Vec<(TrajId, f64)>>) -> Self {
        for menu in &mut per_robot {
            sort_menu(menu);
        }
        Self { oracle, per_robot }
    }

    pub fn n_robots(&self) -> usize {
        self.per_robot.len()
    }

    pub fn total_candidates(&self) -> usize {
        self.per_robot.iter().map(Vec::len).sum()
    }

    fn threshold(&self, alpha: f64) -> f64 {
        let n = self.total_candidates();
        if n == 0 {
            1.0
        } else {
            1.0 + alpha / (n as f64).powi(4)
        }
    }
}

fn sort_menu(menu: &mut [(TrajId, f64)]) {
    menu.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

fn hash_ids(ids: &[TrajId]) -> String {
    let mut hasher = Sha256::new();
    for id in ids {
        hasher.update(id.robot.to_le_bytes());
        hasher.update(id.index.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        use std::fmt::Write;
        let _ = write!(out, "{byte:02x}");
    }
    out
}

/// How a robot scans its menu for an addition.
#[derive(Clone, Copy, PartialEq)]
enum ScanMode {
    /// Emit the first candidate that clears the acceptance threshold
    /// (standard local-search behavior).
    FirstQualifying,
    /// Emit the candidate with the *largest* marginal gain that clears
    /// the threshold.  Used during the warm-start phase: one big greedy
    /// addition replaces the several small improvements the first-fit
    /// scan would spread over separate rounds.
    GreedyBest,
}

/// Compute one robot's proposal for the current shared set.
///
/// Scan order: first pure additions (no deletion), then each current
/// member as a deletion in ascending id order.  For every deletion stem
/// the robot first checks whether the deletion alone clears the
/// threshold, then — if it holds no trajectory in the stem — scans its
/// own menu for an addition whose combined value clears it.
#[allow(clippy::too_many_arguments)]
fn find_proposal(
    oracle: &Oracle,
    robot: usize,
    menu: &[(TrajId, f64)],
    set: &BTreeSet<TrajId>,
    g_s: f64,
    threshold: f64,
    additions_only: bool,
    mode: ScanMode,
    lazy: bool,
) -> Result<Proposal, PlanError> {
    let target = threshold * g_s;
    let mut stems: Vec<Option<TrajId>> = vec![None];
    if !additions_only {
        stems.extend(set.iter().copied().map(Some));
    }
    for stem in stems {
        let (s_minus, g_minus) = match stem {
            None => (set.clone(), g_s),
            Some(d) => {
                let mut s = set.clone();
                s.remove(&d);
                let ids: Vec<TrajId> = s.iter().copied().collect();
                let g = oracle.g(&ids)?;
                if g >= target {
                    return Ok(Proposal { robot, delete: Some(d), add: None, new_value: g });
                }
                (s, g)
            }
        };
        // The partition constraint allows an addition only when this
        // robot holds nothing in the stem.
        if s_minus.iter().any(|t| t.robot == robot) {
            continue;
        }
        let base: Vec<TrajId> = s_minus.iter().copied().collect();
        // Best candidate seen so far in greedy mode: (id, g(S⁻ ∪ {a})).
        let mut best: Option<(TrajId, f64)> = None;
        for &(a, standalone) in menu {
            if Some(a) == stem {
                // Re-adding the just-deleted candidate recreates the
                // current set; never an improvement worth proposing.
                continue;
            }
            if lazy {
                // Submodularity: a candidate's marginal gain is at most
                // its standalone gain, and the menu is sorted by
                // standalone gain — so once the bound falls below the
                // threshold (or below the best marginal already in hand)
                // no later candidate can change the outcome.
                let bound = g_minus + standalone;
                if bound < target {
                    break;
                }
                if let Some((_, bv)) = best {
                    if bound <= bv {
                        break;
                    }
                }
            }
            let mut with = base.clone();
            with.push(a);
            let g_union = oracle.g(&with)?;
            match mode {
                ScanMode::FirstQualifying => {
                    if g_union >= target {
                        return Ok(Proposal {
                            robot,
                            delete: stem,
                            add: Some(a),
                            new_value: g_union,
                        });
                    }
                }
                ScanMode::GreedyBest => {
                    // Strict improvement keeps the earliest maximal
                    // candidate, matching the eager arg-max tie-break.
                    if best.map_or(true, |(_, bv)| g_union > bv) {
                        best = Some((a, g_union));
                    }
                }
            }
        }
        if let Some((a, g_union)) = best {
            if g_union >= target {
                return Ok(Proposal { robot, delete: stem, add: Some(a), new_value: g_union });
            }
        }
    }
    Ok(Proposal::sentinel(robot))
}

enum Phase {
    Warm,
    Full,
}

struct PassResult {
    set: BTreeSet<TrajId>,
    value: f64,
    resolutions: usize,
}

/// Run one search pass over `ground` to a local optimum.
fn run_pass(
    oracle: &Oracle,
    ground: &[Vec<(TrajId, f64)>],
    threshold: f64,
    params: &SearchParams,
    mut net: Option<&mut Network<Proposal>>,
    clock: &mut f64,
    stats: &mut SearchStats,
) -> Result<PassResult, PlanError> {
    let n_robots = ground.len();

    // Start from the best single candidate (ties toward the lower id).
    let mut seed: Option<(TrajId, f64)> = None;
    for menu in ground {
        if let Some(&(id, gain)) = menu.first() {
            seed = match seed {
                None => Some((id, gain)),
                Some((bid, bg)) => {
                    if gain > bg || (gain == bg && id < bid) {
                        Some((id, gain))
                    } else {
                        Some((bid, bg))
                    }
                }
            };
        }
    }
    let mut set = BTreeSet::new();
    if let Some((id, _)) = seed {
        set.insert(id);
    }
    let ids: Vec<TrajId> = set.iter().copied().collect();
    let mut value = oracle.g(&ids)?;

    let mut phase = if params.warm_start { Phase::Warm } else { Phase::Full };
    let mut resolutions = 0usize;

    loop {
        if resolutions >= params.max_resolutions {
            return Err(PlanError::RoundLimitExceeded(resolutions));
        }
        let additions_only = matches!(phase, Phase::Warm);
        let mode =
            if additions_only { ScanMode::GreedyBest } else { ScanMode::FirstQualifying };
        let mut proposals = Vec::with_capacity(n_robots);
        for robot in 0..n_robots {
            proposals.push(find_proposal(
                oracle,
                robot,
                &ground[robot],
                &set,
                value,
                threshold,
                additions_only,
                mode,
                params.lazy,
            )?);
        }
        resolutions += 1;
        stats.resolutions += 1;

        let winner: Option<Proposal> = if let Some(net) = net.as_deref_mut() {
            // Every robot broadcasts, then resolves independently from its
            // own inbox once all peers have been heard.
            let t0 = *clock;
            for p in &proposals {
                net.broadcast(p.robot, t0, p.clone())?;
            }
            let mut inboxes: Vec<Vec<Proposal>> = vec![Vec::new(); n_robots];
            let expected = n_robots * n_robots.saturating_sub(1);
            for _ in 0..expected {
                let Some(msg) = net.next_delivery() else {
                    let waiting =
                        inboxes.iter().filter(|inbox| inbox.len() + 1 < n_robots).count();
                    return Err(NetError::Deadlock { waiting, now: *clock }.into());
                };
                *clock = msg.deliver_time;
                inboxes[msg.recipient].push(msg.payload);
            }
            let mut decisions: Vec<Option<Proposal>> = Vec::with_capacity(n_robots);
            for robot in 0..n_robots {
                let mut entries = inboxes[robot].clone();
                entries.push(proposals[robot].clone());
                let win = netsim::resolve_round(&entries, n_robots)?;
                decisions.push(win.map(|i| entries[i].clone()));
            }
            let agree = decisions.iter().all(|d| match (d, &decisions[0]) {
                (None, None) => true,
                (Some(a), Some(b)) => {
                    a.delete == b.delete
                        && a.add == b.add
                        && a.new_value.to_bits() == b.new_value.to_bits()
                }
                _ => false,
            });
            if !agree {
                stats.agreement_ok = false;
            }
            decisions.swap_remove(0)
        } else {
            netsim::resolve_round(&proposals, n_robots)?.map(|i| proposals[i].clone())
        };

        match winner {
            None => match phase {
                // All robots out of additions: enable deletions and swaps.
                Phase::Warm => phase = Phase::Full,
                Phase::Full => break,
            },
            Some(p) => {
                match (p.delete, p.add) {
                    (Some(_), Some(_)) => stats.swaps += 1,
                    (Some(_), None) => stats.deletes += 1,
                    (None, Some(_)) => stats.adds += 1,
                    (None, None) => unreachable!("sentinel cannot win a round"),
                }
                if let Some(d) = p.delete {
                    set.remove(&d);
                }
                if let Some(a) = p.add {
                    set.insert(a);
                }
                value = p.new_value;
            }
        }
    }
    Ok(PassResult { set, value, resolutions })
}

fn drive(
    problem: &PlanningProblem,
    params: &SearchParams,
    mut net: Option<Network<Proposal>>,
) -> Result<Solution, PlanError> {
    let oracle = problem.oracle;
    let threshold = problem.threshold(params.alpha);
    let mut stats = SearchStats { agreement_ok: true, ..Default::default() };
    let (q0, e0) = (oracle.queries(), oracle.evals());
    let mut clock = 0.0f64;

    let pass1 = run_pass(
        oracle,
        &problem.per_robot,
        threshold,
        params,
        net.as_mut(),
        &mut clock,
        &mut stats,
    )?;
    // Second pass over the ground set minus the first pass's picks, so a
    // bad early commitment cannot poison the final answer.
    let ground2: Vec<Vec<(TrajId, f64)>> = problem
        .per_robot
        .iter()
        .map(|menu| menu.iter().copied().filter(|(id, _)| !pass1.set.contains(id)).collect())
        .collect();
    let pass2 =
        run_pass(oracle, &ground2, threshold, params, net.as_mut(), &mut clock, &mut stats)?;

    let (chosen, chosen_round) =
        if pass1.value >= pass2.value { (&pass1, 1) } else { (&pass2, 2) };
    stats.queries = oracle.queries() - q0;
    stats.evals = oracle.evals() - e0;
    if let Some(net) = &net {
        stats.messages = net.stats.messages_sent;
        stats.logical_time = clock;
    }
    let set: Vec<TrajId> = chosen.set.iter().copied().collect();
    let hash = hash_ids(&set);
    let value = chosen.value;
    let rounds = [&pass1, &pass2]
        .iter()
        .map(|p| RoundOutcome {
            set: p.set.iter().copied().collect(),
            value: p.value,
            resolutions: p.resolutions,
        })
        .collect();
    Ok(Solution { set, value, chosen_round, rounds, stats, hash })
}

/// Two-pass local search evaluated in one process.
pub fn centralized_local_search(
    problem: &PlanningProblem,
    params: &SearchParams,
) -> Result<Solution, PlanError> {
    drive(problem, params, None)
}

/// The same search with proposals exchanged over a delayed broadcast
/// network; each robot resolves rounds from its own inbox.  Returns the
/// identical solution to [`centralized_local_search`] — delays shift
/// logical time, not the outcome.
pub fn distributed_local_search(
    problem: &PlanningProblem,
    params: &SearchParams,
    delay: DelayModel,
    net_seed: u64,
) -> Result<Solution, PlanError> {
    let net = Network::new(problem.n_robots(), delay, net_seed);
    drive(problem, params, Some(net))
}

/// Robot visiting order for [`coordinate_descent`].
#[derive(Debug, Clone)]
pub enum CdOrdering {
    ByIndex,
    /// Lightest energy weight first.
    WeightAscending(Vec<f64>),
    /// Heaviest energy weight first.
    WeightDescending(Vec<f64>),
    Custom(Vec<usize>),
}

fn cd_order(ordering: &CdOrdering, n: usize) -> Result<Vec<usize>, PlanError> {
    let by_weight = |weights: &[f64], descending: bool| -> Result<Vec<usize>, PlanError> {
        if weights.len() != n {
            return Err(PlanError::BadOrdering(format!(
                "{} weights for {} robots",
                weights.len(),
                n
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            let cmp = weights[a].total_cmp(&weights[b]);
            let cmp = if descending { cmp.reverse() } else { cmp };
            cmp.then_with(|| a.cmp(&b))
        });
        Ok(order)
    };
    match ordering {
        CdOrdering::ByIndex => Ok((0..n).collect()),
        CdOrdering::WeightAscending(w) => by_weight(w, false),
        CdOrdering::WeightDescending(w) => by_weight(w, true),
        CdOrdering::Custom(order) => {
            let mut seen = vec![false; n];
            if order.len() != n {
                return Err(PlanError::BadOrdering(format!(
                    "order length {} for {} robots",
                    order.len(),
                    n
                )));
            }
            for &r in order {
                if r >= n || seen[r] {
                    return Err(PlanError::BadOrdering(format!(
                        "order is not a permutation of 0..{n}"
                    )));
                }
                seen[r] = true;
            }
            Ok(order.clone())
        }
    }
}

/// Sequential greedy baseline: robots commit one at a time in `ordering`,
/// each picking its best candidate given all earlier commitments and
/// passing the partial solution on (`n − 1` handoffs).  A robot abstains
/// if even its best candidate would strictly lower the objective.
pub fn coordinate_descent(
    problem: &PlanningProblem,
    ordering: &CdOrdering,
) -> Result<Solution, PlanError> {
    let oracle = problem.oracle;
    let n = problem.n_robots();
    let order = cd_order(ordering, n)?;
    let mut stats = SearchStats { agreement_ok: true, ..Default::default() };
    let (q0, e0) = (oracle.queries(), oracle.evals());

    let mut set = BTreeSet::new();
    let mut value = oracle.g(&[])?;
    for (pos, &robot) in order.iter().enumerate() {
        let base: Vec<TrajId> = set.iter().copied().collect();
        let mut best: Option<(TrajId, f64)> = None;
        for &(a, _) in &problem.per_robot[robot] {
            let mut with = base.clone();
            with.push(a);
            let v = oracle.g(&with)?;
            best = match best {
                None => Some((a, v)),
                Some((bid, bv)) => {
                    if v > bv || (v == bv && a < bid) {
                        Some((a, v))
                    } else {
                        Some((bid, bv))
                    }
                }
            };
        }
        if let Some((a, v)) = best {
            if v >= value {
                set.insert(a);
                value = v;
                stats.adds += 1;
            }
        }
        if pos + 1 < order.len() {
            stats.messages += 1;
        }
    }
    stats.queries = oracle.queries() - q0;
    stats.evals = oracle.evals() - e0;
    let ids: Vec<TrajId> = set.iter().copied().collect();
    let hash = hash_ids(&ids);
    let outcome = RoundOutcome { set: ids.clone(), value, resolutions: 0 };
    Ok(Solution { set: ids, value, chosen_round: 1, rounds: vec![outcome], stats, hash })
}

/// Brute-force best feasible set by enumerating every per-robot choice
/// (including "pick nothing").  Exponential; for small instances and
/// tests only.
pub fn exhaustive_best(problem: &PlanningProblem) -> Result<(Vec<TrajId>, f64), PlanError> {
    let oracle = problem.oracle;
    let n = problem.n_robots();
    let mut best_set: Vec<TrajId> = Vec::new();
    let mut best_value = oracle.g(&[])?;
    let mut choice = vec![0usize; n]; // 0 = skip, k>0 = candidate k−1
    loop {
        let ids: Vec<TrajId> = choice
            .iter()
            .enumerate()
            .filter(|&(_, &c)| c > 0)
            .map(|(robot, &c)| problem.per_robot[robot][c - 1].0)
            .collect();
        if !ids.is_empty() {
            let v = oracle.g(&ids)?;
            if v > best_value {
                best_value = v;
                best_set = ids;
            }
        }
        // Odometer increment over mixed radices.
        let mut pos = 0;
        loop {
            if pos == n {
                best_set.sort();
                return Ok((best_set, best_value));
            }
            choice[pos] += 1;
            if choice[pos] <= problem.per_robot[pos].len() {
                break;
            }
            choice[pos] = 0;
            pos += 1;
        }
    }
}

/// Check that no single deletion, addition, or swap on `set` clears the
/// acceptance threshold over the given ground set — i.e. the search has
/// genuinely converged.  Exhaustive; for tests.
pub fn verify_local_optimum(
    oracle: &Oracle,
    ground: &[Vec<(TrajId, f64)>],
    set: &[TrajId],
    threshold: f64,
) -> Result<bool, PlanError> {
    let g_s = oracle.g(set)?;
    let target = threshold * g_s;
    let sset: BTreeSet<TrajId> = set.iter().copied().collect();
    let mut stems: Vec<Option<TrajId>> = vec![None];
    stems.extend(sset.iter().copied().map(Some));
    for stem in stems {
        let mut s_minus = sset.clone();
        if let Some(d) = stem {
            s_minus.remove(&d);
            let ids: Vec<TrajId> = s_minus.iter().copied().collect();
            if oracle.g(&ids)? >= target {
                return Ok(false);
            }
        }
        let base: Vec<TrajId> = s_minus.iter().copied().collect();
        for (robot, menu) in ground.iter().enumerate() {
            if s_minus.iter().any(|t| t.robot == robot) {
                continue;
            }
            for &(a, _) in menu {
                if Some(a) == stem {
                    continue;
                }
                let mut with = base.clone();
                with.push(a);
                if oracle.g(&with)? >= target {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::{synth, Belief, CandidateData, JointModel};
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn problem_from(instance: &synth::SynthInstance) -> PlanningProblem<'_> {
        PlanningProblem::from_scored(&instance.oracle, instance.per_robot.clone())
    }

    #[test]
    fn search_beats_best_singleton_and_is_locally_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let instance = synth::random_instance(&mut rng, 3, 4, 3, 4);
        let problem = problem_from(&instance);
        let params = SearchParams::default();
        let sol = centralized_local_search(&problem, &params).unwrap();

        let best_single = problem
            .per_robot
            .iter()
            .flatten()
            .map(|&(id, _)| instance.oracle.g(&[id]).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(sol.value >= best_single - 1e-12);

        // Reconstruct the ground set of the returned pass and check no
        // single move clears the threshold.
        let threshold = problem.threshold(params.alpha);
        let ground: Vec<Vec<(TrajId, f64)>> = if sol.chosen_round == 1 {
            problem.per_robot.clone()
        } else {
            let first: BTreeSet<TrajId> = sol.rounds[0].set.iter().copied().collect();
            problem
                .per_robot
                .iter()
                .map(|m| m.iter().copied().filter(|(id, _)| !first.contains(id)).collect())
                .collect()
        };
        assert!(verify_local_optimum(&instance.oracle, &ground, &sol.set, threshold).unwrap());
    }

    #[test]
    fn approximation_bound_holds_on_small_instances() {
        for seed in 0..25 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let instance = synth::random_instance(&mut rng, 3, 3, 2, 3);
            let problem = problem_from(&instance);
            let params = SearchParams::default();
            let sol = centralized_local_search(&problem, &params).unwrap();
            let (_, opt) = exhaustive_best(&problem).unwrap();
            let bound = 4.0 * (1.0 + params.alpha);
            assert!(
                opt <= bound * sol.value + 1e-9,
                "seed {seed}: opt {opt} exceeds {bound} × {}",
                sol.value
            );
        }
    }

    #[test]
    fn lazy_and_eager_scans_agree_with_fewer_lazy_evals() {
        let mut strict = 0;
        for seed in 0..20 {
            let make = || {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                synth::random_instance(&mut rng, 3, 5, 3, 4)
            };
            let lazy_inst = make();
            let eager_inst = make();
            let lazy_sol = centralized_local_search(
                &problem_from(&lazy_inst),
                &SearchParams { lazy: true, ..Default::default() },
            )
            .unwrap();
            let eager_sol = centralized_local_search(
                &problem_from(&eager_inst),
                &SearchParams { lazy: false, ..Default::default() },
            )
            .unwrap();
            assert_eq!(lazy_sol.set, eager_sol.set, "seed {seed}");
            assert_eq!(lazy_sol.value.to_bits(), eager_sol.value.to_bits(), "seed {seed}");
            assert!(
                lazy_sol.stats.evals <= eager_sol.stats.evals,
                "seed {seed}: lazy {} > eager {}",
                lazy_sol.stats.evals,
                eager_sol.stats.evals
            );
            if lazy_sol.stats.evals < eager_sol.stats.evals {
                strict += 1;
            }
        }
        assert!(strict >= 15, "lazy pruning rarely fired: {strict}/20");
    }

    /// Two targets with independent scalar states; robot 0 must choose
    /// between slightly-better coverage of target 1 (which robot 1 covers
    /// far better anyway) and slightly-worse exclusive coverage of target
    /// 2.  Greedy-in-order robots double-cover target 1; the local search
    /// swaps robot 0 over to target 2.
    fn shared_target_trap() -> Oracle {
        let dim = 2;
        let model = JointModel {
            a: DMatrix::identity(dim, dim),
            w: DMatrix::zeros(dim, dim),
            prior: Belief {
                mean: DVector::zeros(dim),
                cov: DMatrix::identity(dim, dim) * 100.0,
            },
            horizon: 1,
        };
        let mut oracle = Oracle::new(model, 0.0);
        let info = |t: usize, q: f64| {
            let mut m = DMatrix::zeros(2, 2);
            m[(t, t)] = q;
            vec![m]
        };
        // Robot 0: "share" watches target 0, "solo" watches target 1.
        oracle
            .register(
                TrajId::new(0, 0),
                CandidateData { robot: 0, step_infos: info(0, 0.9), energy: 0.0 },
            )
            .unwrap();
        oracle
            .register(
                TrajId::new(0, 1),
                CandidateData { robot: 0, step_infos: info(1, 0.85), energy: 0.0 },
            )
            .unwrap();
        // Robot 1 can only watch target 0, but does it very well.
        oracle
            .register(
                TrajId::new(1, 0),
                CandidateData { robot: 1, step_infos: info(0, 25.0), energy: 0.0 },
            )
            .unwrap();
        oracle
    }

    #[test]
    fn local_search_escapes_shared_target_trap_where_sequential_greedy_stalls() {
        let oracle = shared_target_trap();
        let menus = vec![
            vec![TrajId::new(0, 0), TrajId::new(0, 1)],
            vec![TrajId::new(1, 0)],
        ];
        let problem = PlanningProblem::new(&oracle, menus).unwrap();

        let cd = coordinate_descent(&problem, &CdOrdering::ByIndex).unwrap();
        let ls = centralized_local_search(&problem, &SearchParams::default()).unwrap();
        let (opt_set, opt_value) = exhaustive_best(&problem).unwrap();

        // Sequential greedy commits robot 0 to the shared target.
        assert!(cd.set.contains(&TrajId::new(0, 0)));
        assert!(cd.value < opt_value - 1.0);
        // Local search swaps robot 0 onto the exclusive target.
        assert_eq!(ls.set, opt_set);
        assert!((ls.value - opt_value).abs() < 1e-9);
        assert_eq!(ls.set, vec![TrajId::new(0, 1), TrajId::new(1, 0)]);
    }

    #[test]
    fn networked_run_matches_centralized_and_robots_agree() {
        for seed in 0..10 {
            let make = || {
                let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
                synth::random_instance(&mut rng, 4, 4, 3, 3)
            };
            let a = make();
            let b = make();
            let params = SearchParams::default();
            let central = centralized_local_search(&problem_from(&a), &params).unwrap();
            let networked = distributed_local_search(
                &problem_from(&b),
                &params,
                DelayModel::Normal { mean: 0.005, std: 0.001 },
                seed,
            )
            .unwrap();
            assert_eq!(central.set, networked.set, "seed {seed}");
            assert_eq!(central.value.to_bits(), networked.value.to_bits());
            assert!(networked.stats.agreement_ok);
            assert_eq!(central.hash, networked.hash);
            // Every resolution broadcasts one proposal per robot.
            let n = 4u64;
            assert_eq!(networked.stats.messages, networked.stats.resolutions as u64 * n * (n - 1));
            assert!(networked.stats.logical_time > 0.0);
        }
    }

    #[test]
    fn warm_start_converges_to_a_local_optimum_too() {
        for seed in 0..8 {
            let make = || {
                let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
                synth::random_instance(&mut rng, 3, 4, 2, 3)
            };
            let warm_inst = make();
            let cold_inst = make();
            let warm = centralized_local_search(
                &problem_from(&warm_inst),
                &SearchParams { warm_start: true, ..Default::default() },
            )
            .unwrap();
            let cold = centralized_local_search(
                &problem_from(&cold_inst),
                &SearchParams { warm_start: false, ..Default::default() },
            )
            .unwrap();
            // Both must be genuine local optima of their returned pass.
            for (sol, inst) in [(&warm, &warm_inst), (&cold, &cold_inst)] {
                let problem = problem_from(inst);
                let threshold = problem.threshold(1.0);
                let ground: Vec<Vec<(TrajId, f64)>> = if sol.chosen_round == 1 {
                    problem.per_robot.clone()
                } else {
                    let first: BTreeSet<TrajId> = sol.rounds[0].set.iter().copied().collect();
                    problem
                        .per_robot
                        .iter()
                        .map(|m| {
                            m.iter().copied().filter(|(id, _)| !first.contains(id)).collect()
                        })
                        .collect()
                };
                assert!(
                    verify_local_optimum(&inst.oracle, &ground, &sol.set, threshold).unwrap(),
                    "seed {seed}"
                );
            }
        }
    }

    /// On teams whose sensor footprints overlap, the first-fit scan keeps
    /// accepting redundant picks and repairing them with swaps — one
    /// exchange round each — while the warm start's greedy additions take
    /// the complementary candidates directly.  The warm start must not
    /// cost more rounds in the mean despite its extra phase-transition
    /// round per pass.
    #[test]
    fn warm_start_cuts_exchange_rounds_on_overlapping_coverage() {
        let mut warm_total = 0usize;
        let mut cold_total = 0usize;
        let mut warm_wins = 0usize;
        let mut cold_wins = 0usize;
        for seed in 0..20u64 {
            let make = || {
                let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
                synth::overlap_instance(&mut rng, 3 + (seed as usize % 3), false)
            };
            let warm_inst = make();
            let cold_inst = make();
            let warm = centralized_local_search(
                &problem_from(&warm_inst),
                &SearchParams { warm_start: true, ..Default::default() },
            )
            .unwrap();
            let cold = centralized_local_search(
                &problem_from(&cold_inst),
                &SearchParams { warm_start: false, ..Default::default() },
            )
            .unwrap();
            warm_total += warm.stats.resolutions;
            cold_total += cold.stats.resolutions;
            match warm.stats.resolutions.cmp(&cold.stats.resolutions) {
                std::cmp::Ordering::Less => warm_wins += 1,
                std::cmp::Ordering::Greater => cold_wins += 1,
                std::cmp::Ordering::Equal => {}
            }
        }
        assert!(
            warm_total <= cold_total,
            "warm start used more rounds: {warm_total} vs {cold_total}"
        );
        assert!(warm_wins >= cold_wins, "warm wins {warm_wins} vs cold wins {cold_wins}");
    }

    /// With zero energies the objective is monotone, so the greedy
    /// addition phase already lands on a locally maximal set: the
    /// unrestricted phase that follows never finds a qualifying swap or
    /// deletion, and each pass spends exactly two all-sentinel rounds
    /// (one ending each phase) beyond its additions.
    #[test]
    fn warm_start_alone_is_locally_maximal_when_objective_is_monotone() {
        for seed in 0..6u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
            let instance = synth::overlap_instance(&mut rng, 3 + (seed as usize % 3), true);
            let problem = problem_from(&instance);
            let params = SearchParams::default();
            let sol = centralized_local_search(&problem, &params).unwrap();

            assert_eq!(sol.stats.swaps, 0, "seed {seed}");
            assert_eq!(sol.stats.deletes, 0, "seed {seed}");
            assert_eq!(sol.stats.resolutions, sol.stats.adds + 4, "seed {seed}");

            let threshold = problem.threshold(params.alpha);
            let ground: Vec<Vec<(TrajId, f64)>> = if sol.chosen_round == 1 {
                problem.per_robot.clone()
            } else {
                let first: BTreeSet<TrajId> = sol.rounds[0].set.iter().copied().collect();
                problem
                    .per_robot
                    .iter()
                    .map(|m| m.iter().copied().filter(|(id, _)| !first.contains(id)).collect())
                    .collect()
            };
            assert!(
                verify_local_optimum(&instance.oracle, &ground, &sol.set, threshold).unwrap(),
                "seed {seed}"
            );
        }
    }

    /// An instance whose menus contain useless "dud" candidates: zero
    /// information, positive energy, hence negative standalone gain.  The
    /// lazy bound prunes them before any marginal evaluation.
    #[test]
    fn lazy_scan_never_evaluates_dominated_duds() {
        let build = || {
            let dim = 1;
            let model = JointModel {
                a: DMatrix::identity(dim, dim),
                w: DMatrix::identity(dim, dim) * 0.01,
                prior: Belief { mean: DVector::zeros(dim), cov: DMatrix::identity(dim, dim) },
                horizon: 2,
            };
            let mut oracle = Oracle::new(model, 2.0);
            let mut menus = Vec::new();
            for robot in 0..2 {
                let mut ids = Vec::new();
                let good = TrajId::new(robot, 0);
                oracle
                    .register(
                        good,
                        CandidateData {
                            robot,
                            step_infos: vec![
                                DMatrix::identity(1, 1) * 4.0,
                                DMatrix::identity(1, 1) * 4.0,
                            ],
                            energy: 0.1,
                        },
                    )
                    .unwrap();
                ids.push(good);
                for k in 1..4 {
                    let dud = TrajId::new(robot, k);
                    oracle
                        .register(
                            dud,
                            CandidateData {
                                robot,
                                step_infos: vec![DMatrix::zeros(1, 1), DMatrix::zeros(1, 1)],
                                energy: 0.5,
                            },
                        )
                        .unwrap();
                    ids.push(dud);
                }
                menus.push(ids);
            }
            (oracle, menus)
        };

        let (oracle_lazy, menus) = build();
        let lazy_problem = PlanningProblem::new(&oracle_lazy, menus.clone()).unwrap();
        oracle_lazy.reset_counters();
        let lazy =
            centralized_local_search(&lazy_problem, &SearchParams::default()).unwrap();

        let (oracle_eager, menus) = build();
        let eager_problem = PlanningProblem::new(&oracle_eager, menus).unwrap();
        oracle_eager.reset_counters();
        let eager = centralized_local_search(
            &eager_problem,
            &SearchParams { lazy: false, ..Default::default() },
        )
        .unwrap();

        assert_eq!(lazy.set, eager.set);
        assert_eq!(lazy.value.to_bits(), eager.value.to_bits());
        assert!(
            lazy.stats.evals < eager.stats.evals,
            "lazy {} vs eager {}",
            lazy.stats.evals,
            eager.stats.evals
        );
    }

    #[test]
    fn coordinate_descent_orderings() {
        let weights = vec![3.0, 1.0, 2.0];
        assert_eq!(cd_order(&CdOrdering::ByIndex, 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(
            cd_order(&CdOrdering::WeightAscending(weights.clone()), 3).unwrap(),
            vec![1, 2, 0]
        );
        assert_eq!(
            cd_order(&CdOrdering::WeightDescending(weights), 3).unwrap(),
            vec![0, 2, 1]
        );
        assert_eq!(cd_order(&CdOrdering::Custom(vec![2, 0, 1]), 3).unwrap(), vec![2, 0, 1]);
        assert!(cd_order(&CdOrdering::Custom(vec![0, 0, 1]), 3).is_err());
        assert!(cd_order(&CdOrdering::Custom(vec![0, 1]), 3).is_err());
        assert!(cd_order(&CdOrdering::WeightAscending(vec![1.0]), 3).is_err());
    }

    #[test]
    fn second_pass_draws_from_leftovers_only() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
            let instance = synth::random_instance(&mut rng, 3, 4, 2, 3);
            let problem = problem_from(&instance);
            let sol = centralized_local_search(&problem, &SearchParams::default()).unwrap();
            assert_eq!(sol.rounds.len(), 2);
            let first: BTreeSet<TrajId> = sol.rounds[0].set.iter().copied().collect();
            for id in &sol.rounds[1].set {
                assert!(!first.contains(id), "seed {seed}: pass 2 reused {id:?}");
            }
            let best = sol.rounds.iter().map(|r| r.value).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(sol.value.to_bits(), best.to_bits());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn solutions_respect_the_partition_constraint(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let instance = synth::random_instance(&mut rng, 4, 3, 2, 3);
            let problem = problem_from(&instance);
            let sol = centralized_local_search(&problem, &SearchParams::default()).unwrap();
            let mut robots = BTreeSet::new();
            for id in &sol.set {
                prop_assert!(instance.oracle.contains(*id));
                prop_assert!(robots.insert(id.robot), "two picks for robot {}", id.robot);
            }
            prop_assert!(sol.value.is_finite());
            prop_assert!(sol.value >= 0.0);
        }
    }
}
