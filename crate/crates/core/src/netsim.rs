//! Deterministic discrete-event message network.
//!
//! Robots exchange messages through a simulated broadcast medium with
//! seeded stochastic delays.  The scheduler is a single event queue keyed
//! by `(delivery time, sequence number)`, which makes every run with the
//! same seed reproduce the exact same delivery order.  Messages are never
//! lost, and deliveries between one ordered sender/recipient pair never
//! overtake each other: a sampled delay that would reorder a pair is
//! clamped up to the previous delivery time.
//!
//! The module also hosts the round-resolution rule used by the
//! distributed planner: given exactly one proposal (possibly a sentinel
//! no-op) from every robot, the winner is the proposal with the highest
//! resulting objective value, ties broken toward the lower robot index.
//! Every robot runs the same rule on the same set, so all copies of the
//! shared solution stay identical without a coordinator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering as CmpOrdering;
use std::collections::{BinaryHeap, HashMap};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("robot index {0} out of range for team of {1}")]
    InvalidRobot(usize, usize),
    #[error("round resolution expected one proposal from each of {expected} robots, got {got}")]
    MissingProposal { expected: usize, got: usize },
    #[error("duplicate proposal from robot {0} in one round")]
    DuplicateProposal(usize),
    #[error("proposal from robot {0} carries a non-finite value")]
    BadValue(usize),
    #[error("deadlock: no deliverable messages while {waiting} robots wait (logical time {now:.6})")]
    Deadlock { waiting: usize, now: f64 },
    #[error("logical timeout: round open for {elapsed:.6}s exceeds {timeout:.6}s")]
    Timeout { elapsed: f64, timeout: f64 },
}

/// Message delay distribution, in seconds.  Samples are clipped at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayModel {
    Zero,
    Constant(f64),
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, std: f64 },
}

impl DelayModel {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let raw = match *self {
            DelayModel::Zero => 0.0,
            DelayModel::Constant(d) => d,
            DelayModel::Uniform { lo, hi } => {
                if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    lo
                }
            }
            DelayModel::Normal { mean, std } => {
                if std > 0.0 {
                    Normal::new(mean, std).expect("std > 0").sample(rng)
                } else {
                    mean
                }
            }
        };
        raw.max(0.0)
    }
}

/// A delivered message.
#[derive(Debug, Clone)]
pub struct NetMessage<P> {
    pub sender: usize,
    pub recipient: usize,
    pub send_time: f64,
    pub deliver_time: f64,
    pub payload: P,
}

struct Scheduled<P> {
    deliver_time: f64,
    seq: u64,
    msg: NetMessage<P>,
}

impl<P> PartialEq for Scheduled<P> {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq
    }
}
impl<P> Eq for Scheduled<P> {}
impl<P> PartialOrd for Scheduled<P> {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}
impl<P> Ord for Scheduled<P> {
    // Reversed: BinaryHeap is a max-heap, we want earliest first.
    fn cmp(&self, other: &Self) -> CmpOrdering {
        other
            .deliver_time
            .total_cmp(&self.deliver_time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Counters over one network lifetime.
#[derive(Debug, Clone, Copy, Default)]
pub struct NetStats {
    pub messages_sent: u64,
    pub deliveries: u64,
}

/// Seeded broadcast network for a fixed team.
pub struct Network<P> {
    n: usize,
    delay: DelayModel,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Scheduled<P>>,
    /// Last scheduled delivery time per ordered (sender, recipient) pair;
    /// enforces per-pair FIFO.
    last_delivery: HashMap<(usize, usize), f64>,
    seq: u64,
    pub stats: NetStats,
}

impl<P: Clone> Network<P> {
    pub fn new(n: usize, delay: DelayModel, seed: u64) -> Self {
        use rand::SeedableRng;
        Self {
            n,
            delay,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: BinaryHeap::new(),
            last_delivery: HashMap::new(),
            seq: 0,
            stats: NetStats::default(),
        }
    }

    pub fn team_size(&self) -> usize {
        self.n
    }

    fn enqueue(&mut self, sender: usize, recipient: usize, now: f64, payload: P) {
        let sampled = self.delay.sample(&mut self.rng);
        let fifo_floor = self
            .last_delivery
            .get(&(sender, recipient))
            .copied()
            .unwrap_or(f64::NEG_INFINITY);
        let deliver_time = (now + sampled).max(fifo_floor);
        self.last_delivery.insert((sender, recipient), deliver_time);
        self.queue.push(Scheduled {
            deliver_time,
            seq: self.seq,
            msg: NetMessage {
                sender,
                recipient,
                send_time: now,
                deliver_time,
                payload,
            },
        });
        self.seq += 1;
        self.stats.messages_sent += 1;
    }

    /// Send to every other robot; delays are sampled per recipient in
    /// ascending index order so runs are reproducible.
    pub fn broadcast(&mut self, sender: usize, now: f64, payload: P) -> Result<(), NetError> {
        if sender >= self.n {
            return Err(NetError::InvalidRobot(sender, self.n));
        }
        for recipient in 0..self.n {
            if recipient != sender {
                self.enqueue(sender, recipient, now, payload.clone());
            }
        }
        Ok(())
    }

    pub fn send(
        &mut self,
        sender: usize,
        recipient: usize,
        now: f64,
        payload: P,
    ) -> Result<(), NetError> {
        if sender >= self.n {
            return Err(NetError::InvalidRobot(sender, self.n));
        }
        if recipient >= self.n {
            return Err(NetError::InvalidRobot(recipient, self.n));
        }
        self.enqueue(sender, recipient, now, payload);
        Ok(())
    }

    /// Pop the earliest pending delivery, if any.
    pub fn next_delivery(&mut self) -> Option<NetMessage<P>> {
        self.queue.pop().map(|s| {
            self.stats.deliveries += 1;
            s.msg
        })
    }

    /// Delivery time of the earliest pending message.
    pub fn peek_time(&self) -> Option<f64> {
        self.queue.peek().map(|s| s.deliver_time)
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }
}

/// One entry in a synchronized proposal round.
pub trait RoundEntry {
    fn proposer(&self) -> usize;
    /// Sentinel "nothing to propose".
    fn is_noop(&self) -> bool;
    /// Objective value after applying this proposal; ignored for no-ops.
    fn value(&self) -> f64;
}

/// Deterministically resolve a synchronized round: every robot must be
/// represented exactly once.  Returns the index (into `entries`) of the
/// winning proposal, or `None` when all entries are sentinels.
pub fn resolve_round<E: RoundEntry>(entries: &[E], team: usize) -> Result<Option<usize>, NetError> {
    if entries.len() != team {
        return Err(NetError::MissingProposal { expected: team, got: entries.len() });
    }
    let mut seen = vec![false; team];
    for e in entries {
        let p = e.proposer();
        if p >= team {
            return Err(NetError::InvalidRobot(p, team));
        }
        if seen[p] {
            return Err(NetError::DuplicateProposal(p));
        }
        seen[p] = true;
    }
    let mut best: Option<usize> = None;
    for (i, e) in entries.iter().enumerate() {
        if e.is_noop() {
            continue;
        }
        if !e.value().is_finite() {
            return Err(NetError::BadValue(e.proposer()));
        }
        best = match best {
            None => Some(i),
            Some(j) => {
                let (bv, bp) = (entries[j].value(), entries[j].proposer());
                let (v, p) = (e.value(), e.proposer());
                if v > bv || (v == bv && p < bp) {
                    Some(i)
                } else {
                    Some(j)
                }
            }
        };
    }
    Ok(best)
}
