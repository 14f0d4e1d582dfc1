//! Energy-aware multi-robot information gathering.
//!
//! This crate implements a two-layer autonomy stack for teams of ground and
//! aerial robots tracking moving targets:
//!
//! * a **planning layer** that selects one motion-primitive trajectory per
//!   robot by maximizing a (generally non-monotone) submodular trade-off
//!   between mutual information about target states and weighted energy
//!   expenditure, under a partition-matroid constraint.  Both a centralized
//!   local search and a distributed, message-passing variant with lazy
//!   candidate scans and a greedy warm start are provided, together with a
//!   sequential coordinate-descent baseline; and
//! * a **control layer** that tracks the selected waypoints with a
//!   fixed-final-state LQR and filters the nominal command through a
//!   per-robot quadratic program whose constraints are exponential control
//!   barrier functions built on super-ellipsoid separation shapes.  A
//!   weighted objective norm trades safety-induced deviation against
//!   tracking performance.
//!
//! Supporting modules supply the simulation world (unicycle kinematics,
//! target processes, range/bearing sensing, energy cost fields), a Kalman
//!-filter information oracle with memoization, candidate-trajectory
//! generation with information/spatial pruning, a deterministic
//! discrete-event message network, a dense active-set QP solver, and a
//! scenario/benchmark harness with CSV and JSON export.
//!
//! Everything is deterministic for a fixed seed: random draws go through
//! seeded ChaCha streams, message delays are sampled reproducibly, and all
//! tie-breaks are explicit.

pub mod control;
pub mod estimation;
pub mod harness;
pub mod netsim;
pub mod planner;
pub mod qp;
pub mod trajopt;
pub mod world;
