//! Asynchronous Markov chain Monte Carlo, simulated two ways.
//!
//! Every MCMC kernel can be looked at as a random map on states or as a
//! deterministic map on probability measures. This crate runs asynchronous
//! samplers in both views:
//!
//! * [`measure_sim`] pushes exact distributions on a finite state space
//!   through an explicit [`schedules::Schedule`] and checks, step by step,
//!   the windowed-maximum argument that makes bounded-staleness execution
//!   converge.
//! * [`shmem`] runs workers against one atomically swapped state cell, either
//!   on real threads or replayed deterministically from a schedule.
//! * [`pserver`] simulates a parameter server that accepts stale worker
//!   proposals with a Metropolis-Hastings correction, plus a naive mode that
//!   accepts everything.
//!
//! [`measures`] and [`kernels`] hold the shared machinery, [`diagnostics`]
//! the statistical instruments for continuous targets, and [`experiments`]
//! the canned, config-driven runs used by the `asyncmc` CLI.

pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod kernels;
pub mod measure_sim;
pub mod measures;
pub mod pserver;
pub mod rng;
pub mod schedules;
pub mod shmem;

pub use error::{Error, Result};
pub use kernels::{GaussianTarget, KernelKind, KernelSpec, Proposal, State, Target};
pub use measures::{FiniteDistribution, StateSpace, StochasticMatrix};
pub use schedules::{Event, EventKind, Schedule};
