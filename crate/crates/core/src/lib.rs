//! Rate-distortion-perception tradeoffs for causal coding of frame sequences.
//!
//! The crate covers two regimes. For finite alphabets it enumerates joint
//! laws exactly and builds perception-constrained reconstructions from an
//! MMSE reconstruction. For Gauss-Markov sources it solves the jointly
//! Gaussian tradeoff numerically, evaluates closed-form extremal laws, and
//! checks that one MMSE representation can be reused across perception
//! targets. Supporting modules provide one-shot channel simulation and a
//! Monte-Carlo harness.

pub mod cli;
pub mod discrete_core;
pub mod extremal;
pub mod gauss_solver;
pub mod linalg;
pub mod model;
pub mod montecarlo;
pub mod oneshot;
pub mod realism;
pub mod transport;
pub mod universal;
