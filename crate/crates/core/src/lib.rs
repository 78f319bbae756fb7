//! Stability analysis and exact simulation of a two-link stochastic fluid
//! queue with spillback.
//!
//! Link 1 (capacity `v`, unbounded buffer) feeds link 2 (buffer `theta`),
//! whose capacity switches between `u1` and `u2` according to a two-state
//! Markov chain. When link 2 is full it throttles link 1.
//!
//! The crate provides the model's vector field ([`model`]), the mode process
//! ([`markov`]), closed-form single-link results ([`spectral`]), a small
//! simplex solver ([`lp`]), necessary and sufficient stability checks with a
//! numeric drift verifier ([`stability`]), an event-driven simulator
//! ([`simulate`]), throughput and resilience studies ([`analysis`]) and a
//! command-line front end ([`cli`]).

// Negated float comparisons are how NaN inputs get rejected; index loops
// walk several parallel arrays at once.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod cli;
pub mod lp;
pub mod markov;
pub mod model;
pub mod simulate;
pub mod spectral;
pub mod stability;

pub use model::{DischargeRates, HybridState, InflowSpec, Mode, SystemParams};
