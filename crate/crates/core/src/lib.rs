//! Euler–Maruyama simulation and stability analysis for neutral stochastic
//! delay differential equations with Markovian switching,
//!
//! ```text
//! d[X(t) − G(X(t − δ(t)), r(t))] = f(X(t), X(t − δ(t)), r(t)) dt
//!                                 + g(X(t), X(t − δ(t)), r(t)) dw(t).
//! ```
//!
//! * [`coeffs`] parses coefficient expressions and checks structural
//!   assumptions.
//! * [`markov`] builds one-step transition matrices and samples the chain.
//! * [`stability`] evaluates certificate conditions, the decay-rate root and
//!   the step-size bound.
//! * [`em`] runs the discretization.
//! * [`montecarlo`] estimates `E|Y_n|²` and fits decay rates.
//! * [`reference`] holds slow independent oracles for testing.

// `!(x > 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coeffs;
pub mod em;
pub mod markov;
pub mod montecarlo;
pub mod presets;
pub mod reference;
pub mod rng;
pub mod stability;
