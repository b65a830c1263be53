//! Settings of the worked two-mode example shipped as builtins.

use crate::coeffs::SystemSpec;
use crate::stability::{StabilityCertificate, StabilityError};

pub const EXAMPLE_EPS: f64 = 0.001;
pub const EXAMPLE_PATHS: usize = 100;
/// Not given with the example; chosen so the delay transient is well past.
pub const EXAMPLE_HORIZON: f64 = 30.0;
pub const EXAMPLE_SEED: u64 = 20_160_501;
pub const EXAMPLE_INITIAL: &str = "1 + sin(1 - t)";
/// Zero-based; the example starts the coupled system in its second mode.
pub const EXAMPLE_INITIAL_MODE: usize = 1;

pub const EXAMPLE_WEIGHTS: [f64; 2] = [0.5, 1.0];
pub const EXAMPLE_C0: f64 = 1.1;
pub const EXAMPLE_C1: f64 = 0.235;
pub const EXAMPLE_C2: f64 = 0.136;

/// The certificate stated for the coupled builtin.
pub fn example_certificate(spec: &SystemSpec) -> Result<StabilityCertificate, StabilityError> {
    StabilityCertificate::for_system(
        spec,
        EXAMPLE_WEIGHTS.to_vec(),
        EXAMPLE_C0,
        EXAMPLE_C1,
        EXAMPLE_C2,
    )
}

/// `(builtin id, zero-based initial mode)` for the example runs. The coupled
/// run provides both its moment series and its log-rate series.
pub const EXAMPLE_RUNS: [(&str, usize); 3] = [
    ("mode1-yy2", 0),
    ("mode2-yy3", 0),
    ("coupled-yy1", EXAMPLE_INITIAL_MODE),
];

pub fn example_horizon_steps(eps: f64) -> usize {
    (EXAMPLE_HORIZON / eps).round() as usize
}
