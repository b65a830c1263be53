//! Mean-square stability certificates.
//!
//! A [`StabilityCertificate`] carries the mode weights `p_i` and constants
//! `c0, c1, c2` of the Lyapunov-type inequality
//!
//! ```text
//! 2(x − G(y,i))ᵀ f(x,y,i) + |g(x,y,i)|² + Σ_j q_ij (p_j/p_i) |x − G(y,i)|²
//!     ≤ −c0 |x − G(y,i)|² + c1 |x|² + c2 |y|²
//! ```
//!
//! From it this module derives the delay-independent stability condition,
//! the certified decay rate `λ0`, and an admissible Euler–Maruyama step size
//! `ε0` for a target rate `λ < λ0`. The inequality itself cannot be proved by
//! sampling; [`falsify_certificate`] only searches for counterexamples.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coeffs::{SystemSpec, SAMPLE_RADII};
use crate::markov::{self, MarkovError};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StabilityError {
    #[error("invalid certificate: {0}")]
    Certificate(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("rate function has the same sign at both ends of ({lo}, {hi})")]
    Bracket { lo: f64, hi: f64 },
    #[error("the stability condition fails (value {0} ≥ 0); no decay rate is certified")]
    NotStable(f64),
    #[error("no admissible step size: the inequality fails as ε → 0 (value {0} ≥ 0)")]
    NoAdmissibleStep(f64),
    #[error("drift of mode {mode}, component {component} is not affine with zero offset")]
    NotAffine { mode: usize, component: usize },
    #[error(transparent)]
    Markov(#[from] MarkovError),
}

/// Weights and constants satisfying the certificate inequality.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityCertificate {
    pub weights: Vec<f64>,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub kappa: f64,
    pub delay_bound: f64,
}

impl StabilityCertificate {
    pub fn new(
        weights: Vec<f64>,
        c0: f64,
        c1: f64,
        c2: f64,
        kappa: f64,
        delay_bound: f64,
    ) -> Result<Self, StabilityError> {
        let bad = |m: &str| Err(StabilityError::Certificate(m.to_string()));
        if weights.is_empty() || weights.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return bad("weights must be positive and finite");
        }
        if [c0, c1, c2].iter().any(|&c| !(c >= 0.0 && c.is_finite())) {
            return bad("c0, c1, c2 must be nonnegative and finite");
        }
        if !(kappa > 0.0 && kappa < 1.0) {
            return bad("kappa must lie in (0, 1)");
        }
        if !(delay_bound > 0.0 && delay_bound.is_finite()) {
            return bad("delay bound must be positive");
        }
        Ok(StabilityCertificate {
            weights,
            c0,
            c1,
            c2,
            kappa,
            delay_bound,
        })
    }

    /// Certificate for `spec` with `κ` and `r` copied from it.
    pub fn for_system(
        spec: &SystemSpec,
        weights: Vec<f64>,
        c0: f64,
        c1: f64,
        c2: f64,
    ) -> Result<Self, StabilityError> {
        if weights.len() != spec.mode_count() {
            return Err(StabilityError::Certificate(format!(
                "{} weights for {} modes",
                weights.len(),
                spec.mode_count()
            )));
        }
        Self::new(weights, c0, c1, c2, spec.kappa, spec.delay_bound)
    }

    pub fn p_max(&self) -> f64 {
        self.weights.iter().copied().fold(f64::MIN, f64::max)
    }

    pub fn p_min(&self) -> f64 {
        self.weights.iter().copied().fold(f64::MAX, f64::min)
    }

    /// `p_max / p_min`, at least 1.
    pub fn r_p(&self) -> f64 {
        self.p_max() / self.p_min()
    }

    /// Right end of the interval on which the rate function is defined,
    /// `−(2/r) ln κ`.
    pub fn rate_ceiling(&self) -> f64 {
        -2.0 / self.delay_bound * self.kappa.ln()
    }
}

/// `−c0 + r_p (c1 + c2) / (1 − κ)²`; the system is certified stable when
/// this is strictly negative.
pub fn stability_condition(cert: &StabilityCertificate) -> f64 {
    -cert.c0 + cert.r_p() * (cert.c1 + cert.c2) / (1.0 - cert.kappa).powi(2)
}

/// `H(ρ) = −c0 + r_p (c1 + c2 e^{ρr}) / (1 − κ e^{ρr/2})² + ρ`.
///
/// Continuous and strictly increasing on `(0, −(2/r) ln κ)`.
pub fn rate_function(cert: &StabilityCertificate, rho: f64) -> Result<f64, StabilityError> {
    let r = cert.delay_bound;
    let denom = 1.0 - cert.kappa * (rho * r / 2.0).exp();
    if !(denom > 0.0) {
        return Err(StabilityError::Domain(format!(
            "1 − κ e^(ρr/2) = {denom} is not positive at ρ = {rho}"
        )));
    }
    Ok(-cert.c0 + cert.r_p() * (cert.c1 + cert.c2 * (rho * r).exp()) / (denom * denom) + rho)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    /// Value of [`stability_condition`].
    pub condition_lhs: f64,
    pub stable: bool,
    /// Root of the rate function, when the condition holds.
    pub lambda0: Option<f64>,
    /// Final bracket with `H(lo) < 0 ≤ H(hi)`.
    pub bracket: Option<(f64, f64)>,
    pub residual: Option<f64>,
    pub iterations: usize,
}

const ROOT_EDGE: f64 = 1e-12;
const ROOT_WIDTH: f64 = 1e-12;
const ROOT_RESIDUAL: f64 = 1e-10;
const ROOT_MAX_ITER: usize = 200;

/// Certified decay rate: the root of [`rate_function`] in
/// `(0, −(2/r) ln κ)`, found by bisection. Gated on [`stability_condition`].
pub fn solve_decay_rate(cert: &StabilityCertificate) -> Result<RateReport, StabilityError> {
    let condition_lhs = stability_condition(cert);
    if condition_lhs >= 0.0 {
        return Ok(RateReport {
            condition_lhs,
            stable: false,
            lambda0: None,
            bracket: None,
            residual: None,
            iterations: 0,
        });
    }
    let mut lo = ROOT_EDGE;
    let mut hi = cert.rate_ceiling() - ROOT_EDGE;
    let h_lo = rate_function(cert, lo)?;
    let h_hi = rate_function(cert, hi)?;
    if !(h_lo < 0.0 && h_hi >= 0.0) {
        return Err(StabilityError::Bracket { lo, hi });
    }
    let mut iterations = 0;
    let (mid, h_mid) = loop {
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        let h = rate_function(cert, mid)?;
        if h < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < ROOT_WIDTH || h.abs() < ROOT_RESIDUAL || iterations >= ROOT_MAX_ITER {
            break (mid, h);
        }
    };
    Ok(RateReport {
        condition_lhs,
        stable: true,
        lambda0: Some(mid),
        bracket: Some((lo, hi)),
        residual: Some(h_mid.abs()),
        iterations,
    })
}

/// `β(ε) = 1 / (1 − κ e^{λ(r+ε)/2})²`, defined for `λ < −2 ln κ / (r + ε)`.
pub fn neutral_amplification(
    kappa: f64,
    lambda: f64,
    r: f64,
    eps: f64,
) -> Result<f64, StabilityError> {
    let denom = 1.0 - kappa * (lambda * (r + eps) / 2.0).exp();
    if !(denom > 0.0) {
        return Err(StabilityError::Domain(format!(
            "1 − κ e^(λ(r+ε)/2) = {denom} is not positive (λ = {lambda}, ε = {eps})"
        )));
    }
    Ok(1.0 / (denom * denom))
}

/// Constants of the step-size inequality that do not depend on `ε`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepSizeInputs {
    pub cert: StabilityCertificate,
    /// `‖Q‖∞`, the largest absolute generator entry.
    pub q_norm: f64,
    /// `C0` with `|f(x,y,i)|² ≤ C0 (|x|² + |y|²)`.
    pub drift_growth: f64,
}

impl StepSizeInputs {
    pub fn r0(&self) -> Result<f64, StabilityError> {
        Ok(markov::r0_constant(&self.cert.weights, self.q_norm)?)
    }
}

/// `C1(ε) = ε r0 β(ε) p_min⁻¹ ((2‖Q‖∞ + c1 + C0) + C0 e^{λr} + (2‖Q‖∞ + c2) e^{λ(1+r)ε})`,
/// including the leading `ε`.
pub fn step_constant(
    inputs: &StepSizeInputs,
    lambda: f64,
    eps: f64,
) -> Result<f64, StabilityError> {
    let c = &inputs.cert;
    let r = c.delay_bound;
    let beta = neutral_amplification(c.kappa, lambda, r, eps)?;
    let q2 = 2.0 * inputs.q_norm;
    let c0g = inputs.drift_growth;
    let bracket = (q2 + c.c1 + c0g)
        + c0g * (lambda * r).exp()
        + (q2 + c.c2) * (lambda * (1.0 + r) * eps).exp();
    Ok(eps * inputs.r0()? * beta / c.p_min() * bracket)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepVariant {
    /// The inequality as printed: `c2 r_p e^{λ(r+ε)}`.
    Verbatim,
    /// `c2 r_p β(ε) e^{λ(r+ε)}`, the bound the convergence argument uses.
    Conservative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combinator {
    Min,
    Max,
}

impl Combinator {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Combinator::Min => a.min(b),
            Combinator::Max => a.max(b),
        }
    }
}

/// Left side of the step-size inequality plus `λ`; admissible iff negative.
pub fn step_inequality(
    inputs: &StepSizeInputs,
    lambda: f64,
    eps: f64,
    variant: StepVariant,
) -> Result<f64, StabilityError> {
    let c = &inputs.cert;
    let r = c.delay_bound;
    let rp = c.r_p();
    let beta = neutral_amplification(c.kappa, lambda, r, eps)?;
    let delayed = c.c2 * rp * (lambda * (r + eps)).exp();
    let delayed = match variant {
        StepVariant::Verbatim => delayed,
        StepVariant::Conservative => delayed * beta,
    };
    let lhs = -c.c0 + c.c1 * rp * beta + delayed + eps * step_constant(inputs, lambda, eps)?;
    Ok(lhs + lambda)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepSizeReport {
    pub lambda: f64,
    pub lambda0: f64,
    pub drift_growth: f64,
    pub eps0: f64,
    /// Search interval end, `combinator(1/λ0, −(2/λ) ln κ − r)` capped at 1.
    pub upper: f64,
    pub variant: StepVariant,
    pub combinator: Combinator,
    /// [`step_inequality`] at `eps0`; negative.
    pub inequality_value: f64,
    /// Whether the grid-scan fallback was used.
    pub grid_scan: bool,
}

const EPS_BISECTIONS: usize = 128;
const MONOTONE_GRID: usize = 1000;
const SCAN_GRID: usize = 10_000;

/// Largest admissible step size for a target rate `λ ∈ (0, λ0)`.
///
/// The inequality is searched on `(0, upper)`. For the conservative variant
/// every term is nondecreasing in `ε`, so the boundary is found by
/// bisection. The verbatim variant is first checked for monotonicity on a
/// grid and scanned on a finer grid if that check fails.
pub fn solve_step_size(
    inputs: &StepSizeInputs,
    lambda: f64,
    variant: StepVariant,
    combinator: Combinator,
) -> Result<StepSizeReport, StabilityError> {
    let cert = &inputs.cert;
    let rate = solve_decay_rate(cert)?;
    let lambda0 = rate
        .lambda0
        .ok_or(StabilityError::NotStable(rate.condition_lhs))?;
    if !(lambda > 0.0 && lambda < lambda0) {
        return Err(StabilityError::Domain(format!(
            "target rate {lambda} must lie in (0, λ0 = {lambda0})"
        )));
    }
    let beta_limit = -2.0 / lambda * cert.kappa.ln() - cert.delay_bound;
    let upper = combinator.apply(1.0 / lambda0, beta_limit).min(1.0);
    if !(upper > 0.0) {
        return Err(StabilityError::NoAdmissibleStep(f64::NAN));
    }
    let value = |eps: f64| step_inequality(inputs, lambda, eps, variant).unwrap_or(f64::INFINITY);
    let holds = |eps: f64| value(eps) < 0.0;

    let tiny = upper * 1e-12;
    if !holds(tiny) {
        return Err(StabilityError::NoAdmissibleStep(value(tiny)));
    }

    let monotone = match variant {
        StepVariant::Conservative => true,
        StepVariant::Verbatim => {
            let vals: Vec<f64> = (1..MONOTONE_GRID)
                .map(|k| value(upper * k as f64 / MONOTONE_GRID as f64))
                .collect();
            vals.windows(2).all(|w| w[1] >= w[0])
        }
    };

    let eps0 = if monotone {
        let (mut lo, mut hi) = (tiny, upper);
        for _ in 0..EPS_BISECTIONS {
            let mid = 0.5 * (lo + hi);
            if holds(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        // the admissible set is open at `upper`
        if lo >= upper {
            upper.next_down()
        } else {
            lo
        }
    } else {
        (1..SCAN_GRID)
            .rev()
            .map(|k| upper * k as f64 / SCAN_GRID as f64)
            .find(|&e| holds(e))
            .unwrap_or(tiny)
    };

    Ok(StepSizeReport {
        lambda,
        lambda0,
        drift_growth: inputs.drift_growth,
        eps0,
        upper,
        variant,
        combinator,
        inequality_value: value(eps0),
        grid_scan: !monotone,
    })
}

/// `C0 = 2 max_i max(|A_i|², |B_i|²)` for drifts of the form
/// `f(x, y, i) = A_i x + B_i y`, with `|·|` the Frobenius norm. This
/// satisfies `|f|² ≤ C0 (|x|² + |y|²)` because
/// `|Ax + By|² ≤ 2(|A|²|x|² + |B|²|y|²)`.
pub fn derive_drift_growth(spec: &SystemSpec) -> Result<f64, StabilityError> {
    let d = spec.dim;
    let mut worst: f64 = 0.0;
    for (i, mode) in spec.modes.iter().enumerate() {
        let (mut a2, mut b2) = (0.0, 0.0);
        for (k, f) in mode.drift.iter().enumerate() {
            let (coef, offset) = f.affine_coefficients().ok_or(StabilityError::NotAffine {
                mode: i,
                component: k,
            })?;
            if offset != 0.0 {
                return Err(StabilityError::NotAffine {
                    mode: i,
                    component: k,
                });
            }
            a2 += coef[..d].iter().map(|v| v * v).sum::<f64>();
            b2 += coef[d..].iter().map(|v| v * v).sum::<f64>();
        }
        worst = worst.max(a2).max(b2);
    }
    Ok(2.0 * worst)
}

/// A point where the certificate inequality fails.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateViolation {
    pub sample: u64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Zero-based mode.
    pub mode: usize,
    pub lhs: f64,
    pub rhs: f64,
}

/// Absolute slack before `lhs > rhs` counts as a violation.
pub const FALSIFY_SLACK: f64 = 1e-12;
const SHARD: u64 = 4096;

/// Both sides of the certificate inequality at `(x, y, mode)`.
pub fn certificate_sides(
    spec: &SystemSpec,
    cert: &StabilityCertificate,
    x: &[f64],
    y: &[f64],
    mode: usize,
) -> Result<(f64, f64), crate::coeffs::ExprError> {
    let d = spec.dim;
    let coeffs = &spec.modes[mode];
    let mut g_y = vec![0.0; d];
    coeffs.neutral_into(y, &mut g_y)?;
    let mut xy = Vec::with_capacity(2 * d);
    xy.extend_from_slice(x);
    xy.extend_from_slice(y);
    let mut f = vec![0.0; d];
    coeffs.drift_into(&xy, &mut f)?;
    let mut g = vec![0.0; d * spec.noise_dim];
    coeffs.diffusion_into(&xy, &mut g)?;

    let u: Vec<f64> = x.iter().zip(&g_y).map(|(a, b)| a - b).collect();
    let u2: f64 = u.iter().map(|v| v * v).sum();
    let cross: f64 = u.iter().zip(&f).map(|(a, b)| a * b).sum();
    let g2: f64 = g.iter().map(|v| v * v).sum();
    let pi = cert.weights[mode];
    let switching: f64 = spec.generator[mode]
        .iter()
        .zip(&cert.weights)
        .map(|(q, pj)| q * pj / pi)
        .sum();
    let lhs = 2.0 * cross + g2 + switching * u2;
    let x2: f64 = x.iter().map(|v| v * v).sum();
    let y2: f64 = y.iter().map(|v| v * v).sum();
    let rhs = -cert.c0 * u2 + cert.c1 * x2 + cert.c2 * y2;
    Ok((lhs, rhs))
}

/// Search for a violation of the certificate inequality at `samples` random
/// points. Sample `k` draws `x, y` from standard normals scaled by
/// `SAMPLE_RADII[k % 3]` and a uniformly random mode. Samples are grouped in
/// fixed shards with their own streams, so the result (the violation with
/// the lowest sample index) does not depend on the thread count.
pub fn falsify_certificate(
    spec: &SystemSpec,
    cert: &StabilityCertificate,
    samples: u64,
    seed: u64,
) -> Option<CertificateViolation> {
    let d = spec.dim;
    let m0 = spec.mode_count();
    let shards = samples.div_ceil(SHARD);
    (0..shards).into_par_iter().find_map_first(|shard| {
        let mut rng = rng::stream(seed, shard);
        let start = shard * SHARD;
        let end = (start + SHARD).min(samples);
        let mut x = vec![0.0; d];
        let mut y = vec![0.0; d];
        for k in start..end {
            let radius = SAMPLE_RADII[(k % SAMPLE_RADII.len() as u64) as usize];
            for v in x.iter_mut().chain(y.iter_mut()) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = radius * z;
            }
            let mode = rng.random_range(0..m0);
            let (lhs, rhs) = certificate_sides(spec, cert, &x, &y, mode)
                .unwrap_or((f64::INFINITY, f64::NEG_INFINITY));
            if !(lhs - rhs <= FALSIFY_SLACK) {
                return Some(CertificateViolation {
                    sample: k,
                    x: x.clone(),
                    y: y.clone(),
                    mode,
                    lhs,
                    rhs,
                });
            }
        }
        None
    })
}
