//! Slow, plain oracles used to check the production paths.
//!
//! Nothing here calls into [`crate::markov`], [`crate::em`] or
//! [`crate::montecarlo`]; each oracle is a straight transcription of the
//! quantity it computes. Keep it that way.

use crate::coeffs::SystemSpec;

/// Values computed by an oracle, tagged with the method that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult<T> {
    pub values: T,
    pub method: &'static str,
    /// Truncation or size parameter (series terms, steps).
    pub size: usize,
}

/// Error-free transformation `a + b = s + err`.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}

/// `Σ_{k<terms} (εQ)^k / k!` with no scaling, each entry accumulated as a
/// double-double (value plus running error).
pub fn expm_taylor_reference(
    q: &[Vec<f64>],
    eps: f64,
    terms: usize,
) -> OracleResult<Vec<Vec<f64>>> {
    assert!(terms >= 2, "at least two series terms are required");
    let n = q.len();
    let a: Vec<Vec<f64>> = q
        .iter()
        .map(|r| r.iter().map(|v| v * eps).collect())
        .collect();
    let mut term: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut hi = term.clone();
    let mut lo = vec![vec![0.0; n]; n];
    for k in 1..terms {
        let mut next = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..n {
                    acc += term[i][l] * a[l][j];
                }
                next[i][j] = acc / k as f64;
            }
        }
        term = next;
        for i in 0..n {
            for j in 0..n {
                let (s, e) = two_sum(hi[i][j], term[i][j]);
                hi[i][j] = s;
                lo[i][j] += e;
            }
        }
    }
    let values = hi
        .iter()
        .zip(&lo)
        .map(|(h, l)| h.iter().zip(l).map(|(a, b)| a + b).collect())
        .collect();
    OracleResult {
        values,
        method: "taylor-unscaled-double-double",
        size: terms,
    }
}

/// Closed-form EM second moment of `dX = aX dt + bX dw`:
/// `x0² ((1 + aε)² + b²ε)^n`.
pub fn gbm_moment_recursion(a: f64, b: f64, eps: f64, x0: f64, n: u32) -> f64 {
    let factor = (1.0 + a * eps).powi(2) + b * b * eps;
    x0 * x0 * factor.powi(n as i32)
}

/// Floor of `δ/ε`, snapping quotients within `1e-9` relative of an integer to
/// that integer so that `δ = r` with `ε = r/N` yields exactly `N`.
fn lag(delta: f64, eps: f64) -> i64 {
    let q = delta / eps;
    let nearest = q.round();
    if (q - nearest).abs() <= 1e-9 * nearest.abs().max(1.0) {
        nearest as i64
    } else {
        q.floor() as i64
    }
}

/// The EM recursion with `g ≡ 0` and a prescribed mode sequence
/// `α_0, …, α_{n_max}` (with `α_{-1} = α_0`), over a plain vector indexed by
/// `n + N + 1`. Returns `Y_{-(N+1)}, …, Y_{n_max}` flattened row-major.
///
/// Panics if the spec has nonzero diffusion, a coefficient fails to evaluate
/// or a delay leaves `[0, r]`.
pub fn frozen_mode_recursion(
    spec: &SystemSpec,
    modes: &[usize],
    xi: &[crate::coeffs::Expr],
    eps: f64,
    n_max: usize,
) -> OracleResult<Vec<Vec<f64>>> {
    assert!(modes.len() > n_max, "need α_0..α_n_max");
    let d = spec.dim;
    let lags = (spec.delay_bound / eps).round() as i64;
    let offset = lags + 1;
    let idx = |n: i64| (n + offset) as usize;

    let xi_at = |t: f64| -> Vec<f64> { xi.iter().map(|e| e.eval_slots(&[t]).unwrap()).collect() };
    let mut y: Vec<Vec<f64>> = vec![Vec::new(); (offset + n_max as i64 + 1) as usize];
    y[0] = xi_at(-(lags as f64) * eps);
    for n in -lags..=0 {
        y[idx(n)] = xi_at(n as f64 * eps);
    }

    let delay_index = |n: i64| -> i64 {
        let t = if n < 0 { 0.0 } else { n as f64 * eps };
        let r = lag(spec.delay.eval_slots(&[t]).unwrap(), eps);
        assert!(
            (0..=lags).contains(&r),
            "delay index {r} outside [0, {lags}]"
        );
        r
    };
    let mode_at = |n: i64| if n < 0 { modes[0] } else { modes[n as usize] };

    let neutral = |v: &[f64], mode: usize| -> Vec<f64> {
        spec.modes[mode]
            .neutral
            .iter()
            .map(|e| e.eval_slots(v).unwrap())
            .collect()
    };

    for n in 0..n_max as i64 {
        let rn = delay_index(n);
        let rp = delay_index(n - 1);
        let (an, ap) = (mode_at(n), mode_at(n - 1));
        let cur = y[idx(n)].clone();
        let delayed = y[idx(n - rn)].clone();
        let older = y[idx(n - 1 - rp)].clone();
        let g_new = neutral(&delayed, an);
        let g_old = neutral(&older, ap);
        let mut xy = cur.clone();
        xy.extend_from_slice(&delayed);
        let mode = &spec.modes[an];
        for g in &mode.diffusion {
            assert_eq!(g.eval_slots(&xy).unwrap(), 0.0, "oracle requires g ≡ 0");
        }
        let next: Vec<f64> = (0..d)
            .map(|k| {
                let f = mode.drift[k].eval_slots(&xy).unwrap();
                cur[k] + g_new[k] - g_old[k] + f * eps
            })
            .collect();
        y[idx(n + 1)] = next;
    }
    OracleResult {
        values: y,
        method: "frozen-mode-plain-loop",
        size: n_max,
    }
}
