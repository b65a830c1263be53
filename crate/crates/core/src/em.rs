//! Euler–Maruyama scheme for neutral delay equations with switching.
//!
//! With `ε = r/N` and delay index `R_n = ⌊δ(nε)/ε⌋`,
//!
//! ```text
//! Y_n     = ξ(nε),                                  −N ≤ n ≤ 0
//! Y_{n+1} = Y_n + G(Y_{n−R_n}, α_n) − G(Y_{n−1−R_{n−1}}, α_{n−1})
//!               + f(Y_n, Y_{n−R_n}, α_n) ε + g(Y_n, Y_{n−R_n}, α_n) Δw_n
//! ```
//!
//! with the boundary conventions `Y_{−(N+1)} = ξ(−Nε)`, `δ(−ε) = δ(0)` and
//! `α_{−1} = α_0`. The deepest lookback at step `n` is `n − 1 − N`, so a ring
//! of `N + 2` states suffices.
//!
//! Random numbers are consumed in a fixed order per step: the `m` Brownian
//! normals for `Δw_n` first, then one uniform for the transition to
//! `α_{n+1}`. The uniform is drawn even for single-mode systems.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::coeffs::{Expr, ExprError, SystemSpec};
use crate::markov::{transition_matrix, MarkovError, TransitionMatrix};
use crate::rng::{self, StreamRng};

/// Paths whose state norm exceeds this are aborted.
pub const EXPLOSION_THRESHOLD: f64 = 1e150;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmError {
    #[error("step size {eps}: {reason}")]
    StepSize { eps: f64, reason: &'static str },
    #[error("horizon must be at least one step")]
    Horizon,
    #[error("initial mode {mode} out of range for {count} modes")]
    Mode { mode: usize, count: usize },
    #[error("expected {expected} initial-segment expressions, got {found}")]
    Initial { expected: usize, found: usize },
    #[error("δ({t}) = {value} lies outside [0, {bound}]")]
    Delay { t: f64, value: f64, bound: f64 },
    #[error("coefficient evaluation failed at step {step}: {source}")]
    Coefficient {
        step: i64,
        #[source]
        source: ExprError,
    },
    #[error("path exploded at step {step} (|Y| = {norm:e})")]
    Explosion { step: usize, norm: f64 },
    #[error("frozen mode sequence has {found} entries, need {needed}")]
    FrozenModes { needed: usize, found: usize },
    #[error(transparent)]
    Markov(#[from] MarkovError),
}

/// Step size normalized so that `N·ε = r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepGrid {
    pub eps: f64,
    /// `N = r/ε`.
    pub lags: usize,
    pub requested: f64,
}

impl StepGrid {
    /// `N = round(r/ε)` and `ε := r/N`.
    pub fn new(requested: f64, delay_bound: f64) -> Result<Self, EmError> {
        if !(requested > 0.0 && requested < 1.0) {
            return Err(EmError::StepSize {
                eps: requested,
                reason: "must lie in (0, 1)",
            });
        }
        let lags = (delay_bound / requested).round();
        if lags < 1.0 {
            return Err(EmError::StepSize {
                eps: requested,
                reason: "larger than twice the delay bound",
            });
        }
        let eps = delay_bound / lags;
        if eps >= 1.0 {
            return Err(EmError::StepSize {
                eps,
                reason: "normalized step is not below 1",
            });
        }
        Ok(StepGrid {
            eps,
            lags: lags as usize,
            requested,
        })
    }

    pub fn adjusted(&self) -> bool {
        self.eps != self.requested
    }
}

/// Everything needed to run paths of one system.
#[derive(Debug, Clone)]
pub struct EmConfig {
    pub grid: StepGrid,
    pub horizon_steps: usize,
    pub seed: u64,
    /// Zero-based initial mode `i0`.
    pub initial_mode: usize,
    /// `ξ`, one expression over `t` per state coordinate.
    pub initial: Vec<Expr>,
}

impl EmConfig {
    pub fn new(
        spec: &SystemSpec,
        eps: f64,
        horizon_steps: usize,
        seed: u64,
        initial_mode: usize,
        initial: Vec<Expr>,
    ) -> Result<Self, EmError> {
        let grid = StepGrid::new(eps, spec.delay_bound)?;
        if horizon_steps == 0 {
            return Err(EmError::Horizon);
        }
        if initial_mode >= spec.mode_count() {
            return Err(EmError::Mode {
                mode: initial_mode,
                count: spec.mode_count(),
            });
        }
        if initial.len() != spec.dim {
            return Err(EmError::Initial {
                expected: spec.dim,
                found: initial.len(),
            });
        }
        Ok(EmConfig {
            grid,
            horizon_steps,
            seed,
            initial_mode,
            initial,
        })
    }

    pub fn eps(&self) -> f64 {
        self.grid.eps
    }
}

/// `⌊δ/ε⌋`, where quotients within `1e-9` (relative) of an integer snap to
/// it. Without the snap `δ = r` and `ε = r/N` can give `N − 1` through
/// rounding in `r/N`.
fn floor_quotient(delta: f64, eps: f64) -> i64 {
    let q = delta / eps;
    let nearest = q.round();
    if (q - nearest).abs() <= 1e-9 * nearest.abs().max(1.0) {
        nearest as i64
    } else {
        q.floor() as i64
    }
}

/// `R_n = ⌊δ(nε)/ε⌋` for `n ≥ −1`, using `δ(−ε) = δ(0)`. Fails when the
/// delay leaves `[0, r]`.
pub fn delay_index(delay: &Expr, n: i64, grid: &StepGrid) -> Result<usize, EmError> {
    let t = if n < 0 { 0.0 } else { n as f64 * grid.eps };
    let value = delay
        .eval_slots(&[t])
        .map_err(|source| EmError::Coefficient { step: n, source })?;
    let r = grid.lags as f64 * grid.eps;
    let lag = floor_quotient(value, grid.eps);
    if !(value >= 0.0) || lag < 0 || lag > grid.lags as i64 {
        return Err(EmError::Delay { t, value, bound: r });
    }
    Ok(lag as usize)
}

/// Fill `out` with independent `N(0, ε)` draws.
#[inline]
pub fn brownian_increment<R: Rng + ?Sized>(rng: &mut R, eps: f64, out: &mut [f64]) {
    let scale = eps.sqrt();
    for v in out.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = scale * z;
    }
}

/// A fully materialized trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridPath {
    pub eps: f64,
    pub lags: usize,
    pub dim: usize,
    pub noise_dim: usize,
    pub seed: u64,
    pub stream: u64,
    /// `Y_{−(N+1)}, …, Y_{n_max}`, row-major.
    states: Vec<f64>,
    /// `α_{−1}, …, α_{n_max}`.
    modes: Vec<usize>,
    /// `R_{−1}, …, R_{n_max}`.
    delays: Vec<usize>,
    /// `Δw_0, …, Δw_{n_max−1}`, row-major.
    increments: Vec<f64>,
}

impl HybridPath {
    pub fn horizon_steps(&self) -> usize {
        self.modes.len() - 2
    }

    fn offset(&self, n: i64) -> usize {
        let k = n + self.lags as i64 + 1;
        assert!(k >= 0, "state index {n} precedes the initial segment");
        k as usize
    }

    pub fn state(&self, n: i64) -> &[f64] {
        let k = self.offset(n) * self.dim;
        &self.states[k..k + self.dim]
    }

    pub fn mode(&self, n: i64) -> usize {
        self.modes[(n + 1) as usize]
    }

    pub fn delay(&self, n: i64) -> usize {
        self.delays[(n + 1) as usize]
    }

    pub fn increment(&self, n: usize) -> &[f64] {
        &self.increments[n * self.noise_dim..(n + 1) * self.noise_dim]
    }

    pub fn squared_norm(&self, n: i64) -> f64 {
        self.state(n).iter().map(|v| v * v).sum()
    }
}

/// Where `α_{n+1}` comes from.
#[derive(Debug, Clone, Copy)]
pub enum ModeSource<'a> {
    /// Sampled from `exp(εQ)`.
    Chain,
    /// Prescribed `α_0, …, α_{n_max}`; `α_0` must equal the configured `i0`.
    Frozen(&'a [usize]),
}

/// Prepared simulation of one `(spec, config)` pair.
///
/// Holds the transition matrix, the delay indices for the whole horizon and
/// the initial segment, so individual paths only do the stepping.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    spec: &'a SystemSpec,
    config: &'a EmConfig,
    transitions: TransitionMatrix,
    /// `R_{−1}, …, R_{n_max}`.
    delays: Vec<usize>,
    /// `Y_{−(N+1)}, …, Y_0`, row-major.
    history: Vec<f64>,
}

impl<'a> Simulator<'a> {
    pub fn new(spec: &'a SystemSpec, config: &'a EmConfig) -> Result<Self, EmError> {
        let grid = config.grid;
        let transitions = transition_matrix(&spec.generator, grid.eps)?;
        let delays = (-1..=config.horizon_steps as i64)
            .map(|n| delay_index(&spec.delay, n, &grid))
            .collect::<Result<Vec<_>, _>>()?;
        let d = spec.dim;
        let n_lags = grid.lags as i64;
        let mut history = Vec::with_capacity((grid.lags + 2) * d);
        for n in std::iter::once(-n_lags).chain(-n_lags..=0) {
            let t = n as f64 * grid.eps;
            for e in &config.initial {
                let v = e
                    .eval_slots(&[t])
                    .map_err(|source| EmError::Coefficient { step: n, source })?;
                history.push(v);
            }
        }
        Ok(Simulator {
            spec,
            config,
            transitions,
            delays,
            history,
        })
    }

    pub fn transitions(&self) -> &TransitionMatrix {
        &self.transitions
    }

    pub fn config(&self) -> &EmConfig {
        self.config
    }

    /// Run one path on stream `stream` of the configured seed, calling
    /// `visit(n, Y_n, α_n)` for `n = 0, …, n_max` and `on_increment(n, Δw_n)`
    /// for every step. On explosion the visits made so far stand and the
    /// error names the step that produced the offending state.
    pub fn drive<V, I>(
        &self,
        stream: u64,
        modes: ModeSource<'_>,
        mut visit: V,
        mut on_increment: I,
    ) -> Result<(), EmError>
    where
        V: FnMut(usize, &[f64], usize),
        I: FnMut(usize, &[f64]),
    {
        let spec = self.spec;
        let d = spec.dim;
        let m = spec.noise_dim;
        let eps = self.config.grid.eps;
        let lags = self.config.grid.lags;
        let ring = lags + 2;
        let n_max = self.config.horizon_steps;
        if let ModeSource::Frozen(seq) = modes {
            if seq.len() < n_max + 1 {
                return Err(EmError::FrozenModes {
                    needed: n_max + 1,
                    found: seq.len(),
                });
            }
        }

        let mut buf = self.history.clone();
        // slot of Y_n is (n + lags + 1) mod ring
        let slot = |n: usize, back: usize| ((n + lags + 1 - back) % ring) * d;
        let mut rng: StreamRng = rng::stream(self.config.seed, stream);

        let mut xy = vec![0.0; 2 * d];
        let mut g_new = vec![0.0; d];
        let mut g_old = vec![0.0; d];
        let mut drift = vec![0.0; d];
        let mut diffusion = vec![0.0; d * m];
        let mut dw = vec![0.0; m];
        let mut next = vec![0.0; d];

        let mut mode_prev = self.config.initial_mode;
        let mut mode = match modes {
            ModeSource::Chain => self.config.initial_mode,
            ModeSource::Frozen(seq) => seq[0],
        };
        visit(0, &buf[slot(0, 0)..slot(0, 0) + d], mode);

        for n in 0..n_max {
            let r_now = self.delays[n + 1];
            let r_prev = self.delays[n];
            let cur = slot(n, 0);
            let delayed = slot(n, r_now);
            let older = slot(n, 1 + r_prev);
            let coeffs = &spec.modes[mode];
            let fail = |source| EmError::Coefficient {
                step: n as i64,
                source,
            };

            xy[..d].copy_from_slice(&buf[cur..cur + d]);
            xy[d..].copy_from_slice(&buf[delayed..delayed + d]);
            coeffs.neutral_into(&xy[d..], &mut g_new).map_err(fail)?;
            spec.modes[mode_prev]
                .neutral_into(&buf[older..older + d], &mut g_old)
                .map_err(fail)?;
            coeffs.drift_into(&xy, &mut drift).map_err(fail)?;
            coeffs.diffusion_into(&xy, &mut diffusion).map_err(fail)?;

            brownian_increment(&mut rng, eps, &mut dw);
            let mut norm2 = 0.0;
            for k in 0..d {
                let mut noise = 0.0;
                for l in 0..m {
                    noise += diffusion[k * m + l] * dw[l];
                }
                let v = xy[k] + g_new[k] - g_old[k] + drift[k] * eps + noise;
                norm2 += v * v;
                next[k] = v;
            }
            let norm = norm2.sqrt();
            if !(norm <= EXPLOSION_THRESHOLD) {
                return Err(EmError::Explosion { step: n + 1, norm });
            }
            let target = slot(n + 1, 0);
            buf[target..target + d].copy_from_slice(&next);

            let u: f64 = rng.random();
            mode_prev = mode;
            mode = match modes {
                ModeSource::Chain => self.transitions.next_mode(mode, u),
                ModeSource::Frozen(seq) => seq[n + 1],
            };
            on_increment(n, &dw);
            visit(n + 1, &next, mode);
        }
        Ok(())
    }

    /// Materialize path `stream`.
    pub fn path(&self, stream: u64, modes: ModeSource<'_>) -> Result<HybridPath, EmError> {
        let d = self.spec.dim;
        let m = self.spec.noise_dim;
        let n_max = self.config.horizon_steps;
        let mut states = Vec::with_capacity(self.history.len() + n_max * d);
        states.extend_from_slice(&self.history[..d * (self.config.grid.lags + 2)]);
        let mut path_modes = Vec::with_capacity(n_max + 2);
        let mut increments = Vec::with_capacity(n_max * m);
        self.drive(
            stream,
            modes,
            |n, y, mode| {
                if n == 0 {
                    path_modes.push(mode);
                } else {
                    states.extend_from_slice(y);
                }
                path_modes.push(mode);
            },
            |_, dw| increments.extend_from_slice(dw),
        )?;
        Ok(HybridPath {
            eps: self.config.grid.eps,
            lags: self.config.grid.lags,
            dim: d,
            noise_dim: m,
            seed: self.config.seed,
            stream,
            states,
            modes: path_modes,
            delays: self.delays.clone(),
            increments,
        })
    }
}

/// One path on stream 0 with the mode chain sampled from `exp(εQ)`.
pub fn simulate_path(spec: &SystemSpec, config: &EmConfig) -> Result<HybridPath, EmError> {
    Simulator::new(spec, config)?.path(0, ModeSource::Chain)
}

/// Neutral offsets `Z_n = Y_n − G(Y_{n−1−R_{n−1}}, α_{n−1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZSequence {
    /// `Z_0, …, Z_{n_max}`.
    pub values: Vec<Vec<f64>>,
    /// Largest `|Z_{n+1} − Z_n − f ε − g Δw_n|` over the path.
    pub max_residual: f64,
}

pub fn z_sequence(path: &HybridPath, spec: &SystemSpec) -> Result<ZSequence, EmError> {
    let d = spec.dim;
    let m = spec.noise_dim;
    let n_max = path.horizon_steps() as i64;
    let fail = |n: i64| move |source| EmError::Coefficient { step: n, source };
    let mut values = Vec::with_capacity(n_max as usize + 1);
    let mut g = vec![0.0; d];
    for n in 0..=n_max {
        let older = path.state(n - 1 - path.delay(n - 1) as i64);
        spec.modes[path.mode(n - 1)]
            .neutral_into(older, &mut g)
            .map_err(fail(n))?;
        values.push(
            path.state(n)
                .iter()
                .zip(&g)
                .map(|(y, gv)| y - gv)
                .collect::<Vec<_>>(),
        );
    }

    let mut max_residual: f64 = 0.0;
    let mut xy = vec![0.0; 2 * d];
    let mut f = vec![0.0; d];
    let mut gm = vec![0.0; d * m];
    for n in 0..n_max {
        let coeffs = &spec.modes[path.mode(n)];
        xy[..d].copy_from_slice(path.state(n));
        xy[d..].copy_from_slice(path.state(n - path.delay(n) as i64));
        coeffs.drift_into(&xy, &mut f).map_err(fail(n))?;
        coeffs.diffusion_into(&xy, &mut gm).map_err(fail(n))?;
        let dw = path.increment(n as usize);
        for k in 0..d {
            let noise: f64 = (0..m).map(|l| gm[k * m + l] * dw[l]).sum();
            let res = values[n as usize + 1][k] - values[n as usize][k] - f[k] * path.eps - noise;
            max_residual = max_residual.max(res.abs());
        }
    }
    Ok(ZSequence {
        values,
        max_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{builtin_system, parse_expr, ModeDef, SystemDef};
    use crate::reference::frozen_mode_recursion;
    use proptest::prelude::*;

    fn scalar(neutral: &str, drift: &str, diffusion: &str, delay: &str, r: f64) -> SystemSpec {
        SystemDef {
            dim: 1,
            noise_dim: 1,
            generator: vec![vec![0.0]],
            delay_bound: r,
            kappa: 0.5,
            delay: delay.into(),
            modes: vec![ModeDef {
                neutral: vec![neutral.into()],
                drift: vec![drift.into()],
                diffusion: vec![vec![diffusion.into()]],
            }],
        }
        .build()
        .unwrap()
    }

    fn config(spec: &SystemSpec, eps: f64, steps: usize, seed: u64, xi: &str) -> EmConfig {
        let xi = spec.parse_initial(&[xi]).unwrap();
        EmConfig::new(spec, eps, steps, seed, 0, xi).unwrap()
    }

    #[test]
    fn step_grid_normalization() {
        let g = StepGrid::new(0.001, 3.0).unwrap();
        assert_eq!(g.lags, 3000);
        assert!(!g.adjusted() || (g.eps - 0.001).abs() < 1e-18);
        let g = StepGrid::new(0.0007, 3.0).unwrap();
        assert_eq!(g.lags, 4286);
        assert_eq!(g.eps, 3.0 / 4286.0);
        assert!(g.adjusted());
        assert!(StepGrid::new(1.0, 3.0).is_err());
        assert!(StepGrid::new(0.0, 3.0).is_err());
        assert!(StepGrid::new(0.9, 0.3).is_err());
    }

    #[test]
    fn delay_indices() {
        let delta = parse_expr("2 - cos(t)", &["t"]).unwrap();
        let grid = StepGrid::new(0.5, 3.0).unwrap();
        assert_eq!(delay_index(&delta, 0, &grid).unwrap(), 2);
        assert_eq!(delay_index(&delta, -1, &grid).unwrap(), 2);

        for (r, n_lags) in [(3.0, 3000usize), (1.0, 7), (0.3, 1), (2.5, 13)] {
            let grid = StepGrid::new(r / n_lags as f64, r).unwrap();
            let full = parse_expr(&format!("{r:?}"), &["t"]).unwrap();
            for n in [-1, 0, 1, 17, 1000] {
                assert_eq!(delay_index(&full, n, &grid).unwrap(), n_lags);
            }
        }

        let bad = parse_expr("t", &["t"]).unwrap();
        let grid = StepGrid::new(0.5, 3.0).unwrap();
        assert!(matches!(
            delay_index(&bad, 7, &grid),
            Err(EmError::Delay { .. })
        ));
        let neg = parse_expr("t - 1", &["t"]).unwrap();
        assert!(matches!(
            delay_index(&neg, 0, &grid),
            Err(EmError::Delay { .. })
        ));
    }

    #[test]
    fn brownian_moments() {
        let mut rng = rng::stream(17, 0);
        let eps = 0.01;
        let n = 1_000_000;
        let mut buf = [0.0; 2];
        let (mut s, mut s2) = ([0.0; 2], [0.0; 2]);
        for _ in 0..n {
            brownian_increment(&mut rng, eps, &mut buf);
            for k in 0..2 {
                s[k] += buf[k];
                s2[k] += buf[k] * buf[k];
            }
        }
        for k in 0..2 {
            let mean = s[k] / n as f64;
            let var = s2[k] / n as f64 - mean * mean;
            assert!(mean.abs() <= 3.0 * (eps / n as f64).sqrt(), "mean {mean}");
            assert!((var - eps).abs() <= 0.01 * eps, "var {var}");
        }
    }

    #[test]
    fn zero_system_is_constant() {
        let spec = scalar("0", "0", "0", "1", 2.0);
        let cfg = config(&spec, 0.1, 50, 1, "3 + t");
        let path = simulate_path(&spec, &cfg).unwrap();
        for n in 0..=50 {
            assert_eq!(path.state(n), &[3.0]);
        }
        assert_eq!(path.state(-21), &[3.0 - 2.0]);
        assert_eq!(path.state(-20), &[3.0 - 2.0]);
        assert_eq!(path.mode(-1), 0);
    }

    #[test]
    fn linear_decay_is_exact() {
        let spec = scalar("0", "-x", "0", "0", 1.0);
        let cfg = config(&spec, 0.1, 40, 1, "1");
        let path = simulate_path(&spec, &cfg).unwrap();
        let mut expected = 1.0;
        for n in 0..=40 {
            assert_eq!(path.state(n)[0], expected);
            expected += -expected * 0.1;
        }
        for n in 0..=40 {
            assert!((path.state(n)[0] - 0.9f64.powi(n as i32)).abs() < 1e-14);
        }
    }

    #[test]
    fn neutral_term_with_zero_delay() {
        let kappa = 0.3;
        let spec = scalar("0.3*y", "0", "0", "0", 1.0);
        let cfg = config(&spec, 0.25, 5, 1, "1 - t");
        let path = simulate_path(&spec, &cfg).unwrap();
        // hand recursion Y_{n+1} = Y_n + κ(Y_n − Y_{n−1}), Y_{-1} = ξ(−ε) = 1.25
        let mut prev = 1.25;
        let mut cur = 1.0;
        for n in 0..5 {
            let next = cur + kappa * cur - kappa * prev;
            assert!((path.state(n + 1)[0] - next).abs() < 1e-15, "n = {n}");
            prev = cur;
            cur = next;
        }
    }

    #[test]
    fn boundary_conventions() {
        let spec = builtin_system("coupled-yy1").unwrap();
        let xi = spec.parse_initial(&["1 + sin(1 - t)"]).unwrap();
        let cfg = EmConfig::new(&spec, 0.01, 100, 5, 1, xi).unwrap();
        let path = simulate_path(&spec, &cfg).unwrap();
        let xi_at = |t: f64| 1.0 + (1.0 - t).sin();
        assert_eq!(path.state(-301)[0], xi_at(-3.0));
        assert_eq!(path.state(-300)[0], xi_at(-3.0));
        assert_eq!(path.state(-150)[0], xi_at(-1.5));
        assert_eq!(path.state(0)[0], xi_at(0.0));
        assert_eq!(path.mode(-1), 1);
        assert_eq!(path.mode(0), 1);
        assert_eq!(path.delay(-1), path.delay(0));
        assert_eq!(path.delay(0), 100);
        for n in -1..=100 {
            assert!(path.delay(n) <= 300);
        }
    }

    #[test]
    fn determinism_and_horizon_prefix() {
        let spec = builtin_system("coupled-yy1").unwrap();
        let xi = spec.parse_initial(&["1 + sin(1 - t)"]).unwrap();
        let short = EmConfig::new(&spec, 0.01, 200, 9, 1, xi.clone()).unwrap();
        let long = EmConfig::new(&spec, 0.01, 500, 9, 1, xi).unwrap();
        let a = simulate_path(&spec, &short).unwrap();
        let b = simulate_path(&spec, &short).unwrap();
        assert_eq!(a, b);
        let c = simulate_path(&spec, &long).unwrap();
        for n in 0..=200 {
            assert_eq!(a.state(n)[0].to_bits(), c.state(n)[0].to_bits());
            assert_eq!(a.mode(n), c.mode(n));
        }
        let other = Simulator::new(&spec, &short)
            .unwrap()
            .path(1, ModeSource::Chain)
            .unwrap();
        assert_ne!(a.state(200), other.state(200));
    }

    #[test]
    fn stable_subsystem_path_stays_finite() {
        let spec = builtin_system("mode1-yy2").unwrap();
        let xi = spec.parse_initial(&["1 + sin(1 - t)"]).unwrap();
        let cfg = EmConfig::new(&spec, 0.001, 30_000, 2, 0, xi).unwrap();
        let path = simulate_path(&spec, &cfg).unwrap();
        assert!(path.squared_norm(30_000).is_finite());
        assert!(path.squared_norm(30_000) < path.squared_norm(0));
    }

    #[test]
    fn explosion_is_reported() {
        let spec = scalar("0", "100*x", "0", "0", 1.0);
        let cfg = config(&spec, 0.5, 1000, 1, "1");
        match simulate_path(&spec, &cfg) {
            Err(EmError::Explosion { step, norm }) => {
                assert!(norm > EXPLOSION_THRESHOLD);
                // 51^n passes 1e150 at n = 88
                assert_eq!(step, 88);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn z_sequence_identities() {
        let spec = scalar("0", "-x + 0.1*y", "0.4*x", "0.5 + 0.3*sin(t)", 1.0);
        let cfg = config(&spec, 0.01, 500, 3, "cos(t)");
        let path = simulate_path(&spec, &cfg).unwrap();
        let z = z_sequence(&path, &spec).unwrap();
        for n in 0..=500 {
            assert_eq!(z.values[n][0], path.state(n as i64)[0]);
        }

        let spec = builtin_system("coupled-yy1").unwrap();
        let xi = spec.parse_initial(&["1 + sin(1 - t)"]).unwrap();
        let cfg = EmConfig::new(&spec, 0.001, 5000, 4, 1, xi).unwrap();
        let path = simulate_path(&spec, &cfg).unwrap();
        let z = z_sequence(&path, &spec).unwrap();
        assert!(z.max_residual <= 1e-12, "{}", z.max_residual);

        let kappa = 0.3;
        let spec = scalar("0.3*y", "-x", "0.2", "0", 1.0);
        let cfg = config(&spec, 0.1, 50, 5, "1 + t");
        let path = simulate_path(&spec, &cfg).unwrap();
        let z = z_sequence(&path, &spec).unwrap();
        for n in 0..=50i64 {
            let expected = path.state(n)[0] - kappa * path.state(n - 1)[0];
            assert!((z.values[n as usize][0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_modes_match_plain_recursion() {
        let spec = builtin_system("coupled-yy1").unwrap().without_noise();
        let xi = spec.parse_initial(&["1 + sin(1 - t)"]).unwrap();
        let cfg = EmConfig::new(&spec, 0.01, 2000, 8, 1, xi.clone()).unwrap();
        let modes: Vec<usize> = (0..=2000)
            .map(|n| if (n / 137) % 2 == 0 { 1 } else { 0 })
            .collect();
        let path = Simulator::new(&spec, &cfg)
            .unwrap()
            .path(0, ModeSource::Frozen(&modes))
            .unwrap();
        let oracle = frozen_mode_recursion(&spec, &modes, &xi, cfg.eps(), 2000);
        for n in -301..=2000i64 {
            let o = &oracle.values[(n + 301) as usize];
            assert_eq!(path.state(n)[0].to_bits(), o[0].to_bits(), "n = {n}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn delay_index_stays_in_history(
            r in 0.05f64..5.0,
            lags in 1usize..400,
            base in 0.0f64..1.0,
            amp in 0.0f64..1.0,
            freq in 0.0f64..10.0,
            n in 0i64..100_000,
        ) {
            let grid = StepGrid::new(r / lags as f64, r);
            prop_assume!(grid.is_ok());
            let grid = grid.unwrap();
            // δ(t) = r·(base + amp·(1 − base)·(sin(freq·t)+1)/2) ∈ [0, r]
            let text = format!("{r:?}*({base:?} + {amp:?}*(1 - {base:?})*(sin({freq:?}*t) + 1)/2)");
            let delta = parse_expr(&text, &["t"]).unwrap();
            for k in [n - 1, n] {
                let k = k.max(-1);
                let lag = delay_index(&delta, k, &grid).unwrap();
                prop_assert!(lag <= grid.lags);
            }
            let rn = delay_index(&delta, n, &grid).unwrap() as i64;
            let rp = delay_index(&delta, n - 1, &grid).unwrap() as i64;
            let lo = -(grid.lags as i64 + 1);
            prop_assert!(n - rn >= lo && n - rn <= n);
            prop_assert!(n - 1 - rp >= lo && n - 1 - rp <= n);
        }
    }
}
