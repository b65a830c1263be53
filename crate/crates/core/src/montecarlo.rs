//! Ensemble estimates of `E|Y_n|²` and their decay rate.
//!
//! Paths are simulated in fixed blocks of [`BLOCK_PATHS`] stream ids. Within a
//! block paths run in parallel; blocks are then folded into the accumulators
//! one path at a time in ascending stream order, so the result does not
//! depend on the number of worker threads.

use rayon::prelude::*;
use thiserror::Error;

use crate::coeffs::SystemSpec;
use crate::em::{EmConfig, EmError, ModeSource, Simulator};

pub const BLOCK_PATHS: usize = 64;
pub const DEFAULT_WINDOW_FRACTION: f64 = 2.0 / 3.0;
pub const MIN_FIT_POINTS: usize = 10;

#[derive(Debug, Error)]
pub enum MonteCarloError {
    #[error("need at least 2 paths, got {0}")]
    TooFewPaths(usize),
    #[error("could not build thread pool: {0}")]
    ThreadPool(String),
    #[error("path {path}: {source}")]
    Path {
        path: u64,
        #[source]
        source: EmError,
    },
    #[error(transparent)]
    Em(#[from] EmError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("window fraction {0} outside (0, 1]")]
    WindowFraction(f64),
    #[error("only {found} usable points in the fit window, need {MIN_FIT_POINTS}")]
    InsufficientPoints { found: usize },
    #[error("all second moments in the window are zero")]
    AllZero,
}

/// Sample second moment per step.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSeries {
    pub eps: f64,
    pub delay_bound: f64,
    pub seed: u64,
    pub paths: usize,
    /// `t_n = nε`.
    pub times: Vec<f64>,
    /// Mean of `|Y_n|²` over the paths still finite at step `n`; NaN if none.
    pub mean_sq: Vec<f64>,
    /// Standard error of `mean_sq[n]`; NaN with fewer than two valid paths.
    pub stderr: Vec<f64>,
    /// Paths contributing at each step.
    pub valid: Vec<usize>,
    /// Paths that exceeded the explosion threshold.
    pub exploded: usize,
}

impl MomentSeries {
    pub fn len(&self) -> usize {
        self.mean_sq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean_sq.is_empty()
    }

    /// False as soon as any path was dropped.
    pub fn certifiable(&self) -> bool {
        self.exploded == 0
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Accumulator {
    count: usize,
    sum: CompensatedSum,
    mean: f64,
    m2: f64,
}

impl Accumulator {
    fn push(&mut self, v: f64) {
        self.count += 1;
        self.sum.add(v);
        let delta = v - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (v - self.mean);
    }

    fn mean(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.sum.value() / self.count as f64
        }
    }

    fn stderr(&self) -> f64 {
        if self.count < 2 {
            return f64::NAN;
        }
        let var = self.m2.max(0.0) / (self.count - 1) as f64;
        (var / self.count as f64).sqrt()
    }
}

struct PathSquares {
    values: Vec<f64>,
    exploded: bool,
}

fn run_path(
    sim: &Simulator<'_>,
    stream: u64,
    steps: usize,
) -> Result<PathSquares, MonteCarloError> {
    let mut values = Vec::with_capacity(steps + 1);
    let outcome = sim.drive(
        stream,
        ModeSource::Chain,
        |_, y, _| values.push(y.iter().map(|v| v * v).sum()),
        |_, _| {},
    );
    match outcome {
        Ok(()) => Ok(PathSquares {
            values,
            exploded: false,
        }),
        Err(EmError::Explosion { .. }) => Ok(PathSquares {
            values,
            exploded: true,
        }),
        Err(source) => Err(MonteCarloError::Path {
            path: stream,
            source,
        }),
    }
}

/// Monte Carlo estimate of `E|Y_n|²` from paths with stream ids `0..paths`.
///
/// `threads = None` uses the global rayon pool. Exploded paths contribute up
/// to the last finite step and are counted in [`MomentSeries::exploded`].
pub fn estimate_second_moment(
    spec: &SystemSpec,
    config: &EmConfig,
    paths: usize,
    threads: Option<usize>,
) -> Result<MomentSeries, MonteCarloError> {
    if paths < 2 {
        return Err(MonteCarloError::TooFewPaths(paths));
    }
    let sim = Simulator::new(spec, config)?;
    let steps = config.horizon_steps;
    let mut acc = vec![Accumulator::default(); steps + 1];
    let mut exploded = 0;

    let mut work = || -> Result<(), MonteCarloError> {
        for start in (0..paths).step_by(BLOCK_PATHS) {
            let end = (start + BLOCK_PATHS).min(paths);
            let block: Vec<PathSquares> = (start..end)
                .into_par_iter()
                .map(|j| run_path(&sim, j as u64, steps))
                .collect::<Result<_, _>>()?;
            for path in block {
                exploded += usize::from(path.exploded);
                for (a, v) in acc.iter_mut().zip(path.values) {
                    a.push(v);
                }
            }
        }
        Ok(())
    };
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| MonteCarloError::ThreadPool(e.to_string()))?
            .install(work)?,
        None => work()?,
    }

    Ok(MomentSeries {
        eps: config.grid.eps,
        delay_bound: spec.delay_bound,
        seed: config.seed,
        paths,
        times: (0..=steps).map(|n| n as f64 * config.grid.eps).collect(),
        mean_sq: acc.iter().map(Accumulator::mean).collect(),
        stderr: acc.iter().map(Accumulator::stderr).collect(),
        valid: acc.iter().map(|a| a.count).collect(),
        exploded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRatePoint {
    pub n: usize,
    pub t: f64,
    /// `(1/(nε)) ln mean_sq[n]`, absent where the mean is not positive.
    pub value: Option<f64>,
}

/// The transform `(1/(nε)) ln mean_sq[n]` for `n ≥ 1`.
pub fn log_rate_series(series: &MomentSeries) -> Vec<LogRatePoint> {
    (1..series.len())
        .map(|n| {
            let m = series.mean_sq[n];
            let t = series.times[n];
            let value = (m > 0.0 && m.is_finite()).then(|| m.ln() / t);
            LogRatePoint { n, t, value }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit {
    pub n_lo: usize,
    pub n_hi: usize,
    pub points: usize,
    /// Slope of `ln mean_sq` against `t`; the empirical `−λ`.
    pub slope: f64,
    pub intercept: f64,
    pub residual_rms: f64,
}

/// Least-squares line through `(t_n, ln mean_sq[n])` over the final
/// `window_fraction` of the series, never starting before `t = 2r`.
pub fn fit_decay_rate(series: &MomentSeries, window_fraction: f64) -> Result<DecayFit, FitError> {
    if !(window_fraction > 0.0 && window_fraction <= 1.0) {
        return Err(FitError::WindowFraction(window_fraction));
    }
    let len = series.len();
    if len == 0 {
        return Err(FitError::InsufficientPoints { found: 0 });
    }
    let n_hi = len - 1;
    let from_fraction = ((len as f64) * (1.0 - window_fraction)).ceil() as usize;
    let transient = series
        .times
        .iter()
        .position(|&t| t >= 2.0 * series.delay_bound)
        .unwrap_or(len);
    let n_lo = from_fraction.max(transient).min(n_hi);

    let window = n_lo..=n_hi;
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(n_hi + 1 - n_lo);
    let mut zeros = 0;
    for n in window {
        let m = series.mean_sq[n];
        if m > 0.0 && m.is_finite() {
            pts.push((series.times[n], m.ln()));
        } else if m == 0.0 {
            zeros += 1;
        }
    }
    if pts.is_empty() && zeros > 0 {
        return Err(FitError::AllZero);
    }
    if pts.len() < MIN_FIT_POINTS {
        return Err(FitError::InsufficientPoints { found: pts.len() });
    }

    let k = pts.len() as f64;
    let t_mean = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let l_mean = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &(t, l) in &pts {
        sxx += (t - t_mean) * (t - t_mean);
        sxy += (t - t_mean) * (l - l_mean);
    }
    let slope = sxy / sxx;
    let intercept = l_mean - slope * t_mean;
    let rss: f64 = pts
        .iter()
        .map(|&(t, l)| {
            let e = l - intercept - slope * t;
            e * e
        })
        .sum();
    Ok(DecayFit {
        n_lo,
        n_hi,
        points: pts.len(),
        slope,
        intercept,
        residual_rms: (rss / k).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{ModeDef, SystemDef};
    use crate::reference::gbm_moment_recursion;

    fn scalar(drift: &str, diffusion: &str) -> SystemSpec {
        SystemDef {
            dim: 1,
            noise_dim: 1,
            generator: vec![vec![0.0]],
            delay_bound: 1.0,
            kappa: 0.5,
            delay: "1".into(),
            modes: vec![ModeDef {
                neutral: vec!["0".into()],
                drift: vec![drift.into()],
                diffusion: vec![vec![diffusion.into()]],
            }],
        }
        .build()
        .unwrap()
    }

    fn config(spec: &SystemSpec, eps: f64, steps: usize, seed: u64, xi: &str) -> EmConfig {
        EmConfig::new(
            spec,
            eps,
            steps,
            seed,
            0,
            spec.parse_initial(&[xi]).unwrap(),
        )
        .unwrap()
    }

    fn synthetic(mean_sq: impl Fn(f64) -> f64, eps: f64, steps: usize, r: f64) -> MomentSeries {
        let times: Vec<f64> = (0..=steps).map(|n| n as f64 * eps).collect();
        MomentSeries {
            eps,
            delay_bound: r,
            seed: 0,
            paths: 2,
            mean_sq: times.iter().map(|&t| mean_sq(t)).collect(),
            stderr: vec![0.0; steps + 1],
            valid: vec![2; steps + 1],
            exploded: 0,
            times,
        }
    }

    #[test]
    fn zero_system_has_zero_stderr() {
        let spec = scalar("0", "0");
        let cfg = config(&spec, 0.1, 30, 4, "2 + sin(t)");
        let s = estimate_second_moment(&spec, &cfg, 37, None).unwrap();
        assert_eq!(s.len(), 31);
        assert!(s.mean_sq.iter().all(|&m| m == 4.0));
        assert!(s.stderr.iter().all(|&e| e == 0.0));
        assert!(s.certifiable());
        assert!(s.valid.iter().all(|&v| v == 37));
    }

    #[test]
    fn rejects_single_path() {
        let spec = scalar("0", "0");
        let cfg = config(&spec, 0.1, 3, 4, "1");
        assert!(matches!(
            estimate_second_moment(&spec, &cfg, 1, None),
            Err(MonteCarloError::TooFewPaths(1))
        ));
    }

    #[test]
    fn gbm_matches_closed_form() {
        let spec = scalar("-x", "0.5*x");
        let cfg = config(&spec, 0.01, 100, 2024, "1");
        let s = estimate_second_moment(&spec, &cfg, 20_000, None).unwrap();
        for n in 0..=100 {
            let exact = gbm_moment_recursion(-1.0, 0.5, 0.01, 1.0, n as u32);
            let tol = 4.0 * s.stderr[n] + 1e-12;
            assert!(
                (s.mean_sq[n] - exact).abs() <= tol,
                "n = {n}: {} vs {exact}",
                s.mean_sq[n]
            );
        }
    }

    #[test]
    fn stderr_scales_with_path_count() {
        let spec = scalar("-x", "0.5*x");
        let median = |paths| {
            let cfg = config(&spec, 0.01, 100, 11, "1");
            let s = estimate_second_moment(&spec, &cfg, paths, None).unwrap();
            let mut e = s.stderr[1..].to_vec();
            e.sort_by(f64::total_cmp);
            e[e.len() / 2]
        };
        let ratio = median(4000) / median(8000);
        assert!((ratio / 2f64.sqrt() - 1.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn thread_count_does_not_change_result() {
        let spec = crate::coeffs::builtin_system("coupled-yy1").unwrap();
        let xi = spec.parse_initial(&["1 + sin(1 - t)"]).unwrap();
        let cfg = EmConfig::new(&spec, 0.01, 400, 6, 1, xi).unwrap();
        let one = estimate_second_moment(&spec, &cfg, 150, Some(1)).unwrap();
        let four = estimate_second_moment(&spec, &cfg, 150, Some(4)).unwrap();
        assert_eq!(one, four);
        for (a, b) in one.mean_sq.iter().zip(&four.mean_sq) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn explosions_are_counted() {
        let spec = scalar("60*x", "x");
        let cfg = config(&spec, 0.5, 300, 1, "1");
        let s = estimate_second_moment(&spec, &cfg, 5, None).unwrap();
        assert_eq!(s.exploded, 5);
        assert!(!s.certifiable());
        assert_eq!(s.valid[0], 5);
        assert_eq!(*s.valid.last().unwrap(), 0);
        assert!(s.mean_sq.last().unwrap().is_nan());
    }

    #[test]
    fn log_rate_transform() {
        let s = synthetic(|t| (-t).exp(), 0.01, 200, 0.1);
        let lr = log_rate_series(&s);
        assert_eq!(lr.len(), 200);
        assert_eq!(lr[0].n, 1);
        for p in &lr {
            assert!((p.value.unwrap() + 1.0).abs() < 1e-12);
        }

        let s = synthetic(|_| 3.0, 0.1, 100, 0.1);
        for p in log_rate_series(&s) {
            assert!((p.value.unwrap() - 3f64.ln() / p.t).abs() < 1e-15);
        }

        let s = synthetic(|t| if t > 0.5 { 0.0 } else { 1.0 }, 0.1, 10, 0.1);
        let lr = log_rate_series(&s);
        assert!(lr[3].value.is_some());
        assert!(lr[7].value.is_none());
    }

    #[test]
    fn exact_exponential_fit() {
        let s = synthetic(|t| 5.0 * (-0.3 * t).exp(), 0.01, 3000, 3.0);
        let fit = fit_decay_rate(&s, DEFAULT_WINDOW_FRACTION).unwrap();
        assert!((fit.slope + 0.3).abs() < 1e-10);
        assert!((fit.intercept - 5f64.ln()).abs() < 1e-9);
        assert!(fit.residual_rms < 1e-12);
        assert_eq!(fit.n_lo, 1001);
        assert_eq!(fit.n_hi, 3000);
    }

    #[test]
    fn fit_window_skips_transient() {
        let s = synthetic(|t| (-t).exp(), 0.1, 100, 4.0);
        let fit = fit_decay_rate(&s, 1.0).unwrap();
        assert_eq!(fit.n_lo, 80);
    }

    #[test]
    fn fit_errors() {
        let s = synthetic(|t| (-t).exp(), 0.1, 100, 0.1);
        assert_eq!(fit_decay_rate(&s, 0.0), Err(FitError::WindowFraction(0.0)));
        assert_eq!(fit_decay_rate(&s, 1.5), Err(FitError::WindowFraction(1.5)));
        assert!(matches!(
            fit_decay_rate(&s, 0.05),
            Err(FitError::InsufficientPoints { found: 5 })
        ));
        let zero = synthetic(|_| 0.0, 0.1, 100, 0.1);
        assert_eq!(fit_decay_rate(&zero, 0.5), Err(FitError::AllZero));
    }

    #[test]
    fn deterministic_decay_log_rate_is_flat() {
        let spec = scalar("-x", "0");
        let cfg = config(&spec, 0.01, 500, 1, "1");
        let s = estimate_second_moment(&spec, &cfg, 2, None).unwrap();
        let expected = 2.0 * (0.99f64).ln() / 0.01;
        for p in log_rate_series(&s) {
            assert!((p.value.unwrap() - expected).abs() < 1e-9);
        }
    }
}
