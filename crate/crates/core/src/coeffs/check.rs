//! Sampled falsifiers for the standing structural assumptions of a system.
//!
//! None of these checks is a proof: contraction and the delay range quantify
//! over a continuum and are only sampled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::system::SystemSpec;
use crate::markov::validate_generator;

/// Radii cycled through when drawing sample points.
pub const SAMPLE_RADII: [f64; 3] = [0.1, 1.0, 10.0];

/// Absolute tolerance for "numerically zero at the origin".
const ORIGIN_TOL: f64 = 1e-12;
/// Relative slack on the contraction inequality.
const CONTRACTION_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Property {
    Generator,
    DriftAtOrigin,
    DiffusionAtOrigin,
    NeutralAtOrigin,
    Contraction,
    DelayRange,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Counterexample {
    /// A pair with `|G(x) − G(y)| > κ|x − y|`.
    Pair {
        x: Vec<f64>,
        y: Vec<f64>,
        lhs: f64,
        rhs: f64,
    },
    /// A time with `δ(t)` outside `[0, r]`.
    Time {
        t: f64,
        delay: f64,
    },
    Message {
        text: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyCheck {
    pub property: Property,
    /// Zero-based mode, for per-mode properties.
    pub mode: Option<usize>,
    pub passed: bool,
    pub counterexample: Option<Counterexample>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructureReport {
    pub checks: Vec<PropertyCheck>,
}

impl StructureReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &PropertyCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn find(&self, property: Property, mode: Option<usize>) -> Option<&PropertyCheck> {
        self.checks
            .iter()
            .find(|c| c.property == property && c.mode == mode)
    }
}

fn outcome(property: Property, mode: Option<usize>, cx: Option<Counterexample>) -> PropertyCheck {
    PropertyCheck {
        property,
        mode,
        passed: cx.is_none(),
        counterexample: cx,
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Check origin conditions, generator validity, sampled contraction of every
/// neutral term and the range of `δ` on a grid over `[0, horizon]`.
///
/// Deterministic given `seed`; failures are report entries, never errors.
pub fn check_structure(
    spec: &SystemSpec,
    samples: usize,
    seed: u64,
    horizon: f64,
) -> StructureReport {
    let samples = samples.max(1);
    let d = spec.dim;
    let mut checks = Vec::new();

    let gen = validate_generator(&spec.generator)
        .err()
        .map(|v| Counterexample::Message {
            text: v.to_string(),
        });
    checks.push(outcome(Property::Generator, None, gen));

    let zeros = vec![0.0; 2 * d];
    for (i, mode) in spec.modes.iter().enumerate() {
        let mut f = vec![0.0; d];
        let drift = match mode.drift_into(&zeros, &mut f) {
            Err(e) => Some(Counterexample::Message {
                text: e.to_string(),
            }),
            Ok(()) if f.iter().any(|v| v.abs() > ORIGIN_TOL) => Some(Counterexample::Message {
                text: format!("f(0, 0) = {f:?}"),
            }),
            Ok(()) => None,
        };
        checks.push(outcome(Property::DriftAtOrigin, Some(i), drift));

        let mut g = vec![0.0; d * spec.noise_dim];
        let diff = match mode.diffusion_into(&zeros, &mut g) {
            Err(e) => Some(Counterexample::Message {
                text: e.to_string(),
            }),
            Ok(()) if g.iter().any(|v| v.abs() > ORIGIN_TOL) => Some(Counterexample::Message {
                text: format!("g(0, 0) = {g:?}"),
            }),
            Ok(()) => None,
        };
        checks.push(outcome(Property::DiffusionAtOrigin, Some(i), diff));

        let mut n = vec![0.0; d];
        let neutral = match mode.neutral_into(&zeros[..d], &mut n) {
            Err(e) => Some(Counterexample::Message {
                text: e.to_string(),
            }),
            Ok(()) if n.iter().any(|v| v.abs() > ORIGIN_TOL) => Some(Counterexample::Message {
                text: format!("G(0) = {n:?}"),
            }),
            Ok(()) => None,
        };
        checks.push(outcome(Property::NeutralAtOrigin, Some(i), neutral));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first_violation: Vec<Option<Counterexample>> = vec![None; spec.mode_count()];
    let (mut x, mut y) = (vec![0.0; d], vec![0.0; d]);
    let (mut gx, mut gy) = (vec![0.0; d], vec![0.0; d]);
    for k in 0..samples {
        let radius = SAMPLE_RADII[k % SAMPLE_RADII.len()];
        for v in x.iter_mut().chain(y.iter_mut()) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = radius * z;
        }
        for (i, mode) in spec.modes.iter().enumerate() {
            if first_violation[i].is_some() {
                continue;
            }
            let evaluated = mode
                .neutral_into(&x, &mut gx)
                .and_then(|_| mode.neutral_into(&y, &mut gy));
            if let Err(e) = evaluated {
                first_violation[i] = Some(Counterexample::Message {
                    text: format!("at x = {x:?}, y = {y:?}: {e}"),
                });
                continue;
            }
            let diff: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a - b).collect();
            let gap: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
            let lhs = norm(&diff);
            let rhs = spec.kappa * norm(&gap);
            if lhs > rhs * (1.0 + CONTRACTION_SLACK) + f64::MIN_POSITIVE {
                first_violation[i] = Some(Counterexample::Pair {
                    x: x.clone(),
                    y: y.clone(),
                    lhs,
                    rhs,
                });
            }
        }
    }
    for (i, cx) in first_violation.into_iter().enumerate() {
        checks.push(outcome(Property::Contraction, Some(i), cx));
    }

    let r = spec.delay_bound;
    let slack = 1e-12 * r.max(1.0);
    let mut delay_cx = None;
    for j in 0..=samples {
        let t = horizon * j as f64 / samples as f64;
        match spec.delay.eval_slots(&[t]) {
            Ok(v) if v >= -slack && v <= r + slack => {}
            Ok(v) => {
                delay_cx = Some(Counterexample::Time { t, delay: v });
                break;
            }
            Err(e) => {
                delay_cx = Some(Counterexample::Message {
                    text: format!("δ({t}): {e}"),
                });
                break;
            }
        }
    }
    checks.push(outcome(Property::DelayRange, None, delay_cx));

    StructureReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::system::{builtin_def, builtin_system, BUILTIN_IDS};

    #[test]
    fn builtins_pass() {
        for id in BUILTIN_IDS {
            let report = check_structure(&builtin_system(id).unwrap(), 10_000, 7, 30.0);
            assert!(
                report.all_passed(),
                "{id}: {:?}",
                report.failures().collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn loose_contraction_constant_is_refuted() {
        let mut def = builtin_def("mode1-yy2").unwrap();
        def.kappa = 0.01;
        let report = check_structure(&def.build().unwrap(), 1000, 1, 30.0);
        let c = report.find(Property::Contraction, Some(0)).unwrap();
        assert!(!c.passed);
        match c.counterexample.as_ref().unwrap() {
            Counterexample::Pair { x, y, lhs, rhs } => {
                assert_ne!(x, y);
                let direct = (0.05 * (x[0] - y[0])).abs();
                assert!((lhs - direct).abs() < 1e-12);
                assert!(direct > 0.01 * (x[0] - y[0]).abs());
                assert!(lhs > rhs);
            }
            other => panic!("{other:?}"),
        }
        // nothing else is wrong with the system
        assert_eq!(report.failures().count(), 1);
    }

    #[test]
    fn delay_leaving_its_bound_is_refuted() {
        let mut def = builtin_def("mode1-yy2").unwrap();
        def.delay = "t".into();
        let report = check_structure(&def.build().unwrap(), 1000, 1, 10.0);
        let c = report.find(Property::DelayRange, None).unwrap();
        match c.counterexample.as_ref().unwrap() {
            Counterexample::Time { t, delay } => {
                assert!(*t > 3.0 && *t < 3.02, "{t}");
                assert!(*delay > 3.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn origin_and_generator_failures() {
        let mut def = builtin_def("coupled-yy1").unwrap();
        def.modes[0].drift[0] = "1 - x".into();
        def.modes[1].neutral[0] = "0.1*y + 0.5".into();
        def.generator[0][1] = 2.0;
        let report = check_structure(&def.build().unwrap(), 10, 1, 1.0);
        assert!(!report.find(Property::Generator, None).unwrap().passed);
        assert!(
            !report
                .find(Property::DriftAtOrigin, Some(0))
                .unwrap()
                .passed
        );
        assert!(
            report
                .find(Property::DriftAtOrigin, Some(1))
                .unwrap()
                .passed
        );
        assert!(
            !report
                .find(Property::NeutralAtOrigin, Some(1))
                .unwrap()
                .passed
        );
    }

    #[test]
    fn deterministic_given_seed() {
        let mut def = builtin_def("coupled-yy1").unwrap();
        def.kappa = 0.02;
        let spec = def.build().unwrap();
        let a = check_structure(&spec, 500, 99, 5.0);
        let b = check_structure(&spec, 500, 99, 5.0);
        assert_eq!(a, b);
    }
}
