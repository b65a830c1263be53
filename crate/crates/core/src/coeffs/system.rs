use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::expr::{Expr, ExprError, Scope};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpecError {
    #[error("{field}: {source}")]
    Expr {
        field: String,
        #[source]
        source: ExprError,
    },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("unknown builtin system `{0}` (expected one of coupled-yy1, mode1-yy2, mode2-yy3)")]
    UnknownBuiltin(String),
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> SpecError {
    SpecError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

/// Coefficients of one regime: neutral term `G(y)`, drift `f(x, y)` and
/// diffusion `g(x, y)` stored row-major as `d × m`.
#[derive(Debug, Clone)]
pub struct ModeCoefficients {
    pub neutral: Vec<Expr>,
    pub drift: Vec<Expr>,
    pub diffusion: Vec<Expr>,
}

impl ModeCoefficients {
    /// `G(y)` into `out`.
    #[inline]
    pub fn neutral_into(&self, y: &[f64], out: &mut [f64]) -> Result<(), ExprError> {
        for (o, e) in out.iter_mut().zip(&self.neutral) {
            *o = e.eval_slots(y)?;
        }
        Ok(())
    }

    /// `f(x, y)` into `out`; `xy` is `x` followed by `y`.
    #[inline]
    pub fn drift_into(&self, xy: &[f64], out: &mut [f64]) -> Result<(), ExprError> {
        for (o, e) in out.iter_mut().zip(&self.drift) {
            *o = e.eval_slots(xy)?;
        }
        Ok(())
    }

    /// `g(x, y)` row-major into `out` (length `d·m`).
    #[inline]
    pub fn diffusion_into(&self, xy: &[f64], out: &mut [f64]) -> Result<(), ExprError> {
        for (o, e) in out.iter_mut().zip(&self.diffusion) {
            *o = e.eval_slots(xy)?;
        }
        Ok(())
    }
}

/// A neutral stochastic delay system with Markovian switching.
#[derive(Debug, Clone)]
pub struct SystemSpec {
    /// State dimension `d`.
    pub dim: usize,
    /// Brownian dimension `m`.
    pub noise_dim: usize,
    /// Generator of the switching chain, `m0 × m0`.
    pub generator: Vec<Vec<f64>>,
    /// Upper bound `r` of the delay.
    pub delay_bound: f64,
    /// Contraction constant of the neutral term.
    pub kappa: f64,
    /// Delay `δ(t)`.
    pub delay: Expr,
    pub modes: Vec<ModeCoefficients>,
}

impl SystemSpec {
    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    pub fn state_scope(&self) -> Arc<Scope> {
        self.modes[0].drift[0].scope().clone()
    }

    pub fn delayed_scope(&self) -> Arc<Scope> {
        self.modes[0].neutral[0].scope().clone()
    }

    pub fn time_scope(&self) -> Arc<Scope> {
        self.delay.scope().clone()
    }

    /// Parse one initial-segment expression per state coordinate, over `t`.
    pub fn parse_initial<S: AsRef<str>>(&self, exprs: &[S]) -> Result<Vec<Expr>, SpecError> {
        if exprs.len() != self.dim {
            return Err(invalid(
                "initial",
                format!("expected {} expressions, got {}", self.dim, exprs.len()),
            ));
        }
        exprs
            .iter()
            .enumerate()
            .map(|(k, s)| {
                Expr::parse(s.as_ref(), self.time_scope()).map_err(|source| SpecError::Expr {
                    field: format!("initial[{k}]"),
                    source,
                })
            })
            .collect()
    }

    /// Copy of this system with every diffusion entry replaced by zero.
    pub fn without_noise(&self) -> SystemSpec {
        let mut out = self.clone();
        let scope = self.state_scope();
        for mode in &mut out.modes {
            for g in &mut mode.diffusion {
                *g = Expr::constant(0.0, scope.clone());
            }
        }
        out
    }
}

/// Serializable description of a system with coefficients as expression
/// strings. Variables: `x1..xd`, `y1..yd` (and `x`, `y` when `d = 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemDef {
    pub dim: usize,
    pub noise_dim: usize,
    pub generator: Vec<Vec<f64>>,
    pub delay_bound: f64,
    pub kappa: f64,
    pub delay: String,
    pub modes: Vec<ModeDef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeDef {
    /// `G`, one expression over `y` per state coordinate.
    pub neutral: Vec<String>,
    /// `f`, one expression over `(x, y)` per state coordinate.
    pub drift: Vec<String>,
    /// `g`, `d` rows of `m` expressions over `(x, y)`.
    pub diffusion: Vec<Vec<String>>,
}

impl SystemDef {
    /// Parse and shape-check. Field names in errors are relative to the
    /// definition root, e.g. `modes[1].drift[0]`.
    pub fn build(&self) -> Result<SystemSpec, SpecError> {
        let d = self.dim;
        let m = self.noise_dim;
        if d == 0 {
            return Err(invalid("dim", "must be at least 1"));
        }
        if m == 0 {
            return Err(invalid("noise_dim", "must be at least 1"));
        }
        if !(self.delay_bound > 0.0 && self.delay_bound.is_finite()) {
            return Err(invalid("delay_bound", "must be positive and finite"));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(invalid("kappa", "must lie in (0, 1)"));
        }
        let m0 = self.modes.len();
        if m0 == 0 {
            return Err(invalid("modes", "at least one mode is required"));
        }
        if self.generator.len() != m0 || self.generator.iter().any(|row| row.len() != m0) {
            return Err(invalid(
                "generator",
                format!("must be {m0}×{m0} to match the number of modes"),
            ));
        }

        let xy = Arc::new(Scope::state_pair(d));
        let y = Arc::new(Scope::delayed_state(d));
        let t = Arc::new(Scope::time());
        let parse = |text: &str, scope: &Arc<Scope>, field: String| {
            Expr::parse(text, scope.clone()).map_err(|source| SpecError::Expr { field, source })
        };

        let delay = parse(&self.delay, &t, "delay".into())?;
        let mut modes = Vec::with_capacity(m0);
        for (i, md) in self.modes.iter().enumerate() {
            if md.neutral.len() != d {
                return Err(invalid(
                    format!("modes[{i}].neutral"),
                    format!("expected {d} entries"),
                ));
            }
            if md.drift.len() != d {
                return Err(invalid(
                    format!("modes[{i}].drift"),
                    format!("expected {d} entries"),
                ));
            }
            if md.diffusion.len() != d || md.diffusion.iter().any(|r| r.len() != m) {
                return Err(invalid(
                    format!("modes[{i}].diffusion"),
                    format!("expected {d} rows of {m} entries"),
                ));
            }
            let neutral = md
                .neutral
                .iter()
                .enumerate()
                .map(|(k, s)| parse(s, &y, format!("modes[{i}].neutral[{k}]")))
                .collect::<Result<_, _>>()?;
            let drift = md
                .drift
                .iter()
                .enumerate()
                .map(|(k, s)| parse(s, &xy, format!("modes[{i}].drift[{k}]")))
                .collect::<Result<_, _>>()?;
            let mut diffusion = Vec::with_capacity(d * m);
            for (k, row) in md.diffusion.iter().enumerate() {
                for (l, s) in row.iter().enumerate() {
                    diffusion.push(parse(s, &xy, format!("modes[{i}].diffusion[{k}][{l}]"))?);
                }
            }
            modes.push(ModeCoefficients {
                neutral,
                drift,
                diffusion,
            });
        }

        Ok(SystemSpec {
            dim: d,
            noise_dim: m,
            generator: self.generator.clone(),
            delay_bound: self.delay_bound,
            kappa: self.kappa,
            delay,
            modes,
        })
    }
}

/// Identifiers accepted by [`builtin_system`].
pub const BUILTIN_IDS: [&str; 3] = ["coupled-yy1", "mode1-yy2", "mode2-yy3"];

fn scalar_mode(neutral: &str, drift: &str, diffusion: &str) -> ModeDef {
    ModeDef {
        neutral: vec![neutral.into()],
        drift: vec![drift.into()],
        diffusion: vec![vec![diffusion.into()]],
    }
}

/// Definition of a builtin scalar test system.
///
/// All three share `r = 3`, `κ = 0.1` and `δ(t) = 2 − cos t`. The coupled
/// system switches between the two single-mode systems with generator
/// `[[-1, 1], [3, -3]]`.
pub fn builtin_def(id: &str) -> Result<SystemDef, SpecError> {
    let first = scalar_mode("0.05*y", "-1.1*x + 0.2*y", "0.3*x*cos(y)");
    let second = scalar_mode("0.1*y", "0.2*x + 0.1*y", "0.2*sin(y)");
    let (generator, modes) = match id {
        "coupled-yy1" => (vec![vec![-1.0, 1.0], vec![3.0, -3.0]], vec![first, second]),
        "mode1-yy2" => (vec![vec![0.0]], vec![first]),
        "mode2-yy3" => (vec![vec![0.0]], vec![second]),
        other => return Err(SpecError::UnknownBuiltin(other.to_string())),
    };
    Ok(SystemDef {
        dim: 1,
        noise_dim: 1,
        generator,
        delay_bound: 3.0,
        kappa: 0.1,
        delay: "2 - cos(t)".into(),
        modes,
    })
}

pub fn builtin_system(id: &str) -> Result<SystemSpec, SpecError> {
    builtin_def(id)?.build()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coupled_system_coefficients() {
        let s = builtin_system("coupled-yy1").unwrap();
        assert_eq!(s.mode_count(), 2);
        assert_eq!(s.generator, vec![vec![-1.0, 1.0], vec![3.0, -3.0]]);
        assert_eq!(s.delay_bound, 3.0);
        assert_eq!(s.kappa, 0.1);
        let mut out = [0.0];
        s.modes[0].drift_into(&[1.0, 1.0], &mut out).unwrap();
        assert!((out[0] + 0.9).abs() < 1e-15);
        s.modes[1].drift_into(&[1.0, 1.0], &mut out).unwrap();
        assert!((out[0] - 0.3).abs() < 1e-15);
        assert_eq!(
            s.modes[0].drift[0].affine_coefficients(),
            Some((vec![-1.1, 0.2], 0.0))
        );
        assert_eq!(
            s.modes[1].drift[0].affine_coefficients(),
            Some((vec![0.2, 0.1], 0.0))
        );
    }

    #[test]
    fn single_mode_systems() {
        let s = builtin_system("mode1-yy2").unwrap();
        assert_eq!(s.mode_count(), 1);
        assert_eq!(s.generator, vec![vec![0.0]]);
        let mut out = [0.0];
        s.modes[0].neutral_into(&[2.0], &mut out).unwrap();
        assert!((out[0] - 0.1).abs() < 1e-16);

        let s = builtin_system("mode2-yy3").unwrap();
        s.modes[0]
            .diffusion_into(&[5.0, std::f64::consts::FRAC_PI_2], &mut out)
            .unwrap();
        assert!((out[0] - 0.2).abs() < 1e-16);
    }

    #[test]
    fn unknown_builtin() {
        assert_eq!(
            builtin_system("yy4").unwrap_err(),
            SpecError::UnknownBuiltin("yy4".into())
        );
    }

    #[test]
    fn build_errors_name_the_field() {
        let mut def = builtin_def("coupled-yy1").unwrap();
        def.modes[1].drift[0] = "0.2*x + * y".into();
        match def.build().unwrap_err() {
            SpecError::Expr { field, .. } => assert_eq!(field, "modes[1].drift[0]"),
            e => panic!("{e}"),
        }

        let mut def = builtin_def("coupled-yy1").unwrap();
        def.modes[0].neutral[0] = "0.05*x".into(); // G sees only y
        match def.build().unwrap_err() {
            SpecError::Expr { field, source } => {
                assert_eq!(field, "modes[0].neutral[0]");
                assert!(matches!(source, ExprError::UnknownIdentifier { .. }));
            }
            e => panic!("{e}"),
        }

        let mut def = builtin_def("coupled-yy1").unwrap();
        def.generator.pop();
        assert!(
            matches!(def.build(), Err(SpecError::Invalid { field, .. }) if field == "generator")
        );

        let mut def = builtin_def("mode1-yy2").unwrap();
        def.kappa = 1.0;
        assert!(matches!(def.build(), Err(SpecError::Invalid { field, .. }) if field == "kappa"));
    }
}
