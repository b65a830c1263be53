//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use nsdde::coeffs::{builtin_system, Expr, SystemDef, SystemSpec, BUILTIN_IDS};
use nsdde::em::{EmConfig, EmError, StepGrid};
use nsdde::stability::Combinator;
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemChoice,
    #[serde(default)]
    pub certificate: Option<CertificateBlock>,
    #[serde(default)]
    pub simulation: Option<SimulationBlock>,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemChoice {
    Builtin(String),
    Inline(SystemDef),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateBlock {
    #[serde(alias = "p")]
    pub weights: Vec<f64>,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    /// `C0`; derived from affine drifts when absent.
    #[serde(default, alias = "C0")]
    pub drift_growth: Option<f64>,
    /// Target rate as a fraction of `λ0`.
    #[serde(default = "default_rate_fraction")]
    pub rate_fraction: f64,
    #[serde(default = "default_combinator")]
    pub combinator: Combinator,
    #[serde(default = "default_falsify_samples")]
    pub falsify_samples: u64,
    #[serde(default)]
    pub falsify_seed: u64,
    #[serde(default = "default_structure_samples")]
    pub structure_samples: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum InitialSegment {
    Scalar(String),
    Vector(Vec<String>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationBlock {
    pub eps: f64,
    pub horizon_time: f64,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default)]
    pub seed: u64,
    /// `ξ(t)`: one expression, or one per state coordinate.
    pub initial: InitialSegment,
    /// One-based.
    #[serde(default = "default_initial_mode")]
    pub initial_mode: usize,
    #[serde(default = "default_window_fraction")]
    pub window_fraction: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputBlock {
    pub directory: PathBuf,
    pub report: String,
    pub moments: String,
    pub fit: String,
    pub path_prefix: String,
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock {
            directory: PathBuf::from("out"),
            report: "analysis.json".into(),
            moments: "moments.csv".into(),
            fit: "fit.json".into(),
            path_prefix: "path_".into(),
        }
    }
}

fn default_rate_fraction() -> f64 {
    0.1
}
fn default_combinator() -> Combinator {
    Combinator::Min
}
fn default_falsify_samples() -> u64 {
    1_000_000
}
fn default_structure_samples() -> usize {
    10_000
}
fn default_paths() -> usize {
    100
}
fn default_initial_mode() -> usize {
    1
}
fn default_window_fraction() -> f64 {
    nsdde::montecarlo::DEFAULT_WINDOW_FRACTION
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("at `{path}`: {}", e.inner()))
        })
    }

    pub fn system_label(&self) -> String {
        match &self.system {
            SystemChoice::Builtin(id) => id.clone(),
            SystemChoice::Inline(_) => "inline".into(),
        }
    }

    pub fn build_system(&self) -> Result<SystemSpec, CliError> {
        match &self.system {
            SystemChoice::Builtin(id) => builtin_system(id).map_err(|_| {
                CliError::Config(format!(
                    "at `system.builtin`: unknown builtin {id:?} (expected one of {})",
                    BUILTIN_IDS.join(", ")
                ))
            }),
            SystemChoice::Inline(def) => def
                .build()
                .map_err(|e| CliError::Config(format!("in `system.inline`: {e}"))),
        }
    }

    pub fn certificate(&self) -> Result<&CertificateBlock, CliError> {
        self.certificate
            .as_ref()
            .ok_or_else(|| CliError::Config("missing `certificate` block".into()))
    }

    pub fn simulation(&self) -> Result<&SimulationBlock, CliError> {
        self.simulation
            .as_ref()
            .ok_or_else(|| CliError::Config("missing `simulation` block".into()))
    }
}

impl SimulationBlock {
    pub fn initial_exprs(&self, spec: &SystemSpec) -> Result<Vec<Expr>, CliError> {
        let texts: Vec<String> = match &self.initial {
            InitialSegment::Scalar(s) => vec![s.clone(); spec.dim],
            InitialSegment::Vector(v) => v.clone(),
        };
        spec.parse_initial(&texts)
            .map_err(|e| CliError::Config(format!("in `simulation`: {e}")))
    }

    /// Engine configuration; `seed` overrides the configured seed.
    pub fn em_config(&self, spec: &SystemSpec, seed: Option<u64>) -> Result<EmConfig, CliError> {
        if self.initial_mode == 0 || self.initial_mode > spec.mode_count() {
            return Err(CliError::Config(format!(
                "at `simulation.initial_mode`: {} is not in 1..={}",
                self.initial_mode,
                spec.mode_count()
            )));
        }
        let grid =
            StepGrid::new(self.eps, spec.delay_bound).map_err(config_error("simulation.eps"))?;
        if !(self.horizon_time > 0.0 && self.horizon_time.is_finite()) {
            return Err(CliError::Config(
                "at `simulation.horizon_time`: must be positive".into(),
            ));
        }
        let steps = (self.horizon_time / grid.eps).round() as usize;
        let xi = self.initial_exprs(spec)?;
        EmConfig::new(
            spec,
            self.eps,
            steps,
            seed.unwrap_or(self.seed),
            self.initial_mode - 1,
            xi,
        )
        .map_err(config_error("simulation"))
    }
}

fn config_error(key: &'static str) -> impl Fn(EmError) -> CliError {
    move |e| CliError::Config(format!("at `{key}`: {e}"))
}
