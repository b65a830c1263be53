use std::path::Path;

use nsdde::coeffs::{check_structure, Counterexample, SystemSpec};
use nsdde::em::{EmError, ModeSource, Simulator};
use nsdde::markov::q_norm_inf;
use nsdde::montecarlo::{
    estimate_second_moment, fit_decay_rate, DecayFit, MomentSeries, MonteCarloError,
};
use nsdde::presets;
use nsdde::stability::{
    derive_drift_growth, falsify_certificate, solve_decay_rate, solve_step_size,
    stability_condition, StabilityCertificate, StepSizeInputs, StepSizeReport, StepVariant,
};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::output::{csv_writer, fmt_f64, prepare_dir, write_json, write_log_rate, write_moments};

/// Flags shared by all subcommands.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<std::path::PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub variant: Option<StepVariant>,
}

fn out_dir(cfg: &ExperimentConfig, ov: &Overrides) -> std::path::PathBuf {
    ov.out
        .clone()
        .unwrap_or_else(|| cfg.output.directory.clone())
}

fn em_error(e: EmError) -> CliError {
    match e {
        EmError::StepSize { .. }
        | EmError::Horizon
        | EmError::Mode { .. }
        | EmError::Initial { .. } => CliError::Config(e.to_string()),
        _ => CliError::Math(e.to_string()),
    }
}

fn mc_error(e: MonteCarloError) -> CliError {
    match e {
        MonteCarloError::Em(e) => em_error(e),
        MonteCarloError::TooFewPaths(_) => CliError::Config(format!("at `simulation.paths`: {e}")),
        other => CliError::Math(other.to_string()),
    }
}

#[derive(Debug, Serialize)]
struct CheckEntry {
    property: nsdde::coeffs::Property,
    /// One-based.
    mode: Option<usize>,
    passed: bool,
    counterexample: Option<Counterexample>,
}

#[derive(Debug, Serialize)]
struct ViolationEntry {
    sample: u64,
    x: Vec<f64>,
    y: Vec<f64>,
    mode: usize,
    lhs: f64,
    rhs: f64,
}

#[derive(Debug, Serialize)]
struct FalsifierEntry {
    samples: u64,
    seed: u64,
    violation: Option<ViolationEntry>,
}

#[derive(Debug, Serialize)]
#[serde(untagged)]
enum StepOutcome {
    Found(StepSizeReport),
    Failed { error: String },
}

#[derive(Debug, Serialize)]
struct StepSection {
    recommended: StepVariant,
    target_rate: f64,
    q_norm: f64,
    drift_growth: f64,
    drift_growth_source: &'static str,
    conservative: StepOutcome,
    verbatim: StepOutcome,
}

#[derive(Debug, Serialize)]
pub struct AnalysisReport {
    system: String,
    structure_passed: bool,
    structure: Vec<CheckEntry>,
    p_max: f64,
    p_min: f64,
    r_p: f64,
    condition: f64,
    condition_holds: bool,
    falsifier: FalsifierEntry,
    /// Condition holds and the falsifier found nothing.
    pub stable: bool,
    pub lambda0: Option<f64>,
    rate_residual: Option<f64>,
    step_size: Option<StepSection>,
    notes: Vec<String>,
}

pub fn analyze(cfg: &ExperimentConfig, ov: &Overrides) -> Result<AnalysisReport, CliError> {
    let spec = cfg.build_system()?;
    let block = cfg.certificate()?;
    let cert = StabilityCertificate::for_system(
        &spec,
        block.weights.clone(),
        block.c0,
        block.c1,
        block.c2,
    )
    .map_err(|e| CliError::Config(format!("in `certificate`: {e}")))?;
    if !(block.rate_fraction > 0.0 && block.rate_fraction < 1.0) {
        return Err(CliError::Config(
            "at `certificate.rate_fraction`: must lie in (0, 1)".into(),
        ));
    }
    let mut notes = Vec::new();

    let horizon = cfg
        .simulation
        .as_ref()
        .map(|s| s.horizon_time)
        .unwrap_or(presets::EXAMPLE_HORIZON);
    let seed = ov.seed.unwrap_or(block.falsify_seed);
    let structure = check_structure(&spec, block.structure_samples, seed, horizon);

    let condition = stability_condition(&cert);
    let violation = falsify_certificate(&spec, &cert, block.falsify_samples, seed);
    let condition_holds = condition < 0.0;
    let stable = condition_holds && violation.is_none();
    if violation.is_some() {
        notes.push(
            "the certificate inequality fails at a sampled point; no rate is certified".into(),
        );
    }

    let (mut lambda0, mut rate_residual, mut step_size) = (None, None, None);
    if stable {
        let rate = solve_decay_rate(&cert).map_err(|e| CliError::Math(e.to_string()))?;
        lambda0 = rate.lambda0;
        rate_residual = rate.residual;
        let derived = derive_drift_growth(&spec);
        let drift = match (block.drift_growth, derived) {
            (Some(c), _) => Some((c, "config")),
            (None, Ok(c)) => Some((c, "derived")),
            (None, Err(e)) => {
                notes.push(format!(
                    "step size skipped: {e}; set `certificate.drift_growth`"
                ));
                None
            }
        };
        if let (Some(l0), Some((c0, source))) = (lambda0, drift) {
            let inputs = StepSizeInputs {
                cert: cert.clone(),
                q_norm: q_norm_inf(&spec.generator),
                drift_growth: c0,
            };
            let target = block.rate_fraction * l0;
            let run = |variant| match solve_step_size(&inputs, target, variant, block.combinator) {
                Ok(r) => StepOutcome::Found(r),
                Err(e) => StepOutcome::Failed {
                    error: e.to_string(),
                },
            };
            step_size = Some(StepSection {
                recommended: ov.variant.unwrap_or(StepVariant::Conservative),
                target_rate: target,
                q_norm: inputs.q_norm,
                drift_growth: c0,
                drift_growth_source: source,
                conservative: run(StepVariant::Conservative),
                verbatim: run(StepVariant::Verbatim),
            });
        }
    }

    let report = AnalysisReport {
        system: cfg.system_label(),
        structure_passed: structure.all_passed(),
        structure: structure
            .checks
            .into_iter()
            .map(|c| CheckEntry {
                property: c.property,
                mode: c.mode.map(|m| m + 1),
                passed: c.passed,
                counterexample: c.counterexample,
            })
            .collect(),
        p_max: cert.p_max(),
        p_min: cert.p_min(),
        r_p: cert.r_p(),
        condition,
        condition_holds,
        falsifier: FalsifierEntry {
            samples: block.falsify_samples,
            seed,
            violation: violation.map(|v| ViolationEntry {
                sample: v.sample,
                x: v.x,
                y: v.y,
                mode: v.mode + 1,
                lhs: v.lhs,
                rhs: v.rhs,
            }),
        },
        stable,
        lambda0,
        rate_residual,
        step_size,
        notes,
    };

    let dir = out_dir(cfg, ov);
    prepare_dir(&dir)?;
    write_json(&dir.join(&cfg.output.report), &report)?;
    print_analysis(&report);
    Ok(report)
}

fn print_analysis(r: &AnalysisReport) {
    println!("system: {}", r.system);
    println!("structural checks passed: {}", r.structure_passed);
    println!(
        "condition: {} ({})",
        fmt_f64(r.condition),
        if r.condition_holds { "holds" } else { "fails" }
    );
    match &r.falsifier.violation {
        None => println!("falsifier: no violation in {} samples", r.falsifier.samples),
        Some(v) => println!(
            "falsifier: violation at x = {:?}, y = {:?}, mode {}: {} > {}",
            v.x, v.y, v.mode, v.lhs, v.rhs
        ),
    }
    println!("stable: {}", r.stable);
    if let Some(l) = r.lambda0 {
        println!("lambda0: {}", fmt_f64(l));
    }
    if let Some(s) = &r.step_size {
        let show = |o: &StepOutcome| match o {
            StepOutcome::Found(rep) => fmt_f64(rep.eps0),
            StepOutcome::Failed { error } => format!("none ({error})"),
        };
        println!("target rate: {}", fmt_f64(s.target_rate));
        println!("eps0 conservative: {}", show(&s.conservative));
        println!("eps0 verbatim: {}", show(&s.verbatim));
    }
    for n in &r.notes {
        println!("note: {n}");
    }
}

/// One CSV per path with columns `n,t,mode,Y_1..Y_d`. Returns the files
/// written.
pub fn simulate(
    cfg: &ExperimentConfig,
    ov: &Overrides,
) -> Result<Vec<std::path::PathBuf>, CliError> {
    let spec = cfg.build_system()?;
    let sim = cfg.simulation()?;
    let em = sim.em_config(&spec, ov.seed)?;
    let simulator = Simulator::new(&spec, &em).map_err(em_error)?;
    let dir = out_dir(cfg, ov);
    prepare_dir(&dir)?;
    let mut header = vec!["n".to_string(), "t".into(), "mode".into()];
    header.extend((1..=spec.dim).map(|k| format!("Y_{k}")));

    let mut files = Vec::with_capacity(sim.paths);
    for j in 0..sim.paths {
        let path = dir.join(format!("{}{j}.csv", cfg.output.path_prefix));
        let mut w = csv_writer(&path)?;
        w.write_record(&header)?;
        let mut io_err = None;
        let run = simulator.drive(
            j as u64,
            ModeSource::Chain,
            |n, y, mode| {
                if io_err.is_some() {
                    return;
                }
                let mut row = Vec::with_capacity(3 + y.len());
                row.push(n.to_string());
                row.push(fmt_f64(n as f64 * em.eps()));
                row.push((mode + 1).to_string());
                row.extend(y.iter().map(|&v| fmt_f64(v)));
                if let Err(e) = w.write_record(&row) {
                    io_err = Some(e);
                }
            },
            |_, _| {},
        );
        if let Some(e) = io_err {
            return Err(e.into());
        }
        w.flush()?;
        run.map_err(|e| CliError::Math(format!("path {j}: {}", em_error(e))))?;
        files.push(path);
    }
    println!("wrote {} path files to {}", files.len(), dir.display());
    Ok(files)
}

#[derive(Debug, Serialize)]
struct FitSummary {
    system: String,
    eps: f64,
    seed: u64,
    paths: usize,
    exploded: usize,
    certifiable: bool,
    window_fraction: f64,
    fit: Option<FitEntry>,
    fit_error: Option<String>,
}

#[derive(Debug, Serialize)]
struct FitEntry {
    n_lo: usize,
    n_hi: usize,
    t_lo: f64,
    t_hi: f64,
    points: usize,
    slope: f64,
    intercept: f64,
    residual_rms: f64,
}

fn fit_summary(
    system: String,
    series: &MomentSeries,
    window_fraction: f64,
) -> (FitSummary, Option<DecayFit>) {
    let fit = fit_decay_rate(series, window_fraction);
    let summary = FitSummary {
        system,
        eps: series.eps,
        seed: series.seed,
        paths: series.paths,
        exploded: series.exploded,
        certifiable: series.certifiable(),
        window_fraction,
        fit: fit.as_ref().ok().map(|f| FitEntry {
            n_lo: f.n_lo,
            n_hi: f.n_hi,
            t_lo: series.times[f.n_lo],
            t_hi: series.times[f.n_hi],
            points: f.points,
            slope: f.slope,
            intercept: f.intercept,
            residual_rms: f.residual_rms,
        }),
        fit_error: fit.as_ref().err().map(|e| e.to_string()),
    };
    (summary, fit.ok())
}

pub fn estimate(cfg: &ExperimentConfig, ov: &Overrides) -> Result<MomentSeries, CliError> {
    let spec = cfg.build_system()?;
    let sim = cfg.simulation()?;
    let em = sim.em_config(&spec, ov.seed)?;
    let series = estimate_second_moment(&spec, &em, sim.paths, ov.threads).map_err(mc_error)?;
    let dir = out_dir(cfg, ov);
    prepare_dir(&dir)?;
    write_moments(&dir.join(&cfg.output.moments), &series)?;
    let (summary, fit) = fit_summary(cfg.system_label(), &series, sim.window_fraction);
    write_json(&dir.join(&cfg.output.fit), &summary)?;
    report_series(
        &cfg.system_label(),
        &series,
        fit.as_ref(),
        summary.fit_error.as_deref(),
    );
    Ok(series)
}

fn report_series(
    label: &str,
    series: &MomentSeries,
    fit: Option<&DecayFit>,
    fit_error: Option<&str>,
) {
    let last = series.len() - 1;
    println!(
        "{label}: mean_sq {} -> {} over t in [0, {}], {} paths, {} exploded",
        fmt_f64(series.mean_sq[0]),
        fmt_f64(series.mean_sq[last]),
        fmt_f64(series.times[last]),
        series.paths,
        series.exploded
    );
    match (fit, fit_error) {
        (Some(f), _) => println!("{label}: fitted slope {}", fmt_f64(f.slope)),
        (None, Some(e)) => println!("{label}: no fit ({e})"),
        _ => {}
    }
}

/// Moment series of the example's subsystems and coupled system.
pub fn reproduce_example(dir: &Path, ov: &Overrides) -> Result<(), CliError> {
    prepare_dir(dir)?;
    let seed = ov.seed.unwrap_or(presets::EXAMPLE_SEED);
    let mut summaries = Vec::new();
    for (k, (id, i0)) in presets::EXAMPLE_RUNS.iter().enumerate() {
        let spec: SystemSpec =
            nsdde::coeffs::builtin_system(id).map_err(|e| CliError::Config(e.to_string()))?;
        let xi = spec
            .parse_initial(&[presets::EXAMPLE_INITIAL])
            .map_err(|e| CliError::Config(e.to_string()))?;
        let em = nsdde::em::EmConfig::new(
            &spec,
            presets::EXAMPLE_EPS,
            presets::example_horizon_steps(presets::EXAMPLE_EPS),
            seed,
            *i0,
            xi,
        )
        .map_err(em_error)?;
        let series = estimate_second_moment(&spec, &em, presets::EXAMPLE_PATHS, ov.threads)
            .map_err(mc_error)?;
        write_moments(&dir.join(format!("figure{}.csv", k + 1)), &series)?;
        if *id == "coupled-yy1" {
            write_log_rate(&dir.join("figure4.csv"), &series)?;
        }
        let (summary, fit) = fit_summary(
            id.to_string(),
            &series,
            nsdde::montecarlo::DEFAULT_WINDOW_FRACTION,
        );
        report_series(id, &series, fit.as_ref(), summary.fit_error.as_deref());
        summaries.push(summary);
    }
    write_json(&dir.join("example_fits.json"), &summaries)?;
    println!("wrote figure1.csv .. figure4.csv to {}", dir.display());
    Ok(())
}
