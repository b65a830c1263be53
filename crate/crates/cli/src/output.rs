//! CSV and JSON writers.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use nsdde::montecarlo::{log_rate_series, MomentSeries};
use serde::Serialize;

use crate::error::CliError;

/// Shortest representation that parses back to the same double; empty for
/// NaN and infinities.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:?}")
    } else {
        String::new()
    }
}

pub fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

pub fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    let file = File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Io(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Columns `n,t,mean_sq,stderr,log_rate`; `log_rate` is empty at `n = 0`
/// and wherever the mean is not positive.
pub fn write_moments(path: &Path, series: &MomentSeries) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    w.write_record(["n", "t", "mean_sq", "stderr", "log_rate"])?;
    let rates = log_rate_series(series);
    for n in 0..series.len() {
        let rate = if n == 0 { None } else { rates[n - 1].value };
        w.write_record([
            n.to_string(),
            fmt_f64(series.times[n]),
            fmt_f64(series.mean_sq[n]),
            fmt_f64(series.stderr[n]),
            rate.map(fmt_f64).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `n,t,log_rate` for `n ≥ 1`.
pub fn write_log_rate(path: &Path, series: &MomentSeries) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    w.write_record(["n", "t", "log_rate"])?;
    for p in log_rate_series(series) {
        w.write_record([
            p.n.to_string(),
            fmt_f64(p.t),
            p.value.map(fmt_f64).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
