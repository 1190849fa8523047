use std::fs;
use std::path::Path;
use std::time::Duration;

use serde_json::json;

use crate::commands::Report;
use crate::config::ExperimentConfig;
use crate::{CliError, Format};

/// Writes `<out>/<name>.csv` and its `<name>.json` metadata sidecar.
///
/// The CSV depends only on the configuration; the sidecar also records
/// wall time and so differs between runs.
pub fn write_files(
    report: &Report,
    out: &Path,
    cfg: &ExperimentConfig,
    wall: Duration,
) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    fs::write(out.join(format!("{}.csv", report.name)), &report.csv)?;
    let meta = json!({
        "command": report.name,
        "seed": cfg.seed(),
        "version": env!("CARGO_PKG_VERSION"),
        "wall_time_secs": wall.as_secs_f64(),
        "config": cfg,
        "result": report.summary,
    });
    let mut text = serde_json::to_string_pretty(&meta).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    fs::write(out.join(format!("{}.json", report.name)), text)?;
    Ok(())
}

pub fn render(report: &Report, format: Format) -> Result<String, CliError> {
    Ok(match format {
        Format::Text => report.text.clone(),
        Format::Json => {
            serde_json::to_string_pretty(&report.summary)
                .map_err(|e| CliError::Io(e.to_string()))?
                + "\n"
        }
        Format::Csv => String::from_utf8_lossy(&report.csv).into_owned(),
    })
}
