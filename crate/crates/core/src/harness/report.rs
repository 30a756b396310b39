//! Per-figure CSV projections of a metrics table.
//!
//! Every figure file holds one line per metrics row, restricted to the
//! columns that figure plots.

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::harness::sweep::MetricRow;

/// Figure file stem and its columns.
pub const FIGURES: [(&str, &[&str]); 7] = [
    ("fig_snr", &["method", "modulation", "n_pilots", "snr_db", "nmse_mean", "nmse_ci95", "ser_mean"]),
    ("fig_screening", &["method", "survivors", "imaginations", "zeta1", "nmse_mean", "nmse_ci95", "ser_mean"]),
    ("fig_imagination", &["method", "zeta1", "survivors", "imaginations", "nmse_mean", "nmse_ci95"]),
    ("fig_init", &["method", "rho", "survivors", "imaginations", "nmse_mean", "nmse_ci95", "steps_mean"]),
    ("fig_steps", &["method", "n_gen", "steps_mean", "early_quit_rate", "nmse_mean", "e_trace", "wall_seconds"]),
    ("fig_pilots", &["method", "n_pilots", "snr_db", "nmse_mean", "nmse_ci95", "ser_mean"]),
    ("fig_guidance", &["method", "zeta1", "zeta2", "zeta3", "nmse_mean", "nmse_ci95", "ser_mean"]),
];

fn field(r: &MetricRow, name: &str) -> String {
    match name {
        "method" => r.method.to_string(),
        "snr_db" => r.snr_db.to_string(),
        "n_pilots" => r.n_pilots.to_string(),
        "modulation" => r.modulation.to_string(),
        "survivors" => r.survivors.to_string(),
        "imaginations" => r.imaginations.to_string(),
        "zeta1" => r.zeta1.to_string(),
        "zeta2" => r.zeta2.to_string(),
        "zeta3" => r.zeta3.to_string(),
        "rho" => r.rho.to_string(),
        "n_gen" => r.n_gen.to_string(),
        "frames" => r.frames.to_string(),
        "nmse_mean" => r.nmse_mean.to_string(),
        "nmse_ci95" => r.nmse_ci95.to_string(),
        "ser_mean" => r.ser_mean.to_string(),
        "steps_mean" => r.steps_mean.to_string(),
        "early_quit_rate" => r.early_quit_rate.to_string(),
        "e_trace" => r.e_trace.clone(),
        "wall_seconds" => r.wall_seconds.to_string(),
        other => unreachable!("unknown column {other}"),
    }
}

/// Writes every figure file into `dir` and returns their paths.
pub fn write_report(rows: &[MetricRow], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir.as_ref())?;
    let mut written = Vec::with_capacity(FIGURES.len());
    for (stem, cols) in FIGURES {
        let path = dir.as_ref().join(format!("{stem}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(cols)?;
        for r in rows {
            w.write_record(cols.iter().map(|c| field(r, c)))?;
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}
