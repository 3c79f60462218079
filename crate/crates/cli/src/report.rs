//! Output artifacts shared by the subcommands: tab-separated tables and the
//! per-run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::json;

use affseg::data_model::LabelSpace;
use affseg::em_trainer::EmRunLog;
use affseg::evaluation::JaccardReport;

use crate::config::RunConfig;

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// `run_manifest.json`: enough to replay the command that produced a
/// directory. `inputs` holds command-specific arguments such as paths or
/// grids.
pub fn write_run_manifest(
    out_dir: &Path,
    command: &str,
    cfg: &RunConfig,
    inputs: serde_json::Value,
    outputs: &[&str],
) -> Result<PathBuf> {
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "config": cfg,
        "inputs": inputs,
        "outputs": outputs,
    });
    let path = out_dir.join("run_manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_text(&path, &text)?;
    Ok(path)
}

/// Jaccard table: background first, one row per class, `Mean` last.
pub fn jaccard_table(report: &JaccardReport) -> String {
    let mut out = String::from("label\tjaccard\n");
    for (name, value) in &report.entries {
        out.push_str(&format!("{name}\t{value:.6}\n"));
    }
    out.push_str(&format!("Mean\t{:.6}\n", report.mean));
    out
}

pub fn write_jaccard_table(path: &Path, report: &JaccardReport) -> Result<()> {
    write_text(path, &jaccard_table(report))
}

/// Threshold log: one row per applied E-step threshold.
pub fn thresholds_table(log: &EmRunLog, labels: &LabelSpace) -> String {
    let mut out = String::from("iteration\trecord\tclass\traw\tapplied\n");
    for ev in &log.thresholds {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\n",
            ev.iteration,
            ev.record,
            labels.name(ev.class),
            ev.raw,
            ev.applied
        ));
    }
    out
}

pub fn write_thresholds_table(path: &Path, log: &EmRunLog, labels: &LabelSpace) -> Result<()> {
    write_text(path, &thresholds_table(log, labels))
}

/// Training log: one row per model fit with its loss trace endpoints.
pub fn trainings_table(log: &EmRunLog) -> String {
    let mut out = String::from("iteration\theld_out_fold\trecords\tinitial_loss\tfinal_loss\n");
    for ev in &log.trainings {
        let iter = ev
            .iteration
            .map_or_else(|| "final".to_string(), |i| i.to_string());
        let fold = ev
            .held_out_fold
            .map_or_else(|| "-".to_string(), |f| f.to_string());
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\n",
            iter,
            fold,
            ev.record_indices.len(),
            ev.initial_loss,
            ev.final_loss
        ));
    }
    out
}

pub fn write_trainings_table(path: &Path, log: &EmRunLog) -> Result<()> {
    write_text(path, &trainings_table(log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jaccard_table_rows_are_ordered_and_fixed_precision() {
        let report = JaccardReport {
            entries: vec![("Bck".to_string(), 0.5), ("grasp".to_string(), 0.25)],
            mean: 0.375,
        };
        let table = jaccard_table(&report);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(
            lines,
            [
                "label\tjaccard",
                "Bck\t0.500000",
                "grasp\t0.250000",
                "Mean\t0.375000"
            ]
        );
    }
}
