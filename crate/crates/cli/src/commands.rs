//! Subcommand implementations. Each writes its artifacts plus a
//! `run_manifest.json` into the output directory and fails (nonzero exit)
//! unless every output landed and re-reads cleanly.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::json;

use affseg::approx_cv::sigma_sweep;
use affseg::binarization::{binarize_fixed, Aggregator, ThresholdMode, ThresholdPolicy};
use affseg::classifier::{extract_features, SegmenterModel};
use affseg::data_model::{
    load_manifest, read_image, read_mask_stack, read_mask_stack_from_paths, write_mask_stack,
    DatasetManifest, Keypoint, KeypointAnnotation, LabelSpace, MaskStack,
};
use affseg::em_trainer::{run_em, EmOutcome, TrainRecord};
use affseg::evaluation::{evaluate, JaccardReport};
use affseg::initialization::initial_mask;
use affseg::synth::{generate, label_names, write_dataset};

use crate::config::RunConfig;
use crate::report;

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("cannot create {}", path.display()))
}

fn record_stem(index: usize) -> String {
    format!("rec{index:04}")
}

/// Load a dataset manifest and the images it lists.
fn load_records(path: &Path) -> Result<(DatasetManifest, Vec<TrainRecord>)> {
    let manifest = load_manifest(path).with_context(|| format!("manifest {}", path.display()))?;
    let mut records = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let image = read_image(&rec.image)?;
        records.push(TrainRecord {
            image,
            keypoints: rec.keypoints.clone(),
        });
    }
    Ok((manifest, records))
}

/// Ground-truth stacks for every record; errors when any record lacks them.
fn load_gt(manifest: &DatasetManifest) -> Result<Vec<MaskStack>> {
    let mut gts = Vec::with_capacity(manifest.records.len());
    for (i, rec) in manifest.records.iter().enumerate() {
        let paths = rec
            .gt_masks
            .as_ref()
            .with_context(|| format!("record {i} has no ground-truth masks"))?;
        gts.push(read_mask_stack_from_paths(paths)?);
    }
    Ok(gts)
}

fn write_mask_set(dir: &Path, masks: &[MaskStack]) -> Result<()> {
    ensure_dir(dir)?;
    for (i, mask) in masks.iter().enumerate() {
        write_mask_stack(mask, dir, &record_stem(i))?;
    }
    Ok(())
}

/// Re-read one plane per record as a write sanity check.
fn verify_mask_set(dir: &Path, masks: &[MaskStack]) -> Result<()> {
    for (i, mask) in masks.iter().enumerate() {
        let back = read_mask_stack(dir, &record_stem(i), mask.classes())
            .with_context(|| format!("verifying masks in {}", dir.display()))?;
        if back != *mask {
            bail!("mask stack {} re-read differently", dir.join(record_stem(i)).display());
        }
    }
    Ok(())
}

/// Generate the train/test halves of a synthetic dataset.
pub fn cmd_synth_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let labels = LabelSpace::new(label_names(cfg.synth.class_count))?;
    let total = cfg.train_count + cfg.test_count;
    if total == 0 {
        bail!("train_count + test_count must be positive");
    }
    let mut all = generate(&cfg.synth, total)?;
    let test = all.split_off(cfg.train_count);

    ensure_dir(out)?;
    let train_manifest = write_dataset(&all, &labels, &out.join("train"))?;
    let test_manifest = write_dataset(&test, &labels, &out.join("test"))?;

    load_manifest(&train_manifest)?;
    load_manifest(&test_manifest)?;
    report::write_run_manifest(
        out,
        "synth-gen",
        cfg,
        json!({ "train_count": cfg.train_count, "test_count": cfg.test_count }),
        &["train/manifest.json", "test/manifest.json"],
    )?;
    log::info!(
        "wrote {} train and {} test records under {}",
        cfg.train_count,
        cfg.test_count,
        out.display()
    );
    Ok(())
}

/// Stamp keypoint disks only; no training.
pub fn cmd_init(cfg: &RunConfig, manifest_path: &Path, out: &Path) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    let classes = manifest.labels.count();
    let masks: Vec<MaskStack> = manifest
        .records
        .iter()
        .map(|rec| initial_mask(rec.width, rec.height, classes, &rec.keypoints, &cfg.em.init))
        .collect();

    ensure_dir(out)?;
    let mask_dir = out.join("init_masks");
    write_mask_set(&mask_dir, &masks)?;
    verify_mask_set(&mask_dir, &masks)?;
    report::write_run_manifest(
        out,
        "init",
        cfg,
        json!({
            "manifest": manifest_path,
            "sigma_fraction": cfg.em.init.sigma_fraction,
        }),
        &["init_masks/"],
    )?;
    log::info!("stamped {} initial mask stacks", masks.len());
    Ok(())
}

/// Write every checkpoint of a finished EM run.
fn write_em_artifacts(out: &Path, outcome: &EmOutcome, labels: &LabelSpace) -> Result<()> {
    write_mask_set(&out.join("init_masks"), &outcome.initial_masks)?;
    for (it, snap) in outcome.iterations.iter().enumerate() {
        let iter_dir = out.join(format!("iter{it}"));
        ensure_dir(&iter_dir)?;
        for (fold, model) in snap.fold_models.iter().enumerate() {
            model.save(&iter_dir.join(format!("fold{fold}.wsm")))?;
        }
        write_mask_set(&iter_dir.join("masks"), &snap.masks)?;
    }
    let model_path = out.join("final_model.wsm");
    outcome.model.save(&model_path)?;
    write_mask_set(&out.join("final_masks"), &outcome.pseudo_masks)?;
    report::write_thresholds_table(&out.join("thresholds.tsv"), &outcome.log, labels)?;
    report::write_trainings_table(&out.join("trainings.tsv"), &outcome.log)?;

    let back = SegmenterModel::load(&model_path)?;
    if back != outcome.model {
        bail!("final model re-read differently from {}", model_path.display());
    }
    verify_mask_set(&out.join("final_masks"), &outcome.pseudo_masks)?;
    Ok(())
}

/// Full EM pipeline on a manifest's keypoints.
pub fn cmd_train(cfg: &RunConfig, manifest_path: &Path, out: &Path) -> Result<()> {
    let (manifest, records) = load_records(manifest_path)?;
    let outcome = run_em(&records, &manifest.labels, &cfg.em, &cfg.features)?;

    ensure_dir(out)?;
    write_em_artifacts(out, &outcome, &manifest.labels)?;
    report::write_run_manifest(
        out,
        "train",
        cfg,
        json!({ "manifest": manifest_path }),
        &[
            "final_model.wsm",
            "final_masks/",
            "init_masks/",
            "thresholds.tsv",
            "trainings.tsv",
        ],
    )?;
    log::info!(
        "trained on {} records, {} EM iterations",
        records.len(),
        outcome.iterations.len()
    );
    Ok(())
}

/// Disk-radius model selection from keypoints alone.
pub fn cmd_sigma_sweep(cfg: &RunConfig, manifest_path: &Path, grid: &[f64], out: &Path) -> Result<()> {
    if grid.is_empty() {
        bail!("empty sigma grid");
    }
    let (manifest, records) = load_records(manifest_path)?;
    let sweep = sigma_sweep(&records, &manifest.labels, &cfg.em, &cfg.features, grid)?;

    let mut table = String::from("sigma_fraction");
    for name in manifest.labels.names() {
        table.push_str(&format!("\t{name}"));
    }
    table.push_str("\tscore\texcluded\n");
    for row in &sweep.rows {
        table.push_str(&format!("{:.6}", row.sigma_fraction));
        for value in &row.per_class {
            match value {
                Some(v) => table.push_str(&format!("\t{v:.6}")),
                None => table.push_str("\t-"),
            }
        }
        match row.score {
            Some(s) => table.push_str(&format!("\t{s:.6}")),
            None => table.push_str("\t-"),
        }
        table.push_str(&format!("\t{}\n", row.excluded.len()));
    }
    match sweep.best_row() {
        Some(row) => table.push_str(&format!("winner\t{:.6}\n", row.sigma_fraction)),
        None => table.push_str("winner\t-\n"),
    }

    ensure_dir(out)?;
    let table_path = out.join("sigma_sweep.tsv");
    fs::write(&table_path, &table).with_context(|| format!("cannot write {}", table_path.display()))?;
    if let Some(row) = sweep.best_row() {
        row.outcome.model.save(&out.join("best_model.wsm"))?;
    }
    report::write_run_manifest(
        out,
        "sigma-sweep",
        cfg,
        json!({ "manifest": manifest_path, "grid": grid }),
        &["sigma_sweep.tsv"],
    )?;
    log::info!("swept {} radii on {} records", grid.len(), records.len());
    Ok(())
}

/// Predict with a fixed 0.5 cut and score against ground truth.
fn score_model(
    model: &SegmenterModel,
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    records: &[TrainRecord],
    gts: &[MaskStack],
) -> Result<JaccardReport> {
    let preds: Vec<MaskStack> = records
        .iter()
        .map(|rec| binarize_fixed(&model.predict(&extract_features(&rec.image, &cfg.features)), 0.5))
        .collect();
    let gt_refs: Vec<&MaskStack> = gts.iter().collect();
    let pred_refs: Vec<&MaskStack> = preds.iter().collect();
    Ok(evaluate(&gt_refs, &pred_refs, &manifest.labels)?)
}

/// Jaccard table of a saved model on a manifest with ground truth.
pub fn cmd_eval(cfg: &RunConfig, manifest_path: &Path, model_path: &Path, out: &Path) -> Result<()> {
    let (manifest, records) = load_records(manifest_path)?;
    let gts = load_gt(&manifest)?;
    let model = SegmenterModel::load(model_path)?;
    if model.label_count() != manifest.labels.count() {
        bail!(
            "model has {} classes, manifest {}",
            model.label_count(),
            manifest.labels.count()
        );
    }
    let report = score_model(&model, cfg, &manifest, &records, &gts)?;

    ensure_dir(out)?;
    report::write_jaccard_table(&out.join("jaccard.tsv"), &report)?;
    report::write_run_manifest(
        out,
        "eval",
        cfg,
        json!({ "manifest": manifest_path, "model": model_path }),
        &["jaccard.tsv"],
    )?;
    log::info!("mean Jaccard {:.6} over {} records", report.mean, records.len());
    Ok(())
}

/// Keep the first `k` keypoints of each class, in stored order.
fn truncate_keypoints(annotation: &KeypointAnnotation, k: usize) -> KeypointAnnotation {
    let mut kept: Vec<Keypoint> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for kp in annotation.entries() {
        if kp.class >= counts.len() {
            counts.resize(kp.class + 1, 0);
        }
        if counts[kp.class] < k {
            counts[kp.class] += 1;
            kept.push(*kp);
        }
    }
    KeypointAnnotation::new(kept)
}

/// The ablation grid: threshold source, clamp, aggregator, keypoint budget.
pub fn cmd_ablate(
    cfg: &RunConfig,
    manifest_path: &Path,
    eval_manifest_path: Option<&Path>,
    keypoint_counts: &[usize],
    out: &Path,
) -> Result<()> {
    if keypoint_counts.is_empty() {
        bail!("empty keypoint count list");
    }
    if keypoint_counts.contains(&0) {
        bail!("keypoint counts must be positive");
    }
    let (manifest, records) = load_records(manifest_path)?;
    let (eval_manifest, eval_records, eval_gts) = match eval_manifest_path {
        Some(path) => {
            let (m, r) = load_records(path)?;
            let gts = load_gt(&m)?;
            (m, r, gts)
        }
        None => {
            let gts = load_gt(&manifest)?;
            (manifest.clone(), records.clone(), gts)
        }
    };
    if eval_manifest.labels != manifest.labels {
        bail!("train and eval manifests disagree on labels");
    }

    let mut table = String::from("mode\tclamp_max\taggregator\tkeypoints\tBck");
    for name in manifest.labels.names() {
        table.push_str(&format!("\t{name}"));
    }
    table.push_str("\tMean\n");

    for &mode in &[ThresholdMode::Adaptive, ThresholdMode::ClassAverage] {
        for &clamp_max in &[0.5, 1.0] {
            for &aggregator in &[Aggregator::Mean, Aggregator::Median] {
                for &k in keypoint_counts {
                    let rows: Vec<TrainRecord> = records
                        .iter()
                        .map(|rec| TrainRecord {
                            image: rec.image.clone(),
                            keypoints: truncate_keypoints(&rec.keypoints, k),
                        })
                        .collect();
                    let mut em = cfg.em.clone();
                    em.policy = ThresholdPolicy {
                        aggregator,
                        clamp_max,
                        mode,
                        force_keypoints_positive: cfg.em.policy.force_keypoints_positive,
                    };
                    let outcome = run_em(&rows, &manifest.labels, &em, &cfg.features)?;
                    let report =
                        score_model(&outcome.model, cfg, &eval_manifest, &eval_records, &eval_gts)?;

                    let mode_name = match mode {
                        ThresholdMode::Adaptive => "adaptive",
                        ThresholdMode::ClassAverage => "class_average",
                        ThresholdMode::Fixed(_) => unreachable!(),
                    };
                    let agg_name = match aggregator {
                        Aggregator::Mean => "mean",
                        Aggregator::Median => "median",
                    };
                    table.push_str(&format!("{mode_name}\t{clamp_max:.1}\t{agg_name}\t{k}"));
                    for (_, value) in &report.entries {
                        table.push_str(&format!("\t{value:.6}"));
                    }
                    table.push_str(&format!("\t{:.6}\n", report.mean));
                    log::info!(
                        "{mode_name} clamp {clamp_max:.1} {agg_name} k={k}: mean {:.6}",
                        report.mean
                    );
                }
            }
        }
    }

    ensure_dir(out)?;
    let table_path = out.join("ablation.tsv");
    fs::write(&table_path, &table).with_context(|| format!("cannot write {}", table_path.display()))?;
    report::write_run_manifest(
        out,
        "ablate",
        cfg,
        json!({
            "manifest": manifest_path,
            "eval_manifest": eval_manifest_path,
            "keypoint_counts": keypoint_counts,
        }),
        &["ablation.tsv"],
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_keeps_first_keypoints_per_class() {
        let kp = |class, x| Keypoint { class, x, y: 0 };
        let ann = KeypointAnnotation::new(vec![kp(0, 1), kp(1, 2), kp(0, 3), kp(0, 4), kp(1, 5)]);
        let cut = truncate_keypoints(&ann, 2);
        let xs: Vec<(usize, usize)> = cut.entries().iter().map(|k| (k.class, k.x)).collect();
        assert_eq!(xs, [(0, 1), (1, 2), (0, 3), (1, 5)]);
    }

    #[test]
    fn truncation_to_available_count_is_identity() {
        let kp = |class, x| Keypoint { class, x, y: 0 };
        let ann = KeypointAnnotation::new(vec![kp(0, 1), kp(1, 2)]);
        assert_eq!(truncate_keypoints(&ann, 3).entries(), ann.entries());
    }
}
