//! The weakly supervised training loop.
//!
//! Records are split into three folds. Each EM iteration trains one model
//! per fold pair and lets it predict the held-out fold, whose pseudo-masks
//! are replaced by adaptively thresholded predictions. No image is ever
//! predicted by a model that saw it during training; approx-CV statistics
//! rely on that. After the last iteration a final model is trained on all
//! records.
//!
//! All randomness flows from [`EmConfig::seed`] through named streams, so a
//! rerun with the same inputs reproduces models and masks bit for bit. The
//! seed inside [`EmConfig::train`] is ignored; each training event gets a
//! derived one.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binarization::{
    binarize, class_average_thresholds, image_thresholds, AdaptiveThreshold, ThresholdMode,
    ThresholdPolicy,
};
use crate::classifier::{
    extract_features, train_with_report, FeatureConfig, FeatureMatrix, SegmenterModel,
    TrainConfig, TrainError,
};
use crate::data_model::{ImageTensor, KeypointAnnotation, LabelSpace, MaskStack, ProbMapStack};
use crate::initialization::{initial_mask, InitConfig};
use crate::seed::{derive_seed, stream_rng};
use rand::seq::SliceRandom;

/// One training image with its weak labels. Ground truth never travels
/// through this type; evaluation code receives it separately.
#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub image: ImageTensor,
    pub keypoints: KeypointAnnotation,
}

/// Settings of one EM run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub em_iterations: usize,
    pub init: InitConfig,
    pub policy: ThresholdPolicy,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            em_iterations: 2,
            init: InitConfig::default(),
            policy: ThresholdPolicy::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

pub const FOLDS: usize = 3;

/// Assignment of records to the three folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    assignment: Vec<u8>,
}

impl FoldSplit {
    pub fn fold_of(&self, record: usize) -> usize {
        usize::from(self.assignment[record])
    }

    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&r| self.fold_of(r) == fold)
            .collect()
    }

    pub fn complement(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&r| self.fold_of(r) != fold)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum EmError {
    #[error("need at least {FOLDS} records for the fold split, got {0}")]
    TooFewRecords(usize),
    #[error("record {index}: {detail}")]
    BadRecord { index: usize, detail: String },
    #[error("no record carries any keypoint")]
    NoKeypoints,
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Random even partition of `n` records into three folds; sizes differ by at
/// most one. Deterministic in `seed`.
pub fn split_three_folds(n: usize, seed: u64) -> Result<FoldSplit, EmError> {
    if n < FOLDS {
        return Err(EmError::TooFewRecords(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, "fold_split"));
    let mut assignment = vec![0u8; n];
    for (i, &record) in order.iter().enumerate() {
        assignment[record] = (i % FOLDS) as u8;
    }
    Ok(FoldSplit { assignment })
}

/// One model fit, for the run log.
#[derive(Debug, Clone)]
pub struct TrainingEvent {
    /// `None` marks the final full-set training.
    pub iteration: Option<usize>,
    pub held_out_fold: Option<usize>,
    pub record_indices: Vec<usize>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// One applied E-step threshold, for the run log.
#[derive(Debug, Clone, Copy)]
pub struct ThresholdEvent {
    pub iteration: usize,
    pub record: usize,
    pub class: usize,
    /// Aggregator output before clamping or averaging.
    pub raw: f64,
    /// Threshold the plane was actually cut at.
    pub applied: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EmRunLog {
    pub trainings: Vec<TrainingEvent>,
    pub thresholds: Vec<ThresholdEvent>,
}

/// State captured after each EM iteration.
#[derive(Debug, Clone)]
pub struct IterationSnapshot {
    pub fold_models: Vec<SegmenterModel>,
    /// All pseudo-masks after this iteration's E-steps.
    pub masks: Vec<MaskStack>,
}

/// Everything produced by one EM run.
#[derive(Debug, Clone)]
pub struct EmOutcome {
    pub model: SegmenterModel,
    pub pseudo_masks: Vec<MaskStack>,
    /// Class probabilities from the last E-step; record `r` was predicted by
    /// the model that held fold `split.fold_of(r)` out. Empty when
    /// `em_iterations` is zero.
    pub held_out_probs: Vec<ProbMapStack>,
    pub initial_masks: Vec<MaskStack>,
    pub split: FoldSplit,
    pub iterations: Vec<IterationSnapshot>,
    pub log: EmRunLog,
}

fn validate_records(
    records: &[TrainRecord],
    labels: &LabelSpace,
) -> Result<(), EmError> {
    if records.len() < FOLDS {
        return Err(EmError::TooFewRecords(records.len()));
    }
    for (index, rec) in records.iter().enumerate() {
        rec.keypoints
            .validate(rec.image.width(), rec.image.height(), labels.count())
            .map_err(|detail| EmError::BadRecord { index, detail })?;
    }
    if records.iter().all(|r| r.keypoints.is_empty()) {
        return Err(EmError::NoKeypoints);
    }
    Ok(())
}

fn train_subset(
    features: &[FeatureMatrix],
    masks: &[MaskStack],
    indices: &[usize],
    label_count: usize,
    cfg: &TrainConfig,
) -> Result<(SegmenterModel, f64, f64), TrainError> {
    let f: Vec<&FeatureMatrix> = indices.iter().map(|&r| &features[r]).collect();
    let t: Vec<&MaskStack> = indices.iter().map(|&r| &masks[r]).collect();
    let (model, report) = train_with_report(&f, &t, label_count, cfg)?;
    Ok((model, report.initial_loss, report.final_loss))
}

/// Per-record threshold set for one E-step, plus log entries.
fn e_step_thresholds(
    probs: &[ProbMapStack],
    records: &[TrainRecord],
    policy: &ThresholdPolicy,
    classes: usize,
    iteration: usize,
    log: &mut EmRunLog,
) -> Vec<Vec<Option<f64>>> {
    match policy.mode {
        ThresholdMode::Fixed(t) => {
            vec![vec![Some(t); classes]; records.len()]
        }
        ThresholdMode::Adaptive => {
            let mut out = Vec::with_capacity(records.len());
            for (r, (p, rec)) in probs.iter().zip(records).enumerate() {
                let ts = image_thresholds(p, &rec.keypoints, policy.aggregator, policy.clamp_max);
                for (class, t) in ts.iter().enumerate() {
                    if let Some(t) = t {
                        log.thresholds.push(ThresholdEvent {
                            iteration,
                            record: r,
                            class,
                            raw: t.raw,
                            applied: t.value,
                        });
                    }
                }
                out.push(ts.iter().map(|t| t.map(|t| t.value)).collect());
            }
            out
        }
        ThresholdMode::ClassAverage => {
            let per_image: Vec<Vec<Option<AdaptiveThreshold>>> = probs
                .iter()
                .zip(records)
                .map(|(p, rec)| {
                    image_thresholds(p, &rec.keypoints, policy.aggregator, policy.clamp_max)
                })
                .collect();
            let averaged = class_average_thresholds(&per_image, classes);
            let mut out = Vec::with_capacity(records.len());
            for (r, (ts, rec)) in per_image.iter().zip(records).enumerate() {
                // The shared threshold still only applies where the class is
                // weakly present; absence knowledge is separate supervision.
                let row: Vec<Option<f64>> = (0..classes)
                    .map(|class| {
                        if rec.keypoints.has_class(class) {
                            averaged[class]
                        } else {
                            None
                        }
                    })
                    .collect();
                for (class, t) in ts.iter().enumerate() {
                    if let (Some(t), Some(applied)) = (t, row[class]) {
                        log.thresholds.push(ThresholdEvent {
                            iteration,
                            record: r,
                            class,
                            raw: t.raw,
                            applied,
                        });
                    }
                }
                out.push(row);
            }
            out
        }
    }
}

/// Run the full EM schedule with pseudo-masks seeded from keypoint disks.
pub fn run_em(
    records: &[TrainRecord],
    labels: &LabelSpace,
    cfg: &EmConfig,
    feat: &FeatureConfig,
) -> Result<EmOutcome, EmError> {
    run_em_with_init(records, labels, cfg, feat, None)
}

/// Like [`run_em`], but `initial` can override the seed masks (used to study
/// the loop under known-good initialization).
pub fn run_em_with_init(
    records: &[TrainRecord],
    labels: &LabelSpace,
    cfg: &EmConfig,
    feat: &FeatureConfig,
    initial: Option<Vec<MaskStack>>,
) -> Result<EmOutcome, EmError> {
    validate_records(records, labels)?;
    let classes = labels.count();

    let initial_masks: Vec<MaskStack> = match initial {
        Some(masks) => {
            if masks.len() != records.len() {
                return Err(EmError::BadRecord {
                    index: masks.len().min(records.len()),
                    detail: format!(
                        "{} initial masks for {} records",
                        masks.len(),
                        records.len()
                    ),
                });
            }
            for (index, (m, rec)) in masks.iter().zip(records).enumerate() {
                if m.width() != rec.image.width()
                    || m.height() != rec.image.height()
                    || m.classes() != classes
                {
                    return Err(EmError::BadRecord {
                        index,
                        detail: "initial mask does not match image dims or label count".into(),
                    });
                }
            }
            masks
        }
        None => records
            .par_iter()
            .map(|rec| {
                initial_mask(
                    rec.image.width(),
                    rec.image.height(),
                    classes,
                    &rec.keypoints,
                    &cfg.init,
                )
            })
            .collect(),
    };

    let features: Vec<FeatureMatrix> = records
        .par_iter()
        .map(|rec| extract_features(&rec.image, feat))
        .collect();

    let split = split_three_folds(records.len(), cfg.seed)?;
    let mut masks = initial_masks.clone();
    let mut held_out_probs = Vec::new();
    let mut log = EmRunLog::default();
    let mut iterations = Vec::with_capacity(cfg.em_iterations);

    for it in 0..cfg.em_iterations {
        let trained: Vec<(SegmenterModel, f64, f64, Vec<usize>)> = (0..FOLDS)
            .into_par_iter()
            .map(|fold| {
                let indices = split.complement(fold);
                let train_cfg = TrainConfig {
                    seed: derive_seed(cfg.seed, &format!("train/iter{it}/fold{fold}")),
                    ..cfg.train.clone()
                };
                train_subset(&features, &masks, &indices, classes, &train_cfg)
                    .map(|(m, il, fl)| (m, il, fl, indices))
            })
            .collect::<Result<_, _>>()?;

        let mut fold_models = Vec::with_capacity(FOLDS);
        for (fold, (model, initial_loss, final_loss, record_indices)) in
            trained.into_iter().enumerate()
        {
            log.trainings.push(TrainingEvent {
                iteration: Some(it),
                held_out_fold: Some(fold),
                record_indices,
                initial_loss,
                final_loss,
            });
            fold_models.push(model);
        }

        // Every record is predicted by the model that held its fold out.
        let probs: Vec<ProbMapStack> = features
            .par_iter()
            .enumerate()
            .map(|(r, f)| fold_models[split.fold_of(r)].predict(f))
            .collect();

        let thresholds = e_step_thresholds(&probs, records, &cfg.policy, classes, it, &mut log);
        masks = probs
            .par_iter()
            .zip(&thresholds)
            .zip(records)
            .map(|((p, ts), rec)| {
                binarize(p, ts, &rec.keypoints, cfg.policy.force_keypoints_positive)
            })
            .collect();

        iterations.push(IterationSnapshot {
            fold_models,
            masks: masks.clone(),
        });
        held_out_probs = probs;
    }

    let all: Vec<usize> = (0..records.len()).collect();
    let final_cfg = TrainConfig {
        seed: derive_seed(cfg.seed, "train/final"),
        ..cfg.train.clone()
    };
    let (model, initial_loss, final_loss) =
        train_subset(&features, &masks, &all, classes, &final_cfg)?;
    log.trainings.push(TrainingEvent {
        iteration: None,
        held_out_fold: None,
        record_indices: all,
        initial_loss,
        final_loss,
    });

    Ok(EmOutcome {
        model,
        pseudo_masks: masks,
        held_out_probs,
        initial_masks,
        split,
        iterations,
        log,
    })
}
