//! Jaccard estimation without ground truth.
//!
//! Keypoints of the held-out folds act as a sparse probe set: the hit rate
//! on a class's own keypoints estimates `P(pred=1 | y=1)`, the hit rate on
//! keypoints of images free of that class estimates `P(pred=1 | y=0)`, and
//! the pooled positive-pixel fraction pins down the class prior. Combining
//! the three yields an estimate of the pooled Jaccard index, which is exact
//! when the rates are exact. The estimate drives hyperparameter selection,
//! here the seed-disk radius.
//!
//! The probed predictions are the held-out probability maps of the last
//! E-step cut at the evaluation threshold 0.5, not the pseudo-masks: forced
//! keypoints and the zeroing of keypoint-free classes would pin the rates of
//! a pseudo-mask at their trivial values and the estimate at 1.

use thiserror::Error;

use crate::binarization::binarize_fixed;
use crate::classifier::FeatureConfig;
use crate::data_model::{KeypointAnnotation, LabelSpace, MaskStack};
use crate::em_trainer::{run_em, EmConfig, EmError, EmOutcome, TrainRecord, FOLDS};

/// Rates feeding the Jaccard estimate. `prior` is derived from the other
/// three and clamped to `[0, 1]`; `prior_clamped` records when the clamp
/// fired.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalEstimates {
    pub tpr: f64,
    pub fpr: f64,
    pub pred_rate: f64,
    pub prior: f64,
    pub prior_clamped: bool,
}

/// Why no estimate exists for a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum Indeterminate {
    #[error("no keypoint of this class in the pool")]
    NoPositiveKeypoints,
    #[error("no negative keypoint in the pool")]
    NoNegativeKeypoints,
    #[error("positive and negative hit rates coincide")]
    DegenerateRates,
}

impl ConditionalEstimates {
    /// Solve for the prior given the three rates; fails when the rates carry
    /// no signal.
    pub fn from_rates(tpr: f64, fpr: f64, pred_rate: f64) -> Result<Self, Indeterminate> {
        if tpr == fpr {
            return Err(Indeterminate::DegenerateRates);
        }
        let raw_prior = (pred_rate - fpr) / (tpr - fpr);
        let prior = raw_prior.clamp(0.0, 1.0);
        Ok(ConditionalEstimates {
            tpr,
            fpr,
            pred_rate,
            prior,
            prior_clamped: prior != raw_prior,
        })
    }
}

/// The Jaccard estimate `tpr * prior / (prior + fpr * (1 - prior))`; an
/// empty class (prior 0) scores 0.
pub fn approx_jaccard(est: &ConditionalEstimates) -> f64 {
    let den = est.prior + est.fpr * (1.0 - est.prior);
    if den <= 0.0 {
        0.0
    } else {
        est.tpr * est.prior / den
    }
}

/// Estimate the rates for `class` from predicted masks and keypoints of a
/// validation pool.
///
/// Negatives are the keypoints of other classes restricted to images with no
/// `class` keypoint at all; in multi-label data a foreign keypoint inside an
/// image that carries `class` could sit on a `class` pixel and would bias
/// the false-positive rate upward.
pub fn estimate_conditionals(
    preds: &[&MaskStack],
    keypoints: &[&KeypointAnnotation],
    class: usize,
) -> Result<ConditionalEstimates, Indeterminate> {
    assert_eq!(preds.len(), keypoints.len());
    let (mut pos_total, mut pos_hit) = (0usize, 0usize);
    let (mut neg_total, mut neg_hit) = (0usize, 0usize);
    let (mut pixels, mut pixels_on) = (0usize, 0usize);
    for (mask, kps) in preds.iter().zip(keypoints) {
        pixels += mask.pixel_count();
        pixels_on += mask.count_ones(class);
        let has_class = kps.has_class(class);
        for kp in kps.entries() {
            if kp.class == class {
                pos_total += 1;
                pos_hit += usize::from(mask.get(class, kp.x, kp.y));
            } else if !has_class {
                neg_total += 1;
                neg_hit += usize::from(mask.get(class, kp.x, kp.y));
            }
        }
    }
    if pos_total == 0 {
        return Err(Indeterminate::NoPositiveKeypoints);
    }
    if neg_total == 0 {
        return Err(Indeterminate::NoNegativeKeypoints);
    }
    let tpr = pos_hit as f64 / pos_total as f64;
    let fpr = neg_hit as f64 / neg_total as f64;
    let pred_rate = pixels_on as f64 / pixels as f64;
    ConditionalEstimates::from_rates(tpr, fpr, pred_rate)
}

/// The same rates computed exactly from dense ground truth. Feeding these
/// into [`approx_jaccard`] reproduces the pooled Jaccard index identically;
/// keypoint sampling is the only source of estimation error.
pub fn exact_conditionals(
    gts: &[&MaskStack],
    preds: &[&MaskStack],
    class: usize,
) -> Result<ConditionalEstimates, Indeterminate> {
    assert_eq!(gts.len(), preds.len());
    let (mut tp, mut fp, mut positives, mut pixels) = (0usize, 0usize, 0usize, 0usize);
    for (gt, pred) in gts.iter().zip(preds) {
        assert!(gt.same_dims(pred));
        pixels += gt.pixel_count();
        for (&g, &p) in gt.plane(class).iter().zip(pred.plane(class)) {
            positives += usize::from(g == 1);
            tp += usize::from(g == 1 && p == 1);
            fp += usize::from(g == 0 && p == 1);
        }
    }
    if positives == 0 {
        return Err(Indeterminate::NoPositiveKeypoints);
    }
    let negatives = pixels - positives;
    if negatives == 0 {
        return Err(Indeterminate::NoNegativeKeypoints);
    }
    let tpr = tp as f64 / positives as f64;
    let fpr = fp as f64 / negatives as f64;
    let pred_rate = (tp + fp) as f64 / pixels as f64;
    ConditionalEstimates::from_rates(tpr, fpr, pred_rate)
}

/// Per-fold, per-class Jaccard estimates from the last E-step's held-out
/// predictions of one EM run, binarized at 0.5. `result[fold][class]`.
pub fn fold_estimates(
    outcome: &EmOutcome,
    records: &[TrainRecord],
    classes: usize,
) -> Vec<Vec<Result<f64, Indeterminate>>> {
    assert!(
        !outcome.held_out_probs.is_empty(),
        "no E-step predictions: the run needs at least one EM iteration"
    );
    let cut: Vec<MaskStack> = outcome
        .held_out_probs
        .iter()
        .map(|p| binarize_fixed(p, 0.5))
        .collect();
    (0..FOLDS)
        .map(|fold| {
            let members = outcome.split.members(fold);
            let preds: Vec<&MaskStack> = members.iter().map(|&r| &cut[r]).collect();
            let kps: Vec<&KeypointAnnotation> =
                members.iter().map(|&r| &records[r].keypoints).collect();
            (0..classes)
                .map(|class| {
                    estimate_conditionals(&preds, &kps, class).map(|est| approx_jaccard(&est))
                })
                .collect()
        })
        .collect()
}

/// Sweep outcome for one radius fraction.
#[derive(Debug)]
pub struct SigmaRow {
    pub sigma_fraction: f64,
    /// Mean estimate per class over the folds where it exists.
    pub per_class: Vec<Option<f64>>,
    /// Fold/class pairs without an estimate, with the reason.
    pub excluded: Vec<(usize, usize, Indeterminate)>,
    /// Mean over folds of the per-fold class means; `None` when every fold
    /// lost every class.
    pub score: Option<f64>,
    pub outcome: EmOutcome,
}

#[derive(Debug)]
pub struct SigmaSweep {
    pub rows: Vec<SigmaRow>,
    /// Index into `rows` of the best-scoring radius, ties toward the
    /// smaller one. `None` when no radius produced a score.
    pub best: Option<usize>,
}

impl SigmaSweep {
    pub fn best_row(&self) -> Option<&SigmaRow> {
        self.best.map(|i| &self.rows[i])
    }
}

/// Run the full EM pipeline once per radius in `grid` and score each run by
/// the keypoint-only Jaccard estimate on its held-out folds.
pub fn sigma_sweep(
    records: &[TrainRecord],
    labels: &LabelSpace,
    base: &EmConfig,
    feat: &FeatureConfig,
    grid: &[f64],
) -> Result<SigmaSweep, EmError> {
    assert!(!grid.is_empty(), "empty radius grid");
    let classes = labels.count();
    let mut rows = Vec::with_capacity(grid.len());
    for &sigma_fraction in grid {
        let mut cfg = base.clone();
        cfg.init.sigma_fraction = sigma_fraction;
        let outcome = run_em(records, labels, &cfg, feat)?;
        let folds = fold_estimates(&outcome, records, classes);

        let mut excluded = Vec::new();
        let mut fold_means = Vec::new();
        for (fold, per_class) in folds.iter().enumerate() {
            let mut values = Vec::new();
            for (class, res) in per_class.iter().enumerate() {
                match res {
                    Ok(j) => values.push(*j),
                    Err(why) => excluded.push((fold, class, *why)),
                }
            }
            if !values.is_empty() {
                fold_means.push(values.iter().sum::<f64>() / values.len() as f64);
            }
        }
        let score = if fold_means.is_empty() {
            None
        } else {
            Some(fold_means.iter().sum::<f64>() / fold_means.len() as f64)
        };
        let per_class = (0..classes)
            .map(|class| {
                let values: Vec<f64> = folds
                    .iter()
                    .filter_map(|f| f[class].as_ref().ok().copied())
                    .collect();
                if values.is_empty() {
                    None
                } else {
                    Some(values.iter().sum::<f64>() / values.len() as f64)
                }
            })
            .collect();
        rows.push(SigmaRow {
            sigma_fraction,
            per_class,
            excluded,
            score,
            outcome,
        });
    }

    let mut best: Option<usize> = None;
    for (i, row) in rows.iter().enumerate() {
        if let Some(score) = row.score {
            let beats = match best {
                None => true,
                Some(b) => score > rows[b].score.unwrap(),
            };
            if beats {
                best = Some(i);
            }
        }
    }
    Ok(SigmaSweep { rows, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::Keypoint;
    use proptest::prelude::*;
    use rand::Rng;

    use crate::seed::seeded_rng;

    #[test]
    fn perfect_conditionals_recover_the_prior() {
        let est = ConditionalEstimates::from_rates(1.0, 0.0, 0.2).unwrap();
        assert_eq!(est.prior, 0.2);
        assert!(!est.prior_clamped);
        assert_eq!(approx_jaccard(&est), 1.0);
    }

    #[test]
    fn textbook_rates_give_the_expected_prior() {
        let est = ConditionalEstimates::from_rates(0.8, 0.1, 0.38).unwrap();
        assert!((est.prior - 0.4).abs() < 1e-12);
    }

    #[test]
    fn half_prior_half_fpr_gives_two_thirds() {
        let est = ConditionalEstimates::from_rates(1.0, 0.5, 0.75).unwrap();
        assert!((est.prior - 0.5).abs() < 1e-12);
        assert!((approx_jaccard(&est) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn equal_rates_are_degenerate() {
        assert_eq!(
            ConditionalEstimates::from_rates(0.5, 0.5, 0.5),
            Err(Indeterminate::DegenerateRates)
        );
    }

    #[test]
    fn zero_prior_scores_zero() {
        let est = ConditionalEstimates::from_rates(1.0, 0.0, 0.0).unwrap();
        assert_eq!(est.prior, 0.0);
        assert_eq!(approx_jaccard(&est), 0.0);
    }

    #[test]
    fn prior_clamp_fires_on_noisy_rates() {
        let est = ConditionalEstimates::from_rates(0.6, 0.5, 0.9).unwrap();
        assert_eq!(est.prior, 1.0);
        assert!(est.prior_clamped);
    }

    /// Build the two-image pool described in the body: 10 positive keypoints
    /// with 8 hits, 10 negatives with 1 hit, 38 of 100 pixels predicted on.
    #[test]
    fn keypoint_counting_matches_the_constructed_rates() {
        let mut pred_a = MaskStack::zeros(10, 5, 2);
        for x in 0..8 {
            pred_a.set(0, x, 0, true);
        }
        for i in 0..22 {
            pred_a.set(0, i % 10, 1 + i / 10, true);
        }
        let kps_a = KeypointAnnotation::new(
            (0..10).map(|x| Keypoint { class: 0, x, y: 0 }).collect(),
        );

        let mut pred_b = MaskStack::zeros(10, 5, 2);
        pred_b.set(0, 0, 0, true);
        for i in 0..7 {
            pred_b.set(0, i, 2, true);
        }
        let kps_b = KeypointAnnotation::new(
            (0..10).map(|x| Keypoint { class: 1, x, y: 0 }).collect(),
        );

        let est = estimate_conditionals(&[&pred_a, &pred_b], &[&kps_a, &kps_b], 0).unwrap();
        assert!((est.tpr - 0.8).abs() < 1e-12);
        assert!((est.fpr - 0.1).abs() < 1e-12);
        assert!((est.pred_rate - 0.38).abs() < 1e-12);
        assert!((est.prior - 0.4).abs() < 1e-12);
    }

    #[test]
    fn foreign_keypoints_in_class_bearing_images_are_not_negatives() {
        let mut pred = MaskStack::zeros(4, 1, 2);
        pred.set(0, 0, 0, true);
        pred.set(0, 1, 0, true);
        // Class-1 keypoint shares the image with a class-0 keypoint: without
        // another image there is no negative pool at all.
        let kps = KeypointAnnotation::new(vec![
            Keypoint { class: 0, x: 0, y: 0 },
            Keypoint { class: 1, x: 1, y: 0 },
        ]);
        assert_eq!(
            estimate_conditionals(&[&pred], &[&kps], 0),
            Err(Indeterminate::NoNegativeKeypoints)
        );
    }

    #[test]
    fn exact_rates_reproduce_pooled_jaccard_on_random_masks() {
        let mut rng = seeded_rng(31);
        for _ in 0..200 {
            let density = rng.random::<f64>();
            let gt_bits: Vec<u8> = (0..64).map(|_| u8::from(rng.random::<f64>() < density)).collect();
            let pr_bits: Vec<u8> = (0..64).map(|_| u8::from(rng.random::<f64>() < density)).collect();
            let gt = MaskStack::from_bits(8, 8, 1, gt_bits).unwrap();
            let pred = MaskStack::from_bits(8, 8, 1, pr_bits).unwrap();
            let truth = crate::evaluation::pooled_jaccard(&[&gt], &[&pred], 0);
            match exact_conditionals(&[&gt], &[&pred], 0) {
                Ok(est) => {
                    assert!(
                        (approx_jaccard(&est) - truth).abs() < 1e-12,
                        "estimate {} vs truth {truth}",
                        approx_jaccard(&est)
                    );
                }
                Err(Indeterminate::DegenerateRates) => {
                    // tpr == fpr can happen on random masks; no estimate.
                }
                Err(other) => {
                    // All-positive or all-negative ground truth.
                    let ones = gt.count_ones(0);
                    assert!(ones == 0 || ones == 64, "{other}");
                }
            }
        }
    }

    #[test]
    fn sweep_on_a_single_radius_selects_it() {
        let (records, labels) = toy_sweep_records();
        let base = quick_em();
        let feat = FeatureConfig {
            smoothing_scales: vec![1],
            window_radii: vec![],
            include_coords: false,
        };
        // Radius large enough that the trained models fire above 0.5 and the
        // probe rates separate.
        let sweep = sigma_sweep(&records, &labels, &base, &feat, &[0.25]).unwrap();
        assert_eq!(sweep.rows.len(), 1);
        assert_eq!(sweep.best, Some(0));
        assert_eq!(sweep.best_row().unwrap().sigma_fraction, 0.25);
    }

    #[test]
    fn sweep_runs_one_pipeline_per_radius_and_breaks_ties_toward_small() {
        let (records, labels) = toy_sweep_records();
        let base = quick_em();
        let feat = FeatureConfig {
            smoothing_scales: vec![],
            window_radii: vec![],
            include_coords: false,
        };
        let sweep = sigma_sweep(&records, &labels, &base, &feat, &[0.05, 0.1]).unwrap();
        assert_eq!(sweep.rows.len(), 2);
        for row in &sweep.rows {
            assert_eq!(row.outcome.log.trainings.len(), base.em_iterations * 3 + 1);
        }
        if let (Some(a), Some(b)) = (sweep.rows[0].score, sweep.rows[1].score) {
            if a >= b {
                assert_eq!(sweep.best, Some(0));
            } else {
                assert_eq!(sweep.best, Some(1));
            }
        }
    }

    #[test]
    fn fold_estimates_probe_held_out_predictions_at_half() {
        let (records, labels) = toy_sweep_records();
        let base = quick_em();
        let feat = FeatureConfig {
            smoothing_scales: vec![1],
            window_radii: vec![],
            include_coords: false,
        };
        let outcome = run_em(&records, &labels, &base, &feat).unwrap();
        let folds = fold_estimates(&outcome, &records, labels.count());
        assert_eq!(folds.len(), FOLDS);
        for (fold, per_class) in folds.iter().enumerate() {
            let members = outcome.split.members(fold);
            let cut: Vec<MaskStack> = members
                .iter()
                .map(|&r| binarize_fixed(&outcome.held_out_probs[r], 0.5))
                .collect();
            let preds: Vec<&MaskStack> = cut.iter().collect();
            let kps: Vec<&KeypointAnnotation> =
                members.iter().map(|&r| &records[r].keypoints).collect();
            for (class, got) in per_class.iter().enumerate() {
                let want =
                    estimate_conditionals(&preds, &kps, class).map(|est| approx_jaccard(&est));
                assert_eq!(*got, want, "fold {fold} class {class}");
            }
        }
    }

    /// Class 0 paints a bright square, class 1 a dark one, on mid-gray
    /// ground. Both directions are linearly separable in intensity, so the
    /// trained per-class heads produce determinate probe rates.
    fn toy_sweep_records() -> (Vec<TrainRecord>, LabelSpace) {
        use crate::data_model::ImageTensor;
        let labels = LabelSpace::new(["a", "b"]).unwrap();
        let mut rng = seeded_rng(13);
        let side = 12;
        let records = (0..6)
            .map(|i| {
                let class = i % 2;
                let mut data = vec![0.45f32; side * side];
                let cx = rng.random_range(3..side - 3);
                let cy = rng.random_range(3..side - 3);
                for dy in 0..3 {
                    for dx in 0..3 {
                        data[(cy + dy - 1) * side + cx + dx - 1] =
                            if class == 0 { 0.95 } else { 0.05 };
                    }
                }
                TrainRecord {
                    image: ImageTensor::new(side, side, 1, data).unwrap(),
                    keypoints: KeypointAnnotation::new(vec![Keypoint { class, x: cx, y: cy }]),
                }
            })
            .collect();
        (records, labels)
    }

    fn quick_em() -> EmConfig {
        use crate::classifier::TrainConfig;
        EmConfig {
            em_iterations: 1,
            train: TrainConfig {
                learning_rate: 1.0,
                epochs: 300,
                minibatch_pixels: 256,
                ..TrainConfig::default()
            },
            seed: 2,
            ..EmConfig::default()
        }
    }

    proptest! {
        #[test]
        fn estimate_is_monotone_in_the_rates(
            tpr in 0.2f64..=1.0,
            fpr in 0.0f64..=0.8,
            prior in 0.05f64..=0.95,
            bump in 0.01f64..=0.2,
        ) {
            prop_assume!(tpr > fpr + 0.01);
            let base = ConditionalEstimates { tpr, fpr, pred_rate: 0.0, prior, prior_clamped: false };
            let worse_fpr = ConditionalEstimates { fpr: (fpr + bump).min(1.0), ..base };
            prop_assert!(approx_jaccard(&worse_fpr) <= approx_jaccard(&base) + 1e-12);
            let better_tpr = ConditionalEstimates { tpr: (tpr + bump).min(1.0), ..base };
            prop_assert!(approx_jaccard(&better_tpr) + 1e-12 >= approx_jaccard(&base));
        }

        #[test]
        fn estimate_stays_in_unit_interval(
            tpr in 0.0f64..=1.0,
            fpr in 0.0f64..=1.0,
            pred_rate in 0.0f64..=1.0,
        ) {
            if let Ok(est) = ConditionalEstimates::from_rates(tpr, fpr, pred_rate) {
                let j = approx_jaccard(&est);
                prop_assert!((0.0..=1.0).contains(&j), "{j}");
                prop_assert!((0.0..=1.0).contains(&est.prior));
            }
        }
    }
}
