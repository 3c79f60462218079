//! Turning probability maps into pseudo-masks.
//!
//! During the E-step each image gets its own per-class threshold: an
//! aggregate (mean or median) of the classifier's probabilities at that
//! image's keypoints of the class, capped at `clamp_max`. A class with no
//! keypoint in the image is treated as not present and yields an all-zero
//! plane. At test time a fixed threshold is used instead since no keypoints
//! are available.

use serde::{Deserialize, Serialize};

use crate::data_model::{KeypointAnnotation, MaskStack, ProbMapStack};

/// How keypoint probabilities collapse into one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    Mean,
    Median,
}

/// Where thresholds come from during the E-step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Fresh per-image, per-class threshold from that image's keypoints.
    Adaptive,
    /// One threshold per class: the mean of the per-image thresholds across
    /// the training set.
    ClassAverage,
    /// The same constant for every image and class.
    Fixed(f64),
}

/// Full binarization policy for one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdPolicy {
    pub aggregator: Aggregator,
    /// Upper cap on every adaptive threshold.
    pub clamp_max: f64,
    pub mode: ThresholdMode,
    /// After thresholding, set each keypoint's own pixel to 1.
    pub force_keypoints_positive: bool,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy {
            aggregator: Aggregator::Mean,
            clamp_max: 0.5,
            mode: ThresholdMode::Adaptive,
            force_keypoints_positive: true,
        }
    }
}

/// One computed threshold. `raw` is the aggregator output, `value` the
/// clamped threshold actually applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveThreshold {
    pub raw: f64,
    pub value: f64,
}

/// Mean or median of a non-empty sample. Median of an even count averages
/// the two middle values.
pub fn aggregate(agg: Aggregator, values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "aggregate of empty sample");
    match agg {
        Aggregator::Mean => values.iter().sum::<f64>() / values.len() as f64,
        Aggregator::Median => {
            let mut sorted = values.to_vec();
            sorted.sort_by(|a, b| a.total_cmp(b));
            let mid = sorted.len() / 2;
            if sorted.len() % 2 == 1 {
                sorted[mid]
            } else {
                0.5 * (sorted[mid - 1] + sorted[mid])
            }
        }
    }
}

/// Classifier probabilities at the image's keypoints of one class.
pub fn keypoint_probs(probs: &ProbMapStack, keypoints: &KeypointAnnotation, class: usize) -> Vec<f64> {
    keypoints
        .of_class(class)
        .map(|kp| f64::from(probs.get(class, kp.x, kp.y)))
        .collect()
}

/// Per-image adaptive threshold for one class, or `None` when the image has
/// no keypoint of that class.
pub fn compute_threshold(
    probs: &ProbMapStack,
    keypoints: &KeypointAnnotation,
    class: usize,
    aggregator: Aggregator,
    clamp_max: f64,
) -> Option<AdaptiveThreshold> {
    let samples = keypoint_probs(probs, keypoints, class);
    if samples.is_empty() {
        return None;
    }
    let raw = aggregate(aggregator, &samples);
    Some(AdaptiveThreshold {
        raw,
        value: raw.min(clamp_max),
    })
}

/// All per-class thresholds of one image under the adaptive rule.
pub fn image_thresholds(
    probs: &ProbMapStack,
    keypoints: &KeypointAnnotation,
    aggregator: Aggregator,
    clamp_max: f64,
) -> Vec<Option<AdaptiveThreshold>> {
    (0..probs.classes())
        .map(|class| compute_threshold(probs, keypoints, class, aggregator, clamp_max))
        .collect()
}

/// Per-class mean of per-image thresholds, taken over the images where the
/// class is present. `per_image[i][l]` is image `i`'s threshold for class
/// `l`. A class absent everywhere stays `None`.
pub fn class_average_thresholds(per_image: &[Vec<Option<AdaptiveThreshold>>], classes: usize) -> Vec<Option<f64>> {
    (0..classes)
        .map(|class| {
            let values: Vec<f64> = per_image
                .iter()
                .filter_map(|ts| ts[class].map(|t| t.value))
                .collect();
            if values.is_empty() {
                None
            } else {
                Some(values.iter().sum::<f64>() / values.len() as f64)
            }
        })
        .collect()
}

/// Threshold `probs` into a pseudo-mask. `thresholds[l] = None` leaves plane
/// `l` all zero; otherwise pixel `i` is positive iff `P >= t` (inclusive).
/// With `force_keypoints_positive`, every keypoint pixel of a class is set
/// afterwards.
pub fn binarize(
    probs: &ProbMapStack,
    thresholds: &[Option<f64>],
    keypoints: &KeypointAnnotation,
    force_keypoints_positive: bool,
) -> MaskStack {
    assert_eq!(thresholds.len(), probs.classes());
    let mut mask = MaskStack::zeros(probs.width(), probs.height(), probs.classes());
    for (class, t) in thresholds.iter().enumerate() {
        if let Some(t) = t {
            let plane = probs.plane(class);
            let out = mask.plane_mut(class);
            for (slot, &p) in out.iter_mut().zip(plane) {
                *slot = u8::from(f64::from(p) >= *t);
            }
        }
    }
    if force_keypoints_positive {
        for kp in keypoints.entries() {
            mask.set(kp.class, kp.x, kp.y, true);
        }
    }
    mask
}

/// Test-time rule: one fixed threshold for every class, no keypoints.
pub fn binarize_fixed(probs: &ProbMapStack, threshold: f64) -> MaskStack {
    let thresholds = vec![Some(threshold); probs.classes()];
    binarize(probs, &thresholds, &KeypointAnnotation::empty(), false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::Keypoint;
    use proptest::prelude::*;

    fn probs_1x(values: Vec<f32>, classes: usize) -> ProbMapStack {
        let n = values.len() / classes;
        ProbMapStack::new(n, 1, classes, values).unwrap()
    }

    #[test]
    fn mean_and_median_examples() {
        assert_eq!(aggregate(Aggregator::Median, &[0.1, 0.2, 0.9]), 0.2);
        assert!((aggregate(Aggregator::Mean, &[0.1, 0.2, 0.9]) - 0.4).abs() < 1e-12);
        assert!((aggregate(Aggregator::Median, &[0.4, 0.1]) - 0.25).abs() < 1e-12);
        assert_eq!(aggregate(Aggregator::Median, &[0.7]), 0.7);
    }

    #[test]
    fn clamp_branch_binds_on_high_probabilities() {
        let probs = probs_1x(vec![0.8, 0.9], 1);
        let kps = KeypointAnnotation::new(vec![
            Keypoint { class: 0, x: 0, y: 0 },
            Keypoint { class: 0, x: 1, y: 0 },
        ]);
        let t = compute_threshold(&probs, &kps, 0, Aggregator::Mean, 0.5).unwrap();
        assert!((t.raw - 0.85).abs() < 1e-6);
        assert_eq!(t.value, 0.5);
    }

    #[test]
    fn absent_class_has_no_threshold_and_zero_plane() {
        let probs = probs_1x(vec![0.9, 0.9, 0.9, 0.9], 2);
        let kps = KeypointAnnotation::new(vec![Keypoint { class: 0, x: 0, y: 0 }]);
        let ts = image_thresholds(&probs, &kps, Aggregator::Mean, 0.5);
        assert!(ts[0].is_some());
        assert!(ts[1].is_none());
        let mask = binarize(
            &probs,
            &ts.iter().map(|t| t.map(|t| t.value)).collect::<Vec<_>>(),
            &kps,
            true,
        );
        assert_eq!(mask.count_ones(0), 2);
        assert_eq!(mask.count_ones(1), 0);
    }

    #[test]
    fn single_keypoint_survives_its_own_threshold_without_forcing() {
        let probs = probs_1x(vec![0.31, 0.30, 0.32], 1);
        let kps = KeypointAnnotation::new(vec![Keypoint { class: 0, x: 0, y: 0 }]);
        let ts = image_thresholds(&probs, &kps, Aggregator::Median, 0.5);
        assert_eq!(ts[0].unwrap().value, f64::from(0.31f32));
        let mask = binarize(&probs, &[ts[0].map(|t| t.value)], &kps, false);
        assert!(mask.get(0, 0, 0));
        assert!(!mask.get(0, 1, 0));
        assert!(mask.get(0, 2, 0));
    }

    #[test]
    fn forcing_marks_keypoints_below_threshold() {
        let probs = probs_1x(vec![0.1, 0.9], 1);
        let kps = KeypointAnnotation::new(vec![Keypoint { class: 0, x: 0, y: 0 }]);
        let mask = binarize(&probs, &[Some(0.5)], &kps, true);
        assert!(mask.get(0, 0, 0));
        let unforced = binarize(&probs, &[Some(0.5)], &kps, false);
        assert!(!unforced.get(0, 0, 0));
    }

    #[test]
    fn class_average_is_the_mean_over_present_images() {
        let a = vec![Some(AdaptiveThreshold { raw: 0.2, value: 0.2 }), None];
        let b = vec![Some(AdaptiveThreshold { raw: 0.6, value: 0.4 }), None];
        let c = vec![None, None];
        let avg = class_average_thresholds(&[a, b, c], 2);
        assert!((avg[0].unwrap() - 0.3).abs() < 1e-12);
        assert!(avg[1].is_none());
    }

    #[test]
    fn fixed_rule_is_inclusive_at_the_threshold() {
        let probs = probs_1x(vec![0.5, 0.49999, 0.5001], 1);
        let mask = binarize_fixed(&probs, 0.5);
        assert_eq!(mask.plane(0), &[1, 0, 1]);
    }

    proptest! {
        #[test]
        fn masks_shrink_as_thresholds_grow(
            values in proptest::collection::vec(0.0f32..=1.0, 24),
            t1 in 0.0f64..=1.0,
            dt in 0.0f64..=0.5,
        ) {
            let probs = probs_1x(values, 2);
            let low = binarize_fixed(&probs, t1);
            let high = binarize_fixed(&probs, (t1 + dt).min(1.0));
            for class in 0..2 {
                for (l, h) in low.plane(class).iter().zip(high.plane(class)) {
                    prop_assert!(h <= l);
                }
            }
        }

        #[test]
        fn clamp_dominates_every_threshold(
            values in proptest::collection::vec(0.0f32..=1.0, 16),
            clamp in 0.05f64..=1.0,
        ) {
            let probs = probs_1x(values, 1);
            let kps = KeypointAnnotation::new(
                (0..4).map(|i| Keypoint { class: 0, x: i * 3, y: 0 }).collect(),
            );
            for agg in [Aggregator::Mean, Aggregator::Median] {
                let t = compute_threshold(&probs, &kps, 0, agg, clamp).unwrap();
                prop_assert!(t.value <= clamp);
                prop_assert!(t.value <= t.raw);
            }
        }

        #[test]
        fn median_is_order_statistic_and_mean_is_linear(
            values in proptest::collection::vec(0.0f64..=1.0, 1..12),
        ) {
            let med = aggregate(Aggregator::Median, &values);
            let below = values.iter().filter(|&&v| v <= med).count();
            let above = values.iter().filter(|&&v| v >= med).count();
            prop_assert!(below * 2 >= values.len());
            prop_assert!(above * 2 >= values.len());
            let mean = aggregate(Aggregator::Mean, &values);
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(mean >= lo - 1e-12 && mean <= hi + 1e-12);
        }
    }
}
