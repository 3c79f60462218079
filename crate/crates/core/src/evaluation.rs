//! Jaccard-index evaluation against ground-truth masks.
//!
//! Statistics are pooled over all pixels of all evaluated images, per class,
//! rather than averaged per image. Background is a derived class: a pixel is
//! background iff it carries no affordance bit, and the same derivation is
//! applied to ground truth and predictions. Reports list background first,
//! then the affordance classes, and the mean runs over all listed entries.

use crate::data_model::{DataError, LabelSpace, MaskStack};

/// Pixels with every class bit clear.
pub fn background_mask(mask: &MaskStack) -> Vec<u8> {
    let n = mask.pixel_count();
    let mut bg = vec![1u8; n];
    for class in 0..mask.classes() {
        for (slot, &bit) in bg.iter_mut().zip(mask.plane(class)) {
            if bit == 1 {
                *slot = 0;
            }
        }
    }
    bg
}

fn jaccard_from_counts(tp: usize, positives: usize, fp: usize) -> f64 {
    if positives == 0 {
        return if fp == 0 { 1.0 } else { 0.0 };
    }
    tp as f64 / (positives + fp) as f64
}

fn pooled_counts<'a>(
    pairs: impl Iterator<Item = (&'a [u8], &'a [u8])>,
) -> (usize, usize, usize) {
    let (mut tp, mut positives, mut fp) = (0, 0, 0);
    for (gt, pred) in pairs {
        for (&g, &p) in gt.iter().zip(pred) {
            positives += usize::from(g == 1);
            tp += usize::from(g == 1 && p == 1);
            fp += usize::from(g == 0 && p == 1);
        }
    }
    (tp, positives, fp)
}

/// Pooled Jaccard index of one class over a set of image pairs.
///
/// `TP / (|y=1| + FP)`; an empty class scores 1 against an empty prediction
/// and 0 against any false positive.
pub fn pooled_jaccard(gts: &[&MaskStack], preds: &[&MaskStack], class: usize) -> f64 {
    assert_eq!(gts.len(), preds.len());
    let (tp, positives, fp) = pooled_counts(
        gts.iter()
            .zip(preds)
            .map(|(g, p)| (g.plane(class), p.plane(class))),
    );
    jaccard_from_counts(tp, positives, fp)
}

/// Pooled Jaccard index of the derived background class.
pub fn pooled_background_jaccard(gts: &[&MaskStack], preds: &[&MaskStack]) -> f64 {
    assert_eq!(gts.len(), preds.len());
    let planes: Vec<(Vec<u8>, Vec<u8>)> = gts
        .iter()
        .zip(preds)
        .map(|(g, p)| (background_mask(g), background_mask(p)))
        .collect();
    let (tp, positives, fp) =
        pooled_counts(planes.iter().map(|(g, p)| (g.as_slice(), p.as_slice())));
    jaccard_from_counts(tp, positives, fp)
}

/// Per-class scores of one evaluation. `entries` pairs a display name with a
/// Jaccard value; background is first.
#[derive(Debug, Clone)]
pub struct JaccardReport {
    pub entries: Vec<(String, f64)>,
    pub mean: f64,
}

impl JaccardReport {
    pub fn score_of(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

/// Evaluate predictions against ground truth over a whole test set.
pub fn evaluate(
    gts: &[&MaskStack],
    preds: &[&MaskStack],
    labels: &LabelSpace,
) -> Result<JaccardReport, DataError> {
    if gts.len() != preds.len() {
        return Err(DataError::Invalid {
            what: "evaluation".into(),
            detail: format!("{} ground-truth stacks vs {} predictions", gts.len(), preds.len()),
        });
    }
    if gts.is_empty() {
        return Err(DataError::Invalid {
            what: "evaluation".into(),
            detail: "empty test set".into(),
        });
    }
    for (i, (g, p)) in gts.iter().zip(preds).enumerate() {
        if !g.same_dims(p) {
            return Err(DataError::DimensionMismatch {
                path: format!("test record {i}"),
                detail: format!(
                    "ground truth {}x{}x{} vs prediction {}x{}x{}",
                    g.width(),
                    g.height(),
                    g.classes(),
                    p.width(),
                    p.height(),
                    p.classes()
                ),
            });
        }
        if g.classes() != labels.count() {
            return Err(DataError::DimensionMismatch {
                path: format!("test record {i}"),
                detail: format!(
                    "{} mask classes vs {} labels",
                    g.classes(),
                    labels.count()
                ),
            });
        }
    }
    let mut entries = Vec::with_capacity(labels.count() + 1);
    entries.push(("Bck".to_string(), pooled_background_jaccard(gts, preds)));
    for class in 0..labels.count() {
        entries.push((
            labels.name(class).to_string(),
            pooled_jaccard(gts, preds, class),
        ));
    }
    let mean = entries.iter().map(|&(_, v)| v).sum::<f64>() / entries.len() as f64;
    Ok(JaccardReport { entries, mean })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(width: usize, classes: usize, bits: Vec<u8>) -> MaskStack {
        MaskStack::from_bits(width, 1, classes, bits).unwrap()
    }

    #[test]
    fn direct_counts_example() {
        // |y=1| = 3, TP = 2, FP = 1.
        let gt = stack(5, 1, vec![1, 1, 1, 0, 0]);
        let pred = stack(5, 1, vec![1, 1, 0, 1, 0]);
        assert_eq!(pooled_jaccard(&[&gt], &[&pred], 0), 0.5);
    }

    #[test]
    fn identical_masks_score_one_everywhere() {
        let gt = stack(4, 2, vec![1, 0, 1, 0, 0, 0, 1, 1]);
        let labels = LabelSpace::new(["a", "b"]).unwrap();
        let report = evaluate(&[&gt], &[&gt.clone()], &labels).unwrap();
        assert_eq!(report.mean, 1.0);
        for (_, v) in &report.entries {
            assert_eq!(*v, 1.0);
        }
    }

    #[test]
    fn empty_class_conventions() {
        let gt = stack(3, 1, vec![0, 0, 0]);
        let empty = stack(3, 1, vec![0, 0, 0]);
        let noisy = stack(3, 1, vec![0, 1, 0]);
        assert_eq!(pooled_jaccard(&[&gt], &[&empty], 0), 1.0);
        assert_eq!(pooled_jaccard(&[&gt], &[&noisy], 0), 0.0);
    }

    #[test]
    fn empty_prediction_on_nonempty_class_scores_zero() {
        let gt = stack(3, 1, vec![1, 1, 0]);
        let pred = stack(3, 1, vec![0, 0, 0]);
        assert_eq!(pooled_jaccard(&[&gt], &[&pred], 0), 0.0);
    }

    #[test]
    fn background_is_the_complement_of_the_class_union() {
        let m = stack(4, 2, vec![1, 0, 0, 0, 1, 1, 0, 0]);
        assert_eq!(background_mask(&m), vec![0, 0, 1, 1]);
        let zeros = MaskStack::zeros(4, 1, 2);
        assert_eq!(background_mask(&zeros), vec![1; 4]);
    }

    #[test]
    fn pooling_differs_from_per_image_averaging() {
        // Image 1: TP=1, P=1, FP=0 (J=1). Image 2: TP=0, P=9, FP=0 (J=0).
        // Pooled: 1/10, not 0.5.
        let gt1 = stack(1, 1, vec![1]);
        let pred1 = stack(1, 1, vec![1]);
        let gt2 = MaskStack::from_bits(9, 1, 1, vec![1; 9]).unwrap();
        let pred2 = MaskStack::zeros(9, 1, 1);
        let j = pooled_jaccard(&[&gt1, &gt2], &[&pred1, &pred2], 0);
        assert!((j - 0.1).abs() < 1e-12);
    }

    #[test]
    fn report_lists_background_first_and_means_all_entries() {
        let gt = stack(4, 2, vec![1, 1, 0, 0, 0, 0, 1, 0]);
        let pred = stack(4, 2, vec![1, 0, 0, 0, 0, 0, 1, 1]);
        let labels = LabelSpace::new(["grip", "cut"]).unwrap();
        let report = evaluate(&[&gt], &[&pred], &labels).unwrap();
        assert_eq!(report.entries[0].0, "Bck");
        assert_eq!(report.entries[1].0, "grip");
        // Bck: gt {0,0,1,1}&{0,1,1,0} pooled per-pixel over the union of
        // classes; grip: TP=1,P=2,FP=0; cut: TP=1,P=1,FP=1.
        assert_eq!(report.entries[1].1, 0.5);
        assert_eq!(report.entries[2].1, 0.5);
        let expected_mean: f64 =
            report.entries.iter().map(|&(_, v)| v).sum::<f64>() / 3.0;
        assert!((report.mean - expected_mean).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let gt = stack(4, 2, vec![0; 8]);
        let pred = stack(4, 1, vec![0; 4]);
        let labels = LabelSpace::new(["a", "b"]).unwrap();
        assert!(evaluate(&[&gt], &[&pred], &labels).is_err());
    }
}
