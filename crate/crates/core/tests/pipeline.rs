//! End-to-end behavior of the training loop on generated data, checked
//! through the public API only. Runs on a smaller cut of the benchmark
//! generator settings so every comparison is deterministic and fast.

use affseg::binarization::{binarize_fixed, ThresholdMode, ThresholdPolicy};
use affseg::classifier::{extract_features, FeatureConfig, SegmenterModel};
use affseg::data_model::{LabelSpace, MaskStack};
use affseg::em_trainer::{run_em, run_em_with_init, EmConfig, TrainRecord};
use affseg::evaluation::evaluate;
use affseg::initialization::{initial_mask, InitConfig};
use affseg::synth::{benchmark_config, generate, label_names, SynthConfig, SynthRecord};

struct Setup {
    train: Vec<SynthRecord>,
    test: Vec<SynthRecord>,
    labels: LabelSpace,
    features: FeatureConfig,
}

fn setup() -> Setup {
    let cfg = SynthConfig {
        seed: 777,
        ..benchmark_config()
    };
    let mut all = generate(&cfg, 48).unwrap();
    let test = all.split_off(36);
    Setup {
        train: all,
        test,
        labels: LabelSpace::new(label_names(cfg.class_count)).unwrap(),
        features: FeatureConfig::default(),
    }
}

fn records(set: &[SynthRecord]) -> Vec<TrainRecord> {
    set.iter().map(SynthRecord::to_train_record).collect()
}

fn gt_masks(set: &[SynthRecord]) -> Vec<MaskStack> {
    set.iter().map(|r| r.gt.clone()).collect()
}

fn mean_test_j(setup: &Setup, model: &SegmenterModel) -> f64 {
    let preds: Vec<MaskStack> = setup
        .test
        .iter()
        .map(|r| binarize_fixed(&model.predict(&extract_features(&r.image, &setup.features)), 0.5))
        .collect();
    let gts: Vec<&MaskStack> = setup.test.iter().map(|r| &r.gt).collect();
    let pred_refs: Vec<&MaskStack> = preds.iter().collect();
    evaluate(&gts, &pred_refs, &setup.labels).unwrap().mean
}

fn frozen(cfg: &EmConfig) -> EmConfig {
    EmConfig {
        em_iterations: 0,
        ..cfg.clone()
    }
}

/// Training on exact masks bounds what keypoint supervision can reach;
/// the weak pipeline must land between chance and that oracle.
#[test]
fn supervised_oracle_bounds_the_weak_pipeline() {
    let s = setup();
    let recs = records(&s.train);
    let base = EmConfig::default();

    let oracle = run_em_with_init(
        &recs,
        &s.labels,
        &frozen(&base),
        &s.features,
        Some(gt_masks(&s.train)),
    )
    .unwrap();
    let j_oracle = mean_test_j(&s, &oracle.model);

    let weak = run_em(&recs, &s.labels, &base, &s.features).unwrap();
    let j_weak = mean_test_j(&s, &weak.model);

    assert!(j_oracle > 0.65, "oracle J {j_oracle} too low to be learnable");
    assert!(
        j_weak < j_oracle,
        "weak J {j_weak} exceeds supervised oracle {j_oracle}"
    );
    assert!(j_weak > 0.5, "weak J {j_weak} fell far behind the oracle");
}

/// The EM iterations must add substantial value over training once on the
/// raw seed disks, whose fixed 0.5 test cut barely fires.
#[test]
fn em_refinement_beats_frozen_disk_training() {
    let s = setup();
    let recs = records(&s.train);
    let base = EmConfig::default();

    let j_frozen = mean_test_j(
        &s,
        &run_em(&recs, &s.labels, &frozen(&base), &s.features)
            .unwrap()
            .model,
    );
    let j_em = mean_test_j(
        &s,
        &run_em(&recs, &s.labels, &base, &s.features).unwrap().model,
    );
    assert!(
        j_em > j_frozen + 0.3,
        "EM {j_em} did not clearly improve on frozen init {j_frozen}"
    );
}

/// One fixed 0.5 E-step from ground-truth init must keep the pseudo-masks
/// closer to the truth than the keypoint disks it replaces.
#[test]
fn fixed_half_e_step_preserves_supervised_masks() {
    let s = setup();
    let recs = records(&s.train);
    let cfg = EmConfig {
        em_iterations: 1,
        policy: ThresholdPolicy {
            mode: ThresholdMode::Fixed(0.5),
            force_keypoints_positive: false,
            ..ThresholdPolicy::default()
        },
        ..EmConfig::default()
    };
    let out =
        run_em_with_init(&recs, &s.labels, &cfg, &s.features, Some(gt_masks(&s.train))).unwrap();

    let gts: Vec<&MaskStack> = s.train.iter().map(|r| &r.gt).collect();
    let masks: Vec<&MaskStack> = out.pseudo_masks.iter().collect();
    let refined = evaluate(&gts, &masks, &s.labels).unwrap().mean;

    let disks: Vec<MaskStack> = s
        .train
        .iter()
        .map(|r| {
            initial_mask(
                r.image.width(),
                r.image.height(),
                s.labels.count(),
                &r.keypoints,
                &InitConfig::default(),
            )
        })
        .collect();
    let disk_refs: Vec<&MaskStack> = disks.iter().collect();
    let seeded = evaluate(&gts, &disk_refs, &s.labels).unwrap().mean;

    assert!(
        refined > seeded + 0.1,
        "post-E-step agreement {refined} not clearly above disk agreement {seeded}"
    );
}
