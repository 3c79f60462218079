//! Weakly supervised affordance segmentation from keypoint annotations.
//!
//! The training signal is a handful of clicked keypoints per image instead of
//! dense masks. Pseudo-masks are seeded as disks around the keypoints, a
//! pixel-wise multi-label classifier is trained on them, and an EM loop
//! alternates between retraining and re-binarizing the classifier's
//! probability maps with per-image adaptive thresholds. Model selection runs
//! without any held-out masks: an approximated Jaccard index is estimated
//! from keypoint hit rates alone.

pub mod approx_cv;
pub mod binarization;
pub mod classifier;
pub mod data_model;
pub mod em_trainer;
pub mod evaluation;
pub mod initialization;
pub mod seed;
pub mod synth;
