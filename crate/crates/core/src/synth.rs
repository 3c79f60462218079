//! Synthetic multi-label datasets with exact ground truth.
//!
//! Images are colored disks and rectangles on a gray background. Shapes are
//! painted back to front: the last shape covering a pixel owns both its
//! color and its label set, so at zero noise a pixel's color identifies its
//! label set exactly. A shape carries one class, or two when the overlap
//! roll succeeds, in which case it is drawn in the blend of both class
//! colors. Per-image color jitter and a per-image size multiplier vary
//! appearance and region scale between images; the size multiplier is what
//! makes per-image adaptive thresholds pay off.
//!
//! Everything derives from `SynthConfig::seed` through per-image streams, so
//! generation parallelizes without losing determinism.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::{
    write_manifest, write_mask_stack, DataError, DatasetManifest, ImageTensor, Keypoint,
    KeypointAnnotation, LabelSpace, ManifestRecord, MaskStack,
};
use crate::data_model::write_image;
use crate::em_trainer::TrainRecord;
use crate::seed::{derive_seed, stream_rng, Rng};
use rand::seq::index::sample as sample_indices;
use rand::Rng as _;

/// Base color and per-image jitter amplitude of one class.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ClassAppearance {
    pub color: [f64; 3],
    pub jitter: f64,
}

/// Generator settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Square image edge length.
    pub image_size: usize,
    pub class_count: usize,
    /// Inclusive range of shapes per image.
    pub shapes_per_image: (usize, usize),
    /// One appearance per class; filled from a fixed palette when empty.
    pub appearances: Vec<ClassAppearance>,
    /// Jitter amplitude used for palette-derived appearances.
    pub color_jitter: f64,
    pub background_color: [f64; 3],
    pub background_jitter: f64,
    /// Amplitude of the per-image multiplicative gain: each image is scaled
    /// by a factor from `[1 - b, 1 + b]`.
    pub brightness_jitter: f64,
    /// Amplitude of uniform per-pixel, per-channel noise.
    pub noise: f64,
    /// Chance that a shape carries a second class.
    pub overlap_probability: f64,
    pub keypoints_per_class: usize,
    /// Per-image size multiplier is drawn from `[1, size_variation]`.
    pub size_variation: f64,
    /// Base shape radius as a fraction of the image edge.
    pub base_radius_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            class_count: 3,
            shapes_per_image: (1, 3),
            appearances: Vec::new(),
            color_jitter: 0.12,
            background_color: [0.42, 0.42, 0.42],
            background_jitter: 0.05,
            brightness_jitter: 0.2,
            noise: 0.06,
            overlap_probability: 0.25,
            keypoints_per_class: 1,
            size_variation: 3.0,
            base_radius_fraction: 0.09,
            seed: 0,
        }
    }
}

const PALETTE: [[f64; 3]; 6] = [
    [0.85, 0.25, 0.25],
    [0.25, 0.80, 0.30],
    [0.30, 0.35, 0.85],
    [0.85, 0.80, 0.25],
    [0.75, 0.30, 0.80],
    [0.25, 0.75, 0.75],
];

const CLASS_NAMES: [&str; 6] = ["grasp", "cut", "support", "pound", "scoop", "contain"];

/// Display names for `count` synthetic affordance classes.
pub fn label_names(count: usize) -> Vec<String> {
    (0..count)
        .map(|i| {
            CLASS_NAMES
                .get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("aff{i}"))
        })
        .collect()
}

impl SynthConfig {
    fn validate(&self) -> Result<(), DataError> {
        let fail = |detail: String| {
            Err(DataError::Invalid {
                what: "synth config".into(),
                detail,
            })
        };
        if self.image_size < 16 {
            return fail(format!("image_size {} below 16", self.image_size));
        }
        if self.class_count < 2 {
            return fail(format!("class_count {} below 2", self.class_count));
        }
        if self.keypoints_per_class < 1 {
            return fail("keypoints_per_class must be at least 1".into());
        }
        if self.noise < 0.0 {
            return fail(format!("negative noise {}", self.noise));
        }
        if self.shapes_per_image.0 > self.shapes_per_image.1 || self.shapes_per_image.0 == 0 {
            return fail(format!("bad shapes_per_image range {:?}", self.shapes_per_image));
        }
        if !(0.0..=1.0).contains(&self.overlap_probability) {
            return fail(format!("overlap_probability {}", self.overlap_probability));
        }
        if self.size_variation < 1.0 {
            return fail(format!("size_variation {} below 1", self.size_variation));
        }
        if !(0.0..1.0).contains(&self.brightness_jitter) {
            return fail(format!("brightness_jitter {} outside [0, 1)", self.brightness_jitter));
        }
        if !self.appearances.is_empty() && self.appearances.len() != self.class_count {
            return fail(format!(
                "{} appearances for {} classes",
                self.appearances.len(),
                self.class_count
            ));
        }
        Ok(())
    }

    fn appearance(&self, class: usize) -> ClassAppearance {
        if self.appearances.is_empty() {
            ClassAppearance {
                color: PALETTE[class % PALETTE.len()],
                jitter: self.color_jitter,
            }
        } else {
            self.appearances[class]
        }
    }
}

/// One generated image with its exact ground truth and sampled keypoints.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecord {
    pub image: ImageTensor,
    pub gt: MaskStack,
    pub keypoints: KeypointAnnotation,
}

impl SynthRecord {
    /// The weakly supervised view: image and keypoints, no ground truth.
    pub fn to_train_record(&self) -> TrainRecord {
        TrainRecord {
            image: self.image.clone(),
            keypoints: self.keypoints.clone(),
        }
    }
}

enum ShapeKind {
    Disk,
    Rectangle,
}

struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    classes: Vec<usize>,
}

impl Shape {
    fn covers(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 - self.cx;
        let dy = y as f64 - self.cy;
        match self.kind {
            ShapeKind::Disk => (dx / self.rx).powi(2) + (dy / self.ry).powi(2) <= 1.0,
            ShapeKind::Rectangle => dx.abs() <= self.rx && dy.abs() <= self.ry,
        }
    }
}

fn jitter_color(base: [f64; 3], amount: f64, rng: &mut Rng) -> [f64; 3] {
    let mut c = base;
    for v in &mut c {
        *v = (*v + amount * rng.random_range(-1.0..=1.0)).clamp(0.0, 1.0);
    }
    c
}

fn generate_one(cfg: &SynthConfig, index: usize) -> SynthRecord {
    let mut rng = stream_rng(cfg.seed, &format!("image/{index}"));
    let size = cfg.image_size;

    let size_mult = rng.random_range(1.0..=cfg.size_variation.max(1.0 + f64::EPSILON));
    let gain = 1.0 + cfg.brightness_jitter * rng.random_range(-1.0..=1.0);
    let image_colors: Vec<[f64; 3]> = (0..cfg.class_count)
        .map(|class| {
            let app = cfg.appearance(class);
            jitter_color(app.color, app.jitter, &mut rng)
        })
        .collect();
    let bg = jitter_color(cfg.background_color, cfg.background_jitter, &mut rng);

    let count = rng.random_range(cfg.shapes_per_image.0..=cfg.shapes_per_image.1);
    let shapes: Vec<Shape> = (0..count)
        .map(|_| {
            let class = rng.random_range(0..cfg.class_count);
            let mut classes = vec![class];
            if rng.random::<f64>() < cfg.overlap_probability {
                let partner = (class + rng.random_range(1..cfg.class_count)) % cfg.class_count;
                classes.push(partner);
                classes.sort_unstable();
            }
            let base = cfg.base_radius_fraction * size as f64 * size_mult;
            let kind = if rng.random::<bool>() {
                ShapeKind::Disk
            } else {
                ShapeKind::Rectangle
            };
            Shape {
                kind,
                cx: rng.random_range(0.0..size as f64),
                cy: rng.random_range(0.0..size as f64),
                rx: base * rng.random_range(0.7..=1.3),
                ry: base * rng.random_range(0.7..=1.3),
                classes,
            }
        })
        .collect();

    let mut data = vec![0.0f32; size * size * 3];
    let mut gt = MaskStack::zeros(size, size, cfg.class_count);
    for y in 0..size {
        for x in 0..size {
            // Last covering shape wins the pixel outright.
            let owner = shapes.iter().rev().find(|s| s.covers(x, y));
            let color = match owner {
                None => bg,
                Some(shape) => {
                    let mut mix = [0.0f64; 3];
                    for &class in &shape.classes {
                        for (m, c) in mix.iter_mut().zip(image_colors[class]) {
                            *m += c;
                        }
                    }
                    for m in &mut mix {
                        *m /= shape.classes.len() as f64;
                    }
                    mix
                }
            };
            let i = (y * size + x) * 3;
            for ch in 0..3 {
                data[i + ch] = (color[ch] * gain).clamp(0.0, 1.0) as f32;
            }
            if let Some(shape) = owner {
                for class in 0..cfg.class_count {
                    gt.set(class, x, y, shape.classes.contains(&class));
                }
            }
        }
    }
    if cfg.noise > 0.0 {
        for v in &mut data {
            *v = (*v + (cfg.noise * rng.random_range(-1.0..=1.0)) as f32).clamp(0.0, 1.0);
        }
    }

    let image = ImageTensor::new(size, size, 3, data).expect("well-formed synthetic image");
    let kp_seed = derive_seed(cfg.seed, &format!("keypoints/{index}"));
    let (keypoints, short) = sample_keypoints(&gt, cfg.keypoints_per_class, kp_seed);
    for class in short {
        log::warn!("image {index}: class {class} has fewer pixels than requested keypoints");
    }
    SynthRecord { image, gt, keypoints }
}

/// Generate `n` images. Deterministic in the config seed; parallel across
/// images.
pub fn generate(cfg: &SynthConfig, n: usize) -> Result<Vec<SynthRecord>, DataError> {
    cfg.validate()?;
    Ok((0..n).into_par_iter().map(|i| generate_one(cfg, i)).collect())
}

/// Sample `k` keypoints per non-empty class plane, uniformly without
/// replacement. Planes with fewer than `k` pixels contribute all of them;
/// the second return value lists those classes.
pub fn sample_keypoints(gt: &MaskStack, k: usize, seed: u64) -> (KeypointAnnotation, Vec<usize>) {
    let mut rng = stream_rng(seed, "sample_keypoints");
    let mut entries = Vec::new();
    let mut short = Vec::new();
    let width = gt.width();
    for class in 0..gt.classes() {
        let candidates: Vec<usize> = gt
            .plane(class)
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| (b == 1).then_some(i))
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let take = k.min(candidates.len());
        if take < k {
            short.push(class);
        }
        let mut picks: Vec<usize> = sample_indices(&mut rng, candidates.len(), take).into_vec();
        picks.sort_unstable();
        for p in picks {
            let i = candidates[p];
            entries.push(Keypoint {
                class,
                x: i % width,
                y: i / width,
            });
        }
    }
    (KeypointAnnotation::new(entries), short)
}

/// Write records as a standard dataset directory: `images/`, `gt/`, and a
/// manifest referencing both. Returns the manifest path.
pub fn write_dataset(
    records: &[SynthRecord],
    labels: &LabelSpace,
    dir: &Path,
) -> Result<PathBuf, DataError> {
    let images_dir = dir.join("images");
    let gt_dir = dir.join("gt");
    std::fs::create_dir_all(&images_dir).map_err(|e| DataError::io(&images_dir, e))?;
    std::fs::create_dir_all(&gt_dir).map_err(|e| DataError::io(&gt_dir, e))?;

    let mut manifest_records = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let stem = format!("rec{i:04}");
        let image_path = images_dir.join(format!("{stem}.ppm"));
        write_image(&rec.image, &image_path)?;
        write_mask_stack(&rec.gt, &gt_dir, &stem)?;
        let gt_paths: Vec<PathBuf> = (0..rec.gt.classes())
            .map(|class| gt_dir.join(crate::data_model::mask_plane_filename(&stem, class)))
            .collect();
        manifest_records.push(ManifestRecord {
            image: image_path,
            keypoints: rec.keypoints.clone(),
            gt_masks: Some(gt_paths),
            width: rec.image.width(),
            height: rec.image.height(),
        });
    }
    let manifest = DatasetManifest {
        labels: labels.clone(),
        records: manifest_records,
    };
    let path = dir.join("manifest.json");
    write_manifest(&manifest, &path)?;
    Ok(path)
}

/// The pinned configuration behind all directional comparisons: 3 classes,
/// 48-pixel images, strong size variation, moderate noise.
pub fn benchmark_config() -> SynthConfig {
    SynthConfig {
        image_size: 48,
        class_count: 3,
        shapes_per_image: (2, 4),
        // Saturated base hues against mid-gray give a strong color signal;
        // per-image jitter and gain still move the apparent colors enough
        // that one global threshold per class cannot fit every image.
        appearances: vec![
            ClassAppearance { color: [0.95, 0.20, 0.15], jitter: 0.15 },
            ClassAppearance { color: [0.15, 0.90, 0.20], jitter: 0.15 },
            ClassAppearance { color: [0.20, 0.30, 0.95], jitter: 0.15 },
        ],
        color_jitter: 0.12,
        background_color: [0.42, 0.42, 0.42],
        background_jitter: 0.05,
        brightness_jitter: 0.30,
        noise: 0.02,
        overlap_probability: 0.25,
        keypoints_per_class: 1,
        size_variation: 2.5,
        base_radius_fraction: 0.12,
        seed: 60_601,
    }
}

pub const BENCHMARK_TRAIN: usize = 90;
pub const BENCHMARK_TEST: usize = 45;

/// The pinned benchmark instance: 90 training and 45 test records.
pub fn benchmark_dataset() -> (Vec<SynthRecord>, Vec<SynthRecord>, LabelSpace) {
    let cfg = benchmark_config();
    let labels = LabelSpace::new(label_names(cfg.class_count)).expect("palette names are valid");
    let mut all = generate(&cfg, BENCHMARK_TRAIN + BENCHMARK_TEST).expect("benchmark config is valid");
    let test = all.split_off(BENCHMARK_TRAIN);
    (all, test, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        let a = generate(&cfg, 4).unwrap();
        let b = generate(&cfg, 4).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthConfig { seed: 9, ..cfg }, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_noise_color_identifies_the_label_set() {
        let cfg = SynthConfig {
            noise: 0.0,
            background_jitter: 0.0,
            brightness_jitter: 0.0,
            appearances: (0..3)
                .map(|i| ClassAppearance { color: PALETTE[i], jitter: 0.0 })
                .collect(),
            ..SynthConfig::default()
        };
        let records = generate(&cfg, 6).unwrap();
        let mut seen: HashMap<[u32; 3], Vec<bool>> = HashMap::new();
        for rec in &records {
            for y in 0..rec.image.height() {
                for x in 0..rec.image.width() {
                    let key =
                        [0, 1, 2].map(|c| rec.image.value(x, y, c).to_bits());
                    let label_set: Vec<bool> =
                        (0..3).map(|l| rec.gt.get(l, x, y)).collect();
                    match seen.get(&key) {
                        None => {
                            seen.insert(key, label_set);
                        }
                        Some(prev) => assert_eq!(prev, &label_set, "color {key:?}"),
                    }
                }
            }
        }
        assert!(seen.len() > 1);
    }

    #[test]
    fn forced_overlap_with_two_classes_duplicates_the_planes() {
        let cfg = SynthConfig {
            class_count: 2,
            shapes_per_image: (1, 1),
            overlap_probability: 1.0,
            ..SynthConfig::default()
        };
        for rec in generate(&cfg, 5).unwrap() {
            assert_eq!(rec.gt.plane(0), rec.gt.plane(1));
            assert!(rec.gt.count_ones(0) > 0, "shape entirely off screen");
        }
    }

    #[test]
    fn keypoints_lie_inside_their_class_regions() {
        let cfg = SynthConfig {
            keypoints_per_class: 3,
            ..SynthConfig::default()
        };
        let records = generate(&cfg, 8).unwrap();
        let mut total = 0;
        for rec in &records {
            for kp in rec.keypoints.entries() {
                assert!(rec.gt.get(kp.class, kp.x, kp.y));
                total += 1;
            }
        }
        assert!(total > 0);
    }

    #[test]
    fn keypoint_sampling_is_without_replacement_and_exhausts_small_regions() {
        let mut gt = MaskStack::zeros(8, 8, 2);
        gt.set(0, 1, 1, true);
        gt.set(0, 2, 1, true);
        gt.set(0, 3, 1, true);
        for y in 0..8 {
            for x in 0..8 {
                gt.set(1, x, y, true);
            }
        }
        let (kps, short) = sample_keypoints(&gt, 5, 7);
        assert_eq!(short, vec![0]);
        let class0: Vec<_> = kps.of_class(0).collect();
        assert_eq!(class0.len(), 3);
        let class1: Vec<_> = kps.of_class(1).collect();
        assert_eq!(class1.len(), 5);
        let mut positions: Vec<(usize, usize)> = class1.iter().map(|k| (k.x, k.y)).collect();
        positions.sort_unstable();
        positions.dedup();
        assert_eq!(positions.len(), 5, "duplicate keypoint positions");
    }

    #[test]
    fn benchmark_region_areas_vary_at_least_fourfold() {
        let (train, _, _) = benchmark_dataset();
        let areas: Vec<usize> = train
            .iter()
            .map(|r| (0..r.gt.classes()).map(|c| r.gt.count_ones(c)).sum())
            .filter(|&a| a > 0)
            .collect();
        let max = *areas.iter().max().unwrap() as f64;
        let min = *areas.iter().min().unwrap() as f64;
        assert!(max / min >= 4.0, "area spread {max}/{min}");
    }

    #[test]
    fn dataset_round_trips_through_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            image_size: 16,
            ..SynthConfig::default()
        };
        let records = generate(&cfg, 3).unwrap();
        let labels = LabelSpace::new(label_names(cfg.class_count)).unwrap();
        let manifest_path = write_dataset(&records, &labels, dir.path()).unwrap();
        let loaded = crate::data_model::load_manifest(&manifest_path).unwrap();
        assert_eq!(loaded.records.len(), 3);
        assert_eq!(loaded.labels.names(), labels.names());
        for (rec, orig) in loaded.records.iter().zip(&records) {
            assert_eq!(rec.keypoints, orig.keypoints);
            let gt = crate::data_model::read_mask_stack_from_paths(
                rec.gt_masks.as_ref().unwrap(),
            )
            .unwrap();
            assert_eq!(&gt, &orig.gt);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = SynthConfig::default();
        for bad in [
            SynthConfig { image_size: 8, ..base.clone() },
            SynthConfig { class_count: 1, ..base.clone() },
            SynthConfig { keypoints_per_class: 0, ..base.clone() },
            SynthConfig { noise: -0.1, ..base.clone() },
            SynthConfig { shapes_per_image: (3, 1), ..base.clone() },
            SynthConfig { size_variation: 0.5, ..base.clone() },
        ] {
            assert!(generate(&bad, 1).is_err());
        }
    }
}
