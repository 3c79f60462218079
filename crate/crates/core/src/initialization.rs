//! Pseudo-mask initialization from keypoints.
//!
//! Each keypoint stamps a filled disk into its class plane. The disk radius
//! scales with image width, so the same fraction covers roughly the same
//! portion of the scene across resolutions. Disks from multiple keypoints of
//! one class union together; disks are clipped at image borders.

use serde::{Deserialize, Serialize};

use crate::data_model::{KeypointAnnotation, MaskStack};

/// Controls the size of seed disks.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    /// Disk radius as a fraction of image width.
    pub sigma_fraction: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            sigma_fraction: 0.06,
        }
    }
}

/// Seed disk radius in pixels for an image of the given width.
pub fn disk_radius(width: usize, sigma_fraction: f64) -> f64 {
    sigma_fraction * width as f64
}

/// Set every pixel within Euclidean distance `radius` (inclusive) of
/// `(cx, cy)` in plane `class`.
pub fn stamp_disk(mask: &mut MaskStack, class: usize, cx: usize, cy: usize, radius: f64) {
    let r = radius.max(0.0);
    let r2 = r * r;
    let ri = r.floor() as isize;
    let (w, h) = (mask.width() as isize, mask.height() as isize);
    let (cx, cy) = (cx as isize, cy as isize);
    for dy in -ri..=ri {
        let y = cy + dy;
        if y < 0 || y >= h {
            continue;
        }
        for dx in -ri..=ri {
            let x = cx + dx;
            if x < 0 || x >= w {
                continue;
            }
            if (dx * dx + dy * dy) as f64 <= r2 {
                mask.set(class, x as usize, y as usize, true);
            }
        }
    }
}

/// Build the pseudo-mask of one image from its keypoints.
pub fn initial_mask(
    width: usize,
    height: usize,
    classes: usize,
    keypoints: &KeypointAnnotation,
    config: &InitConfig,
) -> MaskStack {
    let radius = disk_radius(width, config.sigma_fraction);
    let mut mask = MaskStack::zeros(width, height, classes);
    for kp in keypoints.entries() {
        stamp_disk(&mut mask, kp.class, kp.x, kp.y, radius);
    }
    mask
}
