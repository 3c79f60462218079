//! Per-pixel feature extraction.
//!
//! A pixel's feature row concatenates, in this order:
//!
//! 1. raw channel values,
//! 2. for each smoothing scale `s`: channels box-blurred with radius `s`,
//! 3. for each window radius `r`: per-channel local means, then per-channel
//!    local variances over the `(2r+1)^2` window,
//! 4. if enabled: normalized coordinates `x / width`, `y / height`.
//!
//! All windows use edge-replicated borders, so the feature dimension is
//! independent of pixel position.

use serde::{Deserialize, Serialize};

use crate::data_model::ImageTensor;

/// Which per-pixel features to extract.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Box-blur radii for smoothed channel copies.
    pub smoothing_scales: Vec<usize>,
    /// Radii of the local mean / variance windows.
    pub window_radii: Vec<usize>,
    /// Append normalized pixel coordinates.
    pub include_coords: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            smoothing_scales: vec![1, 3],
            window_radii: vec![2, 4],
            include_coords: true,
        }
    }
}

impl FeatureConfig {
    /// Feature dimension for an image with `channels` channels.
    pub fn dim(&self, channels: usize) -> usize {
        let per_channel = 1 + self.smoothing_scales.len() + 2 * self.window_radii.len();
        channels * per_channel + if self.include_coords { 2 } else { 0 }
    }
}

/// Dense per-pixel feature rows, row-major: row `i` covers
/// `data[i * dim .. (i + 1) * dim]` for pixel `i = y * width + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    width: usize,
    height: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, pixel: usize) -> &[f64] {
        &self.data[pixel * self.dim..(pixel + 1) * self.dim]
    }
}

/// One-dimensional box filter along rows with edge replication.
fn box_pass_rows(src: &[f64], width: usize, height: usize, radius: usize, dst: &mut [f64]) {
    let r = radius as isize;
    let norm = 1.0 / (2 * radius + 1) as f64;
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        for x in 0..width as isize {
            let mut acc = 0.0;
            for dx in -r..=r {
                let xi = (x + dx).clamp(0, width as isize - 1) as usize;
                acc += row[xi];
            }
            dst[y * width + x as usize] = acc * norm;
        }
    }
}

fn box_pass_cols(src: &[f64], width: usize, height: usize, radius: usize, dst: &mut [f64]) {
    let r = radius as isize;
    let norm = 1.0 / (2 * radius + 1) as f64;
    for x in 0..width {
        for y in 0..height as isize {
            let mut acc = 0.0;
            for dy in -r..=r {
                let yi = (y + dy).clamp(0, height as isize - 1) as usize;
                acc += src[yi * width + x];
            }
            dst[y as usize * width + x] = acc * norm;
        }
    }
}

/// Separable box blur with edge replication.
pub fn box_blur(plane: &[f64], width: usize, height: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return plane.to_vec();
    }
    let mut tmp = vec![0.0; plane.len()];
    let mut out = vec![0.0; plane.len()];
    box_pass_rows(plane, width, height, radius, &mut tmp);
    box_pass_cols(&tmp, width, height, radius, &mut out);
    out
}

/// Extract the configured features for every pixel of `image`.
pub fn extract_features(image: &ImageTensor, config: &FeatureConfig) -> FeatureMatrix {
    let (w, h, c) = (image.width(), image.height(), image.channels());
    let n = w * h;
    let dim = config.dim(c);

    let planes: Vec<Vec<f64>> = (0..c).map(|ch| image.channel_plane(ch)).collect();
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(dim);
    for plane in &planes {
        columns.push(plane.clone());
    }
    for &scale in &config.smoothing_scales {
        for plane in &planes {
            columns.push(box_blur(plane, w, h, scale));
        }
    }
    for &radius in &config.window_radii {
        let means: Vec<Vec<f64>> = planes.iter().map(|p| box_blur(p, w, h, radius)).collect();
        for mean in &means {
            columns.push(mean.clone());
        }
        for (plane, mean) in planes.iter().zip(&means) {
            let sq: Vec<f64> = plane.iter().map(|v| v * v).collect();
            let mean_sq = box_blur(&sq, w, h, radius);
            // Catastrophic cancellation can push the variance a hair below
            // zero on constant regions; clamp it.
            let var: Vec<f64> = mean_sq
                .iter()
                .zip(mean)
                .map(|(&ms, &m)| (ms - m * m).max(0.0))
                .collect();
            columns.push(var);
        }
    }
    if config.include_coords {
        let mut xs = vec![0.0; n];
        let mut ys = vec![0.0; n];
        for y in 0..h {
            for x in 0..w {
                xs[y * w + x] = x as f64 / w as f64;
                ys[y * w + x] = y as f64 / h as f64;
            }
        }
        columns.push(xs);
        columns.push(ys);
    }
    debug_assert_eq!(columns.len(), dim);

    let mut data = vec![0.0; n * dim];
    for (d, column) in columns.iter().enumerate() {
        for (i, &v) in column.iter().enumerate() {
            data[i * dim + d] = v;
        }
    }
    FeatureMatrix {
        width: w,
        height: h,
        dim,
        data,
    }
}
