//! Pixel-wise multi-label classifier.
//!
//! One independent logistic regressor per affordance class, all sharing a
//! feature extraction pass. Training minimizes the summed per-pixel,
//! per-class cross-entropy plus an l2 penalty on the weights (never the
//! biases) with minibatch SGD. Everything is deterministic given the seed in
//! [`TrainConfig`].

mod features;

pub use features::{box_blur, extract_features, FeatureConfig, FeatureMatrix};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{DataError, MaskStack, ProbMapStack};
use crate::seed::seeded_rng;
use rand::seq::SliceRandom;

/// Optimizer settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Pixels per SGD minibatch, pooled across all training images.
    pub minibatch_pixels: usize,
    /// l2 strength, applied to weights only.
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            epochs: 20,
            minibatch_pixels: 4096,
            l2: 1e-4,
            seed: 0,
        }
    }
}

/// Loss trace of one training run. Losses are the full objective (summed
/// cross-entropy plus l2 penalty) over the entire training set.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged: non-finite loss after epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("bad training input: {detail}")]
    Shape { detail: String },
}

/// Per-class linear scorers over shared per-pixel features.
///
/// Weights are stored as `label_count` rows of `feature_dim + 1` values, the
/// last entry of each row being the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterModel {
    label_count: usize,
    feature_dim: usize,
    weights: Vec<f64>,
}

#[inline]
pub fn sigmoid(g: f64) -> f64 {
    1.0 / (1.0 + (-g).exp())
}

/// Numerically stable `-[y ln p + (1-y) ln (1-p)]` for `p = sigmoid(g)`.
#[inline]
pub fn bce_with_logits(g: f64, y: f64) -> f64 {
    g.max(0.0) - g * y + (-g.abs()).exp().ln_1p()
}

impl SegmenterModel {
    pub fn zeros(label_count: usize, feature_dim: usize) -> Self {
        SegmenterModel {
            label_count,
            feature_dim,
            weights: vec![0.0; label_count * (feature_dim + 1)],
        }
    }

    pub fn label_count(&self) -> usize {
        self.label_count
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Build a model from flat weights, `label_count` rows of
    /// `feature_dim + 1` values with the bias last.
    pub fn from_weights(
        label_count: usize,
        feature_dim: usize,
        weights: Vec<f64>,
    ) -> Result<Self, TrainError> {
        if weights.len() != label_count * (feature_dim + 1) {
            return Err(TrainError::Shape {
                detail: format!(
                    "{} weights for {label_count} rows of {}",
                    weights.len(),
                    feature_dim + 1
                ),
            });
        }
        Ok(SegmenterModel {
            label_count,
            feature_dim,
            weights,
        })
    }

    /// All weights in storage order.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight row of one class, bias last.
    pub fn class_row(&self, class: usize) -> &[f64] {
        let stride = self.feature_dim + 1;
        &self.weights[class * stride..(class + 1) * stride]
    }

    fn class_row_mut(&mut self, class: usize) -> &mut [f64] {
        let stride = self.feature_dim + 1;
        &mut self.weights[class * stride..(class + 1) * stride]
    }

    #[inline]
    pub fn logit(&self, class: usize, row: &[f64]) -> f64 {
        let w = self.class_row(class);
        let mut acc = w[self.feature_dim];
        for d in 0..self.feature_dim {
            acc += w[d] * row[d];
        }
        acc
    }

    /// Per-class posteriors for every pixel of one image.
    pub fn predict(&self, features: &FeatureMatrix) -> ProbMapStack {
        assert_eq!(
            features.dim(),
            self.feature_dim,
            "feature dim {} does not match model dim {}",
            features.dim(),
            self.feature_dim
        );
        let n = features.pixel_count();
        let mut values = vec![0.0f32; n * self.label_count];
        for class in 0..self.label_count {
            let plane = &mut values[class * n..(class + 1) * n];
            for (i, slot) in plane.iter_mut().enumerate() {
                *slot = sigmoid(self.logit(class, features.row(i))) as f32;
            }
        }
        ProbMapStack::new(features.width(), features.height(), self.label_count, values)
            .expect("sigmoid output within [0, 1]")
    }

    /// Sum of squared weights, biases excluded.
    fn weight_norm_sq(&self) -> f64 {
        (0..self.label_count)
            .map(|c| {
                self.class_row(c)[..self.feature_dim]
                    .iter()
                    .map(|w| w * w)
                    .sum::<f64>()
            })
            .sum()
    }

    const MAGIC: &'static [u8] = b"WSM1\n";

    /// Serialize as `WSM1\n<L> <D>\n` followed by little-endian f64 weight
    /// rows.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut out = Vec::with_capacity(16 + self.weights.len() * 8);
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(format!("{} {}\n", self.label_count, self.feature_dim).as_bytes());
        for &w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        fs::write(path, out).map_err(|e| DataError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
        if bytes.len() < Self::MAGIC.len() || &bytes[..Self::MAGIC.len()] != Self::MAGIC {
            return Err(DataError::BadMagic {
                path: path.display().to_string(),
                expected: "WSM1".into(),
                found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
            });
        }
        let rest = &bytes[Self::MAGIC.len()..];
        let line_end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| DataError::Header {
                path: path.display().to_string(),
                detail: "missing dimension line".into(),
            })?;
        let dims_line = String::from_utf8_lossy(&rest[..line_end]);
        let parts: Vec<&str> = dims_line.split_whitespace().collect();
        let parse = |s: &str| -> Result<usize, DataError> {
            s.parse().map_err(|e| DataError::Header {
                path: path.display().to_string(),
                detail: format!("bad dimension in `{dims_line}`: {e}"),
            })
        };
        if parts.len() != 2 {
            return Err(DataError::Header {
                path: path.display().to_string(),
                detail: format!("expected `labels dim`, got `{dims_line}`"),
            });
        }
        let label_count = parse(parts[0])?;
        let feature_dim = parse(parts[1])?;
        if label_count == 0 || feature_dim == 0 {
            return Err(DataError::Header {
                path: path.display().to_string(),
                detail: format!("degenerate model shape {label_count}x{feature_dim}"),
            });
        }
        let payload = &rest[line_end + 1..];
        let expected = label_count * (feature_dim + 1) * 8;
        if payload.len() < expected {
            return Err(DataError::Truncated {
                path: path.display().to_string(),
            });
        }
        if payload.len() > expected {
            return Err(DataError::TrailingData {
                path: path.display().to_string(),
            });
        }
        let mut weights = Vec::with_capacity(label_count * (feature_dim + 1));
        for chunk in payload.chunks_exact(8) {
            let mut buf = [0u8; 8];
            buf.copy_from_slice(chunk);
            let v = f64::from_le_bytes(buf);
            if !v.is_finite() {
                return Err(DataError::ValueOutOfRange {
                    path: path.display().to_string(),
                    value: v as f32,
                });
            }
            weights.push(v);
        }
        Ok(SegmenterModel {
            label_count,
            feature_dim,
            weights,
        })
    }
}

/// Full objective: summed cross-entropy over every pixel and class of every
/// image, plus `0.5 * l2 * ||w||^2` over weights.
pub fn objective(
    model: &SegmenterModel,
    features: &[&FeatureMatrix],
    targets: &[&MaskStack],
    l2: f64,
) -> f64 {
    let mut loss = 0.0;
    for (feats, mask) in features.iter().zip(targets) {
        for class in 0..model.label_count {
            for (i, &label) in mask.plane(class).iter().enumerate() {
                let g = model.logit(class, feats.row(i));
                loss += bce_with_logits(g, f64::from(label));
            }
        }
    }
    loss + 0.5 * l2 * model.weight_norm_sq()
}

/// Analytic gradient of [`objective`] with respect to every weight and bias,
/// in model storage order.
pub fn objective_gradient(
    model: &SegmenterModel,
    features: &[&FeatureMatrix],
    targets: &[&MaskStack],
    l2: f64,
) -> Vec<f64> {
    let stride = model.feature_dim + 1;
    let mut grad = vec![0.0; model.label_count * stride];
    for (feats, mask) in features.iter().zip(targets) {
        for class in 0..model.label_count {
            let gr = &mut grad[class * stride..(class + 1) * stride];
            for (i, &label) in mask.plane(class).iter().enumerate() {
                let row = feats.row(i);
                let delta = sigmoid(model.logit(class, row)) - f64::from(label);
                for d in 0..model.feature_dim {
                    gr[d] += delta * row[d];
                }
                gr[model.feature_dim] += delta;
            }
        }
    }
    for class in 0..model.label_count {
        let w = model.class_row(class);
        let gr = &mut grad[class * stride..(class + 1) * stride];
        for d in 0..model.feature_dim {
            gr[d] += l2 * w[d];
        }
    }
    grad
}

fn validate_training_input(
    features: &[&FeatureMatrix],
    targets: &[&MaskStack],
    label_count: usize,
) -> Result<(), TrainError> {
    if features.is_empty() || features.len() != targets.len() {
        return Err(TrainError::Shape {
            detail: format!(
                "{} feature matrices vs {} target masks",
                features.len(),
                targets.len()
            ),
        });
    }
    let dim = features[0].dim();
    for (i, (f, t)) in features.iter().zip(targets).enumerate() {
        if f.dim() != dim {
            return Err(TrainError::Shape {
                detail: format!("image {i} has feature dim {}, image 0 has {dim}", f.dim()),
            });
        }
        if t.classes() != label_count {
            return Err(TrainError::Shape {
                detail: format!(
                    "mask {i} has {} classes, label space has {label_count}",
                    t.classes()
                ),
            });
        }
        if t.width() != f.width() || t.height() != f.height() {
            return Err(TrainError::Shape {
                detail: format!("image {i}: mask and features disagree on size"),
            });
        }
    }
    Ok(())
}

/// Train a fresh model on pseudo-masks. Weights start at zero; pixels are
/// pooled across images and revisited in a new shuffled order each epoch.
pub fn train_with_report(
    features: &[&FeatureMatrix],
    targets: &[&MaskStack],
    label_count: usize,
    cfg: &TrainConfig,
) -> Result<(SegmenterModel, TrainReport), TrainError> {
    validate_training_input(features, targets, label_count)?;
    let dim = features[0].dim();
    let mut model = SegmenterModel::zeros(label_count, dim);
    let stride = dim + 1;

    let mut pool: Vec<(u32, u32)> = features
        .iter()
        .enumerate()
        .flat_map(|(img, f)| (0..f.pixel_count() as u32).map(move |px| (img as u32, px)))
        .collect();
    let batch = cfg.minibatch_pixels.max(1);
    let mut rng = seeded_rng(cfg.seed);

    let initial_loss = objective(&model, features, targets, cfg.l2);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut grad = vec![0.0f64; label_count * stride];

    for epoch in 0..cfg.epochs {
        pool.shuffle(&mut rng);
        for chunk in pool.chunks(batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &(img, px) in chunk {
                let feats = features[img as usize];
                let mask = targets[img as usize];
                let row = feats.row(px as usize);
                for class in 0..label_count {
                    let y = f64::from(mask.plane(class)[px as usize]);
                    let delta = sigmoid(model.logit(class, row)) - y;
                    let gr = &mut grad[class * stride..(class + 1) * stride];
                    for d in 0..dim {
                        gr[d] += delta * row[d];
                    }
                    gr[dim] += delta;
                }
            }
            // A batch estimates the objective gradient scaled by 1/pool, so
            // the matching penalty share per update is l2/pool. The SGD fixed
            // point then minimizes [`objective`] itself.
            let step = cfg.learning_rate / chunk.len() as f64;
            let decay = cfg.learning_rate * cfg.l2 / pool.len() as f64;
            for class in 0..label_count {
                let gr = &grad[class * stride..(class + 1) * stride];
                // Split borrows: copy the gradient slice bound first.
                let g_bias = gr[dim];
                let g_w: Vec<f64> = gr[..dim].to_vec();
                let w = model.class_row_mut(class);
                for d in 0..dim {
                    w[d] -= step * g_w[d] + decay * w[d];
                }
                w[dim] -= step * g_bias;
            }
        }
        let loss = objective(&model, features, targets, cfg.l2);
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        epoch_losses.push(loss);
    }

    let final_loss = *epoch_losses.last().unwrap_or(&initial_loss);
    Ok((
        model,
        TrainReport {
            initial_loss,
            final_loss,
            epoch_losses,
        },
    ))
}
