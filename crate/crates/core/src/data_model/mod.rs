//! Domain types, dataset manifests and file I/O.
//!
//! Conventions shared by every module in this crate:
//!
//! * Pixel index `i` is linearized row-major: `i = y * width + x`.
//! * Stacks ([`MaskStack`], [`ProbMapStack`]) store one full `width * height`
//!   plane per class, class-major.
//! * Image channel values are normalized to `[0, 1]` at load time
//!   (8-bit value / maxval).

mod manifest;
mod netpbm;
mod probmap;

pub use manifest::{load_manifest, write_manifest, DatasetManifest, ManifestRecord};
pub use netpbm::{
    mask_plane_filename, read_image, read_image_dims, read_mask_stack, read_mask_stack_from_paths,
    write_image, write_mask_stack, ImageDims,
};
pub use probmap::{read_prob_map, write_prob_map};

use thiserror::Error;

/// Errors raised by dataset loading and file I/O.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: expected magic {expected:?}, found {found:?}")]
    BadMagic {
        path: String,
        expected: String,
        found: String,
    },
    #[error("{path}: malformed header: {detail}")]
    Header { path: String, detail: String },
    #[error("{path}: file ends before the declared payload")]
    Truncated { path: String },
    #[error("{path}: trailing bytes after the declared payload")]
    TrailingData { path: String },
    #[error("{path}: mask pixel byte {value} is neither 0 nor 255")]
    BadMaskByte { path: String, value: u8 },
    #[error("{path}: probability value {value} outside [0, 1]")]
    ValueOutOfRange { path: String, value: f32 },
    #[error("{path}: dimension mismatch: {detail}")]
    DimensionMismatch { path: String, detail: String },
    #[error("manifest {path}: cannot parse: {detail}")]
    ManifestParse { path: String, detail: String },
    #[error("manifest record {index}: {detail}")]
    ManifestRecord { index: usize, detail: String },
    #[error("invalid label space: {0}")]
    LabelSpace(String),
    #[error("invalid {what}: {detail}")]
    Invalid { what: String, detail: String },
}

impl DataError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Ordered set of affordance class names.
///
/// The background is not a member; it is derived at evaluation time from the
/// absence of every class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    names: Vec<String>,
}

impl LabelSpace {
    /// Build a label space from class names. Names must be unique and
    /// non-empty, and at least one class must be present.
    pub fn new<I, S>(names: I) -> Result<Self, DataError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(DataError::LabelSpace("no class names given".into()));
        }
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(DataError::LabelSpace(format!("class {i} has empty name")));
            }
            if names[..i].contains(name) {
                return Err(DataError::LabelSpace(format!("duplicate class name {name:?}")));
            }
        }
        Ok(LabelSpace { names })
    }

    pub fn count(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// H×W×C raw image with channel-interleaved, row-major data in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self, DataError> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(DataError::Invalid {
                what: "image".into(),
                detail: format!("degenerate dimensions {width}x{height}x{channels}"),
            });
        }
        if data.len() != width * height * channels {
            return Err(DataError::Invalid {
                what: "image".into(),
                detail: format!(
                    "data length {} does not match {width}x{height}x{channels}",
                    data.len()
                ),
            });
        }
        Ok(ImageTensor {
            width,
            height,
            channels,
            data,
        })
    }

    /// Constant-valued image, mostly useful in tests.
    pub fn splat(width: usize, height: usize, channels: usize, value: f32) -> Self {
        ImageTensor::new(width, height, channels, vec![value; width * height * channels]).unwrap()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn value(&self, x: usize, y: usize, channel: usize) -> f32 {
        debug_assert!(x < self.width && y < self.height && channel < self.channels);
        self.data[(y * self.width + x) * self.channels + channel]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// One channel extracted as a contiguous plane, promoted to f64.
    pub fn channel_plane(&self, channel: usize) -> Vec<f64> {
        (0..self.pixel_count())
            .map(|i| f64::from(self.data[i * self.channels + channel]))
            .collect()
    }
}

/// A single weak annotation: affordance class present at pixel (x, y).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Keypoint {
    pub class: usize,
    pub x: usize,
    pub y: usize,
}

/// The weak label set of one image: zero or more keypoints per class.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeypointAnnotation {
    entries: Vec<Keypoint>,
}

impl KeypointAnnotation {
    pub fn new(entries: Vec<Keypoint>) -> Self {
        KeypointAnnotation { entries }
    }

    pub fn empty() -> Self {
        KeypointAnnotation::default()
    }

    pub fn entries(&self) -> &[Keypoint] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn of_class(&self, class: usize) -> impl Iterator<Item = &Keypoint> {
        self.entries.iter().filter(move |k| k.class == class)
    }

    pub fn has_class(&self, class: usize) -> bool {
        self.entries.iter().any(|k| k.class == class)
    }

    /// Check every keypoint against the owning image and label space.
    pub fn validate(&self, width: usize, height: usize, classes: usize) -> Result<(), String> {
        for (i, kp) in self.entries.iter().enumerate() {
            if kp.class >= classes {
                return Err(format!(
                    "keypoint {i} has class {} but only {classes} classes exist",
                    kp.class
                ));
            }
            if kp.x >= width || kp.y >= height {
                return Err(format!(
                    "keypoint {i} at ({}, {}) outside {width}x{height} image",
                    kp.x, kp.y
                ));
            }
        }
        Ok(())
    }
}

/// Per-pixel, per-class binary labels. Classes may overlap freely.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskStack {
    width: usize,
    height: usize,
    classes: usize,
    bits: Vec<u8>,
}

impl MaskStack {
    pub fn zeros(width: usize, height: usize, classes: usize) -> Self {
        MaskStack {
            width,
            height,
            classes,
            bits: vec![0; width * height * classes],
        }
    }

    /// Build from raw class-major bits; every value must be 0 or 1.
    pub fn from_bits(
        width: usize,
        height: usize,
        classes: usize,
        bits: Vec<u8>,
    ) -> Result<Self, DataError> {
        if bits.len() != width * height * classes {
            return Err(DataError::Invalid {
                what: "mask stack".into(),
                detail: format!(
                    "bit count {} does not match {width}x{height}x{classes}",
                    bits.len()
                ),
            });
        }
        if let Some(&bad) = bits.iter().find(|&&b| b > 1) {
            return Err(DataError::Invalid {
                what: "mask stack".into(),
                detail: format!("bit value {bad} is neither 0 nor 1"),
            });
        }
        Ok(MaskStack {
            width,
            height,
            classes,
            bits,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, class: usize, x: usize, y: usize) -> bool {
        self.bits[class * self.pixel_count() + y * self.width + x] == 1
    }

    #[inline]
    pub fn set(&mut self, class: usize, x: usize, y: usize, value: bool) {
        let n = self.pixel_count();
        self.bits[class * n + y * self.width + x] = u8::from(value);
    }

    pub fn plane(&self, class: usize) -> &[u8] {
        let n = self.pixel_count();
        &self.bits[class * n..(class + 1) * n]
    }

    pub fn plane_mut(&mut self, class: usize) -> &mut [u8] {
        let n = self.pixel_count();
        &mut self.bits[class * n..(class + 1) * n]
    }

    pub fn count_ones(&self, class: usize) -> usize {
        self.plane(class).iter().filter(|&&b| b == 1).count()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn same_dims(&self, other: &MaskStack) -> bool {
        self.width == other.width && self.height == other.height && self.classes == other.classes
    }
}

/// Per-pixel, per-class classifier posteriors in `[0, 1]`.
///
/// Classes are not normalized against each other: each class carries an
/// independent sigmoid posterior, and a pixel may be positive for several.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMapStack {
    width: usize,
    height: usize,
    classes: usize,
    values: Vec<f32>,
}

impl ProbMapStack {
    /// Build from raw class-major values; every value must be finite in `[0, 1]`.
    pub fn new(
        width: usize,
        height: usize,
        classes: usize,
        values: Vec<f32>,
    ) -> Result<Self, DataError> {
        if values.len() != width * height * classes {
            return Err(DataError::Invalid {
                what: "probability map".into(),
                detail: format!(
                    "value count {} does not match {width}x{height}x{classes}",
                    values.len()
                ),
            });
        }
        if let Some(&bad) = values
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(DataError::Invalid {
                what: "probability map".into(),
                detail: format!("value {bad} outside [0, 1]"),
            });
        }
        Ok(ProbMapStack {
            width,
            height,
            classes,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, class: usize, x: usize, y: usize) -> f32 {
        self.values[class * self.pixel_count() + y * self.width + x]
    }

    pub fn plane(&self, class: usize) -> &[f32] {
        let n = self.pixel_count();
        &self.values[class * n..(class + 1) * n]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_space_rejects_duplicates_and_empties() {
        assert!(LabelSpace::new(["a", "b"]).is_ok());
        assert!(LabelSpace::new(["a", "a"]).is_err());
        assert!(LabelSpace::new(["a", ""]).is_err());
        assert!(LabelSpace::new(Vec::<String>::new()).is_err());
    }

    #[test]
    fn label_space_index_name_bijection() {
        let ls = LabelSpace::new(["open", "cut", "hold"]).unwrap();
        assert_eq!(ls.count(), 3);
        for i in 0..ls.count() {
            assert_eq!(ls.index_of(ls.name(i)), Some(i));
        }
        assert_eq!(ls.index_of("pour"), None);
    }

    #[test]
    fn image_tensor_checks_length() {
        assert!(ImageTensor::new(2, 2, 1, vec![0.0; 4]).is_ok());
        assert!(ImageTensor::new(2, 2, 1, vec![0.0; 5]).is_err());
        assert!(ImageTensor::new(0, 2, 1, vec![]).is_err());
    }

    #[test]
    fn image_tensor_indexing_is_row_major_interleaved() {
        // 2x2 RGB ramp; pixel (x=1, y=0) starts at flat offset 3.
        let data: Vec<f32> = (0..12).map(|v| v as f32 / 12.0).collect();
        let img = ImageTensor::new(2, 2, 3, data).unwrap();
        assert_eq!(img.value(1, 0, 0), 3.0 / 12.0);
        assert_eq!(img.value(0, 1, 2), 8.0 / 12.0);
        let plane = img.channel_plane(1);
        assert_eq!(plane.len(), 4);
        assert!((plane[3] - 10.0 / 12.0).abs() < 1e-6);
    }

    #[test]
    fn keypoint_validation_bounds() {
        let ann = KeypointAnnotation::new(vec![Keypoint { class: 0, x: 9, y: 0 }]);
        assert!(ann.validate(10, 10, 1).is_ok());
        let ann = KeypointAnnotation::new(vec![Keypoint { class: 0, x: 10, y: 0 }]);
        assert!(ann.validate(10, 10, 1).is_err());
        let ann = KeypointAnnotation::new(vec![Keypoint { class: 2, x: 0, y: 0 }]);
        assert!(ann.validate(10, 10, 2).is_err());
    }

    #[test]
    fn mask_stack_from_bits_rejects_non_binary() {
        assert!(MaskStack::from_bits(2, 1, 1, vec![0, 1]).is_ok());
        assert!(MaskStack::from_bits(2, 1, 1, vec![0, 2]).is_err());
        assert!(MaskStack::from_bits(2, 1, 1, vec![0]).is_err());
    }

    #[test]
    fn mask_stack_planes_are_independent() {
        let mut m = MaskStack::zeros(3, 2, 2);
        m.set(1, 2, 1, true);
        assert!(!m.get(0, 2, 1));
        assert!(m.get(1, 2, 1));
        assert_eq!(m.count_ones(0), 0);
        assert_eq!(m.count_ones(1), 1);
        assert_eq!(m.plane(1)[1 * 3 + 2], 1);
    }

    #[test]
    fn prob_map_rejects_out_of_range() {
        assert!(ProbMapStack::new(2, 1, 1, vec![0.0, 1.0]).is_ok());
        assert!(ProbMapStack::new(2, 1, 1, vec![0.0, 1.5]).is_err());
        assert!(ProbMapStack::new(2, 1, 1, vec![-0.1, 0.5]).is_err());
        assert!(ProbMapStack::new(2, 1, 1, vec![f32::NAN, 0.5]).is_err());
    }
}
