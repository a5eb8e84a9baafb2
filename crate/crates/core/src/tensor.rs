//! Image tensors, dataset manifests and preprocessing.
//!
//! Tensors are channel-major `f64` buffers tagged with their normalization
//! state. Augmentation works on `Unit` tensors; `standardize` produces the
//! model-facing `Standardized` form.

use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const UNIT_SLACK: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("tensor shape {channels}x{height}x{width} does not match data length {len}")]
    ShapeMismatch {
        channels: usize,
        height: usize,
        width: usize,
        len: usize,
    },
    #[error("tensor dimensions must be positive")]
    ZeroSized,
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("unit-state value {value} at flat index {index} outside [0, 1]")]
    OutOfUnitRange { index: usize, value: f64 },
    #[error("expected a {expected:?} tensor, got {actual:?}")]
    WrongState {
        expected: TensorState,
        actual: TensorState,
    },
    #[error("channel_std must be positive, got {0:?}")]
    BadStd([f64; 3]),
    #[error("preprocessing expects 3 channels, tensor has {0}")]
    ChannelCount(usize),
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("manifest row {row}: label {label} out of range for {num_classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: i64,
        num_classes: usize,
    },
    #[error("manifest has no entries")]
    NoEntries,
    #[error("manifest header must be `path,label`, found `{0}`")]
    BadHeader(String),
    #[error("num_classes must be positive")]
    ZeroClasses,
    #[error("unsupported image format for {0} (PNG and JPEG only)")]
    UnsupportedFormat(PathBuf),
    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorState {
    /// Values in `[0, 1]`.
    Unit,
    /// Per-channel mean/std applied.
    Standardized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    state: TensorState,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        state: TensorState,
        data: Vec<f64>,
    ) -> Result<Self, TensorError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(TensorError::ZeroSized);
        }
        if data.len() != channels * height * width {
            return Err(TensorError::ShapeMismatch {
                channels,
                height,
                width,
                len: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(index));
        }
        if state == TensorState::Unit {
            if let Some((index, &value)) = data
                .iter()
                .enumerate()
                .find(|(_, v)| **v < -UNIT_SLACK || **v > 1.0 + UNIT_SLACK)
            {
                return Err(TensorError::OutOfUnitRange { index, value });
            }
        }
        Ok(Self {
            channels,
            height,
            width,
            state,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self, TensorError> {
        Self::new(
            channels,
            height,
            width,
            TensorState::Unit,
            vec![value; channels * height * width],
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn state(&self) -> TensorState {
        self.state
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    /// Same shape and state, new data. Used by the augmentations, which
    /// preserve both by construction.
    pub(crate) fn with_data(&self, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            state: self.state,
            data,
        }
    }

    /// Squared Euclidean distance over the flattened tensors.
    pub fn squared_distance(&self, other: &ImageTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeFilter {
    Bilinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_h: usize,
    pub target_w: usize,
    pub channel_mean: [f64; 3],
    pub channel_std: [f64; 3],
    pub resize: ResizeFilter,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_h: 224,
            target_w: 224,
            channel_mean: [0.485, 0.456, 0.406],
            channel_std: [0.229, 0.224, 0.225],
            resize: ResizeFilter::Bilinear,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.target_h == 0 || self.target_w == 0 {
            return Err(TensorError::ZeroSized);
        }
        if self.channel_std.iter().any(|s| !(*s > 0.0)) {
            return Err(TensorError::BadStd(self.channel_std));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub num_classes: usize,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Load a `path,label` CSV. Relative image paths resolve against the
/// manifest's directory. Rows are numbered from 1 (the first data row).
pub fn load_manifest(path: &Path, num_classes: usize) -> Result<DatasetManifest, IngestError> {
    let bytes = std::fs::read(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&bytes, &base, num_classes)
}

pub fn parse_manifest(
    bytes: &[u8],
    base_dir: &Path,
    num_classes: usize,
) -> Result<DatasetManifest, IngestError> {
    if num_classes == 0 {
        return Err(IngestError::ZeroClasses);
    }
    if bytes.iter().all(|b| b.is_ascii_whitespace()) {
        return Err(IngestError::NoEntries);
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let header = reader
        .headers()
        .map_err(|e| IngestError::MalformedRow {
            row: 0,
            reason: e.to_string(),
        })?
        .clone();
    if header.len() != 2 || &header[0] != "path" || &header[1] != "label" {
        return Err(IngestError::BadHeader(header.iter().collect::<Vec<_>>().join(",")));
    }

    let mut entries = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| IngestError::MalformedRow {
            row,
            reason: e.to_string(),
        })?;
        if record.len() != 2 {
            return Err(IngestError::MalformedRow {
                row,
                reason: format!("expected 2 fields, found {}", record.len()),
            });
        }
        let raw_path = &record[0];
        if raw_path.is_empty() {
            return Err(IngestError::MalformedRow {
                row,
                reason: "empty path".into(),
            });
        }
        let label: i64 = record[1].parse().map_err(|_| IngestError::MalformedRow {
            row,
            reason: format!("label `{}` is not an integer", &record[1]),
        })?;
        if label < 0 || label as u64 >= num_classes as u64 {
            return Err(IngestError::LabelOutOfRange {
                row,
                label,
                num_classes,
            });
        }
        let p = Path::new(raw_path);
        let path = if p.is_absolute() {
            p.to_path_buf()
        } else {
            base_dir.join(p)
        };
        entries.push(ManifestEntry {
            path,
            label: label as usize,
        });
    }
    if entries.is_empty() {
        return Err(IngestError::NoEntries);
    }
    Ok(DatasetManifest {
        entries,
        num_classes,
    })
}

/// Decode a PNG or JPEG file into 8-bit RGB.
pub fn decode_image(path: &Path) -> Result<RgbImage, IngestError> {
    let bytes = std::fs::read(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let format = image::guess_format(&bytes)
        .map_err(|_| IngestError::UnsupportedFormat(path.to_path_buf()))?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(IngestError::UnsupportedFormat(path.to_path_buf()));
    }
    let img = image::load_from_memory_with_format(&bytes, format).map_err(|e| IngestError::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

/// Resize to the target size with bilinear interpolation (half-pixel
/// centres, edge clamping) and scale to `[0, 1]`.
pub fn preprocess(raw: &RgbImage, cfg: &PreprocessConfig) -> Result<ImageTensor, TensorError> {
    cfg.validate()?;
    let (w, h) = raw.dimensions();
    if w == 0 || h == 0 {
        return Err(TensorError::ZeroSized);
    }
    let (src_h, src_w) = (h as usize, w as usize);
    let mut planes = vec![0.0; 3 * src_h * src_w];
    for (x, y, px) in raw.enumerate_pixels() {
        for c in 0..3 {
            planes[(c * src_h + y as usize) * src_w + x as usize] = f64::from(px[c]) / 255.0;
        }
    }
    let src = ImageTensor::new(3, src_h, src_w, TensorState::Unit, planes)?;
    Ok(resize_bilinear(&src, cfg.target_h, cfg.target_w))
}

pub fn resize_bilinear(src: &ImageTensor, out_h: usize, out_w: usize) -> ImageTensor {
    let (channels, in_h, in_w) = src.shape();
    if in_h == out_h && in_w == out_w {
        return src.clone();
    }
    let axis = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f64)> {
        let scale = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let lo = (pos.floor() as usize).min(in_len - 1);
                let hi = (lo + 1).min(in_len - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let ys = axis(out_h, in_h);
    let xs = axis(out_w, in_w);
    let mut data = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = src.get(c, y0, x0) * (1.0 - fx) + src.get(c, y0, x1) * fx;
                let bottom = src.get(c, y1, x0) * (1.0 - fx) + src.get(c, y1, x1) * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    ImageTensor {
        channels,
        height: out_h,
        width: out_w,
        state: src.state,
        data,
    }
}

pub fn standardize(x: &ImageTensor, cfg: &PreprocessConfig) -> Result<ImageTensor, TensorError> {
    cfg.validate()?;
    affine_per_channel(x, TensorState::Unit, TensorState::Standardized, |c, v| {
        (v - cfg.channel_mean[c]) / cfg.channel_std[c]
    })
}

/// Inverse of [`standardize`].
pub fn unstandardize(x: &ImageTensor, cfg: &PreprocessConfig) -> Result<ImageTensor, TensorError> {
    cfg.validate()?;
    affine_per_channel(x, TensorState::Standardized, TensorState::Unit, |c, v| {
        v * cfg.channel_std[c] + cfg.channel_mean[c]
    })
}

fn affine_per_channel(
    x: &ImageTensor,
    expected: TensorState,
    produced: TensorState,
    f: impl Fn(usize, f64) -> f64,
) -> Result<ImageTensor, TensorError> {
    if x.state != expected {
        return Err(TensorError::WrongState {
            expected,
            actual: x.state,
        });
    }
    if x.channels != 3 {
        return Err(TensorError::ChannelCount(x.channels));
    }
    let plane = x.height * x.width;
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| f(i / plane, v))
        .collect();
    Ok(ImageTensor {
        data,
        state: produced,
        ..x.clone()
    })
}
