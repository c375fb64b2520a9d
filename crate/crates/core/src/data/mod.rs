//! Labelled image datasets: loading, resizing, augmentation, splitting and
//! a synthetic two-class generator.

mod io;
mod synth;

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{load_directory, read_ppm, write_dataset_ppm, write_ppm, Loaded};
pub use synth::{synth_generate, BLOB_PEAK, NOISE_MEAN, NOISE_SD};

/// Class names indexed by label value.
pub const CLASS_NAMES: [&str; 2] = ["Others", "Monkeypox"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Others = 0,
    /// The positive class.
    Monkeypox = 1,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Others, Label::Monkeypox];

    pub fn from_value(value: f64) -> Result<Self> {
        match value {
            v if v == 0.0 => Ok(Label::Others),
            v if v == 1.0 => Ok(Label::Monkeypox),
            v => Err(Error::InvalidLabel { value: v }),
        }
    }

    pub fn value(self) -> f64 {
        self as u8 as f64
    }

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self as usize]
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A 3×H×W image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pixels: Tensor,
    label: Label,
    source_id: String,
}

impl ImageSample {
    pub fn new(pixels: Tensor, label: Label, source_id: impl Into<String>) -> Result<Self> {
        let source_id = source_id.into();
        if pixels.dims().len() != 3 || pixels.dims()[0] != 3 {
            return Err(Error::shape(
                "image",
                format!("{source_id}: expected 3×H×W pixels, got {}", pixels.shape()),
            ));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidConfig(format!(
                "{source_id}: pixel value {v} outside [0, 1]"
            )));
        }
        Ok(ImageSample {
            pixels,
            label,
            source_id,
        })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    /// (height, width)
    pub fn size(&self) -> (usize, usize) {
        (self.pixels.dims()[1], self.pixels.dims()[2])
    }

    pub fn mean_pixel(&self) -> f64 {
        self.pixels.data().iter().sum::<f64>() / self.pixels.numel() as f64
    }
}

/// Ordered samples with unique source ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn new(samples: Vec<ImageSample>) -> Result<Self> {
        let mut seen = HashSet::new();
        if let Some(dup) = samples.iter().find(|s| !seen.insert(s.source_id.as_str())) {
            return Err(Error::InvalidConfig(format!(
                "duplicate source id {} in dataset",
                dup.source_id
            )));
        }
        Ok(Dataset { samples })
    }

    pub fn class_names(&self) -> [&'static str; 2] {
        CLASS_NAMES
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Label values (0 or 1) in sample order.
    pub fn labels(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.label.value()).collect()
    }

    /// Number of samples of `label`.
    pub fn count(&self, label: Label) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let samples = indices
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::InvalidConfig(format!("sample index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples)
    }

    /// Stacks the samples at `indices` into an N×3×H×W batch and an N-vector of labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let images = indices
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .map(|s| s.pixels.clone())
                    .ok_or_else(|| Error::InvalidConfig(format!("sample index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<f64> = indices.iter().map(|&i| self.samples[i].label.value()).collect();
        Ok((Tensor::stack(&images)?, Tensor::vector(&labels)?))
    }

    pub fn resized(&self, height: usize, width: usize) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| resize_bilinear(s, height, width))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples)
    }
}

/// Per-channel bilinear resampling with half-pixel-centred sample positions.
pub fn resize_bilinear(img: &ImageSample, height: usize, width: usize) -> Result<ImageSample> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidConfig(format!("resize target {height}x{width} is empty")));
    }
    let (h, w) = img.size();
    let src = img.pixels.data();
    let taps = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f64)> {
        let scale = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(in_len - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let rows = taps(height, h);
    let cols = taps(width, w);
    let mut out = Vec::with_capacity(3 * height * width);
    for c in 0..3 {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for &(y0, y1, ty) in &rows {
            for &(x0, x1, tx) in &cols {
                let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
                let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], tx);
                let bottom = lerp(plane[y1 * w + x0], plane[y1 * w + x1], tx);
                out.push(lerp(top, bottom, ty).clamp(0.0, 1.0));
            }
        }
    }
    ImageSample::new(
        Tensor::new(&[3, height, width], out)?,
        img.label,
        img.source_id.clone(),
    )
}

/// Deterministic copy-style augmentation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    /// Counter-clockwise rotations in degrees, each one of 90, 180, 270.
    pub rotations: Vec<u16>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    HorizontalFlip,
    VerticalFlip,
    Rotate90,
    Rotate180,
    Rotate270,
}

impl Transform {
    pub fn name(self) -> &'static str {
        match self {
            Transform::HorizontalFlip => "hflip",
            Transform::VerticalFlip => "vflip",
            Transform::Rotate90 => "rot90",
            Transform::Rotate180 => "rot180",
            Transform::Rotate270 => "rot270",
        }
    }

    pub fn apply(self, img: &ImageSample) -> Result<ImageSample> {
        let (h, w) = img.size();
        let src = img.pixels.data();
        let (oh, ow) = match self {
            Transform::Rotate90 | Transform::Rotate270 => (w, h),
            _ => (h, w),
        };
        let mut out = Vec::with_capacity(src.len());
        for c in 0..3 {
            let plane = &src[c * h * w..(c + 1) * h * w];
            for y in 0..oh {
                for x in 0..ow {
                    let (sy, sx) = match self {
                        Transform::HorizontalFlip => (y, w - 1 - x),
                        Transform::VerticalFlip => (h - 1 - y, x),
                        Transform::Rotate90 => (x, w - 1 - y),
                        Transform::Rotate180 => (h - 1 - y, w - 1 - x),
                        Transform::Rotate270 => (h - 1 - x, y),
                    };
                    out.push(plane[sy * w + sx]);
                }
            }
        }
        ImageSample::new(
            Tensor::new(&[3, oh, ow], out)?,
            img.label,
            format!("{}+{}", img.source_id, self.name()),
        )
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for &r in &self.rotations {
            if ![90, 180, 270].contains(&r) {
                return Err(Error::InvalidConfig(format!(
                    "augmentation.rotations: {r} is not one of 90, 180, 270"
                )));
            }
            if !seen.insert(r) {
                return Err(Error::InvalidConfig(format!("augmentation.rotations: {r} listed twice")));
            }
        }
        Ok(())
    }

    /// Enabled transforms in application order.
    pub fn transforms(&self) -> Vec<Transform> {
        let mut out = Vec::new();
        if self.horizontal_flip {
            out.push(Transform::HorizontalFlip);
        }
        if self.vertical_flip {
            out.push(Transform::VerticalFlip);
        }
        for r in [90, 180, 270] {
            if self.rotations.contains(&r) {
                out.push(match r {
                    90 => Transform::Rotate90,
                    180 => Transform::Rotate180,
                    _ => Transform::Rotate270,
                });
            }
        }
        out
    }

    /// Output samples per input sample, counting the original.
    pub fn copies_per_image(&self) -> usize {
        1 + self.transforms().len()
    }
}

/// Originals first, then one block of copies per enabled transform.
pub fn augment(ds: &Dataset, spec: &AugmentationSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut samples = ds.samples.clone();
    for t in spec.transforms() {
        for s in &ds.samples {
            samples.push(t.apply(s)?);
        }
    }
    Dataset::new(samples)
}

/// Train/test/validation proportions, 70:10:20 by default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.70,
            test_fraction: 0.10,
            val_fraction: 0.20,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("train_fraction", self.train_fraction),
            ("test_fraction", self.test_fraction),
            ("val_fraction", self.val_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("split.{name} must lie in [0, 1], got {v}")));
            }
        }
        let total = self.train_fraction + self.test_fraction + self.val_fraction;
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!("split fractions sum to {total}, not 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    pub val: Dataset,
}

/// Stratified split: each class is shuffled on its own, then cut with floors
/// for train and test; the remainder goes to validation. Partitions keep the
/// dataset's original order.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    if ds.len() < 10 {
        return Err(Error::InvalidConfig(format!(
            "splitting needs at least 10 samples, got {}",
            ds.len()
        )));
    }
    // Guards against 0.7 * 50 landing a hair below 35.
    const CUT_SLACK: f64 = 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut train, mut test, mut val) = (Vec::new(), Vec::new(), Vec::new());
    for label in Label::ALL {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.samples[i].label == label).collect();
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        let n_train = (n * spec.train_fraction + CUT_SLACK).floor() as usize;
        let n_test = ((n * spec.test_fraction + CUT_SLACK).floor() as usize).min(members.len() - n_train);
        train.extend_from_slice(&members[..n_train]);
        test.extend_from_slice(&members[n_train..n_train + n_test]);
        val.extend_from_slice(&members[n_train + n_test..]);
    }
    for part in [&mut train, &mut test, &mut val] {
        part.sort_unstable();
    }
    Ok(Split {
        train: ds.subset(&train)?,
        test: ds.subset(&test)?,
        val: ds.subset(&val)?,
    })
}
