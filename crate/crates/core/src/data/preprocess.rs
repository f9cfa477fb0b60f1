//! Per-dataset preprocessing chains.

use std::fmt;
use std::str::FromStr;

use super::transform::{histogram_entropy, histogram_equalize, min_max, min_max_normalize, resize_bilinear, to_grayscale};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The four benchmark datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    YaleB,
    MitCbcl,
    BelgiumTs,
    Cifar100,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 4] = [
        DatasetKind::YaleB,
        DatasetKind::MitCbcl,
        DatasetKind::BelgiumTs,
        DatasetKind::Cifar100,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::YaleB => "yale",
            DatasetKind::MitCbcl => "mit",
            DatasetKind::BelgiumTs => "belgiumts",
            DatasetKind::Cifar100 => "cifar100",
        }
    }

    pub fn classes(self) -> usize {
        match self {
            DatasetKind::YaleB => 38,
            DatasetKind::MitCbcl => 10,
            DatasetKind::BelgiumTs => 62,
            DatasetKind::Cifar100 => 100,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let kind = match lower.as_str() {
            "yale" | "yaleb" | "yale-b" => DatasetKind::YaleB,
            "mit" | "mit-cbcl" | "mitcbcl" => DatasetKind::MitCbcl,
            "belgiumts" | "belgium-ts" | "belgium" => DatasetKind::BelgiumTs,
            "cifar100" | "cifar-100" => DatasetKind::Cifar100,
            _ => return Err(Error::InvalidArgument(format!("unknown dataset {s:?}"))),
        };
        Ok(kind)
    }
}

/// When histogram equalization applies to an image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EqualizePolicy {
    Always,
    Never,
    /// Equalize low-contrast images: those whose raw intensity range covers
    /// less than `min_range` of `[0, 1]`, or whose 256-bin histogram entropy
    /// is below `entropy_threshold` bits.
    Auto { min_range: f64, entropy_threshold: f64 },
}

impl Default for EqualizePolicy {
    fn default() -> Self {
        EqualizePolicy::Auto {
            min_range: 0.6,
            entropy_threshold: 5.0,
        }
    }
}

impl EqualizePolicy {
    /// Decision for an image as it enters the chain.
    pub fn applies_to(&self, raw: &Tensor) -> bool {
        match *self {
            EqualizePolicy::Always => true,
            EqualizePolicy::Never => false,
            EqualizePolicy::Auto {
                min_range,
                entropy_threshold,
            } => {
                let (lo, hi) = min_max(raw.data());
                hi - lo < min_range || histogram_entropy(raw, 256) < entropy_threshold
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PreprocessStep {
    ToGrayscale,
    MinMaxNormalize,
    HistogramEqualize(EqualizePolicy),
    Resize { width: usize, height: usize },
}

impl fmt::Display for PreprocessStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PreprocessStep::ToGrayscale => f.write_str("grayscale"),
            PreprocessStep::MinMaxNormalize => f.write_str("minmax"),
            PreprocessStep::HistogramEqualize(EqualizePolicy::Always) => f.write_str("equalize"),
            PreprocessStep::HistogramEqualize(EqualizePolicy::Never) => f.write_str("equalize(never)"),
            PreprocessStep::HistogramEqualize(EqualizePolicy::Auto { .. }) => f.write_str("equalize(some)"),
            PreprocessStep::Resize { width, height } => write!(f, "resize({width}x{height})"),
        }
    }
}

/// Ordered transforms applied to every raw image of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessChain {
    steps: Vec<PreprocessStep>,
}

impl PreprocessChain {
    pub fn new(steps: Vec<PreprocessStep>) -> Self {
        Self { steps }
    }

    /// The chain for a dataset. Resize targets are `width x height`.
    pub fn for_dataset(kind: DatasetKind, equalize: EqualizePolicy) -> Self {
        use PreprocessStep::*;
        let steps = match kind {
            DatasetKind::YaleB => vec![
                MinMaxNormalize,
                HistogramEqualize(equalize),
                Resize { width: 96, height: 84 },
            ],
            DatasetKind::MitCbcl => vec![
                MinMaxNormalize,
                HistogramEqualize(equalize),
                Resize { width: 72, height: 55 },
            ],
            DatasetKind::BelgiumTs => vec![ToGrayscale, MinMaxNormalize, Resize { width: 90, height: 90 }],
            DatasetKind::Cifar100 => vec![ToGrayscale, MinMaxNormalize],
        };
        Self { steps }
    }

    pub fn steps(&self) -> &[PreprocessStep] {
        &self.steps
    }

    /// Output `(height, width)` for an input of the given size.
    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        self.steps.iter().fold((height, width), |hw, s| match *s {
            PreprocessStep::Resize { width, height } => (height, width),
            _ => hw,
        })
    }

    pub fn apply(&self, raw: &Tensor) -> Result<Tensor> {
        let mut img = raw.clone();
        for step in &self.steps {
            img = match step {
                PreprocessStep::ToGrayscale => match img.shape()[2] {
                    1 => img,
                    _ => to_grayscale(&img)?,
                },
                PreprocessStep::MinMaxNormalize => min_max_normalize(&img),
                PreprocessStep::HistogramEqualize(policy) => {
                    if policy.applies_to(raw) {
                        histogram_equalize(&img, 256)?
                    } else {
                        img
                    }
                }
                PreprocessStep::Resize { width, height } => {
                    if img.shape()[..2] == [*height, *width] {
                        img
                    } else {
                        resize_bilinear(&img, *height, *width)?
                    }
                }
            };
        }
        if img.shape().get(2) != Some(&1) {
            return Err(Error::Dataset(format!(
                "preprocessing produced {:?}; expected a grayscale image",
                img.shape()
            )));
        }
        Ok(img)
    }
}

impl fmt::Display for PreprocessChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.steps.iter().map(ToString::to_string).collect();
        f.write_str(&names.join(" -> "))
    }
}
