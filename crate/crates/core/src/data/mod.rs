//! Image loading, preprocessing, splitting and synthetic datasets.

pub mod cifar;
mod dir;
pub mod pnm;
mod preprocess;
mod split;
mod synth;
pub mod transform;

pub use cifar::{load_cifar100_binary, parse_cifar100, CifarRecord};
pub use dir::{load_dataset_dir, write_dataset_dir};
pub use pnm::{load_pgm, load_pnm, save_pgm};
pub use preprocess::{DatasetKind, EqualizePolicy, PreprocessChain, PreprocessStep};
pub use split::{
    kfold_split, split_dataset, split_indices, split_sizes, DatasetSplit, Fold, TEST_FRACTION, TRAIN_FRACTION,
    VALIDATION_FRACTION,
};
pub use synth::{synth_gaussians, synth_shapes, ShapeKind, ShapesSpec};
pub use transform::{histogram_entropy, histogram_equalize, min_max_normalize, resize_bilinear, to_grayscale};

use crate::tensor::Tensor;

/// A grayscale `H x W x 1` image in `[0, 1]` with its class label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    pub source_id: String,
}

impl Sample {
    pub fn new(image: Tensor, label: usize, source_id: impl Into<String>) -> Self {
        Self {
            image,
            label,
            source_id: source_id.into(),
        }
    }
}

/// Number of classes implied by the largest label.
pub fn class_count(samples: &[Sample]) -> usize {
    samples.iter().map(|s| s.label + 1).max().unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn every_chain_output_is_in_unit_range(
            h in 2usize..40,
            w in 2usize..40,
            color in any::<bool>(),
            seed in any::<u64>(),
            scale in 0.01f64..500.0,
            offset in -100.0f64..100.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let c = if color { 3 } else { 1 };
            let data = (0..h * w * c).map(|_| offset + scale * rng.random::<f64>()).collect();
            let raw = Tensor::new(&[h, w, c], data).unwrap();
            for kind in DatasetKind::ALL {
                for policy in [EqualizePolicy::Always, EqualizePolicy::Never, EqualizePolicy::default()] {
                    let chain = PreprocessChain::for_dataset(kind, policy);
                    match chain.apply(&raw) {
                        Ok(out) => prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v))),
                        Err(_) => prop_assert!(color && chain.steps()[0] != PreprocessStep::ToGrayscale),
                    }
                }
            }
        }
    }
}
