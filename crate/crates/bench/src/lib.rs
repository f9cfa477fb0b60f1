//! Deterministic inputs shared by the benchmarks.

use capsbench::data::{synth_shapes, Sample, ShapesSpec};
use capsbench::Tensor;

/// A tensor filled with a fixed pseudo-random pattern in `[-0.5, 0.5)`.
pub fn pattern(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    let data = (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
        .collect();
    Tensor::new(shape, data).expect("positive extents")
}

/// `n` synthetic shape images of side `size`, four classes.
pub fn shapes(n: usize, size: usize) -> Vec<Sample> {
    let spec = ShapesSpec {
        size,
        n_per_class: n.div_ceil(4),
        limit: Some(n),
        seed: 7,
        ..ShapesSpec::default()
    };
    synth_shapes(&spec).expect("valid spec")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_deterministic() {
        assert_eq!(pattern(&[3, 4], 1), pattern(&[3, 4], 1));
        assert_ne!(pattern(&[3, 4], 1), pattern(&[3, 4], 2));
        assert!(pattern(&[100], 3).data().iter().all(|v| (-0.5..0.5).contains(v)));
        let s = shapes(6, 16);
        assert_eq!(s.len(), 6);
        assert_eq!(s[0].image.shape(), &[16, 16, 1]);
    }
}
