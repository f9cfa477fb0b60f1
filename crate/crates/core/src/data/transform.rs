//! Per-image preprocessing transforms. Images are `H x W x C` tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// BT.601 luma: `0.299 r + 0.587 g + 0.114 b`.
pub fn to_grayscale(rgb: &Tensor) -> Result<Tensor> {
    let [h, w, 3] = rgb.shape()[..] else {
        return Err(Error::shape("to_grayscale", "HxWx3", format!("{:?}", rgb.shape())));
    };
    let data = rgb
        .data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect();
    Tensor::new(&[h, w, 1], data)
}

/// `(x - min) / (max - min)`; a constant image maps to zeros.
pub fn min_max_normalize(image: &Tensor) -> Tensor {
    let (lo, hi) = min_max(image.data());
    if hi <= lo {
        return Tensor::zeros(image.shape());
    }
    let inv = 1.0 / (hi - lo);
    image.map(|v| ((v - lo) * inv).clamp(0.0, 1.0))
}

pub(crate) fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn bin(x: f64, levels: usize) -> usize {
    ((x.clamp(0.0, 1.0) * levels as f64) as usize).min(levels - 1)
}

pub(crate) fn histogram(image: &Tensor, levels: usize) -> Vec<usize> {
    let mut hist = vec![0usize; levels];
    for &v in image.data() {
        hist[bin(v, levels)] += 1;
    }
    hist
}

/// Shannon entropy of the `levels`-bin histogram, in bits.
pub fn histogram_entropy(image: &Tensor, levels: usize) -> f64 {
    let n = image.len() as f64;
    histogram(image, levels)
        .into_iter()
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// CDF remap over `levels` bins: `(CDF(bin(x)) - CDF_min) / (1 - CDF_min)`.
///
/// A single-bin image has nothing to spread and is returned unchanged.
pub fn histogram_equalize(image: &Tensor, levels: usize) -> Result<Tensor> {
    if levels < 2 {
        return Err(Error::InvalidArgument("histogram_equalize: need at least 2 levels".into()));
    }
    let n = image.len() as f64;
    let hist = histogram(image, levels);
    let mut cdf = Vec::with_capacity(levels);
    let mut running = 0usize;
    for c in &hist {
        running += c;
        cdf.push(running as f64 / n);
    }
    let first = hist.iter().position(|&c| c > 0).unwrap_or(0);
    let cdf_min = cdf[first];
    if cdf_min >= 1.0 {
        return Ok(image.clone());
    }
    let denom = 1.0 - cdf_min;
    Ok(image.map(|v| ((cdf[bin(v, levels)] - cdf_min) / denom).clamp(0.0, 1.0)))
}

/// Bilinear resize with edge clamping and half-pixel centers
/// (`align_corners = false`).
pub fn resize_bilinear(image: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::InvalidArgument(format!("resize to {new_h}x{new_w}")));
    }
    let [h, w, c] = image.shape()[..] else {
        return Err(Error::shape("resize_bilinear", "HxWxC", format!("{:?}", image.shape())));
    };
    let axis = |out: usize, n: usize| -> Vec<(usize, usize, f64)> {
        let scale = n as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = axis(new_h, h);
    let xs = axis(new_w, w);
    let src = image.data();
    let mut out = Vec::with_capacity(new_h * new_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(&[new_h, new_w, c], out)
}
