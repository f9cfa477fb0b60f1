//! Seeded synthetic datasets: rendered geometric shapes and Gaussian blobs.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Rectangle,
        ShapeKind::Ellipse,
        ShapeKind::Triangle,
        ShapeKind::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }

    /// Membership test in shape-local coordinates, where the shape spans
    /// roughly `[-1, 1]` on each axis.
    fn contains(self, x: f64, y: f64) -> bool {
        match self {
            ShapeKind::Rectangle => x.abs() <= 1.0 && y.abs() <= 0.55,
            ShapeKind::Ellipse => x * x + (y / 0.75) * (y / 0.75) <= 1.0,
            ShapeKind::Triangle => {
                // apex up, base at y = 0.8
                let (ax, ay, bx, by, cx, cy) = (0.0, -1.0, 1.0, 0.8, -1.0, 0.8);
                let d1 = (x - bx) * (ay - by) - (ax - bx) * (y - by);
                let d2 = (x - cx) * (by - cy) - (bx - cx) * (y - cy);
                let d3 = (x - ax) * (cy - ay) - (cx - ax) * (y - ay);
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
            ShapeKind::Cross => (x.abs() <= 1.0 && y.abs() <= 0.28) || (y.abs() <= 1.0 && x.abs() <= 0.28),
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown shape {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapesSpec {
    pub n_per_class: usize,
    pub classes: Vec<ShapeKind>,
    /// Side length of the square images, in pixels.
    pub size: usize,
    pub seed: u64,
    /// Amount of random placement, in `[0, 1]`. At 0 every image of a class
    /// is identical.
    pub jitter: f64,
    /// Keeps only the first `n` interleaved samples when set.
    pub limit: Option<usize>,
}

impl Default for ShapesSpec {
    fn default() -> Self {
        Self {
            n_per_class: 50,
            classes: ShapeKind::ALL.to_vec(),
            size: 64,
            seed: 0,
            jitter: 0.1,
            limit: None,
        }
    }
}

impl ShapesSpec {
    /// Parses `key=value` pairs separated by commas, e.g.
    /// `n_per_class=50,size=64,seed=1,jitter=0.1,classes=rectangle+cross`.
    /// `n=50` caps the total instead, drawing classes round-robin.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        let text = text.strip_prefix("shapes").map(|t| t.trim_start_matches(':')).unwrap_or(text);
        for pair in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("synth: expected key=value, got {pair:?}")))?;
            spec.set(k.trim(), v.trim())?;
        }
        Ok(spec)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("synth: bad {what} {value:?}"));
        match key {
            "n_per_class" => self.n_per_class = value.parse().map_err(|_| bad(key))?,
            "size" => self.size = value.parse().map_err(|_| bad(key))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "jitter" => self.jitter = value.parse().map_err(|_| bad(key))?,
            "n" => self.limit = Some(value.parse().map_err(|_| bad(key))?),
            "classes" => {
                self.classes = value
                    .split(['+', ' ', '|'])
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            _ => return Err(Error::Config(format!("synth: unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.size < 4 || !(0.0..=1.0).contains(&self.jitter) {
            return Err(Error::Config(format!("synth: invalid spec {self:?}")));
        }
        Ok(())
    }
}

const SUPERSAMPLE: usize = 2;

fn render(kind: ShapeKind, size: usize, cx: f64, cy: f64, scale: f64, angle: f64) -> Tensor {
    let (sin, cos) = angle.sin_cos();
    let mut data = Vec::with_capacity(size * size);
    let step = 1.0 / SUPERSAMPLE as f64;
    let norm = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for py in 0..size {
        for px in 0..size {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) * step - cx;
                    let y = py as f64 + (sy as f64 + 0.5) * step - cy;
                    let lx = (cos * x + sin * y) / scale;
                    let ly = (-sin * x + cos * y) / scale;
                    hits += usize::from(kind.contains(lx, ly));
                }
            }
            data.push(hits as f64 * norm);
        }
    }
    Tensor::new(&[size, size, 1], data).expect("square image")
}

/// Renders `n_per_class` images of each shape. Samples are interleaved by
/// class: sample `i` has label `i % classes.len()`.
pub fn synth_shapes(spec: &ShapesSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.size as f64;
    let j = spec.jitter;
    let per_class = spec.limit.map_or(spec.n_per_class, |n| n.div_ceil(spec.classes.len()));
    let mut out = Vec::with_capacity(per_class * spec.classes.len());
    for i in 0..per_class {
        for (label, &kind) in spec.classes.iter().enumerate() {
            let mut u = || rng.random_range(-1.0..=1.0);
            let (dx, dy, ds, dr) = (u(), u(), u(), u());
            let cx = size / 2.0 + dx * j * size * 0.5;
            let cy = size / 2.0 + dy * j * size * 0.5;
            let scale = size * 0.3 * (1.0 + ds * j);
            let angle = dr * j * std::f64::consts::PI;
            out.push(Sample {
                image: render(kind, spec.size, cx, cy, scale, angle),
                label,
                source_id: format!("synth/{kind}/{i:04}"),
            });
        }
    }
    if let Some(n) = spec.limit {
        out.truncate(n);
    }
    Ok(out)
}

/// Isotropic unit-variance Gaussian classes in `dim` dimensions. Class `c`
/// has its mean on axis `c`, placed so that every pair of means is
/// `separation` standard deviations apart. Points are interleaved by class.
pub fn synth_gaussians(
    classes: usize,
    dim: usize,
    n_per_class: usize,
    separation: f64,
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    assert!(classes <= dim, "need one axis per class");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let offset = separation / std::f64::consts::SQRT_2;
    let mut points = Vec::with_capacity(classes * n_per_class);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for _ in 0..n_per_class {
        for c in 0..classes {
            points.push(
                (0..dim)
                    .map(|d| noise.sample(&mut rng) + if d == c { offset } else { 0.0 })
                    .collect(),
            );
            labels.push(c);
        }
    }
    (points, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_jitter_gives_identical_class_images() {
        let spec = ShapesSpec {
            n_per_class: 3,
            jitter: 0.0,
            size: 24,
            ..Default::default()
        };
        let s = synth_shapes(&spec).unwrap();
        assert_eq!(s.len(), 12);
        for c in 0..4 {
            let imgs: Vec<_> = s.iter().filter(|x| x.label == c).collect();
            assert!(imgs.windows(2).all(|w| w[0].image == w[1].image));
        }
        assert_ne!(s[0].image, s[1].image);
    }

    #[test]
    fn seeded_and_in_range() {
        let spec = ShapesSpec {
            n_per_class: 2,
            size: 32,
            seed: 5,
            ..Default::default()
        };
        let a = synth_shapes(&spec).unwrap();
        let b = synth_shapes(&spec).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.image == y.image && x.label == y.label));
        for s in &a {
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.image.sum() > 20.0, "shape should cover some pixels");
        }
    }

    #[test]
    fn spec_parsing() {
        let s = ShapesSpec::parse("shapes:n_per_class=5,size=16,jitter=0.2,classes=cross+ellipse").unwrap();
        assert_eq!(s.n_per_class, 5);
        assert_eq!(s.classes, vec![ShapeKind::Cross, ShapeKind::Ellipse]);
        assert!(ShapesSpec::parse("colour=red").is_err());
        let capped = ShapesSpec::parse("shapes:size=8,n=50").unwrap();
        let samples = synth_shapes(&capped).unwrap();
        assert_eq!(samples.len(), 50);
        assert_eq!(samples.iter().filter(|s| s.label == 0).count(), 13);
        assert_eq!(samples.iter().filter(|s| s.label == 3).count(), 12);
    }
}
