//! CIFAR-100 binary records: one coarse-label byte, one fine-label byte and
//! 3072 pixel bytes (R, G and B planes of 32x32 row-major pixels each).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RECORD_LEN: usize = 3074;
pub const SIDE: usize = 32;
pub const PLANE: usize = SIDE * SIDE;
pub const FINE_CLASSES: u8 = 100;
pub const COARSE_CLASSES: u8 = 20;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CifarRecord {
    pub coarse_label: u8,
    pub fine_label: u8,
    /// Planar R, G, B bytes.
    pub pixels: Vec<u8>,
}

impl CifarRecord {
    /// `32 x 32 x 3` image with values in `[0, 1]`.
    pub fn rgb_image(&self) -> Tensor {
        let mut data = Vec::with_capacity(3 * PLANE);
        for p in 0..PLANE {
            for ch in 0..3 {
                data.push(self.pixels[ch * PLANE + p] as f64 / 255.0);
            }
        }
        Tensor::new(&[SIDE, SIDE, 3], data).expect("fixed shape")
    }
}

pub fn parse_cifar100(bytes: &[u8]) -> Result<Vec<CifarRecord>> {
    if !bytes.len().is_multiple_of(RECORD_LEN) {
        return Err(Error::CifarLength(bytes.len()));
    }
    bytes
        .chunks_exact(RECORD_LEN)
        .enumerate()
        .map(|(i, rec)| {
            let (coarse_label, fine_label) = (rec[0], rec[1]);
            if fine_label >= FINE_CLASSES || coarse_label >= COARSE_CLASSES {
                return Err(Error::Dataset(format!(
                    "cifar record {i}: labels coarse={coarse_label} fine={fine_label} out of range"
                )));
            }
            Ok(CifarRecord {
                coarse_label,
                fine_label,
                pixels: rec[2..].to_vec(),
            })
        })
        .collect()
}

pub fn encode_cifar100(records: &[CifarRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * RECORD_LEN);
    for r in records {
        out.push(r.coarse_label);
        out.push(r.fine_label);
        out.extend_from_slice(&r.pixels);
    }
    out
}

pub fn load_cifar100_binary(path: impl AsRef<Path>) -> Result<Vec<CifarRecord>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar100(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(i: u8) -> CifarRecord {
        CifarRecord {
            coarse_label: i % 20,
            fine_label: (i * 7) % 100,
            pixels: (0..3072).map(|p| ((p * 31 + i as usize) % 256) as u8).collect(),
        }
    }

    #[test]
    fn ten_records() {
        let recs: Vec<_> = (0..10).map(record).collect();
        let parsed = parse_cifar100(&encode_cifar100(&recs)).unwrap();
        assert_eq!(parsed.len(), 10);
        assert!(parsed.iter().all(|r| r.fine_label < 100));
    }

    #[test]
    fn bad_length() {
        assert!(matches!(parse_cifar100(&[0u8; 3075]), Err(Error::CifarLength(3075))));
    }

    #[test]
    fn planar_layout() {
        let mut r = record(0);
        r.pixels.fill(0);
        r.pixels[0] = 255; // R of pixel (0,0)
        r.pixels[PLANE + 1] = 255; // G of pixel (0,1)
        r.pixels[2 * PLANE + SIDE] = 255; // B of pixel (1,0)
        let img = r.rgb_image();
        assert_eq!(img.get(&[0, 0, 0]), 1.0);
        assert_eq!(img.get(&[0, 1, 1]), 1.0);
        assert_eq!(img.get(&[1, 0, 2]), 1.0);
        assert_eq!(img.sum(), 3.0);
    }
}
