//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CAPS" u16 version
//! u32 height u32 width u32 channels u32 classes
//! u32 len, config text (UTF-8)
//! u32 blob count, then per blob:
//!   u32 len, name; u32 rank; rank x u64 dims; f64 values
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CAPS";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    /// `[height, width, channels]` of the images the model was trained on.
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub blobs: Vec<(String, Tensor)>,
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} {n} too large")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for n in self.input_shape.iter().chain([&self.classes]) {
            out.extend_from_slice(&u32_of(*n, "dimension")?.to_le_bytes());
        }
        let put_str = |out: &mut Vec<u8>, s: &str| -> Result<()> {
            out.extend_from_slice(&u32_of(s.len(), "string length")?.to_le_bytes());
            out.extend_from_slice(s.as_bytes());
            Ok(())
        };
        put_str(&mut out, &self.config_text)?;
        out.extend_from_slice(&u32_of(self.blobs.len(), "blob count")?.to_le_bytes());
        for (name, t) in &self.blobs {
            put_str(&mut out, name)?;
            out.extend_from_slice(&u32_of(t.rank(), "rank")?.to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let input_shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let classes = r.u32()? as usize;
        let config_text = r.string()?;
        let count = r.u32()? as usize;
        let mut blobs = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                let d = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
                shape.push(usize::try_from(d).map_err(|_| Error::Checkpoint(format!("{name}: dimension {d}")))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: truncated values")))?;
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            blobs.push((name, t));
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            config_text,
            input_shape,
            classes,
            blobs,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn blob(&self, name: &str) -> Option<&Tensor> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config_text: "model=lenet\ndataset=shapes\n".into(),
            input_shape: [32, 30, 1],
            classes: 4,
            blobs: vec![
                ("w".into(), Tensor::new(&[2, 3], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.5, 1.0 / 3.0]).unwrap()),
                ("s".into(), Tensor::scalar(f64::NAN)),
                ("e".into(), Tensor::zeros(&[1, 1, 4])),
            ],
        }
    }

    #[test]
    fn bit_exact_round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.config_text, c.config_text);
        assert_eq!(back.input_shape, c.input_shape);
        for ((n1, a), (n2, b)) in c.blobs.iter().zip(&back.blobs) {
            assert_eq!(n1, n2);
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 3, 6, 20, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "{cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
