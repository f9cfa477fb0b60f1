//! Netpbm grayscale (`P2`/`P5`) and color (`P3`/`P6`) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PnmEncoding {
    Ascii,
    Binary,
}

struct Header {
    channels: usize,
    encoding: PnmEncoding,
    width: usize,
    height: usize,
    maxval: u32,
    payload: usize,
}

fn parse_header(bytes: &[u8], allow_color: bool) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(Error::UnexpectedEof("missing magic number".into()));
    }
    let magic = &bytes[..2];
    let (channels, encoding) = match magic {
        b"P2" => (1, PnmEncoding::Ascii),
        b"P5" => (1, PnmEncoding::Binary),
        b"P3" if allow_color => (3, PnmEncoding::Ascii),
        b"P6" if allow_color => (3, PnmEncoding::Binary),
        _ => return Err(Error::BadMagic(String::from_utf8_lossy(magic).into_owned())),
    };
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while !matches!(bytes.get(pos), Some(b'\n') | None) {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::UnexpectedEof("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Header(format!("expected a number at byte {start}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| Error::Header(format!("number out of range: {text}")))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::Header(format!("empty image {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::BadMaxval(maxval.min(u32::MAX as u64) as u32));
    }
    // exactly one whitespace byte separates the header from the payload
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        Some(_) => return Err(Error::Header("missing whitespace after maxval".into())),
        None if encoding == PnmEncoding::Binary => return Err(Error::UnexpectedEof("no payload".into())),
        None => {}
    }
    Ok(Header {
        channels,
        encoding,
        width: width as usize,
        height: height as usize,
        maxval: maxval as u32,
        payload: pos,
    })
}

fn decode(bytes: &[u8], allow_color: bool) -> Result<Tensor> {
    let h = parse_header(bytes, allow_color)?;
    let count = h.width * h.height * h.channels;
    let maxval = h.maxval as f64;
    let payload = &bytes[h.payload..];
    let values: Vec<f64> = match h.encoding {
        PnmEncoding::Binary => {
            let wide = h.maxval > 255;
            let need = count * if wide { 2 } else { 1 };
            if payload.len() < need {
                return Err(Error::UnexpectedEof(format!(
                    "payload has {} bytes, expected {need}",
                    payload.len()
                )));
            }
            if wide {
                payload[..need]
                    .chunks_exact(2)
                    .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / maxval)
                    .collect()
            } else {
                payload[..need].iter().map(|&b| b as f64 / maxval).collect()
            }
        }
        PnmEncoding::Ascii => {
            let text = std::str::from_utf8(payload).map_err(|_| Error::Header("non-ASCII payload".into()))?;
            let mut out = Vec::with_capacity(count);
            for tok in text
                .lines()
                .map(|l| l.split('#').next().unwrap_or(""))
                .flat_map(str::split_ascii_whitespace)
                .take(count)
            {
                let v: u32 = tok.parse().map_err(|_| Error::Header(format!("bad sample {tok:?}")))?;
                if v > h.maxval {
                    return Err(Error::Header(format!("sample {v} exceeds maxval {}", h.maxval)));
                }
                out.push(v as f64 / maxval);
            }
            if out.len() < count {
                return Err(Error::UnexpectedEof(format!("{} of {count} samples present", out.len())));
            }
            out
        }
    };
    Tensor::new(&[h.height, h.width, h.channels], values)
}

/// Decodes a `P2`/`P5` image into `H x W x 1`, scaled to `[0, 1]` by maxval.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    decode(bytes, false)
}

/// Decodes any of `P2`/`P3`/`P5`/`P6`; color images come back `H x W x 3`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    decode(bytes, true)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_pgm(&read(path.as_ref())?)
}

pub fn load_pnm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_pnm(&read(path.as_ref())?)
}

/// Encodes a grayscale or RGB image with `maxval = 255`.
pub fn encode_pnm(image: &Tensor, encoding: PnmEncoding) -> Result<Vec<u8>> {
    let [h, w, c] = image.shape()[..] else {
        return Err(Error::shape("encode_pnm", "HxWx1 or HxWx3", format!("{:?}", image.shape())));
    };
    let magic = match (c, encoding) {
        (1, PnmEncoding::Ascii) => "P2",
        (1, PnmEncoding::Binary) => "P5",
        (3, PnmEncoding::Ascii) => "P3",
        (3, PnmEncoding::Binary) => "P6",
        _ => return Err(Error::shape("encode_pnm", "1 or 3 channels", format!("{c}"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let bytes = image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
    match encoding {
        PnmEncoding::Binary => out.extend(bytes),
        PnmEncoding::Ascii => {
            let text: Vec<String> = bytes.map(|b| b.to_string()).collect();
            for line in text.chunks(w * c) {
                out.extend(line.join(" ").into_bytes());
                out.push(b'\n');
            }
        }
    }
    Ok(out)
}

pub fn save_pgm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pnm(image, PnmEncoding::Binary)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
