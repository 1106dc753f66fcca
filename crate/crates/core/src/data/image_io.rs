//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed image at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("cannot encode tensor of shape {0:?}")]
    Shape(Vec<usize>),
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T, ImageError> {
        Err(ImageError::Parse {
            offset: self.pos,
            msg: msg.into(),
        })
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize, ImageError> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return self.err("expected a decimal number");
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .map_or_else(|| self.err("number out of range"), Ok)
    }
}

/// Parses a binary netpbm header and returns `(width, height, payload)`.
fn parse_netpbm<'a>(bytes: &'a [u8], magic: &[u8; 2], channels: usize) -> Result<(usize, usize, &'a [u8]), ImageError> {
    let mut c = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return c.err(format!("expected magic {}", String::from_utf8_lossy(magic)));
    }
    c.pos = 2;
    let width = c.number()?;
    let height = c.number()?;
    let maxval = c.number()?;
    if width == 0 || height == 0 {
        return c.err("zero image extent");
    }
    if maxval != 255 {
        return c.err(format!("only maxval 255 is supported, got {maxval}"));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return c.err("expected a single whitespace byte after maxval"),
    }
    let need = width * height * channels;
    let payload = &bytes[c.pos..];
    if payload.len() < need {
        c.pos = bytes.len();
        return c.err(format!("truncated payload: need {need} bytes, found {}", payload.len()));
    }
    Ok((width, height, &payload[..need]))
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Decodes a P6 image into `[H, W, 3]` values in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>, ImageError> {
    let (w, h, px) = parse_netpbm(bytes, b"P6", 3)?;
    Ok(Tensor::new(&[h, w, 3], px.iter().map(|&b| b as f32 / 255.0).collect()).expect("extent checked"))
}

/// Decodes a P5 image into `[H, W]` values in `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor<f32>, ImageError> {
    let (w, h, px) = parse_netpbm(bytes, b"P5", 1)?;
    Ok(Tensor::new(&[h, w], px.iter().map(|&b| b as f32 / 255.0).collect()).expect("extent checked"))
}

pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>, ImageError> {
    let s = img.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(ImageError::Shape(s.to_vec()));
    }
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(img.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

/// Values are clamped to `[0, 1]` and scaled to 0..=255.
pub fn encode_pgm(map: &Tensor<f32>) -> Result<Vec<u8>, ImageError> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(ImageError::Shape(s.to_vec()));
    }
    let mut out = format!("P5\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(map.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>, ImageError> {
    fs::read(path).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), ImageError> {
    fs::write(path, bytes).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>, ImageError> {
    decode_ppm(&read(path.as_ref())?)
}

pub fn save_ppm(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<(), ImageError> {
    write(path.as_ref(), &encode_ppm(img)?)
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Tensor<f32>, ImageError> {
    decode_pgm(&read(path.as_ref())?)
}

pub fn save_pgm(path: impl AsRef<Path>, map: &Tensor<f32>) -> Result<(), ImageError> {
    write(path.as_ref(), &encode_pgm(map)?)
}
