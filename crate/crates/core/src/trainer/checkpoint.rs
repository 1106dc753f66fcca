//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"PATCKPT1"
//! u64 config length, config text (UTF-8)
//! u64 array count, then per array:
//!     u64 name length, name, u64 rank, rank x u64 extents, f32 values
//! u64 optimizer array count, arrays as above
//! u64 optimizer step
//! u64 epoch
//! 32-byte rng seed, u64 rng stream, u128 rng word position
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"PATCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint or unsupported version (magic {0:?})")]
    BadMagic(Vec<u8>),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub params: Vec<NamedArray>,
    pub optimizer: Vec<NamedArray>,
    pub optimizer_step: u64,
    pub epoch: u64,
    pub rng: RngState,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend(v.to_le_bytes());
}

fn put_arrays(out: &mut Vec<u8>, arrays: &[NamedArray]) {
    put_u64(out, arrays.len() as u64);
    for a in arrays {
        put_u64(out, a.name.len() as u64);
        out.extend(a.name.as_bytes());
        put_u64(out, a.shape.len() as u64);
        for &e in &a.shape {
            put_u64(out, e as u64);
        }
        for v in &a.values {
            out.extend(v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(self.bytes.len()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A length that must fit in the remaining bytes at `unit` bytes each.
    fn len(&mut self, unit: usize) -> Result<usize, CheckpointError> {
        let n = self.u64()?;
        let remaining = (self.bytes.len() - self.pos) as u64;
        if n.saturating_mul(unit as u64) > remaining {
            return Err(CheckpointError::Truncated(self.bytes.len()));
        }
        Ok(n as usize)
    }

    fn arrays(&mut self) -> Result<Vec<NamedArray>, CheckpointError> {
        let count = self.len(1)?;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let n = self.len(1)?;
            let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("array name is not UTF-8".into()))?;
            let rank = self.len(8)?;
            let shape: Vec<usize> = (0..rank).map(|_| self.u64().map(|v| v as usize)).collect::<Result<_, _>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| CheckpointError::Malformed(format!("array {name} overflows")))?;
            let raw = self.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated(self.bytes.len()))?)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            out.push(NamedArray { name, shape, values });
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        put_u64(&mut out, self.config.len() as u64);
        out.extend(self.config.as_bytes());
        put_arrays(&mut out, &self.params);
        put_arrays(&mut out, &self.optimizer);
        put_u64(&mut out, self.optimizer_step);
        put_u64(&mut out, self.epoch);
        out.extend(self.rng.seed);
        put_u64(&mut out, self.rng.stream);
        out.extend(self.rng.word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic(bytes[..bytes.len().min(8)].to_vec()));
        }
        let mut r = Reader { bytes, pos: 8 };
        let n = r.len(1)?;
        let config = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("config is not UTF-8".into()))?;
        let params = r.arrays()?;
        let optimizer = r.arrays()?;
        let optimizer_step = r.u64()?;
        let epoch = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config,
            params,
            optimizer,
            optimizer_step,
            epoch,
            rng: RngState { seed, stream, word_pos },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: "epochs = 3\n".into(),
            params: vec![
                NamedArray {
                    name: "a".into(),
                    shape: vec![2, 1],
                    values: vec![1.5, -0.0],
                },
                NamedArray {
                    name: "b".into(),
                    shape: vec![],
                    values: vec![f32::MIN_POSITIVE],
                },
            ],
            optimizer: vec![NamedArray {
                name: "adam.m.a".into(),
                shape: vec![2, 1],
                values: vec![0.25, 3.0],
            }],
            optimizer_step: 7,
            epoch: 2,
            rng: RngState {
                seed: [9; 32],
                stream: 4,
                word_pos: 123_456_789_000,
            },
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert!(bytes.starts_with(b"PATCKPT1"));
    }

    #[test]
    fn corruption_is_a_typed_error() {
        let mut bytes = sample().to_bytes();
        for cut in [0, 5, 9, 20, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        bytes[7] = b'2';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::BadMagic(_))));
        let mut long = sample().to_bytes();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(CheckpointError::Malformed(_))));
    }

    #[test]
    fn absurd_lengths_do_not_allocate() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend(u64::MAX.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Truncated(_))));
    }
}
