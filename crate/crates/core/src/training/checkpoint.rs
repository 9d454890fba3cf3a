//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "PLFW" | version u32 | patch_size u32 | channels u32 | steps(K) u32 |
//! hidden_width u32 | step u64 | seed u64 |
//! tensors: parameters (canonical order), then Adam m, then Adam v,
//!          each as rank u32, extents u32 x rank, f32 payload |
//! CRC32 of everything before it u32
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::flow::{FlowConfig, FlowParams};
use crate::numerics::Tensor;

use super::optim::AdamState;

pub const MAGIC: [u8; 4] = *b"PLFW";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 5 + 8 * 2;
const MAX_STEPS: usize = 4096;
const MAX_HIDDEN: usize = 1 << 16;
const MAX_PATCH: usize = 1024;

/// Everything needed to resume training bit-exactly. The per-step random
/// stream is derived from `(seed, step)`, so those two fields are the full
/// generator state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: FlowParams,
    pub adam: AdamState,
    pub step: u64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn config(&self) -> &FlowConfig {
        self.params.config()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.params.config();
        let mut out = Vec::with_capacity(HEADER_LEN + 12 * 4 * self.params.num_parameters());
        out.extend_from_slice(&MAGIC);
        for v in [VERSION, cfg.patch_size as u32, cfg.channels as u32, cfg.steps as u32, cfg.hidden_width as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let tensors = self.params.tensors().into_iter().chain(&self.adam.m).chain(&self.adam.v);
        for t in tensors {
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        if bytes.len() < 4 {
            return Err(CheckpointError::Truncated);
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let patch_size = r.u32()? as usize;
        let channels = r.u32()? as usize;
        let steps = r.u32()? as usize;
        let hidden_width = r.u32()? as usize;
        let step = r.u64()?;
        let seed = r.u64()?;
        if patch_size > MAX_PATCH || channels > 64 || steps > MAX_STEPS || hidden_width > MAX_HIDDEN || hidden_width == 0 {
            return Err(CheckpointError::Header(format!(
                "implausible dimensions: patch {patch_size}, channels {channels}, K {steps}, hidden {hidden_width}"
            )));
        }
        let config = FlowConfig {
            patch_size,
            channels,
            steps,
            hidden_width,
        };
        config
            .validate()
            .map_err(|e| CheckpointError::Header(e.to_string()))?;

        let shapes = config.param_shapes();
        let expected_len = HEADER_LEN
            + 3 * shapes
                .iter()
                .map(|s| 4 + 4 * s.len() + 4 * s.iter().product::<usize>())
                .sum::<usize>()
            + 4;
        if bytes.len() < expected_len {
            return Err(CheckpointError::Truncated);
        }
        if bytes.len() > expected_len {
            return Err(CheckpointError::TrailingBytes(bytes.len() - expected_len));
        }
        let body = &bytes[..expected_len - 4];
        let stored = u32::from_le_bytes(bytes[expected_len - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::CrcMismatch { stored, computed });
        }

        let mut read_group = |offset: usize| -> std::result::Result<Vec<Tensor>, CheckpointError> {
            let mut out = Vec::with_capacity(shapes.len());
            for (i, expected) in shapes.iter().enumerate() {
                let index = offset + i;
                let rank = r.u32()? as usize;
                if rank != expected.len() {
                    return Err(CheckpointError::TensorShape {
                        index,
                        expected: expected.clone(),
                        found: vec![rank],
                    });
                }
                let found: Vec<usize> = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<std::result::Result<_, _>>()?;
                if &found != expected {
                    return Err(CheckpointError::TensorShape {
                        index,
                        expected: expected.clone(),
                        found,
                    });
                }
                let n: usize = found.iter().product();
                let data = (0..n).map(|_| r.f32()).collect::<std::result::Result<Vec<_>, _>>()?;
                let t = Tensor::new(found, data)
                    .map_err(|_| CheckpointError::Header(format!("tensor {index} holds a non-finite value")))?;
                out.push(t);
            }
            Ok(out)
        };
        let params = read_group(0)?;
        let m = read_group(shapes.len())?;
        let v = read_group(2 * shapes.len())?;
        let params = FlowParams::from_tensors(config, params).map_err(|e| CheckpointError::Header(e.to_string()))?;
        Ok(Self {
            params,
            adam: AdamState { m, v },
            step,
            seed,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> std::result::Result<[u8; N], CheckpointError> {
        let s = self
            .bytes
            .get(self.pos..self.pos + N)
            .ok_or(CheckpointError::Truncated)?;
        self.pos += N;
        Ok(s.try_into().unwrap())
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        self.take::<4>().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> std::result::Result<u64, CheckpointError> {
        self.take::<8>().map(u64::from_le_bytes)
    }

    fn f32(&mut self) -> std::result::Result<f32, CheckpointError> {
        self.take::<4>().map(f32::from_le_bytes)
    }
}

/// Writes atomically: a sibling temporary file is renamed over `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(tmp)?;
        f.write_all(&ckpt.to_bytes())?;
        f.sync_all()?;
        fs::rename(tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|source| Error::CheckpointFile {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn sample() -> Checkpoint {
        let cfg = FlowConfig {
            patch_size: 4,
            channels: 3,
            steps: 2,
            hidden_width: 5,
        };
        let mut rng = Rng::new(4);
        let params = FlowParams::random(cfg, &mut rng, 0.3).unwrap();
        let other = FlowParams::random(cfg, &mut rng, 0.1).unwrap();
        let m = other.tensors().into_iter().cloned().collect();
        let v = other.tensors().into_iter().map(|t| t.map(|x| x * x)).collect();
        Checkpoint {
            params,
            adam: AdamState { m, v },
            step: 1234,
            seed: 99,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.plfw");
        let c = sample();
        save_checkpoint(&c, &p).unwrap();
        let first = fs::read(&p).unwrap();
        save_checkpoint(&load_checkpoint(&p).unwrap(), &p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
    }

    #[test]
    fn wrong_magic_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert_eq!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::BadMagic(*b"XLFW")));
    }

    #[test]
    fn next_version_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert_eq!(err, CheckpointError::UnsupportedVersion(2));
        assert!(err.to_string().contains("unsupported version"), "{err}");
    }

    #[test]
    fn truncation_and_trailing_bytes_rejected() {
        let bytes = sample().to_bytes();
        for cut in [2, 10, HEADER_LEN, bytes.len() - 1] {
            assert_eq!(Checkpoint::from_bytes(&bytes[..cut]), Err(CheckpointError::Truncated), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(Checkpoint::from_bytes(&extra), Err(CheckpointError::TrailingBytes(1)));
    }

    #[test]
    fn flipped_payload_bit_fails_crc() {
        let mut bytes = sample().to_bytes();
        let i = bytes.len() / 2;
        bytes[i] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::CrcMismatch { .. })));
    }

    #[test]
    fn load_error_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.plfw");
        fs::write(&p, b"nope, not a checkpoint").unwrap();
        let err = load_checkpoint(&p).unwrap_err();
        assert!(err.to_string().contains("bad.plfw"), "{err}");
    }
}
