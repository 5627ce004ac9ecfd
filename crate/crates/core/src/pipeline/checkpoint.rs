//! Binary checkpoints and loss logs.
//!
//! Checkpoint layout (little-endian): `"ACKP"`, u32 version, u32 stage,
//! u64 step, the RNG block (u32 stream count, then per stream u64 seed,
//! u64 stream id, u128 word position), u32 tensor count, then per tensor
//! u16 name length, UTF-8 name, u8 dtype (0 = f32), u8 rank, u32 dims and
//! the raw values. Tensors are written in lexicographic name order.
//! Optimizer moments are stored as tensors named `opt.m.<param>` and
//! `opt.v.<param>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio::{write_atomic, ByteReader};
use crate::nn::{OptimState, ParameterStore, Tensor};
use crate::rng::StreamState;

pub const MAGIC: &[u8; 4] = b"ACKP";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const OPT_M: &str = "opt.m.";
const OPT_V: &str = "opt.v.";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: u32,
    /// Optimizer steps completed in this stage.
    pub step: u64,
    pub rng: Vec<StreamState>,
    pub params: ParameterStore,
    pub optim: OptimState,
}

impl Checkpoint {
    fn tensors(&self) -> BTreeMap<String, &Tensor> {
        let mut all: BTreeMap<String, &Tensor> = BTreeMap::new();
        for (n, p) in self.params.iter() {
            all.insert(n.clone(), &p.value);
        }
        for (n, t) in &self.optim.m {
            all.insert(format!("{OPT_M}{n}"), t);
        }
        for (n, t) in &self.optim.v {
            all.insert(format!("{OPT_V}{n}"), t);
        }
        all
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend(self.stage.to_le_bytes());
        out.extend(self.step.to_le_bytes());
        out.extend((self.rng.len() as u32).to_le_bytes());
        for s in &self.rng {
            out.extend(s.seed.to_le_bytes());
            out.extend(s.stream.to_le_bytes());
            out.extend(s.word_pos.to_le_bytes());
        }
        let tensors = self.tensors();
        out.extend((tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize || t.shape().len() > u8::MAX as usize {
                return Err(Error::Format(format!("tensor `{name}` cannot be encoded")));
            }
            out.extend((nb.len() as u16).to_le_bytes());
            out.extend(nb);
            out.push(DTYPE_F32);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend((d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let stage = r.u32()?;
        let step = r.u64()?;
        let nrng = r.u32()? as usize;
        let mut rng = Vec::with_capacity(nrng.min(64));
        for _ in 0..nrng {
            rng.push(StreamState {
                seed: r.u64()?,
                stream: r.u64()?,
                word_pos: r.u128()?,
            });
        }
        let count = r.u32()? as usize;
        let mut params = ParameterStore::new();
        let mut optim = OptimState {
            step,
            ..Default::default()
        };
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!("tensor `{name}` has unknown dtype {dtype}")));
            }
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            if n.checked_mul(4).map_or(true, |b| b > r.remaining()) {
                return Err(Error::Format(format!("tensor `{name}` {shape:?} exceeds the file")));
            }
            let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::from_vec(&shape, data)?;
            if let Some(p) = name.strip_prefix(OPT_M) {
                optim.m.insert(p.to_string(), t);
            } else if let Some(p) = name.strip_prefix(OPT_V) {
                optim.v.insert(p.to_string(), t);
            } else {
                params.insert(name, t)?;
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", r.remaining())));
        }
        Ok(Checkpoint {
            stage,
            step,
            rng,
            params,
            optim,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            Error::Prerequisite(format!("cannot read checkpoint {}: {e}", path.display()))
        })?;
        Self::from_bytes(&bytes)
    }

    /// Bitwise equality of stage, step, RNG states and every tensor.
    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        let (a, b) = (self.tensors(), other.tensors());
        self.stage == other.stage
            && self.step == other.step
            && self.rng == other.rng
            && a.len() == b.len()
            && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }
}

/// `step<TAB>loss` lines.
pub fn loss_log(losses: &[(u64, f32)]) -> String {
    losses.iter().map(|(s, l)| format!("{s}\t{l}\n")).collect()
}

pub fn parse_loss_log(text: &str) -> Result<Vec<(u64, f32)>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (s, v) = l
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("loss log line `{l}`")))?;
            Ok((
                s.parse().map_err(|_| Error::Format(format!("loss log step `{s}`")))?,
                v.parse().map_err(|_| Error::Format(format!("loss log value `{v}`")))?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParameterStore::new();
        params.insert("b.x", Tensor::from_vec(&[2, 2], vec![1.0, -0.0, 3.5, f32::MIN_POSITIVE]).unwrap()).unwrap();
        params.insert("a.y", Tensor::scalar(7.0)).unwrap();
        let mut optim = OptimState {
            step: 9,
            ..Default::default()
        };
        optim.m.insert("b.x".into(), Tensor::full(&[2, 2], 0.25));
        optim.v.insert("b.x".into(), Tensor::full(&[2, 2], 0.5));
        Checkpoint {
            stage: 3,
            step: 9,
            rng: vec![StreamState {
                seed: 1,
                stream: 2,
                word_pos: 1 << 70,
            }],
            params,
            optim,
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"ACKP");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(c.bit_eq(&back));
        assert_eq!(back.optim, c.optim);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncation_and_bad_magic_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [3, 20, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn loss_log_roundtrip() {
        let l = vec![(1, 0.5f32), (2, 0.25)];
        let text = loss_log(&l);
        assert_eq!(text, "1\t0.5\n2\t0.25\n");
        assert_eq!(parse_loss_log(&text).unwrap(), l);
    }
}
