//! Checkpoint file, little-endian:
//!
//! ```text
//! magic     8 bytes "AQACKPT1"
//! config    u32 length + UTF-8 TOML text of the run configuration
//! epoch     u64
//! score     f64 min, f64 max   (training-split range used for scaling)
//! params    u32 count, then per tensor:
//!             u32 name length + name, u32 rank, u32 × rank dims, f64 × numel
//! adam      u64 step, then for each tensor in the same order:
//!             f64 × numel first moment, f64 × numel second moment
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::heads::AdamState;
use crate::tensor::{SeededRng, Tensor};

use super::{ModelParams, RunConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AQACKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: u64,
    pub score_min: f64,
    pub score_max: f64,
    pub params: ModelParams,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        let text = self.config.to_toml();
        b.extend_from_slice(&(text.len() as u32).to_le_bytes());
        b.extend_from_slice(text.as_bytes());
        b.extend_from_slice(&self.epoch.to_le_bytes());
        b.extend_from_slice(&self.score_min.to_le_bytes());
        b.extend_from_slice(&self.score_max.to_le_bytes());
        let named = self.params.named();
        b.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in &named {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_f64s(&mut b, t.data());
        }
        b.extend_from_slice(&self.adam.step.to_le_bytes());
        for (m, v) in self.adam.m.iter().zip(&self.adam.v) {
            put_f64s(&mut b, m.data());
            put_f64s(&mut b, v.data());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("missing AQACKPT1 header".into()));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("configuration is not UTF-8".into()))?;
        let config = RunConfig::from_toml(text)?;
        let epoch = r.u64()?;
        let score_min = r.f64()?;
        let score_max = r.f64()?;

        // the layout implied by the stored configuration
        let mut params = ModelParams::init(&config, &mut SeededRng::new(0));
        let count = r.u32()? as usize;
        let mut slots = params.named_mut();
        if count != slots.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {count} tensors, configuration expects {}",
                slots.len()
            )));
        }
        for (expected, slot) in slots.iter_mut() {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            if &name != expected {
                return Err(Error::Checkpoint(format!("expected tensor {expected}, found {name}")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {shape:?}, configuration expects {:?}",
                    slot.shape()
                )));
            }
            let data = r.f64s(slot.numel())?;
            **slot = Tensor::new(shape, data)?;
        }
        let step = r.u64()?;
        let mut m = Vec::with_capacity(slots.len());
        let mut v = Vec::with_capacity(slots.len());
        for (_, slot) in &slots {
            let shape = slot.shape().to_vec();
            m.push(Tensor::new(shape.clone(), r.f64s(slot.numel())?)?);
            v.push(Tensor::new(shape, r.f64s(slot.numel())?)?);
        }
        drop(slots);
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after optimizer state",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            epoch,
            score_min,
            score_max,
            params,
            adam: AdamState { step, m, v },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_f64s(b: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        b.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::DistillMode;

    fn sample(mode: DistillMode) -> Checkpoint {
        let mut config = RunConfig::with_seed(4);
        config.mode = mode;
        let params = ModelParams::init(&config, &mut SeededRng::new(1));
        let shapes: Vec<Vec<usize>> = params.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let mut adam = AdamState::new(&shapes.iter().map(|s| s.as_slice()).collect::<Vec<_>>());
        adam.step = 3;
        adam.m[0].data_mut()[0] = 0.125;
        Checkpoint {
            config,
            epoch: 7,
            score_min: 11.5,
            score_max: 15.25,
            params,
            adam,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        for mode in DistillMode::ALL {
            let ck = sample(mode);
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn layout_mismatch_is_checkpoint_error() {
        let ck = sample(DistillMode::Vfd);
        let mut bytes = ck.to_bytes();
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));

        // config says nla_emb, tensors are the vfd set
        let other = sample(DistillMode::NlaEmb);
        let spliced = {
            let vfd = ck.to_bytes();
            let head_len = 12 + u32::from_le_bytes(vfd[8..12].try_into().unwrap()) as usize;
            let other_bytes = other.to_bytes();
            let other_head = 12 + u32::from_le_bytes(other_bytes[8..12].try_into().unwrap()) as usize;
            let mut s = other_bytes[..other_head].to_vec();
            s.extend_from_slice(&vfd[head_len..]);
            s
        };
        assert!(matches!(Checkpoint::from_bytes(&spliced), Err(Error::Checkpoint(_))));
    }
}
