//! Binary checkpoints.
//!
//! ```text
//! "DMIM" u32:version
//! u32:len  model config as `key = value` text
//! u32:count  { u32:len name, u8:rank, u32 dims[rank], f32 data[] }   parameters
//! u8:has_optimizer [ u64:t, table m, table v ]
//! u64:seed u64:step
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use super::bytes::{put_f32s, put_string, put_u32, put_u64, read_file, write_file, Reader};
use crate::error::Result;
use crate::model::{ModelConfig, Params};
use crate::numerics::Tensor;
use crate::training::AdamState;

const MAGIC: &[u8; 4] = b"DMIM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Params,
    pub optimizer: Option<AdamState>,
    /// Seed every random stream of the run is derived from.
    pub seed: u64,
    /// Optimizer steps completed.
    pub step: u64,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: Params, seed: u64) -> Self {
        Checkpoint {
            config,
            params,
            optimizer: None,
            seed,
            step: 0,
        }
    }

    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        let opt = match (&self.optimizer, &other.optimizer) {
            (None, None) => true,
            (Some(a), Some(b)) => a.bit_eq(b),
            _ => false,
        };
        self.config == other.config && self.params.bit_eq(&other.params) && opt && self.seed == other.seed && self.step == other.step
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.params.num_elements() * 4);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_string(&mut out, &self.config.to_text());
        put_table(&mut out, self.params.len(), self.params.iter());
        match &self.optimizer {
            None => out.push(0),
            Some(s) => {
                out.push(1);
                put_u64(&mut out, s.t);
                put_table(&mut out, s.m.len(), s.m.iter());
                put_table(&mut out, s.v.len(), s.v.iter());
            }
        }
        put_u64(&mut out, self.seed);
        put_u64(&mut out, self.step);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.magic(MAGIC)?;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let at = r.pos();
        let text = r.string("model config")?;
        let config = ModelConfig::from_text(&text).map_err(|e| r.err(format!("model config at byte {at}: {e}")))?;
        let mut params = Params::new();
        for (name, t) in get_table(&mut r)? {
            params.insert(name, t);
        }
        let optimizer = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let t = r.u64("optimizer step")?;
                let m = get_table(&mut r)?.into_iter().collect();
                let v = get_table(&mut r)?.into_iter().collect();
                Some(AdamState { t, m, v })
            }
            f => return Err(r.err(format!("bad optimizer flag {f}"))),
        };
        let seed = r.u64("seed")?;
        let step = r.u64("step")?;
        r.finish()?;
        Ok(Checkpoint {
            config,
            params,
            optimizer,
            seed,
            step,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

fn put_table<'a>(out: &mut Vec<u8>, count: usize, entries: impl Iterator<Item = (&'a String, &'a Tensor)>) {
    put_u32(out, count as u32);
    for (name, t) in entries {
        put_string(out, name);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            put_u32(out, d as u32);
        }
        put_f32s(out, t.data());
    }
}

fn get_table(r: &mut Reader) -> Result<BTreeMap<String, Tensor>> {
    let count = r.u32("table size")?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let at = r.pos();
        let data = r.f32s(n, &name)?;
        let t = Tensor::new(shape, data).map_err(|e| r.err(format!("tensor `{name}` at byte {at}: {e}")))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(r.err(format!("duplicate tensor `{name}`")));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn sample() -> Checkpoint {
        let c = ModelConfig::small(8, 4, 16, 2, 2).with_taps(vec![1]);
        let p = init_params(&c, 7).unwrap();
        let mut ck = Checkpoint::new(c, p.clone(), 42);
        let mut s = AdamState { t: 3, ..AdamState::default() };
        for (n, t) in p.iter().take(5) {
            s.m.insert(n.clone(), t.map(|v| v * 0.5));
            s.v.insert(n.clone(), t.map(|v| v * v));
        }
        ck.optimizer = Some(s);
        ck.step = 3;
        ck
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        ck.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert!(ck.bit_eq(&back));
        let mut plain = ck.clone();
        plain.optimizer = None;
        let back = Checkpoint::from_bytes(&plain.to_bytes(), &path).unwrap();
        assert!(plain.bit_eq(&back) && back.optimizer.is_none());
    }

    #[test]
    fn version_and_truncation_errors() {
        let mut b = sample().to_bytes();
        b[4] = 2;
        let e = Checkpoint::from_bytes(&b, Path::new("x")).unwrap_err().to_string();
        assert!(e.contains("version 2"), "{e}");
        let b = sample().to_bytes();
        let e = Checkpoint::from_bytes(&b[..b.len() - 3], Path::new("x")).unwrap_err().to_string();
        assert!(e.contains("truncated"), "{e}");
    }
}
