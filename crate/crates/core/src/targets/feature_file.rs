//! Precomputed per-patch teacher features.
//!
//! Layout: `DMFT`, u32 version, u32 n_samples, u32 n_patches, u32 feat_dim,
//! then `n_samples * n_patches * feat_dim` little-endian f32.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::bytes::{put_f32s, put_u32, read_file, write_file, Reader};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"DMFT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    n_samples: usize,
    n_patches: usize,
    feat_dim: usize,
    data: Vec<f32>,
}

impl FeatureFile {
    /// `features` is `[n_samples, n_patches, feat_dim]`.
    pub fn from_tensor(features: &Tensor) -> Result<Self> {
        let s = features.shape();
        if s.len() != 3 {
            return Err(Error::Invalid(format!("features must be [samples, patches, dim], got {s:?}")));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("feature file payload".into()));
        }
        Ok(FeatureFile {
            n_samples: s[0],
            n_patches: s[1],
            feat_dim: s[2],
            data: features.data().to_vec(),
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    /// Features of one sample, `[n_patches, feat_dim]`.
    pub fn sample(&self, index: usize) -> Result<Tensor> {
        let rec = self.record(index)?;
        Tensor::new(vec![self.n_patches, self.feat_dim], rec.to_vec())
    }

    /// Stacked features `[B, n_patches, feat_dim]` in the given order.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.n_patches * self.feat_dim);
        for &i in indices {
            data.extend_from_slice(self.record(i)?);
        }
        Tensor::new(vec![indices.len(), self.n_patches, self.feat_dim], data)
    }

    fn record(&self, index: usize) -> Result<&[f32]> {
        if index >= self.n_samples {
            return Err(Error::Invalid(format!(
                "feature file has no sample {index} (holds {})",
                self.n_samples
            )));
        }
        let len = self.n_patches * self.feat_dim;
        Ok(&self.data[index * len..(index + 1) * len])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.n_samples as u32);
        put_u32(&mut out, self.n_patches as u32);
        put_u32(&mut out, self.feat_dim as u32);
        put_f32s(&mut out, &self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.magic(MAGIC)?;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.err(format!("unsupported feature file version {version}")));
        }
        let n_samples = r.u32("n_samples")? as usize;
        let n_patches = r.u32("n_patches")? as usize;
        let feat_dim = r.u32("feat_dim")? as usize;
        if n_samples == 0 || n_patches == 0 || feat_dim == 0 {
            return Err(r.err("zero-sized feature file header"));
        }
        let per = n_patches * feat_dim;
        if r.remaining() < n_samples * per * 4 {
            let complete = r.remaining() / (per * 4);
            return Err(r.err(format!(
                "header declares {n_samples} samples of [{n_patches}, {feat_dim}] but sample {complete} is incomplete"
            )));
        }
        let data = r.f32s(n_samples * per, "features")?;
        r.finish()?;
        Ok(FeatureFile {
            n_samples,
            n_patches,
            feat_dim,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}
