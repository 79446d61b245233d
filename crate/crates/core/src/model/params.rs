use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{DecoderId, ModelConfig};
use crate::error::{Error, Result};
use crate::masking::mix_seed;
use crate::numerics::Tensor;

pub const INIT_STD: f32 = 0.02;

/// Named parameter store. Paths look like `encoder.block3.attn.wq`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    tensors: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Bitwise equality of every tensor, including `-0.0` vs `0.0`.
    pub fn bit_eq(&self, other: &Params) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    TruncNormal,
    Normal,
    Zeros,
    Ones,
    /// 2-D sine-cosine table over the patch grid; shape `[n_patches, dim]`.
    SinCos,
}

/// Prefix of the parameters used by decoder `id`.
pub fn decoder_prefix(config: &ModelConfig, id: DecoderId) -> String {
    if config.shared_decoder {
        "decoder.shared".to_string()
    } else {
        format!("decoder.{id}")
    }
}

pub fn encoder_block_prefix(i: usize) -> String {
    format!("encoder.block{i}")
}

fn block_specs(prefix: &str, dim: usize, hidden: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    let mut push = |n: &str, s: Vec<usize>, i: Init| out.push((format!("{prefix}.{n}"), s, i));
    push("norm1.gamma", vec![dim], Init::Ones);
    push("norm1.beta", vec![dim], Init::Zeros);
    for w in ["q", "k", "v", "o"] {
        push(&format!("attn.w{w}"), vec![dim, dim], Init::TruncNormal);
        push(&format!("attn.b{w}"), vec![dim], Init::Zeros);
    }
    push("norm2.gamma", vec![dim], Init::Ones);
    push("norm2.beta", vec![dim], Init::Zeros);
    push("mlp.w1", vec![dim, hidden], Init::TruncNormal);
    push("mlp.b1", vec![hidden], Init::Zeros);
    push("mlp.w2", vec![hidden, dim], Init::TruncNormal);
    push("mlp.b2", vec![dim], Init::Zeros);
}

/// Every parameter of `config` with its shape and initialiser, in a fixed order.
pub fn param_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.embed_dim;
    let n = config.n_patches();
    let mut out = vec![
        ("encoder.patch_embed.w".to_string(), vec![config.patch_dim(), d], Init::TruncNormal),
        ("encoder.patch_embed.b".to_string(), vec![d], Init::Zeros),
        ("encoder.pos_embed".to_string(), vec![n, d], Init::SinCos),
    ];
    for i in 1..=config.depth {
        block_specs(&encoder_block_prefix(i), d, config.mlp_hidden(), &mut out);
    }
    out.push(("encoder.norm.gamma".into(), vec![d], Init::Ones));
    out.push(("encoder.norm.beta".into(), vec![d], Init::Zeros));

    let dd = config.decoder_dim;
    let mut prefixes: Vec<String> = config.decoder_ids().iter().map(|&id| decoder_prefix(config, id)).collect();
    prefixes.dedup();
    for p in prefixes {
        out.push((format!("{p}.embed.w"), vec![d, dd], Init::TruncNormal));
        out.push((format!("{p}.embed.b"), vec![dd], Init::Zeros));
        out.push((format!("{p}.mask_token"), vec![dd], Init::Normal));
        out.push((format!("{p}.pos_embed"), vec![n, dd], Init::SinCos));
        for j in 1..=config.decoder_depth {
            block_specs(&format!("{p}.block{j}"), dd, config.decoder_mlp_hidden(), &mut out);
        }
        out.push((format!("{p}.norm.gamma"), vec![dd], Init::Ones));
        out.push((format!("{p}.norm.beta"), vec![dd], Init::Zeros));
        out.push((format!("{p}.pred.w"), vec![dd, config.target_dim], Init::TruncNormal));
        out.push((format!("{p}.pred.b"), vec![config.target_dim], Init::Zeros));
    }
    out
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Draws one tensor. Each parameter has its own stream keyed by
/// `(seed, path)`, so adding or dropping parameters never shifts the others.
pub fn init_tensor(name: &str, shape: &[usize], init: Init, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, fnv1a(name)]));
    let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::ones(shape),
        Init::SinCos => sincos_table(shape[0], shape[1]),
        Init::Normal => Tensor::from_fn(shape, |_| normal.sample(&mut rng)),
        Init::TruncNormal => Tensor::from_fn(shape, |_| loop {
            let v = normal.sample(&mut rng);
            if v.abs() <= 2.0 * INIT_STD {
                break v;
            }
        }),
    }
}

/// First half of each row encodes the grid row, second half the column;
/// each half is `sin` then `cos` at geometric frequencies. Widths that are
/// not a multiple of 4 leave the trailing columns at zero.
fn sincos_table(n: usize, dim: usize) -> Tensor {
    let g = (n as f64).sqrt().round() as usize;
    let quarter = dim / 4;
    let mut t = Tensor::zeros(&[n, dim]);
    let data = t.data_mut();
    for i in 0..n {
        let (row, col) = ((i / g) as f64, (i % g) as f64);
        for (half, coord) in [row, col].into_iter().enumerate() {
            for k in 0..quarter {
                let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                let base = i * dim + half * 2 * quarter;
                data[base + k] = (coord * omega).sin() as f32;
                data[base + quarter + k] = (coord * omega).cos() as f32;
            }
        }
    }
    t
}

/// Deterministic initialisation of every encoder and decoder parameter.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<Params> {
    config.validate()?;
    let mut p = Params::new();
    for (name, shape, init) in param_specs(config) {
        let t = init_tensor(&name, &shape, init, seed);
        p.insert(name, t);
    }
    Ok(p)
}

/// Adds a fresh `[embed_dim, n_classes]` linear classification head.
pub fn init_head(params: &mut Params, config: &ModelConfig, n_classes: usize, seed: u64) {
    let d = config.embed_dim;
    params.insert("head.w", init_tensor("head.w", &[d, n_classes], Init::TruncNormal, seed));
    params.insert("head.b", Tensor::zeros(&[n_classes]));
}

/// Redraws the last `k` encoder blocks from the initial distribution; every
/// other tensor is kept bitwise.
pub fn reinit_last_k(params: &Params, config: &ModelConfig, k: usize, seed: u64) -> Result<Params> {
    if k > config.depth {
        return Err(Error::Invalid(format!("cannot reinitialise {k} of {} blocks", config.depth)));
    }
    let mut out = params.clone();
    let first = config.depth - k + 1;
    for (name, shape, init) in param_specs(config) {
        let in_range = (first..=config.depth).any(|i| name.starts_with(&format!("{}.", encoder_block_prefix(i))));
        if in_range {
            let fresh = init_tensor(&name, &shape, init, mix_seed(&[seed, 0x5e1d]));
            out.insert(name, fresh);
        }
    }
    Ok(out)
}

/// Whether AdamW leaves this tensor out of weight decay: biases, LayerNorm
/// affine terms and mask tokens, i.e. every rank-1 tensor.
pub fn exempt_from_decay(t: &Tensor) -> bool {
    t.rank() == 1
}
