use std::collections::{BTreeMap, HashMap};

use super::config::{DecoderId, ModelConfig, LN_EPS};
use super::params::{decoder_prefix, encoder_block_prefix, Params};
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::numerics::{Tape, Tensor, Var};

/// `[B, C, H, W] -> [B, N, C*p*p]`, patches in raster order and channel-major
/// inside each patch.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || patch == 0 || s[2] % patch != 0 || s[3] % patch != 0 {
        return Err(Error::shape("patchify", s, &[patch]));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / patch, w / patch);
    let pd = c * patch * patch;
    let src = images.data();
    let mut out = vec![0.0; images.len()];
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                let base = ((bi * gh + py) * gw + px) * pd;
                for ci in 0..c {
                    for dy in 0..patch {
                        let row = ((bi * c + ci) * h + py * patch + dy) * w + px * patch;
                        let o = base + (ci * patch + dy) * patch;
                        out[o..o + patch].copy_from_slice(&src[row..row + patch]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, gh * gw, pd], out)
}

/// Inverse of [`patchify`] for square images of `chans` channels.
pub fn unpatchify(patches: &Tensor, patch: usize, chans: usize) -> Result<Tensor> {
    let s = patches.shape();
    let g = (s.get(1).copied().unwrap_or(0) as f64).sqrt() as usize;
    if s.len() != 3 || g * g != s[1] || s[2] != chans * patch * patch {
        return Err(Error::shape("unpatchify", s, &[chans, patch, patch]));
    }
    let (b, side) = (s[0], g * patch);
    let pd = s[2];
    let src = patches.data();
    let mut out = vec![0.0; patches.len()];
    for bi in 0..b {
        for py in 0..g {
            for px in 0..g {
                let base = ((bi * g + py) * g + px) * pd;
                for ci in 0..chans {
                    for dy in 0..patch {
                        let row = ((bi * chans + ci) * side + py * patch + dy) * side + px * patch;
                        let o = base + (ci * patch + dy) * patch;
                        out[row..row + patch].copy_from_slice(&src[o..o + patch]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, chans, side, side], out)
}

/// Binds parameters to tape leaves on first use within one forward pass.
pub struct Binder<'p> {
    params: &'p Params,
    vars: HashMap<String, Var>,
    trainable: Box<dyn Fn(&str) -> bool + 'p>,
}

impl<'p> Binder<'p> {
    /// Every parameter receives gradients.
    pub fn new(params: &'p Params) -> Self {
        Self::with_filter(params, |_| true)
    }

    /// No parameter receives gradients.
    pub fn frozen(params: &'p Params) -> Self {
        Self::with_filter(params, |_| false)
    }

    pub fn with_filter(params: &'p Params, trainable: impl Fn(&str) -> bool + 'p) -> Self {
        Binder {
            params,
            vars: HashMap::new(),
            trainable: Box::new(trainable),
        }
    }

    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let v = tape.leaf(t, (self.trainable)(name));
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Uses `v` for parameter `name` instead of a fresh leaf.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }

    /// Parameters bound so far, with their tape handles.
    pub fn bound(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn params(&self) -> &Params {
        self.params
    }
}

/// Encoder activations for one batch.
pub struct EncoderOutput {
    /// Output of the last block after the final LayerNorm, `[B*n, D]`.
    pub final_tokens: Var,
    /// Raw output of every tapped block, `[B*n, D]`.
    pub tap_tokens: BTreeMap<usize, Var>,
    /// Raw output of every block, index 0 holding block 1.
    pub block_outputs: Vec<Var>,
    /// Per-block attention probabilities `[B, heads, n, n]`; empty unless
    /// the forward ran in analysis mode.
    pub attn_probs: Vec<Tensor>,
    pub batch: usize,
    pub tokens: usize,
}

impl EncoderOutput {
    /// Features that feed decoder `id`.
    pub fn features_for(&self, id: DecoderId) -> Result<Var> {
        match id {
            DecoderId::Final => Ok(self.final_tokens),
            DecoderId::Tap(i) => self
                .tap_tokens
                .get(&i)
                .copied()
                .ok_or_else(|| Error::Config(format!("block {i} is not a tap"))),
        }
    }

    /// Features of block `layer` (1-based); the last block reports the
    /// normalised final tokens.
    pub fn layer_features(&self, layer: usize) -> Result<Var> {
        let depth = self.block_outputs.len();
        match layer {
            l if l == depth => Ok(self.final_tokens),
            l if l >= 1 && l < depth => Ok(self.block_outputs[l - 1]),
            l => Err(Error::Config(format!("layer {l} outside 1..={depth}"))),
        }
    }
}

fn linear(tape: &mut Tape, b: &mut Binder, x: Var, w: &str, bias: &str) -> Result<Var> {
    let w = b.get(tape, w)?;
    let bias = b.get(tape, bias)?;
    let y = tape.matmul(x, w)?;
    tape.add_rows(y, bias)
}

fn norm(tape: &mut Tape, b: &mut Binder, x: Var, prefix: &str) -> Result<Var> {
    let g = b.get(tape, &format!("{prefix}.gamma"))?;
    let beta = b.get(tape, &format!("{prefix}.beta"))?;
    tape.layer_norm(x, g, beta, LN_EPS)
}

/// Pre-norm Transformer block over `[batch*tokens, dim]` rows.
fn block(
    tape: &mut Tape,
    b: &mut Binder,
    x: Var,
    prefix: &str,
    batch: usize,
    tokens: usize,
    heads: usize,
    attn_out: Option<&mut Vec<Tensor>>,
) -> Result<Var> {
    let dim = tape.shape(x)[1];
    let dh = dim / heads;
    let h = norm(tape, b, x, &format!("{prefix}.norm1"))?;
    let q = linear(tape, b, h, &format!("{prefix}.attn.wq"), &format!("{prefix}.attn.bq"))?;
    let k = linear(tape, b, h, &format!("{prefix}.attn.wk"), &format!("{prefix}.attn.bk"))?;
    let v = linear(tape, b, h, &format!("{prefix}.attn.wv"), &format!("{prefix}.attn.bv"))?;
    let q = tape.split_heads(q, batch, tokens, heads)?;
    let k = tape.split_heads(k, batch, tokens, heads)?;
    let v = tape.split_heads(v, batch, tokens, heads)?;
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (dh as f32).sqrt())?;
    let probs = tape.softmax_rows(scores)?;
    if let Some(out) = attn_out {
        out.push(tape.value(probs).clone().reshape(&[batch, heads, tokens, tokens])?);
    }
    let ctx = tape.bmm(probs, v, false)?;
    let ctx = tape.merge_heads(ctx, batch, tokens, heads)?;
    let a = linear(tape, b, ctx, &format!("{prefix}.attn.wo"), &format!("{prefix}.attn.bo"))?;
    let x = tape.add(x, a)?;

    let h = norm(tape, b, x, &format!("{prefix}.norm2"))?;
    let h = linear(tape, b, h, &format!("{prefix}.mlp.w1"), &format!("{prefix}.mlp.b1"))?;
    let h = tape.gelu(h)?;
    let h = linear(tape, b, h, &format!("{prefix}.mlp.w2"), &format!("{prefix}.mlp.b2"))?;
    tape.add(x, h)
}

/// Runs the encoder on the visible patches of each sample.
///
/// `visible_patches` is `[B, n, patch_dim]` and `visible_indices[b]` lists
/// the grid position of each of the `n` tokens of sample `b`, ascending.
/// Every block output after its residual additions is recorded; blocks in
/// `config.tap_indices` are exposed as taps.
pub fn encoder_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    config: &ModelConfig,
    visible_patches: &Tensor,
    visible_indices: &[Vec<usize>],
    analysis: bool,
) -> Result<EncoderOutput> {
    let s = visible_patches.shape();
    if s.len() != 3 || s[2] != config.patch_dim() || s[0] != visible_indices.len() {
        return Err(Error::shape("encoder_forward", s, &[visible_indices.len(), 0, config.patch_dim()]));
    }
    if let Some(&t) = config.tap_indices.iter().find(|&&t| t == 0 || t >= config.depth) {
        return Err(Error::Config(format!("tap index {t} outside 1..{}", config.depth)));
    }
    let (batch, tokens) = (s[0], s[1]);
    let n = config.n_patches();
    let mut pos_rows = Vec::with_capacity(batch * tokens);
    for idx in visible_indices {
        if idx.len() != tokens {
            return Err(Error::Invalid(format!(
                "{} visible indices for {tokens} visible tokens",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Invalid(format!("patch index {bad} out of range for {n} patches")));
        }
        pos_rows.extend_from_slice(idx);
    }

    let x = tape.constant(visible_patches.clone().reshape(&[batch * tokens, config.patch_dim()])?);
    let x = linear(tape, binder, x, "encoder.patch_embed.w", "encoder.patch_embed.b")?;
    let pos = binder.get(tape, "encoder.pos_embed")?;
    let pos = tape.index_rows(pos, pos_rows)?;
    let mut x = tape.add(x, pos)?;

    let mut attn = Vec::new();
    let mut block_outputs = Vec::with_capacity(config.depth);
    let mut tap_tokens = BTreeMap::new();
    for i in 1..=config.depth {
        let sink = if analysis { Some(&mut attn) } else { None };
        x = block(tape, binder, x, &encoder_block_prefix(i), batch, tokens, config.num_heads, sink)?;
        block_outputs.push(x);
        if config.tap_indices.contains(&i) {
            tap_tokens.insert(i, x);
        }
    }
    let final_tokens = norm(tape, binder, x, "encoder.norm")?;
    Ok(EncoderOutput {
        final_tokens,
        tap_tokens,
        block_outputs,
        attn_probs: attn,
        batch,
        tokens,
    })
}

/// Runs decoder `id` on encoded visible tokens (`[B*n_visible, D]`).
///
/// Visible grid positions receive the projected encoder tokens, masked ones
/// the decoder's mask token; both get the decoder's positional embedding.
/// Returns predictions `[B, N, target_dim]` at every position.
pub fn decoder_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    config: &ModelConfig,
    id: DecoderId,
    tokens: Var,
    plans: &[MaskPlan],
) -> Result<Var> {
    if let DecoderId::Tap(t) = id {
        if !config.tap_indices.contains(&t) {
            return Err(Error::Invalid(format!("no decoder attached to block {t}")));
        }
    }
    let batch = plans.len();
    let n = config.n_patches();
    let n_vis = plans.first().map(|p| p.visible().len()).unwrap_or(0);
    if batch == 0 || tape.value(tokens).rows() != batch * n_vis {
        return Err(Error::shape("decoder_forward", tape.shape(tokens), &[batch * n_vis]));
    }
    let prefix = decoder_prefix(config, id);
    let emb = linear(tape, binder, tokens, &format!("{prefix}.embed.w"), &format!("{prefix}.embed.b"))?;
    let mt = binder.get(tape, &format!("{prefix}.mask_token"))?;
    let mt = tape.reshape(mt, &[1, config.decoder_dim])?;
    let pool = tape.concat_rows(emb, mt)?;
    let mask_row = batch * n_vis;
    let mut rows = Vec::with_capacity(batch * n);
    for (b, plan) in plans.iter().enumerate() {
        if plan.n_patches() != n || plan.visible().len() != n_vis {
            return Err(Error::Invalid("inconsistent mask plans in decoder batch".into()));
        }
        let mut next = 0;
        for i in 0..n {
            if next < n_vis && plan.visible()[next] == i {
                rows.push(b * n_vis + next);
                next += 1;
            } else {
                rows.push(mask_row);
            }
        }
    }
    let x = tape.index_rows(pool, rows)?;
    let pos = binder.get(tape, &format!("{prefix}.pos_embed"))?;
    let mut x = tape.add_rows(x, pos)?;
    for j in 1..=config.decoder_depth {
        x = block(tape, binder, x, &format!("{prefix}.block{j}"), batch, n, config.decoder_heads, None)?;
    }
    let x = norm(tape, binder, x, &format!("{prefix}.norm"))?;
    let y = linear(tape, binder, x, &format!("{prefix}.pred.w"), &format!("{prefix}.pred.b"))?;
    tape.reshape(y, &[batch, n, config.target_dim])
}

/// Token-averaged classifier on top of `features` (`[B*n, D]`).
pub fn head_forward(tape: &mut Tape, binder: &mut Binder, features: Var, tokens: usize) -> Result<Var> {
    let pooled = tape.mean_groups(features, tokens)?;
    linear(tape, binder, pooled, "head.w", "head.b")
}

/// Patches of every sample with all grid positions visible.
pub fn all_visible(batch: usize, n_patches: usize) -> Vec<Vec<usize>> {
    vec![(0..n_patches).collect(); batch]
}

/// Inference-only forward of unmasked images, returning the encoder output
/// and the tape that owns its values.
pub fn encode_full(params: &Params, config: &ModelConfig, images: &Tensor, analysis: bool) -> Result<(Tape, EncoderOutput)> {
    let patches = patchify(images, config.patch_size)?;
    let batch = patches.shape()[0];
    let mut tape = Tape::new();
    let mut binder = Binder::frozen(params);
    let out = encoder_forward(
        &mut tape,
        &mut binder,
        config,
        &patches,
        &all_visible(batch, config.n_patches()),
        analysis,
    )?;
    Ok((tape, out))
}
