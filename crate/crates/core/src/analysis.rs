//! Representation diagnostics: linear CKA between layers and models,
//! attention-head similarity, and validation reconstruction loss.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::masking::{sample_rng, MaskStrategy, RandomMasking};
use crate::model::{decoder_forward, encode_full, encoder_forward, patchify, Binder, DecoderId, ModelConfig, Params};
use crate::masking::gather_visible;
use crate::numerics::{mse_masked, Tape, Tensor};
use crate::targets::TargetBuilder;

/// Images per forward pass during analysis.
pub const ANALYSIS_BATCH: usize = 32;

/// Column-centred copy of a `[n, d]` matrix in f64.
fn centered(x: &Tensor) -> (Vec<f64>, usize, usize) {
    let (n, d) = (x.rows(), x.last_dim());
    let mut out: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    for j in 0..d {
        let mean = (0..n).map(|i| out[i * d + j]).sum::<f64>() / n as f64;
        (0..n).for_each(|i| out[i * d + j] -= mean);
    }
    (out, n, d)
}

/// Squared Frobenius norm of `Aᵀ B` for `[n, da]` and `[n, db]` matrices.
fn cross_frob2(a: &[f64], da: usize, b: &[f64], db: usize, n: usize) -> f64 {
    let mut acc = 0.0;
    for p in 0..da {
        for q in 0..db {
            let mut s = 0.0;
            for i in 0..n {
                s += a[i * da + p] * b[i * db + q];
            }
            acc += s * s;
        }
    }
    acc
}

/// Linear CKA of two `[n, d]` feature matrices over the same `n` samples:
/// `‖YᵀX‖² / (‖XᵀX‖ ‖YᵀY‖)` after centring each column.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.rank() != 2 || y.rank() != 2 || x.rows() != y.rows() {
        return Err(Error::shape("linear_cka", x.shape(), y.shape()));
    }
    if x.rows() < 2 {
        return Err(Error::Invalid("CKA needs at least two samples".into()));
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::NonFinite("CKA input".into()));
    }
    let (xc, n, dx) = centered(x);
    let (yc, _, dy) = centered(y);
    let sxx = cross_frob2(&xc, dx, &xc, dx, n);
    let syy = cross_frob2(&yc, dy, &yc, dy, n);
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Invalid("CKA of a zero-variance representation is undefined".into()));
    }
    let sxy = cross_frob2(&xc, dx, &yc, dy, n);
    Ok(sxy / (sxx * syy).sqrt())
}

/// Per-image token averages of every block, `[n_images, D]` per layer,
/// index 0 holding block 1. The last block reports normalised final tokens.
pub fn layer_features(params: &Params, config: &ModelConfig, images: &Tensor) -> Result<Vec<Tensor>> {
    let n_img = images.shape()[0];
    let d = config.embed_dim;
    let mut feats = vec![Vec::with_capacity(n_img * d); config.depth];
    for chunk in chunks(n_img) {
        let batch = slice_images(images, chunk.clone());
        let (tape, out) = encode_full(params, config, &batch, false)?;
        for (l, f) in feats.iter_mut().enumerate() {
            let v = tape.value(out.layer_features(l + 1)?);
            f.extend(token_mean(v, out.tokens).data());
        }
    }
    feats.into_iter().map(|f| Tensor::new(vec![n_img, d], f)).collect()
}

fn chunks(n: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n).step_by(ANALYSIS_BATCH).map(move |s| s..(s + ANALYSIS_BATCH).min(n))
}

fn slice_images(images: &Tensor, r: std::ops::Range<usize>) -> Tensor {
    let per = images.len() / images.shape()[0];
    let mut shape = images.shape().to_vec();
    shape[0] = r.len();
    Tensor::new(shape, images.data()[r.start * per..r.end * per].to_vec()).unwrap()
}

/// `[B*n, D]` rows to `[B, D]` means over each run of `n`.
pub fn token_mean(x: &Tensor, n: usize) -> Tensor {
    let d = x.last_dim();
    let b = x.rows() / n;
    let mut out = vec![0.0f32; b * d];
    for i in 0..b {
        let o = &mut out[i * d..(i + 1) * d];
        for t in 0..n {
            o.iter_mut().zip(x.row(i * n + t)).for_each(|(a, &v)| *a += v);
        }
        o.iter_mut().for_each(|a| *a /= n as f32);
    }
    Tensor::new(vec![b, d], out).unwrap()
}

/// CKA of every block against the last one, as `(layer, score)`.
pub fn cka_profile(params: &Params, config: &ModelConfig, images: &Tensor) -> Result<Vec<(usize, f64)>> {
    let f = layer_features(params, config, images)?;
    let last = f.last().unwrap();
    f.iter().enumerate().map(|(l, x)| Ok((l + 1, linear_cka(x, last)?))).collect()
}

/// CKA of block `layer_a` of model A against every block of model B on the
/// same images, as `(layer_b, score)`.
pub fn cross_cka(
    (pa, ca): (&Params, &ModelConfig),
    (pb, cb): (&Params, &ModelConfig),
    layer_a: usize,
    images: &Tensor,
) -> Result<Vec<(usize, f64)>> {
    if ca.image_size != cb.image_size || ca.patch_size != cb.patch_size {
        return Err(Error::Config(format!(
            "patch grids differ: {0}x{0}/{1} vs {2}x{2}/{3}",
            ca.image_size, ca.patch_size, cb.image_size, cb.patch_size
        )));
    }
    if layer_a == 0 || layer_a > ca.depth {
        return Err(Error::Config(format!("layer {layer_a} outside 1..={}", ca.depth)));
    }
    let fa = layer_features(pa, ca, images)?;
    let fb = layer_features(pb, cb, images)?;
    let x = &fa[layer_a - 1];
    fb.iter().enumerate().map(|(l, y)| Ok((l + 1, linear_cka(x, y)?))).collect()
}

/// Pairwise cosine similarity of the attention heads of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSimilarity {
    pub layer: usize,
    /// `heads x heads`, symmetric with unit diagonal.
    pub matrix: Vec<Vec<f64>>,
    /// Mean over distinct pairs.
    pub mean: f64,
}

impl HeadSimilarity {
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let h = self.matrix.len();
        (0..h).flat_map(move |i| (i + 1..h).map(move |j| (i, j, self.matrix[i][j])))
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Each head is represented by its attention map averaged over `images`
/// (unmasked), flattened; heads are compared by cosine similarity.
pub fn head_similarity(params: &Params, config: &ModelConfig, images: &Tensor) -> Result<Vec<HeadSimilarity>> {
    let h = config.num_heads;
    if h < 2 {
        return Err(Error::Config("head similarity needs at least two heads".into()));
    }
    let n = config.n_patches();
    let mut maps = vec![vec![0.0f64; h * n * n]; config.depth];
    let n_img = images.shape()[0];
    for chunk in chunks(n_img) {
        let (_, out) = encode_full(params, config, &slice_images(images, chunk), true)?;
        for (acc, probs) in maps.iter_mut().zip(&out.attn_probs) {
            // [B, H, n, n] summed over B
            for (k, &v) in probs.data().iter().enumerate() {
                acc[k % (h * n * n)] += v as f64;
            }
        }
    }
    let mut result = Vec::with_capacity(config.depth);
    for (l, acc) in maps.iter().enumerate() {
        let heads: Vec<Vec<f64>> = acc.chunks(n * n).map(|c| c.iter().map(|v| v / n_img as f64).collect()).collect();
        let mut m = vec![vec![1.0; h]; h];
        let mut sum = 0.0;
        for i in 0..h {
            for j in i + 1..h {
                let c = cosine(&heads[i], &heads[j]);
                m[i][j] = c;
                m[j][i] = c;
                sum += c;
            }
        }
        result.push(HeadSimilarity {
            layer: l + 1,
            matrix: m,
            mean: sum / (h * (h - 1) / 2) as f64,
        });
    }
    Ok(result)
}

/// Final-decoder masked MSE on `data`, with masks fixed by `mask_seed` and
/// the sample id, so repeated calls see the same masks.
pub fn val_recon_loss(
    params: &Params,
    config: &ModelConfig,
    builder: &TargetBuilder,
    data: &Dataset,
    mask_seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("empty validation set".into()));
    }
    let strategy = RandomMasking {
        ratio: config.mask_ratio,
    };
    let mut acc = 0.0f64;
    for chunk in chunks(data.len()) {
        let local: Vec<usize> = chunk.collect();
        let ids = data.batch_ids(&local);
        let images = data.batch(&local);
        let plans = ids
            .iter()
            .map(|&id| strategy.sample(config.n_patches(), &mut sample_rng(mask_seed, 0, id as u64)))
            .collect::<Result<Vec<_>>>()?;
        let target = builder.build_plain(DecoderId::Final, &images, &ids)?;
        let patches = patchify(&images, config.patch_size)?;
        let visible = gather_visible(&patches, &plans)?;
        let idx: Vec<Vec<usize>> = plans.iter().map(|p| p.visible().to_vec()).collect();
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(params);
        let enc = encoder_forward(&mut tape, &mut binder, config, &visible, &idx, false)?;
        let pred = decoder_forward(&mut tape, &mut binder, config, DecoderId::Final, enc.final_tokens, &plans)?;
        let loss = mse_masked(&mut tape, pred, &target, &plans)?;
        // every sample masks the same number of patches, so batch means weight by size
        acc += tape.scalar(loss) * local.len() as f64;
    }
    Ok(acc / data.len() as f64)
}

/// Tables behind the analysis CSV files. Empty tables are not written.
#[derive(Clone, Debug, Default)]
pub struct AnalysisReport {
    pub cka_profile: Vec<(usize, f64)>,
    /// `(layer_a, layer_b, score)`.
    pub cross_cka: Vec<(usize, usize, f64)>,
    pub head_similarity: Vec<HeadSimilarity>,
    /// `(epoch, loss)`.
    pub val_loss: Vec<(usize, f64)>,
}

impl AnalysisReport {
    pub fn cka_profile_csv(&self) -> String {
        let mut s = String::from("layer,score\n");
        for (l, v) in &self.cka_profile {
            writeln!(s, "{l},{v}").unwrap();
        }
        s
    }

    pub fn cross_cka_csv(&self) -> String {
        let mut s = String::from("layer_a,layer_b,score\n");
        for (a, b, v) in &self.cross_cka {
            writeln!(s, "{a},{b},{v}").unwrap();
        }
        s
    }

    pub fn head_sim_csv(&self) -> String {
        let mut s = String::from("layer,head_i,head_j,cosine\n");
        for hs in &self.head_similarity {
            for (i, j, c) in hs.pairs() {
                writeln!(s, "{},{i},{j},{c}", hs.layer).unwrap();
            }
        }
        s
    }

    pub fn val_loss_csv(&self) -> String {
        let mut s = String::from("epoch,loss\n");
        for (e, v) in &self.val_loss {
            writeln!(s, "{e},{v}").unwrap();
        }
        s
    }

    /// Writes `cka_profile.csv`, `cross_cka.csv`, `head_sim.csv` and
    /// `val_loss.csv` into `dir`, skipping empty tables.
    pub fn write(&self, dir: &Path) -> Result<Vec<String>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tables = [
            ("cka_profile.csv", self.cka_profile.is_empty(), self.cka_profile_csv()),
            ("cross_cka.csv", self.cross_cka.is_empty(), self.cross_cka_csv()),
            ("head_sim.csv", self.head_similarity.is_empty(), self.head_sim_csv()),
            ("val_loss.csv", self.val_loss.is_empty(), self.val_loss_csv()),
        ];
        let mut written = Vec::new();
        for (name, empty, body) in tables {
            if empty {
                continue;
            }
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
            written.push(name.to_string());
        }
        Ok(written)
    }
}
