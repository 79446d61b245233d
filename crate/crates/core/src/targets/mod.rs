//! Per-decoder reconstruction targets.
//!
//! Image-derived targets (raw patches, HOG) may be blended with the output of
//! a frozen generator model before the kind-specific transform is applied:
//! `t = alpha * x + (1 - alpha) * x_hat`, in pixel space.

mod feature_file;
mod hog;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

pub use feature_file::FeatureFile;
pub use hog::{hog_patch, hog_target, HOG_BINS, HOG_DIM};

use crate::error::{Error, Result};
use crate::masking::{gather_visible, MaskPlan};
use crate::model::{decoder_forward, encoder_forward, patchify, unpatchify, Binder, DecoderId, ModelConfig, Params};
use crate::numerics::{Tape, Tensor};

pub const PATCH_NORM_EPS: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetKind {
    Pixel,
    Hog,
    FeatureFile,
}

impl std::str::FromStr for TargetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(TargetKind::Pixel),
            "hog" => Ok(TargetKind::Hog),
            "feature_file" => Ok(TargetKind::FeatureFile),
            _ => Err(Error::Config(format!("unknown target kind `{s}`"))),
        }
    }
}

/// What one decoder reconstructs.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSpec {
    pub kind: TargetKind,
    pub alpha: f32,
    /// Per-patch standardisation; pixel targets only.
    pub normalize_per_patch: bool,
    /// Frozen generator used when `alpha < 1`.
    pub generator_checkpoint: Option<PathBuf>,
}

impl TargetSpec {
    pub fn pixel(normalize_per_patch: bool) -> Self {
        TargetSpec {
            kind: TargetKind::Pixel,
            alpha: 1.0,
            normalize_per_patch,
            generator_checkpoint: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("blending ratio {} outside [0,1]", self.alpha)));
        }
        if self.alpha < 1.0 {
            if self.kind == TargetKind::FeatureFile {
                return Err(Error::Config("feature-file targets cannot be blended (alpha must be 1)".into()));
            }
            if self.generator_checkpoint.is_none() {
                return Err(Error::Config(format!(
                    "alpha {} needs a generator checkpoint",
                    self.alpha
                )));
            }
        }
        Ok(())
    }
}

/// Blending ratios for `m` taps followed by the final decoder:
/// `0, 1/m, ..., (m-1)/m, 1`. Three taps give `0, 1/3, 2/3, 1`.
pub fn progressive_alphas(m: usize) -> Vec<f32> {
    (0..m).map(|i| i as f32 / m as f32).chain(std::iter::once(1.0)).collect()
}

/// Specs for every decoder of `config`, all of `kind`. With a generator the
/// ratios follow [`progressive_alphas`]; without one every ratio is 1.
pub fn default_specs(
    config: &ModelConfig,
    kind: TargetKind,
    normalize_per_patch: bool,
    generator: Option<PathBuf>,
) -> BTreeMap<DecoderId, TargetSpec> {
    let ids = config.decoder_ids();
    let alphas = match generator {
        Some(_) => progressive_alphas(ids.len() - 1),
        None => vec![1.0; ids.len()],
    };
    ids.into_iter()
        .zip(alphas)
        .map(|(id, alpha)| {
            let spec = TargetSpec {
                kind,
                alpha,
                normalize_per_patch: normalize_per_patch && kind == TargetKind::Pixel,
                generator_checkpoint: if alpha < 1.0 { generator.clone() } else { None },
            };
            (id, spec)
        })
        .collect()
}

/// Elementwise `alpha * x + (1 - alpha) * x_hat`. Endpoints return an exact copy.
pub fn blend(x: &Tensor, x_hat: &Tensor, alpha: f32) -> Result<Tensor> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape("blend", x.shape(), x_hat.shape()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("blending ratio {alpha} outside [0,1]")));
    }
    if alpha == 1.0 {
        return Ok(x.clone());
    }
    if alpha == 0.0 {
        return Ok(x_hat.clone());
    }
    let data = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&a, &b)| alpha * a + (1.0 - alpha) * b)
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Per-row mean and `sqrt(var + eps)` of `[.., d]` rows, accumulated in f64.
pub fn patch_stats(patches: &Tensor) -> Vec<(f32, f32)> {
    let d = patches.last_dim();
    (0..patches.rows())
        .map(|r| {
            let row = patches.row(r);
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            (mean as f32, (var + PATCH_NORM_EPS as f64).sqrt() as f32)
        })
        .collect()
}

/// Patchified pixels, each patch optionally standardised to zero mean and
/// unit variance.
pub fn pixel_target(images: &Tensor, patch_size: usize, normalize_per_patch: bool) -> Result<Tensor> {
    let mut p = patchify(images, patch_size)?;
    if normalize_per_patch {
        let d = p.last_dim();
        let stats = patch_stats(&p);
        for (row, (mean, std)) in p.data_mut().chunks_mut(d).zip(stats) {
            row.iter_mut().for_each(|v| *v = (*v - mean) / std);
        }
    }
    Ok(p)
}

/// A previously pre-trained model used only for inference.
#[derive(Clone, Debug)]
pub struct HybridGenerator {
    params: Params,
    config: ModelConfig,
}

impl HybridGenerator {
    pub fn new(params: Params, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        if config.target_dim != config.patch_dim() {
            return Err(Error::Config("generator decoder does not predict pixel patches".into()));
        }
        Ok(HybridGenerator { params, config })
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
}

/// Inpaints the masked patches of `images` with the generator's primary
/// decoder; visible patches are copied from the input. No gradients flow.
pub fn generate_reconstruction(gen: &HybridGenerator, images: &Tensor, plans: &[MaskPlan]) -> Result<Tensor> {
    let c = &gen.config;
    let s = images.shape();
    if s.len() != 4 || s[1] != c.in_chans || s[2] != c.image_size || s[3] != c.image_size {
        return Err(Error::Config(format!(
            "generator expects [B, {}, {}, {}] images, got {s:?}",
            c.in_chans, c.image_size, c.image_size
        )));
    }
    let patches = patchify(images, c.patch_size)?;
    let visible = gather_visible(&patches, plans)?;
    let idx: Vec<Vec<usize>> = plans.iter().map(|p| p.visible().to_vec()).collect();
    let mut tape = Tape::new();
    let mut binder = Binder::frozen(&gen.params);
    let enc = encoder_forward(&mut tape, &mut binder, c, &visible, &idx, false)?;
    let pred = decoder_forward(&mut tape, &mut binder, c, DecoderId::Final, enc.final_tokens, plans)?;
    let pred = tape.value(pred);

    let d = c.patch_dim();
    let n = c.n_patches();
    let stats = patch_stats(&patches);
    let mut out = patches.clone();
    let data = out.data_mut();
    for (b, plan) in plans.iter().enumerate() {
        for &i in plan.masked() {
            let r = b * n + i;
            let (mean, std) = stats[r];
            for (o, &v) in data[r * d..(r + 1) * d].iter_mut().zip(pred.row(r)) {
                *o = if c.norm_pix_targets { v * std + mean } else { v };
            }
        }
    }
    unpatchify(&out, c.patch_size, c.in_chans)
}

/// Builds every decoder's target for one batch, sharing work between
/// decoders with identical specs and running the generator at most once.
pub struct TargetBuilder {
    specs: BTreeMap<DecoderId, TargetSpec>,
    patch_size: usize,
    generator: Option<HybridGenerator>,
    features: Option<FeatureFile>,
}

impl TargetBuilder {
    pub fn new(
        config: &ModelConfig,
        specs: BTreeMap<DecoderId, TargetSpec>,
        generator: Option<HybridGenerator>,
        features: Option<FeatureFile>,
    ) -> Result<Self> {
        let ids = config.decoder_ids();
        if specs.keys().copied().collect::<Vec<_>>() != ids {
            return Err(Error::Config(format!(
                "target specs cover {:?}, decoders are {:?}",
                specs.keys().collect::<Vec<_>>(),
                ids
            )));
        }
        for (id, s) in &specs {
            s.validate().map_err(|e| Error::Config(format!("decoder {id}: {e}")))?;
            let dim = match s.kind {
                TargetKind::Pixel => config.patch_dim(),
                TargetKind::Hog => HOG_DIM,
                TargetKind::FeatureFile => {
                    let f = features
                        .as_ref()
                        .ok_or_else(|| Error::Config(format!("decoder {id} needs a feature file")))?;
                    if f.n_patches() != config.n_patches() {
                        return Err(Error::Config(format!(
                            "feature file has {} patches per sample, model has {}",
                            f.n_patches(),
                            config.n_patches()
                        )));
                    }
                    f.feat_dim()
                }
            };
            if dim != config.target_dim {
                return Err(Error::Config(format!(
                    "decoder {id} target has width {dim}, model predicts {}",
                    config.target_dim
                )));
            }
            if s.kind == TargetKind::Hog && config.patch_size % 2 != 0 {
                return Err(Error::Config("HOG targets need an even patch size".into()));
            }
        }
        if specs.values().any(|s| s.alpha < 1.0) {
            let g = generator
                .as_ref()
                .ok_or_else(|| Error::Config("blended targets need a loaded generator".into()))?;
            let gc = g.config();
            if gc.image_size != config.image_size || gc.patch_size != config.patch_size || gc.in_chans != config.in_chans {
                return Err(Error::Config("generator geometry differs from the model".into()));
            }
        }
        Ok(TargetBuilder {
            specs,
            patch_size: config.patch_size,
            generator,
            features,
        })
    }

    pub fn specs(&self) -> &BTreeMap<DecoderId, TargetSpec> {
        &self.specs
    }

    pub fn has_generator(&self) -> bool {
        self.generator.is_some()
    }

    /// Target of decoder `id` alone, without a generator pass; the decoder's
    /// ratio must be 1.
    pub fn build_plain(&self, id: DecoderId, images: &Tensor, sample_indices: &[usize]) -> Result<Tensor> {
        let spec = self.specs.get(&id).ok_or_else(|| Error::Invalid(format!("no target spec for decoder {id}")))?;
        if spec.alpha < 1.0 {
            return Err(Error::Invalid(format!("decoder {id} has a blended target")));
        }
        self.build_one(spec, images, sample_indices, None)
    }

    /// Targets `[B, N, target_dim]` keyed by decoder. Decoders whose specs
    /// agree share one allocation.
    pub fn build(
        &self,
        images: &Tensor,
        sample_indices: &[usize],
        plans: &[MaskPlan],
    ) -> Result<BTreeMap<DecoderId, Arc<Tensor>>> {
        let needs_gen = self.specs.values().any(|s| s.alpha < 1.0);
        let x_hat = if needs_gen {
            let g = self.generator.as_ref().ok_or_else(|| Error::Config("no generator loaded".into()))?;
            Some(generate_reconstruction(g, images, plans)?)
        } else {
            None
        };
        let mut cache: Vec<((TargetKind, u32, bool), Arc<Tensor>)> = Vec::new();
        let mut out = BTreeMap::new();
        for (&id, spec) in &self.specs {
            let key = (spec.kind, spec.alpha.to_bits(), spec.normalize_per_patch);
            if let Some((_, t)) = cache.iter().find(|(k, _)| *k == key) {
                out.insert(id, Arc::clone(t));
                continue;
            }
            let t = Arc::new(self.build_one(spec, images, sample_indices, x_hat.as_ref())?);
            cache.push((key, Arc::clone(&t)));
            out.insert(id, t);
        }
        Ok(out)
    }

    fn build_one(&self, spec: &TargetSpec, images: &Tensor, samples: &[usize], x_hat: Option<&Tensor>) -> Result<Tensor> {
        if spec.kind == TargetKind::FeatureFile {
            let f = self.features.as_ref().ok_or_else(|| Error::Config("no feature file loaded".into()))?;
            return f.batch(samples);
        }
        let signal = match x_hat {
            Some(xh) if spec.alpha < 1.0 => blend(images, xh, spec.alpha)?,
            _ => images.clone(),
        };
        match spec.kind {
            TargetKind::Pixel => pixel_target(&signal, self.patch_size, spec.normalize_per_patch),
            TargetKind::Hog => hog_target(&signal, self.patch_size),
            TargetKind::FeatureFile => unreachable!(),
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::masking::sample_mask;
    use crate::model::init_params;

    fn rand_images(b: usize, size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[b, 3, size, size], |_| rng.gen_range(0.0..1.0))
    }

    fn plans(n: usize, b: usize, seed: u64) -> Vec<MaskPlan> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..b).map(|_| sample_mask(n, 0.75, &mut rng).unwrap()).collect()
    }

    #[test]
    fn pixel_target_cases() {
        let c = Tensor::full(&[1, 3, 8, 8], 0.4);
        assert!(pixel_target(&c, 4, true).unwrap().data().iter().all(|&v| v == 0.0));
        let x = rand_images(2, 8, 1);
        assert!(pixel_target(&x, 4, false).unwrap().bit_eq(&patchify(&x, 4).unwrap()));
        let t = pixel_target(&x, 4, true).unwrap();
        for r in 0..t.rows() {
            let row = t.row(r);
            let m = row.iter().map(|&v| v as f64).sum::<f64>() / row.len() as f64;
            let s = (row.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / row.len() as f64).sqrt();
            assert!(m.abs() < 1e-5 && (s - 1.0).abs() < 1e-5, "{m} {s}");
        }
    }

    #[test]
    fn blend_cases() {
        let x = rand_images(1, 4, 2);
        let xh = rand_images(1, 4, 3);
        assert!(blend(&x, &xh, 1.0).unwrap().bit_eq(&x));
        assert!(blend(&x, &xh, 0.0).unwrap().bit_eq(&xh));
        let a = Tensor::full(&[2, 2], 0.2);
        let b = Tensor::full(&[2, 2], 0.8);
        let m = blend(&a, &b, 0.5).unwrap();
        assert!(m.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
        assert!(blend(&x, &xh, 1.5).is_err());
        assert!(blend(&x, &xh, -0.1).is_err());
        assert!(blend(&x, &a, 0.5).is_err());
    }

    #[test]
    fn progressive_schedule() {
        assert_eq!(progressive_alphas(3), vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert_eq!(progressive_alphas(0), vec![1.0]);
        let c = ModelConfig::vit_base();
        let specs = default_specs(&c, TargetKind::Pixel, true, Some("gen.ckpt".into()));
        let alphas: Vec<(DecoderId, f32)> = specs.iter().map(|(k, s)| (*k, s.alpha)).collect();
        assert_eq!(
            alphas,
            vec![
                (DecoderId::Tap(6), 0.0),
                (DecoderId::Tap(8), 1.0 / 3.0),
                (DecoderId::Tap(10), 2.0 / 3.0),
                (DecoderId::Final, 1.0)
            ]
        );
        let plain = default_specs(&c, TargetKind::Pixel, true, None);
        assert!(plain.values().all(|s| s.alpha == 1.0));
    }

    #[test]
    fn spec_validation() {
        let mut s = TargetSpec::pixel(true);
        s.alpha = 0.5;
        assert!(s.validate().is_err());
        s.generator_checkpoint = Some("g".into());
        assert!(s.validate().is_ok());
        s.kind = TargetKind::FeatureFile;
        assert!(s.validate().is_err());
    }

    fn small_gen(seed: u64) -> (ModelConfig, HybridGenerator) {
        let c = ModelConfig::small(8, 4, 16, 2, 2).with_taps(vec![]);
        let p = init_params(&c, seed).unwrap();
        (c.clone(), HybridGenerator::new(p, c).unwrap())
    }

    #[test]
    fn reconstruction_copies_visible_pixels() {
        let (c, g) = small_gen(0);
        let x = rand_images(2, 8, 4);
        let pl = vec![
            MaskPlan::from_visible(4, vec![3], 0.75).unwrap(),
            MaskPlan::from_visible(4, vec![0], 0.75).unwrap(),
        ];
        let xh = generate_reconstruction(&g, &x, &pl).unwrap();
        assert_eq!(xh.shape(), x.shape());
        let (px, ph) = (patchify(&x, 4).unwrap(), patchify(&xh, 4).unwrap());
        for (b, p) in pl.iter().enumerate() {
            for i in 0..c.n_patches() {
                let same = px.row(b * 4 + i) == ph.row(b * 4 + i);
                assert_eq!(same, !p.is_masked(i), "sample {b} patch {i}");
            }
        }
        let bad = rand_images(1, 16, 0);
        assert!(generate_reconstruction(&g, &bad, &pl[..1]).is_err());
    }

    #[test]
    fn zeroed_generator_fills_patch_means() {
        let (c, g) = small_gen(1);
        let mut p = g.params().clone();
        for n in ["decoder.final.pred.w", "decoder.final.pred.b"] {
            p.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let g = HybridGenerator::new(p, c).unwrap();
        let x = rand_images(1, 8, 5);
        let pl = vec![MaskPlan::from_visible(4, vec![1], 0.75).unwrap()];
        let xh = patchify(&generate_reconstruction(&g, &x, &pl).unwrap(), 4).unwrap();
        let stats = patch_stats(&patchify(&x, 4).unwrap());
        for &i in pl[0].masked() {
            assert!(xh.row(i).iter().all(|&v| v == stats[i].0));
        }
    }

    #[test]
    fn builder_shares_and_blends() {
        let (gc, g) = small_gen(2);
        let c = ModelConfig::small(8, 4, 16, 4, 2).with_taps(vec![1, 2, 3]);
        assert_eq!(gc.n_patches(), c.n_patches());
        let x = rand_images(2, 8, 6);
        let pl = plans(4, 2, 7);

        let plain = TargetBuilder::new(&c, default_specs(&c, TargetKind::Pixel, true, None), None, None).unwrap();
        let t = plain.build(&x, &[0, 1], &pl).unwrap();
        let first = t.values().next().unwrap();
        assert!(t.values().all(|v| Arc::ptr_eq(v, first)));

        let specs = default_specs(&c, TargetKind::Pixel, false, Some("gen".into()));
        let hybrid = TargetBuilder::new(&c, specs, Some(g.clone()), None).unwrap();
        let t = hybrid.build(&x, &[0, 1], &pl).unwrap();
        assert!(t[&DecoderId::Final].bit_eq(&pixel_target(&x, 4, false).unwrap()));
        let xh = patchify(&generate_reconstruction(&g, &x, &pl).unwrap(), 4).unwrap();
        assert!(t[&DecoderId::Tap(1)].bit_eq(&xh));
        let raw = pixel_target(&x, 4, false).unwrap();
        let (t0, t13) = (&t[&DecoderId::Tap(1)], &t[&DecoderId::Tap(2)]);
        for k in 0..raw.len() {
            let lhs = t13.data()[k] - t0.data()[k];
            let rhs = (raw.data()[k] - xh.data()[k]) / 3.0;
            assert!((lhs - rhs).abs() <= 1e-6);
        }

        // blending needs a generator
        let specs = default_specs(&c, TargetKind::Pixel, false, Some("gen".into()));
        assert!(TargetBuilder::new(&c, specs, None, None).is_err());
    }

    #[test]
    fn visible_patches_of_a_blend_are_the_raw_image() {
        let (_, g) = small_gen(3);
        let x = rand_images(1, 8, 8);
        let pl = plans(4, 1, 9);
        let xh = generate_reconstruction(&g, &x, &pl).unwrap();
        let t = pixel_target(&blend(&x, &xh, 1.0 / 3.0).unwrap(), 4, false).unwrap();
        let raw = pixel_target(&x, 4, false).unwrap();
        for &i in pl[0].visible() {
            for (a, b) in t.row(i).iter().zip(raw.row(i)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
