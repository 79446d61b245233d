use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{cosine_lr, AdamState, TrainConfig};
use crate::analysis::{layer_features, token_mean, ANALYSIS_BATCH};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::masking::mix_seed;
use crate::model::{
    all_visible, encoder_block_prefix, encoder_forward, head_forward, init_head, patchify, reinit_last_k, Binder, ModelConfig,
    Params,
};
use crate::numerics::{Tape, Tensor};

const SHUFFLE_STREAM: u64 = 0xc1a5;
const FEATURE_EPS: f64 = 1e-6;

pub type ClassifierConfig = TrainConfig;

#[derive(Debug)]
pub struct ClassifierOutcome {
    /// Top-1 accuracy on the held-out split, in [0, 1].
    pub accuracy: f64,
    /// Mean cross-entropy of each step.
    pub losses: Vec<f64>,
    /// Encoder and trained `head.*`. For a frozen encoder the head acts on
    /// token-averaged features of the probed layer.
    pub params: Params,
}

fn check_data(config: &ModelConfig, train: &Dataset, test: &Dataset) -> Result<usize> {
    for d in [train, test] {
        if d.image_size() != config.image_size {
            return Err(Error::Config(format!(
                "images are [3, {0}, {0}], model expects [3, {1}, {1}]",
                d.image_size(),
                config.image_size
            )));
        }
        if d.labels().is_none() {
            return Err(Error::Config("classification needs labelled data".into()));
        }
    }
    let k = train.n_classes();
    if k < 2 {
        return Err(Error::Config("training labels cover fewer than two classes".into()));
    }
    if test.n_classes() > k {
        return Err(Error::Config(format!(
            "held-out labels reach class {} but training labels only {} classes",
            test.n_classes() - 1,
            k
        )));
    }
    Ok(k)
}

/// Whether `name` stays fixed when the first `k` blocks are frozen. Freezing
/// any block also fixes the embeddings; freezing all of them fixes the final
/// norm too.
fn frozen_param(name: &str, k: usize, depth: usize) -> bool {
    if k == 0 {
        return false;
    }
    if name.starts_with("encoder.patch_embed.") || name == "encoder.pos_embed" {
        return true;
    }
    if k >= depth && name.starts_with("encoder.norm.") {
        return true;
    }
    (1..=k).any(|i| name.starts_with(&format!("{}.", encoder_block_prefix(i))))
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, SHUFFLE_STREAM, epoch as u64])));
    idx
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Attaches an average-pool + linear head and trains it on `train`.
///
/// With `freeze_first_k = depth` (or when probing a `layer` below the top)
/// the encoder is fixed: token-averaged features of `layer` are computed
/// once, standardised per channel with training-set statistics, and only the
/// head is fitted. Otherwise the unfrozen encoder blocks train with the head
/// on the final tokens.
pub fn train_classifier(
    params: &Params,
    config: &ModelConfig,
    layer: usize,
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<ClassifierOutcome> {
    cfg.validate()?;
    let n_classes = check_data(config, train, test)?;
    if layer == 0 || layer > config.depth {
        return Err(Error::Config(format!("layer {layer} outside 1..={}", config.depth)));
    }
    let freeze = cfg.freeze_first_k.unwrap_or(0);
    if freeze > config.depth {
        return Err(Error::Config(format!("freeze_first_k {freeze} exceeds depth {}", config.depth)));
    }
    let mut params = match cfg.reinit_last_k {
        Some(k) => reinit_last_k(params, config, k, cfg.seed)?,
        None => params.clone(),
    };
    init_head(&mut params, config, n_classes, cfg.seed);
    if freeze == config.depth || layer < config.depth {
        fit_frozen(params, config, layer, cfg, train, test)
    } else {
        fit_end_to_end(params, config, freeze, cfg, train, test)
    }
}

fn standardise(x: &mut Tensor, stats: &[(f64, f64)]) {
    let d = x.last_dim();
    for row in x.data_mut().chunks_mut(d) {
        for (v, &(m, s)) in row.iter_mut().zip(stats) {
            *v = ((*v as f64 - m) / s) as f32;
        }
    }
}

fn fit_frozen(
    mut params: Params,
    config: &ModelConfig,
    layer: usize,
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<ClassifierOutcome> {
    let mut xtr = layer_features(&params, config, train.images())?.swap_remove(layer - 1);
    let mut xte = layer_features(&params, config, test.images())?.swap_remove(layer - 1);
    let (n, d) = (xtr.rows(), xtr.last_dim());
    let stats: Vec<(f64, f64)> = (0..d)
        .map(|j| {
            let m = (0..n).map(|i| xtr.row(i)[j] as f64).sum::<f64>() / n as f64;
            let v = (0..n).map(|i| (xtr.row(i)[j] as f64 - m).powi(2)).sum::<f64>() / n as f64;
            (m, (v + FEATURE_EPS).sqrt())
        })
        .collect();
    standardise(&mut xtr, &stats);
    standardise(&mut xte, &stats);
    let ytr = train.labels().unwrap();

    let spe = cfg.steps_per_epoch(n)?;
    let total = spe * cfg.epochs;
    let warmup = cfg.warmup_steps(spe);
    let opt = cfg.optimizer();
    let mut state = AdamState::default();
    let mut losses = Vec::with_capacity(total);
    for s in 0..total {
        let epoch = s / spe;
        let within = s % spe;
        let order = shuffled(n, cfg.seed, epoch);
        let idx = &order[within * cfg.batch_size..(within + 1) * cfg.batch_size];
        let mut rows = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            rows.extend_from_slice(xtr.row(i));
        }
        let labels: Vec<usize> = idx.iter().map(|&i| ytr[i]).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![idx.len(), d], rows)?);
        let w = tape.leaf(params.get("head.w")?.clone(), true);
        let b = tape.leaf(params.get("head.b")?.clone(), true);
        let z = tape.matmul(x, w)?;
        let z = tape.add_rows(z, b)?;
        let loss = tape.cross_entropy(z, &labels)?;
        let g = tape.backward(loss)?;
        let grads = BTreeMap::from([
            ("head.w".to_string(), g.get_or_zeros(w)),
            ("head.b".to_string(), g.get_or_zeros(b)),
        ]);
        losses.push(tape.scalar(loss));
        let lr = cosine_lr(s, total, warmup, cfg.peak_lr());
        opt.step(&mut params, &grads, &mut state, lr as f32)?;
    }

    let (w, b) = (params.get("head.w")?, params.get("head.b")?);
    let k = b.len();
    let yte = test.labels().unwrap();
    let mut correct = 0;
    for (i, &y) in yte.iter().enumerate() {
        let x = xte.row(i);
        let logits: Vec<f32> = (0..k)
            .map(|c| b.data()[c] + (0..d).map(|j| x[j] * w.data()[j * k + c]).sum::<f32>())
            .collect();
        correct += (argmax(&logits) == y) as usize;
    }
    fold_standardisation(&mut params, &stats)?;
    Ok(ClassifierOutcome {
        accuracy: correct as f64 / yte.len() as f64,
        losses,
        params,
    })
}

/// Rewrites the head so it accepts raw (unstandardised) features.
fn fold_standardisation(params: &mut Params, stats: &[(f64, f64)]) -> Result<()> {
    let w = params.get("head.w")?.clone();
    let k = w.last_dim();
    let mut b: Vec<f64> = params.get("head.b")?.data().iter().map(|&v| v as f64).collect();
    let mut w2 = w.clone();
    for (j, &(m, s)) in stats.iter().enumerate() {
        for c in 0..k {
            let wjc = w.data()[j * k + c] as f64;
            w2.data_mut()[j * k + c] = (wjc / s) as f32;
            b[c] -= wjc * m / s;
        }
    }
    params.insert("head.w", w2);
    params.insert("head.b", Tensor::new(vec![k], b.into_iter().map(|v| v as f32).collect())?);
    Ok(())
}

fn fit_end_to_end(
    mut params: Params,
    config: &ModelConfig,
    freeze: usize,
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<ClassifierOutcome> {
    let n = train.len();
    let spe = cfg.steps_per_epoch(n)?;
    let total = spe * cfg.epochs;
    let warmup = cfg.warmup_steps(spe);
    let opt = cfg.optimizer();
    let depth = config.depth;
    let np = config.n_patches();
    let mut state = AdamState::default();
    let mut losses = Vec::with_capacity(total);
    for s in 0..total {
        let epoch = s / spe;
        let within = s % spe;
        let order = shuffled(n, cfg.seed, epoch);
        let idx = &order[within * cfg.batch_size..(within + 1) * cfg.batch_size];
        let images = train.batch(idx);
        let labels = train.batch_labels(idx)?;
        let patches = patchify(&images, config.patch_size)?;
        let mut tape = Tape::new();
        let mut binder = Binder::with_filter(&params, move |name: &str| !frozen_param(name, freeze, depth));
        let enc = encoder_forward(&mut tape, &mut binder, config, &patches, &all_visible(idx.len(), np), false)?;
        let logits = head_forward(&mut tape, &mut binder, enc.final_tokens, enc.tokens)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        let g = tape.backward(loss)?;
        let mut grads = BTreeMap::new();
        for (name, &v) in binder.bound() {
            if tape.requires_grad(v) {
                if let Some(t) = g.get(v) {
                    grads.insert(name.clone(), t);
                }
            }
        }
        losses.push(tape.scalar(loss));
        drop(binder);
        let lr = cosine_lr(s, total, warmup, cfg.peak_lr());
        opt.step(&mut params, &grads, &mut state, lr as f32)?;
    }
    let accuracy = evaluate(&params, config, test)?;
    Ok(ClassifierOutcome { accuracy, losses, params })
}

/// Top-1 accuracy of the encoder + head in `params` on `data`.
pub fn evaluate(params: &Params, config: &ModelConfig, data: &Dataset) -> Result<f64> {
    let labels = data.labels().ok_or_else(|| Error::Config("evaluation needs labels".into()))?;
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(ANALYSIS_BATCH) {
        let images = data.batch(chunk);
        let patches = patchify(&images, config.patch_size)?;
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(params);
        let enc = encoder_forward(&mut tape, &mut binder, config, &patches, &all_visible(chunk.len(), config.n_patches()), false)?;
        let pooled = token_mean(tape.value(enc.final_tokens), enc.tokens);
        let pooled = tape.constant(pooled);
        let w = binder.get(&mut tape, "head.w")?;
        let b = binder.get(&mut tape, "head.b")?;
        let z = tape.matmul(pooled, w)?;
        let z = tape.add_rows(z, b)?;
        let z = tape.value(z);
        for (r, &i) in chunk.iter().enumerate() {
            correct += (argmax(z.row(r)) == labels[i]) as usize;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Fine-tunes on the final tokens, honouring `freeze_first_k` or
/// `reinit_last_k`.
pub fn finetune(params: &Params, config: &ModelConfig, cfg: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<ClassifierOutcome> {
    train_classifier(params, config, config.depth, cfg, train, test)
}

/// Trains only a linear head on token-averaged features of block `layer`
/// of unmasked images.
pub fn linear_probe(
    params: &Params,
    config: &ModelConfig,
    layer: usize,
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<ClassifierOutcome> {
    let probe = TrainConfig {
        freeze_first_k: Some(config.depth),
        reinit_last_k: None,
        ..cfg.clone()
    };
    train_classifier(params, config, layer, &probe, train, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SyntheticSpec};
    use crate::model::init_params;

    fn setup() -> (ModelConfig, Params, Dataset, Dataset) {
        let c = ModelConfig::small(8, 4, 16, 2, 2).with_taps(vec![1]);
        let p = init_params(&c, 0).unwrap();
        let ds = synthesize(&SyntheticSpec {
            n_samples: 48,
            image_size: 8,
            n_classes: 2,
            seed: 1,
        })
        .unwrap();
        let (tr, te) = ds.split_tail(16).unwrap();
        (c, p, tr, te)
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            base_lr: 1e-2,
            warmup_epochs: 0.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn frozen_blocks_stay_bitwise_unchanged() {
        let (c, p, tr, te) = setup();
        let out = finetune(&p, &c, &TrainConfig { freeze_first_k: Some(1), ..cfg() }, &tr, &te).unwrap();
        for (name, t) in p.iter() {
            let after = out.params.get(name).unwrap();
            let frozen = frozen_param(name, 1, 2) || name.starts_with("decoder.");
            assert_eq!(after.bit_eq(t), frozen, "{name}");
        }
    }

    #[test]
    fn full_finetune_reaches_block_one() {
        let (c, p, tr, te) = setup();
        let out = finetune(&p, &c, &TrainConfig { freeze_first_k: Some(0), ..cfg() }, &tr, &te).unwrap();
        assert!(!out.params.get("encoder.block1.attn.wq").unwrap().bit_eq(p.get("encoder.block1.attn.wq").unwrap()));
        assert!((0.0..=1.0).contains(&out.accuracy));
    }

    #[test]
    fn freezing_everything_equals_the_final_layer_probe() {
        let (c, p, tr, te) = setup();
        let a = finetune(&p, &c, &TrainConfig { freeze_first_k: Some(2), ..cfg() }, &tr, &te).unwrap();
        let b = linear_probe(&p, &c, 2, &cfg(), &tr, &te).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.losses, b.losses);
        for (name, t) in p.iter() {
            assert!(a.params.get(name).unwrap().bit_eq(t), "{name}");
        }
    }

    #[test]
    fn folded_head_matches_evaluation() {
        let (c, p, tr, te) = setup();
        let probe = linear_probe(&p, &c, 2, &cfg(), &tr, &te).unwrap();
        assert_eq!(evaluate(&probe.params, &c, &te).unwrap(), probe.accuracy);
    }

    #[test]
    fn label_and_geometry_mismatch() {
        let (c, p, tr, _) = setup();
        let three = synthesize(&SyntheticSpec {
            n_samples: 6,
            image_size: 8,
            n_classes: 3,
            seed: 2,
        })
        .unwrap();
        assert!(finetune(&p, &c, &cfg(), &tr, &three).is_err());
        let big = synthesize(&SyntheticSpec {
            n_samples: 16,
            image_size: 16,
            n_classes: 2,
            seed: 2,
        })
        .unwrap();
        let e = finetune(&p, &c, &cfg(), &big, &big).unwrap_err().to_string();
        assert!(e.contains("16") && e.contains("8"), "{e}");
    }
}
