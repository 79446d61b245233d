//! Small end-to-end studies: pre-train with and without deep supervision
//! on the synthetic set and compare validation loss, layer similarity and
//! probe accuracy.

use std::fmt::Write as _;
use std::time::Instant;

use crate::analysis::{cka_profile, val_recon_loss};
use crate::data::{synthesize, Dataset, SyntheticSpec};
use crate::error::Result;
use crate::model::{default_taps, ModelConfig};
use crate::targets::{default_specs, TargetBuilder, TargetKind};
use crate::training::{linear_probe, model_for_mode, Mode, Pretrainer, TrainConfig};

#[derive(Clone, Debug)]
pub struct TrendSetup {
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub probe: TrainConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub n_classes: usize,
    /// Seed of the synthetic images, shared by every run.
    pub data_seed: u64,
    /// Layers whose CKA against the last block is averaged.
    pub mid_layers: Vec<usize>,
    /// Layers probed; the deep-supervised taps by default.
    pub probe_layers: Vec<usize>,
}

impl TrendSetup {
    /// Depth-8, width-64 models on 16x16 images, 2000 steps of batch 16.
    pub fn desk() -> Self {
        let model = ModelConfig::small(16, 4, 64, 8, 4).with_taps(default_taps(8));
        let probe_layers = model.tap_indices.clone();
        TrendSetup {
            model,
            pretrain: TrainConfig {
                epochs: 40,
                batch_size: 16,
                base_lr: 0.03,
                warmup_epochs: 2.0,
                ..TrainConfig::default()
            },
            probe: TrainConfig {
                epochs: 30,
                batch_size: 50,
                base_lr: 0.5,
                warmup_epochs: 0.0,
                ..TrainConfig::default()
            },
            n_train: 800,
            n_val: 200,
            n_classes: 4,
            data_seed: 2024,
            mid_layers: vec![3, 4, 5, 6],
            probe_layers,
        }
    }

    pub fn steps(&self) -> usize {
        self.n_train / self.pretrain.batch_size * self.pretrain.epochs
    }

    pub fn data(&self) -> Result<(Dataset, Dataset)> {
        synthesize(&SyntheticSpec {
            n_samples: self.n_train + self.n_val,
            image_size: self.model.image_size,
            n_classes: self.n_classes,
            seed: self.data_seed,
        })?
        .split_tail(self.n_val)
    }
}

#[derive(Clone, Debug)]
pub struct TrendRun {
    pub seed: u64,
    pub mode: Mode,
    /// Final-decoder masked MSE on the validation split.
    pub val_loss: f64,
    pub cka_profile: Vec<(usize, f64)>,
    /// Mean CKA of `mid_layers` against the last block.
    pub mid_cka: f64,
    /// `(layer, accuracy)` of linear probes.
    pub probe: Vec<(usize, f64)>,
    pub seconds: f64,
}

/// Pre-trains one model and measures it.
pub fn run_trend(setup: &TrendSetup, train: &Dataset, val: &Dataset, seed: u64, mode: Mode) -> Result<TrendRun> {
    let t0 = Instant::now();
    let cfg = TrainConfig {
        seed,
        mode,
        ..setup.pretrain.clone()
    };
    let model = model_for_mode(&setup.model, mode)?;
    let builder = TargetBuilder::new(&model, default_specs(&model, TargetKind::Pixel, model.norm_pix_targets, None), None, None)?;
    let mut trainer = Pretrainer::new(&model, &cfg, &builder, train, None)?;
    trainer.run_until(usize::MAX)?;
    let params = trainer.params();

    let val_loss = val_recon_loss(params, &model, &builder, val, Pretrainer::val_mask_seed(seed))?;
    let profile = cka_profile(params, &model, val.images())?;
    let mid: Vec<f64> = profile
        .iter()
        .filter(|(l, _)| setup.mid_layers.contains(l))
        .map(|&(_, s)| s)
        .collect();
    let mid_cka = mid.iter().sum::<f64>() / mid.len().max(1) as f64;
    let probe_cfg = TrainConfig {
        seed,
        ..setup.probe.clone()
    };
    let probe = setup
        .probe_layers
        .iter()
        .map(|&l| Ok((l, linear_probe(params, &model, l, &probe_cfg, train, val)?.accuracy)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrendRun {
        seed,
        mode,
        val_loss,
        cka_profile: profile,
        mid_cka,
        probe,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// The three comparison tables as CSV: validation loss, mid-layer CKA and
/// probe accuracy, one row per (seed, mode).
pub fn trend_tables(runs: &[TrendRun]) -> String {
    let mut out = String::from("# val_loss\nseed,mode,val_loss\n");
    for r in runs {
        writeln!(out, "{},{},{:.6}", r.seed, r.mode, r.val_loss).unwrap();
    }
    out.push_str("# mid_layer_cka\nseed,mode,mean_cka\n");
    for r in runs {
        writeln!(out, "{},{},{:.6}", r.seed, r.mode, r.mid_cka).unwrap();
    }
    out.push_str("# probe_accuracy\nseed,mode,layer,accuracy\n");
    for r in runs {
        for (l, a) in &r.probe {
            writeln!(out, "{},{},{l},{a:.4}", r.seed, r.mode).unwrap();
        }
    }
    out
}
