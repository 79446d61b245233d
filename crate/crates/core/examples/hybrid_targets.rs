//! Two-stage hybrid training: a plain single-decoder run becomes the frozen
//! generator whose reconstructions are blended into the tap targets with the
//! progressive ratios.
//!
//!     cargo run --release --example hybrid_targets

use tapmim::data::{synthesize, SyntheticSpec};
use tapmim::masking::{sample_rng, MaskStrategy, RandomMasking};
use tapmim::model::{DecoderId, ModelConfig};
use tapmim::targets::{default_specs, HybridGenerator, TargetBuilder, TargetKind};
use tapmim::training::{model_for_mode, pretrain, Mode, TrainConfig};

fn main() -> tapmim::Result<()> {
    let model = ModelConfig::small(16, 4, 32, 4, 4).with_taps(vec![1, 2, 3]);
    let data = synthesize(&SyntheticSpec {
        n_samples: 128,
        image_size: 16,
        n_classes: 4,
        seed: 2,
    })?;
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: 32,
        base_lr: 0.03,
        warmup_epochs: 1.0,
        seed: 1,
        ..TrainConfig::default()
    };

    let base = model_for_mode(&model, Mode::BaselineMae)?;
    let plain = TargetBuilder::new(&base, default_specs(&base, TargetKind::Pixel, true, None), None, None)?;
    let gen_run = pretrain(&base, &TrainConfig { mode: Mode::BaselineMae, ..cfg.clone() }, &plain, &data, None)?;
    println!("generator trained for {} steps", gen_run.log.records.len());
    let generator = HybridGenerator::new(gen_run.checkpoint.params, gen_run.checkpoint.config)?;

    let specs = default_specs(&model, TargetKind::Pixel, true, Some("generator".into()));
    for (id, s) in &specs {
        println!("{id}: alpha {:.3}", s.alpha);
    }
    let builder = TargetBuilder::new(&model, specs, Some(generator), None)?;

    // how far each decoder's target sits from the raw-image target
    let idx: Vec<usize> = (0..8).collect();
    let images = data.batch(&idx);
    let strategy = RandomMasking { ratio: model.mask_ratio };
    let plans = idx
        .iter()
        .map(|&i| strategy.sample(model.n_patches(), &mut sample_rng(9, 0, i as u64)))
        .collect::<tapmim::Result<Vec<_>>>()?;
    let targets = builder.build(&images, &idx, &plans)?;
    let raw = &targets[&DecoderId::Final];
    for (id, t) in &targets {
        let d: f64 = t.data().iter().zip(raw.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / t.len() as f64;
        println!("{id}: mean squared distance to raw target {d:.4}");
    }

    let hybrid = pretrain(&model, &TrainConfig { mode: Mode::DeepMimHybrid, ..cfg }, &builder, &data, None)?;
    let last = hybrid.log.records.last().unwrap();
    println!("hybrid run: final total loss {:.4}", last.total);
    Ok(())
}
