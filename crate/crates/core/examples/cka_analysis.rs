//! Layer-similarity profile (linear CKA of each block against the last) for
//! a deeply supervised and a single-decoder model, plus cross-model CKA.
//!
//!     cargo run --release --example cka_analysis

use tapmim::analysis::{cka_profile, cross_cka, linear_cka};
use tapmim::data::{synthesize, SyntheticSpec};
use tapmim::model::ModelConfig;
use tapmim::numerics::Tensor;
use tapmim::targets::{default_specs, TargetBuilder, TargetKind};
use tapmim::training::{model_for_mode, pretrain, Mode, TrainConfig};

fn main() -> tapmim::Result<()> {
    // invariances on toy matrices
    let x = Tensor::from_fn(&[6, 3], |i| ((i * 7) % 5) as f32 - 2.0);
    let y = Tensor::from_fn(&[6, 2], |i| ((i * 3) % 4) as f32);
    println!("cka(x, y) = {:.4}, scaled = {:.4}, self = {}", linear_cka(&x, &y)?, linear_cka(&x.map(|v| 3.0 * v), &y)?, linear_cka(&x, &x)?);

    let model = ModelConfig::small(16, 4, 32, 6, 4).with_taps(vec![3, 4, 5]);
    let (train, val) = synthesize(&SyntheticSpec {
        n_samples: 192,
        image_size: 16,
        n_classes: 4,
        seed: 3,
    })?
    .split_tail(64)?;
    let mut trained = Vec::new();
    for mode in [Mode::DeepMim, Mode::BaselineMae] {
        let m = model_for_mode(&model, mode)?;
        let b = TargetBuilder::new(&m, default_specs(&m, TargetKind::Pixel, true, None), None, None)?;
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 16,
            base_lr: 0.03,
            warmup_epochs: 1.0,
            mode,
            ..TrainConfig::default()
        };
        let out = pretrain(&m, &cfg, &b, &train, None)?;
        let profile = cka_profile(&out.checkpoint.params, &m, val.images())?;
        let row: Vec<String> = profile.iter().map(|(l, s)| format!("{l}:{s:.3}")).collect();
        println!("{mode:>13}  {}", row.join("  "));
        trained.push((out.checkpoint.params, m));
    }
    let (a, b) = (&trained[0], &trained[1]);
    let cross = cross_cka((&a.0, &a.1), (&b.0, &b.1), 6, val.images())?;
    let row: Vec<String> = cross.iter().map(|(l, s)| format!("{l}:{s:.3}")).collect();
    println!("deepmim block 6 vs baseline blocks: {}", row.join("  "));
    Ok(())
}
