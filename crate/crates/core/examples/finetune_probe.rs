//! Pre-train, then classify: linear probes at several depths, a fine-tune
//! with the first blocks frozen, and the supervised-from-scratch reference.
//!
//!     cargo run --release --example finetune_probe

use tapmim::data::{synthesize, SyntheticSpec};
use tapmim::model::{init_params, ModelConfig};
use tapmim::targets::{default_specs, TargetBuilder, TargetKind};
use tapmim::training::{finetune, linear_probe, pretrain, TrainConfig};

fn main() -> tapmim::Result<()> {
    let model = ModelConfig::small(16, 4, 32, 4, 4).with_taps(vec![2, 3]);
    let (train, test) = synthesize(&SyntheticSpec {
        n_samples: 400,
        image_size: 16,
        n_classes: 4,
        seed: 5,
    })?
    .split_tail(100)?;
    let b = TargetBuilder::new(&model, default_specs(&model, TargetKind::Pixel, true, None), None, None)?;
    let pre = TrainConfig {
        epochs: 10,
        batch_size: 16,
        base_lr: 0.03,
        warmup_epochs: 1.0,
        ..TrainConfig::default()
    };
    let params = pretrain(&model, &pre, &b, &train, None)?.checkpoint.params;

    let probe = TrainConfig {
        epochs: 30,
        batch_size: 50,
        base_lr: 0.5,
        warmup_epochs: 0.0,
        ..TrainConfig::default()
    };
    for layer in 1..=model.depth {
        let out = linear_probe(&params, &model, layer, &probe, &train, &test)?;
        println!("probe block {layer}: accuracy {:.3}", out.accuracy);
    }

    let ft = TrainConfig {
        epochs: 5,
        batch_size: 16,
        base_lr: 1e-2,
        warmup_epochs: 0.0,
        freeze_first_k: Some(2),
        ..TrainConfig::default()
    };
    let tuned = finetune(&params, &model, &ft, &train, &test)?;
    println!("fine-tune (blocks 1-2 frozen): accuracy {:.3}", tuned.accuracy);

    let scratch = finetune(&init_params(&model, 0)?, &model, &TrainConfig { freeze_first_k: None, ..ft }, &train, &test)?;
    println!("supervised from scratch: accuracy {:.3}", scratch.accuracy);
    Ok(())
}
