//! Short deeply supervised pre-training run on synthetic images, printing
//! each decoder's loss every few steps.
//!
//!     cargo run --release --example pretrain_smoke

use tapmim::data::{synthesize, SyntheticSpec};
use tapmim::model::ModelConfig;
use tapmim::targets::{default_specs, TargetBuilder, TargetKind};
use tapmim::training::{Mode, Pretrainer, TrainConfig};

fn main() -> tapmim::Result<()> {
    let mut model = ModelConfig::small(16, 4, 64, 4, 4).with_taps(vec![2, 3]);
    model.norm_pix_targets = false;
    let (train, val) = synthesize(&SyntheticSpec {
        n_samples: 288,
        image_size: 16,
        n_classes: 4,
        seed: 6,
    })?
    .split_tail(32)?;
    let cfg = TrainConfig {
        epochs: 25,
        batch_size: 32,
        base_lr: 0.03,
        warmup_epochs: 2.0,
        seed: 6,
        mode: Mode::DeepMim,
        ..TrainConfig::default()
    };
    let builder = TargetBuilder::new(&model, default_specs(&model, TargetKind::Pixel, false, None), None, None)?;
    let mut trainer = Pretrainer::new(&model, &cfg, &builder, &train, Some(&val))?;
    let ids = model.decoder_ids();
    println!("{} steps, decoders {:?}", trainer.total_steps(), ids);
    while !trainer.is_done() {
        let r = trainer.step()?.clone();
        if r.step % 25 == 0 || r.step == 1 {
            let parts: Vec<String> = ids.iter().zip(&r.losses).map(|(id, l)| format!("{id}={l:.4}")).collect();
            println!("step {:>3} lr {:.2e} total {:.4}  {}", r.step, r.lr, r.total, parts.join(" "));
        }
    }
    for (step, loss) in trainer.log().val_curve().iter().step_by(5) {
        println!("val after step {step}: {loss:.4}");
    }
    Ok(())
}
