//! Interrupt a run, save it, reload it and finish; the result matches an
//! uninterrupted run bit for bit. Also round-trips a feature-target file.
//!
//!     cargo run --example checkpoint_roundtrip

use tapmim::data::{synthesize, SyntheticSpec};
use tapmim::io::Checkpoint;
use tapmim::model::ModelConfig;
use tapmim::numerics::Tensor;
use tapmim::targets::{default_specs, FeatureFile, TargetBuilder, TargetKind};
use tapmim::training::{Pretrainer, TrainConfig};

fn main() -> tapmim::Result<()> {
    let dir = std::env::temp_dir().join("tapmim-roundtrip");
    std::fs::create_dir_all(&dir).map_err(|e| tapmim::Error::io(&dir, e))?;
    let model = ModelConfig::small(16, 4, 16, 3, 2).with_taps(vec![1, 2]);
    let data = synthesize(&SyntheticSpec {
        n_samples: 48,
        image_size: 16,
        n_classes: 4,
        seed: 7,
    })?;
    let b = TargetBuilder::new(&model, default_specs(&model, TargetKind::Pixel, true, None), None, None)?;
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 8,
        base_lr: 0.01,
        warmup_epochs: 1.0,
        ..TrainConfig::default()
    };

    let mut whole = Pretrainer::new(&model, &cfg, &b, &data, None)?;
    whole.run_until(usize::MAX)?;

    let mut first = Pretrainer::new(&model, &cfg, &b, &data, None)?;
    first.run_until(10)?;
    let path = dir.join("mid.dmim");
    first.checkpoint().write(&path)?;
    let size = std::fs::metadata(&path).map_err(|e| tapmim::Error::io(&path, e))?.len();
    println!("saved step {} to {} ({size} bytes)", first.steps_done(), path.display());

    let ck = Checkpoint::read(&path)?;
    let mut rest = Pretrainer::resume(&ck, &cfg, &b, &data, None)?;
    rest.run_until(usize::MAX)?;
    println!(
        "resumed to step {}: identical to uninterrupted run = {}",
        rest.steps_done(),
        rest.checkpoint().bit_eq(&whole.checkpoint())
    );

    let feats = Tensor::from_fn(&[4, model.n_patches(), 8], |i| (i as f32).sqrt());
    let fpath = dir.join("targets.feat");
    FeatureFile::from_tensor(&feats)?.write(&fpath)?;
    let back = FeatureFile::read(&fpath)?;
    println!(
        "feature file {}x{}x{}: lossless = {}",
        back.n_samples(),
        back.n_patches(),
        back.feat_dim(),
        back.batch(&[0, 1, 2, 3])?.bit_eq(&feats)
    );
    Ok(())
}
