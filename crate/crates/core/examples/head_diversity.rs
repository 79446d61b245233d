//! Pairwise similarity of attention heads within each block, on an
//! untrained model and after a short pre-training run.
//!
//!     cargo run --release --example head_diversity

use tapmim::analysis::head_similarity;
use tapmim::data::{synthesize, SyntheticSpec};
use tapmim::model::{init_params, ModelConfig, Params};
use tapmim::numerics::Tensor;
use tapmim::targets::{default_specs, TargetBuilder, TargetKind};
use tapmim::training::{pretrain, TrainConfig};

fn report(tag: &str, params: &Params, model: &ModelConfig, images: &Tensor) -> tapmim::Result<()> {
    // attention maps are non-negative, so cosines sit close to 1; print the gap
    for s in head_similarity(params, model, images)? {
        let least = s.pairs().map(|(_, _, c)| c).fold(1.0, f64::min);
        println!("{tag} block {}: 1 - mean cosine {:.2e}, least similar pair 1 - {:.2e}", s.layer, 1.0 - s.mean, 1.0 - least);
    }
    Ok(())
}

fn main() -> tapmim::Result<()> {
    let model = ModelConfig::small(16, 4, 32, 4, 4).with_taps(vec![2, 3]);
    let data = synthesize(&SyntheticSpec {
        n_samples: 160,
        image_size: 16,
        n_classes: 4,
        seed: 4,
    })?;
    let probe = data.subset(&(0..32).collect::<Vec<_>>());
    report("init", &init_params(&model, 0)?, &model, probe.images())?;

    let b = TargetBuilder::new(&model, default_specs(&model, TargetKind::Pixel, true, None), None, None)?;
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 16,
        base_lr: 0.03,
        warmup_epochs: 1.0,
        ..TrainConfig::default()
    };
    let out = pretrain(&model, &cfg, &b, &data, None)?;
    report("trained", &out.checkpoint.params, &model, probe.images())
}
