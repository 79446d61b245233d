//! How the per-decoder losses combine and where their gradients reach.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tapmim::data::{synthesize, SyntheticSpec};
use tapmim::masking::{sample_mask, MaskPlan};
use tapmim::model::{init_params, Binder, DecoderId, ModelConfig};
use tapmim::numerics::{Tape, Tensor};
use tapmim::targets::{default_specs, pixel_target, TargetBuilder, TargetKind};
use tapmim::training::{pretrain, pretrain_loss, Mode, TrainConfig};

fn setup() -> (ModelConfig, Tensor, Vec<MaskPlan>, BTreeMap<DecoderId, Arc<Tensor>>) {
    let c = ModelConfig::small(16, 4, 32, 4, 2).with_taps(vec![1, 2, 3]);
    let images = Tensor::from_fn(&[3, 3, 16, 16], |i| ((i * 7919) % 257) as f32 / 257.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let plans: Vec<MaskPlan> = (0..3).map(|_| sample_mask(16, 0.75, &mut rng).unwrap()).collect();
    let t = Arc::new(pixel_target(&images, 4, true).unwrap());
    let targets = c.decoder_ids().into_iter().map(|id| (id, Arc::clone(&t))).collect();
    (c, images, plans, targets)
}

#[test]
fn total_equals_sum_of_decoder_losses() {
    let (c, images, plans, targets) = setup();
    let params = init_params(&c, 5).unwrap();
    let mut tape = Tape::new();
    let mut binder = Binder::new(&params);
    let (total, parts) = pretrain_loss(&mut tape, &mut binder, &c, &images, &plans, &targets).unwrap();
    assert_eq!(parts.len(), 4);
    let sum: f64 = parts.values().map(|&v| tape.scalar(v)).sum();
    assert!((tape.scalar(total) - sum).abs() <= 1e-6, "{} vs {sum}", tape.scalar(total));
}

#[test]
fn tap_loss_reaches_only_its_own_path() {
    let (c, images, plans, targets) = setup();
    let params = init_params(&c, 5).unwrap();
    for tap in [1usize, 2, 3] {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&params);
        let (_, parts) = pretrain_loss(&mut tape, &mut binder, &c, &images, &plans, &targets).unwrap();
        let grads = tape.backward(parts[&DecoderId::Tap(tap)]).unwrap();
        let mut touched = 0;
        for (name, &v) in binder.bound() {
            let g = grads.get(v);
            let zero = g.as_ref().map_or(true, |g| g.data().iter().all(|&x| x == 0.0));
            let block = name
                .strip_prefix("encoder.block")
                .and_then(|r| r.split('.').next())
                .and_then(|n| n.parse::<usize>().ok());
            let beyond = block.is_some_and(|b| b > tap) || name.starts_with("encoder.norm");
            let other_decoder = name.starts_with("decoder.") && !name.starts_with(&format!("decoder.tap{tap}."));
            if beyond || other_decoder {
                assert!(zero, "tap {tap} loss has gradient on {name}");
            } else if !zero {
                touched += 1;
            }
        }
        assert!(touched > 10, "tap {tap} loss reached only {touched} tensors");
    }
}

#[test]
fn empty_taps_match_baseline_bitwise() {
    let data = synthesize(&SyntheticSpec {
        n_samples: 64,
        image_size: 16,
        n_classes: 4,
        seed: 3,
    })
    .unwrap();
    let full = ModelConfig::small(16, 4, 32, 4, 2).with_taps(vec![2, 3]);
    let run = |c: &ModelConfig, mode: Mode| {
        let base = tapmim::training::model_for_mode(c, mode).unwrap();
        let b = TargetBuilder::new(&base, default_specs(&base, TargetKind::Pixel, true, None), None, None).unwrap();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 16,
            base_lr: 0.03,
            warmup_epochs: 0.5,
            seed: 17,
            mode,
            ..TrainConfig::default()
        };
        pretrain(c, &tc, &b, &data, None).unwrap()
    };
    let no_taps = run(&full.clone().with_taps(vec![]), Mode::DeepMim);
    let baseline = run(&full, Mode::BaselineMae);
    assert!(no_taps.checkpoint.params.bit_eq(&baseline.checkpoint.params));
    assert_eq!(no_taps.log, baseline.log);
    let deep = run(&full, Mode::DeepMim);
    assert!(!deep.checkpoint.params.bit_eq(&baseline.checkpoint.params));
}
