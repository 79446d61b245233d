//! Checkpoints, feature files, resumption and the file-producing commands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tapmim::cli::{cmd_finetune, cmd_pretrain, cmd_probe, cmd_reconstruct, CHECKPOINT_FILE, LOG_FILE};
use tapmim::config::RunConfig;
use tapmim::data::{synthesize, SyntheticSpec};
use tapmim::io::{read_ppm, Checkpoint};
use tapmim::masking::{sample_rng, MaskStrategy, RandomMasking};
use tapmim::model::ModelConfig;
use tapmim::numerics::Tensor;
use tapmim::targets::{default_specs, FeatureFile, TargetBuilder, TargetKind};
use tapmim::training::{Mode, Pretrainer, TrainConfig};

fn model() -> ModelConfig {
    ModelConfig::small(16, 4, 16, 3, 2).with_taps(vec![1, 2])
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 8,
        base_lr: 1e-2,
        warmup_epochs: 1.0,
        seed: 11,
        mode: Mode::DeepMim,
        ..TrainConfig::default()
    }
}

fn data() -> (tapmim::data::Dataset, tapmim::data::Dataset) {
    synthesize(&SyntheticSpec {
        n_samples: 40,
        image_size: 16,
        n_classes: 4,
        seed: 3,
    })
    .unwrap()
    .split_tail(8)
    .unwrap()
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let c = model();
    let (tr, va) = data();
    let b = TargetBuilder::new(&c, default_specs(&c, TargetKind::Pixel, true, None), None, None).unwrap();
    let mut t = Pretrainer::new(&c, &train_cfg(), &b, &tr, Some(&va)).unwrap();
    t.run_until(5).unwrap();
    let ck = t.checkpoint();
    assert!(ck.optimizer.is_some());
    assert_eq!(ck.step, 5);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.dmim");
    ck.write(&path).unwrap();
    let back = Checkpoint::read(&path).unwrap();
    assert!(back.bit_eq(&ck));
    assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let c = model();
    let ck = Checkpoint::new(c.clone(), tapmim::model::init_params(&c, 1).unwrap(), 1);
    let bytes = ck.to_bytes();
    let p = std::path::Path::new("mem");
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra, p).is_err());
    let mut magic = bytes;
    magic[0] = b'X';
    let err = Checkpoint::from_bytes(&magic, p).unwrap_err();
    assert_eq!(err.kind(), "format");
}

#[test]
fn feature_file_round_trip_is_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = Tensor::from_fn(&[5, 16, 7], |_| rng.gen_range(-3.0..3.0));
    let f = FeatureFile::from_tensor(&t).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.feat");
    f.write(&path).unwrap();
    let back = FeatureFile::read(&path).unwrap();
    assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
    assert_eq!((back.n_samples(), back.n_patches(), back.feat_dim()), (5, 16, 7));
    let batch = back.batch(&[0, 1, 2, 3, 4]).unwrap();
    assert!(batch.bit_eq(&t));
    assert!(back.batch(&[5]).is_err());
}

#[test]
fn resumed_run_equals_uninterrupted_run() {
    let c = model();
    let (tr, va) = data();
    let b = TargetBuilder::new(&c, default_specs(&c, TargetKind::Pixel, true, None), None, None).unwrap();
    let cfg = train_cfg();

    let mut whole = Pretrainer::new(&c, &cfg, &b, &tr, Some(&va)).unwrap();
    whole.run_until(usize::MAX).unwrap();

    // stop mid-epoch, go through the file format, continue
    let mut first = Pretrainer::new(&c, &cfg, &b, &tr, Some(&va)).unwrap();
    first.run_until(6).unwrap();
    let ck = Checkpoint::from_bytes(&first.checkpoint().to_bytes(), std::path::Path::new("mem")).unwrap();
    let mut second = Pretrainer::resume(&ck, &cfg, &b, &tr, Some(&va)).unwrap();
    second.run_until(usize::MAX).unwrap();

    assert_eq!(whole.steps_done(), second.steps_done());
    assert!(whole.checkpoint().bit_eq(&second.checkpoint()));
    let tail: Vec<String> = whole.log().records[6..].iter().map(tapmim::training::TrainLog::csv_row).collect();
    let resumed: Vec<String> = second.log().records.iter().map(tapmim::training::TrainLog::csv_row).collect();
    assert_eq!(tail, resumed);
}

#[test]
fn resume_rejects_a_different_seed() {
    let c = model();
    let (tr, _) = data();
    let b = TargetBuilder::new(&c, default_specs(&c, TargetKind::Pixel, true, None), None, None).unwrap();
    let mut t = Pretrainer::new(&c, &train_cfg(), &b, &tr, None).unwrap();
    t.run_until(2).unwrap();
    let other = TrainConfig { seed: 12, ..train_cfg() };
    assert!(Pretrainer::resume(&t.checkpoint(), &other, &b, &tr, None).is_err());
}

const RUN: &str = "image_size = 16\npatch_size = 4\nembed_dim = 16\ndepth = 3\nnum_heads = 2\ntaps = 1,2\n\
                   synthetic_samples = 48\nval_samples = 16\nbatch_size = 8\nepochs = 3\nwarmup_epochs = 1\n\
                   base_lr = 0.01\nseed = 5\nanalysis_samples = 4\nft_epochs = 4\nft_batch_size = 8\nft_base_lr = 0.1\n";

#[test]
fn command_line_resume_reproduces_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let whole = RunConfig::parse_with(RUN, dir.path(), &[("out_dir", "whole".into())]).unwrap();
    cmd_pretrain(&whole).unwrap();

    let part = RunConfig::parse_with(RUN, dir.path(), &[("out_dir", "part".into()), ("max_steps", "7".into())]).unwrap();
    cmd_pretrain(&part).unwrap();
    let ck = dir.path().join("part").join(CHECKPOINT_FILE);
    assert_eq!(Checkpoint::read(&ck).unwrap().step, 7);
    let rest = RunConfig::parse_with(
        RUN,
        dir.path(),
        &[("out_dir", "part".into()), ("resume", ck.display().to_string())],
    )
    .unwrap();
    cmd_pretrain(&rest).unwrap();

    for f in [CHECKPOINT_FILE, LOG_FILE] {
        let a = std::fs::read(dir.path().join("whole").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("part").join(f)).unwrap();
        assert!(a == b, "{f} differs after resuming");
    }
}

#[test]
fn reconstruction_keeps_visible_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse_with(RUN, dir.path(), &[("max_steps", "4".into())]).unwrap();
    cmd_pretrain(&cfg).unwrap();
    let ck = cfg.out_dir.join(CHECKPOINT_FILE);
    let rc = RunConfig::parse_with(RUN, dir.path(), &[("checkpoint", ck.display().to_string())]).unwrap();
    let written = cmd_reconstruct(&rc).unwrap();
    assert_eq!(written.len(), 12);

    let (_, val) = rc.load_data().unwrap();
    let id = val.ids()[0];
    let recon_dir = rc.out_dir.join("recon");
    let input = read_ppm(&recon_dir.join(format!("{id:05}_input.ppm"))).unwrap();
    let masked = read_ppm(&recon_dir.join(format!("{id:05}_masked.ppm"))).unwrap();
    let recon = read_ppm(&recon_dir.join(format!("{id:05}_recon.ppm"))).unwrap();
    // the validation masks are reproducible, so recompute which patches were hidden
    let n = rc.model.n_patches();
    let plan = RandomMasking { ratio: rc.model.mask_ratio }
        .sample(n, &mut sample_rng(Pretrainer::val_mask_seed(rc.train.seed), 0, id as u64))
        .unwrap();
    let g = rc.model.grid();
    let mut changed = 0;
    for c in 0..3 {
        for y in 0..16 {
            for x in 0..16 {
                let i = (c * 16 + y) * 16 + x;
                let (inp, m, r) = (input.data()[i], masked.data()[i], recon.data()[i]);
                if plan.is_masked((y / 4) * g + x / 4) {
                    changed += (r != inp) as usize;
                } else {
                    assert_eq!(m, inp);
                    assert_eq!(r, inp);
                }
            }
        }
    }
    assert!(changed > 0);
}

#[test]
fn frozen_finetune_matches_last_layer_probe() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse_with(RUN, dir.path(), &[("max_steps", "4".into())]).unwrap();
    cmd_pretrain(&cfg).unwrap();
    let ck = cfg.out_dir.join(CHECKPOINT_FILE).display().to_string();
    let ft = RunConfig::parse_with(RUN, dir.path(), &[("checkpoint", ck.clone()), ("freeze_first_k", "3".into())]).unwrap();
    let (acc, _) = cmd_finetune(&ft).unwrap();
    let pr = RunConfig::parse_with(RUN, dir.path(), &[("checkpoint", ck), ("probe_layers", "3".into())]).unwrap();
    let (rows, written) = cmd_probe(&pr).unwrap();
    assert_eq!(rows, vec![(3, acc)]);
    assert_eq!(std::fs::read_to_string(&written[0]).unwrap(), format!("layer,accuracy\n3,{acc}\n"));
}
