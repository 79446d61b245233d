use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{cosine_lr, total_loss, AdamState, AdamW, Mode, StepRecord, TrainConfig, TrainLog};
use crate::analysis::val_recon_loss;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::masking::{gather_visible, mix_seed, sample_rng, MaskPlan, MaskStrategy, RandomMasking};
use crate::model::{decoder_forward, encoder_forward, init_params, patchify, Binder, DecoderId, ModelConfig, Params};
use crate::numerics::{Tape, Tensor, Var};
use crate::targets::TargetBuilder;

const ORDER_STREAM: u64 = 0x0de7;
const VAL_STREAM: u64 = 0x7a1d;

/// Encoder plus every decoder on one masked batch; returns the summed loss
/// and the per-decoder terms.
pub fn pretrain_loss(
    tape: &mut Tape,
    binder: &mut Binder,
    config: &ModelConfig,
    images: &Tensor,
    plans: &[MaskPlan],
    targets: &BTreeMap<DecoderId, Arc<Tensor>>,
) -> Result<(Var, BTreeMap<DecoderId, Var>)> {
    let patches = patchify(images, config.patch_size)?;
    let visible = gather_visible(&patches, plans)?;
    let idx: Vec<Vec<usize>> = plans.iter().map(|p| p.visible().to_vec()).collect();
    let enc = encoder_forward(tape, binder, config, &visible, &idx, false)?;
    let mut preds = BTreeMap::new();
    for id in config.decoder_ids() {
        let f = enc.features_for(id)?;
        preds.insert(id, decoder_forward(tape, binder, config, id, f, plans)?);
    }
    total_loss(tape, &preds, targets, plans)
}

/// Model actually trained in `mode`: the baseline drops every tap.
pub fn model_for_mode(config: &ModelConfig, mode: Mode) -> Result<ModelConfig> {
    let mut c = config.clone();
    match mode {
        Mode::BaselineMae => c.tap_indices.clear(),
        Mode::Supervised => return Err(Error::Config("supervised mode has no pre-training stage".into())),
        Mode::DeepMim | Mode::DeepMimHybrid => {}
    }
    c.validate()?;
    Ok(c)
}

/// Step-at-a-time pre-training. A failing step leaves the trainer in its
/// previous state, so [`Pretrainer::checkpoint`] is always the last good one.
pub struct Pretrainer<'a> {
    config: ModelConfig,
    train: TrainConfig,
    builder: &'a TargetBuilder,
    data: &'a Dataset,
    val: Option<&'a Dataset>,
    optimizer: AdamW,
    params: Params,
    state: AdamState,
    step: usize,
    steps_per_epoch: usize,
    total_steps: usize,
    warmup_steps: usize,
    order: Option<(usize, Vec<usize>)>,
    log: TrainLog,
}

impl<'a> Pretrainer<'a> {
    /// Fresh run; parameters are drawn from `train.seed`.
    pub fn new(
        config: &ModelConfig,
        train: &TrainConfig,
        builder: &'a TargetBuilder,
        data: &'a Dataset,
        val: Option<&'a Dataset>,
    ) -> Result<Self> {
        let c = model_for_mode(config, train.mode)?;
        let params = init_params(&c, train.seed)?;
        Self::build(c, train, builder, data, val, params, AdamState::default(), 0)
    }

    /// Continues the run saved in `ck`.
    pub fn resume(
        ck: &Checkpoint,
        train: &TrainConfig,
        builder: &'a TargetBuilder,
        data: &'a Dataset,
        val: Option<&'a Dataset>,
    ) -> Result<Self> {
        let c = model_for_mode(&ck.config, train.mode)?;
        if c != ck.config {
            return Err(Error::Config("checkpoint model does not match the training mode".into()));
        }
        if ck.seed != train.seed {
            return Err(Error::Config(format!("checkpoint seed {} differs from run seed {}", ck.seed, train.seed)));
        }
        let state = ck
            .optimizer
            .clone()
            .ok_or_else(|| Error::Config("checkpoint has no optimizer state to resume from".into()))?;
        Self::build(c, train, builder, data, val, ck.params.clone(), state, ck.step as usize)
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        config: ModelConfig,
        train: &TrainConfig,
        builder: &'a TargetBuilder,
        data: &'a Dataset,
        val: Option<&'a Dataset>,
        params: Params,
        state: AdamState,
        step: usize,
    ) -> Result<Self> {
        train.validate()?;
        if data.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        if data.image_size() != config.image_size {
            return Err(Error::Config(format!(
                "images are {0}x{0}, model expects {1}x{1}",
                data.image_size(),
                config.image_size
            )));
        }
        if !builder.specs().keys().copied().eq(config.decoder_ids()) {
            return Err(Error::Config(format!(
                "targets are built for {:?}, model decodes {:?}",
                builder.specs().keys().collect::<Vec<_>>(),
                config.decoder_ids()
            )));
        }
        if train.mode == Mode::DeepMimHybrid && !builder.has_generator() {
            return Err(Error::Config("deepmim_hybrid needs a generator checkpoint".into()));
        }
        let steps_per_epoch = train.steps_per_epoch(data.len())?;
        let total_steps = steps_per_epoch * train.epochs;
        if step > total_steps {
            return Err(Error::Config(format!("checkpoint is at step {step} of a {total_steps}-step run")));
        }
        let log = TrainLog::new(config.decoder_ids());
        Ok(Pretrainer {
            optimizer: train.optimizer(),
            warmup_steps: train.warmup_steps(steps_per_epoch),
            train: train.clone(),
            config,
            builder,
            data,
            val,
            params,
            state,
            step,
            steps_per_epoch,
            total_steps,
            order: None,
            log,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
            optimizer: Some(self.state.clone()),
            seed: self.train.seed,
            step: self.step as u64,
        }
    }

    /// Fixed masks for validation sample `id`, identical in every epoch.
    pub fn val_mask_seed(seed: u64) -> u64 {
        mix_seed(&[seed, VAL_STREAM])
    }

    fn epoch_order(&mut self, epoch: usize) -> &[usize] {
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut idx: Vec<usize> = (0..self.data.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.train.seed, ORDER_STREAM, epoch as u64]));
            idx.shuffle(&mut rng);
            self.order = Some((epoch, idx));
        }
        &self.order.as_ref().unwrap().1
    }

    /// Runs one optimizer step and returns its record.
    pub fn step(&mut self) -> Result<&StepRecord> {
        if self.is_done() {
            return Err(Error::Invalid(format!("run already finished {} steps", self.total_steps)));
        }
        let s = self.step;
        let epoch = s / self.steps_per_epoch;
        let within = s % self.steps_per_epoch;
        let bs = self.train.batch_size;
        let local: Vec<usize> = self.epoch_order(epoch)[within * bs..(within + 1) * bs].to_vec();
        let ids = self.data.batch_ids(&local);
        let images = self.data.batch(&local);
        let strategy = RandomMasking {
            ratio: self.config.mask_ratio,
        };
        let plans = ids
            .iter()
            .map(|&id| strategy.sample(self.config.n_patches(), &mut sample_rng(self.train.seed, epoch as u64, id as u64)))
            .collect::<Result<Vec<_>>>()?;
        let targets = self.builder.build(&images, &ids, &plans)?;

        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let (total, parts) = pretrain_loss(&mut tape, &mut binder, &self.config, &images, &plans, &targets)?;
        let grads = tape.backward(total)?;
        let mut named = BTreeMap::new();
        for (name, &v) in binder.bound() {
            if let Some(g) = grads.get(v) {
                named.insert(name.clone(), g);
            }
        }
        let lr = cosine_lr(s, self.total_steps, self.warmup_steps, self.train.peak_lr());
        let losses: Vec<f64> = parts.values().map(|&v| tape.scalar(v)).collect();
        let total = tape.scalar(total);
        drop(binder);
        self.optimizer.step(&mut self.params, &named, &mut self.state, lr as f32)?;
        self.step += 1;

        let val_loss = match self.val {
            Some(v) if within + 1 == self.steps_per_epoch => Some(val_recon_loss(
                &self.params,
                &self.config,
                self.builder,
                v,
                Self::val_mask_seed(self.train.seed),
            )?),
            _ => None,
        };
        self.log.records.push(StepRecord {
            step: s + 1,
            epoch: epoch + 1,
            lr,
            losses,
            total,
            val_loss,
        });
        Ok(self.log.records.last().unwrap())
    }

    /// Steps until `max_steps` are done (or the run ends). On failure the
    /// error carries the last good checkpoint.
    pub fn run_until(&mut self, max_steps: usize) -> Result<()> {
        while self.step < max_steps.min(self.total_steps) {
            if let Err(e) = self.step() {
                return Err(match e {
                    Error::NonFinite(reason) => Error::Diverged {
                        step: self.step + 1,
                        reason,
                        last_good: Box::new(self.checkpoint()),
                    },
                    other => other,
                });
            }
        }
        Ok(())
    }

    pub fn finish(self) -> PretrainOutcome {
        PretrainOutcome {
            checkpoint: self.checkpoint(),
            log: self.log,
        }
    }
}

pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Full pre-training run.
pub fn pretrain(
    config: &ModelConfig,
    train: &TrainConfig,
    builder: &TargetBuilder,
    data: &Dataset,
    val: Option<&Dataset>,
) -> Result<PretrainOutcome> {
    let mut t = Pretrainer::new(config, train, builder, data, val)?;
    t.run_until(usize::MAX)?;
    Ok(t.finish())
}
