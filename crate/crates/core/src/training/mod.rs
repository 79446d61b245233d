//! Deep-supervised pre-training, and the fine-tuning / probing protocols.

mod classify;
mod optim;
mod pretrain;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

pub use classify::{evaluate, finetune, linear_probe, train_classifier, ClassifierConfig, ClassifierOutcome};
pub use optim::{cosine_lr, AdamState, AdamW};
pub use pretrain::{model_for_mode, pretrain, pretrain_loss, PretrainOutcome, Pretrainer};

use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::model::DecoderId;
use crate::numerics::{mse_masked, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Extra decoders on the taps, every target the raw image.
    DeepMim,
    /// Extra decoders with progressive hybrid targets from a generator.
    DeepMimHybrid,
    /// Single decoder on the final block.
    BaselineMae,
    /// No pre-training; fine-tuning starts from a random encoder.
    Supervised,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deepmim" => Ok(Mode::DeepMim),
            "deepmim_hybrid" => Ok(Mode::DeepMimHybrid),
            "baseline_mae" => Ok(Mode::BaselineMae),
            "supervised" => Ok(Mode::Supervised),
            _ => Err(Error::Config(format!(
                "unknown mode `{s}` (deepmim, deepmim_hybrid, baseline_mae, supervised)"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::DeepMim => "deepmim",
            Mode::DeepMimHybrid => "deepmim_hybrid",
            Mode::BaselineMae => "baseline_mae",
            Mode::Supervised => "supervised",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate per 256 samples; the applied peak is `base_lr * batch_size / 256`.
    pub base_lr: f64,
    pub weight_decay: f32,
    /// May be fractional; converted to whole steps.
    pub warmup_epochs: f64,
    pub seed: u64,
    pub mode: Mode,
    pub freeze_first_k: Option<usize>,
    pub reinit_last_k: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            base_lr: 1.5e-4,
            weight_decay: 0.05,
            warmup_epochs: 1.0,
            seed: 0,
            mode: Mode::DeepMim,
            freeze_first_k: None,
            reinit_last_k: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.epochs as f64) {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be in [0, epochs = {})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.base_lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("base_lr must be positive and weight_decay non-negative".into()));
        }
        if self.freeze_first_k.is_some() && self.reinit_last_k.is_some() {
            return Err(Error::Config("set at most one of freeze_first_k and reinit_last_k".into()));
        }
        Ok(())
    }

    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> Result<usize> {
        let s = n_samples / self.batch_size;
        if s == 0 {
            return Err(Error::Config(format!(
                "{n_samples} samples do not fill one batch of {}",
                self.batch_size
            )));
        }
        Ok(s)
    }

    pub fn warmup_steps(&self, steps_per_epoch: usize) -> usize {
        (self.warmup_epochs * steps_per_epoch as f64).round() as usize
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }
}

/// One optimizer step of pre-training.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Masked MSE per decoder, in [`TrainLog::decoders`] order.
    pub losses: Vec<f64>,
    pub total: f64,
    /// Final-decoder validation loss, on the last step of an epoch.
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub decoders: Vec<DecoderId>,
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn new(decoders: Vec<DecoderId>) -> Self {
        TrainLog {
            decoders,
            records: Vec::new(),
        }
    }

    pub fn loss_of(&self, id: DecoderId) -> Option<Vec<f64>> {
        let k = self.decoders.iter().position(|&d| d == id)?;
        Some(self.records.iter().map(|r| r.losses[k]).collect())
    }

    /// `(epoch, val_loss)` for every epoch that reported one.
    pub fn val_curve(&self) -> Vec<(usize, f64)> {
        self.records.iter().filter_map(|r| r.val_loss.map(|v| (r.epoch, v))).collect()
    }

    pub fn header(&self) -> String {
        let mut h = String::from("step,lr,loss_total");
        for d in &self.decoders {
            write!(h, ",loss_dec_{d}").unwrap();
        }
        h.push_str(",val_loss");
        h
    }

    pub fn csv_row(r: &StepRecord) -> String {
        let mut s = format!("{},{},{}", r.step, r.lr, r.total);
        for l in &r.losses {
            write!(s, ",{l}").unwrap();
        }
        s.push(',');
        if let Some(v) = r.val_loss {
            write!(s, "{v}").unwrap();
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for r in &self.records {
            out.push_str(&Self::csv_row(r));
            out.push('\n');
        }
        out
    }
}

/// Sum of the masked MSE of every decoder against its own target, with the
/// per-decoder terms. The terms carry equal weight.
pub fn total_loss(
    tape: &mut Tape,
    preds: &BTreeMap<DecoderId, Var>,
    targets: &BTreeMap<DecoderId, impl AsRef<Tensor>>,
    plans: &[MaskPlan],
) -> Result<(Var, BTreeMap<DecoderId, Var>)> {
    if !preds.keys().eq(targets.keys()) {
        return Err(Error::Invalid(format!(
            "predictions for {:?} but targets for {:?}",
            preds.keys().collect::<Vec<_>>(),
            targets.keys().collect::<Vec<_>>()
        )));
    }
    let mut parts = BTreeMap::new();
    let mut total: Option<Var> = None;
    for (&id, &p) in preds {
        let l = mse_masked(tape, p, targets[&id].as_ref(), plans)?;
        parts.insert(id, l);
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::Invalid("no decoders".into()))?;
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;

    fn plan() -> Vec<MaskPlan> {
        vec![MaskPlan::from_visible(4, vec![1], 0.75).unwrap(); 2]
    }

    #[test]
    fn total_is_the_sum_of_parts() {
        let mut tape = Tape::new();
        let mut preds = BTreeMap::new();
        let mut targets = BTreeMap::new();
        for (k, id) in [DecoderId::Tap(1), DecoderId::Tap(2), DecoderId::Tap(3), DecoderId::Final].into_iter().enumerate() {
            let t = Tensor::from_fn(&[2, 4, 3], |i| (i as f32 * 0.1 + k as f32).sin());
            preds.insert(id, tape.constant(t.map(|v| v + 0.5)));
            targets.insert(id, Arc::new(t));
        }
        let (total, parts) = total_loss(&mut tape, &preds, &targets, &plan()).unwrap();
        // identical offsets give identical terms: total = 4 * 0.25
        assert!((tape.scalar(total) - 1.0).abs() < 1e-6);
        let sum: f64 = parts.values().map(|&v| tape.scalar(v)).sum();
        assert!((tape.scalar(total) - sum).abs() < 1e-6);

        targets.remove(&DecoderId::Tap(2));
        assert!(total_loss(&mut tape, &preds, &targets, &plan()).is_err());
    }

    #[test]
    fn perfect_predictions_give_zero() {
        let mut tape = Tape::new();
        let t = Arc::new(Tensor::from_fn(&[2, 4, 3], |i| i as f32));
        let preds = BTreeMap::from([(DecoderId::Final, tape.constant((*t).clone()))]);
        let targets = BTreeMap::from([(DecoderId::Final, t)]);
        let (total, _) = total_loss(&mut tape, &preds, &targets, &plan()).unwrap();
        assert_eq!(tape.scalar(total), 0.0);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.warmup_epochs = c.epochs as f64;
        assert!(c.validate().is_err());
        c.warmup_epochs = 0.0;
        c.freeze_first_k = Some(1);
        c.reinit_last_k = Some(1);
        assert!(c.validate().is_err());
        assert_eq!("baseline_mae".parse::<Mode>().unwrap(), Mode::BaselineMae);
        assert!("mae".parse::<Mode>().is_err());
        assert!(TrainConfig::default().steps_per_epoch(31).is_err());
    }
}
