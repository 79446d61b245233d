//! The commands behind the `tapmim` binary. Each reads a [`RunConfig`] and
//! writes its artifacts under `out_dir`, returning the paths it wrote.

use std::path::{Path, PathBuf};

use crate::analysis::{cka_profile, cross_cka, head_similarity, val_recon_loss, AnalysisReport};
use crate::config::{AlphaSchedule, DataSource, RunConfig};
use crate::data::{synthesize, Dataset};
use crate::error::{Error, Result};
use crate::io::{write_ppm, Checkpoint};
use crate::masking::{sample_rng, MaskStrategy, RandomMasking};
use crate::model::{init_params, ModelConfig, Params};
use crate::targets::{generate_reconstruction, FeatureFile, HybridGenerator, TargetBuilder};
use crate::training::{finetune, linear_probe, model_for_mode, ClassifierOutcome, Mode, Pretrainer, TrainLog};

pub const CHECKPOINT_FILE: &str = "checkpoint.dmim";
pub const LAST_GOOD_FILE: &str = "last_good.dmim";
pub const LOG_FILE: &str = "log.csv";

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    Ok(&cfg.out_dir)
}

fn write_text(path: PathBuf, text: &str) -> Result<PathBuf> {
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn input_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let p = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs `checkpoint`".into()))?;
    Checkpoint::read(p)
}

fn check_geometry(model: &ModelConfig, data: &Dataset) -> Result<()> {
    if model.image_size != data.image_size() {
        return Err(Error::Config(format!(
            "checkpoint expects [3, {0}, {0}] images, dataset has [3, {1}, {1}]",
            model.image_size,
            data.image_size()
        )));
    }
    Ok(())
}

/// Target builder for `model`, loading the generator and feature file the
/// config names when the targets need them.
pub fn target_builder(cfg: &RunConfig, model: &ModelConfig) -> Result<TargetBuilder> {
    let specs = cfg.target_specs(model)?;
    let generator = if specs.values().any(|s| s.alpha < 1.0) {
        let p = cfg
            .generator
            .as_ref()
            .ok_or_else(|| Error::Config("blended targets need `generator`".into()))?;
        let ck = Checkpoint::read(p)?;
        Some(HybridGenerator::new(ck.params, ck.config)?)
    } else {
        None
    };
    let features = match &cfg.feature_file {
        Some(p) => Some(FeatureFile::read(p)?),
        None => None,
    };
    TargetBuilder::new(model, specs, generator, features)
}

/// Writes the synthetic dataset described by the config to `out_dir`.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let spec = match &cfg.data {
        DataSource::Synthetic(s) => s,
        DataSource::Dir(d) => {
            return Err(Error::Config(format!(
                "gen-data needs a synthetic spec, config reads images from {}",
                d.display()
            )))
        }
    };
    let data = synthesize(spec)?;
    let dir = out_dir(cfg)?;
    data.write_dir(dir)?;
    Ok(vec![dir.to_path_buf()])
}

/// Pre-trains (or resumes) and writes the checkpoint, the step log and the
/// per-epoch validation loss. A diverged run leaves `last_good.dmim` behind.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let (train, val) = cfg.load_data()?;
    let model = model_for_mode(&cfg.model, cfg.train.mode)?;
    let builder = target_builder(cfg, &model)?;
    let dir = out_dir(cfg)?.to_path_buf();
    let log_path = dir.join(LOG_FILE);

    let (mut trainer, prior) = match &cfg.resume {
        Some(p) => {
            let ck = Checkpoint::read(p)?;
            let t = Pretrainer::resume(&ck, &cfg.train, &builder, &train, Some(&val))?;
            (t, previous_rows(&log_path, ck.step as usize)?)
        }
        None => (Pretrainer::new(&model, &cfg.train, &builder, &train, Some(&val))?, Vec::new()),
    };
    let result = trainer.run_until(cfg.max_steps.unwrap_or(usize::MAX));
    let mut written = vec![write_log(&log_path, trainer.log(), &prior)?];
    match result {
        Ok(()) => {
            let p = dir.join(CHECKPOINT_FILE);
            trainer.checkpoint().write(&p)?;
            written.push(p);
            let report = AnalysisReport {
                val_loss: trainer.log().val_curve(),
                ..Default::default()
            };
            for name in report.write(&dir)? {
                written.push(dir.join(name));
            }
            Ok(written)
        }
        Err(Error::Diverged { step, reason, last_good }) => {
            let p = dir.join(LAST_GOOD_FILE);
            last_good.write(&p)?;
            Err(Error::Diverged { step, reason, last_good })
        }
        Err(e) => Err(e),
    }
}

/// Rows of an earlier log up to `step`, so a resumed run extends it.
fn previous_rows(path: &Path, step: usize) -> Result<Vec<String>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s <= step))
        .map(String::from)
        .collect())
}

fn write_log(path: &Path, log: &TrainLog, prior: &[String]) -> Result<PathBuf> {
    let mut text = log.header();
    text.push('\n');
    for row in prior {
        text.push_str(row);
        text.push('\n');
    }
    for r in &log.records {
        text.push_str(&TrainLog::csv_row(r));
        text.push('\n');
    }
    write_text(path.to_path_buf(), &text)
}

/// Encoder to classify with: the checkpoint's, or a fresh one in supervised mode.
fn classifier_start(cfg: &RunConfig) -> Result<(Params, ModelConfig)> {
    if cfg.train.mode == Mode::Supervised && cfg.checkpoint.is_none() {
        let mut model = cfg.model.clone();
        model.tap_indices.clear();
        return Ok((init_params(&model, cfg.train.seed)?, model));
    }
    let ck = input_checkpoint(cfg)?;
    Ok((ck.params, ck.config))
}

fn write_classifier(dir: &Path, stem: &str, out: &ClassifierOutcome, config: &ModelConfig, seed: u64) -> Result<Vec<PathBuf>> {
    let mut log = String::from("step,loss\n");
    for (i, l) in out.losses.iter().enumerate() {
        log.push_str(&format!("{},{l}\n", i + 1));
    }
    let ck = dir.join(format!("{stem}.dmim"));
    Checkpoint::new(config.clone(), out.params.clone(), seed).write(&ck)?;
    Ok(vec![write_text(dir.join(format!("{stem}_log.csv")), &log)?, ck])
}

/// Fine-tunes on the final tokens; writes `finetune.csv` (accuracy), the
/// step log and the tuned checkpoint. Returns the accuracy too.
pub fn cmd_finetune(cfg: &RunConfig) -> Result<(f64, Vec<PathBuf>)> {
    let (train, test) = cfg.load_data()?;
    let (params, model) = classifier_start(cfg)?;
    check_geometry(&model, &train)?;
    let out = finetune(&params, &model, &cfg.finetune, &train, &test)?;
    let dir = out_dir(cfg)?;
    let mut written = vec![write_text(dir.join("finetune.csv"), &format!("accuracy\n{}\n", out.accuracy))?];
    written.extend(write_classifier(dir, "finetune", &out, &model, cfg.finetune.seed)?);
    Ok((out.accuracy, written))
}

/// Linear probes at every layer of `probe_layers`; writes `probe.csv`
/// (layer,accuracy).
pub fn cmd_probe(cfg: &RunConfig) -> Result<(Vec<(usize, f64)>, Vec<PathBuf>)> {
    let (train, test) = cfg.load_data()?;
    let ck = input_checkpoint(cfg)?;
    check_geometry(&ck.config, &train)?;
    let mut rows = Vec::new();
    for &layer in &cfg.probe_layers {
        let out = linear_probe(&ck.params, &ck.config, layer, &cfg.finetune, &train, &test)?;
        rows.push((layer, out.accuracy));
    }
    let mut text = String::from("layer,accuracy\n");
    for (l, a) in &rows {
        text.push_str(&format!("{l},{a}\n"));
    }
    let p = write_text(out_dir(cfg)?.join("probe.csv"), &text)?;
    Ok((rows, vec![p]))
}

fn probe_images(cfg: &RunConfig, val: &Dataset) -> Dataset {
    let n = cfg.analysis_samples.min(val.len());
    val.subset(&(0..n).collect::<Vec<_>>())
}

/// CKA profile, head similarity and validation loss of `checkpoint`, plus
/// cross-model CKA against `checkpoint_b` when given.
pub fn cmd_analyze(cfg: &RunConfig) -> Result<(AnalysisReport, Vec<PathBuf>)> {
    let (train, val) = cfg.load_data()?;
    let ck = input_checkpoint(cfg)?;
    check_geometry(&ck.config, &val)?;
    let probes = probe_images(cfg, &val);
    let images = probes.images();
    let mut report = AnalysisReport {
        cka_profile: cka_profile(&ck.params, &ck.config, images)?,
        head_similarity: head_similarity(&ck.params, &ck.config, images)?,
        ..Default::default()
    };
    if let Some(pb) = &cfg.checkpoint_b {
        let b = Checkpoint::read(pb)?;
        let layer = cfg.cka_layer.unwrap_or(ck.config.depth);
        report.cross_cka = cross_cka((&ck.params, &ck.config), (&b.params, &b.config), layer, images)?
            .into_iter()
            .map(|(lb, score)| (layer, lb, score))
            .collect();
    }
    // validation loss needs the final decoder's plain target only
    let plain = RunConfig {
        alpha_schedule: AlphaSchedule::Plain,
        ..cfg.clone()
    };
    let builder = target_builder(&plain, &ck.config)?;
    let loss = val_recon_loss(&ck.params, &ck.config, &builder, &val, Pretrainer::val_mask_seed(cfg.train.seed))?;
    let steps_per_epoch = cfg.train.steps_per_epoch(train.len())?;
    report.val_loss = vec![(ck.step as usize / steps_per_epoch, loss)];
    let dir = out_dir(cfg)?;
    let names = report.write(dir)?;
    let paths = names.into_iter().map(|n| dir.join(n)).collect();
    Ok((report, paths))
}

/// Masks the first `analysis_samples` validation images with the validation
/// masks and writes input, masked input and reconstruction as PPMs under
/// `out_dir/recon`. Visible patches of the reconstruction are the input's.
pub fn cmd_reconstruct(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let (_, val) = cfg.load_data()?;
    let ck = input_checkpoint(cfg)?;
    check_geometry(&ck.config, &val)?;
    let gen = HybridGenerator::new(ck.params, ck.config.clone())?;
    let probes = probe_images(cfg, &val);
    let ids = probes.ids().to_vec();
    let strategy = RandomMasking {
        ratio: ck.config.mask_ratio,
    };
    let seed = Pretrainer::val_mask_seed(cfg.train.seed);
    let plans = ids
        .iter()
        .map(|&id| strategy.sample(ck.config.n_patches(), &mut sample_rng(seed, 0, id as u64)))
        .collect::<Result<Vec<_>>>()?;
    let recon = generate_reconstruction(&gen, probes.images(), &plans)?;

    let dir = out_dir(cfg)?.join("recon");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let p = ck.config.patch_size;
    let g = ck.config.grid();
    let mut written = Vec::new();
    for (b, &id) in ids.iter().enumerate() {
        let input = probes.image(b);
        let mut masked = input.clone();
        let s = ck.config.image_size;
        for &m in plans[b].masked() {
            let (py, px) = (m / g, m % g);
            for c in 0..3 {
                for y in py * p..(py + 1) * p {
                    for x in px * p..(px + 1) * p {
                        masked.data_mut()[(c * s + y) * s + x] = 0.5;
                    }
                }
            }
        }
        let r = recon.index_first(b);
        for (tag, img) in [("input", &input), ("masked", &masked), ("recon", &r)] {
            let path = dir.join(format!("{id:05}_{tag}.ppm"));
            write_ppm(img, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}
