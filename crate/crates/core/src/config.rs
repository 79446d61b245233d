//! Run configuration: one `key = value` per line, `#` starts a comment.
//!
//! Keys may appear in any order. Model keys are those of
//! [`ModelConfig::set`]; `image_size`, `patch_size`, `embed_dim`, `depth`
//! and `num_heads` are required, everything else has a default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::{synthesize, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{default_decoder_dim, default_taps, DecoderId, ModelConfig};
use crate::targets::{progressive_alphas, FeatureFile, TargetKind, TargetSpec, HOG_DIM};
use crate::training::{Mode, TrainConfig};

const REQUIRED: [&str; 5] = ["image_size", "patch_size", "embed_dim", "depth", "num_heads"];

/// Ratios for the decoders, shallowest tap first.
#[derive(Clone, Debug, PartialEq)]
pub enum AlphaSchedule {
    /// Every target is the raw signal.
    Plain,
    /// `0, 1/m, ..., 1` over `m` taps and the final decoder.
    Progressive,
    /// One ratio per decoder.
    Explicit(Vec<f32>),
}

impl std::str::FromStr for AlphaSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" | "plain" => Ok(AlphaSchedule::Plain),
            "progressive" => Ok(AlphaSchedule::Progressive),
            list => list
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f32>()
                        .map_err(|_| Error::Config(format!("bad ratio `{v}` in alpha schedule")))
                })
                .collect::<Result<Vec<_>>>()
                .map(AlphaSchedule::Explicit),
        }
    }
}

impl AlphaSchedule {
    pub fn alphas(&self, n_decoders: usize) -> Result<Vec<f32>> {
        match self {
            AlphaSchedule::Plain => Ok(vec![1.0; n_decoders]),
            AlphaSchedule::Progressive => Ok(progressive_alphas(n_decoders - 1)),
            AlphaSchedule::Explicit(v) if v.len() == n_decoders => Ok(v.clone()),
            AlphaSchedule::Explicit(v) => Err(Error::Config(format!(
                "alpha schedule lists {} ratios for {n_decoders} decoders",
                v.len()
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Dir(PathBuf),
    Synthetic(SyntheticSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Pre-training schedule; `freeze_first_k` / `reinit_last_k` apply to fine-tuning.
    pub train: TrainConfig,
    /// Fine-tuning and probing schedule (`ft_*` keys).
    pub finetune: TrainConfig,
    pub target_kind: TargetKind,
    pub alpha_schedule: AlphaSchedule,
    pub generator: Option<PathBuf>,
    pub feature_file: Option<PathBuf>,
    pub data: DataSource,
    /// Tail of the dataset held out for validation loss and classifier
    /// accuracy; an eighth of the data when unset.
    pub val_samples: Option<usize>,
    /// Unmasked probe images used by the analyses.
    pub analysis_samples: usize,
    pub out_dir: PathBuf,
    /// Input checkpoint of finetune, probe, analyze and reconstruct.
    pub checkpoint: Option<PathBuf>,
    /// Second checkpoint for cross-model CKA.
    pub checkpoint_b: Option<PathBuf>,
    /// Checkpoint to continue pre-training from.
    pub resume: Option<PathBuf>,
    /// Layers probed by `probe`; defaults to the taps and the last block.
    pub probe_layers: Vec<usize>,
    /// Layer of the first checkpoint compared in cross-model CKA.
    pub cka_layer: Option<usize>,
    /// Stop pre-training after this many steps in total (for resumable runs).
    pub max_steps: Option<usize>,
}

struct Entry {
    line: usize,
    value: String,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parses `text`; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        Self::parse_with(text, base, &[])
    }

    /// Like [`RunConfig::from_file`], with `overrides` replacing (or adding)
    /// keys of the file.
    pub fn from_file_with(path: &Path, overrides: &[(&str, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_with(&text, path.parent().unwrap_or(Path::new(".")), overrides)
    }

    /// Parses `text`, then applies `overrides` as if they were extra lines
    /// that win over the file. Errors in an override name the key instead of
    /// a line.
    pub fn parse_with(text: &str, base: &Path, overrides: &[(&str, String)]) -> Result<Self> {
        let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::ConfigLine {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let k = k.trim().to_string();
            if let Some(prev) = entries.get(&k) {
                return Err(Error::ConfigLine {
                    line: i + 1,
                    msg: format!("`{k}` already set on line {}", prev.line),
                });
            }
            entries.insert(
                k,
                Entry {
                    line: i + 1,
                    value: v.trim().to_string(),
                },
            );
        }
        for (k, v) in overrides {
            entries.insert(
                k.to_string(),
                Entry {
                    line: 0,
                    value: v.clone(),
                },
            );
        }
        let mut set = Setter { entries, base };
        set.build()
    }

    /// Target specs for `model` (the config's own model unless a checkpoint
    /// supplies another).
    pub fn target_specs(&self, model: &ModelConfig) -> Result<BTreeMap<DecoderId, TargetSpec>> {
        let ids = model.decoder_ids();
        let alphas = self.alpha_schedule.alphas(ids.len())?;
        Ok(ids
            .into_iter()
            .zip(alphas)
            .map(|(id, alpha)| {
                let spec = TargetSpec {
                    kind: self.target_kind,
                    alpha,
                    normalize_per_patch: model.norm_pix_targets && self.target_kind == TargetKind::Pixel,
                    generator_checkpoint: if alpha < 1.0 { self.generator.clone() } else { None },
                };
                (id, spec)
            })
            .collect())
    }

    /// Loads or synthesizes the dataset and splits off the validation tail.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let all = match &self.data {
            DataSource::Dir(d) => Dataset::load_dir(d)?,
            DataSource::Synthetic(s) => synthesize(s)?,
        };
        if all.image_size() != self.model.image_size {
            return Err(Error::Config(format!(
                "dataset images are [3, {0}, {0}], config expects [3, {1}, {1}]",
                all.image_size(),
                self.model.image_size
            )));
        }
        all.split_tail(self.val_samples.unwrap_or(all.len() / 8))
    }
}

/// Line 0 marks a command-line override.
fn at(line: usize, msg: String) -> Error {
    if line == 0 {
        Error::Config(format!("override: {msg}"))
    } else {
        Error::ConfigLine { line, msg }
    }
}

struct Setter<'a> {
    entries: BTreeMap<String, Entry>,
    base: &'a Path,
}

impl Setter<'_> {
    fn take(&mut self, key: &str) -> Option<Entry> {
        self.entries.remove(key)
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse()
                .map(Some)
                .map_err(|_| at(e.line, format!("bad value `{}` for `{key}`", e.value))),
        }
    }

    fn with_line<T>(&self, line: usize, r: Result<T>) -> Result<T> {
        r.map_err(|e| match e {
            Error::ConfigLine { .. } => e,
            Error::Config(msg) => at(line, msg),
            other => at(line, other.to_string()),
        })
    }

    fn path(&mut self, key: &str) -> Option<PathBuf> {
        self.take(key).map(|e| {
            let p = PathBuf::from(e.value);
            if p.is_absolute() {
                p
            } else {
                self.base.join(p)
            }
        })
    }

    fn train(&mut self, prefix: &str, defaults: TrainConfig) -> Result<TrainConfig> {
        let mut t = defaults;
        let k = |s: &str| format!("{prefix}{s}");
        if let Some(v) = self.parse(&k("epochs"))? {
            t.epochs = v;
        }
        if let Some(v) = self.parse(&k("batch_size"))? {
            t.batch_size = v;
        }
        if let Some(v) = self.parse(&k("base_lr"))? {
            t.base_lr = v;
        }
        if let Some(v) = self.parse(&k("weight_decay"))? {
            t.weight_decay = v;
        }
        if let Some(v) = self.parse(&k("warmup_epochs"))? {
            t.warmup_epochs = v;
        }
        Ok(t)
    }

    fn build(&mut self) -> Result<RunConfig> {
        let mut req = [0usize; 5];
        for (slot, key) in req.iter_mut().zip(REQUIRED) {
            *slot = self
                .parse(key)?
                .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))?;
        }
        let [image, patch, dim, depth, heads] = req;
        let mut model = ModelConfig::small(image, patch, dim, depth, heads);
        model.tap_indices = default_taps(depth);

        let target_line = self.entries.get("target_kind").map(|e| e.line).unwrap_or(0);
        let target_kind: TargetKind = match self.take("target_kind") {
            None => TargetKind::Pixel,
            Some(e) => self.with_line(e.line, e.value.parse())?,
        };
        let feature_file = self.path("feature_file");
        model.target_dim = match target_kind {
            TargetKind::Pixel => model.patch_dim(),
            TargetKind::Hog => HOG_DIM,
            TargetKind::FeatureFile => {
                let f = feature_file
                    .as_ref()
                    .ok_or_else(|| at(target_line, "feature_file targets need a `feature_file` path".into()))?;
                FeatureFile::read(f)?.feat_dim()
            }
        };
        if target_kind != TargetKind::Pixel {
            model.norm_pix_targets = false;
        }

        // model keys; decoder_dim follows decoder_heads unless given
        let model_keys: Vec<String> = self.entries.keys().filter(|k| is_model_key(k)).cloned().collect();
        for key in model_keys {
            let e = self.take(&key).unwrap();
            let ok = model.set(&key, &e.value);
            self.with_line(e.line, ok)?;
            if key == "decoder_heads" && !self.entries.contains_key("decoder_dim") {
                model.decoder_dim = default_decoder_dim(dim, model.decoder_heads);
            }
        }
        model.validate()?;

        let seed = self.parse("seed")?.unwrap_or(0u64);
        let mut train = self.train("", TrainConfig::default())?;
        train.seed = seed;
        if let Some(e) = self.take("mode") {
            train.mode = self.with_line(e.line, e.value.parse::<Mode>())?;
        }
        let freeze = self.parse("freeze_first_k")?;
        let reinit = self.parse("reinit_last_k")?;
        let ft_defaults = TrainConfig {
            epochs: 10,
            base_lr: 1e-3,
            warmup_epochs: 0.0,
            ..train.clone()
        };
        let mut finetune = self.train("ft_", ft_defaults)?;
        finetune.seed = seed;
        finetune.freeze_first_k = freeze;
        finetune.reinit_last_k = reinit;
        train.validate()?;
        finetune.validate()?;

        let alpha_schedule = match self.take("alpha_schedule") {
            Some(e) => self.with_line(e.line, e.value.parse())?,
            None => AlphaSchedule::Plain,
        };
        let generator = self.path("generator");

        let data_dir = self.path("data_dir");
        let n_samples: Option<usize> = self.parse("synthetic_samples")?;
        let n_classes: Option<usize> = self.parse("synthetic_classes")?;
        let data_seed: Option<u64> = self.parse("synthetic_seed")?;
        let data = match (data_dir, n_samples) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("set either `data_dir` or `synthetic_samples`, not both".into()))
            }
            (Some(d), None) => DataSource::Dir(d),
            (None, n) => DataSource::Synthetic(SyntheticSpec {
                n_samples: n.unwrap_or(512),
                image_size: image,
                n_classes: n_classes.unwrap_or(4),
                seed: data_seed.unwrap_or(seed),
            }),
        };
        let val_samples = self.parse("val_samples")?;
        let analysis_samples = self.parse("analysis_samples")?.unwrap_or(64);
        let out_dir = self.path("out_dir").unwrap_or_else(|| self.base.join("out"));
        let checkpoint = self.path("checkpoint");
        let checkpoint_b = self.path("checkpoint_b");
        let resume = self.path("resume");
        let probe_layers = match self.take("probe_layers") {
            Some(e) => self.with_line(e.line, crate::model::parse_taps(&e.value))?,
            None => model.tap_indices.iter().copied().chain([depth]).collect(),
        };
        let cka_layer = self.parse("cka_layer")?;
        let max_steps = self.parse("max_steps")?;

        if let Some((k, e)) = self.entries.iter().min_by_key(|(_, e)| e.line) {
            return Err(at(e.line, format!("unknown key `{k}`")));
        }
        Ok(RunConfig {
            model,
            train,
            finetune,
            target_kind,
            alpha_schedule,
            generator,
            feature_file,
            data,
            val_samples,
            analysis_samples,
            out_dir,
            checkpoint,
            checkpoint_b,
            resume,
            probe_layers,
            cka_layer,
            max_steps,
        })
    }
}

fn is_model_key(k: &str) -> bool {
    matches!(
        k,
        "in_chans"
            | "mlp_ratio"
            | "decoder_dim"
            | "decoder_depth"
            | "decoder_heads"
            | "taps"
            | "mask_ratio"
            | "target_dim"
            | "shared_decoder"
            | "norm_pix_targets"
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "image_size = 16\npatch_size = 4\nembed_dim = 32\ndepth = 4\nnum_heads = 2\n";

    fn parse(extra: &str) -> Result<RunConfig> {
        RunConfig::parse(&format!("{BASE}{extra}"), Path::new("/runs"))
    }

    #[test]
    fn defaults_fill_in() {
        let c = parse("").unwrap();
        assert_eq!(c.model.tap_indices, vec![2, 3]);
        assert_eq!(c.model.target_dim, 48);
        assert_eq!(c.train.mode, Mode::DeepMim);
        assert_eq!(c.out_dir, PathBuf::from("/runs/out"));
        assert_eq!(c.probe_layers, vec![2, 3, 4]);
        assert_eq!(c.val_samples, None);
    }

    #[test]
    fn order_does_not_matter() {
        let a = RunConfig::parse(&format!("{BASE}seed = 3\ntaps = 1\nepochs = 4\n"), Path::new(".")).unwrap();
        let mut shuffled: Vec<String> = format!("{BASE}seed = 3\ntaps = 1\nepochs = 4").lines().map(String::from).collect();
        shuffled.reverse();
        let b = RunConfig::parse(&shuffled.join("\n"), Path::new(".")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_key_names_its_line() {
        let e = parse("epochs = 3\nlearning_rate = 0.1\n").unwrap_err();
        assert!(matches!(e, Error::ConfigLine { line: 7, .. }), "{e}");
        assert!(e.to_string().contains("learning_rate"));
    }

    #[test]
    fn bad_value_names_its_line() {
        let e = parse("mode = mae\n").unwrap_err();
        assert!(matches!(e, Error::ConfigLine { line: 6, .. }), "{e}");
        let e = parse("taps = 1,x\n").unwrap_err();
        assert!(matches!(e, Error::ConfigLine { line: 6, .. }), "{e}");
    }

    #[test]
    fn missing_required_and_duplicates() {
        let e = RunConfig::parse("image_size = 16\n", Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("patch_size"), "{e}");
        let e = parse("seed = 1\nseed = 2\n").unwrap_err();
        assert!(matches!(e, Error::ConfigLine { line: 7, .. }));
    }

    #[test]
    fn paths_are_relative_to_the_file() {
        let c = parse("data_dir = imgs\ncheckpoint = /abs/ck.dmim\nval_samples = 8\n").unwrap();
        assert_eq!(c.data, DataSource::Dir(PathBuf::from("/runs/imgs")));
        assert_eq!(c.checkpoint, Some(PathBuf::from("/abs/ck.dmim")));
    }

    #[test]
    fn hog_and_schedules() {
        let c = parse("target_kind = hog\nalpha_schedule = progressive\ngenerator = g.dmim\n").unwrap();
        assert_eq!(c.model.target_dim, HOG_DIM);
        let specs = c.target_specs(&c.model).unwrap();
        let alphas: Vec<f32> = specs.values().map(|s| s.alpha).collect();
        assert_eq!(alphas, vec![0.0, 0.5, 1.0]);
        assert_eq!(specs[&DecoderId::Tap(2)].generator_checkpoint, Some(PathBuf::from("/runs/g.dmim")));
        assert_eq!(specs[&DecoderId::Final].generator_checkpoint, None);

        let c = parse("alpha_schedule = 0.5, 1, 1\n").unwrap();
        assert_eq!(c.alpha_schedule.alphas(3).unwrap(), vec![0.5, 1.0, 1.0]);
        assert!(c.alpha_schedule.alphas(4).is_err());
    }

    #[test]
    fn overrides_win_over_the_file() {
        let c = RunConfig::parse_with(
            &format!("{BASE}seed = 1\ntaps = 1\n"),
            Path::new("."),
            &[("seed", "9".into()), ("taps", "none".into()), ("shared_decoder", "true".into())],
        )
        .unwrap();
        assert_eq!(c.train.seed, 9);
        assert!(c.model.tap_indices.is_empty());
        assert!(c.model.shared_decoder);
        let e = RunConfig::parse_with(BASE, Path::new("."), &[("mask_ratio", "lots".into())]).unwrap_err();
        assert!(matches!(e, Error::Config(_)), "{e}");
    }

    #[test]
    fn finetune_keys() {
        let c = parse("ft_epochs = 3\nft_base_lr = 0.01\nfreeze_first_k = 2\nepochs = 7\n").unwrap();
        assert_eq!(c.finetune.epochs, 3);
        assert_eq!(c.finetune.base_lr, 0.01);
        assert_eq!(c.finetune.freeze_first_k, Some(2));
        assert_eq!(c.train.epochs, 7);
        assert!(parse("freeze_first_k = 1\nreinit_last_k = 1\n").is_err());
    }
}
