//! Plain-text experiment configuration.
//!
//! One `key = value` pair per line; `#` starts a comment. Every key is
//! optional and defaults to the M&Ms-style preset. A `preset` key, wherever it
//! appears, selects the base values before the other keys are applied.
//!
//! | key | type | default |
//! |-----|------|---------|
//! | `preset` | `mnms`, `scgm` or `desk` | `mnms` |
//! | `beta` | real ≥ 0 | 3 |
//! | `lambda` | real in [0, 1] | 1 |
//! | `alpha` | real in [0, 0.5] | 0.1 |
//! | `mix_mode` | `strict` or `rectified` | `rectified` |
//! | `lr` | real > 0 | 1e-4 |
//! | `weight_decay` | real ≥ 0 | 0.1 |
//! | `epochs` | integer | 20 |
//! | `batch_size` | integer ≥ 1 | 32 |
//! | `labeled_fraction` | real in (0, 1] | 0.2 |
//! | `data_seed`, `net1_seed`, `net2_seed` | integers | 0, 1, 2 |
//! | `crop` | multiple of `2^depth` | 64 |
//! | `cacps_on_labeled`, `detach_weight`, `confidence` | bool | true, false, true |
//! | `augment_rotation`, `augment_scaling`, `augment_crop`, `augment_flip` | bool | true |
//! | `warmup_epochs` | integer | 0 |
//! | `num_classes`, `base_width`, `depth` | integers | 3, 16, 3 |
//! | `instance_norm` | bool | false |
//! | `held_out` | domain name | `A` |
//! | `dataset` | `synthetic` or a corpus path | `synthetic` |
//! | `subjects_per_domain`, `image_size`, `synth_seed` | integers | 10, 64, 0 |
//! | `output_dir` | path | `runs` |
//! | `checkpoint_every` | integer, 0 = only at the end | 5 |
//! | `eval_every` | integer, 0 = never | 0 |

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::{
    generate_benchmark, load_corpus, make_split, preset_domains, AugmentFlags, DomainTag, Sample, Split,
    SplitSpec,
};
use crate::error::{Error, Result};
use crate::segnet::NetSpec;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetSource {
    Synthetic {
        subjects_per_domain: usize,
        image_size: usize,
        seed: u64,
    },
    Corpus(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Mnms,
    Scgm,
    Desk,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Mnms => "mnms",
            Preset::Scgm => "scgm",
            Preset::Desk => "desk",
        }
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mnms" => Ok(Preset::Mnms),
            "scgm" => Ok(Preset::Scgm),
            "desk" => Ok(Preset::Desk),
            other => Err(format!("unknown preset `{other}` (expected mnms, scgm or desk)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub train: TrainConfig,
    pub net: NetSpec,
    pub held_out: String,
    pub dataset: DatasetSource,
    pub output_dir: PathBuf,
    pub checkpoint_every: u64,
    pub eval_every: u64,
}

/// Every key accepted by [`ExperimentConfig::set`], in canonical order.
pub const KEYS: &[&str] = &[
    "beta",
    "lambda",
    "alpha",
    "mix_mode",
    "lr",
    "weight_decay",
    "epochs",
    "batch_size",
    "labeled_fraction",
    "data_seed",
    "net1_seed",
    "net2_seed",
    "crop",
    "cacps_on_labeled",
    "detach_weight",
    "confidence",
    "augment_rotation",
    "augment_scaling",
    "augment_crop",
    "augment_flip",
    "warmup_epochs",
    "num_classes",
    "base_width",
    "depth",
    "instance_norm",
    "held_out",
    "dataset",
    "subjects_per_domain",
    "image_size",
    "synth_seed",
    "output_dir",
    "checkpoint_every",
    "eval_every",
];

impl ExperimentConfig {
    pub fn from_preset(preset: Preset) -> Self {
        let (train, net) = match preset {
            Preset::Mnms => (TrainConfig::mnms(), NetSpec::default()),
            Preset::Scgm => (TrainConfig::scgm(), NetSpec::default()),
            Preset::Desk => (TrainConfig::desk(), TrainConfig::desk_net()),
        };
        Self {
            preset,
            train,
            net,
            held_out: "A".to_string(),
            dataset: DatasetSource::Synthetic {
                subjects_per_domain: 10,
                image_size: 64,
                seed: 0,
            },
            output_dir: PathBuf::from("runs"),
            checkpoint_every: 5,
            eval_every: 0,
        }
    }

    /// Parses, applies and validates; every problem is reported together.
    pub fn parse(text: &str) -> Result<Self> {
        let mut errs = Vec::new();
        let mut pairs = Vec::new();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errs.push(format!("line {}: expected `key = value`", n + 1));
                continue;
            };
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if !seen.insert(k.clone()) {
                errs.push(format!("line {}: duplicate key `{k}`", n + 1));
                continue;
            }
            pairs.push((n + 1, k, v));
        }
        let preset = match pairs.iter().find(|(_, k, _)| k == "preset") {
            Some((n, _, v)) => v.parse().unwrap_or_else(|e| {
                errs.push(format!("line {n}: {e}"));
                Preset::Mnms
            }),
            None => Preset::Mnms,
        };
        let mut cfg = Self::from_preset(preset);
        for (n, k, v) in &pairs {
            if k == "preset" {
                continue;
            }
            if let Err(e) = cfg.set(k, v) {
                errs.push(format!("line {n}: {e}"));
            }
        }
        errs.extend(cfg.problems());
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Applies `key=value` overrides, then validates.
    pub fn with_overrides(mut self, overrides: &[(String, String)]) -> Result<Self> {
        let mut errs = Vec::new();
        for (k, v) in overrides {
            if let Err(e) = self.set(k, v) {
                errs.push(e);
            }
        }
        errs.extend(self.problems());
        if errs.is_empty() {
            Ok(self)
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Every sample of the configured dataset, all domains included.
    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        match &self.dataset {
            DatasetSource::Synthetic {
                subjects_per_domain,
                image_size,
                seed,
            } => generate_benchmark(
                &preset_domains(),
                *subjects_per_domain,
                *image_size,
                self.net.num_classes,
                *seed,
            ),
            DatasetSource::Corpus(root) => load_corpus(root, self.net.num_classes),
        }
    }

    /// The leave-one-domain-out split of `samples`, seeded by `data_seed`.
    pub fn split(&self, samples: &[Sample]) -> Result<Split> {
        make_split(
            samples,
            &SplitSpec {
                held_out: DomainTag::new(&self.held_out),
                labeled_fraction: self.train.labeled_fraction,
                seed: self.train.data_seed,
            },
        )
    }

    fn problems(&self) -> Vec<String> {
        let mut errs = self.train.problems(&self.net);
        if let Err(Error::Config(e)) = self.net.validate() {
            errs.extend(e);
        }
        if self.held_out.is_empty() {
            errs.push("held_out must name a domain".to_string());
        }
        if let DatasetSource::Synthetic {
            subjects_per_domain,
            image_size,
            ..
        } = self.dataset
        {
            if subjects_per_domain == 0 {
                errs.push("subjects_per_domain must be positive".to_string());
            }
            if image_size < self.train.crop {
                errs.push(format!(
                    "image_size {image_size} is smaller than crop {}",
                    self.train.crop
                ));
            }
        }
        errs
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("`{key}`: cannot parse `{v}`"))
        }
        fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(format!("`{key}`: expected true or false, got `{v}`")),
            }
        }
        let t = &mut self.train;
        match key {
            "preset" => return Err("`preset` can only be given in a config file".to_string()),
            "beta" => t.beta = num(key, value)?,
            "lambda" => t.mix.lambda = num(key, value)?,
            "alpha" => t.mix.alpha = num(key, value)?,
            "mix_mode" => t.mix.mode = value.parse().map_err(|e| format!("`{key}`: {e}"))?,
            "lr" => t.lr = num(key, value)?,
            "weight_decay" => t.weight_decay = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "labeled_fraction" => t.labeled_fraction = num(key, value)?,
            "data_seed" => t.data_seed = num(key, value)?,
            "net1_seed" => t.net1_seed = num(key, value)?,
            "net2_seed" => t.net2_seed = num(key, value)?,
            "crop" => t.crop = num(key, value)?,
            "cacps_on_labeled" => t.cacps_on_labeled = flag(key, value)?,
            "detach_weight" => t.detach_weight = flag(key, value)?,
            "confidence" => t.confidence = flag(key, value)?,
            "augment_rotation" => t.augment.rotation = flag(key, value)?,
            "augment_scaling" => t.augment.scaling = flag(key, value)?,
            "augment_crop" => t.augment.crop = flag(key, value)?,
            "augment_flip" => t.augment.flip = flag(key, value)?,
            "warmup_epochs" => t.warmup_epochs = num(key, value)?,
            "num_classes" => self.net.num_classes = num(key, value)?,
            "base_width" => self.net.base_width = num(key, value)?,
            "depth" => self.net.depth = num(key, value)?,
            "instance_norm" => self.net.instance_norm = flag(key, value)?,
            "held_out" => self.held_out = value.to_string(),
            "dataset" => {
                self.dataset = if value == "synthetic" {
                    match &self.dataset {
                        DatasetSource::Synthetic { .. } => self.dataset.clone(),
                        DatasetSource::Corpus(_) => Self::from_preset(self.preset).dataset,
                    }
                } else {
                    DatasetSource::Corpus(PathBuf::from(value))
                }
            }
            "subjects_per_domain" | "image_size" | "synth_seed" => {
                let DatasetSource::Synthetic {
                    subjects_per_domain,
                    image_size,
                    seed,
                } = &mut self.dataset
                else {
                    return Err(format!("`{key}` only applies to the synthetic dataset"));
                };
                match key {
                    "subjects_per_domain" => *subjects_per_domain = num(key, value)?,
                    "image_size" => *image_size = num(key, value)?,
                    _ => *seed = num(key, value)?,
                }
            }
            "output_dir" => self.output_dir = PathBuf::from(value),
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("preset", self.preset.name().to_string());
        kv("beta", t.beta.to_string());
        kv("lambda", t.mix.lambda.to_string());
        kv("alpha", t.mix.alpha.to_string());
        kv("mix_mode", t.mix.mode.to_string());
        kv("lr", t.lr.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("labeled_fraction", t.labeled_fraction.to_string());
        kv("data_seed", t.data_seed.to_string());
        kv("net1_seed", t.net1_seed.to_string());
        kv("net2_seed", t.net2_seed.to_string());
        kv("crop", t.crop.to_string());
        kv("cacps_on_labeled", t.cacps_on_labeled.to_string());
        kv("detach_weight", t.detach_weight.to_string());
        kv("confidence", t.confidence.to_string());
        let AugmentFlags {
            rotation,
            scaling,
            crop,
            flip,
        } = t.augment;
        kv("augment_rotation", rotation.to_string());
        kv("augment_scaling", scaling.to_string());
        kv("augment_crop", crop.to_string());
        kv("augment_flip", flip.to_string());
        kv("warmup_epochs", t.warmup_epochs.to_string());
        kv("num_classes", self.net.num_classes.to_string());
        kv("base_width", self.net.base_width.to_string());
        kv("depth", self.net.depth.to_string());
        kv("instance_norm", self.net.instance_norm.to_string());
        kv("held_out", self.held_out.clone());
        match &self.dataset {
            DatasetSource::Synthetic {
                subjects_per_domain,
                image_size,
                seed,
            } => {
                kv("dataset", "synthetic".to_string());
                kv("subjects_per_domain", subjects_per_domain.to_string());
                kv("image_size", image_size.to_string());
                kv("synth_seed", seed.to_string());
            }
            DatasetSource::Corpus(p) => kv("dataset", p.display().to_string()),
        }
        kv("output_dir", self.output_dir.display().to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("eval_every", self.eval_every.to_string());
        s
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_preset(Preset::Mnms)
    }
}
