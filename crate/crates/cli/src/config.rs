//! Flat `key = value` experiment configuration.
//!
//! Every key has a default and a one-line description tagged with where the
//! value comes from: `recipe` (the published training or evaluation
//! protocol), `calibrated` (chosen by a desk-scale calibration run) or
//! `plumbing` (needed by the tool, no experimental meaning).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use fewshot_core::data::SyntheticConfig;
use fewshot_core::io::sha256_hex;
use fewshot_core::losses::LossConfig;
use fewshot_core::model::{AdaptabilityLevel, BackboneConfig};
use fewshot_core::numcore::SgdConfig;
use fewshot_core::rng;
use fewshot_core::trainer::{FinetuneConfig, PretrainConfig, SrSource, Variant, VariantSpec};

use crate::error::CliError;

/// Documentation for one key.
#[derive(Debug, Clone, Copy)]
pub struct KeyDoc {
    pub key: &'static str,
    pub source: &'static str,
    pub doc: &'static str,
}

trait ConfigValue: Sized {
    fn parse(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! simple_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{s:?}: {e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
simple_value!(usize, u64, f64, bool, String);

impl ConfigValue for Variant {
    fn parse(s: &str) -> Result<Self, String> {
        s.parse().map_err(|e: fewshot_core::Error| e.to_string())
    }
    fn render(&self) -> String {
        self.as_str().to_string()
    }
}

macro_rules! experiment_config {
    ($($field:ident: $ty:ty = $default:expr, $key:literal, $source:literal, $doc:literal;)*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct ExperimentConfig {
            $(pub $field: $ty,)*
        }

        impl Default for ExperimentConfig {
            fn default() -> Self {
                ExperimentConfig { $($field: $default,)* }
            }
        }

        pub const KEYS: &[KeyDoc] = &[$(KeyDoc { key: $key, source: $source, doc: $doc },)*];

        impl ExperimentConfig {
            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
                let value = value.trim();
                match key {
                    $($key => {
                        self.$field = <$ty as ConfigValue>::parse(value)
                            .map_err(|e| CliError::usage(format!("bad value for {key}: {e}")))?;
                    })*
                    _ => return Err(CliError::usage(format!("unknown config key {key:?}"))),
                }
                Ok(())
            }

            /// Every key with its current value, in documentation order.
            pub fn pairs(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, ConfigValue::render(&self.$field)),)*]
            }
        }
    };
}

experiment_config! {
    seed: u64 = 0, "seed", "plumbing",
        "master seed; dataset, split, pretraining and episode seeds derive from it";
    dataset_path: String = String::new(), "dataset.path", "plumbing",
        "binary dataset file or CSV (label,f1,...,fd with header); empty means synthetic";
    dataset_synthetic: bool = true, "dataset.synthetic", "plumbing",
        "generate the Gaussian-cluster dataset when dataset.path is empty";
    synthetic_classes: usize = 100, "synthetic.classes", "recipe",
        "number of classes (64 + 16 + 20)";
    synthetic_samples_per_class: usize = 100, "synthetic.samples_per_class", "plumbing",
        "samples generated per class";
    synthetic_input_dim: usize = 32, "synthetic.input_dim", "plumbing",
        "feature dimension of generated samples";
    synthetic_spread: f64 = SyntheticConfig::default().cluster_spread, "synthetic.spread", "calibrated",
        "per-coordinate standard deviation around each class mean";
    synthetic_separation: f64 = 1.0, "synthetic.separation", "calibrated",
        "norm of every class mean";
    split_base: usize = 64, "split.base", "recipe", "base classes";
    split_val: usize = 16, "split.val", "recipe", "validation classes (kept, unused by the protocol)";
    split_novel: usize = 20, "split.novel", "recipe", "novel classes episodes are drawn from";
    backbone_groups: usize = 5, "backbone.groups", "recipe", "number of backbone groups";
    backbone_width: usize = 64, "backbone.width", "plumbing", "output width of every group";
    backbone_layers_per_group: usize = 1, "backbone.layers_per_group", "plumbing",
        "affine + relu layers per group";
    pretrain_epochs: usize = 20, "pretrain.epochs", "calibrated", "pretraining epochs over the base split";
    pretrain_batch_size: usize = 64, "pretrain.batch_size", "plumbing", "pretraining minibatch size";
    pretrain_lr: f64 = 0.01, "pretrain.lr", "calibrated", "pretraining learning rate";
    pretrain_weight_decay: f64 = 5e-4, "pretrain.weight_decay", "plumbing", "pretraining weight decay";
    pretrain_momentum: f64 = 0.9, "pretrain.momentum", "plumbing", "pretraining momentum";
    finetune_epochs: usize = 100, "finetune.epochs", "recipe", "full-batch fine-tuning steps per episode";
    finetune_lr: f64 = 0.1, "finetune.lr", "recipe", "fine-tuning learning rate";
    finetune_weight_decay: f64 = 1e-4, "finetune.weight_decay", "recipe", "fine-tuning weight decay";
    finetune_momentum: f64 = 0.9, "finetune.momentum", "recipe", "fine-tuning momentum";
    decay_biases: bool = true, "optim.decay_biases", "plumbing",
        "apply weight decay to biases as well as weights";
    finetune_adaptability: usize = 1, "finetune.adaptability", "recipe",
        "trailing groups left learnable by calibrated variants (0 = head only)";
    loss_epsilon: f64 = 0.1, "loss.epsilon", "recipe", "label smoothing";
    loss_alpha: f64 = 0.1, "loss.alpha", "recipe", "weight of the stability term";
    sr_batch_size: usize = 256, "sr.batch_size", "recipe", "unlabeled samples per stability batch";
    sr_resample_per_step: bool = true, "sr.resample_per_step", "plumbing",
        "draw a fresh stability batch every step rather than every epoch";
    sr_pool: String = String::new(), "sr.pool", "plumbing",
        "dataset file used as the unlabeled stability pool; empty means the base split";
    head_scale: f64 = 10.0, "head.scale", "plumbing", "cosine classifier scale";
    variant: Variant = Variant::AcSr, "variant", "recipe", "plain, ac, ac-sr or ac-ensr";
    ensemble_m: usize = 4, "ensemble.m", "recipe", "ensemble members for ac-ensr";
    ensemble_shared_head_init: bool = false, "ensemble.shared_head_init", "plumbing",
        "start every member from the same head initialization";
    n_way: usize = 5, "episodes.n_way", "recipe", "classes per episode";
    k_shot: usize = 1, "episodes.k_shot", "recipe", "support samples per class (1 or 5)";
    n_query: usize = 15, "episodes.n_query", "recipe", "query samples per class";
    n_episodes: usize = 500, "episodes.count", "recipe", "pre-sampled episodes";
    episodes_sha256: String = String::new(), "episodes.sha256", "plumbing",
        "expected episode-file hash; bench refuses any other file when set";
    n_runs: usize = 5, "bench.runs", "recipe", "benchmark runs over the same episodes";
    parallel: bool = true, "bench.parallel", "plumbing", "evaluate episodes on all cores";
    out_dir: String = "results".to_string(), "out", "plumbing", "directory for every artifact";
}

impl ExperimentConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = ExperimentConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("config line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v)
                .map_err(|e| CliError::usage(format!("config line {}: {}", n + 1, e.message)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical text: every key in documentation order. Hashing this gives
    /// the config hash.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical().as_bytes())
    }

    /// JSON object of every key, for manifests and sidecars.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.pairs()
                .into_iter()
                .map(|(k, v)| (k.to_string(), serde_json::Value::String(v)))
                .collect(),
        )
    }

    /// Commented listing of every key at its default.
    pub fn documented_defaults() -> String {
        let d = ExperimentConfig::default();
        let mut out = String::new();
        for (doc, (k, v)) in KEYS.iter().zip(d.pairs()) {
            let _ = writeln!(out, "# [{}] {}\n{k} = {v}\n", doc.source, doc.doc);
        }
        out
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            master: self.seed,
            dataset: rng::derive_seed(self.seed, "cli-dataset", &[]),
            split: rng::derive_seed(self.seed, "cli-split", &[]),
            pretrain: rng::derive_seed(self.seed, "cli-pretrain", &[]),
            episodes: rng::derive_seed(self.seed, "cli-episodes", &[]),
        }
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            n_classes: self.synthetic_classes,
            samples_per_class: self.synthetic_samples_per_class,
            input_dim: self.synthetic_input_dim,
            cluster_spread: self.synthetic_spread,
            separation: self.synthetic_separation,
        }
    }

    pub fn backbone(&self, input_dim: usize) -> BackboneConfig {
        BackboneConfig {
            input_dim,
            group_dims: vec![self.backbone_width; self.backbone_groups],
            layers_per_group: self.backbone_layers_per_group,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch_size,
            sgd: SgdConfig {
                learning_rate: self.pretrain_lr,
                weight_decay: self.pretrain_weight_decay,
                momentum: self.pretrain_momentum,
                decay_biases: self.decay_biases,
            },
            epsilon: self.loss_epsilon,
            head_scale: self.head_scale,
            frozen_groups: 0,
        }
    }

    /// Fine-tuning settings before the variant adjusts them.
    pub fn finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.finetune_epochs,
            sgd: SgdConfig {
                learning_rate: self.finetune_lr,
                weight_decay: self.finetune_weight_decay,
                momentum: self.finetune_momentum,
                decay_biases: self.decay_biases,
            },
            loss: LossConfig {
                epsilon: self.loss_epsilon,
                alpha: self.loss_alpha,
            },
            adaptability: AdaptabilityLevel(self.finetune_adaptability),
            sr_enabled: true,
            sr_batch_size: self.sr_batch_size,
            sr_source: if self.sr_pool.is_empty() {
                SrSource::Base
            } else {
                SrSource::Pool(self.sr_pool.clone())
            },
            sr_resample_per_step: self.sr_resample_per_step,
            head_scale: self.head_scale,
            audit_sr: false,
        }
    }

    pub fn variant_spec(&self) -> VariantSpec {
        VariantSpec {
            variant: self.variant,
            ensemble_m: self.ensemble_m,
            shared_head_init: self.ensemble_shared_head_init,
        }
    }
}

/// Per-stage seeds derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub dataset: u64,
    pub split: u64,
    pub pretrain: u64,
    pub episodes: u64,
}
