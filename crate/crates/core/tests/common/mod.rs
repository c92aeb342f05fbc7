#![allow(dead_code)]

use fewshot_core::data::{
    generate_synthetic, presample_episodes, split_dataset, DatasetStore, EpisodeFile, SyntheticConfig,
};
use fewshot_core::model::BackboneConfig;
use fewshot_core::trainer::{pretrain, FinetuneConfig, PretrainConfig, Pretrained};

pub const GROUPS: usize = 4;

/// 30 classes in dimension 8, split 18 / 4 / 8.
pub fn store() -> DatasetStore {
    let cfg = SyntheticConfig {
        n_classes: 30,
        samples_per_class: 40,
        input_dim: 8,
        cluster_spread: 0.15,
        separation: 1.0,
    };
    split_dataset(generate_synthetic(&cfg, 3).unwrap(), 18, 4, 8, 3).unwrap()
}

pub fn backbone() -> BackboneConfig {
    BackboneConfig {
        input_dim: 8,
        group_dims: vec![12; GROUPS],
        layers_per_group: 1,
    }
}

pub fn pretrained(store: &DatasetStore) -> Pretrained {
    let cfg = PretrainConfig {
        epochs: 10,
        ..PretrainConfig::default()
    };
    pretrain(store, &backbone(), &cfg, 5).unwrap()
}

pub fn finetune_cfg() -> FinetuneConfig {
    FinetuneConfig {
        epochs: 30,
        sr_batch_size: 32,
        ..FinetuneConfig::default()
    }
}

pub fn episodes(store: &DatasetStore, n: usize, k: usize) -> EpisodeFile {
    EpisodeFile {
        episodes: presample_episodes(store, n, 5, k, 15, 7).unwrap(),
        sha256: "fixture".into(),
    }
}
