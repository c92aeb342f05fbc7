//! JSON checkpoint container. Floats are written in shortest round-trip form
//! and parsed exactly, so save/load is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::backbone::{BackboneConfig, BackboneModel, Group, Layer};
use super::head::CosineHead;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::numcore::{Param, Tensor};

pub const CHECKPOINT_FORMAT: &str = "fewshot-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerRecord {
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeadRecord {
    n_classes: usize,
    scale: f64,
    weights: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    seed: u64,
    config: BackboneConfig,
    groups: Vec<Vec<LayerRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    head: Option<HeadRecord>,
}

/// A backbone with its provenance and an optional head.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub seed: u64,
    pub backbone: BackboneModel,
    pub head: Option<CosineHead>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let groups = self
            .backbone
            .groups()
            .iter()
            .map(|g| {
                g.layers
                    .iter()
                    .map(|l| LayerRecord {
                        weight: l.weight.value.values().to_vec(),
                        bias: l.bias.value.values().to_vec(),
                    })
                    .collect()
            })
            .collect();
        let head = self.head.as_ref().map(|h| HeadRecord {
            n_classes: h.n_classes(),
            scale: h.scale,
            weights: h.weights.value.values().to_vec(),
        });
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            config: self.backbone.config().clone(),
            groups,
            head,
        };
        let mut s = serde_json::to_string_pretty(&file)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("not a checkpoint: format tag {:?}", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                file.version
            )));
        }
        let config = file.config;
        config.validate()?;
        let mut d_in = config.input_dim;
        let mut groups = Vec::with_capacity(file.groups.len());
        for (gi, layers) in file.groups.into_iter().enumerate() {
            let d_out = *config.group_dims.get(gi).ok_or_else(|| {
                Error::Dimension(format!("checkpoint has more groups than config declares ({})", gi + 1))
            })?;
            let mut built = Vec::with_capacity(layers.len());
            for (li, rec) in layers.into_iter().enumerate() {
                let fan_in = if li == 0 { d_in } else { d_out };
                let weight = Tensor::matrix(fan_in, d_out, rec.weight)
                    .map_err(|e| e.context(format!("group {gi} layer {li} weight")))?;
                let bias =
                    Tensor::new(vec![d_out], rec.bias).map_err(|e| e.context(format!("group {gi} layer {li} bias")))?;
                built.push(Layer {
                    weight: Param::new(weight),
                    bias: Param::bias(bias),
                });
            }
            groups.push(Group { layers: built });
            d_in = d_out;
        }
        let backbone = BackboneModel::from_groups(config, groups)?;
        let head = match file.head {
            Some(h) => {
                let dim = backbone.feature_dim();
                let w = Tensor::matrix(h.n_classes, dim, h.weights).map_err(|e| e.context("head weights"))?;
                Some(CosineHead {
                    weights: Param::new(w),
                    scale: h.scale,
                })
            }
            None => None,
        };
        Ok(Checkpoint {
            seed: file.seed,
            backbone,
            head,
        })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_atomic(path, checkpoint.to_json()?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&text).map_err(|e| e.context(format!("loading {}", path.display())))
}
