//! Grouped dense backbone, cosine classification head and the
//! adaptability-calibration freezing control.

mod backbone;
mod checkpoint;
mod head;

pub use backbone::{BackboneConfig, BackboneModel, ForwardTrace, Group, Layer};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use head::{CosineHead, HeadTrace, DEFAULT_SCALE, MIN_NORM};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Number of trailing backbone groups left learnable; the head is always
/// learnable. `0` trains only the head, `G` trains everything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptabilityLevel(pub usize);

impl AdaptabilityLevel {
    pub fn learnable_groups(self) -> usize {
        self.0
    }

    /// Index of the first learnable group in a `g`-group backbone.
    pub fn first_learnable(self, g: usize) -> usize {
        g - self.0.min(g)
    }
}

impl Default for AdaptabilityLevel {
    fn default() -> Self {
        AdaptabilityLevel(1)
    }
}

/// Freezes groups `0..G-j`, unfreezes the last `j` groups and the head.
pub fn set_adaptability(model: &mut BackboneModel, head: &mut CosineHead, level: AdaptabilityLevel) -> Result<()> {
    let g = model.num_groups();
    if level.0 > g {
        return Err(Error::InvalidArgument(format!(
            "adaptability level {} exceeds backbone group count {g}",
            level.0
        )));
    }
    let first = level.first_learnable(g);
    for i in 0..g {
        model.set_group_frozen(i, i < first);
    }
    head.weights.frozen = false;
    Ok(())
}

/// Fresh backbone and head, deterministic in `seed`.
pub fn init_model(config: &BackboneConfig, n_classes: usize, seed: u64) -> Result<(BackboneModel, CosineHead)> {
    config.validate()?;
    let mut backbone_rng = rng::stream(seed, "init-backbone", &[]);
    let model = BackboneModel::init(config.clone(), &mut backbone_rng)?;
    let mut head_rng = rng::stream(seed, "init-head", &[]);
    let head = CosineHead::init(n_classes, model.feature_dim(), DEFAULT_SCALE, &mut head_rng)?;
    Ok((model, head))
}

/// Deep copy with every group frozen.
pub fn clone_frozen_reference(model: &BackboneModel) -> BackboneModel {
    let mut copy = model.clone();
    for i in 0..copy.num_groups() {
        copy.set_group_frozen(i, true);
    }
    copy
}
