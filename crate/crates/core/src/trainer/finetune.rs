use serde::{Deserialize, Serialize};

use crate::data::{sample_sr_indices, DatasetStore, EpisodeSpec, Split, SrPool};
use crate::error::{Error, Result};
use crate::losses::{combined_loss, label_smoothed_ce, stability_regularization_lenient, LossConfig};
use crate::model::{
    clone_frozen_reference, set_adaptability, AdaptabilityLevel, BackboneModel, CosineHead, DEFAULT_SCALE,
};
use crate::numcore::{sgd_step, SgdConfig, Tensor};
use crate::rng::{self, StreamRng};

/// Where stability-regularization batches come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SrSource {
    Base,
    /// An external unlabeled pool, identified by name.
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub sgd: SgdConfig,
    pub loss: LossConfig,
    pub adaptability: AdaptabilityLevel,
    pub sr_enabled: bool,
    pub sr_batch_size: usize,
    pub sr_source: SrSource,
    /// Draw a fresh SR batch every optimizer step (otherwise once per epoch).
    /// With full-batch support there is one step per epoch, so both agree.
    pub sr_resample_per_step: bool,
    pub head_scale: f64,
    /// Record the SR sample ids drawn at every step.
    pub audit_sr: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 100,
            sgd: SgdConfig::default(),
            loss: LossConfig::default(),
            adaptability: AdaptabilityLevel(1),
            sr_enabled: true,
            sr_batch_size: 256,
            sr_source: SrSource::Base,
            sr_resample_per_step: true,
            head_scale: DEFAULT_SCALE,
            audit_sr: false,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("fine-tuning needs epochs >= 1".into()));
        }
        if self.sr_enabled && self.sr_batch_size == 0 {
            return Err(Error::InvalidArgument("sr_batch_size must be >= 1".into()));
        }
        self.sgd.validate()?;
        self.loss.validate()
    }
}

/// Activations of the frozen reference backbone at every group boundary for
/// a fixed set of inputs. Entry `g` is what enters group `g`; the last entry
/// is the reference feature `f(x)`.
///
/// Groups below the adaptability cut are frozen in both `f` and the tuned
/// copy, so their outputs can be reused instead of recomputed each step.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    boundaries: Vec<Tensor>,
    /// Origin of each row: a store sample index, or a pool row.
    sample_ids: Vec<usize>,
    source_name: String,
}

impl FeatureBank {
    pub fn build(
        reference: &BackboneModel,
        inputs: Tensor,
        sample_ids: Vec<usize>,
        source_name: impl Into<String>,
    ) -> Result<Self> {
        if inputs.rows() != sample_ids.len() {
            return Err(Error::Dimension(format!(
                "{} bank rows but {} sample ids",
                inputs.rows(),
                sample_ids.len()
            )));
        }
        if sample_ids.is_empty() {
            return Err(Error::Capacity("feature bank needs at least one sample".into()));
        }
        let mut boundaries = Vec::with_capacity(reference.num_groups() + 1);
        let mut h = inputs;
        for g in 0..reference.num_groups() {
            let next = reference.forward_range(g, g + 1, &h)?;
            boundaries.push(h);
            h = next;
        }
        boundaries.push(h);
        Ok(FeatureBank {
            boundaries,
            sample_ids,
            source_name: source_name.into(),
        })
    }

    /// Bank over the store's base split, rows in ascending sample order.
    pub fn base(reference: &BackboneModel, store: &DatasetStore) -> Result<Self> {
        let ids = store.samples_in(Split::Base);
        FeatureBank::build(reference, store.rows(&ids), ids, "base")
    }

    pub fn from_pool(reference: &BackboneModel, pool: &SrPool) -> Result<Self> {
        let ids = (0..pool.len()).collect();
        FeatureBank::build(reference, pool.features.clone(), ids, pool.source_name.clone())
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn sample_ids(&self) -> &[usize] {
        &self.sample_ids
    }

    pub fn source_name(&self) -> &str {
        &self.source_name
    }

    pub fn boundary(&self, g: usize) -> &Tensor {
        &self.boundaries[g]
    }

    pub fn reference_features(&self) -> &Tensor {
        self.boundaries.last().expect("nonempty")
    }

    /// Bank row holding `sample_id`, if any.
    pub fn row_of(&self, sample_id: usize) -> Option<usize> {
        // base banks are sorted; pool banks are the identity
        self.sample_ids.binary_search(&sample_id).ok()
    }
}

/// The rows of a bank an SR sampler may draw from.
#[derive(Debug, Clone, Copy)]
pub struct SrSampler<'a> {
    pub bank: &'a FeatureBank,
    /// Allowed bank rows; `None` allows every row.
    pub rows: Option<&'a [usize]>,
}

impl<'a> SrSampler<'a> {
    pub fn whole(bank: &'a FeatureBank) -> Self {
        SrSampler { bank, rows: None }
    }

    fn pool_len(&self) -> usize {
        self.rows.map_or(self.bank.len(), <[usize]>::len)
    }

    fn draw(&self, batch: usize, rng: &mut StreamRng) -> Result<Vec<usize>> {
        let picks = sample_sr_indices(self.pool_len(), batch, rng)?;
        Ok(match self.rows {
            Some(rows) => picks.into_iter().map(|i| rows[i]).collect(),
            None => picks,
        })
    }
}

/// Independent random streams for one fine-tuning job.
pub struct FinetuneStreams {
    pub head_init: StreamRng,
    pub sr: StreamRng,
}

impl FinetuneStreams {
    /// Streams keyed by `(seed, run, episode, member)`.
    pub fn keyed(seed: u64, run: u64, episode: u64, member: u64) -> Self {
        FinetuneStreams {
            head_init: rng::stream(seed, "finetune-head-init", &[run, episode, member]),
            sr: rng::stream(seed, "finetune-sr", &[run, episode, member]),
        }
    }
}

/// A fine-tuned backbone with its episode head.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub backbone: BackboneModel,
    pub head: CosineHead,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: FittedModel,
    /// Cross-entropy at every epoch, before that epoch's update.
    pub ce_trajectory: Vec<f64>,
    /// Stability loss at every epoch (empty when SR is disabled).
    pub sr_trajectory: Vec<f64>,
    /// SR rows skipped for zero-norm features.
    pub sr_skipped: usize,
    /// Sample ids of every SR batch, when auditing.
    pub sr_audit: Vec<Vec<usize>>,
}

/// Fine-tunes a copy of `pretrained` on the episode's support set.
///
/// The copy keeps only the last `cfg.adaptability` groups learnable, gets a
/// freshly initialized head over the episode's classes, and trains for
/// `cfg.epochs` full-batch steps on `L_C + alpha * L_S` (or `L_C` alone when
/// SR is disabled). The pretrained model is never modified.
pub fn finetune_episode(
    pretrained: &BackboneModel,
    episode: &EpisodeSpec,
    store: &DatasetStore,
    cfg: &FinetuneConfig,
    sr: Option<SrSampler<'_>>,
    streams: &mut FinetuneStreams,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let g = pretrained.num_groups();
    if cfg.adaptability.0 > g {
        return Err(Error::InvalidArgument(format!(
            "adaptability level {} exceeds {g} groups",
            cfg.adaptability.0
        )));
    }
    let sr = if cfg.sr_enabled {
        Some(sr.ok_or_else(|| Error::InvalidArgument("SR enabled but no SR pool supplied".into()))?)
    } else {
        None
    };
    if let Some(s) = &sr {
        if s.bank.boundaries.len() != g + 1 {
            return Err(Error::Dimension("SR bank was built for a different backbone".into()));
        }
    }

    let reference = clone_frozen_reference(pretrained);
    let mut tuned = pretrained.clone();
    for p in tuned.params_mut() {
        p.reset_state();
    }
    let mut head = CosineHead::init(
        episode.n_way(),
        tuned.feature_dim(),
        cfg.head_scale,
        &mut streams.head_init,
    )?;
    set_adaptability(&mut tuned, &mut head, cfg.adaptability)?;
    let start = cfg.adaptability.first_learnable(g);

    let (support_idx, labels) = episode.support_set();
    // frozen prefix is shared by f and f-hat, computed once
    let support_in = reference.forward_range(0, start, &store.rows(&support_idx))?;

    let mut outcome_ce = Vec::with_capacity(cfg.epochs);
    let mut outcome_sr = Vec::new();
    let mut audit = Vec::new();
    let mut skipped = 0;
    let mut epoch_batch: Option<Vec<usize>> = None;
    for epoch in 0..cfg.epochs {
        let ctx = || format!("fine-tune epoch {epoch}");
        let trace = tuned.forward_trace(start, &support_in).map_err(|e| e.context(ctx()))?;
        let head_trace = head.forward(trace.output()).map_err(|e| e.context(ctx()))?;
        let ce = label_smoothed_ce(&head_trace.logits, &labels, cfg.loss.epsilon)?;
        let grad_features = head.backward(&head_trace, &ce.grad, 1.0)?;
        tuned.backward(&trace, &grad_features, 1.0)?;

        let mut sr_loss = 0.0;
        if let Some(sampler) = &sr {
            let rows = match (&epoch_batch, cfg.sr_resample_per_step) {
                (Some(rows), false) => rows.clone(),
                _ => {
                    let rows = sampler.draw(cfg.sr_batch_size, &mut streams.sr)?;
                    epoch_batch = Some(rows.clone());
                    rows
                }
            };
            if cfg.audit_sr {
                audit.push(rows.iter().map(|&r| sampler.bank.sample_ids[r]).collect());
            }
            let sr_in = sampler.bank.boundary(start).select_rows(&rows);
            let f_ref = sampler.bank.reference_features().select_rows(&rows);
            let sr_trace = tuned.forward_trace(start, &sr_in)?;
            let s = stability_regularization_lenient(&f_ref, sr_trace.output())?;
            tuned.backward(&sr_trace, &s.grad, cfg.loss.alpha)?;
            skipped += s.skipped;
            sr_loss = s.loss;
            outcome_sr.push(s.loss);
        }
        let total = combined_loss(ce.loss, sr_loss, cfg.loss.alpha);
        if !total.is_finite() {
            return Err(Error::Divergence {
                context: ctx(),
                loss: total,
            });
        }
        outcome_ce.push(ce.loss);
        sgd_step(tuned.params_mut().chain([&mut head.weights]), &cfg.sgd);
    }
    Ok(FinetuneOutcome {
        model: FittedModel { backbone: tuned, head },
        ce_trajectory: outcome_ce,
        sr_trajectory: outcome_sr,
        sr_skipped: skipped,
        sr_audit: audit,
    })
}
