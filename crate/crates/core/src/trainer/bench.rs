use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BasePartition, DatasetStore, EpisodeFile, EpisodeSpec, SrPool};
use crate::error::{Error, Result};
use crate::model::{AdaptabilityLevel, BackboneModel};
use crate::rng;

use super::evaluate::evaluate_episode_detailed;
use super::finetune::{
    finetune_episode, FeatureBank, FinetuneConfig, FinetuneOutcome, FinetuneStreams, FittedModel, SrSampler,
};

/// Fine-tuning variants of the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Whole backbone and head learnable, no stability term.
    Plain,
    /// Adaptability calibration only.
    Ac,
    /// Calibration plus stability regularization.
    AcSr,
    /// Calibration plus an ensemble of SR models over disjoint base subsets.
    AcEnsr,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Ac => "ac",
            Variant::AcSr => "ac-sr",
            Variant::AcEnsr => "ac-ensr",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Variant::Plain),
            "ac" => Ok(Variant::Ac),
            "ac-sr" => Ok(Variant::AcSr),
            "ac-ensr" => Ok(Variant::AcEnsr),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant {other:?} (expected plain, ac, ac-sr or ac-ensr)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub variant: Variant,
    /// Ensemble size, used by [`Variant::AcEnsr`] only.
    pub ensemble_m: usize,
    /// All members start from member 0's head initialization instead of
    /// each drawing its own.
    #[serde(default)]
    pub shared_head_init: bool,
}

impl VariantSpec {
    pub fn new(variant: Variant) -> Self {
        VariantSpec {
            variant,
            ensemble_m: 4,
            shared_head_init: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ensemble_m == 0 {
            return Err(Error::InvalidArgument("ensemble_m must be >= 1".into()));
        }
        Ok(())
    }

    /// The fine-tuning settings this variant implies on top of `base`.
    pub fn finetune_config(&self, base: &FinetuneConfig, groups: usize) -> FinetuneConfig {
        let mut cfg = base.clone();
        match self.variant {
            Variant::Plain => {
                cfg.adaptability = AdaptabilityLevel(groups);
                cfg.sr_enabled = false;
            }
            Variant::Ac => cfg.sr_enabled = false,
            Variant::AcSr | Variant::AcEnsr => cfg.sr_enabled = true,
        }
        cfg
    }

    pub fn members(&self) -> usize {
        match self.variant {
            Variant::AcEnsr => self.ensemble_m,
            _ => 1,
        }
    }
}

/// Per-episode accuracies of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub run_id: u64,
    pub variant: Variant,
    pub ensemble_m: usize,
    pub episode_ids: Vec<u64>,
    pub per_episode_accuracy: Vec<f64>,
    pub episode_file_hash: String,
    pub master_seed: u64,
    /// Zero-norm query features met during evaluation.
    pub degenerate_queries: usize,
    /// SR rows skipped for zero-norm features.
    pub sr_skipped: usize,
}

/// Everything shared by all episodes of a benchmark.
pub struct BenchContext<'a> {
    pub store: &'a DatasetStore,
    pub pretrained: &'a BackboneModel,
    /// Reference activations of the SR source.
    pub bank: FeatureBank,
}

impl<'a> BenchContext<'a> {
    /// SR batches come from `pool` when given, otherwise from the base split.
    pub fn new(store: &'a DatasetStore, pretrained: &'a BackboneModel, pool: Option<&SrPool>) -> Result<Self> {
        store.check_trainable()?;
        if pretrained.config().input_dim != store.input_dim() {
            return Err(Error::Dimension(format!(
                "checkpoint expects input dim {}, dataset has {}",
                pretrained.config().input_dim,
                store.input_dim()
            )));
        }
        let bank = match pool {
            Some(p) => FeatureBank::from_pool(pretrained, p)?,
            None => FeatureBank::base(pretrained, store)?,
        };
        Ok(BenchContext {
            store,
            pretrained,
            bank,
        })
    }

    /// Splits the SR source into `m` disjoint subsets, seeded per run.
    pub fn partition(&self, m: usize, seed: u64, run: u64) -> Result<BasePartition> {
        let part_seed = rng::derive_seed(seed, "ensemble-partition", &[run]);
        crate::data::partition_indices(self.bank.sample_ids(), m, part_seed)
    }

    fn partition_rows(&self, partition: &BasePartition) -> Result<Vec<Vec<usize>>> {
        partition
            .subsets
            .iter()
            .map(|s| {
                s.iter()
                    .map(|&id| {
                        self.bank
                            .row_of(id)
                            .ok_or_else(|| Error::Format(format!("partition sample {id} is not in the SR source")))
                    })
                    .collect()
            })
            .collect()
    }
}

/// Result of fine-tuning and scoring an ensemble on one episode.
#[derive(Debug, Clone)]
pub struct EnsembleOutcome {
    pub accuracy: f64,
    pub members: Vec<FinetuneOutcome>,
    pub degenerate_queries: usize,
}

/// Trains one member per partition subset, each drawing SR batches only from
/// its own subset with its own streams, then averages their probabilities.
#[allow(clippy::too_many_arguments)]
pub fn run_ensemble_episode(
    ctx: &BenchContext<'_>,
    episode: &EpisodeSpec,
    cfg: &FinetuneConfig,
    partition: &BasePartition,
    shared_head_init: bool,
    seed: u64,
    run: u64,
) -> Result<EnsembleOutcome> {
    if !cfg.sr_enabled {
        return Err(Error::InvalidArgument("ensemble members always use SR".into()));
    }
    partition.check(ctx.bank.sample_ids())?;
    let rows = ctx.partition_rows(partition)?;
    let mut members = Vec::with_capacity(rows.len());
    for (m, subset) in rows.iter().enumerate() {
        let sampler = SrSampler {
            bank: &ctx.bank,
            rows: Some(subset),
        };
        let mut streams = FinetuneStreams::keyed(seed, run, episode.episode_id, m as u64);
        if shared_head_init {
            streams.head_init = FinetuneStreams::keyed(seed, run, episode.episode_id, 0).head_init;
        }
        let out = finetune_episode(ctx.pretrained, episode, ctx.store, cfg, Some(sampler), &mut streams)
            .map_err(|e| e.context(format!("ensemble member {m}")))?;
        members.push(out);
    }
    let fitted: Vec<FittedModel> = members.iter().map(|o| o.model.clone()).collect();
    let eval = evaluate_episode_detailed(&fitted, episode, ctx.store)?;
    Ok(EnsembleOutcome {
        accuracy: eval.accuracy,
        members,
        degenerate_queries: eval.degenerate_queries,
    })
}

struct EpisodeScore {
    accuracy: f64,
    degenerate: usize,
    skipped: usize,
}

fn score_episode(
    ctx: &BenchContext<'_>,
    episode: &EpisodeSpec,
    variant: &VariantSpec,
    cfg: &FinetuneConfig,
    partition: Option<&BasePartition>,
    seed: u64,
    run: u64,
) -> Result<EpisodeScore> {
    match partition {
        Some(p) => {
            let out = run_ensemble_episode(ctx, episode, cfg, p, variant.shared_head_init, seed, run)?;
            Ok(EpisodeScore {
                accuracy: out.accuracy,
                degenerate: out.degenerate_queries,
                skipped: out.members.iter().map(|m| m.sr_skipped).sum(),
            })
        }
        None => {
            debug_assert_eq!(variant.members(), 1);
            let sampler = cfg.sr_enabled.then(|| SrSampler::whole(&ctx.bank));
            let mut streams = FinetuneStreams::keyed(seed, run, episode.episode_id, 0);
            let out = finetune_episode(ctx.pretrained, episode, ctx.store, cfg, sampler, &mut streams)?;
            let eval = evaluate_episode_detailed(std::slice::from_ref(&out.model), episode, ctx.store)?;
            Ok(EpisodeScore {
                accuracy: eval.accuracy,
                degenerate: eval.degenerate_queries,
                skipped: out.sr_skipped,
            })
        }
    }
}

/// Runs `n_runs` passes of fine-tune-then-evaluate over the pre-sampled
/// episodes. Run `r`, episode `e`, member `m` draws from streams keyed by
/// `(seed, r, e, m)`, so `parallel` does not change any result.
pub fn run_benchmark(
    ctx: &BenchContext<'_>,
    episodes: &EpisodeFile,
    variant: VariantSpec,
    base_cfg: &FinetuneConfig,
    n_runs: usize,
    seed: u64,
    parallel: bool,
) -> Result<Vec<RunResults>> {
    variant.validate()?;
    if n_runs == 0 {
        return Err(Error::InvalidArgument("n_runs must be >= 1".into()));
    }
    if episodes.episodes.is_empty() {
        return Err(Error::InvalidArgument("episode file is empty".into()));
    }
    for ep in &episodes.episodes {
        ep.validate(ctx.store)?;
    }
    let cfg = variant.finetune_config(base_cfg, ctx.pretrained.num_groups());
    cfg.validate()?;
    let mut results = Vec::with_capacity(n_runs);
    for run in 0..n_runs as u64 {
        let partition = match variant.variant {
            Variant::AcEnsr => Some(ctx.partition(variant.ensemble_m, seed, run)?),
            _ => None,
        };
        let job = |ep: &EpisodeSpec| {
            score_episode(ctx, ep, &variant, &cfg, partition.as_ref(), seed, run)
                .map_err(|e| e.context(format!("run {run}, episode {}", ep.episode_id)))
        };
        let scores: Vec<EpisodeScore> = if parallel {
            episodes.episodes.par_iter().map(job).collect::<Result<_>>()?
        } else {
            episodes.episodes.iter().map(job).collect::<Result<_>>()?
        };
        results.push(RunResults {
            run_id: run,
            variant: variant.variant,
            ensemble_m: variant.members(),
            episode_ids: episodes.episodes.iter().map(|e| e.episode_id).collect(),
            per_episode_accuracy: scores.iter().map(|s| s.accuracy).collect(),
            episode_file_hash: episodes.sha256.clone(),
            master_seed: seed,
            degenerate_queries: scores.iter().map(|s| s.degenerate).sum(),
            sr_skipped: scores.iter().map(|s| s.skipped).sum(),
        });
    }
    Ok(results)
}
