//! Pretraining, per-episode fine-tuning, ensembles and benchmark runs.

mod bench;
mod evaluate;
mod finetune;
mod gradcheck;
mod pretrain;
mod results;

pub use bench::{run_benchmark, run_ensemble_episode, BenchContext, EnsembleOutcome, RunResults, Variant, VariantSpec};
pub use evaluate::{
    argmax, average_probabilities, evaluate_episode, evaluate_episode_detailed, member_probabilities, EpisodeEval,
};
pub use finetune::{
    finetune_episode, FeatureBank, FinetuneConfig, FinetuneOutcome, FinetuneStreams, FittedModel, SrSampler, SrSource,
};
pub use gradcheck::{CaseShape, GradCase, Objective, KINK_MARGIN};
pub use pretrain::{base_accuracy, classification_accuracy, pretrain, PretrainConfig, Pretrained};
pub use results::{
    parse_results_csv, read_run_files, results_csv, run_stem, write_run_files, LoadedRun, RunSidecar, SIDECAR_FORMAT,
};
