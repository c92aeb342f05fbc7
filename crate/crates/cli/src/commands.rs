//! The four subcommands. Each returns what it wrote; printing is left to the
//! caller.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fewshot_core::data::{
    encode_dataset, generate_synthetic, import_csv, load_dataset, presample_episodes, read_episode_file, split_dataset,
    write_episode_file, DatasetStore, Split, SrPool,
};
use fewshot_core::io::{file_sha256, sha256_hex, write_atomic};
use fewshot_core::metrics::{
    aggregate_pooled, aggregate_runs, histogram_export, render_table, MetricsReport, SortKey, DEFAULT_WORST_KS,
};
use fewshot_core::model::{load_checkpoint, save_checkpoint, Checkpoint};
use fewshot_core::trainer::{
    base_accuracy, pretrain, read_run_files, run_benchmark, write_run_files, BenchContext, LoadedRun, Variant,
};

use crate::config::{ExperimentConfig, Seeds};
use crate::error::CliError;

pub const MANIFEST_FORMAT: &str = "fewshot-manifest";
pub const REPORT_FORMAT: &str = "fewshot-report";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Provenance record written next to every checkpoint and episode file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub kind: String,
    /// File name of the artifact, relative to the manifest.
    pub artifact: String,
    pub sha256: String,
    pub config_hash: String,
    pub seeds: Seeds,
    pub dataset_fingerprint: String,
    pub details: serde_json::Value,
    pub config: serde_json::Value,
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(fewshot_core::Error::from)?;
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

fn read_manifest(path: &Path) -> Result<Option<Manifest>, CliError> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    if m.format != MANIFEST_FORMAT {
        return Err(CliError::data(format!("{} is not a manifest", path.display())));
    }
    Ok(Some(m))
}

fn write_manifest(
    cfg: &ExperimentConfig,
    artifact: &Path,
    kind: &str,
    sha256: &str,
    fingerprint: &str,
    details: serde_json::Value,
) -> Result<PathBuf, CliError> {
    let m = Manifest {
        format: MANIFEST_FORMAT.into(),
        kind: kind.into(),
        artifact: artifact.file_name().unwrap_or_default().to_string_lossy().into_owned(),
        sha256: sha256.into(),
        config_hash: cfg.hash(),
        seeds: cfg.seeds(),
        dataset_fingerprint: fingerprint.into(),
        details,
        config: cfg.snapshot(),
    };
    let path = manifest_path(artifact);
    write_json(&path, &m)?;
    Ok(path)
}

/// The split dataset an experiment runs on, with a hash of its exact content.
pub struct Dataset {
    pub store: DatasetStore,
    pub fingerprint: String,
}

fn read_store(path: &Path) -> Result<DatasetStore, CliError> {
    let store = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        import_csv(path)
    } else {
        load_dataset(path)
    };
    store.map_err(|e| CliError::data(format!("cannot load dataset {}: {e}", path.display())))
}

pub fn load_dataset_for(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    let seeds = cfg.seeds();
    let raw = if !cfg.dataset_path.is_empty() {
        read_store(Path::new(&cfg.dataset_path))?
    } else if cfg.dataset_synthetic {
        generate_synthetic(&cfg.synthetic(), seeds.dataset)?
    } else {
        return Err(CliError::data(
            "no dataset: set dataset.path to a dataset file or enable dataset.synthetic = true",
        ));
    };
    let store = split_dataset(raw, cfg.split_base, cfg.split_val, cfg.split_novel, seeds.split)?;
    let mut bytes = encode_dataset(&store);
    for c in 0..store.n_classes() {
        bytes.push(match store.split_of(c) {
            Some(Split::Base) => b'b',
            Some(Split::Validation) => b'v',
            Some(Split::Novel) => b'n',
            None => b'-',
        });
    }
    Ok(Dataset {
        fingerprint: sha256_hex(&bytes),
        store,
    })
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    PathBuf::from(&cfg.out_dir)
}

pub fn default_checkpoint(cfg: &ExperimentConfig) -> PathBuf {
    out_dir(cfg).join(CHECKPOINT_FILE)
}

pub fn default_episode_file(cfg: &ExperimentConfig) -> PathBuf {
    out_dir(cfg).join(format!("episodes-{}w{}s{}q.jsonl", cfg.n_way, cfg.k_shot, cfg.n_query))
}

#[derive(Debug)]
pub struct PretrainOutput {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub sha256: String,
    pub base_accuracy: f64,
    pub final_loss: f64,
}

pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<PretrainOutput, CliError> {
    let data = load_dataset_for(cfg)?;
    let seeds = cfg.seeds();
    let pre = pretrain(
        &data.store,
        &cfg.backbone(data.store.input_dim()),
        &cfg.pretrain(),
        seeds.pretrain,
    )?;
    let acc = base_accuracy(&data.store, &pre)?;
    let path = default_checkpoint(cfg);
    save_checkpoint(
        &path,
        &Checkpoint {
            seed: seeds.pretrain,
            backbone: pre.backbone,
            head: None,
        },
    )?;
    let sha = file_sha256(&path)?;
    let details = serde_json::json!({ "base_accuracy": acc, "final_loss": pre.final_loss });
    let manifest = write_manifest(cfg, &path, "checkpoint", &sha, &data.fingerprint, details)?;
    Ok(PretrainOutput {
        checkpoint: path,
        manifest,
        sha256: sha,
        base_accuracy: acc,
        final_loss: pre.final_loss,
    })
}

#[derive(Debug)]
pub struct EpisodesOutput {
    pub path: PathBuf,
    pub manifest: PathBuf,
    pub sha256: String,
    pub count: usize,
}

pub fn cmd_episodes(cfg: &ExperimentConfig, path: Option<&Path>) -> Result<EpisodesOutput, CliError> {
    if cfg.n_episodes == 0 {
        return Err(CliError::usage("episodes.count must be at least 1"));
    }
    let data = load_dataset_for(cfg)?;
    let episodes = presample_episodes(
        &data.store,
        cfg.n_episodes,
        cfg.n_way,
        cfg.k_shot,
        cfg.n_query,
        cfg.seeds().episodes,
    )?;
    let path = path.map_or_else(|| default_episode_file(cfg), Path::to_path_buf);
    let sha = write_episode_file(&path, &episodes)?;
    let details = serde_json::json!({
        "count": episodes.len(),
        "n_way": cfg.n_way,
        "k_shot": cfg.k_shot,
        "n_query": cfg.n_query,
    });
    let manifest = write_manifest(cfg, &path, "episodes", &sha, &data.fingerprint, details)?;
    Ok(EpisodesOutput {
        path,
        manifest,
        sha256: sha,
        count: episodes.len(),
    })
}

#[derive(Debug, Default, Clone)]
pub struct BenchOptions {
    pub checkpoint: Option<PathBuf>,
    pub episodes: Option<PathBuf>,
    /// Accept an episode file whose hash differs from the expected one.
    pub allow_episode_mismatch: bool,
}

#[derive(Debug)]
pub struct BenchOutput {
    pub files: Vec<(PathBuf, PathBuf)>,
    pub episode_hash: String,
    /// Non-fatal findings, such as a missing manifest.
    pub notes: Vec<String>,
}

fn fairness(message: String, allowed: bool, notes: &mut Vec<String>) -> Result<(), CliError> {
    if allowed {
        notes.push(format!("override: {message}"));
        Ok(())
    } else {
        Err(fewshot_core::Error::Fairness(message).into())
    }
}

pub fn cmd_bench(cfg: &ExperimentConfig, opts: &BenchOptions) -> Result<BenchOutput, CliError> {
    let mut notes = Vec::new();
    let data = load_dataset_for(cfg)?;

    let ckpt_path = opts.checkpoint.clone().unwrap_or_else(|| default_checkpoint(cfg));
    let checkpoint = load_checkpoint(&ckpt_path)?;
    let ckpt_sha = file_sha256(&ckpt_path)?;
    match read_manifest(&manifest_path(&ckpt_path))? {
        Some(m) => {
            if m.sha256 != ckpt_sha {
                return Err(CliError::data(format!(
                    "{} changed since its manifest was written",
                    ckpt_path.display()
                )));
            }
            if m.dataset_fingerprint != data.fingerprint {
                return Err(CliError::data(format!(
                    "{} was pretrained on a different dataset or split",
                    ckpt_path.display()
                )));
            }
        }
        None => notes.push(format!("no manifest for {}", ckpt_path.display())),
    }

    let ep_path = opts.episodes.clone().unwrap_or_else(|| default_episode_file(cfg));
    let episodes = read_episode_file(&ep_path)?;
    let manifest = read_manifest(&manifest_path(&ep_path))?;
    let expected = if !cfg.episodes_sha256.is_empty() {
        Some(cfg.episodes_sha256.clone())
    } else {
        manifest.as_ref().map(|m| m.sha256.clone())
    };
    match expected {
        Some(h) if h != episodes.sha256 => fairness(
            format!(
                "episode file {} has hash {}, expected {h}",
                ep_path.display(),
                episodes.sha256
            ),
            opts.allow_episode_mismatch,
            &mut notes,
        )?,
        Some(_) => {}
        None => notes.push(format!("no expected hash for {}", ep_path.display())),
    }
    if let Some(m) = &manifest {
        if m.dataset_fingerprint != data.fingerprint {
            fairness(
                format!(
                    "episode file {} was sampled from a different dataset",
                    ep_path.display()
                ),
                opts.allow_episode_mismatch,
                &mut notes,
            )?;
        }
    }
    if let Some(ep) = episodes.episodes.first() {
        if (ep.n_way(), ep.k_shot(), ep.n_query()) != (cfg.n_way, cfg.k_shot, cfg.n_query) {
            return Err(CliError::data(format!(
                "episode file is {}-way {}-shot {}-query, config says {}-way {}-shot {}-query",
                ep.n_way(),
                ep.k_shot(),
                ep.n_query(),
                cfg.n_way,
                cfg.k_shot,
                cfg.n_query
            )));
        }
    }

    let pool = if cfg.sr_pool.is_empty() {
        None
    } else {
        let path = Path::new(&cfg.sr_pool);
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        Some(SrPool::from_store(&read_store(path)?, name)?)
    };
    let ctx = BenchContext::new(&data.store, &checkpoint.backbone, pool.as_ref())?;
    let runs = run_benchmark(
        &ctx,
        &episodes,
        cfg.variant_spec(),
        &cfg.finetune(),
        cfg.n_runs,
        cfg.seed,
        cfg.parallel,
    )?;
    let sidecar_config = serde_json::json!({
        "settings": cfg.snapshot(),
        "seeds": cfg.seeds(),
        "checkpoint_sha256": ckpt_sha,
        "dataset_fingerprint": data.fingerprint,
        "episode_file": ep_path.file_name().unwrap_or_default().to_string_lossy(),
    });
    let hash = cfg.hash();
    let files = runs
        .iter()
        .map(|r| write_run_files(&out_dir(cfg), r, &sidecar_config, &hash))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BenchOutput {
        files,
        episode_hash: episodes.sha256,
        notes,
    })
}

#[derive(Debug, Clone)]
pub struct ReportOptions {
    pub out: PathBuf,
    pub sort: SortKey,
    /// Pool all runs into one sample instead of averaging per-run metrics.
    pub pooled: bool,
    pub bins: usize,
    /// Compare methods evaluated on different episode files.
    pub allow_mixed_episodes: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            out: PathBuf::from("report"),
            sort: SortKey::WorstCase,
            pooled: false,
            bins: 20,
            allow_mixed_episodes: false,
        }
    }
}

#[derive(Debug, Serialize)]
struct RunRef {
    file: String,
    run_id: u64,
    master_seed: u64,
}

#[derive(Debug, Serialize)]
struct MethodReport {
    label: String,
    variant: Variant,
    ensemble_m: usize,
    config_hash: String,
    episode_file_hash: String,
    runs: Vec<RunRef>,
    metrics: MetricsReport,
    histogram_file: String,
}

#[derive(Debug, Serialize)]
struct ReportFile {
    format: String,
    aggregation: String,
    sort: String,
    histogram_bins: usize,
    episode_file_hashes: Vec<String>,
    methods: Vec<MethodReport>,
}

#[derive(Debug)]
pub struct ReportOutput {
    pub table: String,
    pub json: PathBuf,
    pub text: PathBuf,
    pub histograms: Vec<PathBuf>,
    pub notes: Vec<String>,
}

/// Sidecar paths named by `inputs`: files directly, directories by every
/// run sidecar inside them.
fn collect_runs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut found = BTreeSet::new();
    for p in inputs {
        if p.is_dir() {
            let entries = fs::read_dir(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
            for entry in entries {
                let path = entry.map_err(|e| CliError::data(e.to_string()))?.path();
                if path.extension().is_some_and(|e| e == "json") && path.with_extension("csv").exists() {
                    found.insert(path);
                }
            }
        } else if p.exists() {
            found.insert(p.with_extension("json"));
        } else {
            return Err(CliError::data(format!("no such results file: {}", p.display())));
        }
    }
    if found.is_empty() {
        return Err(CliError::usage("report needs at least one results file"));
    }
    Ok(found.into_iter().collect())
}

fn method_label(variant: Variant, m: usize) -> String {
    match variant {
        Variant::AcEnsr => format!("{variant}-m{m}"),
        _ => variant.to_string(),
    }
}

pub fn cmd_report(inputs: &[PathBuf], opts: &ReportOptions) -> Result<ReportOutput, CliError> {
    if opts.bins == 0 {
        return Err(CliError::usage("histogram needs at least one bin"));
    }
    let mut notes = Vec::new();
    // (variant, m, config hash) -> runs
    let mut groups: BTreeMap<(String, String), Vec<(String, LoadedRun)>> = BTreeMap::new();
    for path in collect_runs(inputs)? {
        let run = read_run_files(&path)?;
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let label = method_label(run.sidecar.variant, run.sidecar.ensemble_m);
        groups
            .entry((label, run.sidecar.config_hash.clone()))
            .or_default()
            .push((name, run));
    }
    let hashes: BTreeSet<String> = groups
        .values()
        .flatten()
        .map(|(_, r)| r.sidecar.episode_file_hash.clone())
        .collect();
    if hashes.len() > 1 {
        let message = format!("results come from {} different episode files", hashes.len());
        fairness(message, opts.allow_mixed_episodes, &mut notes)?;
    }
    let mut per_label: BTreeMap<&str, usize> = BTreeMap::new();
    for (label, _) in groups.keys() {
        *per_label.entry(label).or_default() += 1;
    }
    let ambiguous: BTreeSet<String> = per_label
        .into_iter()
        .filter(|&(_, n)| n > 1)
        .map(|(l, _)| l.to_string())
        .collect();

    let mut methods = Vec::new();
    let mut rows = Vec::new();
    let mut histograms = Vec::new();
    for ((label, config_hash), runs) in &groups {
        let label = if ambiguous.contains(label) {
            format!("{label}@{}", &config_hash[..config_hash.len().min(8)])
        } else {
            label.clone()
        };
        let mut seen = BTreeSet::new();
        for (name, r) in runs {
            if !seen.insert((r.sidecar.master_seed, r.sidecar.run_id)) {
                return Err(CliError::data(format!(
                    "{label}: run {} given twice ({name})",
                    r.sidecar.run_id
                )));
            }
        }
        let ep_hashes: BTreeSet<&str> = runs.iter().map(|(_, r)| r.sidecar.episode_file_hash.as_str()).collect();
        let samples: Vec<Vec<f64>> = runs.iter().map(|(_, r)| r.accuracies.clone()).collect();
        let metrics = if opts.pooled {
            aggregate_pooled(&samples, &DEFAULT_WORST_KS)?
        } else {
            let per_run = samples
                .iter()
                .map(|s| MetricsReport::from_sample(s, &DEFAULT_WORST_KS))
                .collect::<Result<Vec<_>, _>>()?;
            aggregate_runs(&per_run)?
        };
        let pooled: Vec<f64> = samples.concat();
        let hist_name = format!("hist-{}.csv", label.replace(['@', '/'], "-"));
        let hist_path = opts.out.join(&hist_name);
        write_atomic(&hist_path, histogram_export(&pooled, opts.bins)?.to_csv().as_bytes())?;
        histograms.push(hist_path);
        let first = &runs[0].1.sidecar;
        methods.push(MethodReport {
            label: label.clone(),
            variant: first.variant,
            ensemble_m: first.ensemble_m,
            config_hash: config_hash.clone(),
            episode_file_hash: ep_hashes.into_iter().collect::<Vec<_>>().join(","),
            runs: runs
                .iter()
                .map(|(name, r)| RunRef {
                    file: name.clone(),
                    run_id: r.sidecar.run_id,
                    master_seed: r.sidecar.master_seed,
                })
                .collect(),
            metrics: metrics.clone(),
            histogram_file: hist_name,
        });
        rows.push((label, metrics));
    }
    let table = render_table(&rows, opts.sort);
    let order: Vec<&str> = table
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().next().unwrap_or(""))
        .collect();
    methods.sort_by_key(|m| order.iter().position(|l| *l == m.label));
    let report = ReportFile {
        format: REPORT_FORMAT.into(),
        aggregation: if opts.pooled { "pooled" } else { "per-run-mean" }.into(),
        sort: match opts.sort {
            SortKey::WorstCase => "acc1",
            SortKey::Mean => "mean",
        }
        .into(),
        histogram_bins: opts.bins,
        episode_file_hashes: hashes.into_iter().collect(),
        methods,
    };
    let json = opts.out.join("report.json");
    write_json(&json, &report)?;
    let text = opts.out.join("report.txt");
    write_atomic(&text, table.as_bytes())?;
    Ok(ReportOutput {
        table,
        json,
        text,
        histograms,
        notes,
    })
}
