//! Per-run result files: `episode_id,accuracy` CSV plus a JSON sidecar.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bench::{RunResults, Variant};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const SIDECAR_FORMAT: &str = "fewshot-run";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSidecar {
    pub format: String,
    pub variant: Variant,
    pub ensemble_m: usize,
    pub run_id: u64,
    pub n_episodes: usize,
    pub episode_file_hash: String,
    pub master_seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub degenerate_queries: usize,
    pub sr_skipped: usize,
}

pub fn results_csv(run: &RunResults) -> String {
    let mut out = String::from("episode_id,accuracy\n");
    for (id, acc) in run.episode_ids.iter().zip(&run.per_episode_accuracy) {
        let _ = writeln!(out, "{id},{acc}");
    }
    out
}

pub fn parse_results_csv(text: &str) -> Result<Vec<(u64, f64)>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("episode_id,accuracy") => {}
        other => {
            return Err(Error::Format(format!(
                "results CSV must start with `episode_id,accuracy`, got {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Format(format!("results CSV line {}: {line:?}", i + 2));
        let (id, acc) = line.split_once(',').ok_or_else(bad)?;
        let id: u64 = id.trim().parse().map_err(|_| bad())?;
        let acc: f64 = acc.trim().parse().map_err(|_| bad())?;
        if !(0.0..=1.0).contains(&acc) {
            return Err(bad());
        }
        rows.push((id, acc));
    }
    Ok(rows)
}

/// File stem for one run, e.g. `ac-sr_run0`.
pub fn run_stem(variant: Variant, run_id: u64) -> String {
    format!("{variant}_run{run_id}")
}

/// Writes `<dir>/<variant>_run<r>.csv` and its `.json` sidecar.
pub fn write_run_files(
    dir: &Path,
    run: &RunResults,
    config: &serde_json::Value,
    config_hash: &str,
) -> Result<(PathBuf, PathBuf)> {
    let stem = run_stem(run.variant, run.run_id);
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    let sidecar = RunSidecar {
        format: SIDECAR_FORMAT.to_string(),
        variant: run.variant,
        ensemble_m: run.ensemble_m,
        run_id: run.run_id,
        n_episodes: run.per_episode_accuracy.len(),
        episode_file_hash: run.episode_file_hash.clone(),
        master_seed: run.master_seed,
        config_hash: config_hash.to_string(),
        config: config.clone(),
        degenerate_queries: run.degenerate_queries,
        sr_skipped: run.sr_skipped,
    };
    let mut json = serde_json::to_string_pretty(&sidecar)?;
    json.push('\n');
    write_atomic(&csv_path, results_csv(run).as_bytes())?;
    write_atomic(&json_path, json.as_bytes())?;
    Ok((csv_path, json_path))
}

/// A results CSV with its sidecar.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub sidecar: RunSidecar,
    pub episode_ids: Vec<u64>,
    pub accuracies: Vec<f64>,
}

/// Reads a run from either its `.csv` or its `.json` path.
pub fn read_run_files(path: &Path) -> Result<LoadedRun> {
    let csv_path = path.with_extension("csv");
    let json_path = path.with_extension("json");
    let csv = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let json = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let sidecar: RunSidecar =
        serde_json::from_str(&json).map_err(|e| Error::Format(format!("{}: {e}", json_path.display())))?;
    if sidecar.format != SIDECAR_FORMAT {
        return Err(Error::Format(format!("{} is not a run sidecar", json_path.display())));
    }
    let rows = parse_results_csv(&csv).map_err(|e| e.context(csv_path.display().to_string()))?;
    if rows.len() != sidecar.n_episodes {
        return Err(Error::Format(format!(
            "{} has {} rows, sidecar declares {}",
            csv_path.display(),
            rows.len(),
            sidecar.n_episodes
        )));
    }
    let (episode_ids, accuracies) = rows.into_iter().unzip();
    Ok(LoadedRun {
        sidecar,
        episode_ids,
        accuracies,
    })
}
