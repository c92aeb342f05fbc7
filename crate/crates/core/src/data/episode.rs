use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::store::{DatasetStore, Split};
use crate::error::{Error, Result};
use crate::io::{sha256_hex, write_atomic};
use crate::rng;

/// One N-way K-shot Q-query draw. `support[i]` and `query[i]` hold sample
/// indices of `classes[i]`; the episode-local label of `classes[i]` is `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub episode_id: u64,
    pub classes: Vec<usize>,
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
}

impl EpisodeSpec {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    pub fn k_shot(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }

    pub fn n_query(&self) -> usize {
        self.query.first().map_or(0, Vec::len)
    }

    /// Support indices with their episode-local labels, class-major.
    pub fn support_set(&self) -> (Vec<usize>, Vec<usize>) {
        flatten(&self.support)
    }

    /// Query indices with their episode-local labels, class-major.
    pub fn query_set(&self) -> (Vec<usize>, Vec<usize>) {
        flatten(&self.query)
    }

    /// Checks shape, disjointness and class membership against `store`.
    pub fn validate(&self, store: &DatasetStore) -> Result<()> {
        let id = self.episode_id;
        let n = self.n_way();
        if n == 0 || self.support.len() != n || self.query.len() != n {
            return Err(Error::Format(format!(
                "episode {id}: {} classes, {} support groups, {} query groups",
                n,
                self.support.len(),
                self.query.len()
            )));
        }
        let (k, q) = (self.k_shot(), self.n_query());
        for (i, &c) in self.classes.iter().enumerate() {
            if c >= store.n_classes() {
                return Err(Error::Format(format!("episode {id}: class {c} not in store")));
            }
            if store.is_split() && store.split_of(c) != Some(Split::Novel) {
                return Err(Error::Format(format!("episode {id}: class {c} is not a novel class")));
            }
            if self.classes[..i].contains(&c) {
                return Err(Error::Format(format!("episode {id}: class {c} listed twice")));
            }
            if self.support[i].len() != k || self.query[i].len() != q {
                return Err(Error::Format(format!(
                    "episode {id}: ragged support/query for class {c}"
                )));
            }
            for &s in self.support[i].iter().chain(&self.query[i]) {
                if s >= store.n_samples() || store.labels()[s] != c {
                    return Err(Error::Format(format!(
                        "episode {id}: sample {s} does not belong to class {c}"
                    )));
                }
            }
            let mut all: Vec<usize> = self.support[i].iter().chain(&self.query[i]).copied().collect();
            all.sort_unstable();
            if all.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Format(format!(
                    "episode {id}: support and query overlap or repeat for class {c}"
                )));
            }
        }
        Ok(())
    }
}

fn flatten(groups: &[Vec<usize>]) -> (Vec<usize>, Vec<usize>) {
    let mut idx = Vec::new();
    let mut labels = Vec::new();
    for (label, g) in groups.iter().enumerate() {
        idx.extend_from_slice(g);
        labels.extend(std::iter::repeat(label).take(g.len()));
    }
    (idx, labels)
}

/// Draws `n_way` novel classes without replacement, then `k_shot + n_query`
/// distinct samples per class: the first `k_shot` are support.
pub fn sample_episode<R: Rng>(
    store: &DatasetStore,
    episode_id: u64,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    rng: &mut R,
) -> Result<EpisodeSpec> {
    if n_way == 0 || k_shot == 0 || n_query == 0 {
        return Err(Error::InvalidArgument(format!(
            "N, K and Q must be positive, got {n_way}/{k_shot}/{n_query}"
        )));
    }
    let novel = store.classes_in(Split::Novel);
    if novel.len() < n_way {
        return Err(Error::Capacity(format!(
            "{n_way}-way episodes need {n_way} novel classes, only {} available",
            novel.len()
        )));
    }
    let need = k_shot + n_query;
    if let Some(&c) = novel.iter().find(|&&c| store.samples_of_class(c).len() < need) {
        return Err(Error::Capacity(format!(
            "class {c} has {} samples, {k_shot}-shot {n_query}-query needs {need}",
            store.samples_of_class(c).len()
        )));
    }
    let picked = index::sample(rng, novel.len(), n_way);
    let mut classes = Vec::with_capacity(n_way);
    let mut support = Vec::with_capacity(n_way);
    let mut query = Vec::with_capacity(n_way);
    for pos in picked.iter() {
        let c = novel[pos];
        let pool = store.samples_of_class(c);
        let chosen: Vec<usize> = index::sample(rng, pool.len(), need).iter().map(|i| pool[i]).collect();
        classes.push(c);
        support.push(chosen[..k_shot].to_vec());
        query.push(chosen[k_shot..].to_vec());
    }
    Ok(EpisodeSpec {
        episode_id,
        classes,
        support,
        query,
    })
}

/// Samples `n_episodes` episodes, episode `e` from stream `(seed, "episode", e)`.
pub fn presample_episodes(
    store: &DatasetStore,
    n_episodes: usize,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    seed: u64,
) -> Result<Vec<EpisodeSpec>> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("episode count must be positive".into()));
    }
    (0..n_episodes as u64)
        .map(|e| {
            let mut r = rng::stream(seed, "episode", &[e]);
            sample_episode(store, e, n_way, k_shot, n_query, &mut r)
        })
        .collect()
}

/// One JSON object per line.
pub fn encode_episodes(episodes: &[EpisodeSpec]) -> Result<String> {
    let mut out = String::new();
    for ep in episodes {
        out.push_str(&serde_json::to_string(ep)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn decode_episodes(text: &str) -> Result<Vec<EpisodeSpec>> {
    let mut offset = 0;
    let mut episodes = Vec::new();
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let ep: EpisodeSpec = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
                offset,
                message: format!("episode record: {e}"),
            })?;
            episodes.push(ep);
        }
        offset += line.len();
    }
    Ok(episodes)
}

/// Writes the episode file and returns its SHA-256.
pub fn write_episode_file(path: &Path, episodes: &[EpisodeSpec]) -> Result<String> {
    let text = encode_episodes(episodes)?;
    write_atomic(path, text.as_bytes())?;
    Ok(sha256_hex(text.as_bytes()))
}

/// Episode file contents with the hash of the exact bytes read.
#[derive(Debug, Clone)]
pub struct EpisodeFile {
    pub episodes: Vec<EpisodeSpec>,
    pub sha256: String,
}

pub fn read_episode_file(path: &Path) -> Result<EpisodeFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Format(format!("{} is not UTF-8: {e}", path.display())))?;
    let episodes = decode_episodes(&text).map_err(|e| e.context(format!("reading {}", path.display())))?;
    Ok(EpisodeFile {
        sha256: sha256_hex(text.as_bytes()),
        episodes,
    })
}
