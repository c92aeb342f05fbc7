use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::numcore::{norm, Tensor};
use crate::rng;

pub const DATASET_MAGIC: &[u8; 8] = b"FSHOTDS\0";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Validation,
    Novel,
}

/// Labeled feature vectors with an optional class-level split.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStore {
    features: Tensor,
    labels: Vec<usize>,
    n_classes: usize,
    split_of_class: Option<Vec<Split>>,
    by_class: Vec<Vec<usize>>,
}

impl DatasetStore {
    pub fn new(features: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "features {:?} vs {} labels",
                features.shape(),
                labels.len()
            )));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= n_classes) {
            return Err(Error::Format(format!(
                "sample {i} has label {y} but store declares {n_classes} classes"
            )));
        }
        let mut by_class = vec![Vec::new(); n_classes];
        for (i, &y) in labels.iter().enumerate() {
            by_class[y].push(i);
        }
        Ok(DatasetStore {
            features,
            labels,
            n_classes,
            split_of_class: None,
            by_class,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn samples_of_class(&self, class: usize) -> &[usize] {
        &self.by_class[class]
    }

    pub fn is_split(&self) -> bool {
        self.split_of_class.is_some()
    }

    pub fn split_of(&self, class: usize) -> Option<Split> {
        self.split_of_class.as_ref().map(|s| s[class])
    }

    /// Class ids of one split in ascending order (empty when unsplit).
    pub fn classes_in(&self, split: Split) -> Vec<usize> {
        match &self.split_of_class {
            Some(s) => (0..self.n_classes).filter(|&c| s[c] == split).collect(),
            None => Vec::new(),
        }
    }

    /// Sample indices whose class lies in `split`, in ascending order.
    pub fn samples_in(&self, split: Split) -> Vec<usize> {
        match &self.split_of_class {
            Some(s) => (0..self.n_samples()).filter(|&i| s[self.labels[i]] == split).collect(),
            None => Vec::new(),
        }
    }

    /// Gathers the listed samples' features.
    pub fn rows(&self, indices: &[usize]) -> Tensor {
        self.features.select_rows(indices)
    }

    /// Assigns each class to a split.
    pub fn with_splits(mut self, split_of_class: Vec<Split>) -> Result<Self> {
        if split_of_class.len() != self.n_classes {
            return Err(Error::Dimension(format!(
                "split map covers {} classes, store has {}",
                split_of_class.len(),
                self.n_classes
            )));
        }
        self.split_of_class = Some(split_of_class);
        Ok(self)
    }

    /// Checks the invariants the trainer relies on: split present, base and
    /// novel nonempty.
    pub fn check_trainable(&self) -> Result<()> {
        if !self.is_split() {
            return Err(Error::InvalidArgument(
                "store has no base/validation/novel split".into(),
            ));
        }
        if self.classes_in(Split::Base).is_empty() {
            return Err(Error::Capacity("base split is empty".into()));
        }
        if self.classes_in(Split::Novel).is_empty() {
            return Err(Error::Capacity("novel split is empty".into()));
        }
        Ok(())
    }
}

/// Parameters of the Gaussian-cluster stand-in dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    /// Per-coordinate standard deviation around each class mean.
    pub cluster_spread: f64,
    /// Norm of every class mean.
    pub separation: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_classes: 100,
            samples_per_class: 100,
            input_dim: 32,
            cluster_spread: 0.15,
            separation: 1.0,
        }
    }
}

/// Isotropic Gaussian clusters around seeded means on a sphere of radius
/// `separation`. Samples are stored class-major.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<DatasetStore> {
    if cfg.n_classes == 0 || cfg.samples_per_class == 0 || cfg.input_dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "synthetic counts must be positive: {} classes x {} samples in dim {}",
            cfg.n_classes, cfg.samples_per_class, cfg.input_dim
        )));
    }
    if !(cfg.cluster_spread >= 0.0 && cfg.separation > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need spread >= 0 and separation > 0, got {} and {}",
            cfg.cluster_spread, cfg.separation
        )));
    }
    let d = cfg.input_dim;
    let mut mean_rng = rng::stream(seed, "synthetic-means", &[]);
    let mut means = Vec::with_capacity(cfg.n_classes);
    for _ in 0..cfg.n_classes {
        loop {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut mean_rng)).collect();
            let n = norm(&v);
            if n > 1e-8 {
                means.push(v.into_iter().map(|x| x / n * cfg.separation).collect::<Vec<f64>>());
                break;
            }
        }
    }
    let total = cfg.n_classes * cfg.samples_per_class;
    let mut values = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    for (c, mean) in means.iter().enumerate() {
        let mut noise = rng::stream(seed, "synthetic-samples", &[c as u64]);
        for _ in 0..cfg.samples_per_class {
            for &m in mean {
                let z: f64 = StandardNormal.sample(&mut noise);
                values.push(m + cfg.cluster_spread * z);
            }
            labels.push(c);
        }
    }
    DatasetStore::new(Tensor::matrix(total, d, values)?, labels, cfg.n_classes)
}

/// Seeded permutation of class ids cut into base / validation / novel.
pub fn split_dataset(
    store: DatasetStore,
    n_base: usize,
    n_val: usize,
    n_novel: usize,
    seed: u64,
) -> Result<DatasetStore> {
    let total = store.n_classes();
    if n_base + n_val + n_novel != total {
        return Err(Error::InvalidArgument(format!(
            "split counts {n_base}+{n_val}+{n_novel} != {total} classes"
        )));
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng::stream(seed, "split", &[]));
    let mut split = vec![Split::Base; total];
    for (pos, &c) in order.iter().enumerate() {
        split[c] = if pos < n_base {
            Split::Base
        } else if pos < n_base + n_val {
            Split::Validation
        } else {
            Split::Novel
        };
    }
    store.with_splits(split)
}

/// Encodes the binary dataset container (split map is not stored).
pub fn encode_dataset(store: &DatasetStore) -> Vec<u8> {
    let d = store.input_dim();
    let mut out = Vec::with_capacity(HEADER_LEN + store.n_samples() * (4 + 8 * d));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.n_samples() as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(store.n_classes() as u32).to_le_bytes());
    for i in 0..store.n_samples() {
        out.extend_from_slice(&(store.labels()[i] as u32).to_le_bytes());
        for v in store.features().row(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                message: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<DatasetStore> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad magic, not a dataset file".into(),
        });
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {version} (expected {DATASET_VERSION})"
        )));
    }
    let n = r.u32("sample count")? as usize;
    let d = r.u32("feature dim")? as usize;
    let n_classes = r.u32("class count")? as usize;
    if d == 0 {
        return Err(Error::Dimension("header declares feature dim 0".into()));
    }
    let record = 4 + 8 * d;
    let payload = bytes.len() - HEADER_LEN;
    if payload > n * record {
        return Err(Error::Dimension(format!(
            "payload of {payload} bytes exceeds {n} samples of dim {d} ({} bytes)",
            n * record
        )));
    }
    let mut labels = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n * d);
    for i in 0..n {
        let y = r.u32("label")? as usize;
        if y >= n_classes {
            return Err(Error::Format(format!(
                "sample {i} label {y} >= class count {n_classes}"
            )));
        }
        labels.push(y);
        for _ in 0..d {
            values.push(r.f64("feature")?);
        }
    }
    DatasetStore::new(Tensor::matrix(n, d, values)?, labels, n_classes)
}

pub fn save_dataset(path: &Path, store: &DatasetStore) -> Result<()> {
    write_atomic(path, &encode_dataset(store))
}

pub fn load_dataset(path: &Path) -> Result<DatasetStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes).map_err(|e| e.context(format!("reading {}", path.display())))
}

/// Parses `label,f1,...,fd` text with a mandatory header row.
pub fn parse_csv_dataset(text: &str) -> Result<DatasetStore> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Format("empty CSV: header row required".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"label") || cols.len() < 2 {
        return Err(Error::Format(format!(
            "CSV header must be `label,f1,...,fd`, got {header:?}"
        )));
    }
    let d = cols.len() - 1;
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (lineno, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 1 {
            return Err(Error::Dimension(format!(
                "line {}: {} features, header declares {d}",
                lineno + 1,
                fields.len() - 1
            )));
        }
        let y: usize = fields[0]
            .parse()
            .map_err(|_| Error::Format(format!("line {}: bad label {:?}", lineno + 1, fields[0])))?;
        labels.push(y);
        for f in &fields[1..] {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::Format(format!("line {}: bad feature {f:?}", lineno + 1)))?;
            values.push(v);
        }
    }
    let n = labels.len();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    DatasetStore::new(Tensor::matrix(n, d, values)?, labels, n_classes)
}

pub fn import_csv(path: &Path) -> Result<DatasetStore> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv_dataset(&text).map_err(|e| e.context(format!("importing {}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SyntheticConfig {
        SyntheticConfig {
            n_classes: 10,
            samples_per_class: 6,
            input_dim: 4,
            cluster_spread: 0.3,
            separation: 2.0,
        }
    }

    #[test]
    fn synthetic_is_seeded() {
        let a = generate_synthetic(&tiny(), 3).unwrap();
        let b = generate_synthetic(&tiny(), 3).unwrap();
        assert!(a.features().bit_eq(b.features()));
        assert_eq!(a.labels(), b.labels());
        let c = generate_synthetic(&tiny(), 4).unwrap();
        assert!(!a.features().bit_eq(c.features()));
    }

    #[test]
    fn zero_spread_collapses_to_means() {
        let cfg = SyntheticConfig {
            cluster_spread: 0.0,
            ..tiny()
        };
        let s = generate_synthetic(&cfg, 1).unwrap();
        for c in 0..cfg.n_classes {
            let idx = s.samples_of_class(c);
            let first = s.features().row(idx[0]).to_vec();
            assert!((norm(&first) - cfg.separation).abs() < 1e-12);
            for &i in idx {
                assert_eq!(s.features().row(i), &first[..]);
            }
        }
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let s = generate_synthetic(
            &SyntheticConfig {
                n_classes: 100,
                samples_per_class: 2,
                ..tiny()
            },
            0,
        )
        .unwrap();
        let s = split_dataset(s, 64, 16, 20, 5).unwrap();
        let (b, v, n) = (
            s.classes_in(Split::Base),
            s.classes_in(Split::Validation),
            s.classes_in(Split::Novel),
        );
        assert_eq!((b.len(), v.len(), n.len()), (64, 16, 20));
        let mut all: Vec<usize> = b.iter().chain(&v).chain(&n).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(b.iter().all(|c| !n.contains(c) && !v.contains(c)));

        let s2 = split_dataset(
            generate_synthetic(
                &SyntheticConfig {
                    n_classes: 100,
                    samples_per_class: 2,
                    ..tiny()
                },
                0,
            )
            .unwrap(),
            64,
            16,
            20,
            5,
        )
        .unwrap();
        assert_eq!(s2.classes_in(Split::Novel), n);
    }

    #[test]
    fn split_count_mismatch() {
        let s = generate_synthetic(&tiny(), 0).unwrap();
        assert!(matches!(split_dataset(s, 5, 2, 2, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn binary_round_trip() {
        let s = generate_synthetic(&tiny(), 8).unwrap();
        let back = decode_dataset(&encode_dataset(&s)).unwrap();
        assert!(back.features().bit_eq(s.features()));
        assert_eq!(back.labels(), s.labels());
        assert_eq!(back.n_classes(), s.n_classes());
    }

    #[test]
    fn truncated_file_reports_offset() {
        let s = generate_synthetic(&tiny(), 8).unwrap();
        let bytes = encode_dataset(&s);
        let cut = HEADER_LEN + (4 + 8 * 4) * 3 + 10;
        match decode_dataset(&bytes[..cut]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, HEADER_LEN + (4 + 8 * 4) * 3 + 4),
            other => panic!("expected parse error, got {other:?}"),
        }
        match decode_dataset(&bytes[..5]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn header_dim_mismatch() {
        let s = generate_synthetic(&tiny(), 8).unwrap();
        let mut bytes = encode_dataset(&s);
        // declare dim 3 while rows carry 4 features
        bytes[16..20].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(decode_dataset(&bytes), Err(Error::Dimension(_))));
    }

    #[test]
    fn bad_magic_and_version() {
        let s = generate_synthetic(&tiny(), 8).unwrap();
        let mut bytes = encode_dataset(&s);
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode_dataset(&bytes), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(decode_dataset(&bytes), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn csv_import() {
        let s = parse_csv_dataset("label,f1,f2\n0,1.5,2\n2,-1,0.25\n").unwrap();
        assert_eq!(s.n_classes(), 3);
        assert_eq!(s.features().values(), &[1.5, 2.0, -1.0, 0.25]);
        let err = parse_csv_dataset("label,f1,f2\n0,1.5\n").unwrap_err();
        assert!(matches!(err, Error::Dimension(ref m) if m.contains("line 2")));
        assert!(parse_csv_dataset("0,1,2\n").is_err());
    }
}
