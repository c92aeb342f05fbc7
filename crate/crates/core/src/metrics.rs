//! Worst-case evaluation metrics over per-episode accuracies.
//!
//! Accuracies are fractions in `[0, 1]`; rendering converts to percentage
//! points with two decimals.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Worst-k levels reported by default.
pub const DEFAULT_WORST_KS: [usize; 3] = [1, 10, 100];

/// z-score of the two-sided 95% interval.
pub const Z_95: f64 = 1.96;

fn check_sample(sample: &[f64]) -> Result<()> {
    if sample.is_empty() {
        return Err(Error::InvalidArgument("empty accuracy sample".into()));
    }
    if let Some((i, v)) = sample.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("accuracy {i} is {v}")));
    }
    Ok(())
}

pub fn acc_mean(sample: &[f64]) -> Result<f64> {
    check_sample(sample)?;
    Ok(sample.iter().sum::<f64>() / sample.len() as f64)
}

/// Mean of the `k` smallest values.
pub fn acc_worst_k(sample: &[f64], k: usize) -> Result<f64> {
    check_sample(sample)?;
    if k == 0 || k > sample.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={} episodes",
            sample.len()
        )));
    }
    let mut v = sample.to_vec();
    if k < v.len() {
        v.select_nth_unstable_by(k - 1, f64::total_cmp);
    }
    let worst = &mut v[..k];
    // ascending summation keeps the result independent of selection order
    worst.sort_unstable_by(f64::total_cmp);
    Ok(worst.iter().sum::<f64>() / k as f64)
}

/// Sample standard deviation (denominator `n - 1`), Welford's recurrence.
pub fn std_dev(sample: &[f64]) -> Result<f64> {
    check_sample(sample)?;
    if sample.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "standard deviation needs at least 2 episodes, got {}",
            sample.len()
        )));
    }
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &x) in sample.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    Ok((m2 / (sample.len() - 1) as f64).sqrt())
}

/// `sigma = z95 * sqrt(n) / 1.96`.
pub fn z95_to_sigma(z95: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("episode count must be positive".into()));
    }
    if !(z95 >= 0.0) {
        return Err(Error::InvalidArgument(format!("Z95 must be nonnegative, got {z95}")));
    }
    Ok(z95 * (n as f64).sqrt() / Z_95)
}

/// `z95 = 1.96 * sigma / sqrt(n)`.
pub fn sigma_to_z95(sigma: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("episode count must be positive".into()));
    }
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be nonnegative, got {sigma}"
        )));
    }
    Ok(sigma * Z_95 / (n as f64).sqrt())
}

pub fn surrogate_mu_minus_3sigma(mu: f64, sigma: f64) -> f64 {
    mu - 3.0 * sigma
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// One-sided Chebyshev bound `Pr(X <= mu - k sigma) <= 1 / (1 + k^2)`.
pub fn chebyshev_tail_bound(k: f64) -> Result<f64> {
    if !(k > 0.0) {
        return Err(Error::InvalidArgument(format!("k must be positive, got {k}")));
    }
    Ok(1.0 / (1.0 + k * k))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub left: f64,
    pub right: f64,
    pub count: usize,
    /// Density of `N(mu, sigma^2)` at the bin center, in count units.
    pub normal_fit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<HistogramBin>,
    pub mu: f64,
    pub sigma: f64,
}

/// Equal-width bins over `[min, max]` with a fitted normal overlay. A
/// constant sample yields a single bin holding everything.
pub fn histogram_export(sample: &[f64], n_bins: usize) -> Result<Histogram> {
    check_sample(sample)?;
    if n_bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    let n = sample.len();
    let mu = acc_mean(sample)?;
    let sigma = if n >= 2 { std_dev(sample)? } else { 0.0 };
    let lo = sample.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = sample.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(Histogram {
            bins: vec![HistogramBin {
                left: lo,
                right: hi,
                count: n,
                normal_fit: n as f64,
            }],
            mu,
            sigma,
        });
    }
    let width = (hi - lo) / n_bins as f64;
    let mut counts = vec![0usize; n_bins];
    for &x in sample {
        let b = (((x - lo) / width) as usize).min(n_bins - 1);
        counts[b] += 1;
    }
    let bins = counts
        .into_iter()
        .enumerate()
        .map(|(b, count)| {
            let left = lo + width * b as f64;
            let right = if b + 1 == n_bins {
                hi
            } else {
                lo + width * (b + 1) as f64
            };
            let center = 0.5 * (left + right);
            let normal_fit = if sigma > 0.0 {
                n as f64 * width * normal_pdf(center, mu, sigma)
            } else {
                0.0
            };
            HistogramBin {
                left,
                right,
                count,
                normal_fit,
            }
        })
        .collect();
    Ok(Histogram { bins, mu, sigma })
}

impl Histogram {
    /// `bin_left,bin_right,count,normal_fit` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,bin_right,count,normal_fit\n");
        for b in &self.bins {
            let _ = writeln!(out, "{},{},{},{}", b.left, b.right, b.count, b.normal_fit);
        }
        out
    }
}

/// Summary of one run, or of several runs averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc_m: f64,
    pub sigma: f64,
    pub z95: f64,
    /// `k -> ACC_k` for every requested `k <= n_episodes`.
    pub acc_worst: BTreeMap<usize, f64>,
    pub surrogate: f64,
    pub n_episodes: usize,
    pub n_runs: usize,
}

impl MetricsReport {
    pub fn from_sample(sample: &[f64], ks: &[usize]) -> Result<Self> {
        let acc_m = acc_mean(sample)?;
        let sigma = std_dev(sample)?;
        let n = sample.len();
        let mut acc_worst = BTreeMap::new();
        for &k in ks.iter().filter(|&&k| k <= n) {
            acc_worst.insert(k, acc_worst_k(sample, k)?);
        }
        Ok(MetricsReport {
            acc_m,
            sigma,
            z95: sigma_to_z95(sigma, n)?,
            acc_worst,
            surrogate: surrogate_mu_minus_3sigma(acc_m, sigma),
            n_episodes: n,
            n_runs: 1,
        })
    }

    pub fn acc_k(&self, k: usize) -> Option<f64> {
        self.acc_worst.get(&k).copied()
    }
}

/// Per-field arithmetic mean of per-run reports.
pub fn aggregate_runs(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidArgument("no runs to aggregate".into()))?;
    for (i, r) in reports.iter().enumerate() {
        if r.n_episodes != first.n_episodes {
            return Err(Error::InvalidArgument(format!(
                "run {i} has {} episodes, run 0 has {}",
                r.n_episodes, first.n_episodes
            )));
        }
        if r.acc_worst.keys().ne(first.acc_worst.keys()) {
            return Err(Error::InvalidArgument(format!(
                "run {i} reports different worst-k levels"
            )));
        }
    }
    let m = reports.len() as f64;
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / m;
    let acc_worst = first
        .acc_worst
        .keys()
        .map(|&k| (k, mean(&|r| r.acc_worst[&k])))
        .collect();
    Ok(MetricsReport {
        acc_m: mean(&|r| r.acc_m),
        sigma: mean(&|r| r.sigma),
        z95: mean(&|r| r.z95),
        acc_worst,
        surrogate: mean(&|r| r.surrogate),
        n_episodes: first.n_episodes,
        n_runs: reports.iter().map(|r| r.n_runs).sum(),
    })
}

/// Alternative aggregation: all runs' episodes pooled into one sample.
pub fn aggregate_pooled(runs: &[Vec<f64>], ks: &[usize]) -> Result<MetricsReport> {
    let pooled: Vec<f64> = runs.iter().flatten().copied().collect();
    let mut r = MetricsReport::from_sample(&pooled, ks)?;
    r.n_runs = runs.len();
    Ok(r)
}

/// Percentage points with two decimals.
pub fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

/// Row order of [`render_table`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SortKey {
    #[default]
    WorstCase,
    Mean,
}

/// Aligned text table with columns ACC_m, ACC_1, ACC_10, ACC_100, sigma,
/// mu-3sigma. Missing worst-k levels render as `-`.
pub fn render_table(rows: &[(String, MetricsReport)], sort: SortKey) -> String {
    let mut rows: Vec<&(String, MetricsReport)> = rows.iter().collect();
    let key = |r: &MetricsReport| match sort {
        SortKey::WorstCase => r.acc_k(1).unwrap_or(f64::NEG_INFINITY),
        SortKey::Mean => r.acc_m,
    };
    rows.sort_by(|a, b| key(&b.1).total_cmp(&key(&a.1)).then_with(|| a.0.cmp(&b.0)));
    let header = ["method", "ACC_m", "ACC_1", "ACC_10", "ACC_100", "sigma", "mu-3sigma"];
    let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for (name, r) in rows {
        let wk = |k| r.acc_k(k).map_or("-".to_string(), pct);
        cells.push(vec![
            name.clone(),
            pct(r.acc_m),
            wk(1),
            wk(10),
            wk(100),
            pct(r.sigma),
            pct(r.surrogate),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}
