use fewshot_core::metrics::*;
use fewshot_core::rng;
use proptest::prelude::*;
use rand::Rng;

fn full_sort_worst(sample: &[f64], k: usize) -> f64 {
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    v[..k].iter().sum::<f64>() / k as f64
}

fn two_pass_std(sample: &[f64]) -> f64 {
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    (sample.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Composite Simpson integration of the standard normal density.
fn simpson_cdf(x: f64) -> f64 {
    let (a, n) = (-12.0, 200_000);
    let h = (x - a) / n as f64;
    let f = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = f(a) + f(x);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Accuracies on the 1/75 grid of a 5-way 15-query episode.
fn episode_sample(seed: u64, n: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, "metric-sample", &[]);
    (0..n).map(|_| r.gen_range(0..=75) as f64 / 75.0).collect()
}

#[test]
fn worst_k_matches_full_sort_on_1000_samples() {
    for seed in 0..1000 {
        let s = episode_sample(seed, 500);
        let mean = acc_mean(&s).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for k in DEFAULT_WORST_KS {
            let got = acc_worst_k(&s, k).unwrap();
            assert_eq!(got, full_sort_worst(&s, k), "seed {seed} k {k}");
            assert!(prev <= got);
            prev = got;
        }
        assert!(prev <= mean);
    }
}

proptest! {
    #[test]
    fn worst_k_oracle_on_continuous_samples(s in prop::collection::vec(0.0f64..=1.0, 1..300), kf in 0.0f64..1.0) {
        let k = 1 + (kf * (s.len() - 1) as f64) as usize;
        prop_assert_eq!(acc_worst_k(&s, k).unwrap(), full_sort_worst(&s, k));
        prop_assert_eq!(acc_worst_k(&s, s.len()).unwrap(), full_sort_worst(&s, s.len()));
    }

    #[test]
    fn mean_and_std_match_naive_oracles(s in prop::collection::vec(0.0f64..=1.0, 2..500)) {
        let naive = s.iter().fold(0.0, |a, b| a + b) / s.len() as f64;
        prop_assert!((acc_mean(&s).unwrap() - naive).abs() <= 1e-12);
        prop_assert!((std_dev(&s).unwrap() - two_pass_std(&s)).abs() <= 1e-12);
    }

    #[test]
    fn z95_sigma_round_trip(z in 0.0f64..5.0, n in 1usize..100_000) {
        let back = sigma_to_z95(z95_to_sigma(z, n).unwrap(), n).unwrap();
        prop_assert!((back - z).abs() <= 1e-12);
    }

    #[test]
    fn histogram_conserves_counts(s in prop::collection::vec(0.0f64..=1.0, 2..400), bins in 1usize..40) {
        let h = histogram_export(&s, bins).unwrap();
        prop_assert_eq!(h.bins.iter().map(|b| b.count).sum::<usize>(), s.len());
        prop_assert_eq!(h.mu, acc_mean(&s).unwrap());
        prop_assert_eq!(h.sigma, std_dev(&s).unwrap());
        for w in h.bins.windows(2) {
            prop_assert_eq!(w[0].right, w[1].left);
        }
    }
}

#[test]
fn z95_conversion_reproduces_table_sigmas() {
    assert!((z95_to_sigma(0.18, 10_000).unwrap() - 9.18).abs() <= 0.005);
    assert!((z95_to_sigma(0.20, 10_000).unwrap() - 10.20).abs() <= 0.005);
}

#[test]
fn surrogate_reproduces_table_entries() {
    assert_eq!(format!("{:.2}", surrogate_mu_minus_3sigma(69.38, 9.71)), "40.25");
    assert_eq!(format!("{:.2}", surrogate_mu_minus_3sigma(85.87, 6.47)), "66.46");
    assert_eq!(pct(surrogate_mu_minus_3sigma(0.6938, 0.0971)), "40.25");
    assert_eq!(pct(surrogate_mu_minus_3sigma(0.8587, 0.0647)), "66.46");
}

#[test]
fn tail_constants() {
    assert!((normal_cdf(-3.0) - 0.00135).abs() <= 1e-5);
    assert_eq!(chebyshev_tail_bound(3.0).unwrap(), 0.1);
    for x in [-3.0, -1.0, 0.0, 1.96] {
        assert!((normal_cdf(x) - simpson_cdf(x)).abs() < 1e-10, "x = {x}");
    }
    assert!((normal_cdf(1.96) - 0.975).abs() < 1e-4);
}

#[test]
fn constant_sample_report() {
    let s = vec![0.6; 500];
    let r = MetricsReport::from_sample(&s, &DEFAULT_WORST_KS).unwrap();
    assert_eq!(pct(r.acc_m), "60.00");
    assert_eq!(pct(r.acc_k(1).unwrap()), "60.00");
    assert_eq!(r.sigma, 0.0);
    let h = histogram_export(&s, 20).unwrap();
    assert_eq!(h.bins.iter().map(|b| b.count).sum::<usize>(), 500);
}

#[test]
fn five_identical_runs_aggregate_to_one() {
    let s = episode_sample(9, 500);
    let one = MetricsReport::from_sample(&s, &DEFAULT_WORST_KS).unwrap();
    let agg = aggregate_runs(&vec![one.clone(); 5]).unwrap();
    assert_eq!(agg.n_runs, 5);
    assert_eq!(pct(agg.acc_m), pct(one.acc_m));
    for k in DEFAULT_WORST_KS {
        assert_eq!(pct(agg.acc_k(k).unwrap()), pct(one.acc_k(k).unwrap()));
    }
    assert_eq!(pct(agg.sigma), pct(one.sigma));
    assert_eq!(pct(agg.surrogate), pct(one.surrogate));
}

#[test]
fn aggregate_rejects_mismatched_runs() {
    let a = MetricsReport::from_sample(&episode_sample(1, 500), &DEFAULT_WORST_KS).unwrap();
    let b = MetricsReport::from_sample(&episode_sample(2, 400), &DEFAULT_WORST_KS).unwrap();
    assert!(aggregate_runs(&[a, b]).is_err());
    assert!(aggregate_runs(&[]).is_err());
}

#[test]
fn table_sorted_by_worst_case() {
    let mk = |v: &[f64]| MetricsReport::from_sample(v, &DEFAULT_WORST_KS).unwrap();
    let rows = vec![
        ("high-mean".to_string(), mk(&[0.2, 1.0, 1.0, 1.0])),
        ("steady".to_string(), mk(&[0.7, 0.7, 0.8, 0.8])),
    ];
    let t = render_table(&rows, SortKey::WorstCase);
    let lines: Vec<&str> = t.lines().collect();
    assert!(lines[0].starts_with("method"));
    assert!(lines[0].contains("ACC_1") && lines[0].contains("mu-3sigma"));
    assert!(lines[1].starts_with("steady"));
    let t = render_table(&rows, SortKey::Mean);
    assert!(t.lines().nth(1).unwrap().starts_with("high-mean"));
    // Four episodes: ACC_10 and ACC_100 are undefined.
    assert!(lines[1].contains(" - "));
}
