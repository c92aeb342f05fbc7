use std::collections::HashSet;

use fewshot_core::data::*;
use fewshot_core::numcore::Tensor;
use fewshot_core::rng;
use proptest::prelude::*;

fn store_strategy() -> impl Strategy<Value = DatasetStore> {
    (1usize..40, 1usize..6, 1usize..8).prop_flat_map(|(n, d, classes)| {
        (
            prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), n * d),
            prop::collection::vec(0..classes, n),
        )
            .prop_map(move |(v, y)| DatasetStore::new(Tensor::matrix(n, d, v).unwrap(), y, classes).unwrap())
    })
}

/// Nearest-class-mean accuracy: means from the first half of each class,
/// scored on the second half.
fn ncm_accuracy(store: &DatasetStore) -> f64 {
    let d = store.input_dim();
    let means: Vec<Vec<f64>> = (0..store.n_classes())
        .map(|c| {
            let s = store.samples_of_class(c);
            let half = &s[..s.len() / 2];
            let mut m = vec![0.0; d];
            for &i in half {
                for (a, b) in m.iter_mut().zip(store.features().row(i)) {
                    *a += b;
                }
            }
            m.iter().map(|v| v / half.len() as f64).collect()
        })
        .collect();
    let (mut correct, mut total) = (0, 0);
    for c in 0..store.n_classes() {
        let s = store.samples_of_class(c);
        for &i in &s[s.len() / 2..] {
            let x = store.features().row(i);
            let dist = |m: &Vec<f64>| m.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..means.len())
                .min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b])))
                .unwrap();
            correct += usize::from(best == c);
            total += 1;
        }
    }
    correct as f64 / total as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dataset_binary_round_trip(store in store_strategy()) {
        let back = decode_dataset(&encode_dataset(&store)).unwrap();
        prop_assert!(back.features().bit_eq(store.features()));
        prop_assert_eq!(back.labels(), store.labels());
        prop_assert_eq!(back.n_classes(), store.n_classes());
    }

    #[test]
    fn truncation_is_always_a_parse_error(store in store_strategy(), cut in 0.0f64..1.0) {
        let bytes = encode_dataset(&store);
        let at = (cut * bytes.len() as f64) as usize;
        let err = decode_dataset(&bytes[..at]).unwrap_err();
        let is_parse = matches!(err, fewshot_core::Error::Parse { offset, .. } if offset <= at);
        prop_assert!(is_parse, "{}", err);
    }

    #[test]
    fn partitions_are_disjoint_and_covering(n in 1usize..300, m_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let m = 1 + (m_frac * (n.min(16) - 1) as f64) as usize;
        let universe: Vec<usize> = (0..n).map(|i| i * 3 + 1).collect();
        let p = partition_indices(&universe, m, seed).unwrap();
        prop_assert_eq!(p.len(), m);
        let mut union = HashSet::new();
        for s in &p.subsets {
            for &i in s {
                prop_assert!(union.insert(i), "{} in two subsets", i);
            }
        }
        prop_assert_eq!(union, universe.iter().copied().collect::<HashSet<_>>());
        let sizes: Vec<usize> = p.subsets.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn splits_partition_the_classes(base in 1usize..20, val in 0usize..5, novel in 1usize..10, seed in any::<u64>()) {
        let cfg = SyntheticConfig { n_classes: base + val + novel, samples_per_class: 2, input_dim: 2, ..SyntheticConfig::default() };
        let s = split_dataset(generate_synthetic(&cfg, 1).unwrap(), base, val, novel, seed).unwrap();
        let sets: Vec<HashSet<usize>> = [Split::Base, Split::Validation, Split::Novel]
            .iter()
            .map(|&sp| s.classes_in(sp).into_iter().collect())
            .collect();
        prop_assert_eq!(sets[0].len(), base);
        prop_assert_eq!(sets[1].len(), val);
        prop_assert_eq!(sets[2].len(), novel);
        prop_assert!(sets[0].is_disjoint(&sets[1]) && sets[0].is_disjoint(&sets[2]) && sets[1].is_disjoint(&sets[2]));
        let union: HashSet<usize> = sets.iter().flatten().copied().collect();
        prop_assert_eq!(union.len(), base + val + novel);
    }
}

#[test]
fn default_synthetic_data_is_separable() {
    for seed in 0..3 {
        let acc = ncm_accuracy(&generate_synthetic(&SyntheticConfig::default(), seed).unwrap());
        assert!(acc > 0.90, "seed {seed}: NCM accuracy {acc}");
    }
}

#[test]
fn sr_draws_are_uniform() {
    // 1e5 draws over 10 samples: each count is Binomial(1e5, 0.1).
    let (n, pool) = (100_000usize, 10usize);
    let draws = sample_sr_indices(pool, n, &mut rng::stream(4, "sr-uniformity", &[])).unwrap();
    let mut counts = vec![0usize; pool];
    for i in draws {
        counts[i] += 1;
    }
    let (mean, sd) = (n as f64 / pool as f64, (n as f64 * 0.1 * 0.9).sqrt());
    for (i, &c) in counts.iter().enumerate() {
        assert!((c as f64 - mean).abs() <= 3.0 * sd, "sample {i}: {c} draws");
    }
}

#[test]
fn sr_batch_rows_come_from_the_pool() {
    let store = generate_synthetic(
        &SyntheticConfig {
            n_classes: 3,
            samples_per_class: 4,
            input_dim: 3,
            ..Default::default()
        },
        2,
    )
    .unwrap();
    let pool = SrPool::from_store(&store, "probe").unwrap();
    let batch = sample_sr_batch(&pool, 256, &mut rng::stream(1, "b", &[])).unwrap();
    assert_eq!(batch.rows(), 256);
    for r in 0..batch.rows() {
        assert!((0..pool.len()).any(|i| pool.features.row(i) == batch.row(r)));
    }
}

#[test]
fn five_way_protocol_shapes() {
    let store = split_dataset(
        generate_synthetic(&SyntheticConfig::default(), 0).unwrap(),
        64,
        16,
        20,
        0,
    )
    .unwrap();
    let novel: HashSet<usize> = store.classes_in(Split::Novel).into_iter().collect();
    for (k, n_support) in [(1, 5), (5, 25)] {
        let eps = presample_episodes(&store, 500, 5, k, 15, 7).unwrap();
        assert_eq!(eps.len(), 500);
        for (i, ep) in eps.iter().enumerate() {
            assert_eq!(ep.episode_id, i as u64);
            let (s, _) = ep.support_set();
            let (q, _) = ep.query_set();
            assert_eq!((s.len(), q.len()), (n_support, 75));
            let s: HashSet<usize> = s.into_iter().collect();
            let q: HashSet<usize> = q.into_iter().collect();
            assert_eq!(s.len(), n_support);
            assert_eq!(q.len(), 75);
            assert!(s.is_disjoint(&q));
            assert!(ep.classes.iter().all(|c| novel.contains(c)));
            for (c, (sg, qg)) in ep.classes.iter().zip(ep.support.iter().zip(&ep.query)) {
                assert!(sg.iter().chain(qg).all(|&i| store.labels()[i] == *c));
            }
        }
    }
}

#[test]
fn episode_files_are_reproducible() {
    let store = split_dataset(
        generate_synthetic(&SyntheticConfig::default(), 0).unwrap(),
        64,
        16,
        20,
        0,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = write_episode_file(
        &dir.path().join("a.jsonl"),
        &presample_episodes(&store, 500, 5, 1, 15, 7).unwrap(),
    )
    .unwrap();
    let b = write_episode_file(
        &dir.path().join("b.jsonl"),
        &presample_episodes(&store, 500, 5, 1, 15, 7).unwrap(),
    )
    .unwrap();
    let c = write_episode_file(
        &dir.path().join("c.jsonl"),
        &presample_episodes(&store, 500, 5, 1, 15, 8).unwrap(),
    )
    .unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let bytes_a = std::fs::read(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(bytes_a, std::fs::read(dir.path().join("b.jsonl")).unwrap());
    assert_eq!(bytes_a.iter().filter(|&&b| b == b'\n').count(), 500);
    let back = read_episode_file(&dir.path().join("a.jsonl")).unwrap();
    assert_eq!(back.sha256, a);
    assert_eq!(back.episodes.len(), 500);
}
