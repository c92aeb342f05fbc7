use fewshot_core::model::*;
use fewshot_core::numcore::{sgd_step, Param, SgdConfig, Tensor};
use fewshot_core::rng;
use fewshot_core::trainer::argmax;
use proptest::prelude::*;
use rand::Rng;

fn config(groups: usize) -> BackboneConfig {
    BackboneConfig {
        input_dim: 4,
        group_dims: vec![5; groups],
        layers_per_group: 2,
    }
}

fn nonzero_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_filter("nonzero rows", move |v| {
            v.chunks(cols).all(|r| r.iter().any(|x| x.abs() > 1e-3))
        })
        .prop_map(move |v| Tensor::matrix(rows, cols, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cosines_bounded_and_scale_free(
        f in nonzero_matrix(3, 4), seed in any::<u64>(), classes in 1usize..6, scale in 0.5f64..50.0,
    ) {
        let head = CosineHead::init(classes, 4, scale, &mut rng::stream(seed, "h", &[])).unwrap();
        let tr = head.forward(&f).unwrap();
        prop_assert!(tr.cosines.values().iter().all(|c| c.abs() <= 1.0 + 1e-12));
        for alpha in [0.5, 2.0, 10.0] {
            let mut g = f.clone();
            g.values_mut().iter_mut().for_each(|v| *v *= alpha);
            let lg = head.logits(&g).unwrap();
            for (a, b) in tr.logits.values().iter().zip(lg.values()) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
        let mut other = head.clone();
        other.scale = 1.0;
        let lo = other.logits(&f).unwrap();
        for b in 0..3 {
            prop_assert_eq!(argmax(tr.logits.row(b)), argmax(lo.row(b)));
        }
    }

    // Frozen groups stay bit-identical through any number of optimizer steps.
    #[test]
    fn frozen_groups_survive_sgd(seed in any::<u64>(), j in 0usize..=3, steps in 1usize..6) {
        let (mut m, mut h) = init_model(&config(3), 3, seed).unwrap();
        set_adaptability(&mut m, &mut h, AdaptabilityLevel(j)).unwrap();
        let before = m.clone();
        let mut r = rng::stream(seed, "grads", &[]);
        let cfg = SgdConfig::default();
        for _ in 0..steps {
            for p in m.params_mut().chain([&mut h.weights]) {
                let g: Vec<f64> = (0..p.value.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
                p.grad = Tensor::new(p.value.shape().to_vec(), g).unwrap();
            }
            sgd_step(m.params_mut().chain([&mut h.weights]), &cfg);
        }
        for g in 0..3 {
            let same = m.group_params(g).zip(before.group_params(g)).all(|(a, b)| a.value.bit_eq(&b.value));
            prop_assert_eq!(same, g < 3 - j, "group {}", g);
        }
    }

    #[test]
    fn plain_sgd_is_exact(v in prop::collection::vec(-10.0f64..10.0, 1..8), lr in 1e-4f64..1.0, seed in any::<u64>()) {
        let mut r = rng::stream(seed, "g", &[]);
        let grad: Vec<f64> = v.iter().map(|_| r.gen_range(-5.0..5.0)).collect();
        let mut p = Param::new(Tensor::vector(v.clone()));
        p.grad = Tensor::vector(grad.clone());
        sgd_step([&mut p], &SgdConfig { learning_rate: lr, weight_decay: 0.0, momentum: 0.0, decay_biases: true });
        for ((out, x), g) in p.value.values().iter().zip(&v).zip(&grad) {
            prop_assert_eq!(out.to_bits(), (x - lr * g).to_bits());
        }
        prop_assert!(p.grad.values().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), groups in 1usize..4) {
        let (m, h) = init_model(&config(groups), 2, seed).unwrap();
        let ck = Checkpoint { seed, backbone: m, head: Some(h) };
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        prop_assert!(back.backbone.bit_eq(&ck.backbone));
        prop_assert!(back.head.unwrap().weights.value.bit_eq(&ck.head.unwrap().weights.value));
    }
}

#[test]
fn random_inits_give_finite_logits() {
    let cfg = BackboneConfig::default();
    for seed in 0..100 {
        let (m, h) = init_model(&cfg, 5, seed).unwrap();
        let mut r = rng::stream(seed, "probe", &[]);
        let x = Tensor::matrix(4, 32, (0..128).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap();
        match h.logits(&m.forward(&x).unwrap()) {
            Ok(l) => assert!(l.is_finite(), "seed {seed}"),
            // an all-dead relu row is a defined error, never a NaN
            Err(e) => assert!(matches!(e, fewshot_core::Error::Degenerate(_)), "seed {seed}: {e}"),
        }
    }
}

#[test]
fn frozen_reference_is_independent() {
    let (mut m, _) = init_model(&config(3), 2, 4).unwrap();
    let reference = clone_frozen_reference(&m);
    assert!(reference.group_frozen().iter().all(|&f| f));
    assert!(m.group_frozen().iter().all(|&f| !f));
    let x = Tensor::matrix(2, 4, vec![0.3, -1.0, 2.0, 0.5, 1.0, 1.0, -0.2, 0.1]).unwrap();
    assert!(reference.forward(&x).unwrap().bit_eq(&m.forward(&x).unwrap()));
    for p in m.params_mut() {
        p.value.values_mut().iter_mut().for_each(|v| *v += 0.5);
    }
    assert!(!reference.forward(&x).unwrap().bit_eq(&m.forward(&x).unwrap()));
    assert!(reference.bit_eq(&clone_frozen_reference(&init_model(&config(3), 2, 4).unwrap().0)));
}
