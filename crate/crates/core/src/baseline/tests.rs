use super::*;
use crate::base_model::{ArchSpec, Activation};
use crate::tasks::{AugmentParams, TaskSource};

fn moons_spec(seed: u64) -> TaskSpec {
    TaskSpec {
        source: TaskSource::TwoMoons { noise_std: 0.1 },
        n_classes: 2,
        input_dim: 2,
        permutation: vec![0, 1],
        augmentation: AugmentParams::none(),
        seed,
    }
}

fn arch() -> ArchSpec {
    ArchSpec::new(vec![2, 8, 4], Activation::Relu).unwrap()
}

/// Two well-separated Gaussian blobs, `per_class` points each.
fn blobs(per_class: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    let mut classes = Vec::new();
    for i in 0..2 * per_class {
        let cls = i % 2;
        let center = if cls == 0 { -2.0 } else { 2.0 };
        data.push(center + 0.3 * rng.gen::<f64>());
        data.push(center + 0.3 * rng.gen::<f64>());
        classes.push(cls);
    }
    (Tensor::new(vec![2 * per_class, 2], data).unwrap(), classes)
}

#[test]
fn cross_entropy_matches_a_hand_computed_value() {
    let tape = Tape::new();
    let logits = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap());
    let loss = cross_entropy(&tape, logits, &[0, 1]).unwrap();
    // -log softmax picked per row, averaged
    let r0 = -(1.0f64 - (1.0f64.exp() + (-1.0f64).exp()).ln());
    let r1 = -(2.0f64 - (0.5f64.exp() + 2.0f64.exp()).ln());
    let expect = (r0 + r1) / 2.0;
    assert!((tape.value(loss).data()[0] - expect).abs() < 1e-12);
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let vals = vec![0.3, -0.7, 1.2, 0.1, -0.4, 0.9];
    let classes = [2usize, 0];
    let tape = Tape::new();
    let logits = tape.leaf(Tensor::new(vec![2, 3], vals.clone()).unwrap());
    let loss = cross_entropy(&tape, logits, &classes).unwrap();
    let grad = &tape.backward(loss, &[logits]).unwrap()[0];
    let h = 1e-6;
    for i in 0..vals.len() {
        let eval = |delta: f64| {
            let mut v = vals.clone();
            v[i] += delta;
            let t = Tape::new();
            let l = t.leaf(Tensor::new(vec![2, 3], v).unwrap());
            t.value(cross_entropy(&t, l, &classes).unwrap()).data()[0]
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        assert!(
            (grad.data()[i] - fd).abs() < 1e-7,
            "coord {}: grad {} vs fd {}",
            i,
            grad.data()[i],
            fd
        );
    }
}

#[test]
fn separable_blobs_reach_perfect_accuracy() {
    let (train_x, train_c) = blobs(10, 1);
    let (test_x, test_c) = blobs(10, 2);
    let mut cfg = BaselineConfig::default();
    cfg.steps = 150;
    let out =
        train_and_eval(&arch(), &moons_spec(0), &cfg, 5, &train_x, &train_c, &test_x, &test_c)
            .unwrap();
    assert_eq!(out.accuracy, 1.0, "losses: {:?}", out.losses.last());
}

#[test]
fn training_loss_decreases_from_the_first_step() {
    let (train_x, train_c) = blobs(10, 3);
    let mut cfg = BaselineConfig::default();
    cfg.steps = 20;
    let out =
        train_and_eval(&arch(), &moons_spec(0), &cfg, 7, &train_x, &train_c, &train_x, &train_c)
            .unwrap();
    assert_eq!(out.losses.len(), 21);
    assert!(out.losses[1] < out.losses[0]);
    assert!(out.losses[20] < out.losses[0]);
    assert!(out.losses.iter().all(|l| l.is_finite()));
}

#[test]
fn labels_shuffled_against_the_inputs_stay_near_chance() {
    // train on random labels, test on fresh independent random labels:
    // nothing learnable, so accuracy should hover around 1/2
    let (x, _) = blobs(20, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let train_c: Vec<usize> = (0..40).map(|_| rng.gen_range(0..2)).collect();
    let test_c: Vec<usize> = (0..40).map(|_| rng.gen_range(0..2)).collect();
    let mut cfg = BaselineConfig::default();
    cfg.steps = 100;
    let out =
        train_and_eval(&arch(), &moons_spec(0), &cfg, 9, &x, &train_c, &x, &test_c).unwrap();
    // binomial n=40 p=0.5: 3 sigma is about 0.24
    assert!(out.accuracy > 0.25 && out.accuracy < 0.75, "accuracy {}", out.accuracy);
}

#[test]
fn two_moons_baseline_learns_the_task() {
    let mut cfg = BaselineConfig::default();
    cfg.steps = 300;
    let wide = ArchSpec::new(vec![2, 16, 8], Activation::Relu).unwrap();
    // 20 labeled points is a small draw, so average held-out accuracy over
    // a few seeds instead of pinning a single unlucky sample
    let mut acc_sum = 0.0;
    for seed in [13u64, 14, 15, 16] {
        let out = baseline_supervised(&wide, &moons_spec(21), &cfg, seed).unwrap();
        assert!(out.losses.last().unwrap() < &out.losses[0]);
        acc_sum += out.accuracy;
    }
    let mean = acc_sum / 4.0;
    assert!(mean >= 0.75, "mean accuracy {}", mean);
}

#[test]
fn invalid_settings_are_rejected() {
    let mut cfg = BaselineConfig::default();
    cfg.labeled_per_class = 0;
    assert!(baseline_supervised(&arch(), &moons_spec(0), &cfg, 1).is_err());
    let wide = ArchSpec::new(vec![5, 4, 3], Activation::Relu).unwrap();
    assert!(baseline_supervised(&wide, &moons_spec(0), &BaselineConfig::default(), 1).is_err());
}
