use super::*;
use crate::tensor::Tape;

#[test]
fn glyph_prototypes_deterministic_and_distinct() {
    let a = glyph_task(8, 10, 42).unwrap();
    let b = glyph_task(8, 10, 42).unwrap();
    for (pa, pb) in a.prototypes.iter().zip(&b.prototypes) {
        assert_eq!(pa, pb);
    }
    for i in 0..8 {
        for j in (i + 1)..8 {
            let d2: f64 = a.prototypes[i]
                .data()
                .iter()
                .zip(a.prototypes[j].data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            assert!(d2 > 0.0, "prototypes {} and {} coincide", i, j);
        }
    }
}

#[test]
fn glyph_task_rejects_bad_parameters() {
    assert!(glyph_task(1, 10, 0).is_err());
    assert!(glyph_task(4, 7, 0).is_err());
    assert!(glyph_task(super::glyphs::MAX_GLYPH_CLASSES + 1, 10, 0).is_err());
}

#[test]
fn ridge_probe_separates_noiseless_prototypes() {
    // raw pixels of distinct prototypes: ridge fit classifies them perfectly
    let task = glyph_task(6, 10, 7).unwrap();
    let tape = Tape::new();
    let mut x = crate::tensor::Tensor::zeros(&[6, 100]);
    let mut y = crate::tensor::Tensor::zeros(&[6, 6]);
    for c in 0..6 {
        for j in 0..100 {
            x.set(&[c, j], task.prototypes[c].data()[j]);
        }
        y.set(&[c, c], 1.0);
    }
    let xv = tape.constant(x);
    let yv = tape.constant(y);
    let w = crate::meta_objective::ridge_solve(&tape, xv, yv, 0.1).unwrap();
    let p = tape.value(crate::meta_objective::ridge_predict(&tape, xv, w).unwrap());
    for c in 0..6 {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for j in 0..6 {
            if p.at(&[c, j]) > best_v {
                best_v = p.at(&[c, j]);
                best = j;
            }
        }
        assert_eq!(best, c);
    }
}

#[test]
fn two_moons_geometry_balance_and_determinism() {
    let b = two_moons(40, 0.0, 5).unwrap();
    assert_eq!(b.class_ids.iter().filter(|&&c| c == 0).count(), 20);
    for i in 0..40 {
        let (px, py) = (b.x.at(&[i, 0]), b.x.at(&[i, 1]));
        let d = if b.class_ids[i] == 0 {
            (px * px + py * py).sqrt()
        } else {
            ((px - 1.0).powi(2) + (py - 0.5).powi(2)).sqrt()
        };
        assert!((d - 1.0).abs() <= 1e-9, "point {} at distance {}", i, d);
    }
    assert_eq!(two_moons(40, 0.3, 9).unwrap(), two_moons(40, 0.3, 9).unwrap());
    assert!(two_moons(7, 0.0, 1).is_err());
}

#[test]
fn permutation_identity_inverse_and_composition() {
    let batch = two_moons(10, 0.2, 11).unwrap();
    let id = vec![0usize, 1];
    assert_eq!(permute_inputs(&batch, &id).unwrap(), batch);

    let task = glyph_task(4, 8, 3).unwrap();
    let spec_dim = 64;
    let mut x = crate::tensor::Tensor::zeros(&[4, spec_dim]);
    for c in 0..4 {
        for j in 0..spec_dim {
            x.set(&[c, j], task.prototypes[c].data()[j]);
        }
    }
    let batch = Batch {
        x,
        targets: crate::tensor::Tensor::zeros(&[4, 7]),
        class_ids: vec![0, 1, 2, 3],
    };
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
    let mut pi: Vec<usize> = (0..spec_dim).collect();
    pi.shuffle(&mut rng);
    let mut rho: Vec<usize> = (0..spec_dim).collect();
    rho.shuffle(&mut rng);

    // inverse round trip
    let mut pi_inv = vec![0usize; spec_dim];
    for (j, &p) in pi.iter().enumerate() {
        pi_inv[p] = j;
    }
    let once = permute_inputs(&batch, &pi).unwrap();
    let back = permute_inputs(&once, &pi_inv).unwrap();
    assert_eq!(back.x, batch.x);

    // composition
    let twice = permute_inputs(&once, &rho).unwrap();
    let composed = compose_permutations(&pi, &rho);
    let direct = permute_inputs(&batch, &composed).unwrap();
    assert_eq!(twice.x, direct.x);

    // non-bijection rejected
    let bad = vec![0usize; spec_dim];
    assert!(permute_inputs(&batch, &bad).is_err());
}

fn image_batch(grid: usize) -> Batch {
    let task = glyph_task(3, grid, 21).unwrap();
    let dim = grid * grid;
    let mut x = crate::tensor::Tensor::zeros(&[3, dim]);
    for c in 0..3 {
        for j in 0..dim {
            x.set(&[c, j], task.prototypes[c].data()[j]);
        }
    }
    let mut targets = crate::tensor::Tensor::zeros(&[3, 3 + N_REG]);
    for c in 0..3 {
        targets.set(&[c, c], 1.0);
    }
    Batch { x, targets, class_ids: vec![0, 1, 2] }
}

#[test]
fn zero_augmentation_leaves_pixels_unchanged() {
    let batch = image_batch(10);
    let out = augment(&batch, &AugmentParams::none(), 10, 1, 2).unwrap();
    assert_eq!(out.x, batch.x);
    // regression block is deterministic: angle 0 encodes to -1, shifts to 0
    for i in 0..3 {
        assert_eq!(out.targets.at(&[i, 3]), -1.0);
        assert_eq!(out.targets.at(&[i, 4]), 0.0);
        assert_eq!(out.targets.at(&[i, 5]), 0.0);
    }
}

#[test]
fn double_half_turn_is_identity() {
    let batch = image_batch(9);
    let row: Vec<f64> = (0..81).map(|j| batch.x.at(&[0, j])).collect();
    let once = super::augment::rotate_nn(&row, 9, 180.0);
    let twice = super::augment::rotate_nn(&once, 9, 180.0);
    assert_eq!(twice, row);
}

#[test]
fn regression_targets_bounded_and_recoverable() {
    let batch = image_batch(10);
    let params = AugmentParams::default();
    for draw in 0..200u64 {
        let out = augment(&batch, &params, 10, 33, draw).unwrap();
        for i in 0..3 {
            for k in 0..N_REG {
                let v = out.targets.at(&[i, 3 + k]);
                assert!((-1.0..=1.0).contains(&v), "target {} out of range", v);
            }
            // shifts decode to integers within the configured range
            let s = out.targets.at(&[i, 4]) * params.shift_max_px as f64;
            assert!((s - s.round()).abs() <= 1e-12);
            assert!(s.abs() <= params.shift_max_px as f64);
        }
    }
}

#[test]
fn task_dropout_mask_fixed_across_draws() {
    let batch = image_batch(10);
    let params = AugmentParams {
        rotation_max_deg: 0.0,
        shift_max_px: 0,
        noise_std: 0.0,
        per_task_dropout_p: 0.4,
        per_example_dropout_p: 0.0,
    };
    let a = augment(&batch, &params, 10, 77, 0).unwrap();
    let b = augment(&batch, &params, 10, 77, 1).unwrap();
    // the same pixels are zeroed in every draw of the task
    let zeroed = |out: &Batch| -> Vec<bool> {
        (0..100).map(|j| (0..3).all(|i| out.x.at(&[i, j]) == 0.0)).collect()
    };
    assert_eq!(zeroed(&a), zeroed(&b));
    // and some pixel that was lit is now dark
    let dropped = (0..100).any(|j| batch.x.at(&[0, j]) != 0.0 && a.x.at(&[0, j]) == 0.0);
    assert!(dropped);
}

#[test]
fn idx_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let img_path = dir.path().join("imgs.idx");
    let lbl_path = dir.path().join("lbls.idx");
    let pixels: Vec<f64> = (0..32).map(|v| v as f64 / 31.0).collect();
    write_idx_images(&img_path, 2, 4, 4, &pixels).unwrap();
    match load_idx(&img_path).unwrap() {
        IdxData::Images { n, rows, cols, pixels: got } => {
            assert_eq!((n, rows, cols), (2, 4, 4));
            assert_eq!(got.len(), 32);
            for (g, want) in got.iter().zip(&pixels) {
                // one byte of quantization each way
                assert!((g - want).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
        _ => panic!("expected images"),
    }
    write_idx_labels(&lbl_path, &[3, 1, 4, 1, 5]).unwrap();
    assert_eq!(load_idx(&lbl_path).unwrap(), IdxData::Labels(vec![3, 1, 4, 1, 5]));

    // bad magic
    let bad_path = dir.path().join("bad.idx");
    std::fs::write(&bad_path, 0x1234_5678u32.to_be_bytes()).unwrap();
    assert!(matches!(load_idx(&bad_path), Err(crate::error::Error::Idx(_))));

    // truncated payload
    let trunc_path = dir.path().join("trunc.idx");
    let mut bytes = Vec::new();
    bytes.extend(0x0000_0803u32.to_be_bytes());
    for d in [2u32, 4, 4] {
        bytes.extend(d.to_be_bytes());
    }
    bytes.extend([0u8; 10]);
    std::fs::write(&trunc_path, bytes).unwrap();
    assert!(load_idx(&trunc_path).is_err());
}

#[test]
fn pooling_halves_dimensions_by_average() {
    let pixels: Vec<f64> = (0..16).map(|v| v as f64).collect();
    let out = pool2x2(&pixels, 1, 4, 4).unwrap();
    assert_eq!(out.len(), 4);
    // top-left block of a row-major 4x4 ramp: 0, 1, 4, 5
    assert_eq!(out[0], 2.5);
    assert!(pool2x2(&pixels, 1, 4, 3).is_err() || pool2x2(&pixels[..12], 1, 4, 3).is_err());
}

#[test]
fn sample_task_reproducible_and_uniform_over_sources() {
    let cfg = TaskDistribution::default();
    assert_eq!(sample_task(&cfg, 9).unwrap(), sample_task(&cfg, 9).unwrap());

    let n = 10_000;
    let mut moons = 0usize;
    for seed in 0..n {
        if matches!(
            sample_task(&cfg, seed as u64).unwrap().source,
            TaskSource::TwoMoons { .. }
        ) {
            moons += 1;
        }
    }
    // binomial(n, 0.5): 3 sigma around n/2
    let sigma = (n as f64 * 0.25).sqrt();
    assert!(
        (moons as f64 - n as f64 / 2.0).abs() <= 3.0 * sigma,
        "two-moons frequency {} of {}",
        moons,
        n
    );
}

#[test]
fn sampled_tasks_have_distinct_permutations() {
    let cfg = TaskDistribution::default();
    let mut perms = std::collections::HashSet::new();
    let mut glyph_tasks = 0;
    for seed in 0..200u64 {
        let t = sample_task(&cfg, seed).unwrap();
        if matches!(t.source, TaskSource::Glyphs { .. }) {
            glyph_tasks += 1;
            assert!(perms.insert(t.permutation.clone()), "permutation collision");
        }
    }
    assert!(glyph_tasks > 50);
}

#[test]
fn sample_batch_balanced_and_deterministic() {
    let cfg = TaskDistribution::default();
    // find a glyph task
    let spec = (0..100u64)
        .map(|s| sample_task(&cfg, s).unwrap())
        .find(|t| matches!(t.source, TaskSource::Glyphs { .. }))
        .unwrap();
    let b = 2 * spec.n_classes;
    let batch = sample_batch(&spec, b, 0).unwrap();
    assert_eq!(batch.len(), b);
    assert_eq!(batch.x.shape(), &[b, spec.input_dim]);
    assert_eq!(batch.targets.shape(), &[b, spec.target_dim()]);
    for c in 0..spec.n_classes {
        assert_eq!(batch.class_ids.iter().filter(|&&x| x == c).count(), 2);
    }
    // one-hot class block matches class_ids
    for (i, &c) in batch.class_ids.iter().enumerate() {
        for j in 0..spec.n_classes {
            let want = if j == c { 1.0 } else { 0.0 };
            assert_eq!(batch.targets.at(&[i, j]), want);
        }
    }
    assert_eq!(batch, sample_batch(&spec, b, 0).unwrap());
    assert_ne!(batch, sample_batch(&spec, b, 1).unwrap());
}
