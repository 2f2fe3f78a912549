use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::base_model::{Activation, ArchSpec, BaseParams};

fn identity(n: usize) -> Vec<usize> {
    (0..n).collect()
}

#[test]
fn known_column_scales_to_the_expected_pgm() {
    let arch = ArchSpec::new(vec![4, 3, 2], Activation::Relu).unwrap();
    let mut phi = BaseParams::init(&arch, 0);
    // unit 0 reads pixels [1, 3, 0, 2] -> min-max scaled [1/3, 1, 0, 2/3]
    let col = [1.0, 3.0, 0.0, 2.0];
    for (j, &v) in col.iter().enumerate() {
        phi.layers[0].w.set(&[j, 0], v);
    }
    let filters = extract_filters(&phi, &identity(4)).unwrap();
    assert_eq!(filters.len(), 3);
    let f = &filters[0];
    assert_eq!(f.grid, 2);
    assert_eq!(f.raw.data(), &col);
    assert_eq!(f.scaled.data(), &[1.0 / 3.0, 1.0, 0.0, 2.0 / 3.0]);
    let pgm = f.to_pgm();
    assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
    assert_eq!(&pgm[pgm.len() - 4..], &[85u8, 255, 0, 170]);
}

#[test]
fn unpermutation_round_trips() {
    let arch = ArchSpec::new(vec![4, 3, 2], Activation::Relu).unwrap();
    let phi0 = BaseParams::init(&arch, 7);
    let perm = vec![2usize, 0, 3, 1];
    // a model trained on permuted inputs whose weight rows follow the
    // permutation: row j of the permuted model reads original pixel perm[j]
    let mut phi_p = phi0.clone();
    for j in 0..4 {
        for u in 0..3 {
            phi_p.layers[0].w.set(&[j, u], phi0.layers[0].w.at(&[perm[j], u]));
        }
    }
    let plain = extract_filters(&phi0, &identity(4)).unwrap();
    let unpermuted = extract_filters(&phi_p, &perm).unwrap();
    for (a, b) in plain.iter().zip(&unpermuted) {
        assert_eq!(a.raw, b.raw);
        assert_eq!(a.scaled, b.scaled);
    }
}

#[test]
fn filter_count_and_grid_requirements() {
    let arch = ArchSpec::new(vec![9, 5, 2], Activation::Relu).unwrap();
    let phi = BaseParams::init(&arch, 1);
    let filters = extract_filters(&phi, &identity(9)).unwrap();
    assert_eq!(filters.len(), 5); // one per first-layer unit
    assert!(filters.iter().all(|f| f.grid == 3));

    let odd = ArchSpec::new(vec![5, 4, 2], Activation::Relu).unwrap();
    let phi = BaseParams::init(&odd, 1);
    let err = extract_filters(&phi, &identity(5)).unwrap_err().to_string();
    assert!(err.contains("square"), "unexpected error: {}", err);
    assert!(extract_filters(&phi, &identity(4)).is_err()); // wrong perm length
}

#[test]
fn filters_csv_lists_raw_values() {
    let arch = ArchSpec::new(vec![4, 2, 2], Activation::Relu).unwrap();
    let phi = BaseParams::init(&arch, 3);
    let filters = extract_filters(&phi, &identity(4)).unwrap();
    let mut buf = Vec::new();
    write_filters_csv(&filters, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "unit,pixel0,pixel1,pixel2,pixel3");
    assert_eq!(lines.len(), 3);
    let first: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(first, filters[0].raw.data()[0]);
}

#[test]
fn jacobi_matches_hand_computed_eigenvalues() {
    // [[2,1],[1,2]] has eigenvalues 3 and 1
    let a = Tensor::new(vec![2, 2], vec![2.0, 1.0, 1.0, 2.0]).unwrap();
    let e = symmetric_eigenvalues(&a).unwrap();
    assert!((e[0] - 3.0).abs() < 1e-12 && (e[1] - 1.0).abs() < 1e-12);

    let d = Tensor::new(vec![3, 3], vec![5.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
    assert_eq!(symmetric_eigenvalues(&d).unwrap(), vec![5.0, 2.0, -1.0]);

    let asym = Tensor::new(vec![2, 2], vec![1.0, 2.0, 0.0, 1.0]).unwrap();
    assert!(symmetric_eigenvalues(&asym).is_err());
}

proptest! {
    #[test]
    fn eigenvalues_preserve_trace_and_frobenius_norm(
        vals in proptest::collection::vec(-1.0f64..1.0, 10)
    ) {
        // build a symmetric 4x4 from 10 free entries
        let mut a = Tensor::zeros(&[4, 4]);
        let mut it = vals.iter();
        for i in 0..4 {
            for j in i..4 {
                let v = *it.next().unwrap();
                a.set(&[i, j], v);
                a.set(&[j, i], v);
            }
        }
        let e = symmetric_eigenvalues(&a).unwrap();
        prop_assert!(e.windows(2).all(|w| w[0] >= w[1]));
        let trace: f64 = (0..4).map(|i| a.at(&[i, i])).sum();
        prop_assert!((e.iter().sum::<f64>() - trace).abs() < 1e-9);
        let frob2: f64 = a.data().iter().map(|v| v * v).sum();
        prop_assert!((e.iter().map(|v| v * v).sum::<f64>() - frob2).abs() < 1e-9);
    }
}

#[test]
fn rank_one_data_is_explained_by_one_component() {
    let mut data = Tensor::zeros(&[50, 6]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dir: Vec<f64> = (0..6).map(|i| (i as f64 + 1.0) / 6.0).collect();
    for i in 0..50 {
        let t: f64 = rand::Rng::gen_range(&mut rng, -1.0..1.0);
        for j in 0..6 {
            data.set(&[i, j], 3.0 + t * dir[j]);
        }
    }
    let pca = pca_explained_variance(&data).unwrap();
    assert!((pca.fractions[0] - 1.0).abs() < 1e-9);
    assert!(pca.eigenvalues[1..].iter().all(|&e| e < 1e-9 * pca.eigenvalues[0]));
}

#[test]
fn cumulative_curve_is_monotone_and_ends_at_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data = Tensor::randn(&[100, 8], 1.0, &mut rng);
    let pca = pca_explained_variance(&data).unwrap();
    assert!(pca.cumulative.windows(2).all(|w| w[1] >= w[0] - 1e-15));
    assert!((pca.cumulative.last().unwrap() - 1.0).abs() < 1e-9);
    assert!(pca.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn isotropic_gaussian_spreads_variance_evenly() {
    let d = 32;
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let data = Tensor::randn(&[n, d], 1.0, &mut rng);
    let pca = pca_explained_variance(&data).unwrap();
    // sample-covariance eigenvalues of white data concentrate in
    // (1 +/- sqrt(d/n))^2, about 12% relative spread here; allow 3x the
    // one-sided deviation
    let even = 1.0 / d as f64;
    for f in &pca.fractions {
        assert!((f - even).abs() < 0.35 * even, "fraction {} vs {}", f, even);
    }
}

#[test]
fn degenerate_inputs_are_rejected() {
    let one = Tensor::zeros(&[1, 4]);
    assert!(pca_explained_variance(&one).is_err());
    let constant = Tensor::filled(&[10, 4], 2.5);
    assert!(pca_explained_variance(&constant).is_err());
}

#[test]
fn pca_csv_has_one_row_per_component() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let data = Tensor::randn(&[40, 5], 1.0, &mut rng);
    let pca = pca_explained_variance(&data).unwrap();
    let mut buf = Vec::new();
    write_pca_csv(&pca, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "component,eigenvalue,fraction,cumulative");
    assert_eq!(lines.len(), 6);
    let last: f64 = lines[5].split(',').nth(3).unwrap().parse().unwrap();
    assert!((last - 1.0).abs() < 1e-9);
}
