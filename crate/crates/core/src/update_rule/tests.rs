use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::base_model::{forward, Activation, ArchSpec, BaseParams};
use crate::tensor::{Tape, Tensor};

fn tiny_cfg() -> UpdateRuleConfig {
    UpdateRuleConfig {
        hdims: 6,
        deltadims: 5,
        gradc: 2,
        topdeltasize: 7,
        computehsize: 6,
        inner_lr: 3e-4,
        b_fixed: 4,
    }
}

fn tiny_setup(seed: u64) -> (ArchSpec, BaseParams, UpdateRuleParams) {
    let arch = ArchSpec::new(vec![3, 4, 3], Activation::Relu).unwrap();
    let phi = BaseParams::init(&arch, seed);
    let theta = UpdateRuleParams::init(&tiny_cfg(), seed + 100).unwrap();
    (arch, phi, theta)
}

#[test]
fn init_shapes_match_config() {
    let cfg = tiny_cfg();
    let theta = UpdateRuleParams::init(&cfg, 1).unwrap();
    assert_eq!(theta.error_prop_w.shape(), &[cfg.hdims, cfg.deltadims]);
    assert_eq!(theta.error_prop_b.shape(), &[cfg.deltadims]);
    assert_eq!(theta.merge_w.shape(), &[10]);
    assert_eq!(theta.bias_readout.shape(), &[cfg.hdims]);
    assert_eq!(theta.topd_convs[0].kernel.shape(), &[5, 1, cfg.topdeltasize]);
    assert_eq!(theta.topd_convs[1].kernel.shape(), &[3, cfg.topdeltasize, cfg.b_fixed]);
    assert_eq!(theta.topd_convs[5].kernel.shape(), &[3, cfg.topdeltasize, cfg.deltadims]);
    assert_eq!(
        theta.h_convs[0].kernel.shape(),
        &[3, cfg.h_stacked_channels(), cfg.computehsize]
    );
    assert_eq!(theta.h_convs[3].kernel.shape(), &[3, cfg.computehsize, cfg.hdims]);
    for r in &theta.readouts {
        assert_eq!(r.pa.shape(), &[cfg.hdims, cfg.gradc]);
        assert_eq!(r.pb.shape(), &[cfg.hdims, cfg.gradc]);
    }
}

#[test]
fn init_deterministic_in_seed() {
    let cfg = tiny_cfg();
    let a = UpdateRuleParams::init(&cfg, 7).unwrap();
    let b = UpdateRuleParams::init(&cfg, 7).unwrap();
    assert_eq!(a, b);
    let c = UpdateRuleParams::init(&cfg, 8).unwrap();
    assert_ne!(a, c);
}

#[test]
fn top_d_shape_and_batch_check() {
    let (_, _, theta) = tiny_setup(2);
    let tape = Tape::new();
    let tv = theta.lift(&tape, false);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = tape.constant(Tensor::randn(&[4, 5], 1.0, &mut rng));
    let out = top_d(&tape, &tv, x).unwrap();
    assert_eq!(tape.shape(out), vec![4, 5, 5]);
    let bad = tape.constant(Tensor::randn(&[3, 5], 1.0, &mut rng));
    assert!(top_d(&tape, &tv, bad).is_err());
}

#[test]
fn top_d_zero_kernels_give_zero_output() {
    let (_, _, mut theta) = tiny_setup(4);
    for c in &mut theta.topd_convs {
        c.kernel = Tensor::zeros(c.kernel.shape());
        c.bias = Tensor::zeros(c.bias.shape());
    }
    let tape = Tape::new();
    let tv = theta.lift(&tape, false);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = tape.constant(Tensor::randn(&[4, 6], 1.0, &mut rng));
    let out = tape.value(top_d(&tape, &tv, x).unwrap());
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn top_d_matches_explicit_step_sequence() {
    // same theta, the eleven steps composed by hand from tape primitives
    let (_, _, theta) = tiny_setup(6);
    let tape = Tape::new();
    let tv = theta.lift(&tape, false);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let got = tape.value(top_d(&tape, &tv, tape.constant(x.clone())).unwrap());

    let t2 = Tape::new();
    let conv = |m, axis, c: &ConvParams| {
        let k = t2.constant(c.kernel.clone());
        let y = t2.conv1d_axis(m, axis, k).unwrap();
        let cdim = t2.shape(y)[2];
        let bias = t2.reshape(t2.constant(c.bias.clone()), vec![1, 1, cdim]).unwrap();
        t2.add(y, bias).unwrap()
    };
    let bnrelu = |m, n: &NormParams| {
        let cdim = t2.shape(m)[2];
        let s = t2.reshape(t2.constant(n.scale.clone()), vec![1, 1, cdim]).unwrap();
        let o = t2.reshape(t2.constant(n.offset.clone()), vec![1, 1, cdim]).unwrap();
        t2.relu(t2.batch_norm(m, &[0, 1], s, o, crate::base_model::BN_EPS).unwrap()).unwrap()
    };
    let m0 = t2.reshape(t2.constant(x), vec![4, 5, 1]).unwrap();
    let m2 = bnrelu(conv(m0, 0, &theta.topd_convs[0]), &theta.topd_norms[0]);
    let m4 = bnrelu(conv(m2, 1, &theta.topd_convs[1]), &theta.topd_norms[1]);
    let m6 = bnrelu(conv(m4, 1, &theta.topd_convs[2]), &theta.topd_norms[2]);
    let m8 = bnrelu(conv(m6, 0, &theta.topd_convs[3]), &theta.topd_norms[3]);
    let m10 = bnrelu(conv(m8, 0, &theta.topd_convs[4]), &theta.topd_norms[4]);
    let m11 = conv(m10, 0, &theta.topd_convs[5]);
    let want = t2.value(m11);
    for (a, b) in got.data().iter().zip(want.data()) {
        assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
    }
}

#[test]
fn error_propagate_constant_bias_case() {
    let (_, _, mut theta) = tiny_setup(8);
    theta.error_prop_b = Tensor::filled(&[5], 0.75);
    let tape = Tape::new();
    let tv = theta.lift(&tape, false);
    let d = tape.constant(Tensor::zeros(&[4, 3, 5]));
    let h = tape.constant(Tensor::zeros(&[4, 3, 6]));
    let z = tape.constant(Tensor::zeros(&[4, 3]));
    let delta = tape.value(error_propagate(&tape, &tv, d, h, z).unwrap());
    assert!(delta.data().iter().all(|&v| v == 0.75));
}

#[test]
fn error_propagate_matches_loop_oracle() {
    let (_, _, theta) = tiny_setup(9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let d = Tensor::randn(&[4, 3, 5], 1.0, &mut rng);
    let h = Tensor::randn(&[4, 3, 6], 1.0, &mut rng);
    let z = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let tape = Tape::new();
    let tv = theta.lift(&tape, false);
    let got = tape.value(
        error_propagate(
            &tape,
            &tv,
            tape.constant(d.clone()),
            tape.constant(h.clone()),
            tape.constant(z.clone()),
        )
        .unwrap(),
    );
    for i in 0..4 {
        for j in 0..3 {
            let sig = 1.0 / (1.0 + (-z.at(&[i, j])).exp());
            for dd in 0..5 {
                let mut want = d.at(&[i, j, dd]) * sig + theta.error_prop_b.at(&[dd]);
                for k in 0..6 {
                    want += theta.error_prop_w.at(&[k, dd]) * h.at(&[i, j, k]);
                }
                let g = got.at(&[i, j, dd]);
                assert!((g - want).abs() <= 1e-12, "{} vs {}", g, want);
            }
        }
    }
}

#[test]
fn propagate_down_matches_loops_and_normalizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let delta = Tensor::randn(&[4, 3, 5], 1.0, &mut rng);
    let v = Tensor::randn(&[7, 3], 1.0, &mut rng);
    let tape = Tape::new();
    let got = tape.value(
        propagate_down(&tape, tape.constant(delta.clone()), tape.constant(v.clone())).unwrap(),
    );
    assert_eq!(got.shape(), &[4, 7, 5]);
    for i in 0..4 {
        for m in 0..7 {
            // raw propagated vector by loops, then the same normalization
            let mut raw = [0.0; 5];
            for dd in 0..5 {
                for j in 0..3 {
                    raw[dd] += delta.at(&[i, j, dd]) * v.at(&[m, j]);
                }
            }
            let ms: f64 = raw.iter().map(|x| x * x).sum::<f64>() / 5.0;
            let denom = (ms + crate::meta_objective::NORM_EPS_SQ).sqrt();
            let mut got_ms = 0.0;
            for dd in 0..5 {
                let g = got.at(&[i, m, dd]);
                assert!((g - raw[dd] / denom).abs() <= 1e-12);
                got_ms += g * g;
            }
            // feature RMS pinned to 1 wherever the raw vector is nonzero
            if ms > 0.0 {
                assert!(((got_ms / 5.0).sqrt() - 1.0).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn positional_embedding_unit_zero() {
    let (sin, cos) = positional_embeddings(9);
    assert_eq!(sin[0], 0.0);
    assert_eq!(cos[0], 1.0);
    assert_eq!(sin.len(), 9);
}

#[test]
fn compute_h_shape_and_batch_check() {
    let (_, _, theta) = tiny_setup(12);
    let tape = Tape::new();
    let tv = theta.lift(&tape, false);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let d = tape.constant(Tensor::randn(&[4, 4, 5], 1.0, &mut rng));
    let x = tape.constant(Tensor::randn(&[4, 4], 1.0, &mut rng));
    let z = tape.constant(Tensor::randn(&[4, 4], 1.0, &mut rng));
    let w = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
    let w_above = tape.constant(Tensor::randn(&[4, 3], 1.0, &mut rng));
    let bias = tape.constant(Tensor::randn(&[4], 1.0, &mut rng));
    let h = compute_h(&tape, &tv, d, x, z, w, w_above, bias).unwrap();
    assert_eq!(tape.shape(h), vec![4, 4, 6]);

    let x_bad = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
    assert!(compute_h(&tape, &tv, d, x_bad, z, w, w_above, bias).is_err());
}

#[test]
fn compute_h_matches_explicit_step_sequence() {
    let (_, _, theta) = tiny_setup(14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (b, n) = (4usize, 5usize);
    let d = Tensor::randn(&[b, n, 5], 1.0, &mut rng);
    let x = Tensor::randn(&[b, n], 1.0, &mut rng);
    let z = Tensor::randn(&[b, n], 1.0, &mut rng);
    let w = Tensor::randn(&[3, n], 1.0, &mut rng);
    let w_above = Tensor::randn(&[n, 2], 1.0, &mut rng);
    let bias = Tensor::randn(&[n], 1.0, &mut rng);

    let tape = Tape::new();
    let tv = theta.lift(&tape, false);
    let got = tape.value(
        compute_h(
            &tape,
            &tv,
            tape.constant(d.clone()),
            tape.constant(x.clone()),
            tape.constant(z.clone()),
            tape.constant(w.clone()),
            tape.constant(w_above.clone()),
            tape.constant(bias.clone()),
        )
        .unwrap(),
    );

    // hand-composed: inputs stacked with positional embeddings, error
    // features appended, tiled weight statistics and bias, then the
    // batch/unit convolution stack
    let t2 = Tape::new();
    let conv = |m, axis, c: &ConvParams| {
        let k = t2.constant(c.kernel.clone());
        let y = t2.conv1d_axis(m, axis, k).unwrap();
        let cdim = t2.shape(y)[2];
        let bv = t2.reshape(t2.constant(c.bias.clone()), vec![1, 1, cdim]).unwrap();
        t2.add(y, bv).unwrap()
    };
    let bn = |m, nrm: &NormParams| {
        let cdim = t2.shape(m)[2];
        let s = t2.reshape(t2.constant(nrm.scale.clone()), vec![1, 1, cdim]).unwrap();
        let o = t2.reshape(t2.constant(nrm.offset.clone()), vec![1, 1, cdim]).unwrap();
        t2.batch_norm(m, &[0, 1], s, o, crate::base_model::BN_EPS).unwrap()
    };
    let (sin, cos) = positional_embeddings(n);
    let p0 = t2
        .broadcast_to(t2.constant(Tensor::new(vec![1, n, 1], sin).unwrap()), &[b, n, 1])
        .unwrap();
    let p1 = t2
        .broadcast_to(t2.constant(Tensor::new(vec![1, n, 1], cos).unwrap()), &[b, n, 1])
        .unwrap();
    let x3 = t2.reshape(t2.constant(x), vec![b, n, 1]).unwrap();
    let z3 = t2.reshape(t2.constant(z), vec![b, n, 1]).unwrap();
    let m0 = t2.concat(&[x3, z3, p0, p1], 2).unwrap();
    let m1 = t2.concat(&[m0, t2.constant(d)], 2).unwrap();
    // statistics by plain loops, tiled
    let stats_of = |w: &Tensor, axis: usize| -> Tensor {
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        let outer = if axis == 0 { cols } else { rows };
        let inner = if axis == 0 { rows } else { cols };
        let mut out = Tensor::zeros(&[1, outer, 4]);
        for j in 0..outer {
            let vals: Vec<f64> = (0..inner)
                .map(|i| if axis == 0 { w.at(&[i, j]) } else { w.at(&[j, i]) })
                .collect();
            let m = inner as f64;
            let l1 = vals.iter().map(|v| v.abs()).sum::<f64>() / m;
            let l2 = (vals.iter().map(|v| v * v).sum::<f64>() / m).sqrt();
            let mu = vals.iter().sum::<f64>() / m;
            let sd = (vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m).sqrt();
            out.set(&[0, j, 0], l1);
            out.set(&[0, j, 1], l2);
            out.set(&[0, j, 2], mu);
            out.set(&[0, j, 3], sd);
        }
        out
    };
    let s0 = t2.broadcast_to(t2.constant(stats_of(&w, 0)), &[b, n, 4]).unwrap();
    let s1 = t2.broadcast_to(t2.constant(stats_of(&w_above, 1)), &[b, n, 4]).unwrap();
    let m2 = bn(m1, &theta.h_input_norm);
    let bias3 = t2
        .broadcast_to(
            t2.reshape(t2.constant(bias), vec![1, n, 1]).unwrap(),
            &[b, n, 1],
        )
        .unwrap();
    let mut m = t2.concat(&[s0, s1, m2, bias3], 2).unwrap();
    for (i, axis) in [0usize, 1, 0, 1].into_iter().enumerate() {
        m = conv(m, axis, &theta.h_convs[i]);
        m = t2.relu(bn(m, &theta.h_norms[i])).unwrap();
    }
    let want = t2.value(m);
    assert_eq!(got.shape(), want.shape());
    for (a, bb) in got.data().iter().zip(want.data()) {
        assert!((a - bb).abs() <= 1e-9, "{} vs {}", a, bb);
    }
}

#[test]
fn low_rank_readout_zero_projection_and_loops() {
    let (_, _, theta) = tiny_setup(16);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let ha = Tensor::randn(&[4, 3, 6], 1.0, &mut rng);
    let hb = Tensor::randn(&[4, 5, 6], 1.0, &mut rng);

    // zero projection kills the output
    let tape = Tape::new();
    let zero_pair = ReadoutVars {
        pa: tape.constant(Tensor::zeros(&[6, 2])),
        pb: tape.constant(Tensor::randn(&[6, 2], 1.0, &mut rng)),
    };
    let out = tape.value(
        low_rank_readout(
            &tape,
            tape.constant(ha.clone()),
            tape.constant(hb.clone()),
            &zero_pair,
        )
        .unwrap(),
    );
    assert!(out.data().iter().all(|&v| v == 0.0));

    // quadruple-loop oracle with a real head
    let pair = &theta.readouts[RO_STATE];
    let tv = ReadoutVars {
        pa: tape.constant(pair.pa.clone()),
        pb: tape.constant(pair.pb.clone()),
    };
    let got = tape.value(
        low_rank_readout(&tape, tape.constant(ha.clone()), tape.constant(hb.clone()), &tv)
            .unwrap(),
    );
    assert_eq!(got.shape(), &[3, 5]);
    for p in 0..3 {
        for q in 0..5 {
            let mut want = 0.0;
            for i in 0..4 {
                for k in 0..2 {
                    let ra: f64 = (0..6).map(|c| ha.at(&[i, p, c]) * pair.pa.at(&[c, k])).sum();
                    let rb: f64 = (0..6).map(|c| hb.at(&[i, q, c]) * pair.pb.at(&[c, k])).sum();
                    want += ra * rb;
                }
            }
            want /= (4 * 6) as f64;
            assert!((got.at(&[p, q]) - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn low_rank_readout_single_example_rank_one_per_component() {
    // B=1, gradc=1: output is an outer product, so all 2x2 minors vanish
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let tape = Tape::new();
    let ha = tape.constant(Tensor::randn(&[1, 4, 6], 1.0, &mut rng));
    let hb = tape.constant(Tensor::randn(&[1, 5, 6], 1.0, &mut rng));
    let pair = ReadoutVars {
        pa: tape.constant(Tensor::randn(&[6, 1], 1.0, &mut rng)),
        pb: tape.constant(Tensor::randn(&[6, 1], 1.0, &mut rng)),
    };
    let out = tape.value(low_rank_readout(&tape, ha, hb, &pair).unwrap());
    for p in 0..3 {
        for q in 0..4 {
            let minor = out.at(&[p, q]) * out.at(&[p + 1, q + 1])
                - out.at(&[p, q + 1]) * out.at(&[p + 1, q]);
            assert!(minor.abs() <= 1e-12, "minor {}", minor);
        }
    }
}

fn layer_readouts_for(
    tape: &Tape,
    theta: &UpdateRuleParams,
    h_below: &Tensor,
    h_above: &Tensor,
) -> LayerReadouts {
    let tv = theta.lift(tape, false);
    LayerReadouts::compute(
        tape,
        &tv,
        tape.constant(h_below.clone()),
        tape.constant(h_above.clone()),
    )
    .unwrap()
}

#[test]
fn covariance_plane_zero_for_constant_activations_and_matches_loops() {
    let (_, _, theta) = tiny_setup(19);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let h_below = Tensor::randn(&[4, 3, 6], 1.0, &mut rng);
    let h_above = Tensor::randn(&[4, 5, 6], 1.0, &mut rng);
    let w = Tensor::randn(&[3, 5], 1.0, &mut rng);

    // constant activations center to zero
    let tape = Tape::new();
    let ro = layer_readouts_for(&tape, &theta, &h_below, &h_above);
    let xc = tape.constant(Tensor::filled(&[4, 3], 2.5));
    let xa = tape.constant(Tensor::filled(&[4, 5], -1.0));
    let planes =
        weight_planes(&tape, tape.constant(w.clone()), xc, xa, &ro).unwrap();
    let p6 = tape.value(planes[5]);
    assert!(p6.data().iter().all(|&v| v.abs() <= 1e-12));

    // random activations against explicit covariance loops
    let xb = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let xu = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let planes = weight_planes(
        &tape,
        tape.constant(w),
        tape.constant(xb.clone()),
        tape.constant(xu.clone()),
        &ro,
    )
    .unwrap();
    let p6 = tape.value(planes[5]);
    for m in 0..3 {
        for n in 0..5 {
            let mb: f64 = (0..4).map(|i| xb.at(&[i, m])).sum::<f64>() / 4.0;
            let nu: f64 = (0..4).map(|i| xu.at(&[i, n])).sum::<f64>() / 4.0;
            let want: f64 = (0..4)
                .map(|i| (xb.at(&[i, m]) - mb) * (xu.at(&[i, n]) - nu))
                .sum::<f64>()
                / 4.0;
            assert!((p6.at(&[m, n]) - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn first_plane_columns_have_unit_rms() {
    let (_, _, theta) = tiny_setup(21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let h_below = Tensor::randn(&[4, 3, 6], 1.0, &mut rng);
    let h_above = Tensor::randn(&[4, 5, 6], 1.0, &mut rng);
    let tape = Tape::new();
    let ro = layer_readouts_for(&tape, &theta, &h_below, &h_above);
    let w = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let xb = tape.constant(Tensor::randn(&[4, 3], 1.0, &mut rng));
    let xu = tape.constant(Tensor::randn(&[4, 5], 1.0, &mut rng));
    let planes = weight_planes(&tape, tape.constant(w), xb, xu, &ro).unwrap();
    let p1 = tape.value(planes[0]);
    for n in 0..5 {
        let ms: f64 = (0..3).map(|m| p1.at(&[m, n]).powi(2)).sum::<f64>() / 3.0;
        assert!((ms.sqrt() - 1.0).abs() <= 1e-9, "column rms {}", ms.sqrt());
    }
}

#[test]
fn scratch_symmetrization_is_symmetric_with_zero_diagonal() {
    let (_, _, theta) = tiny_setup(23);
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let h_below = Tensor::randn(&[4, 5, 6], 1.0, &mut rng);
    let tape = Tape::new();
    let tv = theta.lift(&tape, false);
    let hb = tape.constant(h_below);
    let s = low_rank_readout(&tape, hb, hb, &tv.readouts[RO_BELOW_LIN]).unwrap();
    let sym = tape.value(
        tape.mul(
            tape.add(s, tape.transpose(s).unwrap()).unwrap(),
            tape.constant({
                let mut m = Tensor::filled(&[5, 5], 1.0);
                for i in 0..5 {
                    m.set(&[i, i], 0.0);
                }
                m
            }),
        )
        .unwrap(),
    );
    for i in 0..5 {
        assert_eq!(sym.at(&[i, i]), 0.0);
        for j in 0..5 {
            assert!((sym.at(&[i, j]) - sym.at(&[j, i])).abs() <= 1e-12);
        }
    }
}

#[test]
fn merge_zero_coefficients_give_zero_update() {
    let (_, _, theta) = tiny_setup(25);
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let h_below = Tensor::randn(&[4, 3, 6], 1.0, &mut rng);
    let h_above = Tensor::randn(&[4, 5, 6], 1.0, &mut rng);
    let tape = Tape::new();
    let ro = layer_readouts_for(&tape, &theta, &h_below, &h_above);
    let w = tape.constant(Tensor::randn(&[3, 5], 1.0, &mut rng));
    let xb = tape.constant(Tensor::randn(&[4, 3], 1.0, &mut rng));
    let xu = tape.constant(Tensor::randn(&[4, 5], 1.0, &mut rng));
    let planes = weight_planes(&tape, w, xb, xu, &ro).unwrap();
    let zero_mw = tape.constant(Tensor::zeros(&[10]));
    let out = tape.value(merge_and_constrain(&tape, &planes, w, zero_mw).unwrap());
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn merged_update_never_grows_weight_norm_and_is_bounded() {
    let (_, _, theta) = tiny_setup(27);
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    for trial in 0..20 {
        let h_below = Tensor::randn(&[4, 3, 6], 1.0, &mut rng);
        let h_above = Tensor::randn(&[4, 5, 6], 1.0, &mut rng);
        let tape = Tape::new();
        let ro = layer_readouts_for(&tape, &theta, &h_below, &h_above);
        let wt = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let w = tape.constant(wt.clone());
        let xb = tape.constant(Tensor::randn(&[4, 3], 1.0, &mut rng));
        let xu = tape.constant(Tensor::randn(&[4, 5], 1.0, &mut rng));
        let planes = weight_planes(&tape, w, xb, xu, &ro).unwrap();
        let mw = tape.constant(Tensor::randn(&[10], 0.5, &mut rng));
        let out = tape.value(merge_and_constrain(&tape, &planes, w, mw).unwrap());
        assert!(out.rms() < 1.0, "trial {}: rms {}", trial, out.rms());
        // projection removes any component along w
        let frob: f64 = wt.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let inner: f64 = out
            .data()
            .iter()
            .zip(wt.data())
            .map(|(a, b)| a * b / frob)
            .sum();
        assert!(inner <= 1e-12, "trial {}: inner product {}", trial, inner);
    }
}

#[test]
fn bias_delta_constraint_and_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let tape = Tape::new();
    let h = Tensor::randn(&[4, 6, 5], 1.0, &mut rng);
    let r = Tensor::randn(&[5], 1.0, &mut rng);
    let out = tape.value(
        bias_delta(&tape, tape.constant(h.clone()), tape.constant(r.clone())).unwrap(),
    );
    assert_eq!(out.shape(), &[6]);
    // recompute the base readout by loops
    let mut base = [0.0; 6];
    for j in 0..6 {
        for i in 0..4 {
            for k in 0..5 {
                base[j] += h.at(&[i, j, k]) * r.at(&[k]);
            }
        }
        base[j] /= 4.0;
    }
    let mean: f64 = base.iter().sum::<f64>() / 6.0;
    let shift = (-mean).max(0.0);
    let constrained: Vec<f64> = base.iter().map(|v| v - shift).collect();
    let got_mean: f64 = out.data().iter().sum::<f64>() / 6.0;
    if mean >= 0.0 {
        // constraint inactive: output is base, just rescaled
        let ms: f64 = base.iter().map(|v| v * v).sum::<f64>() / 6.0;
        for (o, want) in out.data().iter().zip(&base) {
            assert!((o - want / (ms + crate::meta_objective::NORM_EPS_SQ).sqrt()).abs() <= 1e-12);
        }
    } else {
        // mean of the constrained (pre-normalization) vector doubles
        let cm: f64 = constrained.iter().sum::<f64>() / 6.0;
        assert!((cm - 2.0 * mean).abs() <= 1e-12);
        assert!(got_mean < 0.0);
    }
    // unit RMS after normalization
    let rms = out.rms();
    assert!((rms - 1.0).abs() <= 1e-9, "rms {}", rms);
}

#[test]
fn bias_delta_inactive_constraint_exact() {
    // h chosen so the readout mean is positive
    let tape = Tape::new();
    let h = tape.constant(Tensor::filled(&[4, 3, 2], 1.0));
    let r = tape.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let out = tape.value(bias_delta(&tape, h, r).unwrap());
    // base is 3.0 everywhere -> normalized to 1.0 everywhere
    for &v in out.data() {
        assert!((v - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn delta_weight_shapes_and_finiteness() {
    let (arch, phi, theta) = tiny_setup(30);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let tape = Tape::new();
    let pv = phi.lift(&tape, false);
    let tv = theta.lift(&tape, false);
    let x0 = tape.constant(Tensor::randn(&[4, 3], 1.0, &mut rng));
    let trace = forward(&tape, x0, &pv, &arch).unwrap();
    let deltas = compute_delta_weight(&tape, &trace, &pv, &tv).unwrap();
    assert_eq!(deltas.dw.len(), 2);
    for (l, layer) in phi.layers.iter().enumerate() {
        assert_eq!(tape.shape(deltas.dw[l]), layer.w.shape());
        assert_eq!(tape.shape(deltas.dv[l]), layer.v.shape());
        assert_eq!(tape.shape(deltas.db[l]), layer.b.shape());
        let dw = tape.value(deltas.dw[l]);
        assert!(dw.is_finite());
        assert!(dw.rms() < 1.0);
        assert!(tape.value(deltas.dv[l]).rms() < 1.0);
    }
}

#[test]
fn delta_weight_works_with_non_differentiable_activation() {
    // the rule never needs an activation derivative
    let cfg = tiny_cfg();
    let arch = ArchSpec::new(vec![3, 4, 3], Activation::Step).unwrap();
    let phi = BaseParams::init(&arch, 32);
    let theta = UpdateRuleParams::init(&cfg, 33).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let tape = Tape::new();
    let pv = phi.lift(&tape, false);
    let tv = theta.lift(&tape, false);
    let x0 = tape.constant(Tensor::randn(&[4, 3], 1.0, &mut rng));
    let trace = forward(&tape, x0, &pv, &arch).unwrap();
    let deltas = compute_delta_weight(&tape, &trace, &pv, &tv).unwrap();
    for &dw in &deltas.dw {
        assert!(tape.value(dw).is_finite());
    }
}

#[test]
fn one_theta_drives_any_architecture() {
    let cfg = tiny_cfg();
    let theta = UpdateRuleParams::init(&cfg, 35).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    for sizes in [vec![2, 7], vec![5, 3, 8, 4], vec![3, 3, 3]] {
        let arch = ArchSpec::new(sizes, Activation::Tanh).unwrap();
        let phi = BaseParams::init(&arch, 37);
        let tape = Tape::new();
        let pv = phi.lift(&tape, false);
        let tv = theta.lift(&tape, false);
        let x0 = tape.constant(Tensor::randn(&[4, arch.input_dim()], 1.0, &mut rng));
        let trace = forward(&tape, x0, &pv, &arch).unwrap();
        let deltas = compute_delta_weight(&tape, &trace, &pv, &tv).unwrap();
        assert_eq!(deltas.dw.len(), arch.depth());
    }
}

#[test]
fn apply_update_ema_identities() {
    let (arch, phi, theta) = tiny_setup(38);
    let mut rng = ChaCha8Rng::seed_from_u64(39);
    let lr = 3e-4;
    let tape = Tape::new();
    let pv = phi.lift(&tape, false);
    let tv = theta.lift(&tape, false);
    let x0 = tape.constant(Tensor::randn(&[4, 3], 1.0, &mut rng));
    let trace = forward(&tape, x0, &pv, &arch).unwrap();
    let deltas = compute_delta_weight(&tape, &trace, &pv, &tv).unwrap();

    // fixed point: delta equal to the parameter leaves it unchanged
    let self_deltas = Deltas {
        dw: pv.layers.iter().map(|l| l.w).collect(),
        dv: pv.layers.iter().map(|l| l.v).collect(),
        db: pv.layers.iter().map(|l| l.b).collect(),
    };
    let same = apply_update(&tape, &pv, &self_deltas, lr).unwrap();
    for (new, old) in same.layers.iter().zip(&pv.layers) {
        // fixed point up to one rounding of (1-lr) w + lr w
        for (a, b) in tape.value(new.w).data().iter().zip(tape.value(old.w).data()) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    // zero delta shrinks by (1 - lr)
    let zero_deltas = Deltas {
        dw: phi.layers.iter().map(|l| tape.constant(Tensor::zeros(l.w.shape()))).collect(),
        dv: phi.layers.iter().map(|l| tape.constant(Tensor::zeros(l.v.shape()))).collect(),
        db: phi.layers.iter().map(|l| tape.constant(Tensor::zeros(l.b.shape()))).collect(),
    };
    let shrunk = apply_update(&tape, &pv, &zero_deltas, lr).unwrap();
    for (new, old) in shrunk.layers.iter().zip(&phi.layers) {
        let got = tape.value(new.w);
        for (g, o) in got.data().iter().zip(old.w.data()) {
            assert!((g - o * (1.0 - lr)).abs() <= 1e-15);
        }
    }

    // convexity bound on the real update
    let updated = apply_update(&tape, &pv, &deltas, lr).unwrap();
    for (l, (new, old)) in updated.layers.iter().zip(&phi.layers).enumerate() {
        let norm = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let wn = norm(&tape.value(new.w));
        let bound =
            (1.0 - lr) * norm(&old.w) + lr * norm(&tape.value(deltas.dw[l]));
        assert!(wn <= bound + 1e-12, "layer {}: {} > {}", l, wn, bound);
    }
}

#[test]
fn deltas_differentiable_in_rule_parameters() {
    // fd check on a scalar readout of all deltas, for a spread of coordinates
    let (arch, phi, theta) = tiny_setup(40);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x0t = Tensor::randn(&[4, 3], 1.0, &mut rng);

    let eval = |params: &UpdateRuleParams| -> (f64, Option<Vec<Tensor>>, Vec<usize>) {
        let tape = Tape::new();
        let pv = phi.lift(&tape, false);
        let tv = params.lift(&tape, true);
        let x0 = tape.constant(x0t.clone());
        let trace = forward(&tape, x0, &pv, &arch).unwrap();
        let deltas = compute_delta_weight(&tape, &trace, &pv, &tv).unwrap();
        let mut total = tape.scalar_const(0.0);
        for l in 0..arch.depth() {
            total = tape.add(total, tape.sum_all(deltas.dw[l]).unwrap()).unwrap();
            total = tape.add(total, tape.sum_all(deltas.dv[l]).unwrap()).unwrap();
            total = tape.add(total, tape.sum_all(deltas.db[l]).unwrap()).unwrap();
        }
        let loss = tape.value(total).item();
        let leaves = tv.leaves();
        let grads = tape.backward(total, &leaves).unwrap();
        let sizes = leaves.iter().map(|&v| tape.numel(v)).collect();
        (loss, Some(grads), sizes)
    };

    let (_, grads, _) = eval(&theta);
    let grads = grads.unwrap();
    // probe one coordinate in a representative subset of parameter tensors
    let probe: Vec<usize> = vec![0, 2, 12, 14, 24, 26, 30, 34, 36, 40, 44, 45];
    let named_len = theta.named().len();
    for &ti in &probe {
        assert!(ti < named_len);
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        let h = 1e-5;
        {
            let mut ts = plus.tensors_mut();
            if ts[ti].numel() == 0 {
                continue;
            }
            ts[ti].data_mut()[0] += h;
        }
        {
            let mut ts = minus.tensors_mut();
            ts[ti].data_mut()[0] -= h;
        }
        let (fp, _, _) = eval(&plus);
        let (fm, _, _) = eval(&minus);
        let fd = (fp - fm) / (2.0 * h);
        let an = grads[ti].data()[0];
        let denom = fd.abs().max(an.abs()).max(1e-6);
        assert!(
            (fd - an).abs() / denom <= 1e-4,
            "tensor {}: analytic {} vs fd {}",
            ti,
            an,
            fd
        );
    }
}
