//! Weight-update planes: low-rank readouts from neighboring hidden states,
//! local basis terms in the current weight, a batch cross-covariance, and
//! decorrelation terms, merged and constrained into one bounded update.

use super::{ReadoutVars, UpdateRuleVars, RO_ABOVE_LIN, RO_ABOVE_SAT, RO_BELOW_LIN,
            RO_BELOW_SAT, RO_RBF, RO_STATE, RO_WEIGHT};
use crate::error::TensorError;
use crate::meta_objective::NORM_EPS_SQ;
use crate::tensor::{Tape, Tensor, Var};

/// Low-rank pairing of two hidden-state tensors:
/// out[p, q] = sum_{i,k} (h_a P_a)[i,p,k] (h_b P_b)[i,q,k] / (B * hdims).
pub fn low_rank_readout(
    tape: &Tape,
    ha: Var,
    hb: Var,
    pair: &ReadoutVars,
) -> Result<Var, TensorError> {
    let sa = tape.shape(ha);
    let sb = tape.shape(hb);
    let (b, na, hdims) = (sa[0], sa[1], sa[2]);
    let nb = sb[1];
    let g = tape.shape(pair.pa)[1];
    let ra = tape.matmul(tape.reshape(ha, vec![b * na, hdims])?, pair.pa)?;
    let ra = tape.reshape(ra, vec![b, na, g])?;
    let rb = tape.matmul(tape.reshape(hb, vec![b * nb, hdims])?, pair.pb)?;
    let rb = tape.reshape(rb, vec![b, nb, g])?;
    let out = tape.pair_contract(ra, rb)?;
    tape.scale(out, 1.0 / (b * hdims) as f64)
}

/// The seven readout matrices needed for one layer's planes, computed once
/// and shared between the forward- and backward-weight updates.
pub struct LayerReadouts {
    /// [N_below, N] pairings of the two adjacent layers' states.
    pub state: Var,
    pub rbf_gate: Var,
    pub weight_gate: Var,
    /// [N_below, N_below] self-pairing of the lower layer.
    pub below_lin: Var,
    pub below_sat: Var,
    /// [N, N] self-pairing of the upper layer.
    pub above_lin: Var,
    pub above_sat: Var,
}

impl LayerReadouts {
    pub fn compute(
        tape: &Tape,
        theta: &UpdateRuleVars,
        h_below: Var,
        h_above: Var,
    ) -> Result<Self, TensorError> {
        let ro = |i: usize, a: Var, b: Var| low_rank_readout(tape, a, b, &theta.readouts[i]);
        Ok(LayerReadouts {
            state: ro(RO_STATE, h_below, h_above)?,
            rbf_gate: ro(RO_RBF, h_below, h_above)?,
            weight_gate: ro(RO_WEIGHT, h_below, h_above)?,
            below_lin: ro(RO_BELOW_LIN, h_below, h_below)?,
            below_sat: ro(RO_BELOW_SAT, h_below, h_below)?,
            above_lin: ro(RO_ABOVE_LIN, h_above, h_above)?,
            above_sat: ro(RO_ABOVE_SAT, h_above, h_above)?,
        })
    }
}

/// Symmetrize a scratch matrix and zero its diagonal: (s + s^T) (1 - I).
fn symmetrize_offdiag(tape: &Tape, s: Var) -> Result<Var, TensorError> {
    let n = tape.shape(s)[0];
    let mut mask = Tensor::filled(&[n, n], 1.0);
    for i in 0..n {
        mask.set(&[i, i], 0.0);
    }
    let sym = tape.add(s, tape.transpose(s)?)?;
    tape.mul(sym, tape.constant(mask))
}

/// sqrt(1 + w^2) - 1, a saturating even gate on the weight magnitude.
fn saturating_gate(tape: &Tape, w: Var) -> Result<Var, TensorError> {
    tape.add_scalar(tape.sqrt(tape.add_scalar(tape.square(w)?, 1.0)?)?, -1.0)
}

/// The ten update planes for one weight matrix, each [N_below, N].
pub fn weight_planes(
    tape: &Tape,
    w: Var,
    x_below: Var,
    x_above: Var,
    ro: &LayerReadouts,
) -> Result<Vec<Var>, TensorError> {
    let wshape = tape.shape(w);
    let (n_below, n_above) = (wshape[0], wshape[1]);
    let b = tape.shape(x_below)[0];

    // w normalized per column to unit RMS (eps-guarded)
    let col_ms = tape.reduce_mean(tape.square(w)?, 0, true)?;
    let w_hat = tape.div(w, tape.sqrt(tape.add_scalar(col_ms, NORM_EPS_SQ)?)?)?;

    let p1 = w_hat;
    let p2 = tape.mul(tape.square(w_hat)?, tape.sign(w_hat)?)?;
    let p3 = ro.state;
    let p4 = tape.mul(tape.exp(tape.neg(tape.square(w_hat)?)?)?, ro.rbf_gate)?;
    let p5 = tape.mul(w, ro.weight_gate)?;

    // batch cross-covariance of the adjacent activations
    let xc_below = tape.sub(x_below, tape.reduce_mean(x_below, 0, true)?)?;
    let xc_above = tape.sub(x_above, tape.reduce_mean(x_above, 0, true)?)?;
    let p6 = tape.scale(tape.matmul(tape.transpose(xc_below)?, xc_above)?, 1.0 / b as f64)?;

    let inv_sqrt2 = 1.0 / 2f64.sqrt();
    let gate = saturating_gate(tape, w)?;
    let below_scale = 1.0 / (n_below as f64).sqrt();
    let above_scale = 1.0 / (n_above as f64).sqrt();

    let s7 = symmetrize_offdiag(tape, tape.scale(ro.below_lin, below_scale)?)?;
    let p7 = tape.scale(tape.matmul(s7, w)?, inv_sqrt2)?;
    let s8 = symmetrize_offdiag(tape, tape.scale(ro.below_sat, below_scale)?)?;
    let p8 = tape.scale(tape.matmul(s8, gate)?, inv_sqrt2)?;
    let s9 = symmetrize_offdiag(tape, tape.scale(ro.above_lin, above_scale)?)?;
    let p9 = tape.scale(tape.matmul(w, s9)?, inv_sqrt2)?;
    let s10 = symmetrize_offdiag(tape, tape.scale(ro.above_sat, above_scale)?)?;
    let p10 = tape.scale(tape.matmul(gate, s10)?, inv_sqrt2)?;

    Ok(vec![p1, p2, p3, p4, p5, p6, p7, p8, p9, p10])
}

/// Soft-normalize a matrix by sqrt(1 + mean-square); output RMS < 1.
fn soft_normalize(tape: &Tape, m: Var) -> Result<Var, TensorError> {
    let ms = tape.mean_all(tape.square(m)?)?;
    let denom = tape.reshape(tape.sqrt(tape.add_scalar(ms, 1.0)?)?, vec![1, 1])?;
    tape.div(m, denom)
}

/// Normalize each plane, merge with the learned coefficients, remove any
/// component that would grow the weight norm, and bound the result's RMS.
pub fn merge_and_constrain(
    tape: &Tape,
    planes: &[Var],
    w: Var,
    merge_w: Var,
) -> Result<Var, TensorError> {
    debug_assert_eq!(planes.len(), 10);
    let wshape = tape.shape(w);
    let (m, n) = (wshape[0], wshape[1]);
    let stacked = planes
        .iter()
        .map(|&p| tape.reshape(soft_normalize(tape, p)?, vec![1, m, n]))
        .collect::<Result<Vec<_>, _>>()?;
    let stacked = tape.concat(&stacked, 0)?;
    let coeff = tape.reshape(merge_w, vec![10, 1, 1])?;
    let merged = tape.reduce_sum(tape.mul(stacked, coeff)?, 0, false)?;
    let merged = tape.scale(merged, 0.1)?;

    // unit-Frobenius direction of w (eps-guarded)
    let frob = tape.sqrt(tape.add_scalar(tape.sum_all(tape.square(w)?)?, NORM_EPS_SQ)?)?;
    let w_f = tape.div(w, tape.reshape(frob, vec![1, 1])?)?;
    let along = tape.relu(tape.sum_all(tape.mul(merged, w_f)?)?)?;
    let orth = tape.sub(merged, tape.mul(w_f, tape.reshape(along, vec![1, 1])?)?)?;
    soft_normalize(tape, orth)
}

/// Bias update: batch-mean readout from h, shifted by the rectified
/// negative of its neuron-mean, then RMS-normalized.
pub fn bias_delta(tape: &Tape, h: Var, bias_readout: Var) -> Result<Var, TensorError> {
    let hs = tape.shape(h);
    let (b, n, hdims) = (hs[0], hs[1], hs[2]);
    let proj = tape.matmul(
        tape.reshape(h, vec![b * n, hdims])?,
        tape.reshape(bias_readout, vec![hdims, 1])?,
    )?;
    let proj = tape.reshape(proj, vec![b, n])?;
    let base = tape.reduce_mean(proj, 0, false)?;
    let shift = tape.relu(tape.neg(tape.mean_all(base)?)?)?;
    let constrained = tape.sub(base, tape.broadcast_to(tape.reshape(shift, vec![1])?, &[n])?)?;
    let ms = tape.mean_all(tape.square(constrained)?)?;
    let denom = tape.sqrt(tape.add_scalar(ms, NORM_EPS_SQ)?)?;
    tape.div(constrained, tape.broadcast_to(tape.reshape(denom, vec![1])?, &[n])?)
}
