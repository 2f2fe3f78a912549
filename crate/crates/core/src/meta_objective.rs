//! Few-shot ridge-regression objective: closed-form linear fit on one batch,
//! normalized squared error (a cosine-style distance) on a second batch.

use serde::{Deserialize, Serialize};

use crate::base_model::{embed, ArchSpec, BaseVars};
use crate::error::TensorError;
use crate::tensor::{Tape, Tensor, Var};

/// Guard added under every normalization square root. Chosen as the square
/// of 1e-8 so a nonzero row's RMS stays within 1e-9 of 1 after division.
pub const NORM_EPS_SQ: f64 = 1e-16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaObjectiveConfig {
    /// Ridge penalty on the normal equations.
    pub ridge_penalty: f64,
    /// Independent (batch_a, batch_b) draws averaged per evaluation.
    pub eval_repeats: usize,
}

impl Default for MetaObjectiveConfig {
    fn default() -> Self {
        MetaObjectiveConfig { ridge_penalty: 0.1, eval_repeats: 5 }
    }
}

/// Subtract the global scalar mean, then divide each row by its RMS over
/// the target dimension (eps-guarded; all-constant targets become zeros).
pub fn center_normalize_targets(tape: &Tape, y: Var) -> Result<Var, TensorError> {
    let shape = tape.shape(y);
    if shape.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "center_normalize_targets",
            detail: format!("expected [K, C], got {:?}", shape),
        });
    }
    let global_mean = tape.mean_all(y)?;
    let gm = tape.reshape(global_mean, vec![1, 1])?;
    let gm_b = tape.broadcast_to(gm, &[shape[0], shape[1]])?;
    let centered = tape.sub(y, gm_b)?;
    let sq = tape.square(centered)?;
    let ms = tape.reduce_mean(sq, 1, true)?;
    let guarded = tape.add_scalar(ms, NORM_EPS_SQ)?;
    let denom = tape.sqrt(guarded)?;
    tape.div(centered, denom)
}

/// A = [features; 1], C = (A^T A + lambda I)^{-1} A^T targets.
/// Returns regression weights [F+1, C] with the bias in the last row.
pub fn ridge_solve(
    tape: &Tape,
    features: Var,
    targets: Var,
    ridge_penalty: f64,
) -> Result<Var, TensorError> {
    if ridge_penalty <= 0.0 {
        return Err(TensorError::Invalid("ridge penalty must be > 0".into()));
    }
    let k = tape.shape(features)[0];
    let ones = tape.constant(Tensor::filled(&[k, 1], 1.0));
    let a = tape.concat(&[features, ones], 1)?;
    let at = tape.transpose(a)?;
    let ata = tape.matmul(at, a)?;
    let f1 = tape.shape(a)[1];
    let mut eye = Tensor::zeros(&[f1, f1]);
    for i in 0..f1 {
        eye.set(&[i, i], ridge_penalty);
    }
    let reg = tape.constant(eye);
    let m = tape.add(ata, reg)?;
    let rhs = tape.matmul(at, targets)?;
    tape.solve_spd(m, rhs)
}

/// Predict with ridge weights: [features; 1] C.
pub fn ridge_predict(tape: &Tape, features: Var, c: Var) -> Result<Var, TensorError> {
    let k = tape.shape(features)[0];
    let ones = tape.constant(Tensor::filled(&[k, 1], 1.0));
    let a = tape.concat(&[features, ones], 1)?;
    tape.matmul(a, c)
}

/// Row-normalize to unit L2 length (eps-guarded).
fn row_unit_l2(tape: &Tape, p: Var) -> Result<Var, TensorError> {
    let sq = tape.square(p)?;
    let ss = tape.reduce_sum(sq, 1, true)?;
    let guarded = tape.add_scalar(ss, NORM_EPS_SQ)?;
    let norm = tape.sqrt(guarded)?;
    tape.div(p, norm)
}

/// One evaluation of the objective: fit on (x_a, y_a), score on (x_b, y_b).
/// Differentiable with respect to phi through both embeddings and the solve.
pub fn meta_objective(
    tape: &Tape,
    x_a: Var,
    y_a: Var,
    x_b: Var,
    y_b: Var,
    phi: &BaseVars,
    arch: &ArchSpec,
    cfg: &MetaObjectiveConfig,
) -> Result<Var, TensorError> {
    if tape.shape(y_a)[1] != tape.shape(y_b)[1] {
        return Err(TensorError::ShapeMismatch {
            op: "meta_objective",
            detail: "batches must share the target dimension".into(),
        });
    }
    let xl_a = embed(tape, x_a, phi, arch)?;
    let xl_b = embed(tape, x_b, phi, arch)?;
    let yhat_a = center_normalize_targets(tape, y_a)?;
    let yhat_b = center_normalize_targets(tape, y_b)?;
    let c = ridge_solve(tape, xl_a, yhat_a, cfg.ridge_penalty)?;
    let p = ridge_predict(tape, xl_b, c)?;
    let p_hat = row_unit_l2(tape, p)?;
    let diff = tape.sub(p_hat, yhat_b)?;
    let sq = tape.square(diff)?;
    let per_row = tape.reduce_sum(sq, 1, false)?;
    tape.mean_all(per_row)
}

/// Few-shot linear-probe accuracy: fit ridge on the one-hot class block of
/// batch a, argmax predictions on batch b against the true classes.
/// Ties break toward the lowest class index.
pub fn probe_accuracy(
    x_a: &Tensor,
    class_a: &[usize],
    x_b: &Tensor,
    class_b: &[usize],
    n_classes: usize,
    phi: &crate::base_model::BaseParams,
    cfg: &MetaObjectiveConfig,
) -> Result<f64, TensorError> {
    let preds = probe_predictions(x_a, class_a, x_b, n_classes, phi, cfg)?;
    let correct = preds.iter().zip(class_b).filter(|(p, c)| *p == *c).count();
    Ok(correct as f64 / class_b.len() as f64)
}

/// Argmax class predictions of the ridge probe (exposed for oracle tests).
pub fn probe_predictions(
    x_a: &Tensor,
    class_a: &[usize],
    x_b: &Tensor,
    n_classes: usize,
    phi: &crate::base_model::BaseParams,
    cfg: &MetaObjectiveConfig,
) -> Result<Vec<usize>, TensorError> {
    let tape = Tape::new();
    let phi_vars = phi.lift(&tape, false);
    let xa = tape.constant(x_a.clone());
    let xb = tape.constant(x_b.clone());
    let ea = embed(&tape, xa, &phi_vars, &phi.arch)?;
    let phi_vars_b = phi.lift(&tape, false);
    let eb = embed(&tape, xb, &phi_vars_b, &phi.arch)?;
    let mut onehot = Tensor::zeros(&[class_a.len(), n_classes]);
    for (i, &c) in class_a.iter().enumerate() {
        onehot.set(&[i, c], 1.0);
    }
    let y = tape.constant(onehot);
    let c = ridge_solve(&tape, ea, y, cfg.ridge_penalty)?;
    let p = ridge_predict(&tape, eb, c)?;
    let pv = tape.value(p);
    let mut out = Vec::with_capacity(class_a.len());
    for i in 0..pv.shape()[0] {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for j in 0..n_classes {
            let v = pv.at(&[i, j]);
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}
