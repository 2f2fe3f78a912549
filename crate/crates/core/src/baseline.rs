//! Supervised few-shot baseline: the same MLP plus a log-probability head,
//! trained with cross-entropy and Adam on a handful of labeled examples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base_model::{embed, ArchSpec, BaseParams};
use crate::error::{Error, Result};
use crate::tasks::{sample_batch, TaskSpec};
use crate::tensor::{Tape, Tensor, Var};
use crate::trainer::AdamConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub lr: f64,
    pub steps: usize,
    pub labeled_per_class: usize,
    pub adam: AdamConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            lr: 3e-3,
            steps: 200,
            labeled_per_class: 10,
            adam: AdamConfig::default(),
        }
    }
}

pub struct BaselineOutput {
    pub accuracy: f64,
    /// Training cross-entropy after each optimization step, loss at init
    /// first.
    pub losses: Vec<f64>,
}

/// All trainable tensors of the baseline: forward weights and biases of
/// every layer plus the classification head. Backward weights and the
/// frozen batch-norm affine take no part in the supervised path.
struct BaselineParams {
    phi: BaseParams,
    head_w: Tensor,
    head_b: Tensor,
}

impl BaselineParams {
    fn init(arch: &ArchSpec, n_classes: usize, seed: u64) -> Self {
        let phi = BaseParams::init(arch, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD_EF01_2345_6789);
        let std = 1.0 / (arch.embed_dim() as f64).sqrt();
        BaselineParams {
            phi,
            head_w: Tensor::randn(&[arch.embed_dim(), n_classes], std, &mut rng),
            head_b: Tensor::zeros(&[n_classes]),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.phi.layers {
            out.push(&mut layer.w);
            out.push(&mut layer.b);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }
}

/// Mean cross-entropy of the class logits against integer labels, via a
/// numerically shifted log-softmax (the shift is a constant, so gradients
/// are unaffected).
fn cross_entropy(tape: &Tape, logits: Var, classes: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits);
    let (b, c) = (shape[0], shape[1]);
    let vals = tape.value(logits);
    let mut shift = Tensor::zeros(&[b, 1]);
    for i in 0..b {
        let m = (0..c).map(|j| vals.at(&[i, j])).fold(f64::NEG_INFINITY, f64::max);
        shift.set(&[i, 0], m);
    }
    let shift = tape.broadcast_to(tape.constant(shift), &[b, c])?;
    let shifted = tape.sub(logits, shift)?;
    let lse = tape.ln(tape.reduce_sum(tape.exp(shifted)?, 1, true)?)?;
    let logp = tape.sub(shifted, tape.broadcast_to(lse, &[b, c])?)?;
    let mut onehot = Tensor::zeros(&[b, c]);
    for (i, &cls) in classes.iter().enumerate() {
        if cls >= c {
            return Err(Error::Task(format!("class {} out of range {}", cls, c)).into());
        }
        onehot.set(&[i, cls], 1.0);
    }
    let picked = tape.mul(logp, tape.constant(onehot))?;
    Ok(tape.scale(tape.sum_all(picked)?, -1.0 / b as f64)?)
}

fn logits_for(
    tape: &Tape,
    params: &BaselineParams,
    leaves: &[Var],
    x: &Tensor,
) -> Result<Var> {
    // leaves are ordered exactly like tensors_mut: (W, b) per layer + head
    let arch = &params.phi.arch;
    let mut vars = params.phi.lift(tape, false);
    for (l, layer) in vars.layers.iter_mut().enumerate() {
        layer.w = leaves[2 * l];
        layer.b = leaves[2 * l + 1];
    }
    let e = embed(tape, tape.constant(x.clone()), &vars, arch)?;
    let head_w = leaves[leaves.len() - 2];
    let head_b = leaves[leaves.len() - 1];
    let z = tape.matmul(e, head_w)?;
    let b = tape.shape(z)[0];
    let c = tape.shape(z)[1];
    let bias = tape.broadcast_to(tape.reshape(head_b, vec![1, c])?, &[b, c])?;
    Ok(tape.add(z, bias)?)
}

/// Train the baseline on `labeled_per_class` examples per class and report
/// accuracy on an equally sized held-out draw.
pub fn baseline_supervised(
    arch: &ArchSpec,
    task: &TaskSpec,
    cfg: &BaselineConfig,
    seed: u64,
) -> Result<BaselineOutput> {
    if cfg.labeled_per_class == 0 {
        return Err(Error::Config("labeled_per_class must be >= 1".into()));
    }
    if arch.input_dim() != task.input_dim {
        return Err(Error::Config("architecture input does not match the task".into()));
    }
    let n = task.n_classes * cfg.labeled_per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = sample_batch(task, n, rng.gen())?;
    let test = sample_batch(task, n, rng.gen())?;
    train_and_eval(arch, task, cfg, seed, &train.x, &train.class_ids, &test.x, &test.class_ids)
}

/// Same training loop on explicit example sets (used by the shuffled-label
/// control and oracle tests).
#[allow(clippy::too_many_arguments)]
pub fn train_and_eval(
    arch: &ArchSpec,
    task: &TaskSpec,
    cfg: &BaselineConfig,
    seed: u64,
    train_x: &Tensor,
    train_classes: &[usize],
    test_x: &Tensor,
    test_classes: &[usize],
) -> Result<BaselineOutput> {
    let c = task.n_classes;
    let mut params = BaselineParams::init(arch, c, seed ^ 0x1111_2222_3333_4444);
    let n_tensors = params.tensors_mut().len();
    let mut m: Vec<Tensor> =
        params.tensors_mut().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut v = m.clone();
    let mut losses = Vec::with_capacity(cfg.steps + 1);

    for step in 0..=cfg.steps {
        let tape = Tape::new();
        let leaves: Vec<Var> =
            params.tensors_mut().iter().map(|t| tape.leaf((**t).clone())).collect();
        let logits = logits_for(&tape, &params, &leaves, train_x)?;
        let loss = cross_entropy(&tape, logits, train_classes)?;
        losses.push(tape.value(loss).data()[0]);
        if step == cfg.steps {
            break;
        }
        let grads = tape.backward(loss, &leaves)?;
        let (b1, b2, eps) = (cfg.adam.beta1, cfg.adam.beta2, cfg.adam.eps);
        let t = (step + 1) as i32;
        let (bc1, bc2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let mut slots = params.tensors_mut();
        debug_assert_eq!(slots.len(), n_tensors);
        for k in 0..n_tensors {
            for (i, &g) in grads[k].data().iter().enumerate() {
                let mi = b1 * m[k].data()[i] + (1.0 - b1) * g;
                let vi = b2 * v[k].data()[i] + (1.0 - b2) * g * g;
                m[k].data_mut()[i] = mi;
                v[k].data_mut()[i] = vi;
                slots[k].data_mut()[i] -= cfg.lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            }
        }
    }

    let tape = Tape::new();
    let leaves: Vec<Var> =
        params.tensors_mut().iter().map(|t| tape.leaf((**t).clone())).collect();
    let logits = tape.value(logits_for(&tape, &params, &leaves, test_x)?);
    let mut correct = 0usize;
    for (i, &cls) in test_classes.iter().enumerate() {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for j in 0..c {
            let val = logits.at(&[i, j]);
            if val > best_v {
                best_v = val;
                best = j;
            }
        }
        if best == cls {
            correct += 1;
        }
    }
    Ok(BaselineOutput { accuracy: correct as f64 / test_classes.len() as f64, losses })
}

#[cfg(test)]
mod tests;
