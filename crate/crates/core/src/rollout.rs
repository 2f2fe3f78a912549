//! Roll a learned rule out on one task: apply it for T unlabeled steps and
//! periodically probe few-shot accuracy and the meta-objective on held-out
//! labeled batches. The unlabeled path never reads target tensors.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base_model::{forward, ArchSpec, BaseParams};
use crate::error::{Error, Result};
use crate::meta_objective::{meta_objective, probe_accuracy, MetaObjectiveConfig};
use crate::tasks::{sample_batch, TaskSpec};
use crate::tensor::Tape;
use crate::update_rule::{apply_update, compute_delta_weight, UpdateRuleParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub inner_step: usize,
    pub few_shot_accuracy: f64,
    pub meta_objective: f64,
    /// RMS of the latest weight delta, one value per layer (zeros at step 0).
    pub delta_rms: Vec<f64>,
}

/// Evaluation rows at strictly increasing inner steps.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSeries {
    pub rows: Vec<MetricRow>,
}

impl MetricSeries {
    pub fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        let layers = self.rows.first().map_or(0, |r| r.delta_rms.len());
        write!(w, "inner_step,few_shot_accuracy,meta_objective")?;
        for l in 0..layers {
            write!(w, ",delta_rms_layer{}", l)?;
        }
        writeln!(w)?;
        for row in &self.rows {
            write!(w, "{},{},{}", row.inner_step, row.few_shot_accuracy, row.meta_objective)?;
            for v in &row.delta_rms {
                write!(w, ",{}", v)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    /// Unsupervised updates to apply.
    pub steps: usize,
    /// Evaluation period; a row is always written at step 0 and after the
    /// final step.
    pub eval_every: usize,
    /// Labeled examples per class for the few-shot probe.
    pub labeled_per_class: usize,
    pub objective: MetaObjectiveConfig,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            steps: 1_000,
            eval_every: 100,
            labeled_per_class: 10,
            objective: MetaObjectiveConfig::default(),
        }
    }
}

pub struct RolloutOutput {
    pub phi: BaseParams,
    pub series: MetricSeries,
}

fn evaluate(
    phi: &BaseParams,
    task: &TaskSpec,
    inner_step: usize,
    delta_rms: &[f64],
    b_fixed: usize,
    cfg: &RolloutConfig,
    eval_rng: &mut ChaCha8Rng,
) -> Result<MetricRow> {
    let probe_n = task.n_classes * cfg.labeled_per_class;
    let fit = sample_batch(task, probe_n, eval_rng.gen())?;
    let held = sample_batch(task, probe_n, eval_rng.gen())?;
    let acc = probe_accuracy(
        &fit.x,
        &fit.class_ids,
        &held.x,
        &held.class_ids,
        task.n_classes,
        phi,
        &cfg.objective,
    )?;

    let mut j_sum = 0.0;
    for _ in 0..cfg.objective.eval_repeats {
        let a = sample_batch(task, b_fixed, eval_rng.gen())?;
        let b = sample_batch(task, b_fixed, eval_rng.gen())?;
        let tape = Tape::new();
        let vars = phi.lift(&tape, false);
        let j = meta_objective(
            &tape,
            tape.constant(a.x),
            tape.constant(a.targets),
            tape.constant(b.x),
            tape.constant(b.targets),
            &vars,
            &phi.arch,
            &cfg.objective,
        )?;
        j_sum += tape.value(j).data()[0];
    }
    Ok(MetricRow {
        inner_step,
        few_shot_accuracy: acc,
        meta_objective: j_sum / cfg.objective.eval_repeats as f64,
        delta_rms: delta_rms.to_vec(),
    })
}

/// Initialize a fresh base model and apply the rule `cfg.steps` times on
/// unlabeled batches, evaluating every `cfg.eval_every` steps.
pub fn rollout(
    theta: &UpdateRuleParams,
    arch: &ArchSpec,
    task: &TaskSpec,
    cfg: &RolloutConfig,
    seed: u64,
) -> Result<RolloutOutput> {
    if cfg.eval_every == 0 {
        return Err(Error::Config("eval_every must be >= 1".into()));
    }
    if cfg.labeled_per_class == 0 {
        return Err(Error::Config("labeled_per_class must be >= 1".into()));
    }
    if arch.input_dim() != task.input_dim {
        return Err(Error::Config(format!(
            "architecture input {} does not match the task's {}",
            arch.input_dim(),
            task.input_dim
        )));
    }
    let b = theta.cfg.b_fixed;
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0F0F_0F0F_0F0F_0F0F);

    let mut phi = BaseParams::init(arch, seed ^ 0x00FF_00FF_00FF_00FF);
    let mut delta_rms = vec![0.0; arch.depth()];
    let mut series = MetricSeries::default();
    series.rows.push(evaluate(&phi, task, 0, &delta_rms, b, cfg, &mut eval_rng)?);

    for step in 1..=cfg.steps {
        // the unlabeled path: only batch.x is consumed
        let batch = sample_batch(task, b, data_rng.gen())?;
        let tape = Tape::new();
        let vars = phi.lift(&tape, false);
        let theta_vars = theta.lift(&tape, false);
        let x0 = tape.constant(batch.x);
        let trace = forward(&tape, x0, &vars, arch)?;
        let deltas = compute_delta_weight(&tape, &trace, &vars, &theta_vars)?;
        for (l, &dw) in deltas.dw.iter().enumerate() {
            delta_rms[l] = tape.value(dw).rms();
        }
        let updated = apply_update(&tape, &vars, &deltas, theta.cfg.inner_lr)?;
        phi = updated.materialize(&tape, arch);
        if !phi.is_finite() {
            return Err(Error::NonFiniteObjective { step });
        }
        if step % cfg.eval_every == 0 || step == cfg.steps {
            series.rows.push(evaluate(&phi, task, step, &delta_rms, b, cfg, &mut eval_rng)?);
        }
    }
    Ok(RolloutOutput { phi, series })
}
