//! Truncated-backprop meta-training of the update rule: differentiable
//! unroll segments, scheduled and clipped Adam on the rule parameters, and
//! the single-threaded reference training loop.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::base_model::{forward, ArchSpec, BaseParams};
use crate::error::{Error, Result};
use crate::meta_objective::{meta_objective, MetaObjectiveConfig};
use crate::tasks::{sample_batch, sample_task, TaskDistribution, TaskSource, TaskSpec};
use crate::tensor::{Tape, Tensor};
use crate::update_rule::{apply_update, compute_delta_weight, UpdateRuleConfig, UpdateRuleParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Piecewise-constant learning rate: `rates[i]` applies while the step is
/// below `boundaries[i]`, the last rate afterwards. `scale` multiplies every
/// rate so shrunk runs can rescale the whole schedule at once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub boundaries: Vec<u64>,
    pub rates: Vec<f64>,
    pub scale: f64,
}

impl LrSchedule {
    pub fn at(&self, meta_step: u64) -> f64 {
        let idx = self.boundaries.iter().take_while(|&&b| meta_step >= b).count();
        self.rates[idx] * self.scale
    }

    pub fn validate(&self) -> Result<()> {
        if self.rates.len() != self.boundaries.len() + 1 {
            return Err(Error::Config("lr schedule needs one more rate than boundaries".into()));
        }
        if !self.boundaries.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("lr boundaries must be strictly increasing".into()));
        }
        if self.scale <= 0.0 || self.rates.iter().any(|&r| r <= 0.0) {
            return Err(Error::Config("lr rates and scale must be positive".into()));
        }
        if !self.rates.windows(2).all(|w| w[0] >= w[1]) {
            return Err(Error::Config("lr rates must be nonincreasing".into()));
        }
        Ok(())
    }
}

/// Unroll lengths are integer uniform on a range whose endpoints ramp
/// linearly from (start_lo, start_hi) to (end_lo, end_hi) over ramp_steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnrollSchedule {
    pub start_lo: usize,
    pub start_hi: usize,
    pub end_lo: usize,
    pub end_hi: usize,
    pub ramp_steps: u64,
}

impl UnrollSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.start_lo < 1 || self.start_lo > self.start_hi || self.end_lo > self.end_hi {
            return Err(Error::Config("unroll ranges must be ordered and >= 1".into()));
        }
        if self.end_lo < self.start_lo || self.end_hi < self.start_hi {
            return Err(Error::Config("unroll range must not shrink over the ramp".into()));
        }
        Ok(())
    }
}

/// Truncation counts follow max(1, round(Normal(s, s))) with the scale s
/// ramping linearly from std_start to std_end between ramp_start and
/// ramp_end meta-steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationSchedule {
    pub std_start: f64,
    pub std_end: f64,
    pub ramp_start: u64,
    pub ramp_end: u64,
}

impl TruncationSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.std_start <= 0.0 || self.std_end < self.std_start {
            return Err(Error::Config("truncation stds must be positive and nondecreasing".into()));
        }
        if self.ramp_start > self.ramp_end {
            return Err(Error::Config("truncation ramp range must be ordered".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainerConfig {
    pub adam: AdamConfig,
    pub lr: LrSchedule,
    /// Global L2 norm the averaged gradient is clipped to.
    pub clip_norm: f64,
    /// Gradients averaged per Adam application.
    pub meta_batch: usize,
    pub unroll: UnrollSchedule,
    pub truncation: TruncationSchedule,
    pub objective: MetaObjectiveConfig,
    /// Hidden-depth range the base-model sampler draws from.
    pub arch_layers: (usize, usize),
    /// Log-uniform hidden-size range.
    pub arch_sizes: (usize, usize),
    /// Output width of every sampled base model.
    pub embed_dim: usize,
    pub tasks: TaskDistribution,
    pub rule: UpdateRuleConfig,
}

impl MetaTrainerConfig {
    /// Full-scale profile.
    pub fn full() -> Self {
        MetaTrainerConfig {
            adam: AdamConfig::default(),
            lr: LrSchedule {
                boundaries: vec![100_000, 150_000],
                rates: vec![3e-4, 1e-4, 2e-5],
                scale: 1.0,
            },
            clip_norm: 5.0,
            meta_batch: 256,
            unroll: UnrollSchedule {
                start_lo: 2,
                start_hi: 4,
                end_lo: 8,
                end_hi: 15,
                ramp_steps: 50_000,
            },
            truncation: TruncationSchedule {
                std_start: 20.0,
                std_end: 200.0,
                ramp_start: 5_000,
                ramp_end: 20_000,
            },
            objective: MetaObjectiveConfig::default(),
            arch_layers: (2, 5),
            arch_sizes: (64, 512),
            embed_dim: 32,
            tasks: TaskDistribution::default(),
            rule: UpdateRuleConfig::full(),
        }
    }

    /// Shrunk profile sized for a single machine.
    pub fn desk() -> Self {
        MetaTrainerConfig {
            adam: AdamConfig::default(),
            lr: LrSchedule {
                boundaries: vec![100_000, 150_000],
                rates: vec![3e-4, 1e-4, 2e-5],
                scale: 1.0,
            },
            clip_norm: 5.0,
            meta_batch: 8,
            unroll: UnrollSchedule {
                start_lo: 2,
                start_hi: 4,
                end_lo: 8,
                end_hi: 15,
                ramp_steps: 1_000,
            },
            truncation: TruncationSchedule {
                std_start: 20.0,
                std_end: 200.0,
                ramp_start: 250,
                ramp_end: 1_000,
            },
            objective: MetaObjectiveConfig::default(),
            arch_layers: (2, 3),
            arch_sizes: (16, 64),
            embed_dim: 16,
            tasks: TaskDistribution::default(),
            rule: UpdateRuleConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lr.validate()?;
        self.unroll.validate()?;
        self.truncation.validate()?;
        self.rule.validate()?;
        if self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.meta_batch == 0 {
            return Err(Error::Config("meta_batch must be >= 1".into()));
        }
        if self.objective.eval_repeats == 0 {
            return Err(Error::Config("eval_repeats must be >= 1".into()));
        }
        if self.arch_layers.0 < 1 || self.arch_layers.0 > self.arch_layers.1 {
            return Err(Error::Config("arch layer range must be ordered and >= 1".into()));
        }
        if self.arch_sizes.0 < 1 || self.arch_sizes.0 > self.arch_sizes.1 {
            return Err(Error::Config("arch size range must be ordered and >= 1".into()));
        }
        if self.embed_dim < 1 {
            return Err(Error::Config("embed_dim must be >= 1".into()));
        }
        Ok(())
    }
}

fn ramp_fraction(step: u64, start: u64, end: u64) -> f64 {
    if end <= start || step >= end {
        return 1.0;
    }
    if step <= start {
        return 0.0;
    }
    (step - start) as f64 / (end - start) as f64
}

/// Integer uniform on the current unroll range.
pub fn sample_unroll_len<R: Rng>(meta_step: u64, cfg: &UnrollSchedule, rng: &mut R) -> usize {
    let f = ramp_fraction(meta_step, 0, cfg.ramp_steps);
    let lerp = |a: usize, b: usize| (a as f64 + f * (b as f64 - a as f64)).round() as usize;
    let lo = lerp(cfg.start_lo, cfg.end_lo);
    let hi = lerp(cfg.start_hi, cfg.end_hi);
    rng.gen_range(lo..=hi)
}

/// Current scale of the truncation-count distribution.
pub fn truncation_std(meta_step: u64, cfg: &TruncationSchedule) -> f64 {
    let f = ramp_fraction(meta_step, cfg.ramp_start, cfg.ramp_end);
    cfg.std_start + f * (cfg.std_end - cfg.std_start)
}

/// K = max(1, round(Normal(s, s))). The clamp at 1 shifts the mean slightly
/// above s; the tests pin the exact clamped-normal mean.
pub fn sample_truncation_count<R: Rng>(
    meta_step: u64,
    cfg: &TruncationSchedule,
    rng: &mut R,
) -> usize {
    let s = truncation_std(meta_step, cfg);
    let draw: f64 = rng.sample(Normal::new(s, s).expect("positive std"));
    draw.round().max(1.0) as usize
}

#[derive(Debug, Clone, Default)]
pub struct SegmentStats {
    /// Objective after each of the U updates, averaged over the M evals.
    pub step_j: Vec<f64>,
    /// Mean RMS of the weight deltas across layers, one entry per update.
    pub delta_rms: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct UnrollResult {
    pub phi_end: BaseParams,
    pub j_mean: f64,
    /// Gradient of j_mean w.r.t. the rule parameters, in `named()` order.
    pub grad_theta: Vec<Tensor>,
    pub stats: SegmentStats,
}

/// Run one truncation segment: apply the rule U times on fresh unlabeled
/// batches, evaluate the objective M times at each of the U resulting
/// states, and differentiate the average with respect to the rule
/// parameters. The incoming base parameters enter as constants, so the
/// gradient stops at the segment boundary. Unlabeled draws come from
/// `data_rng` and evaluation draws from `eval_rng`; keeping the streams
/// separate makes the forward trajectory independent of how a rollout is
/// cut into segments.
pub fn unroll_segment_streams(
    phi: &BaseParams,
    theta: &UpdateRuleParams,
    task: &TaskSpec,
    u: usize,
    objective: &MetaObjectiveConfig,
    data_rng: &mut ChaCha8Rng,
    eval_rng: &mut ChaCha8Rng,
) -> Result<UnrollResult> {
    if u == 0 {
        return Err(Error::Config("unroll length must be >= 1".into()));
    }
    let tape = Tape::new();
    let theta_vars = theta.lift(&tape, true);
    let mut state = phi.lift(&tape, false);
    let arch = &phi.arch;
    let b = theta.cfg.b_fixed;

    let mut states = Vec::with_capacity(u);
    let mut delta_rms = Vec::with_capacity(u);
    for _ in 0..u {
        let batch = sample_batch(task, b, data_rng.gen())?;
        let x0 = tape.constant(batch.x);
        let trace = forward(&tape, x0, &state, arch)?;
        let deltas = compute_delta_weight(&tape, &trace, &state, &theta_vars)?;
        let rms_sum: f64 = deltas.dw.iter().map(|&d| tape.value(d).rms()).sum();
        delta_rms.push(rms_sum / deltas.dw.len() as f64);
        state = apply_update(&tape, &state, &deltas, theta.cfg.inner_lr)?;
        states.push(state.clone());
    }

    let m = objective.eval_repeats;
    let mut step_j = Vec::with_capacity(u);
    let mut total: Option<crate::tensor::Var> = None;
    for st in &states {
        let mut state_sum = 0.0;
        for _ in 0..m {
            let ba = sample_batch(task, b, eval_rng.gen())?;
            let bb = sample_batch(task, b, eval_rng.gen())?;
            let x_a = tape.constant(ba.x);
            let y_a = tape.constant(ba.targets);
            let x_b = tape.constant(bb.x);
            let y_b = tape.constant(bb.targets);
            let j = meta_objective(&tape, x_a, y_a, x_b, y_b, st, arch, objective)?;
            state_sum += tape.value(j).data()[0];
            total = Some(match total {
                Some(t) => tape.add(t, j)?,
                None => j,
            });
        }
        step_j.push(state_sum / m as f64);
    }
    let j_var = tape.scale(total.expect("u >= 1, m >= 1"), 1.0 / (u * m) as f64)?;
    let j_mean = tape.value(j_var).data()[0];
    if !j_mean.is_finite() {
        return Err(Error::NonFiniteObjective { step: u });
    }
    let grad_theta = tape.backward(j_var, &theta_vars.leaves())?;
    if grad_theta.iter().any(|g| !g.data().iter().all(|v| v.is_finite())) {
        return Err(Error::NonFiniteObjective { step: u });
    }
    let phi_end = states.last().unwrap().materialize(&tape, arch);
    Ok(UnrollResult { phi_end, j_mean, grad_theta, stats: SegmentStats { step_j, delta_rms } })
}

/// Seed-based wrapper around [`unroll_segment_streams`] for standalone use.
pub fn unroll_segment(
    phi: &BaseParams,
    theta: &UpdateRuleParams,
    task: &TaskSpec,
    u: usize,
    objective: &MetaObjectiveConfig,
    seed: u64,
) -> Result<UnrollResult> {
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66_D5DE_ECE6);
    unroll_segment_streams(phi, theta, task, u, objective, &mut data_rng, &mut eval_rng)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    /// Updates skipped because the incoming gradient was not finite.
    pub skipped: u64,
}

impl AdamState {
    pub fn new(theta: &UpdateRuleParams) -> Self {
        let zeros: Vec<Tensor> =
            theta.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0, skipped: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamStepInfo {
    pub applied: bool,
    /// Global L2 norm of the gradient before clipping.
    pub grad_norm: f64,
    /// Norm after clipping (min(grad_norm, clip_norm) when applied).
    pub clipped_norm: f64,
    pub lr: f64,
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

/// Elementwise mean of gradient sets with matching shapes.
pub fn mean_gradients(batch: &[Vec<Tensor>]) -> Result<Vec<Tensor>> {
    let first = batch.first().ok_or_else(|| Error::Config("empty gradient batch".into()))?;
    let inv = 1.0 / batch.len() as f64;
    let mut out: Vec<Tensor> = first.iter().map(|g| Tensor::zeros(g.shape())).collect();
    for grads in batch {
        if grads.len() != out.len() {
            return Err(Error::Config("gradient sets differ in length".into()));
        }
        for (acc, g) in out.iter_mut().zip(grads) {
            if acc.shape() != g.shape() {
                return Err(Error::Config("gradient shapes differ across the batch".into()));
            }
            for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v * inv;
            }
        }
    }
    Ok(out)
}

/// Clip the gradient to the configured global norm, then apply one Adam
/// update with the scheduled learning rate. A non-finite gradient is
/// rejected: the parameters and optimizer state stay untouched and the
/// skip counter advances.
pub fn adam_step(
    theta: &mut UpdateRuleParams,
    grads: &[Tensor],
    meta_step: u64,
    cfg: &MetaTrainerConfig,
    state: &mut AdamState,
) -> Result<AdamStepInfo> {
    let lr = cfg.lr.at(meta_step);
    if grads.len() != state.m.len() {
        return Err(Error::Config("gradient count does not match parameter count".into()));
    }
    let mut params = theta.tensors_mut();
    for (g, p) in grads.iter().zip(params.iter()) {
        if g.shape() != p.shape() {
            return Err(Error::Config("gradient shape does not match parameter".into()));
        }
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        state.skipped += 1;
        return Ok(AdamStepInfo { applied: false, grad_norm: norm, clipped_norm: f64::NAN, lr });
    }
    let clip = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
    state.t += 1;
    let (b1, b2, eps) = (cfg.adam.beta1, cfg.adam.beta2, cfg.adam.eps);
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for ((g, p), (m, v)) in
        grads.iter().zip(params.iter_mut()).zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (i, &raw) in g.data().iter().enumerate() {
            let gi = raw * clip;
            let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
            let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            p.data_mut()[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
        }
    }
    Ok(AdamStepInfo { applied: true, grad_norm: norm, clipped_norm: norm * clip, lr })
}

/// Derive the rule-parameter init seed from the run seed.
pub fn theta_seed(run_seed: u64) -> u64 {
    run_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1)
}

fn worker_seed(run_seed: u64, worker_id: u64) -> u64 {
    run_seed ^ (worker_id.wrapping_add(1)).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

#[derive(Clone, Serialize, Deserialize)]
struct CurrentTask {
    spec: TaskSpec,
    phi: BaseParams,
    k_left: usize,
    k_total: usize,
}

/// A worker's deterministic stream of truncation segments: sample a task,
/// architecture, and truncation count, then hand out K consecutive segments
/// before moving to the next task. The base parameters persist across the
/// segments of one task.
#[derive(Clone, Serialize, Deserialize)]
pub struct TaskStream {
    rng: ChaCha8Rng,
    data_rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
    current: Option<CurrentTask>,
}

pub struct SegmentOutcome {
    pub result: UnrollResult,
    pub u: usize,
    /// Truncation count drawn for the current task.
    pub k_total: usize,
    /// Segments still owed on the current task after this one.
    pub k_left: usize,
    pub source: &'static str,
}

pub fn source_name(source: &TaskSource) -> &'static str {
    match source {
        TaskSource::Glyphs { .. } => "glyphs",
        TaskSource::TwoMoons { .. } => "two_moons",
    }
}

impl TaskStream {
    pub fn new(run_seed: u64, worker_id: u64) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(worker_seed(run_seed, worker_id));
        TaskStream {
            rng,
            data_rng: ChaCha8Rng::seed_from_u64(0),
            eval_rng: ChaCha8Rng::seed_from_u64(0),
            current: None,
        }
    }

    /// Produce the next segment against the given rule parameters. The
    /// schedules read `meta_step`, the version of the parameters in use.
    pub fn next_segment(
        &mut self,
        theta: &UpdateRuleParams,
        meta_step: u64,
        cfg: &MetaTrainerConfig,
    ) -> Result<SegmentOutcome> {
        if self.current.as_ref().map_or(true, |c| c.k_left == 0) {
            let spec = sample_task(&cfg.tasks, self.rng.gen())?;
            let arch = ArchSpec::sample(
                spec.input_dim,
                cfg.embed_dim,
                cfg.arch_layers,
                cfg.arch_sizes,
                &mut self.rng,
            );
            let phi = BaseParams::init(&arch, self.rng.gen());
            let k = sample_truncation_count(meta_step, &cfg.truncation, &mut self.rng);
            self.data_rng = ChaCha8Rng::seed_from_u64(self.rng.gen());
            self.eval_rng = ChaCha8Rng::seed_from_u64(self.rng.gen());
            self.current = Some(CurrentTask { spec, phi, k_left: k, k_total: k });
        }
        let u = sample_unroll_len(meta_step, &cfg.unroll, &mut self.rng);
        let cur = self.current.as_mut().expect("task installed above");
        let result = unroll_segment_streams(
            &cur.phi,
            theta,
            &cur.spec,
            u,
            &cfg.objective,
            &mut self.data_rng,
            &mut self.eval_rng,
        )?;
        cur.phi = result.phi_end.clone();
        cur.k_left -= 1;
        Ok(SegmentOutcome {
            u,
            k_total: cur.k_total,
            k_left: cur.k_left,
            source: source_name(&cur.spec.source),
            result,
        })
    }
}

/// One line of the metrics stream, emitted per Adam application. U, K and
/// the task source describe the last segment that completed the batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    /// Mean objective over the meta-batch of segments.
    pub j: f64,
    /// Global norm of the averaged gradient before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    pub u: usize,
    pub k: usize,
    pub source: String,
}

pub struct TrainOutput {
    pub theta: UpdateRuleParams,
    pub metrics: Vec<MetricRecord>,
    /// Adam updates skipped on non-finite gradients.
    pub skipped: u64,
}

/// Complete state of a sequential training run. Serializable, so a run can
/// be checkpointed mid-flight and resumed on the exact trajectory it would
/// have followed uninterrupted.
#[derive(Clone, Serialize, Deserialize)]
pub struct TrainerState {
    pub theta: UpdateRuleParams,
    pub adam: AdamState,
    /// Adam applications so far: the parameter version.
    pub step: u64,
    pub stream: TaskStream,
    /// Segment gradients waiting for the meta-batch to fill.
    pub buffer: Vec<Vec<Tensor>>,
    /// Objective sum over the buffered segments.
    pub j_sum: f64,
}

impl TrainerState {
    pub fn new(cfg: &MetaTrainerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let theta = UpdateRuleParams::init(&cfg.rule, theta_seed(seed))?;
        let adam = AdamState::new(&theta);
        Ok(TrainerState {
            theta,
            adam,
            step: 0,
            stream: TaskStream::new(seed, 0),
            buffer: Vec::new(),
            j_sum: 0.0,
        })
    }
}

/// Advance a training run until `target_step` Adam applications have been
/// made, emitting one metric record per application.
pub fn train_until(
    cfg: &MetaTrainerConfig,
    state: &mut TrainerState,
    target_step: u64,
    mut sink: Option<&mut dyn Write>,
) -> Result<Vec<MetricRecord>> {
    cfg.validate()?;
    let mut metrics = Vec::new();
    while state.step < target_step {
        let seg = state.stream.next_segment(&state.theta, state.step, cfg)?;
        state.j_sum += seg.result.j_mean;
        state.buffer.push(seg.result.grad_theta);
        if state.buffer.len() < cfg.meta_batch {
            continue;
        }
        let mean = mean_gradients(&state.buffer)?;
        state.buffer.clear();
        let info = adam_step(&mut state.theta, &mean, state.step, cfg, &mut state.adam)?;
        let record = MetricRecord {
            step: state.step,
            j: state.j_sum / cfg.meta_batch as f64,
            grad_norm: info.grad_norm,
            lr: info.lr,
            u: seg.u,
            k: seg.k_total,
            source: seg.source.to_string(),
        };
        state.j_sum = 0.0;
        if let Some(w) = sink.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record)
                .map_err(|e| Error::Other(format!("metrics stream: {}", e)))?;
            writeln!(w)?;
        }
        metrics.push(record);
        state.step += 1;
    }
    Ok(metrics)
}

/// The single-threaded reference loop: stream segments from one task
/// stream, buffer their gradients, and apply clipped scheduled Adam once
/// per meta-batch. Deterministic in (cfg, seed); the distributed harness
/// must reproduce it bit-for-bit with one worker.
pub fn train_sequential(
    cfg: &MetaTrainerConfig,
    seed: u64,
    meta_steps: u64,
    sink: Option<&mut dyn Write>,
) -> Result<TrainOutput> {
    let mut state = TrainerState::new(cfg, seed)?;
    let metrics = train_until(cfg, &mut state, meta_steps, sink)?;
    Ok(TrainOutput { theta: state.theta, metrics, skipped: state.adam.skipped })
}
