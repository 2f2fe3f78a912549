//! Multi-worker asynchronous meta-training: workers compute segment
//! gradients against possibly stale snapshots of the rule parameters, and a
//! parameter server batches the gradients, averages them, and applies
//! clipped scheduled Adam. A deterministic single-threaded scheduler
//! reproduces the sequential trainer exactly; a free-running mode uses real
//! threads.

use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::{
    adam_step, mean_gradients, theta_seed, AdamState, MetaTrainerConfig, TaskStream,
};
use crate::update_rule::UpdateRuleParams;

/// One gradient submission: the payload, the parameter version it was
/// computed against, and the objective it came from.
#[derive(Debug, Clone)]
pub struct GradientMessage {
    pub grad: Vec<Tensor>,
    pub theta_version: u64,
    pub worker_id: usize,
    pub j: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SubmitAck {
    pub applied: bool,
    pub new_version: u64,
}

/// Exact accounting of every message the server has seen:
/// received = applied_batches * meta_batch + buffered + rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradientLedger {
    pub received: u64,
    pub applied_batches: u64,
    pub buffered: u64,
    pub rejected: u64,
}

impl GradientLedger {
    pub fn balances(&self, meta_batch: usize) -> bool {
        self.received == self.applied_batches * meta_batch as u64 + self.buffered + self.rejected
    }
}

/// Per-apply metrics record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterMetricRecord {
    pub version: u64,
    /// Mean objective over the applied batch of messages.
    pub mean_j: f64,
    /// Global norm of the averaged gradient before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    /// Staleness histogram of the applied batch: bin i counts messages
    /// computed against a snapshot i versions old.
    pub staleness_bins: Vec<u64>,
}

struct ServerInner {
    theta: UpdateRuleParams,
    adam: AdamState,
    version: u64,
    buffer: Vec<GradientMessage>,
    ledger: GradientLedger,
    /// Cumulative staleness histogram over all buffered messages.
    staleness: Vec<u64>,
    metrics: Vec<ClusterMetricRecord>,
}

fn bump_bin(bins: &mut Vec<u64>, idx: usize) {
    if bins.len() <= idx {
        bins.resize(idx + 1, 0);
    }
    bins[idx] += 1;
}

/// Central owner of the rule parameters. Snapshots are clones, so readers
/// never observe a partially applied update; the buffer and optimizer are
/// mutated behind one lock.
pub struct ParameterServer {
    cfg: MetaTrainerConfig,
    /// Server stops accepting work once this many versions are applied.
    target_versions: u64,
    inner: Mutex<ServerInner>,
    stopped: AtomicBool,
}

impl ParameterServer {
    pub fn new(cfg: MetaTrainerConfig, run_seed: u64, target_versions: u64) -> Result<Self> {
        cfg.validate()?;
        let theta = UpdateRuleParams::init(&cfg.rule, theta_seed(run_seed))?;
        let adam = AdamState::new(&theta);
        Ok(ParameterServer {
            cfg,
            target_versions,
            inner: Mutex::new(ServerInner {
                theta,
                adam,
                version: 0,
                buffer: Vec::new(),
                ledger: GradientLedger {
                    received: 0,
                    applied_batches: 0,
                    buffered: 0,
                    rejected: 0,
                },
                staleness: Vec::new(),
                metrics: Vec::new(),
            }),
            stopped: AtomicBool::new(target_versions == 0),
        })
    }

    pub fn config(&self) -> &MetaTrainerConfig {
        &self.cfg
    }

    /// Clone the current parameters together with their version.
    pub fn snapshot(&self) -> (UpdateRuleParams, u64) {
        let inner = self.inner.lock().expect("server lock");
        (inner.theta.clone(), inner.version)
    }

    pub fn version(&self) -> u64 {
        self.inner.lock().expect("server lock").version
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped.load(Ordering::SeqCst)
    }

    pub fn stop(&self) {
        self.stopped.store(true, Ordering::SeqCst);
    }

    pub fn ledger(&self) -> GradientLedger {
        self.inner.lock().expect("server lock").ledger
    }

    pub fn staleness_histogram(&self) -> Vec<u64> {
        self.inner.lock().expect("server lock").staleness.clone()
    }

    pub fn metrics(&self) -> Vec<ClusterMetricRecord> {
        self.inner.lock().expect("server lock").metrics.clone()
    }

    /// Skipped Adam updates (non-finite averaged gradients).
    pub fn skipped(&self) -> u64 {
        self.inner.lock().expect("server lock").adam.skipped
    }

    /// Take the final parameters out of the server.
    pub fn into_theta(self) -> UpdateRuleParams {
        self.inner.into_inner().expect("server lock").theta
    }

    /// Buffer one gradient message; apply mean -> clip -> Adam when the
    /// buffer reaches the meta-batch size. Messages with non-finite
    /// payloads are rejected and counted; shape mismatches are errors
    /// (also counted as rejected).
    pub fn submit(&self, msg: GradientMessage) -> Result<SubmitAck> {
        let mut inner = self.inner.lock().expect("server lock");
        inner.ledger.received += 1;
        if self.stopped.load(Ordering::SeqCst) {
            // drain-time submissions are counted but never applied, so the
            // version count stops exactly at the target
            inner.ledger.rejected += 1;
            let new_version = inner.version;
            return Ok(SubmitAck { applied: false, new_version });
        }
        if msg.theta_version > inner.version {
            inner.ledger.rejected += 1;
            return Err(Error::Config(format!(
                "message version {} is ahead of the server ({})",
                msg.theta_version, inner.version
            )));
        }
        let expected = inner.theta.named();
        if msg.grad.len() != expected.len()
            || msg.grad.iter().zip(expected.iter()).any(|(g, (_, t))| g.shape() != t.shape())
        {
            inner.ledger.rejected += 1;
            return Err(Error::Config("gradient shapes do not match the parameters".into()));
        }
        if msg.grad.iter().any(|g| !g.data().iter().all(|v| v.is_finite())) {
            inner.ledger.rejected += 1;
            let new_version = inner.version;
            return Ok(SubmitAck { applied: false, new_version });
        }
        let staleness = (inner.version - msg.theta_version) as usize;
        bump_bin(&mut inner.staleness, staleness);
        inner.buffer.push(msg);
        inner.ledger.buffered += 1;
        if inner.buffer.len() < self.cfg.meta_batch {
            let new_version = inner.version;
            return Ok(SubmitAck { applied: false, new_version });
        }

        let batch: Vec<GradientMessage> = inner.buffer.drain(..).collect();
        inner.ledger.buffered -= batch.len() as u64;
        let grads: Vec<Vec<Tensor>> = batch.iter().map(|m| m.grad.clone()).collect();
        let mean = mean_gradients(&grads)?;
        let mut staleness_bins = Vec::new();
        for m in &batch {
            bump_bin(&mut staleness_bins, (inner.version - m.theta_version) as usize);
        }
        let mean_j = batch.iter().map(|m| m.j).sum::<f64>() / batch.len() as f64;
        let step = inner.version;
        let ServerInner { theta, adam, .. } = &mut *inner;
        let info = adam_step(theta, &mean, step, &self.cfg, adam)?;
        if !info.applied {
            // non-finite mean: the batch is consumed but no version is minted
            inner.ledger.rejected += batch.len() as u64;
            let new_version = inner.version;
            return Ok(SubmitAck { applied: false, new_version });
        }
        inner.ledger.applied_batches += 1;
        inner.version += 1;
        let version = inner.version;
        inner.metrics.push(ClusterMetricRecord {
            version,
            mean_j,
            grad_norm: info.grad_norm,
            lr: info.lr,
            staleness_bins,
        });
        if inner.version >= self.target_versions {
            self.stopped.store(true, Ordering::SeqCst);
        }
        let new_version = inner.version;
        Ok(SubmitAck { applied: true, new_version })
    }
}

/// Free-running worker body: fetch the latest snapshot, compute one segment
/// against it, submit the gradient, repeat until the server stops.
pub fn worker_loop(
    worker_id: usize,
    server: &ParameterServer,
    run_seed: u64,
) -> Result<()> {
    let cfg = server.config().clone();
    let mut stream = TaskStream::new(run_seed, worker_id as u64);
    while !server.is_stopped() {
        let (theta, version) = server.snapshot();
        let seg = stream.next_segment(&theta, version, &cfg)?;
        server.submit(GradientMessage {
            grad: seg.result.grad_theta,
            theta_version: version,
            worker_id,
            j: seg.result.j_mean,
        })?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClusterMode {
    /// Single-threaded virtual scheduler with a seeded interleaving;
    /// bit-for-bit reproducible, and identical to the sequential trainer
    /// when run with one worker.
    Deterministic,
    /// Real threads; no reproducibility promise beyond the invariants.
    Free,
}

pub struct ClusterOutput {
    pub theta: UpdateRuleParams,
    pub metrics: Vec<ClusterMetricRecord>,
    pub ledger: GradientLedger,
    pub staleness_histogram: Vec<u64>,
    pub skipped: u64,
}

/// Run `n_workers` against one parameter server until `meta_steps` versions
/// are applied. The metrics stream, when given, receives one JSON line per
/// apply.
pub fn run_cluster(
    n_workers: usize,
    cfg: &MetaTrainerConfig,
    run_seed: u64,
    meta_steps: u64,
    mode: ClusterMode,
    mut sink: Option<&mut dyn Write>,
) -> Result<ClusterOutput> {
    if n_workers == 0 {
        return Err(Error::Config("run_cluster needs at least one worker".into()));
    }
    let server = ParameterServer::new(cfg.clone(), run_seed, meta_steps)?;
    match mode {
        ClusterMode::Deterministic => run_deterministic(n_workers, &server, run_seed)?,
        ClusterMode::Free => run_free(n_workers, &server, run_seed)?,
    }
    let metrics = server.metrics();
    if let Some(w) = sink.as_deref_mut() {
        for record in &metrics {
            serde_json::to_writer(&mut *w, record)
                .map_err(|e| Error::Other(format!("metrics stream: {}", e)))?;
            writeln!(w)?;
        }
    }
    let ledger = server.ledger();
    let staleness_histogram = server.staleness_histogram();
    let skipped = server.skipped();
    Ok(ClusterOutput { theta: server.into_theta(), metrics, ledger, staleness_histogram, skipped })
}

/// The virtual scheduler: each turn a seeded pick chooses a worker, which
/// either computes a segment against a fresh snapshot or submits the result
/// it is holding. Splitting compute and submit into separate turns lets
/// version bumps land between them, so staleness is exercised even without
/// threads.
fn run_deterministic(n_workers: usize, server: &ParameterServer, run_seed: u64) -> Result<()> {
    let cfg = server.config().clone();
    let mut streams: Vec<TaskStream> =
        (0..n_workers).map(|w| TaskStream::new(run_seed, w as u64)).collect();
    let mut pending: Vec<Option<GradientMessage>> = (0..n_workers).map(|_| None).collect();
    let mut sched = ChaCha8Rng::seed_from_u64(run_seed ^ 0x5C5C_5C5C_5C5C_5C5C);
    while !server.is_stopped() {
        let w = if n_workers == 1 { 0 } else { sched.gen_range(0..n_workers) };
        match pending[w].take() {
            Some(msg) => {
                server.submit(msg)?;
            }
            None => {
                let (theta, version) = server.snapshot();
                let seg = streams[w].next_segment(&theta, version, &cfg)?;
                pending[w] = Some(GradientMessage {
                    grad: seg.result.grad_theta,
                    theta_version: version,
                    worker_id: w,
                    j: seg.result.j_mean,
                });
            }
        }
    }
    Ok(())
}

fn run_free(n_workers: usize, server: &ParameterServer, run_seed: u64) -> Result<()> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n_workers)
            .map(|w| {
                let server = &*server;
                scope.spawn(move || worker_loop(w, server, run_seed))
            })
            .collect();
        let mut first_err = None;
        for (w, h) in handles.into_iter().enumerate() {
            match h.join() {
                Ok(Ok(())) => {}
                Ok(Err(e)) => {
                    server.stop();
                    first_err.get_or_insert(Error::Worker { worker_id: w, msg: e.to_string() });
                }
                Err(panic) => {
                    server.stop();
                    let msg = panic
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| panic.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "worker panicked".into());
                    first_err.get_or_insert(Error::Worker { worker_id: w, msg });
                }
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    })
}

#[cfg(test)]
mod tests;
