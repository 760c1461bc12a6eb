//! Mini-batch SGD and locally simulated QSGD on a planted dataset.
//!
//! Both schemes apply `w <- w - eta * grad_scale * g`, where `g` is the
//! mini-batch generalized gradient (SGD) or the average of `K` dequantized
//! worker gradients (QSGD). `grad_scale` defaults to 1/4, which turns the
//! generalized gradient into the gradient of `(1/2)(relu(<w, x>) - y)^2`;
//! the experiment step sizes `m/d` and `m b / (9 d)` are calibrated for that
//! normalization and diverge without it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Stopwatch;
use crate::codec::{self, CodecError, QuantizedVector};
use crate::par;
use crate::planted::{distance, ModelError, PlantedDataset, WeightVector};
use crate::rng::{derive_seed, Purpose, Stream};

pub const DEFAULT_GRAD_SCALE: f64 = 0.25;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("cannot partition {n} samples across {workers} workers")]
    Partition { n: usize, workers: usize },
    #[error("iteration bound needs a rate in (0, 1), got {0}")]
    InvalidRate(f64),
    #[error(
        "ensemble failed: no final iterate has {needed} of {trials} finals within radius {radius}"
    )]
    EnsembleFailed {
        needed: usize,
        trials: usize,
        radius: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Sgd,
    Qsgd,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Sgd => "sgd",
            Scheme::Qsgd => "qsgd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepPolicy {
    /// `3 / (4 (9d/m + 25/16))`.
    Theorem,
    /// `m/d` for SGD, `m b / (9 d)` for QSGD.
    Experiment,
    Explicit(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// One unit gradient step from the origin.
    Spectral,
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scheme: Scheme,
    /// Mini-batch size `m` (summed over workers for QSGD).
    pub batch: usize,
    /// Worker count `K`; QSGD only.
    pub workers: usize,
    /// Bits per quantized entry; QSGD only.
    pub bits: u32,
    pub step: StepPolicy,
    pub max_iters: u64,
    /// Early exit once the relative error drops below this.
    pub tol: f64,
    pub seed: u64,
    pub init: InitPolicy,
    /// Use every sample (or the whole shard) instead of sampling.
    pub full_batch: bool,
    /// Record the full loss every this many iterations; 0 disables it.
    pub loss_every: u64,
    pub grad_scale: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scheme: Scheme::Sgd,
            batch: 800,
            workers: 1,
            bits: 7,
            step: StepPolicy::Experiment,
            max_iters: 2000,
            tol: 1e-3,
            seed: 0,
            init: InitPolicy::Spectral,
            full_batch: false,
            loss_every: 0,
            grad_scale: DEFAULT_GRAD_SCALE,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |msg: String| Err(EngineError::InvalidConfig(msg));
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if !(self.grad_scale.is_finite() && self.grad_scale > 0.0) {
            return bad(format!(
                "grad_scale must be positive, got {}",
                self.grad_scale
            ));
        }
        if let StepPolicy::Explicit(eta) = self.step {
            if !(eta.is_finite() && eta > 0.0) {
                return bad(format!("explicit step size must be positive, got {eta}"));
            }
        }
        if let InitPolicy::Explicit(w) = &self.init {
            if !w.iter().all(|v| v.is_finite()) {
                return bad("explicit initial point has non-finite entries".into());
            }
        }
        if self.scheme == Scheme::Qsgd {
            if self.workers == 0 {
                return bad("workers must be at least 1".into());
            }
            if !self.batch.is_multiple_of(self.workers) {
                return bad(format!(
                    "workers ({}) must divide batch ({})",
                    self.workers, self.batch
                ));
            }
            if !(2..=codec::MAX_BITS).contains(&self.bits) {
                return bad(format!(
                    "bits must be in 2..={}, got {}",
                    codec::MAX_BITS,
                    self.bits
                ));
            }
        }
        Ok(())
    }

    pub fn validate_for(&self, ds: &PlantedDataset) -> Result<(), EngineError> {
        self.validate()?;
        if let InitPolicy::Explicit(w) = &self.init {
            if w.len() != ds.d() {
                return Err(ModelError::DimensionMismatch {
                    expected: ds.d(),
                    got: w.len(),
                }
                .into());
            }
        }
        if self.scheme == Scheme::Qsgd && !ds.n().is_multiple_of(self.workers) {
            return Err(EngineError::Partition {
                n: ds.n(),
                workers: self.workers,
            });
        }
        Ok(())
    }

    /// Step size `eta` resolved for dimension `d`.
    pub fn step_size(&self, d: usize) -> f64 {
        match self.step {
            StepPolicy::Theorem => theorem_step_size(d, self.batch),
            StepPolicy::Experiment => experiment_step_size(self.scheme, d, self.batch, self.bits),
            StepPolicy::Explicit(eta) => eta,
        }
    }

    /// Per-worker batch `m / K`.
    pub fn batch_per_worker(&self) -> usize {
        self.batch / self.workers.max(1)
    }

    pub fn initial_point(&self, ds: &PlantedDataset) -> WeightVector {
        match &self.init {
            InitPolicy::Spectral => ds.spectral_init(),
            InitPolicy::Explicit(w) => WeightVector::new(w.clone()),
        }
    }
}

/// `3 / (4 (9d/m + 25/16))`.
pub fn theorem_step_size(d: usize, m: usize) -> f64 {
    3.0 / (4.0 * second_moment_factor(d, m))
}

/// `9d/m + 25/16`, the mini-batch gradient second-moment constant.
pub fn second_moment_factor(d: usize, m: usize) -> f64 {
    9.0 * d as f64 / m as f64 + 25.0 / 16.0
}

/// `m/d` for SGD and `m b / (9 d)` for QSGD.
pub fn experiment_step_size(scheme: Scheme, d: usize, m: usize, bits: u32) -> f64 {
    match scheme {
        Scheme::Sgd => m as f64 / d as f64,
        Scheme::Qsgd => (m as f64 * f64::from(bits)) / (9.0 * d as f64),
    }
}

/// `1 - 9 / (16 (9d/m + 25/16))`.
pub fn theorem_rate(d: usize, m: usize) -> f64 {
    1.0 - 9.0 / (16.0 * second_moment_factor(d, m))
}

/// `1 - 9 / (16 ((1 + min(d/s^2, sqrt(d)/s)) (9d/m + 25/16) + 25/16))`.
pub fn qsgd_rate(d: usize, m: usize, s: u32) -> f64 {
    let inflation = 1.0 + codec::variance_factor(d, s);
    1.0 - 9.0 / (16.0 * (inflation * second_moment_factor(d, m) + 25.0 / 16.0))
}

/// `ceil((ln(2/eps) + ln(1/delta2)) / (1 - rate))`.
pub fn iterations_for_accuracy(eps: f64, delta2: f64, rate: f64) -> Result<u64, EngineError> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(EngineError::InvalidRate(rate));
    }
    if eps.is_nan() || eps <= 0.0 || delta2.is_nan() || delta2 <= 0.0 || delta2 > 1.0 {
        return Err(EngineError::InvalidConfig(format!(
            "need eps > 0 and 0 < delta2 <= 1 (eps = {eps}, delta2 = {delta2})"
        )));
    }
    let numerator = (2.0 / eps).ln() + (1.0 / delta2).ln();
    Ok((numerator / (1.0 - rate)).ceil().max(0.0) as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: u64,
    pub rel_err: f64,
    pub loss: Option<f64>,
    /// Worker-to-master payload bytes spent on this iteration.
    pub upstream_bytes: u64,
    /// Wall-clock time of this iteration.
    pub elapsed_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    BudgetExhausted,
    Diverged,
    /// Stopped by a runtime failure before the budget ran out.
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    /// `records[t]` describes the iterate after `t` updates.
    pub records: Vec<TraceRecord>,
    /// Last finite iterate.
    pub final_w: WeightVector,
    pub status: RunStatus,
}

pub const TRACE_CSV_HEADER: &str = "t,rel_err,loss,upstream_bytes,elapsed_ns";

impl Trace {
    /// A trace holding only the starting point, for runs that never began.
    pub(crate) fn empty(cfg: &RunConfig, ds: &PlantedDataset) -> Trace {
        let w0 = match cfg.validate_for(ds) {
            Ok(()) => cfg.initial_point(ds),
            Err(_) => WeightVector::zeros(ds.d()),
        };
        let plain = RunConfig {
            loss_every: 0,
            ..cfg.clone()
        };
        TraceBuilder::new(make_record(ds, &plain, 0, &w0, 0, 0), cfg.tol, true)
            .finish(w0, RunStatus::Aborted)
    }

    pub fn converged(&self) -> bool {
        self.status == RunStatus::Converged
    }

    /// Completed updates.
    pub fn iterations(&self) -> u64 {
        self.records.last().map_or(0, |r| r.t)
    }

    pub fn final_rel_err(&self) -> f64 {
        self.records.last().map_or(f64::INFINITY, |r| r.rel_err)
    }

    /// First iteration whose relative error is below `tol`.
    pub fn iterations_to(&self, tol: f64) -> Option<u64> {
        self.records.iter().find(|r| r.rel_err < tol).map(|r| r.t)
    }

    pub fn total_upstream_bytes(&self) -> u64 {
        self.records.iter().map(|r| r.upstream_bytes).sum()
    }

    pub fn total_elapsed_ns(&self) -> u64 {
        self.records.iter().map(|r| r.elapsed_ns).sum()
    }

    /// Bitwise equality of everything except wall-clock timings.
    pub fn same_outcome(&self, other: &Trace) -> bool {
        self.status == other.status
            && self.final_w.len() == other.final_w.len()
            && self
                .final_w
                .iter()
                .zip(other.final_w.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.t == b.t
                    && a.rel_err.to_bits() == b.rel_err.to_bits()
                    && a.loss.map(f64::to_bits) == b.loss.map(f64::to_bits)
                    && a.upstream_bytes == b.upstream_bytes
            })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(32 * (self.records.len() + 1));
        out.push_str(TRACE_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let loss = r.loss.map(|l| l.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.t, r.rel_err, loss, r.upstream_bytes, r.elapsed_ns
            ));
        }
        out
    }
}

/// What a worker sends upstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Uplink {
    /// Raw float64 gradient (8 bytes per entry).
    Float64,
    /// Quantized gradient at this many bits per entry.
    Quantized { bits: u32 },
}

impl Uplink {
    /// Wire code: 0 for float64, otherwise the bit width.
    pub fn code(self) -> u8 {
        match self {
            Uplink::Float64 => 0,
            Uplink::Quantized { bits } => bits as u8,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, CodecError> {
        match code {
            0 => Ok(Uplink::Float64),
            b => {
                codec::levels_for_bits(u32::from(b))?;
                Ok(Uplink::Quantized { bits: u32::from(b) })
            }
        }
    }

    pub fn payload_len(self, d: usize) -> usize {
        match self {
            Uplink::Float64 => 8 * d,
            Uplink::Quantized { bits } => codec::encoded_len(d, bits),
        }
    }
}

/// Upstream payload bytes per iteration for `K` workers.
pub fn bytes_per_iteration(scheme: Scheme, d: usize, workers: usize, bits: u32) -> u64 {
    let per_worker = match scheme {
        Scheme::Sgd => Uplink::Float64.payload_len(d),
        Scheme::Qsgd => Uplink::Quantized { bits }.payload_len(d),
    };
    (workers * per_worker) as u64
}

/// Rows `[k n/K, (k+1) n/K)` for each worker `k`.
pub fn partition(n: usize, workers: usize) -> Result<Vec<std::ops::Range<usize>>, EngineError> {
    if workers == 0 || !n.is_multiple_of(workers) {
        return Err(EngineError::Partition { n, workers });
    }
    let len = n / workers;
    Ok((0..workers).map(|k| k * len..(k + 1) * len).collect())
}

/// One worker's share of a QSGD iteration: samples from its shard, computes
/// the mini-batch gradient and (optionally) quantizes it.
#[derive(Debug, Clone)]
pub struct ShardWorker {
    pub id: u32,
    shard: std::ops::Range<usize>,
    batch: usize,
    uplink: Uplink,
    full_shard: bool,
    sample: Stream,
    quant: Stream,
    indices: Vec<usize>,
    grad: Vec<f64>,
}

impl ShardWorker {
    /// Streams are `(seed, Sample, id)` and `(seed, Quant, id)`.
    pub fn new(
        id: u32,
        shard: std::ops::Range<usize>,
        batch: usize,
        uplink: Uplink,
        seed: u64,
        d: usize,
    ) -> Self {
        ShardWorker {
            id,
            shard,
            batch,
            uplink,
            full_shard: false,
            sample: Stream::new(seed, Purpose::Sample, u64::from(id)),
            quant: Stream::new(seed, Purpose::Quant, u64::from(id)),
            indices: Vec::with_capacity(batch),
            grad: vec![0.0; d],
        }
    }

    /// Use every shard row each round instead of sampling.
    pub fn with_full_shard(mut self, full: bool) -> Self {
        self.full_shard = full;
        self
    }

    pub fn uplink(&self) -> Uplink {
        self.uplink
    }

    pub fn shard(&self) -> std::ops::Range<usize> {
        self.shard.clone()
    }

    /// Samples the batch and returns the worker's mini-batch gradient.
    pub fn gradient(&mut self, ds: &PlantedDataset, w: &[f64]) -> &[f64] {
        self.indices.clear();
        if self.full_shard {
            self.indices.extend(self.shard.clone());
        } else {
            let len = self.shard.len() as u64;
            for _ in 0..self.batch {
                self.indices
                    .push(self.shard.start + self.sample.below(len) as usize);
            }
        }
        ds.minibatch_gradient_into(w, &self.indices, &mut self.grad);
        &self.grad
    }

    pub fn quantized_gradient(
        &mut self,
        ds: &PlantedDataset,
        w: &[f64],
        bits: u32,
    ) -> Result<QuantizedVector, CodecError> {
        let s = codec::levels_for_bits(bits)?;
        self.gradient(ds, w);
        codec::quantize(&self.grad, s, &mut self.quant)
    }

    /// Encoded upstream payload for this round.
    pub fn payload(&mut self, ds: &PlantedDataset, w: &[f64]) -> Result<Vec<u8>, CodecError> {
        match self.uplink {
            Uplink::Float64 => {
                let g = self.gradient(ds, w);
                Ok(g.iter().flat_map(|v| v.to_le_bytes()).collect())
            }
            Uplink::Quantized { bits } => {
                let q = self.quantized_gradient(ds, w, bits)?;
                codec::encode(&q, bits)
            }
        }
    }

    /// What the master would reconstruct from this round's payload.
    pub fn reconstructed(
        &mut self,
        ds: &PlantedDataset,
        w: &[f64],
    ) -> Result<Vec<f64>, CodecError> {
        match self.uplink {
            Uplink::Float64 => Ok(self.gradient(ds, w).to_vec()),
            Uplink::Quantized { bits } => {
                Ok(codec::dequantize(&self.quantized_gradient(ds, w, bits)?))
            }
        }
    }
}

/// Reconstructs a worker gradient from its payload.
pub fn decode_payload(payload: &[u8], uplink: Uplink, d: usize) -> Result<Vec<f64>, CodecError> {
    match uplink {
        Uplink::Float64 => {
            if payload.len() != 8 * d {
                let expected = 8 * d;
                return Err(if payload.len() < expected {
                    CodecError::Truncated {
                        expected,
                        got: payload.len(),
                    }
                } else {
                    CodecError::Oversized {
                        expected,
                        got: payload.len(),
                    }
                });
            }
            Ok(payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        }
        Uplink::Quantized { bits } => {
            let q = codec::decode(payload, bits)?;
            if q.d() != d {
                return Err(CodecError::Invalid(format!(
                    "payload has d = {}, expected {d}",
                    q.d()
                )));
            }
            Ok(codec::dequantize(&q))
        }
    }
}

/// `w <- w - step * (1/K) sum_k parts[k]`, summing in the given order.
pub fn aggregate_step<'a, I>(w: &mut [f64], parts: I, step: f64)
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut acc = vec![0.0; w.len()];
    let mut count = 0usize;
    for part in parts {
        for (a, p) in acc.iter_mut().zip(part) {
            *a += p;
        }
        count += 1;
    }
    let k = count as f64;
    for (wj, a) in w.iter_mut().zip(&acc) {
        *wj -= step * (a / k);
    }
}

pub(crate) fn make_record(
    ds: &PlantedDataset,
    cfg: &RunConfig,
    t: u64,
    w: &[f64],
    upstream_bytes: u64,
    elapsed_ns: u64,
) -> TraceRecord {
    let loss = (cfg.loss_every > 0 && t.is_multiple_of(cfg.loss_every))
        .then(|| ds.loss(w).expect("dimension validated"));
    TraceRecord {
        t,
        rel_err: ds.relative_error(w),
        loss,
        upstream_bytes,
        elapsed_ns,
    }
}

/// Incremental trace construction shared by the local engines and the
/// distributed master.
#[derive(Debug)]
pub(crate) struct TraceBuilder {
    records: Vec<TraceRecord>,
    tol: f64,
    early_exit: bool,
}

pub(crate) enum Step {
    Continue,
    Stop(RunStatus),
}

impl TraceBuilder {
    pub(crate) fn new(initial: TraceRecord, tol: f64, early_exit: bool) -> Self {
        TraceBuilder {
            records: vec![initial],
            tol,
            early_exit,
        }
    }

    /// Records iterate `t` (or flags divergence) and decides whether to go on.
    pub(crate) fn push(
        &mut self,
        ds: &PlantedDataset,
        cfg: &RunConfig,
        t: u64,
        w: &[f64],
        bytes: u64,
        elapsed_ns: u64,
    ) -> Step {
        if !w.iter().all(|v| v.is_finite()) {
            return Step::Stop(RunStatus::Diverged);
        }
        let record = make_record(ds, cfg, t, w, bytes, elapsed_ns);
        let done = self.early_exit && record.rel_err < self.tol;
        self.records.push(record);
        if done {
            Step::Stop(RunStatus::Converged)
        } else if t >= cfg.max_iters {
            Step::Stop(self.budget_status())
        } else {
            Step::Continue
        }
    }

    fn budget_status(&self) -> RunStatus {
        match self.records.last() {
            Some(r) if r.rel_err < self.tol => RunStatus::Converged,
            _ => RunStatus::BudgetExhausted,
        }
    }

    pub(crate) fn finish(self, final_w: WeightVector, status: RunStatus) -> Trace {
        Trace {
            records: self.records,
            final_w,
            status,
        }
    }

    pub(crate) fn completed(&self) -> u64 {
        self.records.last().map_or(0, |r| r.t)
    }
}

/// Mini-batch SGD with uniform sampling with replacement.
pub fn run_sgd(cfg: &RunConfig, ds: &PlantedDataset) -> Result<Trace, EngineError> {
    if cfg.scheme != Scheme::Sgd {
        return Err(EngineError::InvalidConfig(
            "run_sgd needs scheme sgd".into(),
        ));
    }
    cfg.validate_for(ds)?;
    let clock = Stopwatch::start();
    let w0 = cfg.initial_point(ds);
    Ok(sgd_from(cfg, ds, w0, clock, true))
}

fn sgd_from(
    cfg: &RunConfig,
    ds: &PlantedDataset,
    mut w: WeightVector,
    clock: Stopwatch,
    early_exit: bool,
) -> Trace {
    let step = cfg.step_size(ds.d()) * cfg.grad_scale;
    let mut sample = Stream::new(cfg.seed, Purpose::Sample, 0);
    let mut builder = TraceBuilder::new(
        make_record(ds, cfg, 0, &w, 0, clock.elapsed_ns()),
        cfg.tol,
        early_exit,
    );
    let full: Vec<usize> = if cfg.full_batch {
        (0..ds.n()).collect()
    } else {
        Vec::new()
    };
    let mut indices = Vec::with_capacity(cfg.batch);
    let mut grad = vec![0.0; ds.d()];
    let mut next = w.clone();
    for t in 1..=cfg.max_iters {
        let clock = Stopwatch::start();
        let batch: &[usize] = if cfg.full_batch {
            &full
        } else {
            indices.clear();
            for _ in 0..cfg.batch {
                indices.push(sample.below(ds.n() as u64) as usize);
            }
            &indices
        };
        ds.minibatch_gradient_into(&w, batch, &mut grad);
        for ((nj, wj), g) in next.iter_mut().zip(w.iter()).zip(&grad) {
            *nj = wj - step * g;
        }
        match builder.push(ds, cfg, t, &next, 0, clock.elapsed_ns()) {
            Step::Continue => std::mem::swap(&mut w, &mut next),
            Step::Stop(RunStatus::Diverged) => return builder.finish(w, RunStatus::Diverged),
            Step::Stop(status) => return builder.finish(next, status),
        }
    }
    unreachable!("the loop stops at max_iters")
}

/// QSGD with `K` simulated workers, each sampling from its own contiguous
/// shard and quantizing its partial gradient before averaging.
pub fn run_qsgd_local(cfg: &RunConfig, ds: &PlantedDataset) -> Result<Trace, EngineError> {
    if cfg.scheme != Scheme::Qsgd {
        return Err(EngineError::InvalidConfig(
            "run_qsgd_local needs scheme qsgd".into(),
        ));
    }
    cfg.validate_for(ds)?;
    let clock = Stopwatch::start();
    let w0 = cfg.initial_point(ds);
    sharded_from(
        cfg,
        ds,
        Uplink::Quantized { bits: cfg.bits },
        w0,
        clock,
        true,
    )
}

/// The sharded K-worker update with a float64 uplink (no quantization).
pub fn run_sharded_sgd_local(cfg: &RunConfig, ds: &PlantedDataset) -> Result<Trace, EngineError> {
    cfg.validate_for(ds)?;
    partition(ds.n(), cfg.workers)?;
    let clock = Stopwatch::start();
    let w0 = cfg.initial_point(ds);
    sharded_from(cfg, ds, Uplink::Float64, w0, clock, true)
}

pub(crate) fn shard_workers(
    cfg: &RunConfig,
    ds: &PlantedDataset,
    uplink: Uplink,
) -> Result<Vec<ShardWorker>, EngineError> {
    let shards = partition(ds.n(), cfg.workers)?;
    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(k, shard)| {
            ShardWorker::new(
                k as u32,
                shard,
                cfg.batch_per_worker(),
                uplink,
                cfg.seed,
                ds.d(),
            )
            .with_full_shard(cfg.full_batch)
        })
        .collect())
}

fn sharded_from(
    cfg: &RunConfig,
    ds: &PlantedDataset,
    uplink: Uplink,
    mut w: WeightVector,
    clock: Stopwatch,
    early_exit: bool,
) -> Result<Trace, EngineError> {
    let mut workers = shard_workers(cfg, ds, uplink)?;
    let step = cfg.step_size(ds.d()) * cfg.grad_scale;
    let bytes = (cfg.workers * uplink.payload_len(ds.d())) as u64;
    let mut builder = TraceBuilder::new(
        make_record(ds, cfg, 0, &w, 0, clock.elapsed_ns()),
        cfg.tol,
        early_exit,
    );
    for t in 1..=cfg.max_iters {
        let clock = Stopwatch::start();
        let parts = workers
            .iter_mut()
            .map(|worker| worker.reconstructed(ds, &w))
            .collect::<Result<Vec<_>, _>>();
        let parts = match parts {
            Ok(p) => p,
            // A non-finite gradient means the iterate has blown up.
            Err(CodecError::NonFinite) => return Ok(builder.finish(w, RunStatus::Diverged)),
            Err(e) => return Err(e.into()),
        };
        let mut next = w.clone();
        aggregate_step(&mut next, parts.iter().map(Vec::as_slice), step);
        match builder.push(ds, cfg, t, &next, bytes, clock.elapsed_ns()) {
            Step::Continue => w = next,
            Step::Stop(RunStatus::Diverged) => return Ok(builder.finish(w, RunStatus::Diverged)),
            Step::Stop(status) => return Ok(builder.finish(next, status)),
        }
    }
    unreachable!("the loop stops at max_iters")
}

/// Dispatches on the scheme.
pub fn run(cfg: &RunConfig, ds: &PlantedDataset) -> Result<Trace, EngineError> {
    match cfg.scheme {
        Scheme::Sgd => run_sgd(cfg, ds),
        Scheme::Qsgd => run_qsgd_local(cfg, ds),
    }
}

/// Like [`run`] but always spends the whole `max_iters` budget; the status
/// reflects the last iterate.
pub fn run_budget(cfg: &RunConfig, ds: &PlantedDataset) -> Result<Trace, EngineError> {
    cfg.validate_for(ds)?;
    run_fixed(cfg, ds, cfg.initial_point(ds))
}

/// Runs exactly `cfg.max_iters` updates from `w0` without early exit.
fn run_fixed(cfg: &RunConfig, ds: &PlantedDataset, w0: WeightVector) -> Result<Trace, EngineError> {
    let clock = Stopwatch::start();
    match cfg.scheme {
        Scheme::Sgd => Ok(sgd_from(cfg, ds, w0, clock, false)),
        Scheme::Qsgd => sharded_from(
            cfg,
            ds,
            Uplink::Quantized { bits: cfg.bits },
            w0,
            clock,
            false,
        ),
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleOutcome {
    pub estimate: WeightVector,
    /// Trial whose final iterate was returned.
    pub chosen: usize,
    pub finals: Vec<WeightVector>,
}

/// First candidate (in order) whose closed ball of `radius` holds at least
/// `ceil(L/2)` of the candidates, itself included.
pub fn select_majority(finals: &[WeightVector], radius: f64) -> Option<usize> {
    let needed = finals.len().div_ceil(2);
    (0..finals.len()).find(|&l| {
        finals
            .iter()
            .filter(|other| distance(&finals[l], other) <= radius)
            .count()
            >= needed
    })
}

/// Runs `trials` independent runs of `iters` updates from a shared initial
/// point and returns a final iterate whose `2 sqrt(eps)` ball contains a
/// majority of the finals. Trial `l` uses seed `derive_seed(cfg.seed, Trial, l)`.
pub fn ensemble_estimate(
    ds: &PlantedDataset,
    cfg: &RunConfig,
    trials: usize,
    iters: u64,
    eps: f64,
) -> Result<EnsembleOutcome, EngineError> {
    if trials == 0 || iters == 0 {
        return Err(EngineError::InvalidConfig(
            "trials and iters must be at least 1".into(),
        ));
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(EngineError::InvalidConfig(format!(
            "eps must be positive, got {eps}"
        )));
    }
    let base = RunConfig {
        max_iters: iters,
        ..cfg.clone()
    };
    base.validate_for(ds)?;
    let w0 = base.initial_point(ds);
    let finals = par::map_indexed(trials, |l| {
        let trial_cfg = RunConfig {
            seed: derive_seed(cfg.seed, Purpose::Trial, l as u64),
            ..base.clone()
        };
        run_fixed(&trial_cfg, ds, w0.clone()).map(|trace| trace.final_w)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let radius = 2.0 * eps.sqrt();
    match select_majority(&finals, radius) {
        Some(chosen) => Ok(EnsembleOutcome {
            estimate: finals[chosen].clone(),
            chosen,
            finals,
        }),
        None => Err(EngineError::EnsembleFailed {
            needed: trials.div_ceil(2),
            trials,
            radius,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planted::WStarSpec;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn theorem_step_size_examples() {
        assert!(close(theorem_step_size(1000, 200), 3.0 / 186.25, 1e-15));
        assert!(close(theorem_step_size(1000, 200), 0.0161074, 1e-7));
        assert!(close(theorem_step_size(1000, 1000), 3.0 / 42.25, 1e-15));
        assert!(close(theorem_step_size(1000, 1000), 0.0710059, 1e-7));
        let mut prev = 0.0;
        for m in [1, 10, 100, 1_000, 10_000, 1_000_000] {
            let eta = theorem_step_size(1000, m);
            assert!(eta > prev && eta < 0.48);
            prev = eta;
        }
        assert!(close(theorem_step_size(1, usize::MAX), 0.48, 1e-12));
    }

    #[test]
    fn experiment_step_size_examples() {
        assert_eq!(experiment_step_size(Scheme::Sgd, 1000, 800, 0), 0.8);
        assert!(close(
            experiment_step_size(Scheme::Qsgd, 1000, 800, 7),
            5600.0 / 9000.0,
            1e-15
        ));
        assert!(close(
            experiment_step_size(Scheme::Qsgd, 1000, 800, 7),
            0.62222,
            1e-5
        ));
        assert_eq!(experiment_step_size(Scheme::Sgd, 37, 37, 0), 1.0);
    }

    #[test]
    fn rate_examples() {
        assert!(close(theorem_rate(1000, 200), 1.0 - 9.0 / 745.0, 1e-15));
        assert!(close(theorem_rate(1000, 200), 0.9879195, 1e-7));
        assert!(close(theorem_rate(500, 500), 1.0 - 9.0 / 169.0, 1e-15));
        assert!(close(theorem_rate(500, 500), 0.9467456, 1e-7));
        for d in [1, 10, 1000] {
            for m in [1, 7, 1000, 100_000] {
                let rho = theorem_rate(d, m);
                assert!(rho > 0.0 && rho < 1.0);
            }
        }
        assert!(close(
            qsgd_rate(1000, 800, 63),
            1.0 - 9.0 / (16.0 * 17.60315),
            1e-6
        ));
        assert!(close(qsgd_rate(1000, 800, 63), 0.968045, 1e-6));
        let limit = 1.0 - 9.0 / (16.0 * (9.0 * 1000.0 / 800.0 + 25.0 / 16.0 + 25.0 / 16.0));
        assert!(close(qsgd_rate(1000, 800, u32::MAX), limit, 1e-9));
    }

    #[test]
    fn qsgd_rate_dominates_and_gap_shrinks() {
        for (d, m) in [(10, 2), (100, 80), (1000, 800), (4000, 100)] {
            let rho = theorem_rate(d, m);
            let mut prev_gap = f64::INFINITY;
            for s in [1, 3, 7, 15, 63, 127, 1023] {
                let gap = qsgd_rate(d, m, s) - rho;
                assert!(gap > 0.0, "d={d} m={m} s={s}");
                assert!(gap < prev_gap);
                prev_gap = gap;
            }
        }
    }

    #[test]
    fn iteration_bound_examples() {
        assert_eq!(iterations_for_accuracy(2.0, 1.0, 0.5).unwrap(), 0);
        assert_eq!(iterations_for_accuracy(1e-3, 0.1, 0.9879195).unwrap(), 820);
        let a = iterations_for_accuracy(1e-3, 0.1, 0.9).unwrap();
        let b = iterations_for_accuracy(1e-3, 0.1, 0.95).unwrap();
        assert!(b.abs_diff(2 * a) <= 1);
        assert!(matches!(
            iterations_for_accuracy(1e-3, 0.1, 1.0),
            Err(EngineError::InvalidRate(_))
        ));
        assert!(iterations_for_accuracy(1e-3, 0.0, 0.5).is_err());
    }

    #[test]
    fn partition_examples() {
        let shards = partition(20000, 40).unwrap();
        assert_eq!(shards.len(), 40);
        assert!(shards.iter().all(|s| s.len() == 500));
        assert_eq!(shards[39], 19500..20000);
        assert_eq!(partition(10, 1).unwrap(), vec![0..10]);
        assert!(matches!(
            partition(10, 3),
            Err(EngineError::Partition { n: 10, workers: 3 })
        ));
    }

    #[test]
    fn bytes_per_iteration_examples() {
        assert_eq!(bytes_per_iteration(Scheme::Sgd, 4000, 40, 8), 1_280_000);
        assert_eq!(bytes_per_iteration(Scheme::Qsgd, 4000, 40, 8), 160_640);
        let ratio = 160_640.0 / 1_280_000.0;
        assert!(close(ratio, 0.1255, 1e-4));
        assert_eq!(bytes_per_iteration(Scheme::Sgd, 4000, 0, 8), 0);
        assert_eq!(bytes_per_iteration(Scheme::Qsgd, 4000, 0, 8), 0);
    }

    #[test]
    fn config_validation() {
        let ok = RunConfig::default();
        ok.validate().unwrap();
        let bad = [
            RunConfig {
                batch: 0,
                ..ok.clone()
            },
            RunConfig {
                max_iters: 0,
                ..ok.clone()
            },
            RunConfig {
                tol: 0.0,
                ..ok.clone()
            },
            RunConfig {
                step: StepPolicy::Explicit(-1.0),
                ..ok.clone()
            },
            RunConfig {
                scheme: Scheme::Qsgd,
                workers: 3,
                batch: 800,
                ..ok.clone()
            },
            RunConfig {
                scheme: Scheme::Qsgd,
                bits: 1,
                ..ok.clone()
            },
            RunConfig {
                scheme: Scheme::Qsgd,
                workers: 0,
                ..ok.clone()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        let ds = PlantedDataset::generate(10, 3, &WStarSpec::paper_default(), 1).unwrap();
        let cfg = RunConfig {
            scheme: Scheme::Qsgd,
            workers: 4,
            batch: 8,
            ..ok
        };
        assert!(matches!(
            cfg.validate_for(&ds),
            Err(EngineError::Partition { .. })
        ));
    }

    #[test]
    fn majority_selection_on_a_fixture() {
        // Three points within 0.1 of each other, two far away; radius 2 sqrt(eps) = 0.2.
        let finals: Vec<WeightVector> = vec![
            vec![10.0, 0.0].into(),
            vec![0.0, 0.0].into(),
            vec![0.05, 0.05].into(),
            vec![-50.0, 3.0].into(),
            vec![0.1, 0.0].into(),
        ];
        let radius = 2.0 * 0.01f64.sqrt();
        // Brute-force pairwise distances: count neighbours for each candidate.
        let counts: Vec<usize> = finals
            .iter()
            .map(|a| finals.iter().filter(|b| distance(a, b) <= radius).count())
            .collect();
        assert_eq!(counts, vec![1, 3, 3, 1, 3]);
        assert_eq!(select_majority(&finals, radius), Some(1));
        assert_eq!(select_majority(&finals[..1], radius), Some(0));
        let spread: Vec<WeightVector> = (0..4).map(|i| vec![i as f64 * 10.0].into()).collect();
        assert_eq!(select_majority(&spread, radius), None);
    }

    #[test]
    fn majority_uses_ceiling_and_closed_balls() {
        // L = 4 needs 2; two points exactly `radius` apart qualify.
        let finals: Vec<WeightVector> = vec![
            vec![0.0].into(),
            vec![1.0].into(),
            vec![5.0].into(),
            vec![9.0].into(),
        ];
        assert_eq!(select_majority(&finals, 1.0), Some(0));
        assert_eq!(select_majority(&finals, 0.5), None);
    }

    #[test]
    fn uplink_codes() {
        assert_eq!(Uplink::from_code(0).unwrap(), Uplink::Float64);
        assert_eq!(Uplink::from_code(8).unwrap(), Uplink::Quantized { bits: 8 });
        assert!(Uplink::from_code(1).is_err());
        assert_eq!(Uplink::Quantized { bits: 7 }.code(), 7);
    }

    #[test]
    fn aggregate_of_identical_parts_is_a_single_step() {
        let part = vec![1.5, -3.0, 0.25];
        let mut w = vec![1.0, 2.0, 3.0];
        aggregate_step(
            &mut w,
            [part.as_slice(), part.as_slice(), part.as_slice()],
            0.5,
        );
        let mut single = vec![1.0, 2.0, 3.0];
        aggregate_step(&mut single, [part.as_slice()], 0.5);
        assert_eq!(w, single);
        assert_eq!(w, vec![1.0 - 0.75, 2.0 + 1.5, 3.0 - 0.125]);
    }
}
