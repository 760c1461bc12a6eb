//! Experiment drivers that turn runs into plot-ready CSV: convergence
//! sweeps, phase-transition grids and communication/time breakdowns.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dist::DistributedRun;
use crate::engine::{self, EngineError, RunConfig, RunStatus, Scheme, StepPolicy, Trace};
use crate::par;
use crate::planted::{ModelError, PlantedDataset, WStarSpec};
use crate::rng::{derive_seed, Purpose};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// What a convergence experiment varies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceSweep {
    /// Batch sizes `m`, with `η = m/d` unless the base config fixes the step.
    Batch(Vec<usize>),
    /// Bit widths `b` for QSGD.
    Bits(Vec<u32>),
}

impl ConvergenceSweep {
    pub fn batch_default() -> Self {
        ConvergenceSweep::Batch(vec![200, 400, 600, 800])
    }

    pub fn bits_default() -> Self {
        ConvergenceSweep::Bits(vec![4, 5, 6, 7])
    }

    pub fn len(&self) -> usize {
        match self {
            ConvergenceSweep::Batch(v) => v.len(),
            ConvergenceSweep::Bits(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, i: usize) -> String {
        match self {
            ConvergenceSweep::Batch(v) => format!("m{}", v[i]),
            ConvergenceSweep::Bits(v) => format!("b{}", v[i]),
        }
    }

    fn config(&self, base: &RunConfig, i: usize) -> RunConfig {
        let mut cfg = base.clone();
        match self {
            ConvergenceSweep::Batch(v) => cfg.batch = v[i],
            ConvergenceSweep::Bits(v) => {
                cfg.scheme = Scheme::Qsgd;
                cfg.bits = v[i];
            }
        }
        cfg
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub label: String,
    pub config: RunConfig,
    pub trace: Trace,
}

#[derive(Debug, Clone)]
pub struct ConvergenceResult {
    pub points: Vec<SweepPoint>,
}

pub const SWEEP_SUMMARY_HEADER: &str = "point,iterations,iterations_to_tol,final_rel_err,status";

impl ConvergenceResult {
    /// `t` then one `rel_err_<point>` column per sweep point; runs that stop
    /// early leave their later cells empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for p in &self.points {
            write!(out, ",rel_err_{}", p.label).unwrap();
        }
        out.push('\n');
        let rows = self
            .points
            .iter()
            .map(|p| p.trace.records.len())
            .max()
            .unwrap_or(0);
        for row in 0..rows {
            write!(out, "{row}").unwrap();
            for p in &self.points {
                out.push(',');
                if let Some(r) = p.trace.records.get(row) {
                    write!(out, "{:e}", r.rel_err).unwrap();
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = format!("{SWEEP_SUMMARY_HEADER}\n");
        for p in &self.points {
            let to_tol = p
                .trace
                .iterations_to(p.config.tol)
                .map(|t| t.to_string())
                .unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{:e},{}",
                p.label,
                p.trace.iterations(),
                to_tol,
                p.trace.final_rel_err(),
                status_name(p.trace.status)
            )
            .unwrap();
        }
        out
    }
}

pub fn status_name(status: RunStatus) -> &'static str {
    match status {
        RunStatus::Converged => "converged",
        RunStatus::BudgetExhausted => "budget_exhausted",
        RunStatus::Diverged => "diverged",
        RunStatus::Aborted => "aborted",
    }
}

/// One run per sweep point on the same dataset and seed. Diverged runs are
/// kept with their status.
pub fn convergence_experiment(
    base: &RunConfig,
    ds: &PlantedDataset,
    sweep: &ConvergenceSweep,
) -> Result<ConvergenceResult, HarnessError> {
    if sweep.is_empty() {
        return Err(HarnessError::Invalid("sweep has no points".into()));
    }
    let configs: Vec<RunConfig> = (0..sweep.len()).map(|i| sweep.config(base, i)).collect();
    for cfg in &configs {
        cfg.validate_for(ds)?;
    }
    let traces = par::map_indexed(configs.len(), |i| engine::run(&configs[i], ds));
    let points = traces
        .into_iter()
        .zip(configs)
        .enumerate()
        .map(|(i, (trace, config))| {
            Ok(SweepPoint {
                label: sweep.label(i),
                config,
                trace: trace?,
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(ConvergenceResult { points })
}

/// Sample sizes for one row of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleAxis {
    /// The same absolute `n` values for every `d`.
    Counts(Vec<usize>),
    /// `n = round(ratio * d)`.
    Ratios(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseGrid {
    pub d_values: Vec<usize>,
    pub n: SampleAxis,
    pub trials_per_cell: usize,
    pub iteration_budget: u64,
    pub success_tol: f64,
    pub scheme: Scheme,
    pub bits: u32,
    /// Batch size as a fraction of `d`.
    pub batch_fraction: f64,
    pub workers: usize,
    pub w_star: WStarSpec,
}

impl Default for PhaseGrid {
    fn default() -> Self {
        PhaseGrid {
            d_values: vec![25, 50, 100],
            n: SampleAxis::Ratios(vec![1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0]),
            trials_per_cell: 10,
            iteration_budget: 2000,
            success_tol: 1e-3,
            scheme: Scheme::Sgd,
            bits: 7,
            batch_fraction: 0.8,
            workers: 1,
            w_star: WStarSpec::paper_default(),
        }
    }
}

impl PhaseGrid {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Invalid(msg));
        if self.d_values.is_empty() {
            return bad("d_values is empty".into());
        }
        if self.d_values.contains(&0) {
            return bad("d_values must be at least 1".into());
        }
        match &self.n {
            SampleAxis::Counts(v) if v.is_empty() => return bad("n values are empty".into()),
            SampleAxis::Counts(v) if v.contains(&0) => {
                return bad("n values must be at least 1".into())
            }
            SampleAxis::Ratios(v) if v.is_empty() => return bad("n ratios are empty".into()),
            SampleAxis::Ratios(v) if v.iter().any(|r| !(r.is_finite() && *r > 0.0)) => {
                return bad("n ratios must be positive".into())
            }
            _ => {}
        }
        if self.trials_per_cell == 0 || self.iteration_budget == 0 || self.workers == 0 {
            return bad("trials_per_cell, iteration_budget and workers must be at least 1".into());
        }
        if !(self.success_tol.is_finite() && self.success_tol > 0.0) {
            return bad(format!(
                "success_tol must be positive, got {}",
                self.success_tol
            ));
        }
        if !(self.batch_fraction.is_finite() && self.batch_fraction > 0.0) {
            return bad(format!(
                "batch_fraction must be positive, got {}",
                self.batch_fraction
            ));
        }
        for cell in self.cells() {
            if cell.n < self.workers {
                return bad(format!(
                    "n = {} is smaller than workers = {}",
                    cell.n, self.workers
                ));
            }
            self.run_config(cell, 0).validate()?;
        }
        Ok(())
    }

    /// Cells in row-major order: `d` outer, `n` inner.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &d in &self.d_values {
            match &self.n {
                SampleAxis::Counts(v) => out.extend(v.iter().map(|&n| Cell { d, n })),
                SampleAxis::Ratios(v) => out.extend(v.iter().map(|r| Cell {
                    d,
                    n: ((r * d as f64).round() as usize).max(1),
                })),
            }
        }
        out
    }

    fn batch(&self, d: usize) -> usize {
        let m = ((self.batch_fraction * d as f64).round() as usize).max(self.workers);
        // Round down to a multiple of K.
        m - m % self.workers
    }

    fn run_config(&self, cell: Cell, seed: u64) -> RunConfig {
        RunConfig {
            scheme: self.scheme,
            batch: self.batch(cell.d),
            workers: self.workers,
            bits: self.bits,
            step: StepPolicy::Experiment,
            max_iters: self.iteration_budget,
            tol: self.success_tol,
            seed,
            ..RunConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub d: usize,
    pub n: usize,
}

/// Seed of one trial; depends only on its coordinates.
pub fn trial_seed(base: u64, cell: Cell, trial: usize) -> u64 {
    let by_d = derive_seed(base, Purpose::Trial, cell.d as u64);
    let by_n = derive_seed(by_d, Purpose::Trial, cell.n as u64);
    derive_seed(by_n, Purpose::Trial, trial as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseCell {
    pub d: usize,
    pub n: usize,
    pub trials: usize,
    pub successes: usize,
}

impl PhaseCell {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.trials as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTable {
    pub cells: Vec<PhaseCell>,
}

pub const PHASE_CSV_HEADER: &str = "d,n,trials,successes,success_rate";

impl PhaseTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{PHASE_CSV_HEADER}\n");
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{},{}",
                c.d,
                c.n,
                c.trials,
                c.successes,
                c.success_rate()
            )
            .unwrap();
        }
        out
    }

    /// Cells for one `d`, in increasing `n`.
    pub fn row(&self, d: usize) -> Vec<&PhaseCell> {
        let mut row: Vec<_> = self.cells.iter().filter(|c| c.d == d).collect();
        row.sort_by_key(|c| c.n);
        row
    }

    /// Smallest `n` whose success rate reaches `level`.
    pub fn threshold(&self, d: usize, level: f64) -> Option<usize> {
        self.row(d)
            .into_iter()
            .find(|c| c.success_rate() >= level)
            .map(|c| c.n)
    }
}

/// Running median over a window of three, with the ends kept as is.
pub fn median_smooth(values: &[f64]) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            if i == 0 || i + 1 == values.len() {
                return values[i];
            }
            let mut w = [values[i - 1], values[i], values[i + 1]];
            w.sort_by(f64::total_cmp);
            w[1]
        })
        .collect()
}

pub fn is_non_decreasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[0] <= w[1])
}

/// Runs every trial of every cell. A trial succeeds when the final
/// relative error after the whole budget is below `success_tol`; failed or
/// diverged runs count as failures.
pub fn phase_transition(grid: &PhaseGrid, base_seed: u64) -> Result<PhaseTable, HarnessError> {
    grid.validate()?;
    let cells = grid.cells();
    let per = grid.trials_per_cell;
    let outcomes = par::map_indexed(cells.len() * per, |job| {
        let cell = cells[job / per];
        let seed = trial_seed(base_seed, cell, job % per);
        let Ok(ds) = PlantedDataset::generate(cell.n, cell.d, &grid.w_star, seed) else {
            return false;
        };
        match engine::run_budget(&grid.run_config(cell, seed), &ds) {
            Ok(trace) => {
                trace.status != RunStatus::Diverged && trace.final_rel_err() < grid.success_tol
            }
            Err(_) => false,
        }
    });
    let cells = cells
        .iter()
        .enumerate()
        .map(|(i, cell)| PhaseCell {
            d: cell.d,
            n: cell.n,
            trials: per,
            successes: outcomes[i * per..(i + 1) * per]
                .iter()
                .filter(|&&ok| ok)
                .count(),
        })
        .collect();
    Ok(PhaseTable { cells })
}

/// Wall-clock and byte breakdown of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub label: String,
    pub comm_ns: u64,
    pub comp_ns: u64,
    pub total_ns: u64,
    /// Upstream codec payload bytes.
    pub total_bytes: u64,
}

pub const TIMING_CSV_HEADER: &str = "run,comm_time,comp_time,total_time,total_bytes";

/// A local run has no transport, so all of its time is computation.
pub fn timing_from_trace(label: &str, trace: &Trace) -> TimingRow {
    let total = trace.total_elapsed_ns();
    TimingRow {
        label: label.into(),
        comm_ns: 0,
        comp_ns: total,
        total_ns: total,
        total_bytes: trace.total_upstream_bytes(),
    }
}

/// Splits master wait time into worker computation (the mean over workers)
/// and the remainder, which is attributed to serialization and transport.
pub fn timing_from_distributed(label: &str, run: &DistributedRun) -> TimingRow {
    let reports: Vec<_> = run.workers.iter().filter_map(|w| w.as_ref().ok()).collect();
    let worker_comp = if reports.is_empty() {
        0
    } else {
        reports.iter().map(|r| r.compute_ns).sum::<u64>() / reports.len() as u64
    };
    let t = run.master.timing;
    TimingRow {
        label: label.into(),
        comm_ns: (t.broadcast_ns + t.wait_ns).saturating_sub(worker_comp),
        comp_ns: t.aggregate_ns + worker_comp,
        total_ns: t.total_ns,
        total_bytes: run.master.bytes.upstream_payload,
    }
}

pub fn timing_report(rows: &[TimingRow]) -> String {
    let secs = |ns: u64| ns as f64 * 1e-9;
    let mut out = format!("{TIMING_CSV_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{}",
            r.label,
            secs(r.comm_ns),
            secs(r.comp_ns),
            secs(r.total_ns),
            r.total_bytes
        )
        .unwrap();
    }
    out
}

/// Writes `bytes` to `path` through a temporary file in the same directory,
/// so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let io = |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io)?;
    let name = path
        .file_name()
        .ok_or_else(|| io(std::io::Error::other("path has no file name")))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            write!(s, "{b:02x}").unwrap();
            s
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Config echo, effective seed and checksums of everything a command wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub artifacts: Vec<ArtifactEntry>,
}

/// Collects artifacts in memory and commits them together: every artifact
/// is written atomically, then the manifest last.
#[derive(Debug)]
pub struct ArtifactSet {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl ArtifactSet {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ArtifactSet {
            dir: dir.into(),
            files: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.into(), bytes.into()));
    }

    pub fn commit(
        self,
        command: &str,
        seed: u64,
        config: serde_json::Value,
    ) -> Result<RunManifest, HarnessError> {
        let mut artifacts = Vec::with_capacity(self.files.len());
        for (name, bytes) in &self.files {
            write_atomic(&self.dir.join(name), bytes)?;
            artifacts.push(ArtifactEntry {
                path: name.clone(),
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
            });
        }
        let manifest = RunManifest {
            command: command.into(),
            seed,
            config,
            artifacts,
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        write_atomic(&self.dir.join(MANIFEST_NAME), &json)?;
        Ok(manifest)
    }
}

pub const MANIFEST_NAME: &str = "manifest.json";
