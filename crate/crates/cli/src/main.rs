mod config;

use std::io::Write as _;
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use relu_qsgd::dist::{self, DistributedRun, Endpoint, FaultPlan, WorkerOptions};
use relu_qsgd::engine::{self, RunStatus, Scheme};
use relu_qsgd::harness::{self, ArtifactSet, ConvergenceSweep};
use relu_qsgd::planted::PlantedDataset;

use config::CliConfig;

#[derive(Debug, Parser)]
#[command(
    name = "relu-qsgd",
    version,
    about = "Planted ReLU regression with SGD and quantized SGD"
)]
struct Cli {
    /// Output directory; every artifact path is relative to it.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Base seed. Overrides RELU_QSGD_SEED and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config file.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named built-in config (see `presets`).
    #[arg(long, global = true)]
    preset: Option<String>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Overrides {
    #[arg(long, global = true, value_parser = ["sgd", "qsgd"])]
    scheme: Option<String>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    bits: Option<u32>,
    #[arg(long, global = true)]
    max_iters: Option<u64>,
    #[arg(long, global = true)]
    tol: Option<f64>,
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true)]
    d: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a planted dataset file.
    GenData {
        #[arg(long, default_value = "dataset.bin")]
        file: String,
    },
    /// One SGD or QSGD run; writes trace.csv and timing.csv.
    Train,
    /// Convergence curves over batch sizes or bit widths.
    Sweep {
        #[arg(long, value_delimiter = ',', conflicts_with = "sweep_bits")]
        sweep_batch: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        sweep_bits: Option<Vec<u32>>,
    },
    /// Success-probability grid over (n, d).
    Phase,
    /// Majority-vote ensemble of independent runs.
    Ensemble,
    /// SGD and QSGD over loopback TCP with a byte and time breakdown.
    Timing,
    /// Serve a distributed run to `workers` dist-worker processes.
    DistMaster {
        #[arg(long)]
        listen: Option<String>,
    },
    /// Join a dist-master as worker `id`.
    DistWorker {
        #[arg(long)]
        connect: Option<String>,
        #[arg(long)]
        id: Option<u32>,
    },
    /// List the built-in presets.
    Presets,
}

/// Exit statuses.
enum Failure {
    Validation(String),
    Diverged(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Diverged(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Diverged(m) | Failure::Runtime(m) => m,
        }
    }
}

type Outcome = Result<(), Failure>;

fn invalid(e: impl ToString) -> Failure {
    Failure::Validation(e.to_string())
}

fn run_invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Validation(format!("run: {e}"))
}

struct Context {
    out: PathBuf,
    seed: u64,
    cfg: CliConfig,
}

impl Context {
    fn echo(&self) -> serde_json::Value {
        serde_json::to_value(&self.cfg).expect("config serializes")
    }

    fn commit(&self, set: ArtifactSet, command: &str) -> Outcome {
        set.commit(command, self.seed, self.echo())
            .map_err(invalid)?;
        Ok(())
    }

    fn dataset(&self) -> Result<PlantedDataset, Failure> {
        self.cfg.dataset.validate().map_err(invalid)?;
        self.cfg.dataset.load(self.seed, &self.out).map_err(invalid)
    }
}

fn load_config(cli: &Cli) -> Result<Context, Failure> {
    let mut cfg = match (&cli.config, &cli.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            config::parse(&text, &path.display().to_string()).map_err(invalid)?
        }
        (None, Some(name)) => {
            let json =
                config::preset(name).ok_or_else(|| invalid(format!("unknown preset {name:?}")))?;
            config::parse(json, name).map_err(invalid)?
        }
        (None, None) => CliConfig::default(),
    };
    let seed = config::effective_seed(cli.seed, std::env::var(config::SEED_ENV).ok(), cfg.seed)
        .map_err(invalid)?;
    cfg.seed = seed;
    cfg.run.seed = seed;

    let o = &cli.overrides;
    if let Some(s) = &o.scheme {
        cfg.run.scheme = if s == "qsgd" {
            Scheme::Qsgd
        } else {
            Scheme::Sgd
        };
    }
    cfg.run.batch = o.batch.unwrap_or(cfg.run.batch);
    cfg.run.workers = o.workers.unwrap_or(cfg.run.workers);
    cfg.run.bits = o.bits.unwrap_or(cfg.run.bits);
    cfg.run.max_iters = o.max_iters.unwrap_or(cfg.run.max_iters);
    cfg.run.tol = o.tol.unwrap_or(cfg.run.tol);
    cfg.dataset.n = o.n.unwrap_or(cfg.dataset.n);
    cfg.dataset.d = o.d.unwrap_or(cfg.dataset.d);
    Ok(Context {
        out: cli.out.clone(),
        seed,
        cfg,
    })
}

fn finish_trace(trace: &engine::Trace) -> Outcome {
    println!(
        "{} after {} iterations, rel_err {:.3e}",
        harness::status_name(trace.status),
        trace.iterations(),
        trace.final_rel_err()
    );
    if trace.status == RunStatus::Diverged {
        return Err(Failure::Diverged(format!(
            "diverged after {} iterations",
            trace.iterations()
        )));
    }
    Ok(())
}

fn gen_data(ctx: &Context, file: &str) -> Outcome {
    if ctx.cfg.dataset.path.is_some() {
        return Err(invalid(
            "dataset.path: gen-data generates data; remove the path",
        ));
    }
    let ds = ctx.dataset()?;
    let mut set = ArtifactSet::new(&ctx.out);
    set.add(file, ds.to_bytes());
    ctx.commit(set, "gen-data")?;
    println!(
        "wrote {} ({} bytes)",
        ctx.out.join(file).display(),
        PlantedDataset::encoded_len(ds.n(), ds.d())
    );
    Ok(())
}

fn train(ctx: &Context) -> Outcome {
    let ds = ctx.dataset()?;
    ctx.cfg.run.validate_for(&ds).map_err(run_invalid)?;
    let trace = engine::run(&ctx.cfg.run, &ds).map_err(invalid)?;
    let mut set = ArtifactSet::new(&ctx.out);
    set.add("trace.csv", trace.to_csv());
    set.add(
        "timing.csv",
        harness::timing_report(&[harness::timing_from_trace(
            ctx.cfg.run.scheme.name(),
            &trace,
        )]),
    );
    ctx.commit(set, "train")?;
    finish_trace(&trace)
}

fn sweep(ctx: &Context, batch: Option<Vec<usize>>, bits: Option<Vec<u32>>) -> Outcome {
    let sweep = match (batch, bits) {
        (Some(m), _) => ConvergenceSweep::Batch(m),
        (None, Some(b)) => ConvergenceSweep::Bits(b),
        (None, None) => ctx
            .cfg
            .sweep
            .clone()
            .unwrap_or_else(|| match ctx.cfg.run.scheme {
                Scheme::Sgd => ConvergenceSweep::batch_default(),
                Scheme::Qsgd => ConvergenceSweep::bits_default(),
            }),
    };
    if sweep.is_empty() {
        return Err(invalid("sweep: needs at least one point"));
    }
    let ds = ctx.dataset()?;
    let result = harness::convergence_experiment(&ctx.cfg.run, &ds, &sweep).map_err(invalid)?;
    let mut set = ArtifactSet::new(&ctx.out);
    set.add("convergence.csv", result.to_csv());
    set.add("convergence_summary.csv", result.summary_csv());
    ctx.commit(set, "sweep")?;
    print!("{}", result.summary_csv());
    Ok(())
}

fn phase(ctx: &Context) -> Outcome {
    ctx.cfg
        .phase
        .validate()
        .map_err(|e| invalid(format!("phase: {e}")))?;
    let table = harness::phase_transition(&ctx.cfg.phase, ctx.seed).map_err(invalid)?;
    let mut set = ArtifactSet::new(&ctx.out);
    set.add("phase.csv", table.to_csv());
    ctx.commit(set, "phase")?;
    print!("{}", table.to_csv());
    Ok(())
}

fn ensemble(ctx: &Context) -> Outcome {
    let e = &ctx.cfg.ensemble;
    e.validate().map_err(invalid)?;
    let ds = ctx.dataset()?;
    ctx.cfg.run.validate_for(&ds).map_err(run_invalid)?;
    let outcome = match engine::ensemble_estimate(&ds, &ctx.cfg.run, e.trials, e.iters, e.eps) {
        Ok(o) => o,
        Err(err @ engine::EngineError::EnsembleFailed { .. }) => {
            return Err(Failure::Diverged(err.to_string()))
        }
        Err(err) => return Err(invalid(err)),
    };
    let rel_err = ds.relative_error(&outcome.estimate);
    let report = serde_json::json!({
        "chosen": outcome.chosen,
        "rel_err": rel_err,
        "trial_rel_errs": outcome.finals.iter().map(|w| ds.relative_error(w)).collect::<Vec<_>>(),
        "estimate": outcome.estimate,
    });
    let mut set = ArtifactSet::new(&ctx.out);
    set.add(
        "ensemble.json",
        serde_json::to_vec_pretty(&report).expect("json"),
    );
    ctx.commit(set, "ensemble")?;
    println!(
        "chose trial {} of {}, rel_err {rel_err:.3e}",
        outcome.chosen, e.trials
    );
    Ok(())
}

fn timing(ctx: &Context) -> Outcome {
    let ds = ctx.dataset()?;
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for scheme in [Scheme::Sgd, Scheme::Qsgd] {
        let cfg = engine::RunConfig {
            scheme,
            ..ctx.cfg.run.clone()
        };
        dist::validate_distributed(&cfg, &ds).map_err(run_invalid)?;
        let run = dist::run_loopback_tcp(&cfg, &ds, &FaultPlan::new())
            .map_err(|f| Failure::Runtime(f.to_string()))?;
        rows.push(harness::timing_from_distributed(scheme.name(), &run));
        traces.push((scheme, run.master.trace));
    }
    let mut set = ArtifactSet::new(&ctx.out);
    let report = harness::timing_report(&rows);
    set.add("timing.csv", report.clone());
    for (scheme, trace) in &traces {
        set.add(format!("trace_{}.csv", scheme.name()), trace.to_csv());
    }
    ctx.commit(set, "timing")?;
    print!("{report}");
    for (_, trace) in &traces {
        finish_trace(trace)?;
    }
    Ok(())
}

fn dist_master(ctx: &Context, listen: Option<String>) -> Outcome {
    let ds = ctx.dataset()?;
    dist::validate_distributed(&ctx.cfg.run, &ds).map_err(run_invalid)?;
    let addr = listen.unwrap_or_else(|| ctx.cfg.master.listen.clone());
    let listener =
        TcpListener::bind(&addr).map_err(|e| invalid(format!("master.listen {addr}: {e}")))?;
    let bound = listener
        .local_addr()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("listening on {bound}");
    let _ = std::io::stdout().flush();
    let endpoints = dist::accept_workers(&listener, ctx.cfg.run.workers)
        .map_err(|e| Failure::Runtime(format!("accept: {e}")))?;
    let report = dist::run_master(&ctx.cfg.run, &ds, endpoints)
        .map_err(|f| Failure::Runtime(f.to_string()))?;
    let run = DistributedRun {
        master: report,
        workers: Vec::new(),
    };
    let mut set = ArtifactSet::new(&ctx.out);
    set.add("trace.csv", run.master.trace.to_csv());
    set.add(
        "timing.csv",
        harness::timing_report(&[harness::timing_from_distributed(
            ctx.cfg.run.scheme.name(),
            &run,
        )]),
    );
    ctx.commit(set, "dist-master")?;
    finish_trace(&run.master.trace)
}

fn dist_worker(ctx: &Context, connect: Option<String>, id: Option<u32>) -> Outcome {
    let ds = ctx.dataset()?;
    let addr = connect.unwrap_or_else(|| ctx.cfg.worker.connect.clone());
    let id = id.unwrap_or(ctx.cfg.worker.id);
    let stream = TcpStream::connect(&addr)
        .map_err(|e| Failure::Runtime(format!("worker {id}: connect {addr}: {e}")))?;
    let endpoint =
        Endpoint::tcp(stream).map_err(|e| Failure::Runtime(format!("worker {id}: {e}")))?;
    let opts = WorkerOptions {
        worker_id: id,
        stop_after: None,
    };
    let report =
        dist::run_worker(endpoint, &ds, opts).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("worker {id}: {} rounds", report.rounds);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Presets => {
            for (name, _) in config::PRESETS {
                println!("{name}");
            }
            Ok(())
        }
        command => load_config(&cli).and_then(|ctx| match command {
            Command::GenData { file } => gen_data(&ctx, file),
            Command::Train => train(&ctx),
            Command::Sweep {
                sweep_batch,
                sweep_bits,
            } => sweep(&ctx, sweep_batch.clone(), sweep_bits.clone()),
            Command::Phase => phase(&ctx),
            Command::Ensemble => ensemble(&ctx),
            Command::Timing => timing(&ctx),
            Command::DistMaster { listen } => dist_master(&ctx, listen.clone()),
            Command::DistWorker { connect, id } => dist_worker(&ctx, connect.clone(), *id),
            Command::Presets => unreachable!(),
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
