//! `dpmm`: generate data, fit DP mixtures serially or with distributed
//! workers, and score the results.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use dpmm_core::consolidation::GlobalPool;
use dpmm_core::data::{gen_synthetic, read_labels, write_labels, DataError, DataKind, Dataset, SyntheticParams};
use dpmm_core::expfam::{FamilyError, FamilySpec};
use dpmm_core::metrics::{joint_log_likelihood, mean_std, variation_of_information, write_trace, MetricsError};
use dpmm_core::runtime::transport::WorkerLink;
use dpmm_core::runtime::{
    make_shard, pool_from_labels, run, run_worker, Mode, RunConfig, RunError, RunOutcome, TransportKind, WorkerSettings,
};
use dpmm_core::sampler::SweepOptions;

const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Family(#[from] FamilyError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("run aborted: {0}")]
    Aborted(String),
    #[error("{path}: {source}")]
    Output { path: PathBuf, source: io::Error },
    #[error("writing trace: {0}")]
    Trace(#[from] csv::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(RunError::Config(_)) => 2,
            CliError::Data(_)
            | CliError::Family(_)
            | CliError::Metrics(_)
            | CliError::Output { .. }
            | CliError::Trace(_) => 3,
            CliError::Run(RunError::Family(_) | RunError::Sampler(_)) => 3,
            CliError::Run(_) | CliError::Aborted(_) => 4,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "dpmm",
    version,
    about = "Distributed estimation of Dirichlet process mixture models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic isotropic Gaussian dataset with truth labels.
    Gen(GenArgs),
    /// Fit a mixture in the chosen mode.
    Run(RunArgs),
    /// Serve one shard to a master started with `run --remote-workers`.
    Worker(WorkerArgs),
    /// Compare a labeling with the truth.
    Eval(EvalArgs),
    /// Per-iteration wall time for 1, 2, 4 and 8 workers against serial.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 10)]
    clusters: usize,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 1000)]
    min_size: usize,
    #[arg(long, default_value_t = 2000)]
    max_size: usize,
    /// Within-cluster standard deviation.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Means are drawn uniformly from [-box, box]^dim.
    #[arg(long = "box", default_value_t = 50.0)]
    half_width: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Output dataset (binary format).
    #[arg(short, long)]
    output: PathBuf,
    /// Also write the truth labels here.
    #[arg(long)]
    truth: Option<PathBuf>,
}

/// Model and data flags shared by `run`, `worker` and `bench`.
#[derive(Args, Clone)]
struct ModelArgs {
    /// Dataset: the binary format, or CSV when the name ends in `.csv`.
    #[arg(long)]
    data: PathBuf,
    /// e.g. `gaussian:dim=2,sigma=1,sigma0=30` or `multinomial:vocab=500,gamma=0.5`.
    #[arg(long)]
    family: String,
    /// DP concentration; overrides an `alpha=` key in --family.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 100)]
    iters: u64,
    #[arg(long, default_value_t = 1)]
    sweeps_per_cycle: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Visit rows in a random order each sweep.
    #[arg(long)]
    shuffle: bool,
    /// Initial labels (one per row); default starts every row unassigned.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// serial, sync-prog, sync-pooled or async.
    #[arg(long, default_value = "serial")]
    mode: Mode,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// Pooled MH iterations per round (per absorbed push in async mode).
    #[arg(long, default_value_t = 100)]
    pooled_iters: usize,
    /// Subcomponent count above which a merged component is frozen.
    #[arg(long, default_value_t = 64)]
    subcomp_cap: usize,
    /// in-process or tcp.
    #[arg(long, default_value = "in-process")]
    transport: TransportKind,
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    /// Wait for `dpmm worker` processes instead of spawning worker threads.
    #[arg(long)]
    remote_workers: bool,
    /// Per-worker artificial delay in ms, comma separated.
    #[arg(long, value_delimiter = ',')]
    delay_ms: Vec<u64>,
    /// Run R seeds (seed, seed+1, ...) and print a summary.
    #[arg(long, default_value_t = 1)]
    repeats: u64,
    /// Trace CSV; with --repeats the seed is appended to the file stem.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write 0 in the ms column so that seeded traces compare byte for byte.
    #[arg(long)]
    trace_no_time: bool,
    /// Final labels, one per row.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Final components as CSV (id, count, kappa, beta...).
    #[arg(long)]
    components: Option<PathBuf>,
    /// Include the CRP prior term in the reported log-likelihood.
    #[arg(long)]
    crp: bool,
}

#[derive(Args)]
struct WorkerArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Master address.
    #[arg(long)]
    connect: String,
    #[arg(long)]
    worker_id: u32,
    /// Total number of workers (fixes the shard boundaries).
    #[arg(long)]
    workers: usize,
    /// Write this shard's labels as of the last snapshot.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Also report the log-likelihood of --pred on this dataset.
    #[arg(long, requires = "family")]
    data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    family: Option<String>,
    #[arg(long)]
    crp: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Distributed mode to time.
    #[arg(long, default_value = "sync-prog")]
    mode: Mode,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    workers: Vec<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::Worker(a) => cmd_worker(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dpmm: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| CliError::Output {
            path: path.to_owned(),
            source,
        })
}

fn cmd_gen(a: GenArgs) -> Result<(), CliError> {
    let data = gen_synthetic(&SyntheticParams {
        clusters: a.clusters,
        min_size: a.min_size,
        max_size: a.max_size,
        dim: a.dim,
        sigma: a.sigma,
        seed: a.seed,
        half_width: a.half_width,
    })?;
    data.save(&a.output)?;
    if let Some(path) = &a.truth {
        write_labels(path, data.truth.as_deref().unwrap_or_default())?;
    }
    println!(
        "wrote {} rows of dimension {} to {}",
        data.len(),
        data.dim(),
        a.output.display()
    );
    Ok(())
}

fn parse_family(s: &str, alpha: Option<f64>) -> Result<FamilySpec, CliError> {
    let spec: FamilySpec = s.parse()?;
    let spec = match alpha {
        Some(a) => spec.with_alpha(a),
        None => spec,
    };
    spec.validate()?;
    Ok(spec)
}

/// Loads binary or CSV data; CSV rows are read as counts for a multinomial family.
fn load_data(path: &Path, spec: &FamilySpec) -> Result<Dataset, CliError> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if !is_csv {
        return Ok(Dataset::load(path)?);
    }
    let data = Dataset::import_csv(path)?;
    if spec.is_gaussian() {
        return Ok(data);
    }
    Ok(Dataset::new(
        DataKind::Counts,
        data.dim(),
        data.values().to_vec(),
        None,
    )?)
}

struct Model {
    spec: FamilySpec,
    data: Dataset,
    init: Option<Vec<u64>>,
}

fn load_model(m: &ModelArgs) -> Result<Model, CliError> {
    let spec = parse_family(&m.family, m.alpha)?;
    let data = load_data(&m.data, &spec)?;
    if !data.matches(&spec) {
        return Err(CliError::Usage(format!(
            "family {spec} does not fit {:?} data of dimension {}",
            data.kind(),
            data.dim()
        )));
    }
    let init = m.init.as_deref().map(read_labels).transpose()?;
    Ok(Model { spec, data, init })
}

fn base_config(mode: Mode, workers: usize, model: &Model, m: &ModelArgs) -> RunConfig {
    RunConfig {
        workers,
        iterations: m.iters,
        sweeps_per_cycle: m.sweeps_per_cycle,
        seed: m.seed,
        shuffle: m.shuffle,
        init_labels: model.init.clone(),
        ..RunConfig::new(mode, model.spec)
    }
}

fn run_checked(cfg: &RunConfig, data: &Dataset) -> Result<RunOutcome, CliError> {
    let out = run(cfg, data)?;
    match out.aborted {
        Some(reason) => Err(CliError::Aborted(reason)),
        None => Ok(out),
    }
}

fn seeded_path(path: &Path, seed: u64, repeats: u64) -> PathBuf {
    if repeats <= 1 {
        return path.to_owned();
    }
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.seed{seed}.{}", ext.to_string_lossy()),
        None => format!("{stem}.seed{seed}"),
    };
    path.with_file_name(name)
}

fn write_components(path: &Path, pool: &GlobalPool, spec: &FamilySpec) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["id".to_string(), "count".into(), "kappa".into()];
    header.extend((0..spec.dim).map(|j| format!("beta{j}")));
    w.write_record(&header)?;
    for c in pool.components() {
        let p = c.params(spec);
        let mut row = vec![c.id.to_string(), c.count().to_string(), p.kappa.to_string()];
        row.extend(p.beta.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| CliError::Output {
        path: path.to_owned(),
        source,
    })?;
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<(), CliError> {
    if a.repeats == 0 {
        return Err(CliError::Usage("--repeats must be at least 1".into()));
    }
    if a.remote_workers {
        if a.transport != TransportKind::Tcp {
            return Err(CliError::Usage("--remote-workers needs --transport tcp".into()));
        }
        if a.listen.ends_with(":0") {
            return Err(CliError::Usage(
                "--remote-workers needs an explicit --listen port".into(),
            ));
        }
        if a.repeats > 1 {
            return Err(CliError::Usage("--remote-workers runs a single seed".into()));
        }
    }
    let model = load_model(&a.model)?;
    let mut cfg = base_config(a.mode, a.workers, &model, &a.model);
    cfg.pooled_iters = a.pooled_iters;
    cfg.subcomp_cap = a.subcomp_cap;
    cfg.transport = a.transport;
    cfg.listen = a.listen.clone();
    cfg.spawn_workers = !a.remote_workers;
    cfg.worker_delays = a.delay_ms.iter().map(|&ms| Duration::from_millis(ms)).collect();

    let mut lls = Vec::new();
    let mut ks = Vec::new();
    let mut vis = Vec::new();
    for r in 0..a.repeats {
        cfg.seed = a.model.seed + r;
        let out = run_checked(&cfg, &model.data)?;
        let seed = cfg.seed;
        if let Some(path) = &a.trace {
            let path = seeded_path(path, seed, a.repeats);
            let w = create(&path)?;
            write_trace(w, &out.trace, a.trace_no_time)?;
        }
        if let Some(path) = &a.components {
            write_components(&seeded_path(path, seed, a.repeats), &out.pool, &model.spec)?;
        }
        let k = out.pool.len();
        if out.labels.is_empty() {
            // labels stay with remote workers
            println!(
                "seed {seed}: K {k}, {} messages, {} bytes",
                out.comm.total_msgs(),
                out.comm.total_bytes()
            );
            continue;
        }
        if let Some(path) = &a.labels {
            write_labels(&seeded_path(path, seed, a.repeats), &out.labels)?;
        }
        let ll = joint_log_likelihood(&model.data, &out.labels, &model.spec, a.crp)?;
        let vi = match &model.data.truth {
            Some(t) => Some(variation_of_information(&out.labels, t)?),
            None => None,
        };
        let per_iter = out.comm.rounds.first().map(|r| r.msgs).unwrap_or(0);
        print!(
            "seed {seed}: loglik {ll:.4}, K {k}, {} messages ({per_iter} per iteration), {} bytes, {:.2} s",
            out.comm.total_msgs(),
            out.comm.total_bytes(),
            out.elapsed.as_secs_f64()
        );
        match vi {
            Some(v) => println!(", VI {v:.4}"),
            None => println!(),
        }
        lls.push(ll);
        ks.push(k as f64);
        vis.extend(vi);
    }
    if a.repeats > 1 && !lls.is_empty() {
        let fmt = |xs: &[f64]| {
            let (m, s) = mean_std(xs);
            format!("{m:.4} ± {s:.4}")
        };
        println!("summary over {} seeds: loglik {}, K {}", lls.len(), fmt(&lls), fmt(&ks));
        if !vis.is_empty() {
            println!("summary VI {}", fmt(&vis));
        }
    }
    Ok(())
}

fn cmd_worker(a: WorkerArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    if a.workers == 0 || a.worker_id as usize >= a.workers {
        return Err(CliError::Usage(format!(
            "worker id {} out of range for {} workers",
            a.worker_id, a.workers
        )));
    }
    // pool ids follow deterministically from the labels, as on the master
    let init = match &model.init {
        Some(labels) => {
            if labels.len() != model.data.len() {
                return Err(CliError::Usage(format!(
                    "{} initial labels for {} rows",
                    labels.len(),
                    model.data.len()
                )));
            }
            let (_, ids) = pool_from_labels(&model.data, labels, &model.spec);
            Some(labels.iter().map(|l| ids[l]).collect::<Vec<_>>())
        }
        None => None,
    };
    let shard = make_shard(
        &model.data,
        &model.spec,
        a.workers,
        a.worker_id as usize,
        init.as_deref(),
    )?;
    let settings = WorkerSettings {
        worker: a.worker_id,
        spec: model.spec,
        seed: a.model.seed,
        iterations: a.model.iters,
        sweeps_per_cycle: a.model.sweeps_per_cycle,
        opts: SweepOptions {
            shuffle: a.model.shuffle,
            allow_new: true,
        },
        delay: Duration::ZERO,
        clock: std::time::Instant::now(),
    };
    let link = WorkerLink::connect(a.connect.as_str(), 50).map_err(RunError::from)?;
    let report = run_worker(link, shard, &settings)?;
    println!("worker {} finished at version {}", report.worker, report.final_version);
    if let Some(path) = &a.labels {
        let labels: Vec<u64> = report
            .shard
            .assignments
            .iter()
            .map(|z| z.map(|id| id.to_wire()).unwrap_or(u64::MAX))
            .collect();
        write_labels(path, &labels)?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let pred = read_labels(&a.pred)?;
    let truth = read_labels(&a.truth)?;
    println!("VI {:.6}", variation_of_information(&pred, &truth)?);
    if let (Some(data), Some(family)) = (&a.data, &a.family) {
        let spec = parse_family(family, None)?;
        let data = load_data(data, &spec)?;
        println!("loglik {:.6}", joint_log_likelihood(&data, &pred, &spec, a.crp)?);
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<(), CliError> {
    if a.mode == Mode::Serial {
        return Err(CliError::Usage(
            "bench compares a distributed mode against serial".into(),
        ));
    }
    let model = load_model(&a.model)?;
    let per_iter = |cfg: &RunConfig| -> Result<f64, CliError> {
        let out = run_checked(cfg, &model.data)?;
        Ok(out.elapsed.as_secs_f64() * 1e3 / cfg.iterations.max(1) as f64)
    };
    let serial = per_iter(&base_config(Mode::Serial, 1, &model, &a.model))?;
    let mut out = io::stdout().lock();
    let w = |e| CliError::Output {
        path: "<stdout>".into(),
        source: e,
    };
    writeln!(
        out,
        "rows {}, {} iterations, {} core(s)",
        model.data.len(),
        a.model.iters,
        cores()
    )
    .map_err(w)?;
    writeln!(out, "{:>8} {:>12} {:>8}", "workers", "ms/iter", "speedup").map_err(w)?;
    writeln!(out, "{:>8} {:>12.2} {:>8.2}", "serial", serial, 1.0).map_err(w)?;
    for &m in &a.workers {
        let t = per_iter(&base_config(a.mode, m, &model, &a.model))?;
        writeln!(out, "{m:>8} {t:>12.2} {:>8.2}", serial / t).map_err(w)?;
    }
    Ok(())
}

fn cores() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}
