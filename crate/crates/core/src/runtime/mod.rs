//! Master/worker orchestration.
//!
//! Workers sweep their shard against the last snapshot they received, push
//! the resulting delta and get the next snapshot as the reply, so each cycle
//! costs exactly two messages per worker. In synchronous modes the master
//! waits for every worker before consolidating; in asynchronous mode it
//! answers each push immediately and runs pooled consolidation while idle.

mod master;
pub mod protocol;
pub mod transport;
mod worker;

use std::fmt;
use std::str::FromStr;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

pub use protocol::{decode, encode, GlobalSnapshot, Message, ProtocolError};
pub use transport::TransportError;
pub use worker::{run_worker, worker_cycle, WorkerReport, WorkerSettings};

use crate::consolidation::{ConsolidationError, GlobalPool, MoveStats};
use crate::data::Dataset;
use crate::expfam::{FamilyError, FamilySpec, SuffStats};
use crate::metrics::{stats_log_likelihood, sum_log_base_measure, TraceRecord};
use crate::rng::stream_rng;
use crate::sampler::{gibbs_sweep, ComponentId, LocalView, SamplerError, Shard, SweepOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Serial,
    SyncProg,
    SyncPooled,
    Async,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Serial => "serial",
            Mode::SyncProg => "sync-prog",
            Mode::SyncPooled => "sync-pooled",
            Mode::Async => "async",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "serial" => Ok(Mode::Serial),
            "sync-prog" => Ok(Mode::SyncProg),
            "sync-pooled" => Ok(Mode::SyncPooled),
            "async" => Ok(Mode::Async),
            _ => Err(format!("unknown mode {s:?} (serial, sync-prog, sync-pooled, async)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    InProcess,
    Tcp,
}

impl FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "in-process" => Ok(TransportKind::InProcess),
            "tcp" => Ok(TransportKind::Tcp),
            _ => Err(format!("unknown transport {s:?} (in-process, tcp)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mode: Mode,
    pub workers: usize,
    pub iterations: u64,
    pub sweeps_per_cycle: usize,
    /// Pooled MH iterations per synchronous round, or per absorbed delta in
    /// asynchronous mode.
    pub pooled_iters: usize,
    pub family: FamilySpec,
    pub seed: u64,
    pub transport: TransportKind,
    /// TCP listen address; port 0 picks a free port.
    pub listen: String,
    /// When false under TCP, the master waits for externally started
    /// workers instead of spawning them.
    pub spawn_workers: bool,
    pub subcomp_cap: usize,
    pub shuffle: bool,
    /// When false, workers never open new components.
    pub allow_new: bool,
    /// Artificial per-cycle sleep for each worker (empty: none).
    pub worker_delays: Vec<Duration>,
    /// Initial labels (any ids); `None` starts every point unassigned.
    pub init_labels: Option<Vec<u64>>,
    /// Frames that may queue per connection before senders block.
    pub queue_capacity: usize,
}

impl RunConfig {
    pub fn new(mode: Mode, family: FamilySpec) -> Self {
        RunConfig {
            mode,
            workers: if mode == Mode::Serial { 1 } else { 4 },
            iterations: 100,
            sweeps_per_cycle: 1,
            pooled_iters: 100,
            family,
            seed: 1,
            transport: TransportKind::InProcess,
            listen: "127.0.0.1:0".into(),
            spawn_workers: true,
            subcomp_cap: 64,
            shuffle: false,
            allow_new: true,
            worker_delays: Vec::new(),
            init_labels: None,
            queue_capacity: 4,
        }
    }

    fn validate(&mut self, data: &Dataset) -> Result<(), RunError> {
        self.family.validate()?;
        if !data.matches(&self.family) {
            return Err(RunError::Config(format!(
                "family {} does not fit {:?} data of dimension {}",
                self.family,
                data.kind(),
                data.dim()
            )));
        }
        if self.mode == Mode::Serial {
            self.workers = 1;
        }
        if self.workers == 0 {
            return Err(RunError::Config("at least one worker is required".into()));
        }
        if self.sweeps_per_cycle == 0 {
            return Err(RunError::Config("sweeps per cycle must be positive".into()));
        }
        if !self.worker_delays.is_empty() && self.worker_delays.len() != self.workers {
            return Err(RunError::Config(format!(
                "{} worker delays for {} workers",
                self.worker_delays.len(),
                self.workers
            )));
        }
        if let Some(init) = &self.init_labels {
            if init.len() != data.len() {
                return Err(RunError::Config(format!(
                    "{} initial labels for {} rows",
                    init.len(),
                    data.len()
                )));
            }
        }
        if self.iterations == 0 && self.init_labels.is_none() {
            return Err(RunError::Config("zero iterations leave every row unassigned".into()));
        }
        if !self.allow_new && self.init_labels.is_none() {
            return Err(RunError::Config(
                "disabling new components requires initial labels".into(),
            ));
        }
        Ok(())
    }

    fn sweep_options(&self) -> SweepOptions {
        SweepOptions {
            shuffle: self.shuffle,
            allow_new: self.allow_new,
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Family(#[from] FamilyError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Consolidation(#[from] ConsolidationError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("unexpected {got} message, expected {expected}")]
    Unexpected { expected: &'static str, got: &'static str },
    #[error("snapshot version went back from {had} to {got}")]
    VersionRegression { had: u64, got: u64 },
    #[error("worker {worker}: {reason}")]
    Worker { worker: u32, reason: String },
}

/// Traffic of one round (sync) or one absorbed push (async).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RoundComm {
    pub msgs: u64,
    pub bytes: u64,
    /// Upper bound on `bytes` from the message contents.
    pub budget: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommStats {
    /// Initial pull requests and snapshots.
    pub setup_msgs: u64,
    pub setup_bytes: u64,
    /// Shutdown notices and acknowledgements.
    pub teardown_msgs: u64,
    pub teardown_bytes: u64,
    pub rounds: Vec<RoundComm>,
}

impl CommStats {
    pub fn total_msgs(&self) -> u64 {
        self.setup_msgs + self.teardown_msgs + self.rounds.iter().map(|r| r.msgs).sum::<u64>()
    }

    pub fn total_bytes(&self) -> u64 {
        self.setup_bytes + self.teardown_bytes + self.rounds.iter().map(|r| r.bytes).sum::<u64>()
    }
}

/// Completion of one worker cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkerEvent {
    pub worker: u32,
    pub cycle: u64,
    pub ms: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trace: Vec<TraceRecord>,
    /// Final label per row, as live pool ids. Empty when aborted or when
    /// the workers ran remotely.
    pub labels: Vec<u64>,
    pub pool: GlobalPool,
    pub comm: CommStats,
    pub events: Vec<WorkerEvent>,
    pub moves: MoveStats,
    pub elapsed: Duration,
    /// Reason the run stopped early, if it did.
    pub aborted: Option<String>,
}

/// Contiguous row range of worker `l` out of `m`.
pub fn shard_range(n: usize, m: usize, l: usize) -> std::ops::Range<usize> {
    (l * n / m)..((l + 1) * n / m)
}

/// Builds worker `l`'s shard. Initial labels must already be pool ids.
pub fn make_shard(
    data: &Dataset,
    spec: &FamilySpec,
    m: usize,
    l: usize,
    labels: Option<&[u64]>,
) -> Result<Shard, RunError> {
    let range = shard_range(data.len(), m, l);
    let d = data.dim();
    let mut shard = Shard::new(l as u32, spec, data.values()[range.start * d..range.end * d].to_vec())?;
    if let Some(labels) = labels {
        for (a, &lab) in shard.assignments.iter_mut().zip(&labels[range]) {
            *a = Some(ComponentId::global(lab));
        }
    }
    Ok(shard)
}

/// Exact size bound for one synchronous round: every worker pushes an
/// entry per snapshot component plus its new components, and receives a
/// snapshot of the new pool with its remap suffix.
pub fn round_byte_budget(
    dim: usize,
    k_before: usize,
    k_after: usize,
    new_components: &[usize],
    remaps: &[usize],
) -> u64 {
    new_components
        .iter()
        .zip(remaps)
        .map(|(&new, &remap)| {
            protocol::delta_frame_len(k_before, new, dim) + protocol::snapshot_frame_len(remap, k_after, dim)
        })
        .sum()
}

/// Pool built from labeled rows: one atomic component per distinct label.
/// Returns the pool and the label to id mapping.
pub fn pool_from_labels(
    data: &Dataset,
    labels: &[u64],
    spec: &FamilySpec,
) -> (GlobalPool, std::collections::BTreeMap<u64, u64>) {
    let mut groups: std::collections::BTreeMap<u64, SuffStats> = std::collections::BTreeMap::new();
    for (x, &l) in data.rows().zip(labels) {
        groups
            .entry(l)
            .or_insert_with(|| SuffStats::zero(spec.dim))
            .add_observation(x, 1);
    }
    let mut pool = GlobalPool::new();
    let ids = groups.into_iter().map(|(l, s)| (l, pool.insert_atomic(s))).collect();
    (pool, ids)
}

/// Runs an experiment end to end.
pub fn run(config: &RunConfig, data: &Dataset) -> Result<RunOutcome, RunError> {
    let mut config = config.clone();
    config.validate(data)?;
    if config.mode == Mode::Serial {
        return run_serial(&config, data);
    }
    let spec = config.family;
    let clock = Instant::now();
    let (mut pool, init) = match &config.init_labels {
        Some(labels) => {
            let (pool, ids) = pool_from_labels(data, labels, &spec);
            (pool, Some(labels.iter().map(|l| ids[l]).collect::<Vec<_>>()))
        }
        None => (GlobalPool::new(), None),
    };
    pool.publish();

    let m = config.workers;
    let mut shards = Vec::with_capacity(m);
    for l in 0..m {
        shards.push(make_shard(data, &spec, m, l, init.as_deref())?);
    }
    let settings: Vec<WorkerSettings> = (0..m)
        .map(|l| WorkerSettings {
            worker: l as u32,
            spec,
            seed: config.seed,
            iterations: config.iterations,
            sweeps_per_cycle: config.sweeps_per_cycle,
            opts: config.sweep_options(),
            delay: config.worker_delays.get(l).copied().unwrap_or_default(),
            clock,
        })
        .collect();

    let (mut side, handles) = match config.transport {
        TransportKind::InProcess => {
            let (side, links) = transport::in_process(m, config.queue_capacity);
            let handles = links
                .into_iter()
                .zip(shards)
                .zip(settings)
                .map(|((link, shard), s)| thread::spawn(move || run_worker(link, shard, &s)))
                .collect();
            (side, handles)
        }
        TransportKind::Tcp => {
            let (listener, addr) = transport::bind(&config.listen)?;
            let handles: Vec<_> = if config.spawn_workers {
                shards
                    .into_iter()
                    .zip(settings)
                    .map(|(shard, s)| {
                        thread::spawn(move || {
                            let link = transport::WorkerLink::connect(addr, 20)?;
                            run_worker(link, shard, &s)
                        })
                    })
                    .collect()
            } else {
                Vec::new()
            };
            (transport::accept_workers(&listener, m, config.queue_capacity)?, handles)
        }
    };

    let master = master::Master::new(&config, pool, sum_log_base_measure(data, &spec), clock);
    let report = match config.mode {
        Mode::Async => master.run_async(&mut side),
        _ => master.run_sync(&mut side),
    };
    drop(side);

    let mut aborted = report.aborted;
    let mut events = Vec::new();
    let mut shards_back = Vec::new();
    for (l, h) in handles.into_iter().enumerate() {
        match h.join() {
            Ok(Ok(rep)) => {
                events.extend(rep.events);
                shards_back.push(rep.shard);
            }
            Ok(Err(e)) => {
                aborted.get_or_insert_with(|| format!("worker {l}: {e}"));
            }
            Err(_) => {
                aborted.get_or_insert_with(|| format!("worker {l} panicked"));
            }
        }
    }
    events.sort_by(|a, b| a.ms.total_cmp(&b.ms));

    let mut labels = Vec::new();
    if aborted.is_none() && config.spawn_workers {
        labels.reserve(data.len());
        for shard in &shards_back {
            for a in &shard.assignments {
                let id = a.ok_or_else(|| RunError::Config("unassigned row after the run".into()))?;
                let live = report
                    .pool
                    .resolve(id.to_wire())?
                    .ok_or(ConsolidationError::UnknownId(id.to_wire()))?;
                labels.push(live);
            }
        }
    }
    Ok(RunOutcome {
        trace: report.trace,
        labels,
        pool: report.pool,
        comm: report.comm,
        events,
        moves: report.moves,
        elapsed: clock.elapsed(),
        aborted,
    })
}

fn run_serial(config: &RunConfig, data: &Dataset) -> Result<RunOutcome, RunError> {
    let spec = &config.family;
    let clock = Instant::now();
    let mut shard = Shard::new(0, spec, data.values().to_vec())?;
    if let Some(init) = &config.init_labels {
        for (a, &l) in shard.assignments.iter_mut().zip(init) {
            // any distinct ids will do; the view relabels them
            *a = Some(ComponentId::global(l.wrapping_add(1) & (i64::MAX as u64)));
        }
    }
    let mut view = LocalView::from_assignments(spec, &mut shard);
    let log_h = sum_log_base_measure(data, spec);
    let mut trace = Vec::with_capacity(config.iterations as usize);
    for t in 1..=config.iterations {
        let mut rng = stream_rng(config.seed, 0, t);
        for _ in 0..config.sweeps_per_cycle {
            gibbs_sweep(&mut shard, &mut view, spec, config.sweep_options(), &mut rng);
        }
        trace.push(TraceRecord {
            iter: t,
            ms: clock.elapsed().as_millis() as u64,
            loglik: stats_log_likelihood(spec, view.components().map(|c| &c.stats)) + log_h,
            k: view.live_count(),
            msgs: 0,
            bytes: 0,
            mode: Mode::Serial.to_string(),
        });
    }
    let mut pool = GlobalPool::new();
    let mut ids = std::collections::HashMap::new();
    for c in view.components().filter(|c| c.count() > 0) {
        ids.insert(c.id, pool.insert_atomic(c.stats.clone()));
    }
    let labels = shard
        .assignments
        .iter()
        .map(|a| {
            a.map(|id| ids[&id])
                .ok_or_else(|| RunError::Config("unassigned row after the run".into()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RunOutcome {
        trace,
        labels,
        pool,
        comm: CommStats::default(),
        events: Vec::new(),
        moves: MoveStats::default(),
        elapsed: clock.elapsed(),
        aborted: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, DataKind, SyntheticParams};
    use crate::metrics::variation_of_information;

    fn integer_data(seed: u64) -> Dataset {
        let ds = gen_synthetic(&SyntheticParams {
            clusters: 3,
            min_size: 20,
            max_size: 40,
            dim: 2,
            sigma: 2.0,
            seed,
            half_width: 20.0,
        })
        .unwrap();
        let values = ds.values().iter().map(|v| v.round()).collect();
        Dataset::new(DataKind::Dense, 2, values, ds.truth.clone()).unwrap()
    }

    fn config(mode: Mode, workers: usize) -> RunConfig {
        RunConfig {
            workers,
            iterations: 5,
            ..RunConfig::new(mode, FamilySpec::gaussian(2, 1.0, 1.0, 1.0))
        }
    }

    fn check_conservation(out: &RunOutcome, data: &Dataset) {
        let total = out.pool.total_stats(data.dim());
        assert_eq!(total.count as usize, data.len());
        for j in 0..data.dim() {
            let s: f64 = data.rows().map(|r| r[j]).sum();
            assert!((total.psi[j] - s).abs() < 1e-9 * (1.0 + s.abs()));
        }
        assert!(out.pool.max_closure_error() < 1e-9);
    }

    #[test]
    fn single_worker_sync_matches_serial() {
        let data = integer_data(3);
        let serial = run(&config(Mode::Serial, 1), &data).unwrap();
        let sync = run(
            &RunConfig {
                pooled_iters: 0,
                ..config(Mode::SyncPooled, 1)
            },
            &data,
        )
        .unwrap();
        assert_eq!(variation_of_information(&serial.labels, &sync.labels).unwrap(), 0.0);
        for (a, b) in serial.trace.iter().zip(&sync.trace) {
            assert_eq!(a.k, b.k);
            assert!((a.loglik - b.loglik).abs() < 1e-9 * a.loglik.abs());
        }
    }

    #[test]
    fn sync_round_reproduces_serial_recomputation() {
        let data = integer_data(5);
        // start from labels with errors so the round moves points around
        let init: Vec<u64> = data
            .truth
            .as_ref()
            .unwrap()
            .iter()
            .enumerate()
            .map(|(i, &l)| if i % 7 == 0 { (l + 1) % 3 } else { l })
            .collect();
        for mode in [Mode::SyncProg, Mode::SyncPooled] {
            let cfg = RunConfig {
                iterations: 1,
                allow_new: false,
                init_labels: Some(init.clone()),
                ..config(mode, 4)
            };
            let out = run(&cfg, &data).unwrap();
            let (expected, _) = pool_from_labels(&data, &out.labels, &cfg.family);
            assert_eq!(out.pool.len(), expected.len());
            for c in out.pool.components() {
                let members: Vec<&[f64]> = data
                    .rows()
                    .zip(&out.labels)
                    .filter(|(_, &l)| l == c.id)
                    .map(|(r, _)| r)
                    .collect();
                let mut s = SuffStats::zero(2);
                members.iter().for_each(|x| s.add_observation(x, 1));
                assert_eq!(c.count(), s.count);
                let p = c.params(&cfg.family);
                let q = cfg.family.posterior_params(&s).unwrap();
                assert!((p.kappa - q.kappa).abs() < 1e-9);
                for (a, b) in p.beta.iter().zip(&q.beta) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn sync_modes_conserve_and_count_messages() {
        let data = integer_data(7);
        for mode in [Mode::SyncProg, Mode::SyncPooled] {
            let out = run(&config(mode, 4), &data).unwrap();
            assert!(out.aborted.is_none());
            check_conservation(&out, &data);
            assert_eq!(out.comm.rounds.len(), 5);
            for (r, t) in out.comm.rounds.iter().zip(&out.trace) {
                assert_eq!(r.msgs, 8);
                assert_eq!(r.bytes, r.budget);
                assert_eq!((t.msgs, t.bytes), (r.msgs, r.bytes));
            }
            assert_eq!(out.comm.setup_msgs, 8);
            assert_eq!(out.comm.teardown_msgs, 8);
            assert_eq!(out.labels.len(), data.len());
            assert!(out.trace.windows(2).all(|w| w[0].iter < w[1].iter));
        }
    }

    #[test]
    fn sync_runs_are_reproducible() {
        let data = integer_data(8);
        let a = run(&config(Mode::SyncPooled, 3), &data).unwrap();
        let b = run(&config(Mode::SyncPooled, 3), &data).unwrap();
        assert_eq!(a.labels, b.labels);
        let strip = |t: &[TraceRecord]| {
            t.iter()
                .map(|r| (r.iter, r.loglik.to_bits(), r.k, r.bytes))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a.trace), strip(&b.trace));
    }

    #[test]
    fn async_run_conserves_mass() {
        let data = integer_data(9);
        let out = run(
            &RunConfig {
                pooled_iters: 20,
                ..config(Mode::Async, 3)
            },
            &data,
        )
        .unwrap();
        assert!(out.aborted.is_none(), "{:?}", out.aborted);
        check_conservation(&out, &data);
        assert_eq!(out.trace.len(), 15);
        assert_eq!(out.events.len(), 15);
        assert!(out.comm.rounds.iter().all(|r| r.msgs == 2 && r.bytes <= r.budget));
        assert_eq!(out.labels.len(), data.len());
    }

    #[test]
    fn tcp_transport_matches_in_process() {
        let data = integer_data(10);
        let local = run(&config(Mode::SyncProg, 2), &data).unwrap();
        let tcp = run(
            &RunConfig {
                transport: TransportKind::Tcp,
                ..config(Mode::SyncProg, 2)
            },
            &data,
        )
        .unwrap();
        assert!(tcp.aborted.is_none(), "{:?}", tcp.aborted);
        assert_eq!(local.labels, tcp.labels);
        assert_eq!(local.comm, tcp.comm);
    }

    #[test]
    fn disconnect_aborts_with_partial_trace() {
        let data = integer_data(11);
        let cfg = config(Mode::SyncProg, 2);
        let spec = cfg.family;
        let (mut side, mut links) = transport::in_process(2, 4);
        let bad = links.pop().unwrap();
        let good = links.pop().unwrap();
        let shard = make_shard(&data, &spec, 2, 0, None).unwrap();
        let settings = WorkerSettings {
            worker: 0,
            spec,
            seed: 1,
            iterations: 5,
            sweeps_per_cycle: 1,
            opts: SweepOptions::default(),
            delay: Duration::ZERO,
            clock: Instant::now(),
        };
        let h = thread::spawn(move || run_worker(good, shard, &settings));
        let mut pool = GlobalPool::new();
        pool.publish();
        let master = master::Master::new(&cfg, pool, 0.0, Instant::now());
        drop(bad);
        let report = master.run_sync(&mut side);
        drop(side);
        assert!(report.aborted.is_some());
        assert!(h.join().unwrap().is_err());
    }

    #[test]
    fn config_validation() {
        let data = integer_data(12);
        let mut cfg = config(Mode::SyncProg, 0);
        assert!(matches!(run(&cfg, &data), Err(RunError::Config(_))));
        cfg = RunConfig {
            family: FamilySpec::gaussian(3, 1.0, 1.0, 1.0),
            ..config(Mode::Serial, 1)
        };
        assert!(matches!(run(&cfg, &data), Err(RunError::Config(_))));
        cfg = RunConfig {
            allow_new: false,
            ..config(Mode::SyncProg, 2)
        };
        assert!(matches!(run(&cfg, &data), Err(RunError::Config(_))));
        let serial = run(&config(Mode::Serial, 8), &data).unwrap();
        assert_eq!(serial.labels.len(), data.len());
    }
}
