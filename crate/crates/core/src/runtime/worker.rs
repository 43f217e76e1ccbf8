use std::thread;
use std::time::{Duration, Instant};

use rand::Rng;

use super::protocol::{decode, encode, GlobalSnapshot, Message};
use super::transport::WorkerLink;
use super::{RunError, WorkerEvent};
use crate::expfam::FamilySpec;
use crate::rng::stream_rng;
use crate::sampler::{compute_deltas, gibbs_sweep, Delta, LocalView, Shard, SweepOptions};

#[derive(Debug, Clone)]
pub struct WorkerSettings {
    pub worker: u32,
    pub spec: FamilySpec,
    pub seed: u64,
    pub iterations: u64,
    pub sweeps_per_cycle: usize,
    pub opts: SweepOptions,
    /// Sleep before each cycle (simulates a slower node).
    pub delay: Duration,
    /// Reference time for event timestamps.
    pub clock: Instant,
}

#[derive(Debug, Clone)]
pub struct WorkerReport {
    pub worker: u32,
    pub shard: Shard,
    pub events: Vec<WorkerEvent>,
    pub final_version: u64,
}

/// Sweeps the shard against the view and extracts the delta to push.
pub fn worker_cycle<R: Rng + ?Sized>(
    shard: &mut Shard,
    view: &mut LocalView,
    spec: &FamilySpec,
    opts: SweepOptions,
    sweeps: usize,
    rng: &mut R,
) -> Delta {
    for _ in 0..sweeps {
        gibbs_sweep(shard, view, spec, opts, rng);
    }
    compute_deltas(view, shard.id)
}

pub(super) fn name_of(m: &Message) -> &'static str {
    match m {
        Message::PullRequest { .. } => "pull request",
        Message::Snapshot(_) => "snapshot",
        Message::DeltaPush(_) => "delta push",
        Message::Ack { .. } => "ack",
        Message::Shutdown => "shutdown",
    }
}

fn recv_snapshot(link: &mut WorkerLink, dim: usize) -> Result<GlobalSnapshot, RunError> {
    match decode(&link.recv()?, dim)? {
        Message::Snapshot(s) => Ok(s),
        other => Err(RunError::Unexpected {
            expected: "snapshot",
            got: name_of(&other),
        }),
    }
}

/// Rewrites labels through the snapshot's remap and builds the next view.
fn install(shard: &mut Shard, snap: GlobalSnapshot, spec: &FamilySpec, had: u64) -> Result<LocalView, RunError> {
    if snap.version < had {
        return Err(RunError::VersionRegression { had, got: snap.version });
    }
    shard.apply_remap(&snap.remap);
    let view = LocalView::from_snapshot(spec, snap.version, snap.components)?;
    view.check_labels(shard)?;
    Ok(view)
}

/// Worker main loop: one pull to start, then `iterations` push/reply
/// cycles, then an orderly shutdown.
pub fn run_worker(mut link: WorkerLink, mut shard: Shard, s: &WorkerSettings) -> Result<WorkerReport, RunError> {
    let dim = s.spec.dim;
    link.send(encode(&Message::PullRequest {
        worker: s.worker,
        last_version: 0,
    }))?;
    let mut view = install(&mut shard, recv_snapshot(&mut link, dim)?, &s.spec, 0)?;
    let mut events = Vec::with_capacity(s.iterations as usize);
    for t in 1..=s.iterations {
        if !s.delay.is_zero() {
            thread::sleep(s.delay);
        }
        let mut rng = stream_rng(s.seed, u64::from(s.worker), t);
        let delta = worker_cycle(&mut shard, &mut view, &s.spec, s.opts, s.sweeps_per_cycle, &mut rng);
        link.send(encode(&Message::DeltaPush(delta)))?;
        let had = view.version;
        view = install(&mut shard, recv_snapshot(&mut link, dim)?, &s.spec, had)?;
        events.push(WorkerEvent {
            worker: s.worker,
            cycle: t,
            ms: s.clock.elapsed().as_secs_f64() * 1e3,
        });
    }
    link.send(encode(&Message::Shutdown))?;
    match decode(&link.recv()?, dim)? {
        Message::Ack { .. } => {}
        other => {
            return Err(RunError::Unexpected {
                expected: "ack",
                got: name_of(&other),
            })
        }
    }
    link.close();
    Ok(WorkerReport {
        worker: s.worker,
        shard,
        events,
        final_version: view.version,
    })
}
