use std::time::Instant;

use super::protocol::{decode, delta_frame_len, encode, snapshot_frame_len, GlobalSnapshot, Message};
use super::transport::{Inbound, MasterSide};
use super::worker::name_of;
use super::{round_byte_budget, CommStats, Mode, RoundComm, RunConfig, RunError};
use crate::consolidation::{
    absorb_delta, progressive_consolidate, ConsolidationError, GlobalPool, MoveStats, PooledConsolidator,
    TempAssignment,
};
use crate::expfam::FamilySpec;
use crate::metrics::{stats_log_likelihood, TraceRecord};
use crate::rng::{stream_rng, MASTER_STREAM};
use crate::sampler::{Delta, SnapshotComponent};

/// Pooled iterations run between two inbox polls in asynchronous mode.
const ASYNC_SLICE: usize = 10;

pub(super) struct MasterReport {
    pub pool: GlobalPool,
    pub trace: Vec<TraceRecord>,
    pub comm: CommStats,
    pub moves: MoveStats,
    pub aborted: Option<String>,
}

/// The single actor that owns the global pool.
pub(super) struct Master {
    mode: Mode,
    workers: usize,
    iterations: u64,
    pooled_iters: usize,
    seed: u64,
    spec: FamilySpec,
    pool: GlobalPool,
    log_h: f64,
    clock: Instant,
    conn_of_worker: Vec<Option<usize>>,
    worker_of_conn: Vec<Option<u32>>,
    /// Connections that completed an orderly shutdown.
    done: Vec<bool>,
    last_version: Vec<u64>,
    last_based_on: Vec<Option<u64>>,
    consolidator: PooledConsolidator,
    comm: CommStats,
    trace: Vec<TraceRecord>,
}

struct Received {
    conn: usize,
    msg: Message,
    bytes: u64,
}

impl Master {
    pub fn new(cfg: &RunConfig, pool: GlobalPool, log_h: f64, clock: Instant) -> Self {
        Master {
            mode: cfg.mode,
            workers: cfg.workers,
            iterations: cfg.iterations,
            pooled_iters: cfg.pooled_iters,
            seed: cfg.seed,
            spec: cfg.family,
            pool,
            log_h,
            clock,
            conn_of_worker: vec![None; cfg.workers],
            worker_of_conn: vec![None; cfg.workers],
            done: vec![false; cfg.workers],
            last_version: vec![0; cfg.workers],
            last_based_on: vec![None; cfg.workers],
            consolidator: PooledConsolidator::new(cfg.subcomp_cap),
            comm: CommStats::default(),
            trace: Vec::new(),
        }
    }

    pub fn run_sync(mut self, side: &mut MasterSide) -> MasterReport {
        let result = self.sync_inner(side);
        self.finish(result)
    }

    pub fn run_async(mut self, side: &mut MasterSide) -> MasterReport {
        let result = self.async_inner(side);
        self.finish(result)
    }

    fn finish(self, result: Result<(), RunError>) -> MasterReport {
        MasterReport {
            pool: self.pool,
            trace: self.trace,
            comm: self.comm,
            moves: self.consolidator.stats,
            aborted: result.err().map(|e| e.to_string()),
        }
    }

    fn next(&self, side: &mut MasterSide) -> Result<Received, RunError> {
        loop {
            if let Some(r) = self.accept(side.recv()?)? {
                return Ok(r);
            }
        }
    }

    /// Decodes an inbound frame. Disconnects of connections that already
    /// shut down are dropped (`None`).
    fn accept(&self, inbound: Inbound) -> Result<Option<Received>, RunError> {
        let frame = match inbound.frame {
            Ok(f) => f,
            Err(_) if self.done.get(inbound.conn).copied().unwrap_or(false) => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let msg = decode(&frame, self.spec.dim)?;
        Ok(Some(Received {
            conn: inbound.conn,
            msg,
            bytes: frame.len() as u64,
        }))
    }

    fn worker_of(&self, conn: usize) -> Result<u32, RunError> {
        self.worker_of_conn
            .get(conn)
            .copied()
            .flatten()
            .ok_or(RunError::Unexpected {
                expected: "pull request",
                got: "message from an unregistered connection",
            })
    }

    fn send(&mut self, side: &mut MasterSide, worker: u32, msg: &Message) -> Result<u64, RunError> {
        let conn = self.conn_of_worker[worker as usize].expect("registered before any reply");
        let frame = encode(msg);
        side.send(conn, &frame)?;
        Ok(frame.len() as u64)
    }

    fn register(&mut self, side: &mut MasterSide, r: &Received) -> Result<(), RunError> {
        let worker = self.enroll(r)?;
        self.bootstrap(side, worker, r.bytes)
    }

    fn enroll(&mut self, r: &Received) -> Result<u32, RunError> {
        let Message::PullRequest { worker, last_version } = r.msg else {
            unreachable!()
        };
        let w = worker as usize;
        if w >= self.workers || self.conn_of_worker[w].is_some() || self.worker_of_conn[r.conn].is_some() {
            return Err(RunError::Worker {
                worker,
                reason: "invalid or duplicate registration".into(),
            });
        }
        self.conn_of_worker[w] = Some(r.conn);
        self.worker_of_conn[r.conn] = Some(worker);
        self.last_version[w] = last_version;
        Ok(worker)
    }

    fn bootstrap(&mut self, side: &mut MasterSide, worker: u32, request_bytes: u64) -> Result<(), RunError> {
        let comps = self.pool.snapshot_components(&self.spec);
        let snap = self.snapshot_for(worker, &[], comps)?;
        let sent = self.send(side, worker, &Message::Snapshot(snap))?;
        self.comm.setup_msgs += 2;
        self.comm.setup_bytes += request_bytes + sent;
        Ok(())
    }

    fn shutdown(&mut self, side: &mut MasterSide, r: &Received) -> Result<(), RunError> {
        let worker = self.worker_of(r.conn)?;
        let sent = self.send(
            side,
            worker,
            &Message::Ack {
                version: self.pool.version(),
            },
        )?;
        self.done[r.conn] = true;
        self.comm.teardown_msgs += 2;
        self.comm.teardown_bytes += r.bytes + sent;
        Ok(())
    }

    /// Snapshot for `worker` with the remap suffix it has not seen and the
    /// placement of its temporary components.
    fn snapshot_for(
        &mut self,
        worker: u32,
        placed: &[TempAssignment],
        components: Vec<SnapshotComponent>,
    ) -> Result<GlobalSnapshot, RunError> {
        let w = worker as usize;
        let mut remap = self.pool.remap_since(self.last_version[w]);
        for t in placed.iter().filter(|t| t.worker == worker) {
            let live = self
                .pool
                .resolve(t.atom)?
                .ok_or(ConsolidationError::UnknownId(t.atom))?;
            remap.push((t.temp_id as u64, live));
        }
        self.last_version[w] = self.pool.version();
        Ok(GlobalSnapshot {
            version: self.pool.version(),
            remap,
            components,
        })
    }

    fn compact(&mut self) {
        let acked = self.last_version.iter().copied().min().unwrap_or(0);
        self.pool.compact(acked);
    }

    fn record(&mut self, iter: u64, msgs: u64, bytes: u64) {
        let loglik = stats_log_likelihood(&self.spec, self.pool.components().map(|c| c.stats())) + self.log_h;
        self.trace.push(TraceRecord {
            iter,
            ms: self.clock.elapsed().as_millis() as u64,
            loglik,
            k: self.pool.len(),
            msgs,
            bytes,
            mode: self.mode.to_string(),
        });
    }

    fn check_delta(&self, conn: usize, d: &Delta) -> Result<u32, RunError> {
        let worker = self.worker_of(conn)?;
        if d.worker != worker {
            return Err(RunError::Worker {
                worker,
                reason: format!("delta labeled as worker {}", d.worker),
            });
        }
        Ok(worker)
    }

    fn sync_inner(&mut self, side: &mut MasterSide) -> Result<(), RunError> {
        let m = self.workers;
        // no snapshot goes out before every worker has registered, so the
        // first push cannot overtake another worker's pull request
        let mut pulls = Vec::with_capacity(m);
        for _ in 0..m {
            let r = self.next(side)?;
            match r.msg {
                Message::PullRequest { .. } => pulls.push((self.enroll(&r)?, r.bytes)),
                ref other => {
                    return Err(RunError::Unexpected {
                        expected: "pull request",
                        got: name_of(other),
                    })
                }
            }
        }
        for (worker, bytes) in pulls {
            self.bootstrap(side, worker, bytes)?;
        }
        for t in 1..=self.iterations {
            let mut deltas: Vec<Option<Delta>> = vec![None; m];
            let mut bytes = 0;
            for _ in 0..m {
                let r = self.next(side)?;
                let Message::DeltaPush(d) = r.msg else {
                    return Err(RunError::Unexpected {
                        expected: "delta push",
                        got: name_of(&r.msg),
                    });
                };
                let worker = self.check_delta(r.conn, &d)?;
                if d.based_on != self.pool.version() {
                    return Err(RunError::Worker {
                        worker,
                        reason: format!("delta based on version {} in round {}", d.based_on, self.pool.version()),
                    });
                }
                if deltas[worker as usize].is_some() {
                    return Err(RunError::Worker {
                        worker,
                        reason: "two deltas in one round".into(),
                    });
                }
                bytes += r.bytes;
                deltas[worker as usize] = Some(d);
            }
            let deltas: Vec<Delta> = deltas.into_iter().map(|d| d.expect("one per worker")).collect();
            let k_before = self.pool.len();
            let new_counts: Vec<usize> = deltas.iter().map(|d| d.new_components.len()).collect();
            let mut rng = stream_rng(self.seed, MASTER_STREAM, t);
            let placed = match self.mode {
                Mode::SyncProg => progressive_consolidate(&mut self.pool, &deltas, &self.spec, &mut rng)?,
                _ => {
                    let mut placed = Vec::new();
                    for d in &deltas {
                        placed.extend(absorb_delta(&mut self.pool, d, &self.spec)?);
                    }
                    self.pool.remove_empty();
                    self.consolidator
                        .run(&mut self.pool, self.pooled_iters, &self.spec, &mut rng);
                    placed
                }
            };
            self.pool.publish();
            let comps = self.pool.snapshot_components(&self.spec);
            let mut remaps = Vec::with_capacity(m);
            for w in 0..m as u32 {
                let snap = self.snapshot_for(w, &placed, comps.clone())?;
                remaps.push(snap.remap.len());
                bytes += self.send(side, w, &Message::Snapshot(snap))?;
            }
            self.compact();
            let budget = round_byte_budget(self.spec.dim, k_before, self.pool.len(), &new_counts, &remaps);
            assert!(bytes <= budget, "round traffic {bytes} exceeds its budget {budget}");
            self.comm.rounds.push(RoundComm {
                msgs: 2 * m as u64,
                bytes,
                budget,
            });
            self.record(t, 2 * m as u64, bytes);
        }
        for _ in 0..m {
            let r = self.next(side)?;
            match r.msg {
                Message::Shutdown => self.shutdown(side, &r)?,
                ref other => {
                    return Err(RunError::Unexpected {
                        expected: "shutdown",
                        got: name_of(other),
                    })
                }
            }
        }
        Ok(())
    }

    fn async_inner(&mut self, side: &mut MasterSide) -> Result<(), RunError> {
        let m = self.workers;
        let mut finished = 0;
        let mut budget = 0usize;
        let mut slice = 0u64;
        let mut event = 0u64;
        while finished < m {
            // deltas have priority; pooled moves run only while the inbox is empty
            let inbound = if budget > 0 {
                match side.try_recv()? {
                    Some(i) => i,
                    None => {
                        let n = budget.min(ASYNC_SLICE);
                        slice += 1;
                        let mut rng = stream_rng(self.seed, MASTER_STREAM, slice);
                        self.consolidator.run(&mut self.pool, n, &self.spec, &mut rng);
                        budget -= n;
                        continue;
                    }
                }
            } else {
                side.recv()?
            };
            let Some(r) = self.accept(inbound)? else { continue };
            match &r.msg {
                Message::PullRequest { .. } => self.register(side, &r)?,
                Message::Shutdown => {
                    self.shutdown(side, &r)?;
                    finished += 1;
                }
                Message::DeltaPush(d) => {
                    let worker = self.check_delta(r.conn, d)?;
                    let w = worker as usize;
                    let k_before = d.entries.len();
                    // a push based on a version already absorbed is a duplicate
                    let fresh = self.last_based_on[w].is_none_or(|b| d.based_on > b);
                    let placed = if fresh {
                        self.last_based_on[w] = Some(d.based_on);
                        let placed = absorb_delta(&mut self.pool, d, &self.spec)?;
                        self.pool.publish();
                        budget += self.pooled_iters;
                        placed
                    } else {
                        Vec::new()
                    };
                    let comps = self.pool.snapshot_components(&self.spec);
                    let snap = self.snapshot_for(worker, &placed, comps)?;
                    let bound = delta_frame_len(k_before, d.new_components.len(), self.spec.dim)
                        + snapshot_frame_len(snap.remap.len(), snap.components.len(), self.spec.dim);
                    let sent = self.send(side, worker, &Message::Snapshot(snap))?;
                    self.compact();
                    event += 1;
                    self.comm.rounds.push(RoundComm {
                        msgs: 2,
                        bytes: r.bytes + sent,
                        budget: bound,
                    });
                    self.record(event, 2, r.bytes + sent);
                }
                other => {
                    return Err(RunError::Unexpected {
                        expected: "pull, push or shutdown",
                        got: name_of(other),
                    })
                }
            }
        }
        Ok(())
    }
}
