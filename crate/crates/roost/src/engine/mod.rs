//! Round-based parallel tempering driver.
//!
//! A run executes `n_rounds` tuning rounds, round `r` being `2^r` scans of
//! exploration followed by chain-index swaps. After each round, per-replica
//! statistics are pooled through the fixed reduction tree, the annealing
//! schedule is re-fit by equi-partitioning the cumulative rejection curve,
//! a diagnostics row is emitted, and (optionally) a checkpoint is written.
//! Recorded samples come from the final round.
//!
//! All recorded output is a pure function of `(config, target)`: replica
//! streams are split from the master seed in replica order, swap uniforms
//! are keyed by `(seed, scan, pair)`, reductions follow the leaf-count tree,
//! and gathers are reassembled in deterministic order. Wall-clock time is
//! the one exception and is explicitly outside that contract.

mod checkpoint;
mod report;
mod stats;

pub use checkpoint::{
    load_checkpoint, resolve_checkpoint, save_checkpoint, Checkpoint, ReplicaSnapshot, RoundTrip,
    RtFlag, CHECKPOINT_VERSION,
};
pub use report::{format_sig3, report_json, table_header, table_row, table_rule, RoundReport};
pub use stats::{LogSumExp, OnlineStats, RoundStats};

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::explore::{explore, ExploreError, ExplorerConfig};
use crate::model::{DensityError, ModelError, Schedule, TargetSpec};
use crate::reduce::{distributed_reduce, ReduceError, WorkerAssignment};
use crate::rng::SplittableRng;
use crate::swap::{communicate, PermutedDistributedArray, Replica, ReplicaId, SwapError, MAX_CHAINS};
use crate::transport::{Transport, TransportError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Explore(#[from] ExploreError),
    #[error(transparent)]
    Swap(#[from] SwapError),
    #[error(transparent)]
    Reduce(#[from] ReduceError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("stepping stone has no samples")]
    NoSamples,
    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
    #[error("checkpoint version {found} is not supported (this build reads version {supported})")]
    CheckpointVersion { found: u32, supported: u32 },
}

/// Which outputs to record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordSet {
    /// Target-chain samples of the final round, kept in memory and written
    /// as `trace.csv`.
    pub traces: bool,
    /// Constant-memory marginal statistics of the final round.
    pub online: bool,
    /// Tempered-restart and round-trip counting.
    pub round_trip: bool,
    /// Stream every round's target-chain samples to `samples/round_<r>.csv`.
    pub disk: bool,
    /// Per-scan snapshots of the chain directory (`index_process.csv`).
    pub index: bool,
}

impl Default for RecordSet {
    fn default() -> Self {
        RecordSet {
            traces: false,
            online: true,
            round_trip: true,
            disk: false,
            index: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub n_chains: u32,
    pub n_rounds: u32,
    pub seed: u64,
    pub record: RecordSet,
    pub checkpoint: bool,
    pub explorer: ExplorerConfig,
    pub output_dir: Option<PathBuf>,
    /// Exploration threads per worker.
    pub n_threads: u32,
    /// Test hook: overrides every swap decision when set.
    pub force_swap: Option<bool>,
    /// Suppress the progress table on stdout.
    pub quiet: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_chains: 10,
            n_rounds: 10,
            seed: 1,
            record: RecordSet::default(),
            checkpoint: false,
            explorer: ExplorerConfig::default(),
            output_dir: None,
            n_threads: 1,
            force_swap: None,
            quiet: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.n_chains < 2 || self.n_chains > MAX_CHAINS {
            return Err(EngineError::Config(format!(
                "n_chains must lie in 2..={MAX_CHAINS}, got {}",
                self.n_chains
            )));
        }
        // total scans must stay far below the 2^40 tag window
        if self.n_rounds < 1 || self.n_rounds > 34 {
            return Err(EngineError::Config(format!(
                "n_rounds must lie in 1..=34, got {}",
                self.n_rounds
            )));
        }
        if self.n_threads < 1 {
            return Err(EngineError::Config("n_threads must be at least 1".into()));
        }
        self.explorer.validate().map_err(EngineError::Config)?;
        if self.checkpoint && self.output_dir.is_none() {
            return Err(EngineError::Config(
                "checkpointing needs an output directory".into(),
            ));
        }
        if self.record.disk && self.output_dir.is_none() {
            return Err(EngineError::Config(
                "the disk recorder needs an output directory".into(),
            ));
        }
        Ok(())
    }
}

/// Everything the root worker hands back.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub reports: Vec<RoundReport>,
    /// Betas active in each round, in round order.
    pub schedule_history: Vec<Vec<f64>>,
    pub final_schedule: Vec<f64>,
    /// Final-round target-chain samples (when traces are recorded).
    pub trace: Vec<(u64, Vec<f64>)>,
    /// Final-round marginal statistics (when online is recorded).
    pub online: Option<OnlineStats>,
    pub restarts: u64,
    pub round_trips: u64,
    /// Per-scan directory snapshots (when index recording is on).
    pub index_history: Vec<(u64, Vec<ReplicaId>)>,
}

// tag namespaces for engine collectives; swap tags keep kind nibble 0
const KIND_INDEX: u64 = 5;
const KIND_BCAST: u64 = 6;
const KIND_TRACE: u64 = 7;
const KIND_CKPT: u64 = 8;

fn kind_tag(kind: u64, epoch: u64, low: u64) -> u64 {
    (kind << 60) | ((epoch & 0xFF_FFFF_FFFF) << 16) | (low & 0xFFFF)
}

// ---------------------------------------------------------------------------
// schedule adaptation and diagnostics
// ---------------------------------------------------------------------------

/// Re-fit the schedule from one round's per-pair rejection sums.
///
/// The cumulative rejection curve through `(beta_i, sum of r_k for k < i)`
/// is a monotone piecewise-linear estimate of the communication barrier;
/// the new betas equi-partition it. All-zero rejections leave the schedule
/// unchanged (it is already ideal), as does any degenerate fit.
pub fn adapt_schedule(rejection_sums: &[f64], old: &Schedule) -> Result<Schedule, EngineError> {
    let n = old.n_chains() as usize;
    if rejection_sums.len() != n - 1 {
        return Err(EngineError::Config(format!(
            "expected {} rejection sums, got {}",
            n - 1,
            rejection_sums.len()
        )));
    }
    let total: f64 = rejection_sums.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Ok(old.clone());
    }
    let mut cumulative = Vec::with_capacity(n);
    cumulative.push(0.0);
    for r in rejection_sums {
        cumulative.push(cumulative.last().unwrap() + r);
    }
    let old_betas = old.betas();
    let mut betas = vec![0.0; n];
    betas[n - 1] = 1.0;
    for (j, beta) in betas.iter_mut().enumerate().take(n - 1).skip(1) {
        let level = total * j as f64 / (n - 1) as f64;
        let mut idx = 0;
        while idx + 2 < n && cumulative[idx + 1] < level {
            idx += 1;
        }
        let seg = cumulative[idx + 1] - cumulative[idx];
        let frac = if seg > 0.0 {
            ((level - cumulative[idx]) / seg).clamp(0.0, 1.0)
        } else {
            0.0
        };
        *beta = old_betas[idx] + frac * (old_betas[idx + 1] - old_betas[idx]);
    }
    if betas.windows(2).any(|w| w[0] >= w[1]) {
        // rounding collapsed an interval; keep the previous schedule
        return Ok(old.clone());
    }
    Ok(Schedule::new(betas)?)
}

/// Global communication barrier: the sum of adjacent-pair rejection rates.
pub fn global_barrier(rejection_rates: &[f64]) -> f64 {
    rejection_rates.iter().sum()
}

/// Stepping stone estimate of `log(Z1/Z0)` from the per-pair accumulators
/// of forward increments `exp(l_{k+1}(x) - l_k(x))` at states of chain `k`.
pub fn stepping_stone(per_pair: &[LogSumExp]) -> Result<f64, EngineError> {
    if per_pair.is_empty() || per_pair.iter().any(|l| l.count() == 0) {
        return Err(EngineError::NoSamples);
    }
    Ok(per_pair
        .iter()
        .map(|l| l.value().expect("nonempty") - (l.count() as f64).ln())
        .sum())
}

// ---------------------------------------------------------------------------
// collective helpers
// ---------------------------------------------------------------------------

fn broadcast_bytes(
    transport: &mut dyn Transport,
    epoch: u64,
    payload: Option<Vec<u8>>,
) -> Result<Vec<u8>, EngineError> {
    let me = transport.rank();
    if me == 1 {
        let payload = payload.expect("root broadcasts a payload");
        for dest in 2..=transport.n_workers() {
            transport.send(dest, kind_tag(KIND_BCAST, epoch, dest as u64), &payload)?;
        }
        Ok(payload)
    } else {
        Ok(transport.receive(1, kind_tag(KIND_BCAST, epoch, me as u64))?)
    }
}

/// Root receives every worker's payload in rank order (own slot first).
fn gather_bytes(
    transport: &mut dyn Transport,
    kind: u64,
    epoch: u64,
    payload: Vec<u8>,
) -> Result<Option<Vec<Vec<u8>>>, EngineError> {
    let me = transport.rank();
    if me == 1 {
        let mut all = Vec::with_capacity(transport.n_workers() as usize);
        all.push(payload);
        for from in 2..=transport.n_workers() {
            all.push(transport.receive(from, kind_tag(kind, epoch, from as u64))?);
        }
        Ok(Some(all))
    } else {
        transport.send(1, kind_tag(kind, epoch, me as u64), &payload)?;
        Ok(None)
    }
}

fn encode_trace_rows(rows: &[(u64, Vec<f64>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    for (t, state) in rows {
        out.extend_from_slice(&t.to_le_bytes());
        for v in state {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_trace_rows(bytes: &[u8], dim: usize) -> Result<Vec<(u64, Vec<f64>)>, EngineError> {
    let mut cursor = stats::Cursor { bytes, pos: 0 };
    let fmt = |e: String| EngineError::Config(format!("trace gather: {e}"));
    let n = cursor.u32().map_err(fmt)? as usize;
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let t = cursor.u64().map_err(fmt)?;
        rows.push((t, cursor.f64_vec(dim).map_err(fmt)?));
    }
    cursor.finish().map_err(fmt)?;
    Ok(rows)
}

fn encode_entries(entries: &[(u32, u32)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (chain, holder) in entries {
        out.extend_from_slice(&chain.to_le_bytes());
        out.extend_from_slice(&holder.to_le_bytes());
    }
    out
}

fn decode_entries(bytes: &[u8]) -> Result<Vec<(u32, u32)>, EngineError> {
    let mut cursor = stats::Cursor { bytes, pos: 0 };
    let fmt = |e: String| EngineError::Config(format!("index gather: {e}"));
    let n = cursor.u32().map_err(fmt)? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let chain = cursor.u32().map_err(fmt)?;
        let holder = cursor.u32().map_err(fmt)?;
        out.push((chain, holder));
    }
    cursor.finish().map_err(fmt)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// the driver
// ---------------------------------------------------------------------------

struct WorkerState {
    cores: Vec<Replica>,
    paths: Vec<crate::model::AnnealingPath>,
    rts: Vec<RoundTrip>,
}

/// Run the collective PT loop as one worker of the transport's topology.
///
/// Every worker of the topology must call this with identical `config` and
/// `target` (and the same `resume` snapshot, if any). Returns the run
/// output on rank 1 and `None` elsewhere.
pub fn run_worker(
    config: &RunConfig,
    target: &TargetSpec,
    transport: &mut dyn Transport,
    resume: Option<&Checkpoint>,
) -> Result<Option<RunOutput>, EngineError> {
    config.validate()?;
    target.validate()?;
    let n = config.n_chains;
    let dim = target.dim();
    let me = transport.rank();
    let m = transport.n_workers();
    let is_root = me == 1;
    if m > n {
        return Err(EngineError::Config(format!(
            "{m} workers for {n} chains; workers must not exceed chains"
        )));
    }
    let assignment = WorkerAssignment::new(n, m)?;
    let my_replicas: Vec<ReplicaId> = assignment.block(me).collect();

    // replica streams split from the master in replica order, so the
    // stream owned by replica i never depends on the worker layout
    let mut master = SplittableRng::new(config.seed);
    let all_streams: Vec<SplittableRng> = (0..n).map(|_| master.split()).collect();

    let mut schedule = Schedule::equal_spacing(n)?;
    let mut t_next: u64 = 1;
    let mut start_round: u32 = 1;
    let mut reports: Vec<RoundReport> = Vec::new();
    let mut schedule_history: Vec<Vec<f64>> = Vec::new();

    let mut state = WorkerState {
        cores: Vec::with_capacity(my_replicas.len()),
        paths: Vec::with_capacity(my_replicas.len()),
        rts: Vec::with_capacity(my_replicas.len()),
    };
    let mut dist;

    match resume {
        None => {
            for &i in &my_replicas {
                state.cores.push(Replica {
                    index: i,
                    chain: i,
                    state: target.initial_state(),
                    rng: all_streams[(i - 1) as usize].clone(),
                });
                state.paths.push(target.build_path()?);
                state.rts.push(RoundTrip::default());
            }
            dist = PermutedDistributedArray::new(assignment.clone(), me);
        }
        Some(ck) => {
            if ck.config.n_chains != n || ck.config.seed != config.seed || &ck.target != target {
                return Err(EngineError::Config(
                    "resume must keep the original chains, seed, and target".into(),
                ));
            }
            if ck.round >= config.n_rounds {
                return Err(EngineError::Config(format!(
                    "checkpoint already covers round {} of {}",
                    ck.round, config.n_rounds
                )));
            }
            schedule = Schedule::new(ck.schedule.clone())?;
            t_next = ck.t_next;
            start_round = ck.round + 1;
            reports = ck.reports.clone();
            schedule_history = ck.schedule_history.clone();
            let by_index: HashMap<ReplicaId, &ReplicaSnapshot> =
                ck.replicas.iter().map(|r| (r.index, r)).collect();
            for &i in &my_replicas {
                let snap = by_index.get(&i).ok_or_else(|| {
                    EngineError::Config(format!("checkpoint lacks replica {i}"))
                })?;
                state.cores.push(Replica {
                    index: i,
                    chain: snap.chain,
                    state: snap.state.clone(),
                    rng: SplittableRng::from_state(snap.rng_seed, snap.rng_gamma),
                });
                state.paths.push(target.build_path()?);
                state.rts.push(snap.rt);
            }
            dist = PermutedDistributedArray::from_entries(
                assignment.clone(),
                me,
                &ck.holder_of_chain(),
            );
        }
    }

    // the whole path must be evaluable at every starting state
    for (core, path) in state.cores.iter().zip(&state.paths) {
        let beta = schedule.beta(core.chain);
        if path.log_density(beta, &core.state)? == f64::NEG_INFINITY {
            return Err(EngineError::Config(format!(
                "initial state of replica {} lies outside the support",
                core.index
            )));
        }
    }

    let run_dir: Option<PathBuf> = if config.checkpoint && is_root {
        match resume {
            Some(ck) if ck.run_dir.is_some() => ck.run_dir.clone(),
            _ => {
                let output = config.output_dir.as_ref().expect("validated");
                let stamp = std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_micros())
                    .unwrap_or(0);
                Some(output.join("all").join(format!("run_{}_{}", stamp, std::process::id())))
            }
        }
    } else {
        None
    };

    if is_root && !config.quiet {
        println!("{}", table_rule());
        println!("{}", table_header());
        for r in &reports {
            println!("{}", table_row(r));
        }
    }

    let mut final_trace: Vec<(u64, Vec<f64>)> = Vec::new();
    let mut final_online: Option<OnlineStats> = None;
    let mut final_counts = (0u64, 0u64);
    let mut index_history: Vec<(u64, Vec<ReplicaId>)> = Vec::new();

    for r in start_round..=config.n_rounds {
        let scans = 1u64 << r;
        let recording = r == config.n_rounds;
        let round_start = Instant::now();
        schedule_history.push(schedule.betas().to_vec());

        let mut frags: Vec<RoundStats> = my_replicas
            .iter()
            .map(|_| RoundStats::new(n, dim))
            .collect();
        let mut trace_bufs: Vec<Vec<(u64, Vec<f64>)>> = vec![Vec::new(); my_replicas.len()];
        let keep_trace = config.record.disk || (recording && config.record.traces);

        for _ in 0..scans {
            let t = t_next;
            t_next += 1;

            explore_phase(&mut state, &mut frags, &schedule, config, n)?;

            communicate(
                t,
                &mut state.cores,
                &mut dist,
                transport,
                config.seed,
                config.force_swap,
                |idx, replica, partner_chain| {
                    let path = &state.paths[idx];
                    let own = path.log_density(schedule.beta(replica.chain), &replica.state)?;
                    let other = path.log_density(schedule.beta(partner_chain), &replica.state)?;
                    Ok(other - own)
                },
                |idx, decision| {
                    let frag = &mut frags[idx];
                    let k = (decision.pair.0 - 1) as usize;
                    frag.rejection_sum[k] += 1.0 - decision.alpha;
                    frag.proposals[k] += 1;
                    frag.alpha_sum += decision.alpha;
                    frag.alpha_count += 1;
                    frag.alpha_min = frag.alpha_min.min(decision.alpha);
                },
            )?;

            // record the scan
            for (i, core) in state.cores.iter().enumerate() {
                if config.record.round_trip {
                    state.rts[i].update(core.chain, n);
                }
                if core.chain == n {
                    if keep_trace {
                        trace_bufs[i].push((t, core.state.clone()));
                    }
                    if recording && config.record.online {
                        frags[i].online.push(&core.state);
                    }
                }
            }

            if config.record.index {
                let payload = encode_entries(&dist.local_entries());
                if let Some(all) = gather_bytes(transport, KIND_INDEX, t, payload)? {
                    let mut row = vec![0u32; n as usize];
                    for blob in all {
                        for (chain, holder) in decode_entries(&blob)? {
                            row[(chain - 1) as usize] = holder;
                        }
                    }
                    index_history.push((t, row));
                }
            }
        }

        // pool the round's statistics through the tree, replica order
        for (i, frag) in frags.iter_mut().enumerate() {
            frag.restarts = state.rts[i].restarts;
            frag.round_trips = state.rts[i].round_trips;
        }
        let pooled = distributed_reduce(&frags, &assignment, transport, r as u64, |a, b| {
            RoundStats::merge(a, b)
        })?;

        // move this round's samples to the root
        let gathered_trace: Option<Vec<(u64, Vec<f64>)>> = if keep_trace {
            let mut mine = Vec::new();
            for buf in &mut trace_bufs {
                mine.append(buf);
            }
            let blobs = gather_bytes(transport, KIND_TRACE, r as u64, encode_trace_rows(&mine))?;
            match blobs {
                None => None,
                Some(all) => {
                    let mut rows = Vec::new();
                    for blob in all {
                        rows.extend(decode_trace_rows(&blob, dim)?);
                    }
                    rows.sort_by_key(|(t, _)| *t);
                    Some(rows)
                }
            }
        } else {
            None
        };

        // root: diagnostics row, then the adapted schedule for the next round
        let bcast_payload = if is_root {
            let pooled = pooled.as_ref().expect("root holds the reduced value");
            let rates: Vec<f64> = pooled
                .rejection_sum
                .iter()
                .zip(&pooled.proposals)
                .map(|(&s, &p)| if p > 0 { s / p as f64 } else { 0.0 })
                .collect();
            let lambda = global_barrier(&rates);
            let log_z = stepping_stone(&pooled.stepping)?;
            let report = RoundReport {
                round: r,
                scans,
                restarts: pooled.restarts,
                lambda,
                time_s: round_start.elapsed().as_secs_f64(),
                log_z_ratio: log_z,
                min_alpha: if pooled.alpha_count > 0 {
                    pooled.alpha_min
                } else {
                    1.0
                },
                mean_alpha: if pooled.alpha_count > 0 {
                    pooled.alpha_sum / pooled.alpha_count as f64
                } else {
                    1.0
                },
            };
            if !config.quiet {
                println!("{}", table_row(&report));
            }
            reports.push(report);

            if recording {
                if config.record.traces {
                    final_trace = gathered_trace.clone().unwrap_or_default();
                }
                if config.record.online {
                    final_online = Some(pooled.online.clone());
                }
                final_counts = (pooled.restarts, pooled.round_trips);
            }
            if config.record.disk {
                if let Some(dir) = &config.output_dir {
                    let rows = gathered_trace.as_deref().unwrap_or(&[]);
                    let path = dir.join("samples").join(format!("round_{r}.csv"));
                    write_text(&path, &trace_csv(dim, rows))?;
                }
            }

            schedule = adapt_schedule(&pooled.rejection_sum, &schedule)?;
            let mut payload = Vec::with_capacity(8 * n as usize);
            for b in schedule.betas() {
                payload.extend_from_slice(&b.to_le_bytes());
            }
            Some(payload)
        } else {
            None
        };

        let betas_bytes = broadcast_bytes(transport, r as u64, bcast_payload)?;
        if !is_root {
            if betas_bytes.len() != 8 * n as usize {
                return Err(EngineError::Config("schedule broadcast size mismatch".into()));
            }
            let betas: Vec<f64> = betas_bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            schedule = Schedule::new(betas)?;
        }

        if config.checkpoint {
            let snaps: Vec<ReplicaSnapshot> = state
                .cores
                .iter()
                .zip(&state.rts)
                .map(|(core, rt)| ReplicaSnapshot {
                    index: core.index,
                    chain: core.chain,
                    state: core.state.clone(),
                    rng_seed: core.rng.state().0,
                    rng_gamma: core.rng.state().1,
                    rt: *rt,
                })
                .collect();
            let blobs = gather_bytes(
                transport,
                KIND_CKPT,
                r as u64,
                checkpoint::encode_snapshots(&snaps),
            )?;
            if let Some(all) = blobs {
                let mut replicas = Vec::with_capacity(n as usize);
                for blob in all {
                    replicas.extend(
                        checkpoint::decode_snapshots(&blob).map_err(EngineError::CheckpointFormat)?,
                    );
                }
                replicas.sort_by_key(|s| s.index);
                let ck = Checkpoint {
                    config: config.clone(),
                    target: target.clone(),
                    round: r,
                    t_next,
                    schedule: schedule.betas().to_vec(),
                    reports: reports.clone(),
                    schedule_history: schedule_history.clone(),
                    replicas,
                    run_dir: run_dir.clone(),
                };
                let output = config.output_dir.as_ref().expect("validated");
                save_checkpoint(&ck, output, run_dir.as_ref().expect("root has a run dir"))?;
            }
        }
    }

    if !is_root {
        return Ok(None);
    }
    if is_root && !config.quiet {
        println!("{}", table_rule());
    }

    let output = RunOutput {
        reports,
        schedule_history,
        final_schedule: schedule.betas().to_vec(),
        trace: final_trace,
        online: final_online,
        restarts: final_counts.0,
        round_trips: final_counts.1,
        index_history,
    };
    if let Some(dir) = &config.output_dir {
        write_artifacts(dir, dim, n, &config.record, &output)?;
    }
    Ok(Some(output))
}

fn explore_phase(
    state: &mut WorkerState,
    frags: &mut [RoundStats],
    schedule: &Schedule,
    config: &RunConfig,
    n_chains: u32,
) -> Result<(), EngineError> {
    let count = state.cores.len();
    if count == 0 {
        return Ok(());
    }
    let threads = (config.n_threads as usize).min(count);
    if threads <= 1 {
        return explore_chunk(
            &mut state.cores,
            &state.paths,
            frags,
            schedule,
            &config.explorer,
            n_chains,
        );
    }
    let chunk = count.div_ceil(threads);
    let paths = &state.paths;
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for ((cores_chunk, paths_chunk), frags_chunk) in state
            .cores
            .chunks_mut(chunk)
            .zip(paths.chunks(chunk))
            .zip(frags.chunks_mut(chunk))
        {
            handles.push(scope.spawn(move || {
                explore_chunk(
                    cores_chunk,
                    paths_chunk,
                    frags_chunk,
                    schedule,
                    &config.explorer,
                    n_chains,
                )
            }));
        }
        for handle in handles {
            handle.join().expect("exploration thread panicked")?;
        }
        Ok(())
    })
}

fn explore_chunk(
    cores: &mut [Replica],
    paths: &[crate::model::AnnealingPath],
    frags: &mut [RoundStats],
    schedule: &Schedule,
    explorer: &ExplorerConfig,
    n_chains: u32,
) -> Result<(), EngineError> {
    for ((core, path), frag) in cores.iter_mut().zip(paths).zip(frags) {
        let beta = schedule.beta(core.chain);
        let tempered = path.at(beta)?;
        explore(&mut core.state, &tempered, &mut core.rng, explorer)?;
        // forward stepping-stone increment at the freshly explored state
        if core.chain < n_chains {
            let up = path.log_density(schedule.beta(core.chain + 1), &core.state)?;
            let own = path.log_density(beta, &core.state)?;
            frag.stepping[(core.chain - 1) as usize].push(up - own);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// artifacts
// ---------------------------------------------------------------------------

fn write_text(path: &Path, content: &str) -> Result<(), EngineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| EngineError::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, content).map_err(|e| EngineError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// CSV with shortest-round-trip float formatting, so reparsing recovers the
/// exact bits.
fn trace_csv(dim: usize, rows: &[(u64, Vec<f64>)]) -> String {
    let mut out = String::from("scan");
    for i in 1..=dim {
        out.push_str(&format!(",x{i}"));
    }
    out.push('\n');
    for (t, state) in rows {
        out.push_str(&t.to_string());
        for v in state {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

fn schedule_csv(history: &[Vec<f64>]) -> String {
    let n = history.first().map(|b| b.len()).unwrap_or(0);
    let mut out = String::from("round");
    for i in 1..=n {
        out.push_str(&format!(",beta_{i}"));
    }
    out.push('\n');
    for (r, betas) in history.iter().enumerate() {
        out.push_str(&(r + 1).to_string());
        for b in betas {
            out.push_str(&format!(",{b}"));
        }
        out.push('\n');
    }
    out
}

fn index_csv(history: &[(u64, Vec<ReplicaId>)], n: u32) -> String {
    let mut out = String::from("scan");
    for i in 1..=n {
        out.push_str(&format!(",chain_{i}"));
    }
    out.push('\n');
    for (t, holders) in history {
        out.push_str(&t.to_string());
        for h in holders {
            out.push_str(&format!(",{h}"));
        }
        out.push('\n');
    }
    out
}

fn write_artifacts(
    dir: &Path,
    dim: usize,
    n_chains: u32,
    record: &RecordSet,
    output: &RunOutput,
) -> Result<(), EngineError> {
    write_text(&dir.join("report.json"), &report_json(&output.reports))?;
    write_text(&dir.join("schedule_history.csv"), &schedule_csv(&output.schedule_history))?;
    if record.traces {
        write_text(&dir.join("trace.csv"), &trace_csv(dim, &output.trace))?;
    }
    if record.index {
        write_text(&dir.join("index_process.csv"), &index_csv(&output.index_history, n_chains))?;
    }
    Ok(())
}
