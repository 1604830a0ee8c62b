//! Versioned binary snapshots, one per completed round.
//!
//! Layout (little-endian): magic `PGNS`, format version `u32`, then a
//! length-prefixed JSON header (config, target, report history, schedule
//! history) followed by the binary replica records. A run resumed from a
//! snapshot produces byte-identical recorded output to an uninterrupted
//! run, so everything that influences later rounds is captured: schedule,
//! scan counter, every replica's state, chain, stream, and round-trip
//! bookkeeping.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::report::RoundReport;
use super::{EngineError, RunConfig};
use crate::engine::stats::Cursor;
use crate::model::TargetSpec;
use crate::swap::{ChainId, ReplicaId};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PGNS";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RtFlag {
    Untouched,
    HitReference,
    HitTarget,
}

/// Restart / round-trip bookkeeping for one replica.
///
/// A tempered restart is counted when a replica that last touched the
/// reference chain reaches the target chain; the round trip completes on
/// the subsequent return to the reference chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundTrip {
    pub flag: RtFlag,
    pub restarts: u64,
    pub round_trips: u64,
}

impl Default for RoundTrip {
    fn default() -> Self {
        RoundTrip {
            flag: RtFlag::Untouched,
            restarts: 0,
            round_trips: 0,
        }
    }
}

impl RoundTrip {
    pub fn update(&mut self, chain: ChainId, n_chains: u32) {
        if chain == 1 {
            if self.flag == RtFlag::HitTarget {
                self.round_trips += 1;
            }
            self.flag = RtFlag::HitReference;
        } else if chain == n_chains && self.flag == RtFlag::HitReference {
            // a replica that starts at the target stays Untouched until its
            // first reference visit, so restarts >= round_trips always holds
            self.restarts += 1;
            self.flag = RtFlag::HitTarget;
        }
    }
}

/// Frozen per-replica record.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaSnapshot {
    pub index: ReplicaId,
    pub chain: ChainId,
    pub state: Vec<f64>,
    pub rng_seed: u64,
    pub rng_gamma: u64,
    pub rt: RoundTrip,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    target: TargetSpec,
    round: u32,
    t_next: u64,
    schedule: Vec<f64>,
    reports: Vec<RoundReport>,
    schedule_history: Vec<Vec<f64>>,
}

/// A full engine snapshot at a round boundary.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub target: TargetSpec,
    /// Rounds completed.
    pub round: u32,
    pub t_next: u64,
    pub schedule: Vec<f64>,
    pub reports: Vec<RoundReport>,
    pub schedule_history: Vec<Vec<f64>>,
    pub replicas: Vec<ReplicaSnapshot>,
    /// Directory the snapshot was loaded from / is being written to;
    /// not part of the serialized form.
    pub run_dir: Option<PathBuf>,
}

impl Checkpoint {
    /// Chain -> holder map, for rebuilding the distributed directory.
    pub fn holder_of_chain(&self) -> HashMap<ChainId, ReplicaId> {
        self.replicas.iter().map(|r| (r.chain, r.index)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            target: self.target.clone(),
            round: self.round,
            t_next: self.t_next,
            schedule: self.schedule.clone(),
            reports: self.reports.clone(),
            schedule_history: self.schedule_history.clone(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&(self.replicas.len() as u32).to_le_bytes());
        for r in &self.replicas {
            encode_snapshot(r, &mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], run_dir: Option<PathBuf>) -> Result<Self, EngineError> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(EngineError::CheckpointFormat(
                "bad magic bytes: not a checkpoint file".into(),
            ));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(EngineError::CheckpointVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let mut cursor = Cursor {
            bytes: &bytes[8..],
            pos: 0,
        };
        let fmt = EngineError::CheckpointFormat;
        let header_len = cursor.u64().map_err(fmt)? as usize;
        let header_bytes = cursor.take(header_len).map_err(fmt)?.to_vec();
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| EngineError::CheckpointFormat(format!("header: {e}")))?;
        let n = cursor.u32().map_err(fmt)? as usize;
        let mut replicas = Vec::with_capacity(n);
        for _ in 0..n {
            replicas.push(decode_snapshot(&mut cursor).map_err(fmt)?);
        }
        cursor.finish().map_err(fmt)?;
        Ok(Checkpoint {
            config: header.config,
            target: header.target,
            round: header.round,
            t_next: header.t_next,
            schedule: header.schedule,
            reports: header.reports,
            schedule_history: header.schedule_history,
            replicas,
            run_dir,
        })
    }
}

fn encode_snapshot(r: &ReplicaSnapshot, out: &mut Vec<u8>) {
    out.extend_from_slice(&r.index.to_le_bytes());
    out.extend_from_slice(&r.chain.to_le_bytes());
    out.extend_from_slice(&(r.state.len() as u32).to_le_bytes());
    for v in &r.state {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&r.rng_seed.to_le_bytes());
    out.extend_from_slice(&r.rng_gamma.to_le_bytes());
    out.push(match r.rt.flag {
        RtFlag::Untouched => 0,
        RtFlag::HitReference => 1,
        RtFlag::HitTarget => 2,
    });
    out.extend_from_slice(&r.rt.restarts.to_le_bytes());
    out.extend_from_slice(&r.rt.round_trips.to_le_bytes());
}

pub(crate) fn decode_snapshot(cursor: &mut Cursor<'_>) -> Result<ReplicaSnapshot, String> {
    let index = cursor.u32()?;
    let chain = cursor.u32()?;
    let dim = cursor.u32()? as usize;
    let state = cursor.f64_vec(dim)?;
    let rng_seed = cursor.u64()?;
    let rng_gamma = cursor.u64()?;
    let flag = match cursor.take(1)?[0] {
        0 => RtFlag::Untouched,
        1 => RtFlag::HitReference,
        2 => RtFlag::HitTarget,
        other => return Err(format!("invalid round-trip flag {other}")),
    };
    let restarts = cursor.u64()?;
    let round_trips = cursor.u64()?;
    Ok(ReplicaSnapshot {
        index,
        chain,
        state,
        rng_seed,
        rng_gamma,
        rt: RoundTrip {
            flag,
            restarts,
            round_trips,
        },
    })
}

pub(crate) fn encode_snapshots(snaps: &[ReplicaSnapshot]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(snaps.len() as u32).to_le_bytes());
    for s in snaps {
        encode_snapshot(s, &mut out);
    }
    out
}

pub(crate) fn decode_snapshots(bytes: &[u8]) -> Result<Vec<ReplicaSnapshot>, String> {
    let mut cursor = Cursor { bytes, pos: 0 };
    let n = cursor.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(decode_snapshot(&mut cursor)?);
    }
    cursor.finish()?;
    Ok(out)
}

fn io_err(path: &Path, source: std::io::Error) -> EngineError {
    EngineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write the round snapshot into the run directory and refresh the
/// `latest` pointer beside `all/`.
pub fn save_checkpoint(checkpoint: &Checkpoint, output_dir: &Path, run_dir: &Path) -> Result<PathBuf, EngineError> {
    fs::create_dir_all(run_dir).map_err(|e| io_err(run_dir, e))?;
    fs::create_dir_all(output_dir).map_err(|e| io_err(output_dir, e))?;
    let path = run_dir.join(format!("round_{}", checkpoint.round));
    fs::write(&path, checkpoint.to_bytes()).map_err(|e| io_err(&path, e))?;
    let latest = output_dir.join("latest");
    fs::write(&latest, format!("{}\n", run_dir.display())).map_err(|e| io_err(&latest, e))?;
    Ok(path)
}

/// Load a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, EngineError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Checkpoint::from_bytes(&bytes, path.parent().map(|p| p.to_path_buf()))
}

/// Resolve a `--from` argument: a checkpoint file, a run directory, a
/// results directory containing `latest`, or the `latest` pointer itself.
/// Picks the highest completed round.
pub fn resolve_checkpoint(from: &Path) -> Result<PathBuf, EngineError> {
    let not_found = |msg: String| EngineError::CheckpointFormat(msg);
    let mut dir = from.to_path_buf();
    if dir.is_file() {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("round_") {
            return Ok(dir);
        }
        // a pointer file holding the run directory path
        let content = fs::read_to_string(&dir).map_err(|e| io_err(&dir, e))?;
        dir = PathBuf::from(content.trim());
    }
    if dir.join("latest").is_file() {
        let content = fs::read_to_string(dir.join("latest")).map_err(|e| io_err(&dir.join("latest"), e))?;
        dir = PathBuf::from(content.trim());
    }
    if !dir.is_dir() {
        return Err(not_found(format!("no run directory at {}", dir.display())));
    }
    let mut best: Option<(u32, PathBuf)> = None;
    for entry in fs::read_dir(&dir).map_err(|e| io_err(&dir, e))? {
        let entry = entry.map_err(|e| io_err(&dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(round) = name.strip_prefix("round_").and_then(|s| s.parse::<u32>().ok()) {
            if best.as_ref().map(|(r, _)| round > *r).unwrap_or(true) {
                best = Some((round, entry.path()));
            }
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| not_found(format!("no round_<r> files under {}", dir.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explore::ExplorerConfig;

    fn sample_checkpoint() -> Checkpoint {
        Checkpoint {
            config: RunConfig {
                n_chains: 4,
                n_rounds: 6,
                seed: 3,
                record: Default::default(),
                checkpoint: true,
                explorer: ExplorerConfig::default(),
                output_dir: Some(PathBuf::from("results")),
                n_threads: 1,
                force_swap: None,
                quiet: true,
            },
            target: TargetSpec::Mvn { dim: 2, ref_sd: 2.0 },
            round: 3,
            t_next: 15,
            schedule: vec![0.0, 0.25, 0.75, 1.0],
            reports: vec![],
            schedule_history: vec![vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]],
            replicas: (1..=4)
                .map(|i| ReplicaSnapshot {
                    index: i,
                    chain: 5 - i,
                    state: vec![0.5 * i as f64, -0.25],
                    rng_seed: 100 + i as u64,
                    rng_gamma: (200 + i as u64) | 1,
                    rt: RoundTrip {
                        flag: RtFlag::HitTarget,
                        restarts: i as u64,
                        round_trips: 0,
                    },
                })
                .collect(),
            run_dir: None,
        }
    }

    #[test]
    fn roundtrips_field_for_field() {
        let ck = sample_checkpoint();
        let decoded = Checkpoint::from_bytes(&ck.to_bytes(), None).unwrap();
        assert_eq!(decoded.round, ck.round);
        assert_eq!(decoded.t_next, ck.t_next);
        assert_eq!(decoded.schedule, ck.schedule);
        assert_eq!(decoded.replicas, ck.replicas);
        assert_eq!(decoded.target, ck.target);
        assert_eq!(decoded.config.seed, ck.config.seed);
        assert_eq!(decoded.schedule_history, ck.schedule_history);
    }

    #[test]
    fn rejects_corrupt_magic() {
        let mut bytes = sample_checkpoint().to_bytes();
        bytes[0] = b'X';
        match Checkpoint::from_bytes(&bytes, None) {
            Err(EngineError::CheckpointFormat(msg)) => assert!(msg.contains("magic")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_version_mismatch() {
        let mut bytes = sample_checkpoint().to_bytes();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        match Checkpoint::from_bytes(&bytes, None) {
            Err(EngineError::CheckpointVersion { found: 99, supported }) => {
                assert_eq!(supported, CHECKPOINT_VERSION)
            }
            other => panic!("expected version mismatch, got {other:?}"),
        }
    }

    #[test]
    fn save_resolve_load() {
        let tmp = tempfile::tempdir().unwrap();
        let output = tmp.path();
        let run_dir = output.join("all").join("run_test");
        let ck = sample_checkpoint();
        save_checkpoint(&ck, output, &run_dir).unwrap();
        let mut later = ck.clone();
        later.round = 4;
        save_checkpoint(&later, output, &run_dir).unwrap();

        // resolve through the latest pointer, the results dir, and the run dir
        for from in [output.to_path_buf(), output.join("latest"), run_dir.clone()] {
            let path = resolve_checkpoint(&from).unwrap();
            let loaded = load_checkpoint(&path).unwrap();
            assert_eq!(loaded.round, 4, "picked the newest round via {from:?}");
            assert_eq!(loaded.run_dir.as_deref(), Some(run_dir.as_path()));
        }
    }

    #[test]
    fn round_trip_state_machine() {
        let n = 5;
        let mut rt = RoundTrip::default();
        rt.update(3, n);
        assert_eq!(rt.flag, RtFlag::Untouched);
        rt.update(n, n); // a target visit before any reference visit counts nothing
        assert_eq!(rt.flag, RtFlag::Untouched);
        assert_eq!(rt.restarts, 0);
        rt.update(1, n);
        assert_eq!(rt.flag, RtFlag::HitReference);
        assert_eq!(rt.round_trips, 0);
        rt.update(n, n); // restart: reference percolated to the target
        assert_eq!(rt.restarts, 1);
        assert_eq!(rt.flag, RtFlag::HitTarget);
        rt.update(n, n); // lingering at the target adds nothing
        assert_eq!(rt.restarts, 1);
        rt.update(1, n); // round trip: back at the reference
        assert_eq!(rt.round_trips, 1);
        assert!(rt.restarts >= rt.round_trips);
    }
}
