//! Communication phase: non-reversible even/odd swaps of chain indices.
//!
//! Replicas never move between workers; accepted swaps exchange their
//! `chain` fields, so a swap costs O(1) bytes no matter how large the state
//! is. The swap schedule alternates deterministically: odd scans propose
//! the odd adjacent pairs `(1,2), (3,4), ...`, even scans the even pairs.
//!
//! To find the worker holding the partner chain, workers maintain a
//! `PermutedDistributedArray`: a directory whose entry `j` names the replica
//! currently holding chain `j`. Entry `j` is stored on the worker that owns
//! replica `j`, and exactly one worker writes each entry per scan. Because
//! replicas are pinned to workers, a replica id in the directory also
//! identifies a worker; when every worker hosts one replica the directory
//! entries coincide with worker ranks.
//!
//! Both swap partners compute the same acceptance probability from one
//! exchanged scalar each (the tempered log-density difference at their own
//! state) and the same keyed uniform, so no extra coordination message is
//! needed for the decision itself.

use std::collections::HashMap;

use thiserror::Error;

use crate::model::DensityError;
use crate::reduce::WorkerAssignment;
use crate::rng::{keyed_rng, SplittableRng};
use crate::transport::{Rank, Transport, TransportError};

pub type ChainId = u32;
/// Replica identity, 1-based; doubles as the "virtual machine" number of
/// the directory.
pub type ReplicaId = u32;

/// Chains and ranks must fit the 12-bit fields of [`tag`].
pub const MAX_CHAINS: u32 = (1 << 12) - 1;

#[derive(Debug, Error)]
pub enum SwapError {
    #[error("argument out of range: {0}")]
    Argument(String),
    #[error("swap protocol violation: {0}")]
    Protocol(String),
    #[error("kernel error: {0}")]
    Kernel(String),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Per-chain sampler unit: the state vector, the chain label it currently
/// carries, and its private random stream.
#[derive(Debug, Clone)]
pub struct Replica {
    pub index: ReplicaId,
    pub chain: ChainId,
    pub state: Vec<f64>,
    pub rng: SplittableRng,
}

/// Outcome of one proposed swap, recorded by the replica holding the
/// pair-leader chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwapDecision {
    pub t: u64,
    pub pair: (ChainId, ChainId),
    pub accepted: bool,
    pub alpha: f64,
}

/// Pair leaders proposed at scan `t`: odd scans propose odd `i < N`, even
/// scans even `i < N`; each leader pairs with `i + 1`.
pub fn swap_set(t: u64, n_chains: u32) -> Vec<ChainId> {
    let start: u32 = if t % 2 == 1 { 1 } else { 2 };
    (start..n_chains).step_by(2).collect()
}

/// Metropolis acceptance probability for exchanging the states of two
/// adjacent tempered distributions:
/// `alpha = min(1, exp(l_i(x_j) + l_j(x_i) - l_i(x_i) - l_j(x_j)))`.
pub fn swap_alpha(
    logp_i: &dyn crate::model::LogDensity,
    logp_j: &dyn crate::model::LogDensity,
    x_i: &[f64],
    x_j: &[f64],
) -> Result<f64, SwapError> {
    let cross = logp_i.log_density(x_j)? + logp_j.log_density(x_i)?;
    let own = logp_i.log_density(x_i)? + logp_j.log_density(x_j)?;
    let ratio = cross - own;
    if ratio.is_nan() {
        return Err(SwapError::Kernel("NaN in swap ratio".into()));
    }
    Ok(ratio.exp().min(1.0))
}

/// The acceptance uniform both partners derive independently.
pub fn shared_uniform(seed: u64, t: u64, pair_leader: ChainId) -> f64 {
    keyed_rng(seed, t, pair_leader as u64).next_unit_f64()
}

/// Unique tag for a send/receive at scan `t`: `((t mod 2^40) << 24) |
/// (chain << 12) | machine`. Injective within any window of 2^40 scans.
pub fn tag(t: u64, chain: ChainId, machine: Rank) -> Result<u64, SwapError> {
    if chain as u64 >= 1 << 12 {
        return Err(SwapError::Argument(format!("chain {chain} exceeds the 12-bit tag field")));
    }
    if machine as u64 >= 1 << 12 {
        return Err(SwapError::Argument(format!("machine {machine} exceeds the 12-bit tag field")));
    }
    Ok(((t % (1 << 40)) << 24) | ((chain as u64) << 12) | machine as u64)
}

// Internal tag namespaces. Swap tags from `tag()` keep their top nibble
// zero for all t < 2^36, so a nonzero kind nibble cannot collide with them
// (the engine enforces the scan bound).
const KIND_DIR_XCHG: u64 = 1 << 60;
const KIND_DIR_INFO: u64 = 2 << 60;
const KIND_DIR_SET: u64 = 4 << 60;

fn dir_tag(kind: u64, t: u64, chain: ChainId) -> u64 {
    kind | ((t & 0xFF_FFFF_FFFF) << 16) | chain as u64
}

/// Chain-index directory distributed over the workers.
///
/// Entry `j` (the replica holding chain `j`) lives on the worker owning
/// replica `j` under the block assignment. A duplicate write to an entry
/// within one scan is a protocol error.
#[derive(Debug, Clone)]
pub struct PermutedDistributedArray {
    assignment: WorkerAssignment,
    local: HashMap<ChainId, ReplicaId>,
    last_write: HashMap<ChainId, u64>,
}

impl PermutedDistributedArray {
    /// Identity directory: chain `j` starts on replica `j`.
    pub fn new(assignment: WorkerAssignment, my_rank: Rank) -> Self {
        let local = assignment
            .block(my_rank)
            .map(|j| (j, j))
            .collect();
        PermutedDistributedArray {
            assignment,
            local,
            last_write: HashMap::new(),
        }
    }

    /// Rebuild from a known chain-to-replica map (checkpoint resume).
    pub fn from_entries(
        assignment: WorkerAssignment,
        my_rank: Rank,
        holder_of_chain: &HashMap<ChainId, ReplicaId>,
    ) -> Self {
        let local = assignment
            .block(my_rank)
            .map(|j| (j, holder_of_chain[&j]))
            .collect();
        PermutedDistributedArray {
            assignment,
            local,
            last_write: HashMap::new(),
        }
    }

    pub fn n_chains(&self) -> u32 {
        self.assignment.n_leaves()
    }

    /// Worker storing directory entry `chain`.
    pub fn owner_of_entry(&self, chain: ChainId) -> Rank {
        self.assignment.owner(chain)
    }

    /// Worker hosting a replica (replicas never migrate).
    pub fn worker_of_replica(&self, replica: ReplicaId) -> Rank {
        self.assignment.owner(replica)
    }

    /// Read a locally stored entry.
    pub fn permuted_get(&self, chain: ChainId) -> Result<ReplicaId, SwapError> {
        if chain < 1 || chain > self.n_chains() {
            return Err(SwapError::Argument(format!("chain {chain} out of range")));
        }
        self.local.get(&chain).copied().ok_or_else(|| {
            SwapError::Protocol(format!(
                "entry {chain} is not stored on this worker (owner is rank {})",
                self.owner_of_entry(chain)
            ))
        })
    }

    /// Write a locally stored entry; `scan` guards against double writes
    /// within one communication step.
    pub fn permuted_set(&mut self, chain: ChainId, holder: ReplicaId, scan: u64) -> Result<(), SwapError> {
        if chain < 1 || chain > self.n_chains() {
            return Err(SwapError::Argument(format!("chain {chain} out of range")));
        }
        if !self.local.contains_key(&chain) {
            return Err(SwapError::Protocol(format!(
                "entry {chain} written on the wrong worker"
            )));
        }
        if self.last_write.get(&chain) == Some(&scan) {
            return Err(SwapError::Protocol(format!(
                "two writers for directory entry {chain} at scan {scan}"
            )));
        }
        self.local.insert(chain, holder);
        self.last_write.insert(chain, scan);
        Ok(())
    }

    /// Locally stored `(chain, holder)` pairs in chain order.
    pub fn local_entries(&self) -> Vec<(ChainId, ReplicaId)> {
        let mut entries: Vec<_> = self.local.iter().map(|(&c, &r)| (c, r)).collect();
        entries.sort_unstable();
        entries
    }
}

struct HolderCtx {
    local_idx: usize,
    own: ChainId,
    partner: ChainId,
    leader: ChainId,
    partner_replica: ReplicaId,
    partner_worker: Rank,
    delta_self: f64,
    alpha: f64,
    accepted: bool,
}

/// Run the communication phase of scan `t` for all replicas of this worker.
///
/// `delta(local_idx, replica, partner_chain)` must return the tempered
/// log-density difference `l_partner(x) - l_own(x)` at the replica's state.
/// `on_decision` fires once per proposed pair, on the replica holding the
/// pair-leader chain. `force` overrides every accept decision (testing).
#[allow(clippy::too_many_arguments)]
pub fn communicate(
    t: u64,
    replicas: &mut [Replica],
    dist: &mut PermutedDistributedArray,
    transport: &mut dyn Transport,
    seed: u64,
    force: Option<bool>,
    mut delta: impl FnMut(usize, &Replica, ChainId) -> Result<f64, DensityError>,
    mut on_decision: impl FnMut(usize, &SwapDecision),
) -> Result<(), SwapError> {
    let me = transport.rank();
    let n_chains = dist.n_chains();
    let local_by_chain: HashMap<ChainId, usize> = replicas
        .iter()
        .enumerate()
        .map(|(i, r)| (r.chain, i))
        .collect();

    // Pairs are processed in ascending leader order on every worker; within
    // a pair each bidirectional step sends before it receives. Both
    // together rule out circular waits across workers.
    for leader in swap_set(t, n_chains) {
        let chain_lo = leader;
        let chain_hi = leader + 1;
        let owner_lo = dist.owner_of_entry(chain_lo);
        let owner_hi = dist.owner_of_entry(chain_hi);

        // owner step: exchange the two entries between the entry owners
        if owner_lo == me {
            let entry = dist.permuted_get(chain_lo)?;
            transport.send(owner_hi, dir_tag(KIND_DIR_XCHG, t, chain_lo), &entry.to_le_bytes())?;
        }
        if owner_hi == me {
            let entry = dist.permuted_get(chain_hi)?;
            transport.send(owner_lo, dir_tag(KIND_DIR_XCHG, t, chain_hi), &entry.to_le_bytes())?;
        }
        // owner step: tell each holder where its partner lives
        if owner_lo == me {
            let holder = dist.permuted_get(chain_lo)?;
            let partner_entry = decode_u32(&transport.receive(owner_hi, dir_tag(KIND_DIR_XCHG, t, chain_hi))?)?;
            transport.send(
                dist.worker_of_replica(holder),
                dir_tag(KIND_DIR_INFO, t, chain_lo),
                &partner_entry.to_le_bytes(),
            )?;
        }
        if owner_hi == me {
            let holder = dist.permuted_get(chain_hi)?;
            let partner_entry = decode_u32(&transport.receive(owner_lo, dir_tag(KIND_DIR_XCHG, t, chain_lo))?)?;
            transport.send(
                dist.worker_of_replica(holder),
                dir_tag(KIND_DIR_INFO, t, chain_hi),
                &partner_entry.to_le_bytes(),
            )?;
        }

        // holder step A: learn the partner's location, send the log-ratio share
        let mut holders: Vec<HolderCtx> = Vec::with_capacity(2);
        for own in [chain_lo, chain_hi] {
            let Some(&local_idx) = local_by_chain.get(&own) else {
                continue;
            };
            let partner = if own == chain_lo { chain_hi } else { chain_lo };
            let info = transport.receive(dist.owner_of_entry(own), dir_tag(KIND_DIR_INFO, t, own))?;
            let partner_replica = decode_u32(&info)?;
            let partner_worker = dist.worker_of_replica(partner_replica);
            let delta_self = delta(local_idx, &replicas[local_idx], partner)?;
            transport.send(partner_worker, tag(t, own, me)?, &delta_self.to_le_bytes())?;
            holders.push(HolderCtx {
                local_idx,
                own,
                partner,
                leader,
                partner_replica,
                partner_worker,
                delta_self,
                alpha: 0.0,
                accepted: false,
            });
        }

        // holder step B: combine shares, decide, start the index exchange
        for ctx in &mut holders {
            let bytes = transport.receive(ctx.partner_worker, tag(t, ctx.partner, ctx.partner_worker)?)?;
            let delta_partner = decode_f64(&bytes)?;
            // IEEE addition is commutative, so both partners compute
            // identical bits regardless of which share is which
            let ratio = ctx.delta_self + delta_partner;
            if ratio.is_nan() {
                return Err(SwapError::Kernel(format!(
                    "NaN swap ratio for pair ({}, {}) at scan {t}",
                    ctx.leader,
                    ctx.leader + 1
                )));
            }
            ctx.alpha = ratio.exp().min(1.0);
            let uniform = shared_uniform(seed, t, ctx.leader);
            ctx.accepted = force.unwrap_or(uniform < ctx.alpha);
            if ctx.own == ctx.leader {
                on_decision(
                    ctx.local_idx,
                    &SwapDecision {
                        t,
                        pair: (ctx.leader, ctx.leader + 1),
                        accepted: ctx.accepted,
                        alpha: ctx.alpha,
                    },
                );
            }
            if ctx.accepted {
                // the tag names the receiver's chain so it cannot clash
                // with this sender's log-ratio message
                transport.send(ctx.partner_worker, tag(t, ctx.partner, me)?, &ctx.own.to_le_bytes())?;
            }
        }

        // holder step C: finish the index exchange, update the directory
        for ctx in &holders {
            if ctx.accepted {
                let bytes = transport.receive(ctx.partner_worker, tag(t, ctx.own, ctx.partner_worker)?)?;
                let received = decode_u32(&bytes)?;
                if received != ctx.partner {
                    return Err(SwapError::Protocol(format!(
                        "expected chain {} from the partner, got {received}",
                        ctx.partner
                    )));
                }
                replicas[ctx.local_idx].chain = received;
            }
            // the pre-swap holder reports the new holder of its old chain,
            // so the entry owner always knows whom to listen to
            let new_holder: ReplicaId = if ctx.accepted {
                ctx.partner_replica
            } else {
                replicas[ctx.local_idx].index
            };
            transport.send(
                dist.owner_of_entry(ctx.own),
                dir_tag(KIND_DIR_SET, t, ctx.own),
                &new_holder.to_le_bytes(),
            )?;
        }

        // owner step: apply the directory writes
        for chain in [chain_lo, chain_hi] {
            if dist.owner_of_entry(chain) != me {
                continue;
            }
            let old_holder = dist.permuted_get(chain)?;
            let from = dist.worker_of_replica(old_holder);
            let bytes = transport.receive(from, dir_tag(KIND_DIR_SET, t, chain))?;
            let new_holder = decode_u32(&bytes)?;
            dist.permuted_set(chain, new_holder, t)?;
        }
    }
    Ok(())
}

fn decode_u32(bytes: &[u8]) -> Result<u32, SwapError> {
    let arr: [u8; 4] = bytes
        .try_into()
        .map_err(|_| SwapError::Protocol(format!("expected 4-byte payload, got {}", bytes.len())))?;
    Ok(u32::from_le_bytes(arr))
}

fn decode_f64(bytes: &[u8]) -> Result<f64, SwapError> {
    let arr: [u8; 8] = bytes
        .try_into()
        .map_err(|_| SwapError::Protocol(format!("expected 8-byte payload, got {}", bytes.len())))?;
    Ok(f64::from_le_bytes(arr))
}
