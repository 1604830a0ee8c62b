//! Worker-count-invariant tree reduction.
//!
//! Floating-point addition is not associative, so the result of a
//! distributed reduction normally depends on how many workers took part.
//! Here every value is a leaf of a binary tree whose shape is a pure
//! function of the leaf count alone; workers are assigned contiguous leaf
//! blocks and a worker combining two nodes it already owns simply
//! "communicates with itself". The combine order is therefore exactly the
//! same on 1 worker as on N, and the reduced bytes are identical.
//!
//! Topology: adjacent leaves pair up bottom-up, `(1,2), (3,4), ...`; an odd
//! node left over at any level is promoted unchanged. The root lands on the
//! worker owning leaf 1.

use thiserror::Error;

use crate::transport::{Rank, Transport, TransportError};

#[derive(Debug, Error)]
pub enum ReduceError {
    #[error("empty reduction")]
    Empty,
    #[error("worker {rank} holds {got} leaves but the assignment gives it {expected}")]
    LeafCountMismatch { rank: Rank, expected: usize, got: usize },
    #[error("assignment needs 1 <= workers <= leaves, got {workers} workers for {leaves} leaves")]
    BadAssignment { workers: u32, leaves: u32 },
    #[error("payload decode failed: {0}")]
    Decode(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Tag namespace for reduction traffic (see `swap::tag` for the swap
/// namespace: swap tags keep their top four bits zero for any feasible scan
/// count, so a nonzero kind nibble cannot collide with them).
const REDUCE_KIND: u64 = 3 << 60;

fn reduce_tag(epoch: u64, level: u32, node: u32) -> u64 {
    REDUCE_KIND | ((epoch & 0xFF_FFFF) << 36) | (((level as u64) & 0xFF) << 28) | (node as u64 & 0x0FFF_FFFF)
}

/// Values that can cross the wire inside a reduction or gather.
pub trait WirePayload: Sized {
    fn to_bytes(&self) -> Vec<u8>;
    fn from_bytes(bytes: &[u8]) -> Result<Self, String>;
}

impl WirePayload for f64 {
    fn to_bytes(&self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let arr: [u8; 8] = bytes.try_into().map_err(|_| "want 8 bytes for f64".to_string())?;
        Ok(f64::from_le_bytes(arr))
    }
}

impl WirePayload for u64 {
    fn to_bytes(&self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let arr: [u8; 8] = bytes.try_into().map_err(|_| "want 8 bytes for u64".to_string())?;
        Ok(u64::from_le_bytes(arr))
    }
}

/// Deterministic contiguous-block mapping of `n_leaves` tree leaves onto
/// `n_workers` ranks: worker `w` owns leaves `{i : floor((i-1)*M/N) = w-1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerAssignment {
    n_leaves: u32,
    n_workers: u32,
}

impl WorkerAssignment {
    pub fn new(n_leaves: u32, n_workers: u32) -> Result<Self, ReduceError> {
        if n_workers == 0 || n_leaves == 0 || n_workers > n_leaves {
            return Err(ReduceError::BadAssignment {
                workers: n_workers,
                leaves: n_leaves,
            });
        }
        Ok(WorkerAssignment { n_leaves, n_workers })
    }

    pub fn n_leaves(&self) -> u32 {
        self.n_leaves
    }

    pub fn n_workers(&self) -> u32 {
        self.n_workers
    }

    /// Rank owning the 1-based leaf `i`.
    pub fn owner(&self, leaf: u32) -> Rank {
        debug_assert!(leaf >= 1 && leaf <= self.n_leaves);
        ((leaf as u64 - 1) * self.n_workers as u64 / self.n_leaves as u64) as Rank + 1
    }

    /// The 1-based leaf indices owned by `rank`, as an inclusive-exclusive range.
    pub fn block(&self, rank: Rank) -> std::ops::Range<u32> {
        debug_assert!(rank >= 1 && rank <= self.n_workers);
        let n = self.n_leaves as u64;
        let m = self.n_workers as u64;
        let w = rank as u64 - 1;
        // first leaf i with floor((i-1)m/n) = w is ceil(w*n/m) + 1
        let start = (w * n).div_ceil(m) as u32 + 1;
        let end = ((w + 1) * n).div_ceil(m) as u32 + 1;
        start..end
    }
}

/// Fold `values` in the fixed tree order.
pub fn reduce_tree<T: Clone>(values: &[T], mut combine: impl FnMut(&T, &T) -> T) -> Result<T, ReduceError> {
    if values.is_empty() {
        return Err(ReduceError::Empty);
    }
    let mut level: Vec<T> = values.to_vec();
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|pair| match pair {
                [a, b] => combine(a, b),
                [a] => a.clone(),
                _ => unreachable!(),
            })
            .collect();
    }
    Ok(level.pop().unwrap())
}

/// Left-to-right fold within each of two halves, then one final combine.
///
/// Exists as a foil: on floating-point inputs it generally differs from
/// [`reduce_tree`] in the last bits, which is exactly the effect the fixed
/// tree is there to rule out.
pub fn left_fold<T: Clone>(values: &[T], mut combine: impl FnMut(&T, &T) -> T) -> Result<T, ReduceError> {
    if values.is_empty() {
        return Err(ReduceError::Empty);
    }
    if values.len() == 1 {
        return Ok(values[0].clone());
    }
    let mid = values.len().div_ceil(2);
    let fold = |chunk: &[T], combine: &mut dyn FnMut(&T, &T) -> T| {
        let mut acc = chunk[0].clone();
        for v in &chunk[1..] {
            acc = combine(&acc, v);
        }
        acc
    };
    let a = fold(&values[..mid], &mut combine);
    let b = fold(&values[mid..], &mut combine);
    Ok(combine(&a, &b))
}

fn level_sizes(n_leaves: u32) -> Vec<u32> {
    let mut sizes = vec![n_leaves];
    let mut n = n_leaves;
    while n > 1 {
        n = n.div_ceil(2);
        sizes.push(n);
    }
    sizes
}

/// Collective tree reduction across workers.
///
/// Each worker passes the values of its leaf block in leaf order. All
/// workers of the assignment must call this once per reduction epoch with
/// the same `epoch` value. Returns `Some` on the root (owner of leaf 1),
/// `None` elsewhere. The root's value is bit-identical to
/// `reduce_tree(all leaves)` for any worker count.
pub fn distributed_reduce<T: Clone + WirePayload>(
    local_leaves: &[T],
    assignment: &WorkerAssignment,
    transport: &mut dyn Transport,
    epoch: u64,
    mut combine: impl FnMut(&T, &T) -> T,
) -> Result<Option<T>, ReduceError> {
    let me = transport.rank();
    let block = assignment.block(me);
    if block.len() != local_leaves.len() {
        return Err(ReduceError::LeafCountMismatch {
            rank: me,
            expected: block.len(),
            got: local_leaves.len(),
        });
    }

    // node (level, k) covers leaves starting at 1-based k*2^level + 1, so the
    // node's owner is the owner of that first leaf
    let first_leaf = |level: u32, k: u32| -> u32 { (k << level) + 1 };

    let sizes = level_sizes(assignment.n_leaves());
    // my values for the current level, keyed by node index
    let mut current: std::collections::HashMap<u32, T> = block
        .clone()
        .zip(local_leaves.iter().cloned())
        .map(|(leaf, v)| (leaf - 1, v))
        .collect();

    for level in 1..sizes.len() as u32 {
        let prev_count = sizes[(level - 1) as usize];
        let count = sizes[level as usize];
        let mut next: std::collections::HashMap<u32, T> = std::collections::HashMap::new();

        // send pass: right children whose parent lives elsewhere
        for k in 0..count {
            let left = 2 * k;
            let right = 2 * k + 1;
            if right >= prev_count {
                continue;
            }
            let parent_owner = assignment.owner(first_leaf(level - 1, left));
            let right_owner = assignment.owner(first_leaf(level - 1, right));
            if right_owner == me && parent_owner != me {
                let value = current
                    .get(&right)
                    .expect("own the right child of a crossing edge");
                transport.send(parent_owner, reduce_tag(epoch, level, k), &value.to_bytes())?;
            }
        }
        // combine pass
        for k in 0..count {
            let left = 2 * k;
            let right = 2 * k + 1;
            let parent_owner = assignment.owner(first_leaf(level - 1, left));
            if parent_owner != me {
                continue;
            }
            let left_value = current.remove(&left).expect("own the left child");
            let value = if right >= prev_count {
                left_value // odd node promoted unchanged
            } else {
                let right_owner = assignment.owner(first_leaf(level - 1, right));
                let right_value = if right_owner == me {
                    current.remove(&right).expect("own the right child")
                } else {
                    let bytes = transport.receive(right_owner, reduce_tag(epoch, level, k))?;
                    T::from_bytes(&bytes).map_err(ReduceError::Decode)?
                };
                combine(&left_value, &right_value)
            };
            next.insert(k, value);
        }
        current = next;
    }

    if me == assignment.owner(1) {
        let root = current.remove(&0).expect("root owns node (top, 0)");
        Ok(Some(root))
    } else {
        Ok(None)
    }
}

/// Convenience: value of x used by the reduction-order regression tests.
#[cfg(test)]
fn ten_e() -> f64 {
    10.0 * std::f64::consts::E
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{LocalTransport, ThreadedTransport};

    fn eight_values() -> Vec<f64> {
        (1..=8).map(|k| k as f64 * ten_e()).collect()
    }

    #[test]
    fn tree_order_regression() {
        // ((1x+2x)+(3x+4x)) + ((5x+6x)+(7x+8x)) with x = 10e; the two orders
        // differ by exactly one ulp
        let values = eight_values();
        let tree = reduce_tree(&values, |a, b| a + b).unwrap();
        let fold = left_fold(&values, |a, b| a + b).unwrap();
        assert_eq!(tree, 978.5814582452562);
        assert_eq!(fold, 978.5814582452563);
        assert_eq!(fold.to_bits(), tree.to_bits() + 1);
    }

    #[test]
    fn single_value_identity() {
        assert_eq!(reduce_tree(&[3.5], |a, b| a + b).unwrap(), 3.5);
        assert_eq!(left_fold(&[3.5], |a, b| a + b).unwrap(), 3.5);
    }

    #[test]
    fn empty_input_errors() {
        let empty: [f64; 0] = [];
        assert!(matches!(reduce_tree(&empty, |a, b| a + b), Err(ReduceError::Empty)));
        assert!(matches!(left_fold(&empty, |a, b| a + b), Err(ReduceError::Empty)));
    }

    #[test]
    fn integer_payloads_agree_exactly() {
        // associativity holds exactly for integers, so all routes agree
        let values: Vec<u64> = (1..=13).collect();
        let tree = reduce_tree(&values, |a, b| a + b).unwrap();
        let fold = left_fold(&values, |a, b| a + b).unwrap();
        assert_eq!(tree, values.iter().sum::<u64>());
        assert_eq!(tree, fold);
    }

    #[test]
    fn assignment_blocks_partition_leaves() {
        for n in 1..40u32 {
            for m in 1..=n.min(9) {
                let a = WorkerAssignment::new(n, m).unwrap();
                let mut covered = Vec::new();
                for w in 1..=m {
                    let block = a.block(w);
                    for leaf in block.clone() {
                        assert_eq!(a.owner(leaf), w, "n={n} m={m} leaf={leaf}");
                        covered.push(leaf);
                    }
                    assert!(!block.is_empty(), "every worker owns at least one leaf");
                }
                assert_eq!(covered, (1..=n).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn assignment_rejects_more_workers_than_leaves() {
        assert!(WorkerAssignment::new(4, 5).is_err());
        assert!(WorkerAssignment::new(4, 0).is_err());
    }

    fn run_distributed(values: &[f64], m: u32, epoch: u64) -> f64 {
        let n = values.len() as u32;
        let assignment = WorkerAssignment::new(n, m).unwrap();
        if m == 1 {
            let mut t = LocalTransport::new();
            return distributed_reduce(values, &assignment, &mut t, epoch, |a, b| a + b)
                .unwrap()
                .unwrap();
        }
        let endpoints = ThreadedTransport::create(m);
        let mut handles = Vec::new();
        for mut t in endpoints {
            let assignment = assignment.clone();
            let block = assignment.block(t.rank());
            let local: Vec<f64> = block.map(|leaf| values[(leaf - 1) as usize]).collect();
            handles.push(std::thread::spawn(move || {
                distributed_reduce(&local, &assignment, &mut t, epoch, |a, b| a + b).unwrap()
            }));
        }
        let mut root_value = None;
        for h in handles {
            if let Some(v) = h.join().unwrap() {
                assert!(root_value.is_none(), "only the root returns a value");
                root_value = Some(v);
            }
        }
        root_value.unwrap()
    }

    #[test]
    fn distributed_matches_tree_for_all_worker_counts() {
        let values = eight_values();
        let expected = reduce_tree(&values, |a, b| a + b).unwrap();
        for m in [1u32, 2, 4, 8] {
            let got = run_distributed(&values, m, m as u64);
            assert_eq!(got.to_bits(), expected.to_bits(), "m={m}");
        }
    }

    #[test]
    fn distributed_single_leaf() {
        let got = run_distributed(&[42.0], 1, 0);
        assert_eq!(got, 42.0);
    }

    #[test]
    fn leaf_count_mismatch_is_protocol_error() {
        let assignment = WorkerAssignment::new(4, 1).unwrap();
        let mut t = LocalTransport::new();
        let result = distributed_reduce(&[1.0, 2.0], &assignment, &mut t, 0, |a, b| a + b);
        assert!(matches!(result, Err(ReduceError::LeafCountMismatch { .. })));
    }

    #[test]
    fn random_doubles_bit_invariant_across_workers() {
        // the central property at desk scale: N <= 64 random doubles reduce
        // to the same bits under every feasible worker count we exercise
        let mut rng = crate::rng::SplittableRng::new(2024);
        for n in [3u32, 7, 16, 33, 64] {
            let values: Vec<f64> = (0..n).map(|_| rng.next_unit_f64() * 1e6 - 5e5).collect();
            let expected = reduce_tree(&values, |a, b| a + b).unwrap();
            for m in [1u32, 2, 3, 5, 8] {
                if m > n {
                    continue;
                }
                let got = run_distributed(&values, m, (n * 100 + m) as u64);
                assert_eq!(got.to_bits(), expected.to_bits(), "n={n} m={m}");
            }
        }
    }
}
