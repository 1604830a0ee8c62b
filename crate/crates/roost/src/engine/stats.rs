//! Constant-memory accumulators pooled across replicas.
//!
//! Every accumulator here is merged through the fixed reduction tree, so
//! the pooled values are bit-identical for any worker count. Merges are
//! deterministic functions of their two operands and are applied in tree
//! order (left operand first).

use crate::reduce::WirePayload;

/// Streaming mean/variance/extrema of a vector-valued sequence.
///
/// `merge` pools two accumulators with the weighted combine
/// `mean = mean_a + (n_b / (n_a + n_b)) * (mean_b - mean_a)`, the only
/// pooling path used for cross-replica statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineStats {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    min: Vec<f64>,
    max: Vec<f64>,
}

impl OnlineStats {
    pub fn new(dim: usize) -> Self {
        OnlineStats {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            min: vec![f64::INFINITY; dim],
            max: vec![f64::NEG_INFINITY; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim());
        self.count += 1;
        let n = self.count as f64;
        for (i, &v) in x.iter().enumerate() {
            let delta = v - self.mean[i];
            self.mean[i] += delta / n;
            self.m2[i] += delta * (v - self.mean[i]);
            self.min[i] = self.min[i].min(v);
            self.max[i] = self.max[i].max(v);
        }
    }

    pub fn merge(a: &OnlineStats, b: &OnlineStats) -> OnlineStats {
        debug_assert_eq!(a.dim(), b.dim());
        // exactness on the empty side keeps pooled values byte-stable
        if a.count == 0 {
            return b.clone();
        }
        if b.count == 0 {
            return a.clone();
        }
        let count = a.count + b.count;
        let n_a = a.count as f64;
        let n_b = b.count as f64;
        let n = count as f64;
        let dim = a.dim();
        let mut out = OnlineStats::new(dim);
        out.count = count;
        for i in 0..dim {
            let delta = b.mean[i] - a.mean[i];
            out.mean[i] = a.mean[i] + delta * (n_b / n);
            out.m2[i] = a.m2[i] + b.m2[i] + delta * delta * (n_a * n_b / n);
            out.min[i] = a.min[i].min(b.min[i]);
            out.max[i] = a.max[i].max(b.max[i]);
        }
        out
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Sample variance per coordinate; needs at least two observations.
    pub fn variance(&self) -> Option<Vec<f64>> {
        if self.count < 2 {
            return None;
        }
        let denom = (self.count - 1) as f64;
        Some(self.m2.iter().map(|&m| m / denom).collect())
    }

    pub fn min(&self) -> &[f64] {
        &self.min
    }

    pub fn max(&self) -> &[f64] {
        &self.max
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.count.to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for vec in [&self.mean, &self.m2, &self.min, &self.max] {
            for v in vec.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    fn decode_from(cursor: &mut Cursor<'_>) -> Result<Self, String> {
        let count = cursor.u64()?;
        let dim = cursor.u32()? as usize;
        let mut vecs = Vec::with_capacity(4);
        for _ in 0..4 {
            vecs.push(cursor.f64_vec(dim)?);
        }
        let max = vecs.pop().unwrap();
        let min = vecs.pop().unwrap();
        let m2 = vecs.pop().unwrap();
        let mean = vecs.pop().unwrap();
        Ok(OnlineStats {
            count,
            mean,
            m2,
            min,
            max,
        })
    }
}

/// Streaming log-sum-exp of pushed log values.
///
/// Maintains `(max, sum of exp(v - max), count)`; pushing `-inf` counts the
/// term but contributes no mass, so an all-`-inf` accumulator evaluates to
/// `-inf` rather than NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct LogSumExp {
    max: f64,
    sum: f64,
    count: u64,
}

impl Default for LogSumExp {
    fn default() -> Self {
        Self::new()
    }
}

impl LogSumExp {
    pub fn new() -> Self {
        LogSumExp {
            max: f64::NEG_INFINITY,
            sum: 0.0,
            count: 0,
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push(&mut self, v: f64) {
        debug_assert!(!v.is_nan());
        self.count += 1;
        if v == f64::NEG_INFINITY {
            return;
        }
        if self.max == f64::NEG_INFINITY {
            self.max = v;
            self.sum = 1.0;
        } else if v <= self.max {
            self.sum += (v - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - v).exp() + 1.0;
            self.max = v;
        }
    }

    pub fn merge(a: &LogSumExp, b: &LogSumExp) -> LogSumExp {
        let count = a.count + b.count;
        let (max, sum) = if a.max == f64::NEG_INFINITY {
            (b.max, b.sum)
        } else if b.max == f64::NEG_INFINITY {
            (a.max, a.sum)
        } else if b.max <= a.max {
            (a.max, a.sum + b.sum * (b.max - a.max).exp())
        } else {
            (b.max, a.sum * (a.max - b.max).exp() + b.sum)
        };
        LogSumExp { max, sum, count }
    }

    /// `log(sum of exp(v_i))`; `None` when nothing was pushed.
    pub fn value(&self) -> Option<f64> {
        if self.count == 0 {
            None
        } else if self.max == f64::NEG_INFINITY {
            Some(f64::NEG_INFINITY)
        } else {
            Some(self.max + self.sum.ln())
        }
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.max.to_le_bytes());
        out.extend_from_slice(&self.sum.to_le_bytes());
        out.extend_from_slice(&self.count.to_le_bytes());
    }

    fn decode_from(cursor: &mut Cursor<'_>) -> Result<Self, String> {
        Ok(LogSumExp {
            max: cursor.f64()?,
            sum: cursor.f64()?,
            count: cursor.u64()?,
        })
    }
}

/// One replica's contribution to a round: swap statistics per adjacent
/// pair, stepping-stone accumulators, target-chain moments, and cumulative
/// round-trip counters. Pooled across all N replicas through the tree.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundStats {
    pub rejection_sum: Vec<f64>,
    pub proposals: Vec<u64>,
    pub alpha_sum: f64,
    pub alpha_count: u64,
    pub alpha_min: f64,
    pub stepping: Vec<LogSumExp>,
    pub online: OnlineStats,
    pub restarts: u64,
    pub round_trips: u64,
}

impl RoundStats {
    pub fn new(n_chains: u32, dim: usize) -> Self {
        let pairs = (n_chains - 1) as usize;
        RoundStats {
            rejection_sum: vec![0.0; pairs],
            proposals: vec![0; pairs],
            alpha_sum: 0.0,
            alpha_count: 0,
            alpha_min: f64::INFINITY,
            stepping: vec![LogSumExp::new(); pairs],
            online: OnlineStats::new(dim),
            restarts: 0,
            round_trips: 0,
        }
    }

    pub fn merge(a: &RoundStats, b: &RoundStats) -> RoundStats {
        debug_assert_eq!(a.rejection_sum.len(), b.rejection_sum.len());
        RoundStats {
            rejection_sum: a
                .rejection_sum
                .iter()
                .zip(&b.rejection_sum)
                .map(|(x, y)| x + y)
                .collect(),
            proposals: a.proposals.iter().zip(&b.proposals).map(|(x, y)| x + y).collect(),
            alpha_sum: a.alpha_sum + b.alpha_sum,
            alpha_count: a.alpha_count + b.alpha_count,
            alpha_min: a.alpha_min.min(b.alpha_min),
            stepping: a
                .stepping
                .iter()
                .zip(&b.stepping)
                .map(|(x, y)| LogSumExp::merge(x, y))
                .collect(),
            online: OnlineStats::merge(&a.online, &b.online),
            restarts: a.restarts + b.restarts,
            round_trips: a.round_trips + b.round_trips,
        }
    }
}

impl WirePayload for RoundStats {
    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.rejection_sum.len() as u32).to_le_bytes());
        for v in &self.rejection_sum {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.proposals {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.alpha_sum.to_le_bytes());
        out.extend_from_slice(&self.alpha_count.to_le_bytes());
        out.extend_from_slice(&self.alpha_min.to_le_bytes());
        for lse in &self.stepping {
            lse.encode_into(&mut out);
        }
        self.online.encode_into(&mut out);
        out.extend_from_slice(&self.restarts.to_le_bytes());
        out.extend_from_slice(&self.round_trips.to_le_bytes());
        out
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let mut cursor = Cursor { bytes, pos: 0 };
        let pairs = cursor.u32()? as usize;
        let rejection_sum = cursor.f64_vec(pairs)?;
        let mut proposals = Vec::with_capacity(pairs);
        for _ in 0..pairs {
            proposals.push(cursor.u64()?);
        }
        let alpha_sum = cursor.f64()?;
        let alpha_count = cursor.u64()?;
        let alpha_min = cursor.f64()?;
        let mut stepping = Vec::with_capacity(pairs);
        for _ in 0..pairs {
            stepping.push(LogSumExp::decode_from(&mut cursor)?);
        }
        let online = OnlineStats::decode_from(&mut cursor)?;
        let restarts = cursor.u64()?;
        let round_trips = cursor.u64()?;
        cursor.finish()?;
        Ok(RoundStats {
            rejection_sum,
            proposals,
            alpha_sum,
            alpha_count,
            alpha_min,
            stepping,
            online,
            restarts,
            round_trips,
        })
    }
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl Cursor<'_> {
    pub fn take(&mut self, n: usize) -> Result<&[u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!(
                "payload truncated: wanted {n} bytes at offset {}",
                self.pos
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>, String> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }

    pub fn finish(&self) -> Result<(), String> {
        if self.pos != self.bytes.len() {
            return Err(format!(
                "{} trailing bytes in payload",
                self.bytes.len() - self.pos
            ));
        }
        Ok(())
    }
}
