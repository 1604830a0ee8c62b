//! Local exploration: within-chain MCMC kernels.
//!
//! The default kernel is a coordinate-wise slice sampler with the doubling
//! bracket procedure — tuning-free, which keeps the recorded output free of
//! adaptation-order effects. A random-walk Metropolis kernel with a fixed
//! step is available as a cheap alternative. Both consume randomness only
//! from the stream passed in; one replica's exploration never touches
//! another replica's stream.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DensityError, LogDensity};
use crate::rng::SplittableRng;

/// Abort the shrinkage loop after this many steps; only a pathological
/// target (e.g. one that lies about its own support) can get that far.
const MAX_SHRINK_STEPS: usize = 1000;

#[derive(Debug, Error)]
pub enum ExploreError {
    #[error("exploration started outside the support")]
    OutsideSupport,
    #[error("slice kernel found no acceptable point after {0} shrink steps")]
    KernelFailure(usize),
    #[error(transparent)]
    Density(#[from] DensityError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Slice,
    Rwm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorerConfig {
    pub kind: KernelKind,
    /// Initial slice bracket width.
    pub slice_width: f64,
    /// Doubling budget for the bracket.
    pub slice_max_doublings: u32,
    /// Fixed proposal scale of the random-walk kernel (no within-run adaptation).
    pub rwm_step: f64,
    /// Kernel sweeps per PT scan.
    pub passes_per_scan: u32,
}

impl Default for ExplorerConfig {
    fn default() -> Self {
        ExplorerConfig {
            kind: KernelKind::Slice,
            slice_width: 1.0,
            slice_max_doublings: 10,
            rwm_step: 0.5,
            passes_per_scan: 3,
        }
    }
}

impl ExplorerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !self.slice_width.is_finite() || self.slice_width <= 0.0 {
            return Err(format!("slice width must be positive, got {}", self.slice_width));
        }
        if !self.rwm_step.is_finite() || self.rwm_step <= 0.0 {
            return Err(format!("rwm step must be positive, got {}", self.rwm_step));
        }
        if self.passes_per_scan < 1 {
            return Err("passes per scan must be at least 1".into());
        }
        Ok(())
    }
}

/// Run one scan's worth of local exploration in place.
///
/// The kernel leaves the distribution of `logp` invariant and never exits
/// its support. Requires `logp(state) > -inf` on entry.
pub fn explore(
    state: &mut [f64],
    logp: &dyn LogDensity,
    rng: &mut SplittableRng,
    cfg: &ExplorerConfig,
) -> Result<(), ExploreError> {
    let mut current = logp.log_density(state)?;
    if current == f64::NEG_INFINITY {
        return Err(ExploreError::OutsideSupport);
    }
    for _ in 0..cfg.passes_per_scan {
        match cfg.kind {
            KernelKind::Slice => {
                for axis in 0..state.len() {
                    current = slice_sample_coordinate(state, axis, logp, rng, cfg, current)?;
                }
            }
            KernelKind::Rwm => {
                current = rwm_pass(state, logp, rng, cfg.rwm_step, current)?;
            }
        }
    }
    Ok(())
}

/// One coordinate update of the slice sampler (doubling then shrinkage).
///
/// `current` is `logp(state)`; returns the log density at the accepted
/// point so sweeps can reuse it.
pub fn slice_sample_coordinate(
    state: &mut [f64],
    axis: usize,
    logp: &dyn LogDensity,
    rng: &mut SplittableRng,
    cfg: &ExplorerConfig,
    current: f64,
) -> Result<f64, ExploreError> {
    if current == f64::NEG_INFINITY {
        return Err(ExploreError::OutsideSupport);
    }
    let x0 = state[axis];
    let w = cfg.slice_width;
    let eval = |state: &mut [f64], v: f64| -> Result<f64, ExploreError> {
        state[axis] = v;
        let l = logp.log_density(state)?;
        Ok(l)
    };

    // level: log of a uniform fraction of the current density
    let level = current + rng.next_unit_f64().ln();

    // doubling: expand until both ends are below the level or the budget runs out
    let mut left = x0 - w * rng.next_unit_f64();
    let mut right = left + w;
    let mut f_left = eval(state, left)?;
    let mut f_right = eval(state, right)?;
    let mut budget = cfg.slice_max_doublings;
    while budget > 0 && (level < f_left || level < f_right) {
        let width = right - left;
        if rng.next_unit_f64() < 0.5 {
            left -= width;
            f_left = eval(state, left)?;
        } else {
            right += width;
            f_right = eval(state, right)?;
        }
        budget -= 1;
    }

    // shrinkage with the doubling acceptance check
    for _ in 0..MAX_SHRINK_STEPS {
        let x1 = left + rng.next_unit_f64() * (right - left);
        let f1 = eval(state, x1)?;
        if level < f1 && accept_doubled(state, axis, x0, x1, level, left, right, w, logp)? {
            state[axis] = x1;
            return Ok(f1);
        }
        if x1 < x0 {
            left = x1;
        } else {
            right = x1;
        }
    }
    state[axis] = x0;
    Err(ExploreError::KernelFailure(MAX_SHRINK_STEPS))
}

/// Detailed-balance check for intervals produced by doubling: retrace the
/// doubling sequence and reject points from which the reverse expansion
/// could not have reproduced the bracket.
#[allow(clippy::too_many_arguments)]
fn accept_doubled(
    state: &mut [f64],
    axis: usize,
    x0: f64,
    x1: f64,
    level: f64,
    left: f64,
    right: f64,
    w: f64,
    logp: &dyn LogDensity,
) -> Result<bool, ExploreError> {
    let eval = |state: &mut [f64], v: f64| -> Result<f64, ExploreError> {
        state[axis] = v;
        Ok(logp.log_density(state)?)
    };
    let mut lo = left;
    let mut hi = right;
    let mut differ = false;
    while hi - lo > 1.1 * w {
        let mid = 0.5 * (lo + hi);
        if (x0 < mid && x1 >= mid) || (x0 >= mid && x1 < mid) {
            differ = true;
        }
        if x1 < mid {
            hi = mid;
        } else {
            lo = mid;
        }
        if differ {
            let f_lo = eval(state, lo)?;
            let f_hi = eval(state, hi)?;
            if level >= f_lo && level >= f_hi {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// One random-walk Metropolis step with isotropic Gaussian proposals.
fn rwm_pass(
    state: &mut [f64],
    logp: &dyn LogDensity,
    rng: &mut SplittableRng,
    step: f64,
    current: f64,
) -> Result<f64, ExploreError> {
    let proposal: Vec<f64> = state
        .iter()
        .map(|&v| v + step * standard_normal(rng))
        .collect();
    let proposed = logp.log_density(&proposal)?;
    // exp(-inf) = 0, so proposals outside the support can never be accepted
    if rng.next_unit_f64() < (proposed - current).exp() {
        state.copy_from_slice(&proposal);
        Ok(proposed)
    } else {
        Ok(current)
    }
}

/// Box-Muller draw; two uniforms per variate keeps the consumption pattern
/// simple and platform-independent.
fn standard_normal(rng: &mut SplittableRng) -> f64 {
    let u1 = rng.next_unit_f64();
    let u2 = rng.next_unit_f64();
    (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
