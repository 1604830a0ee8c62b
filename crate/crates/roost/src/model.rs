//! Target and reference log-potentials and the annealing path between them.
//!
//! A [`LogDensity`] evaluates an unnormalized log density, returning `-inf`
//! outside the support (never an error, never NaN). The annealing path
//! tempers between a reference at `beta = 0` and the target at `beta = 1`
//! using the log-linear form; foreign-process targets speak a line-oriented
//! stdin/stdout protocol and receive `beta` explicitly.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

pub const BRIDGE_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum DensityError {
    #[error("density evaluation produced NaN")]
    NaN,
    #[error("bridge evaluation failed: {0}")]
    Bridge(String),
    #[error("bridge response timed out after {0:?}")]
    Timeout(Duration),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("bridge setup failed: {0}")]
    BridgeSetup(String),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// An unnormalized log density over a fixed-dimension state space.
///
/// Implementations are pure: the same input always yields the same output.
/// Out-of-support points map to `-inf`. Evaluators are callable from
/// concurrent workers; the bridge serializes access internally.
pub trait LogDensity: Send + Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &[f64]) -> Result<f64, DensityError>;
}

// ---------------------------------------------------------------------------
// built-in densities
// ---------------------------------------------------------------------------

/// Uniform prior on the unit hypercube: log density 0 inside, -inf outside.
pub struct UnitCube {
    dim: usize,
}

impl LogDensity for UnitCube {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_density(&self, x: &[f64]) -> Result<f64, DensityError> {
        debug_assert_eq!(x.len(), self.dim);
        if x.iter().all(|&v| (0.0..=1.0).contains(&v)) {
            Ok(0.0)
        } else {
            Ok(f64::NEG_INFINITY)
        }
    }
}

/// Binomial likelihood with probability of success `p1 * p2`:
/// `log C(n,y) + y log(p1 p2) + (n-y) log(1 - p1 p2)` on the unit square.
pub struct CoinflipDensity {
    n: u64,
    y: u64,
    log_choose: f64,
}

impl LogDensity for CoinflipDensity {
    fn dim(&self) -> usize {
        2
    }
    fn log_density(&self, x: &[f64]) -> Result<f64, DensityError> {
        debug_assert_eq!(x.len(), 2);
        let (p1, p2) = (x[0], x[1]);
        if !(0.0..=1.0).contains(&p1) || !(0.0..=1.0).contains(&p2) {
            return Ok(f64::NEG_INFINITY);
        }
        let p = p1 * p2;
        let mut v = self.log_choose;
        // skip zero-count terms so 0 * ln(0) cannot produce NaN
        if self.y > 0 {
            v += self.y as f64 * p.ln();
        }
        if self.n - self.y > 0 {
            v += (self.n - self.y) as f64 * (1.0 - p).ln();
        }
        debug_assert!(!v.is_nan());
        Ok(v)
    }
}

/// Isotropic centered Gaussian, either unnormalized (`-|x|^2 / (2 sd^2)`)
/// or carrying its log normalization constant.
pub struct IsoGaussian {
    dim: usize,
    sd: f64,
    log_norm: f64,
}

impl IsoGaussian {
    pub fn unnormalized(dim: usize, sd: f64) -> Self {
        IsoGaussian {
            dim,
            sd,
            log_norm: 0.0,
        }
    }
    pub fn normalized(dim: usize, sd: f64) -> Self {
        let log_norm = -0.5 * dim as f64 * (2.0 * std::f64::consts::PI * sd * sd).ln();
        IsoGaussian { dim, sd, log_norm }
    }
}

impl LogDensity for IsoGaussian {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_density(&self, x: &[f64]) -> Result<f64, DensityError> {
        debug_assert_eq!(x.len(), self.dim);
        let ss: f64 = x.iter().map(|v| v * v).sum();
        Ok(self.log_norm - 0.5 * ss / (self.sd * self.sd))
    }
}

/// Equal-weight two-component Gaussian mixture at `(-c,-c)` and `(c,c)`.
pub struct BimodalDensity {
    separation: f64,
    sd: f64,
    log_comp_norm: f64,
}

impl LogDensity for BimodalDensity {
    fn dim(&self) -> usize {
        2
    }
    fn log_density(&self, x: &[f64]) -> Result<f64, DensityError> {
        debug_assert_eq!(x.len(), 2);
        let c = self.separation;
        let var2 = 2.0 * self.sd * self.sd;
        let d_neg = (x[0] + c) * (x[0] + c) + (x[1] + c) * (x[1] + c);
        let d_pos = (x[0] - c) * (x[0] - c) + (x[1] - c) * (x[1] - c);
        let l1 = self.log_comp_norm - d_neg / var2;
        let l2 = self.log_comp_norm - d_pos / var2;
        let m = l1.max(l2);
        Ok(0.5f64.ln() + m + ((l1 - m).exp() + (l2 - m).exp()).ln())
    }
}

// ---------------------------------------------------------------------------
// target constructors
// ---------------------------------------------------------------------------

pub type DensityPair = (Box<dyn LogDensity>, Box<dyn LogDensity>);

/// Coinflip posterior: binomial likelihood over `p1 * p2` with a uniform
/// prior on the unit square as reference.
pub fn coinflip_target(n: u64, y: u64) -> Result<DensityPair, ModelError> {
    if y > n {
        return Err(ModelError::InvalidArgument(format!(
            "coinflip needs y <= n, got y={y} n={n}"
        )));
    }
    // C(n,0) = C(n,n) = 1 exactly; the log-gamma route would leave rounding dust
    let log_choose = if y == 0 || y == n {
        0.0
    } else {
        ln_gamma(n as f64 + 1.0) - ln_gamma(y as f64 + 1.0) - ln_gamma((n - y) as f64 + 1.0)
    };
    let target = Box::new(CoinflipDensity { n, y, log_choose });
    let reference = Box::new(UnitCube { dim: 2 });
    Ok((target, reference))
}

/// Two-mode Gaussian mixture target with a wide zero-mean Gaussian
/// reference (sd `max(3c, 3sd)`) that covers both modes.
pub fn bimodal_target(separation: f64, sd: f64) -> Result<DensityPair, ModelError> {
    if separation <= 0.0 || sd <= 0.0 {
        return Err(ModelError::InvalidArgument(format!(
            "bimodal needs positive parameters, got separation={separation} sd={sd}"
        )));
    }
    let log_comp_norm = -(2.0 * std::f64::consts::PI * sd * sd).ln();
    let target = Box::new(BimodalDensity {
        separation,
        sd,
        log_comp_norm,
    });
    let reference = Box::new(IsoGaussian::normalized(2, (3.0 * separation).max(3.0 * sd)));
    Ok((target, reference))
}

/// Standard-normal target (unnormalized, `gamma(0) = 1`) against an
/// isotropic Gaussian reference of sd `s`, also unnormalized. The exact log
/// normalization ratio is `log(Z1/Z0) = -d log s`: the target integrates to
/// `(2 pi)^(d/2)` and the reference to `(2 pi s^2)^(d/2)`, so the `2 pi`
/// factors cancel.
pub fn mvn_target(dim: usize, ref_sd: f64) -> Result<DensityPair, ModelError> {
    if dim < 1 {
        return Err(ModelError::InvalidArgument("mvn needs dim >= 1".into()));
    }
    if ref_sd <= 0.0 {
        return Err(ModelError::InvalidArgument(format!(
            "mvn needs a positive reference sd, got {ref_sd}"
        )));
    }
    let target = Box::new(IsoGaussian::unnormalized(dim, 1.0));
    let reference = Box::new(IsoGaussian::unnormalized(dim, ref_sd));
    Ok((target, reference))
}

/// Analytic `log(Z1/Z0)` for [`mvn_target`].
pub fn mvn_log_z_ratio(dim: usize, ref_sd: f64) -> f64 {
    -(dim as f64) * ref_sd.ln()
}

// ---------------------------------------------------------------------------
// schedule
// ---------------------------------------------------------------------------

/// Ordered annealing parameters `beta_1 = 0 < ... < beta_N = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    betas: Vec<f64>,
}

impl Schedule {
    pub fn new(betas: Vec<f64>) -> Result<Self, ModelError> {
        if betas.len() < 2 {
            return Err(ModelError::InvalidArgument(
                "schedule needs at least two chains".into(),
            ));
        }
        if betas[0] != 0.0 || *betas.last().unwrap() != 1.0 {
            return Err(ModelError::InvalidArgument(
                "schedule endpoints must be 0 and 1".into(),
            ));
        }
        if betas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ModelError::InvalidArgument(
                "schedule must be strictly increasing".into(),
            ));
        }
        Ok(Schedule { betas })
    }

    /// Equally spaced betas over `[0, 1]`.
    pub fn equal_spacing(n_chains: u32) -> Result<Self, ModelError> {
        if n_chains < 2 {
            return Err(ModelError::InvalidArgument(
                "schedule needs at least two chains".into(),
            ));
        }
        let n = n_chains as usize;
        let mut betas: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        betas[0] = 0.0;
        betas[n - 1] = 1.0;
        Schedule::new(betas)
    }

    pub fn n_chains(&self) -> u32 {
        self.betas.len() as u32
    }

    /// Beta of the 1-based chain index.
    pub fn beta(&self, chain: u32) -> f64 {
        self.betas[(chain - 1) as usize]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }
}

// ---------------------------------------------------------------------------
// annealing path
// ---------------------------------------------------------------------------

/// Log-linear interpolation with explicit `-inf` handling.
///
/// Computed as `l_ref + beta * (l_target - l_ref)` rather than the weighted
/// two-term form: this returns the endpoint values bit-exactly at
/// `beta = 0` and `beta = 1`, and returns `l` exactly when both ends agree,
/// so a path whose reference equals its target has identically zero
/// tempering increments.
fn mix_log_linear(beta: f64, l_ref: f64, l_target: f64) -> f64 {
    if l_ref == f64::NEG_INFINITY {
        return if beta < 1.0 { f64::NEG_INFINITY } else { l_target };
    }
    if l_target == f64::NEG_INFINITY {
        return if beta > 0.0 { f64::NEG_INFINITY } else { l_ref };
    }
    l_ref + beta * (l_target - l_ref)
}

/// One replica's annealing path: the tempered family `log gamma_beta`.
pub struct AnnealingPath {
    dim: usize,
    inner: PathInner,
}

enum PathInner {
    LogLinear {
        reference: Box<dyn LogDensity>,
        target: Box<dyn LogDensity>,
    },
    External(BridgeClient),
}

impl AnnealingPath {
    pub fn log_linear(
        reference: Box<dyn LogDensity>,
        target: Box<dyn LogDensity>,
    ) -> Result<Self, ModelError> {
        if reference.dim() != target.dim() {
            return Err(ModelError::InvalidArgument(format!(
                "reference dimension {} != target dimension {}",
                reference.dim(),
                target.dim()
            )));
        }
        Ok(AnnealingPath {
            dim: target.dim(),
            inner: PathInner::LogLinear { reference, target },
        })
    }

    pub fn external(bridge: BridgeClient) -> Self {
        AnnealingPath {
            dim: bridge.dim(),
            inner: PathInner::External(bridge),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Tempered log density at inverse temperature `beta`.
    pub fn log_density(&self, beta: f64, x: &[f64]) -> Result<f64, DensityError> {
        debug_assert!((0.0..=1.0).contains(&beta));
        match &self.inner {
            PathInner::LogLinear { reference, target } => {
                let l_ref = reference.log_density(x)?;
                let l_target = target.log_density(x)?;
                Ok(mix_log_linear(beta, l_ref, l_target))
            }
            PathInner::External(bridge) => bridge.eval(beta, x),
        }
    }

    /// View of the path at a fixed beta, usable as a plain density.
    pub fn at(&self, beta: f64) -> Result<Tempered<'_>, ModelError> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(ModelError::InvalidArgument(format!(
                "beta must lie in [0, 1], got {beta}"
            )));
        }
        Ok(Tempered { path: self, beta })
    }
}

/// The tempered distribution at a fixed point of the path.
pub struct Tempered<'a> {
    path: &'a AnnealingPath,
    beta: f64,
}

impl LogDensity for Tempered<'_> {
    fn dim(&self) -> usize {
        self.path.dim()
    }
    fn log_density(&self, x: &[f64]) -> Result<f64, DensityError> {
        self.path.log_density(self.beta, x)
    }
}

// ---------------------------------------------------------------------------
// stdin/stdout bridge to foreign-process targets
// ---------------------------------------------------------------------------

/// Client half of the bridge protocol (line-oriented, UTF-8, LF-terminated):
///
/// ```text
/// engine -> bridge:  hello <dimension>\n           (once)
/// bridge -> engine:  ok\n
/// engine -> bridge:  logd <beta> <x1> ... <xd>\n   (per evaluation)
/// bridge -> engine:  <float-decimal or "-inf">\n
/// ```
///
/// One bridge process serves one replica; access through a shared reference
/// is serialized internally.
pub struct BridgeClient {
    dim: usize,
    timeout: Duration,
    io: Mutex<BridgeIo>,
}

struct BridgeIo {
    child: Child,
    stdin: std::process::ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl BridgeClient {
    fn read_line(io: &mut BridgeIo, timeout: Duration) -> Result<String, DensityError> {
        match io.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(DensityError::Bridge(format!("read failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(DensityError::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => {
                Err(DensityError::Bridge("bridge process exited".into()))
            }
        }
    }

    fn eval(&self, beta: f64, x: &[f64]) -> Result<f64, DensityError> {
        let mut io = self.io.lock().unwrap();
        let mut request = format!("logd {beta}");
        for v in x {
            request.push(' ');
            request.push_str(&format!("{v}"));
        }
        request.push('\n');
        io.stdin
            .write_all(request.as_bytes())
            .and_then(|_| io.stdin.flush())
            .map_err(|e| DensityError::Bridge(format!("write failed: {e}")))?;
        let line = Self::read_line(&mut io, self.timeout)?;
        let trimmed = line.trim();
        if trimmed == "-inf" {
            return Ok(f64::NEG_INFINITY);
        }
        match trimmed.parse::<f64>() {
            Ok(v) if v.is_nan() || v == f64::INFINITY => {
                Err(DensityError::Bridge(format!("invalid response {trimmed:?}")))
            }
            Ok(v) => Ok(v),
            Err(_) => Err(DensityError::Bridge(format!(
                "malformed response {trimmed:?}"
            ))),
        }
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

impl Drop for BridgeClient {
    fn drop(&mut self) {
        if let Ok(mut io) = self.io.lock() {
            let _ = io.child.kill();
            let _ = io.child.wait();
        }
    }
}

/// Launch a bridge process and perform the handshake.
pub fn child_process_target(command: &[String], dim: usize) -> Result<BridgeClient, ModelError> {
    if command.is_empty() {
        return Err(ModelError::InvalidArgument("bridge command is empty".into()));
    }
    if dim < 1 {
        return Err(ModelError::InvalidArgument("bridge needs dim >= 1".into()));
    }
    let mut child = Command::new(&command[0])
        .args(&command[1..])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .map_err(|e| ModelError::BridgeSetup(format!("spawn {:?}: {e}", command[0])))?;
    let stdin = child.stdin.take().expect("piped stdin");
    let stdout = child.stdout.take().expect("piped stdout");
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let reader = BufReader::new(stdout);
        for line in reader.lines() {
            let failed = line.is_err();
            if tx.send(line).is_err() || failed {
                break;
            }
        }
    });
    let client = BridgeClient {
        dim,
        timeout: BRIDGE_TIMEOUT,
        io: Mutex::new(BridgeIo {
            child,
            stdin,
            lines: rx,
        }),
    };
    {
        let mut io = client.io.lock().unwrap();
        io.stdin
            .write_all(format!("hello {dim}\n").as_bytes())
            .and_then(|_| io.stdin.flush())
            .map_err(|e| ModelError::BridgeSetup(format!("handshake write: {e}")))?;
        let line = BridgeClient::read_line(&mut io, BRIDGE_TIMEOUT)
            .map_err(|e| ModelError::BridgeSetup(format!("handshake: {e}")))?;
        if line.trim() != "ok" {
            return Err(ModelError::BridgeSetup(format!(
                "handshake expected \"ok\", got {:?}",
                line.trim()
            )));
        }
    }
    Ok(client)
}

// ---------------------------------------------------------------------------
// serializable target selection
// ---------------------------------------------------------------------------

/// Everything needed to rebuild the annealing path in another process.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetSpec {
    Coinflip {
        n: u64,
        y: u64,
    },
    Bimodal {
        separation: f64,
        sd: f64,
    },
    Mvn {
        dim: usize,
        ref_sd: f64,
    },
    Bridge {
        command: Vec<String>,
        dim: usize,
        init: Vec<f64>,
    },
}

impl TargetSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            TargetSpec::Coinflip { n, y } => {
                if y > n {
                    return Err(ModelError::InvalidArgument(format!(
                        "coinflip needs y <= n, got y={y} n={n}"
                    )));
                }
            }
            TargetSpec::Bimodal { separation, sd } => {
                if *separation <= 0.0 || *sd <= 0.0 {
                    return Err(ModelError::InvalidArgument(
                        "bimodal needs positive separation and sd".into(),
                    ));
                }
            }
            TargetSpec::Mvn { dim, ref_sd } => {
                if *dim < 1 || *ref_sd <= 0.0 {
                    return Err(ModelError::InvalidArgument(
                        "mvn needs dim >= 1 and positive ref sd".into(),
                    ));
                }
            }
            TargetSpec::Bridge { command, dim, init } => {
                if command.is_empty() || *dim < 1 {
                    return Err(ModelError::InvalidArgument(
                        "bridge needs a command and dim >= 1".into(),
                    ));
                }
                if !init.is_empty() && init.len() != *dim {
                    return Err(ModelError::InvalidArgument(format!(
                        "bridge init has {} coordinates for dim {dim}",
                        init.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            TargetSpec::Coinflip { .. } | TargetSpec::Bimodal { .. } => 2,
            TargetSpec::Mvn { dim, .. } | TargetSpec::Bridge { dim, .. } => *dim,
        }
    }

    /// Starting point for every replica; must lie in the support of the
    /// whole path.
    pub fn initial_state(&self) -> Vec<f64> {
        match self {
            TargetSpec::Coinflip { .. } => vec![0.5, 0.5],
            TargetSpec::Bimodal { .. } => vec![0.0, 0.0],
            TargetSpec::Mvn { dim, .. } => vec![0.0; *dim],
            TargetSpec::Bridge { dim, init, .. } => {
                if init.is_empty() {
                    vec![0.0; *dim]
                } else {
                    init.clone()
                }
            }
        }
    }

    /// Build a fresh path instance (bridges spawn one process per call, so
    /// each replica gets its own).
    pub fn build_path(&self) -> Result<AnnealingPath, ModelError> {
        self.validate()?;
        match self {
            TargetSpec::Coinflip { n, y } => {
                let (target, reference) = coinflip_target(*n, *y)?;
                AnnealingPath::log_linear(reference, target)
            }
            TargetSpec::Bimodal { separation, sd } => {
                let (target, reference) = bimodal_target(*separation, *sd)?;
                AnnealingPath::log_linear(reference, target)
            }
            TargetSpec::Mvn { dim, ref_sd } => {
                let (target, reference) = mvn_target(*dim, *ref_sd)?;
                AnnealingPath::log_linear(reference, target)
            }
            TargetSpec::Bridge { command, dim, .. } => Ok(AnnealingPath::external(
                child_process_target(command, *dim)?,
            )),
        }
    }
}
