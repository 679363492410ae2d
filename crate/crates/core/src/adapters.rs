//! Scaling policies, adapter configuration, initialization, and the adapted
//! forward pass.
//!
//! A low-rank adapter augments a frozen weight `m0` with `scaling * b * a`,
//! where `a` projects the input down to rank `r` and `b` projects back up.
//! The scaling policy decides how the scalar in front depends on rank:
//! `alpha/r` (classic LoRA), `alpha/sqrt(r)` (RoRA), a fixed 1, or a fixed
//! user-supplied value.

use crate::error::{CoreError, Result};
use crate::linalg::{gaussian_matrix, Matrix, RngSeed, Vector};
use std::io::{Read, Write};

/// Rule mapping (alpha, r) to the scalar applied to the low-rank product.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalingPolicy {
    /// alpha / r; update magnitude decays roughly like 1/r.
    Lora,
    /// alpha / sqrt(r); update magnitude is rank-stable.
    Rora,
    /// Fixed 1, the raw unscaled product.
    Unit,
    /// Fixed positive value, independent of alpha and r. Lets experiments
    /// move the scalar without moving the rank.
    Custom(f64),
}

impl ScalingPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            ScalingPolicy::Lora => "lora",
            ScalingPolicy::Rora => "rora",
            ScalingPolicy::Unit => "unit",
            ScalingPolicy::Custom(_) => "custom",
        }
    }
}

impl std::fmt::Display for ScalingPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScalingPolicy::Custom(g) => write!(f, "custom({g})"),
            p => write!(f, "{}", p.name()),
        }
    }
}

/// Resolve the scaling factor for a policy at a given alpha and rank.
pub fn scaling_factor(policy: ScalingPolicy, alpha: f64, r: usize) -> Result<f64> {
    if r == 0 {
        return Err(CoreError::InvalidArgument("rank must be >= 1".into()));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(CoreError::InvalidArgument(format!(
            "alpha must be finite and > 0, got {alpha}"
        )));
    }
    let gamma = match policy {
        ScalingPolicy::Lora => alpha / r as f64,
        ScalingPolicy::Rora => alpha / (r as f64).sqrt(),
        ScalingPolicy::Unit => 1.0,
        ScalingPolicy::Custom(g) => {
            if !(g.is_finite() && g > 0.0) {
                return Err(CoreError::InvalidArgument(format!(
                    "custom scaling must be finite and > 0, got {g}"
                )));
            }
            g
        }
    };
    Ok(gamma)
}

/// Initialization preset for the down-projection `a`.
///
/// `Analysis` uses unit variance, matching the i.i.d. unit-normal regime the
/// variance estimates assume. `Train` uses 1/sqrt(p_in), the usual fan-in
/// scaling for stable toy training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitPreset {
    Analysis,
    Train,
}

impl InitPreset {
    pub fn std_for(self, p_in: usize) -> f64 {
        match self {
            InitPreset::Analysis => 1.0,
            InitPreset::Train => 1.0 / (p_in as f64).sqrt(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InitPreset::Analysis => "analysis",
            InitPreset::Train => "train",
        }
    }
}

/// Full shape-and-scaling description of one adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterConfig {
    pub p_in: usize,
    pub p_out: usize,
    pub r: usize,
    pub alpha: f64,
    pub policy: ScalingPolicy,
    pub init_std_a: f64,
}

/// Conventional default for alpha when an experiment does not set one.
pub const DEFAULT_ALPHA: f64 = 16.0;

impl AdapterConfig {
    pub fn new(
        p_in: usize,
        p_out: usize,
        r: usize,
        alpha: f64,
        policy: ScalingPolicy,
        init: InitPreset,
    ) -> Result<AdapterConfig> {
        let cfg = AdapterConfig {
            p_in,
            p_out,
            r,
            alpha,
            policy,
            init_std_a: init.std_for(p_in),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p_in == 0 || self.p_out == 0 {
            return Err(CoreError::InvalidArgument(format!(
                "widths must be positive, got p_in={} p_out={}",
                self.p_in, self.p_out
            )));
        }
        if self.r == 0 || self.r > self.p_in.min(self.p_out) {
            return Err(CoreError::InvalidArgument(format!(
                "rank must satisfy 1 <= r <= min(p_in, p_out), got r={} with p_in={} p_out={}",
                self.r, self.p_in, self.p_out
            )));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "alpha must be finite and > 0, got {}",
                self.alpha
            )));
        }
        if !(self.init_std_a.is_finite() && self.init_std_a > 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "init_std_a must be finite and > 0, got {}",
                self.init_std_a
            )));
        }
        scaling_factor(self.policy, self.alpha, self.r)?;
        Ok(())
    }
}

/// Trainable low-rank pair with its resolved scaling factor.
///
/// Shapes: `a` is r x p_in, `b` is p_out x r. The scaling factor is resolved
/// once at construction, so the adapter is fully determined by its config
/// and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    pub a: Matrix,
    pub b: Matrix,
    scaling: f64,
}

impl LowRankAdapter {
    /// Zero-initialized `b`, Gaussian `a` with the configured std.
    ///
    /// With `b = 0` the adapter contributes nothing, so an adapted layer is
    /// functionally identical to its frozen base right after init.
    pub fn init(config: &AdapterConfig, seed: RngSeed) -> Result<LowRankAdapter> {
        config.validate()?;
        let a = gaussian_matrix(config.r, config.p_in, 0.0, config.init_std_a, seed)?;
        let b = Matrix::zeros(config.p_out, config.r);
        Ok(LowRankAdapter {
            a,
            b,
            scaling: scaling_factor(config.policy, config.alpha, config.r)?,
        })
    }

    pub fn from_parts(a: Matrix, b: Matrix, scaling: f64) -> Result<LowRankAdapter> {
        if b.cols() != a.rows() {
            return Err(CoreError::Dimension {
                op: "LowRankAdapter::from_parts",
                left: format!("b {}x{}", b.rows(), b.cols()),
                right: format!("a {}x{}", a.rows(), a.cols()),
            });
        }
        if !(scaling.is_finite() && scaling > 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "scaling must be finite and > 0, got {scaling}"
            )));
        }
        Ok(LowRankAdapter { a, b, scaling })
    }

    pub fn scaling(&self) -> f64 {
        self.scaling
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn p_in(&self) -> usize {
        self.a.cols()
    }

    pub fn p_out(&self) -> usize {
        self.b.rows()
    }

    /// Adapter contribution scaling * b * (a * x).
    pub fn increment(&self, x: &Vector) -> Result<Vector> {
        let down = self.a.matvec(x)?;
        let up = self.b.matvec(&down)?;
        Ok(up.scale(self.scaling))
    }

    /// Effective weight update scaling * b * a as a dense matrix.
    pub fn effective_update(&self) -> Result<Matrix> {
        Ok(self.b.matmul(&self.a)?.scale(self.scaling))
    }
}

/// Frozen base weight plus one adapter.
#[derive(Debug, Clone)]
pub struct AdaptedLinear {
    base: Matrix,
    pub adapter: LowRankAdapter,
}

impl AdaptedLinear {
    pub fn new(base: Matrix, adapter: LowRankAdapter) -> Result<AdaptedLinear> {
        if adapter.p_in() != base.cols() || adapter.p_out() != base.rows() {
            return Err(CoreError::Dimension {
                op: "AdaptedLinear::new",
                left: format!("base {}x{}", base.rows(), base.cols()),
                right: format!("adapter {}x{}", adapter.p_out(), adapter.p_in()),
            });
        }
        Ok(AdaptedLinear { base, adapter })
    }

    /// The frozen weight. No mutable access exists; fine-tuning can only
    /// touch the adapter.
    pub fn base(&self) -> &Matrix {
        &self.base
    }

    /// (m0 + scaling * b * a) * x
    pub fn forward(&self, x: &Vector) -> Result<Vector> {
        let frozen = self.base.matvec(x)?;
        let inc = self.adapter.increment(x)?;
        frozen.add(&inc)
    }
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"RALB";
const SNAPSHOT_VERSION: u8 = 1;

fn policy_tag(policy: ScalingPolicy) -> (u8, f64) {
    match policy {
        ScalingPolicy::Lora => (0, 0.0),
        ScalingPolicy::Rora => (1, 0.0),
        ScalingPolicy::Unit => (2, 0.0),
        ScalingPolicy::Custom(g) => (3, g),
    }
}

fn policy_from_tag(tag: u8, g: f64) -> Result<ScalingPolicy> {
    match tag {
        0 => Ok(ScalingPolicy::Lora),
        1 => Ok(ScalingPolicy::Rora),
        2 => Ok(ScalingPolicy::Unit),
        3 => Ok(ScalingPolicy::Custom(g)),
        _ => Err(CoreError::Snapshot(format!("unknown policy tag {tag}"))),
    }
}

/// Serialize (config, adapter) to the flat snapshot format.
///
/// Layout, all little-endian: magic "RALB", version u8, p_in u32, p_out u32,
/// r u32, alpha f64, policy tag u8, custom scaling f64 (0.0 unless tag 3),
/// init_std_a f64, then row-major `a` and `b` as f64.
pub fn write_snapshot(
    w: &mut impl Write,
    config: &AdapterConfig,
    adapter: &LowRankAdapter,
) -> Result<()> {
    config.validate()?;
    w.write_all(SNAPSHOT_MAGIC)?;
    w.write_all(&[SNAPSHOT_VERSION])?;
    w.write_all(&(config.p_in as u32).to_le_bytes())?;
    w.write_all(&(config.p_out as u32).to_le_bytes())?;
    w.write_all(&(config.r as u32).to_le_bytes())?;
    w.write_all(&config.alpha.to_le_bytes())?;
    let (tag, custom) = policy_tag(config.policy);
    w.write_all(&[tag])?;
    w.write_all(&custom.to_le_bytes())?;
    w.write_all(&config.init_std_a.to_le_bytes())?;
    for &v in adapter.a.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    for &v in adapter.b.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Read a snapshot produced by [`write_snapshot`].
pub fn read_snapshot(r: &mut impl Read) -> Result<(AdapterConfig, LowRankAdapter)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(CoreError::Snapshot("bad magic".into()));
    }
    let mut byte = [0u8; 1];
    r.read_exact(&mut byte)?;
    if byte[0] != SNAPSHOT_VERSION {
        return Err(CoreError::Snapshot(format!("unsupported version {}", byte[0])));
    }
    let mut u32buf = [0u8; 4];
    let mut f64buf = [0u8; 8];
    let mut read_u32 = |r: &mut dyn Read| -> Result<usize> {
        r.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf) as usize)
    };
    let p_in = read_u32(r)?;
    let p_out = read_u32(r)?;
    let rank = read_u32(r)?;
    r.read_exact(&mut f64buf)?;
    let alpha = f64::from_le_bytes(f64buf);
    r.read_exact(&mut byte)?;
    let tag = byte[0];
    r.read_exact(&mut f64buf)?;
    let custom = f64::from_le_bytes(f64buf);
    r.read_exact(&mut f64buf)?;
    let init_std_a = f64::from_le_bytes(f64buf);
    let policy = policy_from_tag(tag, custom)?;
    let config = AdapterConfig {
        p_in,
        p_out,
        r: rank,
        alpha,
        policy,
        init_std_a,
    };
    config.validate()?;
    let read_mat = |rows: usize, cols: usize, rd: &mut dyn Read| -> Result<Matrix> {
        let mut data = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 8];
        for _ in 0..rows * cols {
            rd.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        Matrix::new(rows, cols, data)
    };
    let a = read_mat(rank, p_in, r)?;
    let b = read_mat(p_out, rank, r)?;
    let scaling = scaling_factor(policy, alpha, rank)?;
    Ok((config, LowRankAdapter::from_parts(a, b, scaling)?))
}
