//! Experiment configuration, read from JSON.
//!
//! Every field has a default, so `{"experiment": "cfmm"}` is a complete
//! config. Sizes, noise and solver settings that depend on the experiment
//! are optional and resolved through the accessor methods.

use std::path::{Path, PathBuf};

use anyhow::{ensure, Context};
use l2o_core::certs::Probs;
use l2o_core::models::PoolKind;
use l2o_core::solvers::StopRule;
use l2o_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Dictionary,
    Boxl1,
    Cfmm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub train_n: Option<usize>,
    pub test_n: Option<usize>,
    pub probs: Probs,
    /// Measurement noise; for CFMM this is the σ of the reserve noise `ε`.
    pub noise: Option<f64>,
    /// Stop rule for inference; training uses `train_stop`.
    pub stop: Option<StopRule>,
    pub train_stop: Option<StopRule>,
    pub train: TrainConfig,
    pub dictionary: DictionaryParams,
    pub boxl1: BoxL1Params,
    pub cfmm: CfmmParams,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentKind::Dictionary,
            seed: 0,
            train_n: None,
            test_n: None,
            probs: Probs::default(),
            noise: None,
            stop: None,
            train_stop: None,
            train: TrainConfig::default(),
            dictionary: DictionaryParams::default(),
            boxl1: BoxL1Params::default(),
            cfmm: CfmmParams::default(),
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DictionaryParams {
    /// Signal dimension.
    pub n: usize,
    /// Dimension of the hidden representation `s*`.
    pub latent: usize,
    /// Number of measurements.
    pub m: usize,
    /// Nonzeros in `s*`.
    pub support: usize,
    /// L-ADMM `α`; `β` and `λ` follow from it.
    pub alpha: f64,
    /// Numerical zero for the sparsity report.
    pub zero_tol: f64,
}

impl Default for DictionaryParams {
    fn default() -> Self {
        Self { n: 250, latent: 50, m: 100, support: 5, alpha: 1.0, zero_tol: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoxL1Params {
    pub n: usize,
    pub m: usize,
    /// Jumps in each piecewise-constant signal.
    pub jumps: usize,
    /// `δ = delta_scale · σ · √m`.
    pub delta_scale: f64,
    pub alpha: f64,
    pub train_k: bool,
}

impl Default for BoxL1Params {
    fn default() -> Self {
        Self { n: 64, m: 32, jumps: 3, delta_scale: 1.2, alpha: 0.1, train_k: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CfmmParams {
    /// Pool kinds for pools a through e.
    pub kinds: Vec<PoolKind>,
    pub gamma: f64,
    /// Pool value in units of the numeraire, drawn uniformly from this range.
    pub pool_value: (f64, f64),
    /// Relative mispricing of each pool-implied price, uniform in `±spread`.
    pub spread: f64,
    /// Davis-Yin step size.
    pub alpha: f64,
    /// Initial risk maps are `risk_init · I`.
    pub risk_init: f64,
    /// Buffer candidates searched on the training snapshots.
    pub buffer_grid: Vec<f64>,
    /// Training snapshots used by the buffer search.
    pub search_n: usize,
    /// Weight of the true-reserve invariant shortfall in the training loss.
    pub shortfall_weight: f64,
    pub train_risk: bool,
}

impl Default for CfmmParams {
    fn default() -> Self {
        Self {
            kinds: vec![PoolKind::WeightedProduct; 5],
            gamma: 0.997,
            pool_value: (50.0, 150.0),
            spread: 0.3,
            alpha: 1.0,
            risk_init: 0.05,
            buffer_grid: vec![0.0, 0.0005, 0.001, 0.0015, 0.002, 0.003, 0.004],
            search_n: 100,
            shortfall_weight: 100.0,
            train_risk: true,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        ensure!(self.train_n() >= 1 && self.test_n() >= 1, "dataset sizes must be at least 1");
        self.probs.validate()?;
        self.stop().validate()?;
        self.train_stop().validate()?;
        self.train.validate()?;
        ensure!(self.noise() >= 0.0, "noise must be nonnegative");
        let d = &self.dictionary;
        ensure!(d.n >= 1 && d.latent >= 1 && d.m >= 1, "dictionary dimensions must be positive");
        ensure!(d.support <= d.latent, "support size {} exceeds latent dimension {}", d.support, d.latent);
        ensure!(d.alpha > 0.0, "dictionary alpha must be positive");
        let b = &self.boxl1;
        ensure!(b.n >= 2 && b.m >= 1 && b.jumps < b.n, "boxl1 dimensions are inconsistent");
        let c = &self.cfmm;
        ensure!(c.kinds.len() == 5, "cfmm needs one pool kind for each of the 5 pools");
        ensure!(c.gamma > 0.0 && c.gamma <= 1.0, "gamma must lie in (0, 1]");
        ensure!(c.pool_value.0 > 0.0 && c.pool_value.0 <= c.pool_value.1, "pool value range is invalid");
        ensure!((0.0..1.0).contains(&c.spread), "spread must lie in [0, 1)");
        ensure!(c.search_n >= 1, "search_n must be at least 1");
        ensure!(!c.buffer_grid.is_empty() && c.buffer_grid.iter().all(|&b| b >= 0.0), "buffer grid must be nonempty and nonnegative");
        Ok(())
    }

    pub fn train_n(&self) -> usize {
        self.train_n.unwrap_or(match self.experiment {
            ExperimentKind::Dictionary | ExperimentKind::Boxl1 => 500,
            ExperimentKind::Cfmm => 500,
        })
    }

    pub fn test_n(&self) -> usize {
        self.test_n.unwrap_or(match self.experiment {
            ExperimentKind::Dictionary | ExperimentKind::Boxl1 => 100,
            ExperimentKind::Cfmm => 200,
        })
    }

    pub fn noise(&self) -> f64 {
        self.noise.unwrap_or(match self.experiment {
            ExperimentKind::Dictionary => 0.0,
            ExperimentKind::Boxl1 => 0.01,
            ExperimentKind::Cfmm => 0.002,
        })
    }

    pub fn stop(&self) -> StopRule {
        self.stop.unwrap_or(match self.experiment {
            ExperimentKind::Cfmm => StopRule { residual_tol: 1e-7, max_iter: 20_000, ..StopRule::default() },
            _ => StopRule { residual_tol: 1e-6, max_iter: 5000, ..StopRule::default() },
        })
    }

    pub fn train_stop(&self) -> StopRule {
        self.train_stop.unwrap_or(match self.experiment {
            ExperimentKind::Cfmm => StopRule { residual_tol: 1e-6, max_iter: 5000, ..StopRule::default() },
            _ => StopRule { residual_tol: 1e-5, max_iter: 300, ..StopRule::default() },
        })
    }
}
