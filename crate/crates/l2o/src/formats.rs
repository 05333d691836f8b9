//! On-disk artifacts of a run directory.
//!
//! ```text
//! <out>/config.json       resolved config (seed included)
//! <out>/data.json         generated dataset
//! <out>/weights.json      trained weights and training log
//! <out>/inferences.json   train/test inferences
//! <out>/calib/<name>.json one certificate profile per property
//! <out>/report.json       records and aggregates
//! <out>/report.csv        one row per group
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use l2o_core::certs::CertificateProfile;
use l2o_core::solvers::LadmmSteps;
use l2o_core::train::LossReport;
use l2o_core::LinearMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{BoxL1Data, CfmmData, DictionaryData};

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data.json")
    }
    pub fn weights(&self) -> PathBuf {
        self.root.join("weights.json")
    }
    pub fn inferences(&self) -> PathBuf {
        self.root.join("inferences.json")
    }
    pub fn calib_dir(&self) -> PathBuf {
        self.root.join("calib")
    }
    pub fn calib(&self, name: &str) -> PathBuf {
        self.calib_dir().join(format!("{name}.json"))
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }

    /// Files produced after `data.json`; stale once the data changes.
    pub fn downstream(&self) -> Vec<PathBuf> {
        vec![self.weights(), self.inferences(), self.report(), self.report_csv(), self.calib_dir()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "snake_case")]
pub enum Dataset {
    Dictionary(DictionaryData),
    Boxl1(BoxL1Data),
    Cfmm(CfmmData),
}

/// Objective of one buffer candidate in the buffer search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BufferScore {
    pub buffer: f64,
    pub execution_rate: f64,
    pub mean_realized_utility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Weights {
    Idm { k: LinearMap, steps: LadmmSteps },
    Boxl1 { k: LinearMap, steps: LadmmSteps, delta: f64 },
    Cfmm { risk_maps: Vec<LinearMap>, buffers: Vec<f64>, alpha: f64, buffer_search: Vec<BufferScore> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub weights: Weights,
    pub param_count: usize,
    pub losses: Vec<LossReport>,
    pub train_seconds: f64,
}

/// Solver summary of one inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub group: String,
    pub index: usize,
    pub output: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub last_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct InferenceSet {
    /// Inferences on training data; certificate calibration input.
    pub train: Vec<InferenceRecord>,
    pub test: Vec<InferenceRecord>,
}

pub fn write_profiles(dir: &RunDir, profiles: &[CertificateProfile]) -> anyhow::Result<()> {
    for p in profiles {
        write_json(&dir.calib(&p.property.name), p)?;
    }
    Ok(())
}
