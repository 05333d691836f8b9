//! Certificates of trustworthiness.
//!
//! A property function maps an inference to a nonnegative value `α`. A
//! profile stores the sorted values `{α_i}` observed on training data and
//! labels a new value through its empirical CDF
//! `CDF(α) = #{α_i ≤ α} / N`:
//!
//! * pass if `CDF(α) < p_pass`,
//! * warning if `p_pass ≤ CDF(α) < 1 - p_fail`,
//! * fail otherwise.
//!
//! The guard turns a list of labels into an accept/warn/reject outcome.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::linops::LinearMap;
use crate::models::{CfmmMarket, TradeProposal};
use crate::prox;
use crate::vector;

/// Default numerical zero for `‖x‖₀`.
pub const ZERO_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropertyKind {
    /// `‖x‖₀` with `|x_i| > zero_tol`.
    Nonzeros,
    /// `‖Ax - d‖ / ‖d‖`.
    RelativeError,
    /// `‖x - P_C(x)‖`.
    SetDistance,
    /// `‖Dx‖₁` with forward differences.
    TotalVariation,
    /// `1 - max_i x_i`.
    ClassifierConfidence,
    /// `‖x^k - x^{k-1}‖`.
    IterateResidual,
    /// `‖x - shrink(x, θ)‖`.
    ProximalResidual,
    /// `‖Kx‖₁`.
    L1OfKx,
    /// `max_j φ_j(d̂ʲ) / φ_j(dʲ + vʲ)` against buffered observed reserves.
    RiskViolation,
    /// `exp(-U(x, y))`.
    Profitability,
}

impl PropertyKind {
    pub fn default_name(self) -> &'static str {
        match self {
            PropertyKind::Nonzeros => "nonzeros",
            PropertyKind::RelativeError => "relative_error",
            PropertyKind::SetDistance => "set_distance",
            PropertyKind::TotalVariation => "total_variation",
            PropertyKind::ClassifierConfidence => "classifier_confidence",
            PropertyKind::IterateResidual => "iterate_residual",
            PropertyKind::ProximalResidual => "proximal_residual",
            PropertyKind::L1OfKx => "l1_of_kx",
            PropertyKind::RiskViolation => "risk_violation",
            PropertyKind::Profitability => "profitability",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyFn {
    pub name: String,
    pub kind: PropertyKind,
}

impl PropertyFn {
    pub fn new(kind: PropertyKind) -> Self {
        Self { name: kind.default_name().to_string(), kind }
    }

    pub fn named(name: &str, kind: PropertyKind) -> Self {
        Self { name: name.to_string(), kind }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probs {
    pub p_pass: f64,
    pub p_warn: f64,
    pub p_fail: f64,
}

impl Probs {
    pub fn new(p_pass: f64, p_warn: f64, p_fail: f64) -> Result<Self> {
        let p = Self { p_pass, p_warn, p_fail };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let Probs { p_pass, p_warn, p_fail } = *self;
        ensure!(
            p_pass >= 0.0 && p_warn >= 0.0 && p_fail >= 0.0,
            Calibration,
            "probabilities must be nonnegative: {self:?}"
        );
        ensure!(
            (p_pass + p_warn + p_fail - 1.0).abs() <= 1e-9,
            Calibration,
            "probabilities must sum to 1, got {}",
            p_pass + p_warn + p_fail
        );
        Ok(())
    }
}

impl Default for Probs {
    fn default() -> Self {
        Self { p_pass: 0.95, p_warn: 0.0, p_fail: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateProfile {
    pub property: PropertyFn,
    /// Sorted ascending.
    pub samples: Vec<f64>,
    pub probs: Probs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Pass,
    Warning,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub name: String,
    pub value: f64,
    pub cdf: f64,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardOutcome {
    Ok,
    Warned,
    Rejected,
}

pub fn calibrate(property: PropertyFn, training_values: &[f64], probs: Probs) -> Result<CertificateProfile> {
    ensure!(!training_values.is_empty(), Calibration, "{}: no calibration values", property.name);
    ensure!(
        training_values.iter().all(|&a| a >= 0.0 && !a.is_nan()),
        Calibration,
        "{}: calibration values must be nonnegative",
        property.name
    );
    probs.validate()?;
    let mut samples = training_values.to_vec();
    samples.sort_by(f64::total_cmp);
    Ok(CertificateProfile { property, samples, probs })
}

/// `#{α_i ≤ α} / N`.
pub fn empirical_cdf(profile: &CertificateProfile, alpha: f64) -> Result<f64> {
    let n = profile.samples.len();
    ensure!(n > 0, Calibration, "{}: profile has no samples", profile.property.name);
    let count = profile.samples.partition_point(|&s| s <= alpha);
    Ok(count as f64 / n as f64)
}

pub fn label_for_cdf(probs: &Probs, cdf: f64) -> Label {
    if cdf < probs.p_pass {
        Label::Pass
    } else if cdf < 1.0 - probs.p_fail {
        Label::Warning
    } else {
        Label::Fail
    }
}

pub fn assign_label(profile: &CertificateProfile, alpha: f64) -> Result<Certificate> {
    let cdf = empirical_cdf(profile, alpha)?;
    Ok(Certificate {
        name: profile.property.name.clone(),
        value: alpha,
        cdf,
        label: label_for_cdf(&profile.probs, cdf),
    })
}

/// Everything a property function may need besides the inference.
#[derive(Clone, Copy, Default)]
pub struct PropertyContext<'c> {
    pub a: Option<&'c LinearMap>,
    pub d: Option<&'c [f64]>,
    pub k: Option<&'c LinearMap>,
    pub project: Option<&'c dyn Fn(&[f64]) -> Vec<f64>>,
    pub previous: Option<&'c [f64]>,
    pub theta: Option<f64>,
    pub zero_tol: Option<f64>,
    pub cfmm: Option<CfmmContext<'c>>,
}

#[derive(Debug, Clone, Copy)]
pub struct CfmmContext<'c> {
    pub market: &'c CfmmMarket,
    pub trade: &'c TradeProposal,
    pub observed: &'c [Vec<f64>],
    pub buffers: &'c [f64],
}

fn missing(property: &PropertyFn, what: &str) -> Error {
    Error::Config(alloc::format!("property `{}` needs {what} in its context", property.name))
}

pub fn eval_property(property: &PropertyFn, x: &[f64], ctx: &PropertyContext<'_>) -> Result<f64> {
    let value = match property.kind {
        PropertyKind::Nonzeros => vector::count_nonzeros(x, ctx.zero_tol.unwrap_or(ZERO_TOL)) as f64,
        PropertyKind::RelativeError => {
            let a = ctx.a.ok_or_else(|| missing(property, "A"))?;
            let d = ctx.d.ok_or_else(|| missing(property, "d"))?;
            let r = vector::dist(&a.apply(x)?, d);
            let nd = vector::norm(d);
            if nd > 0.0 {
                r / nd
            } else if r == 0.0 {
                0.0
            } else {
                f64::MAX
            }
        }
        PropertyKind::SetDistance => {
            let p = ctx.project.ok_or_else(|| missing(property, "a projection"))?;
            vector::dist(x, &p(x))
        }
        PropertyKind::TotalVariation => x.windows(2).map(|w| (w[1] - w[0]).abs()).sum(),
        PropertyKind::ClassifierConfidence => {
            ensure!(!x.is_empty(), Contract, "classifier_confidence of an empty vector");
            (1.0 - x.iter().copied().fold(f64::NEG_INFINITY, f64::max)).max(0.0)
        }
        PropertyKind::IterateResidual => {
            let prev = ctx.previous.ok_or_else(|| missing(property, "the previous iterate"))?;
            ensure!(prev.len() == x.len(), Contract, "previous iterate has wrong length");
            vector::dist(x, prev)
        }
        PropertyKind::ProximalResidual => {
            let theta = ctx.theta.ok_or_else(|| missing(property, "theta"))?;
            vector::dist(x, &prox::shrink(x, theta))
        }
        PropertyKind::L1OfKx => {
            let k = ctx.k.ok_or_else(|| missing(property, "K"))?;
            vector::norm1(&k.apply(x)?)
        }
        PropertyKind::RiskViolation => {
            let c = ctx.cfmm.ok_or_else(|| missing(property, "a CFMM market"))?;
            c.market.risk_violation(c.trade, c.observed, c.buffers)?
        }
        PropertyKind::Profitability => {
            let c = ctx.cfmm.ok_or_else(|| missing(property, "a CFMM market"))?;
            c.market.profitability(c.trade)?
        }
    };
    Ok(value)
}

/// One certificate per profile, in profile order.
pub fn certify(profiles: &[CertificateProfile], x: &[f64], ctx: &PropertyContext<'_>) -> Result<Vec<Certificate>> {
    profiles
        .iter()
        .map(|p| assign_label(p, eval_property(&p.property, x, ctx)?))
        .collect()
}

pub fn guard(certs: &[Certificate]) -> GuardOutcome {
    if certs.iter().any(|c| c.label == Label::Fail) {
        GuardOutcome::Rejected
    } else if certs.iter().any(|c| c.label == Label::Warning) {
        GuardOutcome::Warned
    } else {
        GuardOutcome::Ok
    }
}

/// The inference is handed back only when the guard does not reject it.
pub fn guarded<T>(certs: &[Certificate], inference: T) -> (GuardOutcome, Option<T>) {
    let outcome = guard(certs);
    let out = if outcome == GuardOutcome::Rejected { None } else { Some(inference) };
    (outcome, out)
}
