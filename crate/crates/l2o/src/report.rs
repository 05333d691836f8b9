//! Per-sample records and their aggregates.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use l2o_core::certs::{Certificate, GuardOutcome, Label};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// `model` for single-model experiments, the trader name for CFMM.
    pub group: String,
    pub index: usize,
    pub metrics: BTreeMap<String, f64>,
    pub certificates: Vec<Certificate>,
    pub outcome: GuardOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct OutcomeShares {
    pub ok: f64,
    pub warned: f64,
    pub rejected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub n: usize,
    pub mean_metrics: BTreeMap<String, f64>,
    /// Percent of records whose certificate carries a fail label.
    pub fail_pct: BTreeMap<String, f64>,
    pub warn_pct: BTreeMap<String, f64>,
    pub outcome_pct: OutcomeShares,
    pub execution_pct: Option<f64>,
    pub mean_predicted_utility: Option<f64>,
    /// Mean realized utility over all snapshots, counting unexecuted ones as 0.
    pub mean_executed_utility: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub records: Vec<SampleRecord>,
    pub aggregates: Vec<GroupSummary>,
    /// Run facts that are not per sample (parameter count, tuned buffers, timings).
    pub notes: BTreeMap<String, f64>,
}

fn pct(count: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * count as f64 / n as f64
    }
}

/// Group summaries in order of first appearance of each group.
pub fn aggregate(records: &[SampleRecord]) -> Vec<GroupSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in records {
        if !order.contains(&r.group.as_str()) {
            order.push(&r.group);
        }
    }
    order.into_iter().map(|g| summarize(g, records.iter().filter(|r| r.group == g).collect())).collect()
}

fn summarize(group: &str, recs: Vec<&SampleRecord>) -> GroupSummary {
    let n = recs.len();
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut fails: BTreeMap<String, usize> = BTreeMap::new();
    let mut warns: BTreeMap<String, usize> = BTreeMap::new();
    let mut outcomes = [0usize; 3];
    for r in &recs {
        for (k, v) in &r.metrics {
            *sums.entry(k.clone()).or_default() += v;
        }
        for c in &r.certificates {
            *fails.entry(c.name.clone()).or_default() += usize::from(c.label == Label::Fail);
            *warns.entry(c.name.clone()).or_default() += usize::from(c.label == Label::Warning);
        }
        outcomes[match r.outcome {
            GuardOutcome::Ok => 0,
            GuardOutcome::Warned => 1,
            GuardOutcome::Rejected => 2,
        }] += 1;
    }
    let mean_metrics: BTreeMap<String, f64> = sums.into_iter().map(|(k, s)| (k, s / n as f64)).collect();
    GroupSummary {
        group: group.to_string(),
        n,
        execution_pct: mean_metrics.get("executed").map(|m| 100.0 * m),
        mean_predicted_utility: mean_metrics.get("predicted_utility").copied(),
        mean_executed_utility: mean_metrics.get("executed_utility").copied(),
        mean_metrics,
        fail_pct: fails.into_iter().map(|(k, c)| (k, pct(c, n))).collect(),
        warn_pct: warns.into_iter().map(|(k, c)| (k, pct(c, n))).collect(),
        outcome_pct: OutcomeShares { ok: pct(outcomes[0], n), warned: pct(outcomes[1], n), rejected: pct(outcomes[2], n) },
    }
}

impl RunReport {
    pub fn new(experiment: ExperimentKind, seed: u64, records: Vec<SampleRecord>, notes: BTreeMap<String, f64>) -> Self {
        let aggregates = aggregate(&records);
        Self { experiment, seed, records, aggregates, notes }
    }

    pub fn group(&self, name: &str) -> Option<&GroupSummary> {
        self.aggregates.iter().find(|g| g.group == name)
    }

    pub fn any_rejected(&self) -> bool {
        self.records.iter().any(|r| r.outcome == GuardOutcome::Rejected)
    }

    /// One row per group: counts, outcome shares, fail percentages, then metric means.
    pub fn write_csv(&self, path: &Path) -> anyhow::Result<()> {
        let mut metric_names: Vec<&String> = Vec::new();
        let mut cert_names: Vec<&String> = Vec::new();
        for g in &self.aggregates {
            metric_names.extend(g.mean_metrics.keys().filter(|k| !metric_names.contains(k)).collect::<Vec<_>>());
            cert_names.extend(g.fail_pct.keys().filter(|k| !cert_names.contains(k)).collect::<Vec<_>>());
        }
        let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        let mut header = vec!["group".to_string(), "n".into(), "ok_pct".into(), "warned_pct".into(), "rejected_pct".into()];
        header.extend(cert_names.iter().map(|c| format!("{c}_fail_pct")));
        header.extend(metric_names.iter().map(|m| format!("mean_{m}")));
        w.write_record(&header)?;
        for g in &self.aggregates {
            let mut row = vec![
                g.group.clone(),
                g.n.to_string(),
                g.outcome_pct.ok.to_string(),
                g.outcome_pct.warned.to_string(),
                g.outcome_pct.rejected.to_string(),
            ];
            row.extend(cert_names.iter().map(|c| g.fail_pct.get(*c).map_or(String::new(), f64::to_string)));
            row.extend(metric_names.iter().map(|m| g.mean_metrics.get(*m).map_or(String::new(), f64::to_string)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Short human-readable summary.
    pub fn summary(&self) -> String {
        let mut s = format!("{:?} run, seed {}\n", self.experiment, self.seed);
        for g in &self.aggregates {
            s.push_str(&format!(
                "  {}: n={} ok={:.1}% warned={:.1}% rejected={:.1}%",
                g.group, g.n, g.outcome_pct.ok, g.outcome_pct.warned, g.outcome_pct.rejected
            ));
            for (c, p) in &g.fail_pct {
                s.push_str(&format!(" {c}_fail={p:.1}%"));
            }
            if let (Some(e), Some(pu), Some(eu)) = (g.execution_pct, g.mean_predicted_utility, g.mean_executed_utility) {
                s.push_str(&format!(" execution={e:.1}% predicted_utility={pu:.4} executed_utility={eu:.4}"));
            }
            s.push('\n');
        }
        s
    }
}
