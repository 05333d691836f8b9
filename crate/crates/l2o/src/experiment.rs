//! generate -> train -> infer -> calibrate/certify -> guard -> aggregate.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context};
use l2o_core::certs::{self, CertificateProfile, CfmmContext, GuardOutcome, PropertyContext, PropertyFn, PropertyKind};
use l2o_core::models::{self, BoxL1Model, CfmmMarket, CfmmModel, IdmModel, ImplicitModel, Inference, PoolKind};
use l2o_core::solvers::{LadmmSteps, StopRule};
use l2o_core::train::{self, LossReport, TrainConfig};
use l2o_core::{vector, LinearMap};
use rand::Rng;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::data::{self, CfmmData, CfmmSnapshot, Sample};
use crate::formats::{
    read_json, write_json, write_profiles, BufferScore, Dataset, InferenceRecord, InferenceSet, RunDir, Weights,
    WeightsFile,
};
use crate::report::{RunReport, SampleRecord};
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Gen,
    Train,
    Infer,
    Certify,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Gen => "gen",
            Stage::Train => "train",
            Stage::Infer => "infer",
            Stage::Certify => "certify",
            Stage::Report => "report",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source:#}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: anyhow::Error,
}

fn at<T>(stage: Stage, r: anyhow::Result<T>) -> Result<T, StageError> {
    r.map_err(|source| StageError { stage, source })
}

pub const MODEL_GROUP: &str = "model";
pub const ANALYTIC_GROUP: &str = "analytic";
pub const L2O_GROUP: &str = "l2o";

/// Seed for mini-batch shuffling, drawn from the init substream.
pub fn shuffle_seed(seed: u64) -> u64 {
    substream(seed, Stream::Init).random()
}

pub fn generate(cfg: &ExperimentConfig) -> anyhow::Result<Dataset> {
    Ok(match cfg.experiment {
        ExperimentKind::Dictionary => Dataset::Dictionary(data::gen_dictionary_data(cfg)),
        ExperimentKind::Boxl1 => Dataset::Boxl1(data::gen_boxl1_data(cfg)),
        ExperimentKind::Cfmm => Dataset::Cfmm(data::gen_cfmm_market(cfg)?),
    })
}

fn train_cfg(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig { seed: shuffle_seed(cfg.seed), ..cfg.train }
}

fn pairs(samples: &[Sample]) -> Vec<(Vec<f64>, Vec<f64>)> {
    samples.iter().map(|s| (s.d.clone(), s.x.clone())).collect()
}

pub fn train(cfg: &ExperimentConfig, dataset: &Dataset) -> anyhow::Result<WeightsFile> {
    let start = Instant::now();
    let (weights, param_count, losses) = match dataset {
        Dataset::Dictionary(d) => {
            let n = d.a.cols();
            let steps = LadmmSteps::with_alpha(cfg.dictionary.alpha, &LinearMap::identity(n), &d.a)?;
            let mut model = IdmModel::with_steps(d.a.clone(), LinearMap::identity(n), steps)?;
            let losses = train::train(&mut model, &pairs(&d.train), &train_cfg(cfg), &cfg.train_stop())?;
            let count = model.param_count();
            (Weights::Idm { k: model.k, steps: model.steps }, count, losses)
        }
        Dataset::Boxl1(d) => {
            let n = d.a.cols();
            let k = LinearMap::first_difference(n);
            let steps = LadmmSteps::with_alpha(cfg.boxl1.alpha, &k, &d.a)?;
            let mut model = BoxL1Model::with_steps(d.a.clone(), k, d.delta, steps)?;
            model.train_k = cfg.boxl1.train_k;
            let losses = if model.train_k {
                train::train(&mut model, &pairs(&d.train), &train_cfg(cfg), &cfg.train_stop())?
            } else {
                Vec::new()
            };
            let count = model.param_count();
            (Weights::Boxl1 { k: model.k, steps: model.steps, delta: model.delta }, count, losses)
        }
        Dataset::Cfmm(d) => train_cfmm(cfg, d)?,
    };
    Ok(WeightsFile { weights, param_count, losses, train_seconds: start.elapsed().as_secs_f64() })
}

fn l2o_trader(market: &CfmmMarket, risk_maps: &[LinearMap], buffers: &[f64], alpha: f64) -> anyhow::Result<CfmmModel> {
    let mut m = market.clone();
    m.risk_maps = risk_maps.to_vec();
    for (pool, &b) in m.pools.iter_mut().zip(buffers) {
        pool.buffer = b;
    }
    Ok(CfmmModel::new(m, alpha)?)
}

/// Largest-utility buffer on the first `search_n` training snapshots; ties
/// go to the smaller buffer. One buffer is shared by all pools.
fn search_buffers(
    cfg: &ExperimentConfig,
    market: &CfmmMarket,
    risk_maps: &[LinearMap],
    snaps: &[CfmmSnapshot],
) -> anyhow::Result<(f64, Vec<BufferScore>)> {
    let mut grid = cfg.cfmm.buffer_grid.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let stop = cfg.train_stop();
    let mut states: Vec<Option<Vec<f64>>> = vec![None; snaps.len()];
    let mut scores = Vec::with_capacity(grid.len());
    for &b in &grid {
        let model = l2o_trader(market, risk_maps, &vec![b; market.n_pools()], cfg.cfmm.alpha)?;
        let results: Vec<(Vec<f64>, bool, f64)> = snaps
            .par_iter()
            .zip(states.par_iter())
            .map(|(s, st)| {
                let d = model.data_vector(&s.observed, &market.prices)?;
                let x0 = match st {
                    Some(x) => x.clone(),
                    None => model.init_state(&d)?,
                };
                let inf = models::infer_from(&model, &d, &x0, &stop)?;
                let trade = model.trade_from_output(&inf.output, &market.prices)?;
                let (ok, realized) = market.simulate_execution(&trade, &s.reserves)?;
                Ok((inf.state, ok, realized))
            })
            .collect::<anyhow::Result<_>>()?;
        let n = snaps.len() as f64;
        let executed = results.iter().filter(|r| r.1).count() as f64;
        let utility: f64 = results.iter().map(|r| r.2).sum();
        for (st, r) in states.iter_mut().zip(results) {
            *st = Some(r.0);
        }
        scores.push(BufferScore { buffer: b, execution_rate: executed / n, mean_realized_utility: utility / n });
    }
    let best = scores
        .iter()
        .fold(None::<&BufferScore>, |acc, s| match acc {
            Some(a) if a.mean_realized_utility >= s.mean_realized_utility => Some(a),
            _ => Some(s),
        })
        .ok_or_else(|| anyhow!("buffer grid is empty"))?;
    Ok((best.buffer, scores))
}

/// `-U(x, y)` plus `κ` times the shortfall of each pool invariant under the
/// true reserves, and its gradient with respect to the readout `[x; y]`.
pub fn realized_loss(market: &CfmmMarket, truth: &[Vec<f64>], out: &[f64], kappa: f64) -> (f64, Vec<f64>) {
    let m = market.n_pools();
    let n = market.n_tokens;
    let mut grad = vec![0.0; out.len()];
    let mut loss = 0.0;
    for (j, pool) in market.pools.iter().enumerate() {
        let toks = pool.tokens();
        let xi = |t: usize| j * n + t;
        let yi = |t: usize| m * n + j * n + t;
        for &t in &toks {
            let p = market.prices[t];
            loss -= p * (out[yi(t)] - out[xi(t)]);
            grad[xi(t)] += p;
            grad[yi(t)] -= p;
        }
        let r = &truth[j];
        let v: Vec<f64> = toks.iter().map(|&t| pool.gamma * out[xi(t)] - out[yi(t)]).collect();
        match pool.kind {
            PoolKind::WeightedProduct => {
                // keep the log finite; the penalty is then large but bounded
                let s: Vec<f64> = r.iter().zip(&v).map(|(ri, vi)| (ri + vi).max(1e-9 * ri)).collect();
                let change: f64 =
                    pool.weights.iter().zip(s.iter().zip(r)).map(|(w, (si, ri))| w * (si.ln() - ri.ln())).sum();
                if change < 0.0 {
                    loss -= kappa * change;
                    for (i, &t) in toks.iter().enumerate() {
                        let dv = pool.weights[i] / s[i];
                        grad[xi(t)] -= kappa * dv * pool.gamma;
                        grad[yi(t)] += kappa * dv;
                    }
                }
            }
            PoolKind::WeightedSum => {
                let scale = vector::dot(&pool.weights, r);
                let change = vector::dot(&pool.weights, &v) / scale;
                if change < 0.0 {
                    loss -= kappa * change;
                    for (i, &t) in toks.iter().enumerate() {
                        let dv = pool.weights[i] / scale;
                        grad[xi(t)] -= kappa * dv * pool.gamma;
                        grad[yi(t)] += kappa * dv;
                    }
                }
            }
        }
    }
    (loss, grad)
}

fn train_cfmm(cfg: &ExperimentConfig, d: &CfmmData) -> anyhow::Result<(Weights, usize, Vec<LossReport>)> {
    let p = &cfg.cfmm;
    let market = &d.market;
    let mut risk_maps: Vec<LinearMap> =
        market.pools.iter().map(|pool| LinearMap::identity(pool.local_dim()).scaled(p.risk_init)).collect();
    let search = &d.train[..p.search_n.min(d.train.len())];
    let (mut buffer, mut scores) = search_buffers(cfg, market, &risk_maps, search)?;
    let mut losses = Vec::new();
    if p.train_risk && cfg.train.epochs > 0 {
        let mut model = l2o_trader(market, &risk_maps, &vec![buffer; market.n_pools()], p.alpha)?;
        let inputs: Vec<Vec<f64>> =
            d.train.iter().map(|s| model.data_vector(&s.observed, &market.prices)).collect::<Result<_, _>>()?;
        losses = train::train_with(&mut model, &inputs, &train_cfg(cfg), &cfg.train_stop(), |i, y| {
            Ok(realized_loss(market, &d.train[i].reserves, y, p.shortfall_weight))
        })?;
        risk_maps = model.market.risk_maps.clone();
        (buffer, scores) = search_buffers(cfg, market, &risk_maps, search)?;
    }
    let buffers = vec![buffer; market.n_pools()];
    let model = l2o_trader(market, &risk_maps, &buffers, p.alpha)?;
    // the buffers are tuned by search, so they count as parameters even though
    // the JFB step leaves them alone
    let count = model.market.risk_maps.iter().map(|w| w.data().len()).sum::<usize>() + buffers.len();
    Ok((Weights::Cfmm { risk_maps, buffers, alpha: p.alpha, buffer_search: scores }, count, losses))
}

fn record(group: &str, index: usize, inf: &Inference) -> InferenceRecord {
    InferenceRecord {
        group: group.to_string(),
        index,
        output: inf.output.clone(),
        iterations: inf.trace.iterations,
        converged: inf.trace.converged,
        last_residual: inf.trace.last_residual().unwrap_or(f64::NAN),
    }
}

fn infer_all<M: ImplicitModel + Sync>(
    model: &M,
    group: &str,
    inputs: &[Vec<f64>],
    stop: &StopRule,
) -> anyhow::Result<Vec<InferenceRecord>> {
    inputs
        .par_iter()
        .enumerate()
        .map(|(i, d)| Ok(record(group, i, &models::infer(model, d, stop).with_context(|| format!("{group} sample {i}"))?)))
        .collect()
}

fn idm_model(d: &data::DictionaryData, w: &Weights) -> anyhow::Result<IdmModel> {
    let Weights::Idm { k, steps } = w else { bail!("weights are not IDM weights") };
    Ok(IdmModel::with_steps(d.a.clone(), k.clone(), *steps)?)
}

fn boxl1_model(d: &data::BoxL1Data, w: &Weights) -> anyhow::Result<BoxL1Model> {
    let Weights::Boxl1 { k, steps, delta } = w else { bail!("weights are not box-l1 weights") };
    Ok(BoxL1Model::with_steps(d.a.clone(), k.clone(), *delta, *steps)?)
}

fn cfmm_models(d: &CfmmData, w: &Weights) -> anyhow::Result<(CfmmModel, CfmmModel)> {
    let Weights::Cfmm { risk_maps, buffers, alpha, .. } = w else { bail!("weights are not CFMM weights") };
    ensure!(risk_maps.len() == d.market.n_pools() && buffers.len() == d.market.n_pools(), "weights do not match the market");
    let l2o = l2o_trader(&d.market, risk_maps, buffers, *alpha)?;
    let analytic = CfmmModel::analytic(&d.market, *alpha)?;
    Ok((analytic, l2o))
}

fn cfmm_inputs(model: &CfmmModel, market: &CfmmMarket, snaps: &[CfmmSnapshot]) -> anyhow::Result<Vec<Vec<f64>>> {
    Ok(snaps.iter().map(|s| model.data_vector(&s.observed, &market.prices)).collect::<Result<_, _>>()?)
}

pub fn infer(cfg: &ExperimentConfig, dataset: &Dataset, weights: &WeightsFile) -> anyhow::Result<InferenceSet> {
    let stop = cfg.stop();
    let ds = |s: &[Sample]| s.iter().map(|s| s.d.clone()).collect::<Vec<_>>();
    Ok(match dataset {
        Dataset::Dictionary(d) => {
            let model = idm_model(d, &weights.weights)?;
            InferenceSet {
                train: infer_all(&model, MODEL_GROUP, &ds(&d.train), &stop)?,
                test: infer_all(&model, MODEL_GROUP, &ds(&d.test), &stop)?,
            }
        }
        Dataset::Boxl1(d) => {
            let model = boxl1_model(d, &weights.weights)?;
            InferenceSet {
                train: infer_all(&model, MODEL_GROUP, &ds(&d.train), &stop)?,
                test: infer_all(&model, MODEL_GROUP, &ds(&d.test), &stop)?,
            }
        }
        Dataset::Cfmm(d) => {
            let (analytic, l2o) = cfmm_models(d, &weights.weights)?;
            let train_in = cfmm_inputs(&l2o, &d.market, &d.train)?;
            let test_in = cfmm_inputs(&l2o, &d.market, &d.test)?;
            let mut test = infer_all(&analytic, ANALYTIC_GROUP, &test_in, &stop)?;
            test.extend(infer_all(&l2o, L2O_GROUP, &test_in, &stop)?);
            InferenceSet { train: infer_all(&l2o, L2O_GROUP, &train_in, &stop)?, test }
        }
    })
}

fn solver_metrics(r: &InferenceRecord) -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("iterations".to_string(), r.iterations as f64),
        ("converged".to_string(), f64::from(u8::from(r.converged))),
        ("residual".to_string(), r.last_residual),
    ])
}

fn check_records(set: &[InferenceRecord], n: usize, what: &str) -> anyhow::Result<()> {
    ensure!(set.iter().all(|r| r.index < n), "{what} inferences refer to samples that do not exist");
    Ok(())
}

/// Calibrate on training inferences, then certify and guard the test inferences.
pub fn certify(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    weights: &WeightsFile,
    inferences: &InferenceSet,
) -> anyhow::Result<(Vec<CertificateProfile>, RunReport)> {
    let probs = cfg.probs;
    let mut notes = BTreeMap::from([
        ("param_count".to_string(), weights.param_count as f64),
        ("train_seconds".to_string(), weights.train_seconds),
        ("calibration_n".to_string(), inferences.train.len() as f64),
    ]);
    let (profiles, records) = match dataset {
        Dataset::Dictionary(d) => {
            check_records(&inferences.train, d.train.len(), "training")?;
            check_records(&inferences.test, d.test.len(), "test")?;
            let model = idm_model(d, &weights.weights)?;
            let props = [PropertyFn::new(PropertyKind::RelativeError), PropertyFn::new(PropertyKind::L1OfKx)];
            let ctx = |s| idm_ctx(&model, s);
            let profiles = calibrate_all(&props, &inferences.train, |r| ctx(&d.train[r.index]), probs)?;
            let zero_tol = cfg.dictionary.zero_tol;
            let records = inferences
                .test
                .iter()
                .map(|r| {
                    let s = &d.test[r.index];
                    let mut metrics = solver_metrics(r);
                    let x = &r.output;
                    let kx = model.k.apply(x)?;
                    let nx = vector::count_nonzeros(x, zero_tol) as f64;
                    let nkx = vector::count_nonzeros(&kx, zero_tol) as f64;
                    metrics.insert("nonzeros_x".into(), nx);
                    metrics.insert("nonzeros_kx".into(), nkx);
                    metrics.insert("sparsity_ratio".into(), if nx > 0.0 { nkx / nx } else { 0.0 });
                    metrics.insert("recovery_error".into(), relative_distance(x, &s.x));
                    certified_record(MODEL_GROUP, r, metrics, &profiles, &ctx(s))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            (profiles, records)
        }
        Dataset::Boxl1(d) => {
            check_records(&inferences.train, d.train.len(), "training")?;
            check_records(&inferences.test, d.test.len(), "test")?;
            let model = boxl1_model(d, &weights.weights)?;
            let props = [PropertyFn::new(PropertyKind::RelativeError), PropertyFn::new(PropertyKind::TotalVariation)];
            let ctx = |s| boxl1_ctx(&model, s);
            let profiles = calibrate_all(&props, &inferences.train, |r| ctx(&d.train[r.index]), probs)?;
            let records = inferences
                .test
                .iter()
                .map(|r| {
                    let s = &d.test[r.index];
                    let mut metrics = solver_metrics(r);
                    metrics.insert("recovery_error".into(), relative_distance(&r.output, &s.x));
                    let misfit = vector::dist(&model.a.apply(&r.output)?, &s.d);
                    metrics.insert("fidelity_gap".into(), (misfit - model.delta).max(0.0));
                    certified_record(MODEL_GROUP, r, metrics, &profiles, &ctx(s))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            (profiles, records)
        }
        Dataset::Cfmm(d) => {
            check_records(&inferences.train, d.train.len(), "training")?;
            check_records(&inferences.test, d.test.len(), "test")?;
            let (analytic, l2o) = cfmm_models(d, &weights.weights)?;
            let market = &l2o.market;
            let cert_buffers = l2o.buffers.clone();
            notes.insert("buffer".into(), cert_buffers.iter().sum::<f64>() / cert_buffers.len() as f64);
            let props = [PropertyFn::new(PropertyKind::RiskViolation), PropertyFn::new(PropertyKind::Profitability)];
            let trades = |model: &CfmmModel, set: &[InferenceRecord]| -> anyhow::Result<Vec<_>> {
                set.iter().map(|r| Ok(model.trade_from_output(&r.output, &market.prices)?)).collect()
            };
            let train_trades = trades(&l2o, &inferences.train)?;
            let mut values = vec![Vec::with_capacity(train_trades.len()); props.len()];
            for (r, t) in inferences.train.iter().zip(&train_trades) {
                let cx = CfmmContext { market, trade: t, observed: &d.train[r.index].observed, buffers: &cert_buffers };
                let ctx = PropertyContext { cfmm: Some(cx), ..Default::default() };
                for (v, p) in values.iter_mut().zip(&props) {
                    v.push(certs::eval_property(p, &r.output, &ctx)?);
                }
            }
            let profiles = props
                .iter()
                .zip(&values)
                .map(|(p, v)| certs::calibrate(p.clone(), v, probs))
                .collect::<Result<Vec<_>, _>>()?;
            let records = inferences
                .test
                .iter()
                .map(|r| {
                    let model = if r.group == ANALYTIC_GROUP { &analytic } else { &l2o };
                    let s = &d.test[r.index];
                    let trade = model.trade_from_output(&r.output, &market.prices)?;
                    let cx = CfmmContext { market, trade: &trade, observed: &s.observed, buffers: &cert_buffers };
                    let ctx = PropertyContext { cfmm: Some(cx), ..Default::default() };
                    let certificates = certs::certify(&profiles, &r.output, &ctx)?;
                    let outcome = certs::guard(&certificates);
                    let (accepted, realized) = market.simulate_execution(&trade, &s.reserves)?;
                    let executed = accepted && outcome != GuardOutcome::Rejected;
                    let mut metrics = solver_metrics(r);
                    metrics.insert("predicted_utility".into(), trade.utility);
                    metrics.insert("ungated_execution".into(), f64::from(u8::from(accepted)));
                    metrics.insert("executed".into(), f64::from(u8::from(executed)));
                    metrics.insert("executed_utility".into(), if executed { realized } else { 0.0 });
                    for c in &certificates {
                        metrics.insert(c.name.clone(), c.value);
                    }
                    Ok(SampleRecord { group: r.group.clone(), index: r.index, metrics, certificates, outcome })
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            (profiles, records)
        }
    };
    Ok((profiles, RunReport::new(cfg.experiment, cfg.seed, records, notes)))
}

fn idm_ctx<'c>(model: &'c IdmModel, s: &'c Sample) -> PropertyContext<'c> {
    PropertyContext { a: Some(&model.a), d: Some(&s.d), k: Some(&model.k), ..Default::default() }
}

fn boxl1_ctx<'c>(model: &'c BoxL1Model, s: &'c Sample) -> PropertyContext<'c> {
    PropertyContext { a: Some(&model.a), d: Some(&s.d), ..Default::default() }
}

fn relative_distance(x: &[f64], truth: &[f64]) -> f64 {
    let n = vector::norm(truth);
    let r = vector::dist(x, truth);
    if n > 0.0 {
        r / n
    } else {
        r
    }
}

fn calibrate_all<'c>(
    props: &[PropertyFn],
    train: &[InferenceRecord],
    ctx: impl Fn(&InferenceRecord) -> PropertyContext<'c>,
    probs: certs::Probs,
) -> anyhow::Result<Vec<CertificateProfile>> {
    props
        .iter()
        .map(|p| {
            let values = train.iter().map(|r| certs::eval_property(p, &r.output, &ctx(r))).collect::<Result<Vec<_>, _>>()?;
            Ok(certs::calibrate(p.clone(), &values, probs)?)
        })
        .collect()
}

fn certified_record(
    group: &str,
    r: &InferenceRecord,
    mut metrics: BTreeMap<String, f64>,
    profiles: &[CertificateProfile],
    ctx: &PropertyContext<'_>,
) -> anyhow::Result<SampleRecord> {
    let certificates = certs::certify(profiles, &r.output, ctx)?;
    for c in &certificates {
        metrics.insert(c.name.clone(), c.value);
    }
    let outcome = certs::guard(&certificates);
    Ok(SampleRecord { group: group.to_string(), index: r.index, metrics, certificates, outcome })
}

/// Run every stage in memory. Artifacts are written when `cfg.out` is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport, StageError> {
    at(Stage::Gen, cfg.validate())?;
    let dataset = at(Stage::Gen, generate(cfg))?;
    let weights = at(Stage::Train, train(cfg, &dataset))?;
    let inferences = at(Stage::Infer, infer(cfg, &dataset, &weights))?;
    let (profiles, report) = at(Stage::Certify, certify(cfg, &dataset, &weights, &inferences))?;
    if let Some(out) = &cfg.out {
        let dir = RunDir::new(out);
        at(Stage::Gen, write_json(&dir.config(), cfg).and_then(|_| write_json(&dir.data(), &dataset)))?;
        at(Stage::Train, write_json(&dir.weights(), &weights))?;
        at(Stage::Infer, write_json(&dir.inferences(), &inferences))?;
        at(Stage::Certify, write_profiles(&dir, &profiles))?;
        at(Stage::Report, write_report(&dir, &report))?;
    }
    Ok(report)
}

fn write_report(dir: &RunDir, report: &RunReport) -> anyhow::Result<()> {
    write_json(&dir.report(), report)?;
    report.write_csv(&dir.report_csv())
}

/// Stage runner for the CLI: loads artifacts already present in `dir` and
/// produces the missing ones up to `target`.
pub fn run_stage(cfg: &ExperimentConfig, dir: &RunDir, target: Stage) -> Result<Option<RunReport>, StageError> {
    at(Stage::Gen, cfg.validate())?;
    if target == Stage::Gen {
        at(Stage::Gen, stage_gen(cfg, dir))?;
        return Ok(None);
    }
    let stored: Option<ExperimentConfig> =
        if dir.config().exists() { Some(at(Stage::Gen, read_json(&dir.config()))?) } else { None };
    if let Some(stored) = stored {
        if &stored != cfg {
            return Err(StageError {
                stage: target,
                source: anyhow!("{} holds a run with a different config; run `gen` again or pick another --out", dir.root.display()),
            });
        }
    }
    let dataset = if dir.data().exists() {
        at(Stage::Gen, read_json(&dir.data()))?
    } else {
        at(Stage::Gen, stage_gen(cfg, dir))?
    };
    let weights: WeightsFile = if dir.weights().exists() {
        at(Stage::Train, read_json(&dir.weights()))?
    } else {
        let w = at(Stage::Train, train(cfg, &dataset))?;
        at(Stage::Train, write_json(&dir.weights(), &w))?;
        w
    };
    if target == Stage::Train {
        return Ok(None);
    }
    let inferences: InferenceSet = if dir.inferences().exists() {
        at(Stage::Infer, read_json(&dir.inferences()))?
    } else {
        let inf = at(Stage::Infer, infer(cfg, &dataset, &weights))?;
        at(Stage::Infer, write_json(&dir.inferences(), &inf))?;
        inf
    };
    if target == Stage::Infer {
        return Ok(None);
    }
    let report = if target == Stage::Report && dir.report().exists() {
        at(Stage::Report, read_json(&dir.report()))?
    } else {
        let (profiles, report) = at(Stage::Certify, certify(cfg, &dataset, &weights, &inferences))?;
        at(Stage::Certify, write_profiles(dir, &profiles))?;
        report
    };
    at(Stage::Report, write_report(dir, &report))?;
    Ok(Some(report))
}

fn stage_gen(cfg: &ExperimentConfig, dir: &RunDir) -> anyhow::Result<Dataset> {
    let dataset = generate(cfg)?;
    for p in dir.downstream() {
        if p.is_dir() {
            std::fs::remove_dir_all(&p)?;
        } else if p.exists() {
            std::fs::remove_file(&p)?;
        }
    }
    write_json(&dir.config(), cfg)?;
    write_json(&dir.data(), &dataset)?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use l2o_core::models::CfmmPool;

    fn market() -> CfmmMarket {
        let pools = vec![
            CfmmPool::new(0, PoolKind::WeightedProduct, &[0, 1], 2, vec![10.0, 12.0], vec![0.5, 0.5], 0.997).unwrap(),
            CfmmPool::new(1, PoolKind::WeightedSum, &[0, 1], 2, vec![8.0, 9.0], vec![1.0, 1.5], 0.99).unwrap(),
        ];
        CfmmMarket::new(pools, 2, vec![1.0, 1.3]).unwrap()
    }

    #[test]
    fn realized_loss_gradient_matches_differences() {
        let mkt = market();
        let truth = mkt.reserves();
        // pool 0 loses invariant, pool 1 gains
        let out = vec![0.5, 0.0, 0.0, 0.2, 0.0, 1.0, 0.3, 0.0];
        let (_, g) = realized_loss(&mkt, &truth, &out, 10.0);
        for i in 0..out.len() {
            let h = 1e-6;
            let mut up = out.clone();
            up[i] += h;
            let mut dn = out.clone();
            dn[i] -= h;
            let fd = (realized_loss(&mkt, &truth, &up, 10.0).0 - realized_loss(&mkt, &truth, &dn, 10.0).0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "coordinate {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn realized_loss_is_negative_utility_without_shortfall() {
        let mkt = market();
        let out = vec![0.0; 8];
        let (loss, _) = realized_loss(&mkt, &mkt.reserves(), &out, 10.0);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn stage_error_names_stage() {
        let e = at::<()>(Stage::Infer, Err(anyhow!("boom"))).unwrap_err();
        assert_eq!(e.to_string(), "infer stage failed: boom");
    }
}
