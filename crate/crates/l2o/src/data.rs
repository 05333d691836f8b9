//! Synthetic datasets.

use l2o_core::models::{CfmmMarket, CfmmPool};
use l2o_core::LinearMap;
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::rng::{substream, Stream};

/// A measurement `d` and the signal that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub d: Vec<f64>,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictionaryData {
    pub a: LinearMap,
    /// Generating transform `x* = M s*`; never handed to the model.
    pub m: LinearMap,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> LinearMap {
    LinearMap::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

pub fn gen_dictionary_data(cfg: &ExperimentConfig) -> DictionaryData {
    let p = &cfg.dictionary;
    let mut rng = substream(cfg.seed, Stream::Data);
    let m = gaussian_matrix(&mut rng, p.n, p.latent, 1.0 / (p.latent as f64).sqrt());
    let a = gaussian_matrix(&mut rng, p.m, p.n, 1.0 / (p.m as f64).sqrt());
    let mut draw = |count: usize| -> Vec<Sample> {
        (0..count)
            .map(|_| {
                let mut s = vec![0.0; p.latent];
                for i in index::sample(&mut rng, p.latent, p.support) {
                    s[i] = Distribution::<f64>::sample(&StandardNormal, &mut rng);
                }
                let x = m.apply(&s).expect("M is n x latent");
                let d = a.apply(&x).expect("A is m x n");
                Sample { d, x }
            })
            .collect()
    };
    let train = draw(cfg.train_n());
    let test = draw(cfg.test_n());
    DictionaryData { a, m, train, test }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxL1Data {
    pub a: LinearMap,
    pub delta: f64,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Piecewise-constant signals in `[0, 1]` seen through a Gaussian matrix
/// with additive noise.
pub fn gen_boxl1_data(cfg: &ExperimentConfig) -> BoxL1Data {
    let p = &cfg.boxl1;
    let sigma = cfg.noise();
    let mut rng = substream(cfg.seed, Stream::Data);
    let mut noise = substream(cfg.seed, Stream::Noise);
    let a = gaussian_matrix(&mut rng, p.m, p.n, 1.0 / (p.m as f64).sqrt());
    let mut draw = |count: usize| -> Vec<Sample> {
        (0..count)
            .map(|_| {
                let mut cuts: Vec<usize> = index::sample(&mut rng, p.n - 1, p.jumps).into_iter().map(|c| c + 1).collect();
                cuts.sort_unstable();
                let mut x = vec![0.0; p.n];
                let mut level: f64 = rng.random();
                let mut next = cuts.iter().peekable();
                for (i, xi) in x.iter_mut().enumerate() {
                    if next.peek() == Some(&&i) {
                        next.next();
                        level = rng.random();
                    }
                    *xi = level;
                }
                let mut d = a.apply(&x).expect("A is m x n");
                for di in &mut d {
                    let z: f64 = StandardNormal.sample(&mut noise);
                    *di += sigma * z;
                }
                Sample { d, x }
            })
            .collect()
    };
    let train = draw(cfg.train_n());
    let test = draw(cfg.test_n());
    BoxL1Data { a, delta: p.delta_scale * sigma * (p.m as f64).sqrt(), train, test }
}

/// Token sets of pools a through e (0-based token indices).
pub const CFMM_TOPOLOGY: [&[usize]; 5] = [&[0, 1, 2], &[0, 1], &[1, 2], &[0, 2], &[0, 2]];
pub const CFMM_TOKENS: usize = 3;

/// One market state: true reserves `r`, the noise draw `ε` and the observed
/// reserves `d = (1 + ε) ⊙ r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfmmSnapshot {
    pub reserves: Vec<Vec<f64>>,
    pub eps: Vec<Vec<f64>>,
    pub observed: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfmmData {
    /// Market structure and prices; pool reserves hold the first training
    /// snapshot's truth.
    pub market: CfmmMarket,
    pub train: Vec<CfmmSnapshot>,
    pub test: Vec<CfmmSnapshot>,
}

/// Five pools over three tokens with equal weights. Prices are drawn once;
/// each snapshot draws a pool value and mispriced reserves
/// `r_i = w_i V / (p_i (1 + η_i))`, `η_i ~ U(-spread, spread)`.
pub fn gen_cfmm_market(cfg: &ExperimentConfig) -> l2o_core::Result<CfmmData> {
    let p = &cfg.cfmm;
    let sigma = cfg.noise();
    let mut rng = substream(cfg.seed, Stream::Data);
    let mut noise_rng = substream(cfg.seed, Stream::Noise);
    let normal = Normal::new(0.0, sigma).map_err(|e| l2o_core::Error::Config(e.to_string()))?;

    let prices: Vec<f64> = (0..CFMM_TOKENS).map(|t| if t == 0 { 1.0 } else { rng.random_range(0.5..2.0) }).collect();
    let mut draw = |count: usize| -> Vec<CfmmSnapshot> {
        (0..count)
            .map(|_| {
                let mut reserves = Vec::with_capacity(5);
                let mut eps = Vec::with_capacity(5);
                let mut observed = Vec::with_capacity(5);
                for toks in CFMM_TOPOLOGY {
                    let w = 1.0 / toks.len() as f64;
                    let value = rng.random_range(p.pool_value.0..=p.pool_value.1);
                    let r: Vec<f64> = toks
                        .iter()
                        .map(|&t| {
                            let eta = if p.spread > 0.0 { rng.random_range(-p.spread..p.spread) } else { 0.0 };
                            w * value / (prices[t] * (1.0 + eta))
                        })
                        .collect();
                    let e: Vec<f64> = toks.iter().map(|_| normal.sample(&mut noise_rng)).collect();
                    observed.push(r.iter().zip(&e).map(|(ri, ei)| (1.0 + ei) * ri).collect());
                    reserves.push(r);
                    eps.push(e);
                }
                CfmmSnapshot { reserves, eps, observed }
            })
            .collect()
    };
    let train = draw(cfg.train_n());
    let test = draw(cfg.test_n());
    let pools = CFMM_TOPOLOGY
        .iter()
        .enumerate()
        .map(|(j, toks)| {
            let w = vec![1.0 / toks.len() as f64; toks.len()];
            CfmmPool::new(j, p.kinds[j], toks, CFMM_TOKENS, train[0].reserves[j].clone(), w, p.gamma)
        })
        .collect::<l2o_core::Result<Vec<_>>>()?;
    let market = CfmmMarket::new(pools, CFMM_TOKENS, prices)?;
    Ok(CfmmData { market, train, test })
}
