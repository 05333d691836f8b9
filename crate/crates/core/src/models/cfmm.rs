//! Arbitrage across constant function market makers.
//!
//! A trade tenders `xʲ` to and receives `yʲ` from pool `j` (both stored in
//! global token coordinates). Pool `j` accepts when
//! `φ_j(rʲ + γ_j Aʲxʲ - Aʲyʲ) ≥ φ_j(rʲ)`, where `Aʲ` selects the pool's tokens.
//!
//! The model maximizes the risk-regularized utility
//! `U_Θ = Σ ⟨Aʲp, Aʲ(yʲ - xʲ)⟩ - ½ Σ ‖WʲAʲ(xʲ - yʲ)‖²` over trades that the
//! pools would accept against the observed reserves `d` inflated by the
//! buffers `δ_j`. Davis-Yin splitting runs on `ξ = (v, x, y, z)`:
//!
//! * `f`: `x, y ≥ 0`; `zʲ ≤ ln(vʲ + dʲ)` for product pools; the halfspace
//!   `⟨wʲ, vʲ⟩ ≥ δ_j ⟨wʲ, dʲ⟩` for sum pools.
//! * `g`: the coupling `vʲ = Aʲ(γ_j xʲ - yʲ)` and the hyperplanes
//!   `⟨wʲ, zʲ⟩ = ln α_j` with `ln α_j = Σ wʲ ln((1 + δ_j) dʲ)`.
//! * `h = -U_Θ`.
//!
//! `z` blocks exist only for weighted-product pools.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::graph::{Eval, Graph, ParamId};
use crate::linops::LinearMap;
use crate::prox::{self, CouplingParams};
use crate::solvers::{check_davis_yin_step, davis_yin_update, StopRule};
use crate::vector;

use super::{ImplicitModel, Inference};

/// Trade entries below this magnitude are treated as zero before
/// execution checks and reporting.
pub const DUST_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    WeightedProduct,
    WeightedSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfmmPool {
    pub id: usize,
    pub kind: PoolKind,
    pub reserves: Vec<f64>,
    pub weights: Vec<f64>,
    pub gamma: f64,
    /// `n_j × n_tokens` selector.
    pub coord_map: LinearMap,
    #[serde(default)]
    pub buffer: f64,
}

impl CfmmPool {
    /// Pool over the given global token indices.
    pub fn new(
        id: usize,
        kind: PoolKind,
        tokens: &[usize],
        n_tokens: usize,
        reserves: Vec<f64>,
        weights: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        let coord_map =
            LinearMap::from_fn(tokens.len(), n_tokens, |i, j| if tokens[i] == j { 1.0 } else { 0.0 });
        let pool = Self { id, kind, reserves, weights, gamma, coord_map, buffer: 0.0 };
        pool.validate(n_tokens)?;
        Ok(pool)
    }

    pub fn validate(&self, n_tokens: usize) -> Result<()> {
        let nj = self.coord_map.rows();
        ensure!(
            self.coord_map.cols() == n_tokens,
            Contract,
            "pool {}: coord_map has {} columns, market has {n_tokens} tokens",
            self.id,
            self.coord_map.cols()
        );
        for i in 0..nj {
            let row = self.coord_map.row(i);
            let ones = row.iter().filter(|&&a| a == 1.0).count();
            let zeros = row.iter().filter(|&&a| a == 0.0).count();
            ensure!(ones == 1 && zeros == n_tokens - 1, Contract, "pool {}: coord_map row {i} is not a selector", self.id);
        }
        ensure!(
            self.reserves.len() == nj && self.weights.len() == nj,
            Contract,
            "pool {}: reserves/weights must have {nj} entries",
            self.id
        );
        ensure!(self.reserves.iter().all(|&r| r > 0.0), Contract, "pool {}: reserves must be positive", self.id);
        ensure!(self.weights.iter().all(|&w| w > 0.0), Contract, "pool {}: weights must be positive", self.id);
        ensure!(self.gamma > 0.0 && self.gamma <= 1.0, Contract, "pool {}: gamma must lie in (0, 1]", self.id);
        ensure!(self.buffer >= 0.0 && self.buffer.is_finite(), Contract, "pool {}: buffer must be nonnegative", self.id);
        Ok(())
    }

    pub fn local_dim(&self) -> usize {
        self.coord_map.rows()
    }

    /// Global indices of the pool's tokens.
    pub fn tokens(&self) -> Vec<usize> {
        (0..self.local_dim())
            .map(|i| self.coord_map.row(i).iter().position(|&a| a == 1.0).unwrap_or(0))
            .collect()
    }

    /// `γ Aʲx - Aʲy` for global-coordinate `x`, `y`.
    pub fn local_trade(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let ax = self.coord_map.apply(x)?;
        let ay = self.coord_map.apply(y)?;
        Ok(ax.iter().zip(&ay).map(|(a, b)| self.gamma * a - b).collect())
    }

    /// Trading function `φ` at reserves `r`.
    pub fn trading_fn(&self, r: &[f64]) -> Result<f64> {
        ensure!(r.len() == self.local_dim(), Contract, "pool {}: reserve vector has wrong length", self.id);
        match self.kind {
            PoolKind::WeightedSum => Ok(vector::dot(&self.weights, r)),
            PoolKind::WeightedProduct => {
                ensure!(
                    r.iter().all(|&ri| ri > 0.0),
                    Contract,
                    "pool {}: nonpositive post-trade reserve {r:?}",
                    self.id
                );
                Ok(r.iter().zip(&self.weights).map(|(ri, wi)| libm::pow(*ri, *wi)).product())
            }
        }
    }

    /// `φ(r + v) - φ(r)` against the pool's own reserves.
    pub fn invariant_change(&self, local_trade: &[f64]) -> Result<f64> {
        self.invariant_change_at(&self.reserves, local_trade)
    }

    /// `φ(r + v) - φ(r)` against the given reserves.
    pub fn invariant_change_at(&self, r: &[f64], local_trade: &[f64]) -> Result<f64> {
        ensure!(local_trade.len() == r.len(), Contract, "pool {}: trade has wrong length", self.id);
        let after = vector::add(r, local_trade);
        Ok(self.trading_fn(&after)? - self.trading_fn(r)?)
    }

    /// Whether the pool accepts the trade `v` at reserves `r`. Product pools
    /// compare in log space.
    pub fn accepts(&self, r: &[f64], local_trade: &[f64]) -> bool {
        if local_trade.iter().all(|&v| v == 0.0) {
            return true;
        }
        match self.kind {
            PoolKind::WeightedSum => vector::dot(&self.weights, local_trade) >= 0.0,
            PoolKind::WeightedProduct => {
                let mut s = 0.0;
                for ((ri, vi), wi) in r.iter().zip(local_trade).zip(&self.weights) {
                    if ri + vi <= 0.0 {
                        return false;
                    }
                    s += wi * (libm::log(ri + vi) - libm::log(*ri));
                }
                s >= 0.0
            }
        }
    }

    /// Sum of weights, the homogeneity degree of a product pool.
    fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// `φ(r + v) - φ(r)` for the pool's reserves.
pub fn pool_invariant(pool: &CfmmPool, local_trade: &[f64]) -> Result<f64> {
    pool.invariant_change(local_trade)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfmmMarket {
    pub pools: Vec<CfmmPool>,
    pub n_tokens: usize,
    pub prices: Vec<f64>,
    /// `Wʲ`, `n_j × n_j`.
    pub risk_maps: Vec<LinearMap>,
}

impl CfmmMarket {
    /// Market with all risk maps set to zero.
    pub fn new(pools: Vec<CfmmPool>, n_tokens: usize, prices: Vec<f64>) -> Result<Self> {
        let risk_maps = pools.iter().map(|p| LinearMap::zeros(p.local_dim(), p.local_dim())).collect();
        let m = Self { pools, n_tokens, prices, risk_maps };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.pools.is_empty(), Contract, "market has no pools");
        ensure!(self.prices.len() == self.n_tokens, Contract, "price vector must have {} entries", self.n_tokens);
        ensure!(self.prices.iter().all(|&p| p >= 0.0 && p.is_finite()), Contract, "prices must be nonnegative");
        ensure!(self.risk_maps.len() == self.pools.len(), Contract, "one risk map per pool required");
        for (pool, w) in self.pools.iter().zip(&self.risk_maps) {
            pool.validate(self.n_tokens)?;
            let nj = pool.local_dim();
            ensure!(w.rows() == nj && w.cols() == nj, Contract, "pool {}: risk map must be {nj}x{nj}", pool.id);
        }
        Ok(())
    }

    pub fn n_pools(&self) -> usize {
        self.pools.len()
    }

    /// Total local dimension `Σ n_j`.
    pub fn local_total(&self) -> usize {
        self.pools.iter().map(CfmmPool::local_dim).sum()
    }

    pub fn reserves(&self) -> Vec<Vec<f64>> {
        self.pools.iter().map(|p| p.reserves.clone()).collect()
    }

    /// `U(x, y) = Σ ⟨Aʲp, Aʲ(yʲ - xʲ)⟩`.
    pub fn utility(&self, trade: &TradeProposal) -> Result<f64> {
        self.check_trade(trade)?;
        Ok(utility_with_prices(&self.pools, &self.prices, trade))
    }

    /// `U(x, y) - ½ Σ ‖WʲAʲ(xʲ - yʲ)‖²`.
    pub fn regularized_utility(&self, trade: &TradeProposal) -> Result<f64> {
        let u = self.utility(trade)?;
        let mut penalty = 0.0;
        for (j, pool) in self.pools.iter().enumerate() {
            let diff = vector::sub(&trade.x[j], &trade.y[j]);
            let local = pool.coord_map.apply(&diff)?;
            let r = self.risk_maps[j].apply(&local)?;
            penalty += 0.5 * vector::dot(&r, &r);
        }
        Ok(u - penalty)
    }

    /// `(∇_x U_Θ, ∇_y U_Θ)` per pool in global coordinates:
    /// `∇_{xʲ} = -AʲᵀAʲp - (WʲAʲ)ᵀ(WʲAʲ)(xʲ - yʲ)`, `∇_{yʲ} = -∇_{xʲ}`.
    pub fn utility_gradient(&self, trade: &TradeProposal) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        self.check_trade(trade)?;
        let mut gx = Vec::with_capacity(self.n_pools());
        let mut gy = Vec::with_capacity(self.n_pools());
        for (j, pool) in self.pools.iter().enumerate() {
            let a = &pool.coord_map;
            let w = &self.risk_maps[j];
            let ap = a.apply(&self.prices)?;
            let lin = a.apply_transpose(&ap)?;
            let diff = vector::sub(&trade.x[j], &trade.y[j]);
            let risk = a.apply_transpose(&w.apply_transpose(&w.apply(&a.apply(&diff)?)?)?)?;
            let g: Vec<f64> = lin.iter().zip(&risk).map(|(l, r)| -l - r).collect();
            gy.push(vector::scale(&g, -1.0));
            gx.push(g);
        }
        Ok((gx, gy))
    }

    /// Smoothness constant of `-U_Θ` in `(x, y)`: `2 max_j ‖WʲAʲ‖²`.
    pub fn lipschitz(&self) -> Result<f64> {
        let mut l: f64 = 0.0;
        for (pool, w) in self.pools.iter().zip(&self.risk_maps) {
            let s = w.matmul(&pool.coord_map)?.norm2();
            l = l.max(2.0 * s * s);
        }
        Ok(l)
    }

    fn check_trade(&self, trade: &TradeProposal) -> Result<()> {
        let m = self.n_pools();
        ensure!(
            trade.x.len() == m && trade.y.len() == m,
            Contract,
            "trade must have one row per pool ({m})"
        );
        ensure!(
            trade.x.iter().chain(&trade.y).all(|r| r.len() == self.n_tokens),
            Contract,
            "trade rows must have {} entries",
            self.n_tokens
        );
        Ok(())
    }

    /// Re-check every pool against `true_reserves`. Returns
    /// `(executed, realized_utility)`.
    pub fn simulate_execution(&self, trade: &TradeProposal, true_reserves: &[Vec<f64>]) -> Result<(bool, f64)> {
        self.check_trade(trade)?;
        ensure!(true_reserves.len() == self.n_pools(), Contract, "one reserve vector per pool required");
        let nonneg = trade.x.iter().chain(&trade.y).flatten().all(|&v| v >= 0.0);
        let mut accepted = nonneg;
        for (j, pool) in self.pools.iter().enumerate() {
            ensure!(true_reserves[j].len() == pool.local_dim(), Contract, "pool {}: reserve vector has wrong length", pool.id);
            let v = pool.local_trade(&trade.x[j], &trade.y[j])?;
            accepted &= pool.accepts(&true_reserves[j], &v);
        }
        let realized = if accepted { utility_with_prices(&self.pools, &self.prices, trade) } else { 0.0 };
        Ok((accepted, realized))
    }

    /// Per-pool acceptance against the given reserves.
    pub fn pool_acceptance(&self, trade: &TradeProposal, reserves: &[Vec<f64>]) -> Result<Vec<bool>> {
        self.check_trade(trade)?;
        self.pools
            .iter()
            .enumerate()
            .map(|(j, p)| Ok(p.accepts(&reserves[j], &p.local_trade(&trade.x[j], &trade.y[j])?)))
            .collect()
    }

    /// Largest ratio `φ_j(d̂ʲ)/φ_j(dʲ + vʲ)` over pools, with `d̂ = (1 + δ)d`.
    /// Values above one mean the trade does not clear the buffered
    /// invariant; `f64::MAX` flags a post-trade reserve outside the domain.
    pub fn risk_violation(&self, trade: &TradeProposal, observed: &[Vec<f64>], buffers: &[f64]) -> Result<f64> {
        self.check_trade(trade)?;
        ensure!(
            observed.len() == self.n_pools() && buffers.len() == self.n_pools(),
            Contract,
            "one observation and one buffer per pool required"
        );
        let mut worst: f64 = 0.0;
        for (j, pool) in self.pools.iter().enumerate() {
            let d = &observed[j];
            let v = pool.local_trade(&trade.x[j], &trade.y[j])?;
            let ratio = match pool.kind {
                PoolKind::WeightedSum => {
                    let after = vector::dot(&pool.weights, &vector::add(d, &v));
                    let target = (1.0 + buffers[j]) * vector::dot(&pool.weights, d);
                    if after > 0.0 { target / after } else { f64::MAX }
                }
                PoolKind::WeightedProduct => {
                    if d.iter().zip(&v).any(|(a, b)| a + b <= 0.0) {
                        f64::MAX
                    } else {
                        let log_gap: f64 = pool
                            .weights
                            .iter()
                            .zip(d.iter().zip(&v))
                            .map(|(w, (a, b))| w * (libm::log(*a) - libm::log(a + b)))
                            .sum::<f64>()
                            + pool.weight_sum() * libm::log1p(buffers[j]);
                        libm::exp(log_gap).min(f64::MAX)
                    }
                }
            };
            worst = worst.max(ratio);
        }
        Ok(worst)
    }

    /// `exp(-U)`: small for profitable trades, above one for losing ones.
    pub fn profitability(&self, trade: &TradeProposal) -> Result<f64> {
        Ok(libm::exp(-self.utility(trade)?).min(f64::MAX))
    }
}

fn utility_with_prices(pools: &[CfmmPool], prices: &[f64], trade: &TradeProposal) -> f64 {
    pools
        .iter()
        .zip(trade.x.iter().zip(&trade.y))
        .map(|(pool, (x, y))| pool.tokens().iter().map(|&t| prices[t] * (y[t] - x[t])).sum::<f64>())
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeProposal {
    /// Tendered amounts, one global-coordinate row per pool.
    pub x: Vec<Vec<f64>>,
    /// Received amounts, one global-coordinate row per pool.
    pub y: Vec<Vec<f64>>,
    pub utility: f64,
    pub executed: bool,
}

impl TradeProposal {
    pub fn null(n_pools: usize, n_tokens: usize) -> Self {
        Self {
            x: vec![vec![0.0; n_tokens]; n_pools],
            y: vec![vec![0.0; n_tokens]; n_pools],
            utility: 0.0,
            executed: false,
        }
    }

    pub fn is_null(&self) -> bool {
        self.x.iter().chain(&self.y).flatten().all(|&v| v == 0.0)
    }

    /// Zero out entries smaller than `tol` in magnitude.
    pub fn clean_dust(&mut self, tol: f64) {
        for v in self.x.iter_mut().chain(self.y.iter_mut()).flatten() {
            if v.abs() < tol {
                *v = 0.0;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    m: usize,
    n: usize,
    nv: usize,
    nz: usize,
}

impl Layout {
    fn x0(&self) -> usize {
        self.nv
    }
    fn y0(&self) -> usize {
        self.nv + self.m * self.n
    }
    fn z0(&self) -> usize {
        self.nv + 2 * self.m * self.n
    }
    fn len(&self) -> usize {
        self.z0() + self.nz
    }
}

/// The arbitrage model: market structure, trainable risk maps `Wʲ` (kept in
/// `market.risk_maps`) and buffers `δ_j`.
#[derive(Debug, Clone)]
pub struct CfmmModel {
    pub market: CfmmMarket,
    pub buffers: Vec<f64>,
    /// Requested Davis-Yin step size; the effective step is capped at `1/L`.
    pub alpha: f64,
    pub train_risk: bool,
    pub train_buffers: bool,
    coupling: CouplingParams,
    layout: Layout,
    v_offsets: Vec<usize>,
    z_offsets: Vec<Option<usize>>,
    lipschitz: f64,
    pub newton_tol: f64,
    pub newton_max: usize,
}

impl CfmmModel {
    /// Buffers are read from `market.pools[j].buffer`.
    pub fn new(market: CfmmMarket, alpha: f64) -> Result<Self> {
        market.validate()?;
        ensure!(alpha > 0.0 && alpha.is_finite(), Config, "Davis-Yin step size must be positive");
        let m = market.n_pools();
        let n = market.n_tokens;
        let mut v_offsets = Vec::with_capacity(m);
        let mut z_offsets = Vec::with_capacity(m);
        let (mut nv, mut nz) = (0, 0);
        for pool in &market.pools {
            v_offsets.push(nv);
            nv += pool.local_dim();
            if pool.kind == PoolKind::WeightedProduct {
                z_offsets.push(Some(nz));
                nz += pool.local_dim();
            } else {
                z_offsets.push(None);
            }
        }
        // N = [ΓA  -A] with A = blockdiag(Aʲ) acting on the stacked xʲ, yʲ
        let a_blocks: Vec<LinearMap> = market.pools.iter().map(|p| p.coord_map.clone()).collect();
        let ga_blocks: Vec<LinearMap> = market.pools.iter().map(|p| p.coord_map.scaled(p.gamma)).collect();
        let n_map = LinearMap::block_diag(&ga_blocks).hstack(&LinearMap::block_diag(&a_blocks).scaled(-1.0))?;
        let coupling = CouplingParams::new(n_map)?;
        let buffers = market.pools.iter().map(|p| p.buffer).collect();
        let mut model = Self {
            market,
            buffers,
            alpha,
            train_risk: true,
            train_buffers: false,
            coupling,
            layout: Layout { m, n, nv, nz },
            v_offsets,
            z_offsets,
            lipschitz: 0.0,
            newton_tol: prox::NEWTON_TOL,
            newton_max: prox::NEWTON_MAX,
        };
        model.after_update()?;
        Ok(model)
    }

    /// The analytic trader: `Wʲ = 0`, `δ_j = 0`.
    pub fn analytic(market: &CfmmMarket, alpha: f64) -> Result<Self> {
        let mut mk = market.clone();
        for (pool, w) in mk.pools.iter_mut().zip(mk.risk_maps.iter_mut()) {
            pool.buffer = 0.0;
            *w = LinearMap::zeros(w.rows(), w.cols());
        }
        let mut model = Self::new(mk, alpha)?;
        model.train_risk = false;
        Ok(model)
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// Step size actually used: `min(alpha, 1/L)`.
    pub fn effective_alpha(&self) -> f64 {
        if self.lipschitz > 0.0 {
            self.alpha.min(1.0 / self.lipschitz)
        } else {
            self.alpha
        }
    }

    pub fn state_len(&self) -> usize {
        self.layout.len()
    }

    /// Pack observed reserves and prices into the model data vector.
    pub fn data_vector(&self, observed: &[Vec<f64>], prices: &[f64]) -> Result<Vec<f64>> {
        ensure!(observed.len() == self.layout.m, Contract, "one observation per pool required");
        ensure!(prices.len() == self.layout.n, Contract, "price vector has wrong length");
        let mut d = Vec::with_capacity(self.layout.nv + self.layout.n);
        for (pool, obs) in self.market.pools.iter().zip(observed) {
            ensure!(obs.len() == pool.local_dim(), Contract, "pool {}: observation has wrong length", pool.id);
            ensure!(obs.iter().all(|&r| r > 0.0), Contract, "pool {}: observed reserves must be positive", pool.id);
            d.extend_from_slice(obs);
        }
        d.extend_from_slice(prices);
        Ok(d)
    }

    fn split_data<'d>(&self, d: &'d [f64]) -> Result<(&'d [f64], &'d [f64])> {
        ensure!(
            d.len() == self.layout.nv + self.layout.n,
            Contract,
            "data has length {}, expected {}",
            d.len(),
            self.layout.nv + self.layout.n
        );
        Ok(d.split_at(self.layout.nv))
    }

    /// Build a trade from a model output `[x; y]` (stacked per pool).
    pub fn trade_from_output(&self, out: &[f64], prices: &[f64]) -> Result<TradeProposal> {
        let Layout { m, n, .. } = self.layout;
        ensure!(out.len() == 2 * m * n, Contract, "output has length {}, expected {}", out.len(), 2 * m * n);
        let rows = |base: usize| (0..m).map(|j| out[base + j * n..base + (j + 1) * n].to_vec()).collect();
        let mut trade = TradeProposal { x: rows(0), y: rows(m * n), utility: 0.0, executed: false };
        // off-pool coordinates carry no utility or constraint; drop them
        for (j, pool) in self.market.pools.iter().enumerate() {
            let toks = pool.tokens();
            for t in 0..n {
                if !toks.contains(&t) {
                    trade.x[j][t] = 0.0;
                    trade.y[j][t] = 0.0;
                }
            }
        }
        trade.clean_dust(DUST_TOL);
        trade.utility = utility_with_prices(&self.market.pools, prices, &trade);
        Ok(trade)
    }

    /// Solve for a trade given observed reserves and prices.
    pub fn trade(&self, observed: &[Vec<f64>], prices: &[f64], stop: &StopRule) -> Result<(TradeProposal, Inference)> {
        let d = self.data_vector(observed, prices)?;
        let inf = super::infer(self, &d, stop)?;
        let trade = self.trade_from_output(&inf.output, prices)?;
        Ok((trade, inf))
    }

    fn buffer_var<'a, G: Graph<'a>>(&'a self, g: &mut G) -> G::V {
        if self.train_buffers {
            let id = ParamId(if self.train_risk { self.layout.m } else { 0 });
            g.param(id, &self.buffers)
        } else {
            g.constant(&self.buffers)
        }
    }

    fn risk_mat<'a, G: Graph<'a>>(&'a self, g: &mut G, j: usize) -> G::M {
        if self.train_risk {
            g.param_mat(ParamId(j), &self.market.risk_maps[j])
        } else {
            g.const_mat(&self.market.risk_maps[j])
        }
    }

    fn prox_f<'a, G: Graph<'a>>(&'a self, g: &mut G, u: &G::V, obs: &[f64], buffers: &G::V) -> Result<G::V> {
        let l = self.layout;
        let v = g.slice(u, 0, l.nv)?;
        let x = g.slice(u, l.x0(), l.m * l.n)?;
        let y = g.slice(u, l.y0(), l.m * l.n)?;
        let z = g.slice(u, l.z0(), l.nz)?;
        let mut v_parts = Vec::with_capacity(l.m);
        let mut z_parts = Vec::new();
        for (j, pool) in self.market.pools.iter().enumerate() {
            let nj = pool.local_dim();
            let vo = self.v_offsets[j];
            let vj = g.slice(&v, vo, nj)?;
            let dj = &obs[vo..vo + nj];
            match (pool.kind, self.z_offsets[j]) {
                (PoolKind::WeightedProduct, Some(zo)) => {
                    let zj = g.slice(&z, zo, nj)?;
                    let (vb, zb) = g.project_logset(&vj, &zj, dj, self.newton_tol, self.newton_max)?;
                    v_parts.push(vb);
                    z_parts.push(zb);
                }
                _ => {
                    // ⟨w, v⟩ ≥ δ ⟨w, d⟩
                    let dj_b = g.slice(buffers, j, 1)?;
                    let offset = g.affine(&dj_b, vector::dot(&pool.weights, dj), 0.0);
                    v_parts.push(g.project_halfspace(&vj, &pool.weights, &offset)?);
                }
            }
        }
        let mut parts = v_parts;
        parts.push(g.clamp(&x, 0.0, f64::INFINITY));
        parts.push(g.clamp(&y, 0.0, f64::INFINITY));
        parts.extend(z_parts);
        Ok(g.concat(&parts))
    }

    fn prox_g<'a, G: Graph<'a>>(&'a self, g: &mut G, u: &G::V, obs: &[f64], buffers: &G::V) -> Result<G::V> {
        let l = self.layout;
        let v = g.slice(u, 0, l.nv)?;
        let q = g.slice(u, l.x0(), 2 * l.m * l.n)?;
        let z = g.slice(u, l.z0(), l.nz)?;
        let n_mat = g.const_mat(self.coupling.n_map());
        let ntv = g.matvec_t(&n_mat, &v)?;
        let rhs = g.add(&q, &ntv)?;
        let q_bar = g.solve_normal(self.coupling.solver(), &rhs)?;
        let v_bar = g.matvec(&n_mat, &q_bar)?;
        let mut parts = vec![v_bar, q_bar];
        for (j, pool) in self.market.pools.iter().enumerate() {
            let Some(zo) = self.z_offsets[j] else { continue };
            let nj = pool.local_dim();
            let vo = self.v_offsets[j];
            let dj = &obs[vo..vo + nj];
            // ln α_j = Σ w ln(1 + δ_j) + ⟨w, ln d⟩
            let log_d: f64 = pool.weights.iter().zip(dj).map(|(w, d)| w * libm::log(*d)).sum();
            let bj = g.slice(buffers, j, 1)?;
            let t = g.affine(&bj, 1.0, 1.0);
            let t = g.ln(&t)?;
            let offset = g.affine(&t, pool.weight_sum(), log_d);
            let zj = g.slice(&z, zo, nj)?;
            parts.push(g.project_hyperplane(&zj, &pool.weights, &offset)?);
        }
        Ok(g.concat(&parts))
    }

    /// `∇h = -∇U_Θ` on the composite variable.
    fn grad_h<'a, G: Graph<'a>>(&'a self, g: &mut G, u: &G::V, prices: &[f64]) -> Result<G::V> {
        let l = self.layout;
        let x = g.slice(u, l.x0(), l.m * l.n)?;
        let y = g.slice(u, l.y0(), l.m * l.n)?;
        let mut gx = Vec::with_capacity(l.m);
        let mut gy = Vec::with_capacity(l.m);
        for (j, pool) in self.market.pools.iter().enumerate() {
            let a = &pool.coord_map;
            let lin = a.apply_transpose(&a.apply(prices)?)?;
            let xj = g.slice(&x, j * l.n, l.n)?;
            let yj = g.slice(&y, j * l.n, l.n)?;
            let diff = g.sub(&xj, &yj)?;
            let am = g.const_mat(a);
            let w = self.risk_mat(g, j);
            let t = g.matvec(&am, &diff)?;
            let t = g.matvec(&w, &t)?;
            let t = g.matvec_t(&w, &t)?;
            let risk = g.matvec_t(&am, &t)?;
            let c = g.constant(&lin);
            let gxj = g.add(&c, &risk)?;
            gy.push(g.scale(&gxj, -1.0));
            gx.push(gxj);
        }
        let zeros_v = g.constant(&vec![0.0; l.nv]);
        let zeros_z = g.constant(&vec![0.0; l.nz]);
        let mut parts = vec![zeros_v];
        parts.extend(gx);
        parts.extend(gy);
        parts.push(zeros_z);
        Ok(g.concat(&parts))
    }

    /// Composite point `ξ = prox_f(ζ)` on plain vectors.
    pub fn xi(&self, zeta: &[f64], d: &[f64]) -> Result<Vec<f64>> {
        let (obs, _) = self.split_data(d)?;
        let mut g = Eval::new();
        let b = self.buffer_var(&mut g);
        self.prox_f(&mut g, &zeta.to_vec(), obs, &b)
    }

    /// Largest distance of `ξ` to the sets defining `f` and `g`: nonnegativity,
    /// log sets, halfspaces, hyperplanes and the coupling.
    pub fn constraint_distance(&self, xi: &[f64], d: &[f64]) -> Result<f64> {
        let (obs, _) = self.split_data(d)?;
        let mut g = Eval::new();
        let b = self.buffer_var(&mut g);
        let xi = xi.to_vec();
        let pf = self.prox_f(&mut g, &xi, obs, &b)?;
        let pg = self.prox_g(&mut g, &xi, obs, &b)?;
        Ok(vector::dist(&pf, &xi).max(vector::dist(&pg, &xi)))
    }

    pub fn layout_dims(&self) -> (usize, usize, usize, usize) {
        let l = self.layout;
        (l.nv, l.m * l.n, l.m * l.n, l.nz)
    }
}

impl ImplicitModel for CfmmModel {
    fn init_state(&self, d: &[f64]) -> Result<Vec<f64>> {
        self.split_data(d)?;
        Ok(vec![0.0; self.layout.len()])
    }

    fn step<'a, G: Graph<'a>>(&'a self, g: &mut G, zeta: &G::V, d: &[f64]) -> Result<G::V> {
        let (obs, prices) = self.split_data(d)?;
        ensure!(g.len(zeta) == self.layout.len(), Contract, "state has length {}, expected {}", g.len(zeta), self.layout.len());
        let alpha = self.effective_alpha();
        let buffers = self.buffer_var(g);
        let mut pf = |g: &mut G, u: &G::V| self.prox_f(g, u, obs, &buffers);
        let mut pg = |g: &mut G, u: &G::V| self.prox_g(g, u, obs, &buffers);
        let mut gh = |g: &mut G, u: &G::V| self.grad_h(g, u, prices);
        let (_, _, next) = davis_yin_update(g, zeta, &mut pf, &mut pg, &mut gh, alpha)?;
        Ok(next)
    }

    /// `[x; y]` of `ξ = prox_f(ζ)`; those blocks only need the clamp.
    fn readout<'a, G: Graph<'a>>(&'a self, g: &mut G, zeta: &G::V) -> Result<G::V> {
        let l = self.layout;
        let q = g.slice(zeta, l.x0(), 2 * l.m * l.n)?;
        Ok(g.clamp(&q, 0.0, f64::INFINITY))
    }

    fn default_stop(&self) -> StopRule {
        StopRule { residual_tol: 1e-7, max_iter: 3000, ..StopRule::default() }
    }

    fn param_blocks(&self) -> Vec<&[f64]> {
        let mut b: Vec<&[f64]> = Vec::new();
        if self.train_risk {
            b.extend(self.market.risk_maps.iter().map(LinearMap::data));
        }
        if self.train_buffers {
            b.push(&self.buffers);
        }
        b
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut b: Vec<&mut [f64]> = Vec::new();
        if self.train_risk {
            b.extend(self.market.risk_maps.iter_mut().map(LinearMap::data_mut));
        }
        if self.train_buffers {
            b.push(&mut self.buffers);
        }
        b
    }

    fn after_update(&mut self) -> Result<()> {
        for (b, pool) in self.buffers.iter_mut().zip(self.market.pools.iter_mut()) {
            *b = b.max(0.0);
            pool.buffer = *b;
        }
        self.lipschitz = self.market.lipschitz()?;
        check_davis_yin_step(self.effective_alpha(), self.lipschitz)
            .map_err(|e| crate::Error::Config(format!("{e}")))
    }
}

/// Solve the arbitrage problem for `mkt` (buffers from its pools) against
/// observed reserves. Uses step size `alpha`.
pub fn arbitrage_infer(mkt: &CfmmMarket, observed: &[Vec<f64>], alpha: f64, stop: &StopRule) -> Result<TradeProposal> {
    let model = CfmmModel::new(mkt.clone(), alpha)?;
    Ok(model.trade(observed, &mkt.prices, stop)?.0)
}
