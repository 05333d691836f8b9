//! Learned proximal-gradient operator for sparse recovery,
//! `T(x; d) = shrink(x - W(Ax - d), θ)`.
//!
//! The gradient step size and the data weight are absorbed into `W`; the
//! sparsity weight survives only through the threshold `θ`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::graph::{Graph, ParamId};
use crate::linops::LinearMap;

use super::ImplicitModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseRecoveryModel {
    pub a: LinearMap,
    pub w: LinearMap,
    /// Length one so it can be registered as a parameter block.
    pub theta: Vec<f64>,
}

impl SparseRecoveryModel {
    pub fn new(a: LinearMap, w: LinearMap, theta: f64) -> Result<Self> {
        ensure!(theta >= 0.0, Contract, "theta must be nonnegative, got {theta}");
        ensure!(
            w.cols() == a.rows() && w.rows() == a.cols(),
            Contract,
            "W must be {}x{}, got {}x{}",
            a.cols(),
            a.rows(),
            w.rows(),
            w.cols()
        );
        Ok(Self { a, w, theta: vec![theta] })
    }

    /// ISTA initialization `W = Aᵀ/‖A‖²`.
    pub fn ista(a: LinearMap, theta: f64) -> Result<Self> {
        let n = a.norm2();
        let step = if n > 0.0 { 1.0 / (n * n) } else { 1.0 };
        let w = a.transpose().scaled(step);
        Self::new(a, w, theta)
    }

    pub fn theta(&self) -> f64 {
        self.theta[0]
    }

    /// `shrink(x - W(Ax - d), θ)` on plain vectors.
    pub fn operator(&self, x: &[f64], d: &[f64]) -> Result<Vec<f64>> {
        super::apply_operator(self, x, d)
    }
}

impl ImplicitModel for SparseRecoveryModel {
    fn init_state(&self, _d: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.a.cols()])
    }

    fn step<'a, G: Graph<'a>>(&'a self, g: &mut G, x: &G::V, d: &[f64]) -> Result<G::V> {
        let a = g.const_mat(&self.a);
        let w = g.param_mat(ParamId(0), &self.w);
        let theta = g.param(ParamId(1), &self.theta);
        let d = g.constant(d);
        let ax = g.matvec(&a, x)?;
        let r = g.sub(&ax, &d)?;
        let wr = g.matvec(&w, &r)?;
        let u = g.sub(x, &wr)?;
        g.shrink(&u, &theta)
    }

    fn readout<'a, G: Graph<'a>>(&'a self, _g: &mut G, state: &G::V) -> Result<G::V> {
        Ok(state.clone())
    }

    fn param_blocks(&self) -> Vec<&[f64]> {
        vec![self.w.data(), &self.theta]
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w.data_mut(), &mut self.theta]
    }

    fn after_update(&mut self) -> Result<()> {
        self.theta[0] = self.theta[0].max(0.0);
        Ok(())
    }
}
