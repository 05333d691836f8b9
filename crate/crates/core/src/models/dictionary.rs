//! Models solved by linearized ADMM with `f = ‖·‖₁`:
//!
//! * [`IdmModel`]: `min ‖Kx‖₁ s.t. Ax = d` (implicit dictionary model).
//! * [`BoxL1Model`]: `min_{x ∈ [0,1]ⁿ} ‖Kx‖₁ s.t. ‖Ax - d‖ ≤ δ`.
//!
//! The packed state is `[x; p; w; ν₁; ν₂]`. The equality variant never
//! touches `w`, which stays at its initial value.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::graph::{Graph, ParamId};
use crate::linops::LinearMap;
use crate::solvers::{ladmm_update, Fidelity, LadmmSteps, LadmmVars, StopRule};

use super::ImplicitModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    n: usize,
    kr: usize,
    mr: usize,
}

impl Layout {
    fn of(k: &LinearMap, a: &LinearMap) -> Self {
        Self { n: k.cols(), kr: k.rows(), mr: a.rows() }
    }

    fn len(&self) -> usize {
        self.n + 2 * self.kr + 2 * self.mr
    }

    fn unpack<'a, G: Graph<'a>>(&self, g: &mut G, s: &G::V) -> Result<LadmmVars<G::V>> {
        let Layout { n, kr, mr } = *self;
        ensure!(g.len(s) == self.len(), Contract, "state has length {}, expected {}", g.len(s), self.len());
        Ok(LadmmVars {
            x: g.slice(s, 0, n)?,
            p: g.slice(s, n, kr)?,
            w: g.slice(s, n + kr, mr)?,
            nu1: g.slice(s, n + kr + mr, kr)?,
            nu2: g.slice(s, n + 2 * kr + mr, mr)?,
        })
    }
}

fn pack<'a, G: Graph<'a>>(g: &mut G, v: &LadmmVars<G::V>) -> G::V {
    g.concat(&[v.x.clone(), v.p.clone(), v.w.clone(), v.nu1.clone(), v.nu2.clone()])
}

#[allow(clippy::too_many_arguments)]
fn l1_step<'a, G: Graph<'a>>(
    g: &mut G,
    state: &G::V,
    k: &G::M,
    a: &G::M,
    layout: Layout,
    fidelity: &Fidelity<G::V>,
    unit_box: bool,
    steps: &LadmmSteps,
) -> Result<G::V> {
    let vars = layout.unpack(g, state)?;
    let lambda = g.constant(&[steps.lambda]);
    let mut prox_f = |g: &mut G, u: &G::V| g.shrink(u, &lambda);
    let mut prox_h = |g: &mut G, u: &G::V| Ok(if unit_box { g.clamp(u, 0.0, 1.0) } else { u.clone() });
    let next = ladmm_update(g, &vars, k, a, &mut prox_f, &mut prox_h, fidelity, steps)?;
    Ok(pack(g, &next))
}

fn x_block<'a, G: Graph<'a>>(g: &mut G, state: &G::V, n: usize) -> Result<G::V> {
    g.slice(state, 0, n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdmModel {
    pub a: LinearMap,
    pub k: LinearMap,
    pub steps: LadmmSteps,
    /// Recompute `β = 0.5/‖[K; A]‖²` whenever `K` changes.
    pub auto_beta: bool,
}

impl IdmModel {
    pub fn new(a: LinearMap, k: LinearMap) -> Result<Self> {
        let steps = LadmmSteps::defaults_for(&k, &a)?;
        Self::with_steps(a, k, steps)
    }

    pub fn with_steps(a: LinearMap, k: LinearMap, steps: LadmmSteps) -> Result<Self> {
        ensure!(k.rows() == k.cols(), Contract, "K must be square, got {}x{}", k.rows(), k.cols());
        ensure!(k.cols() == a.cols(), Contract, "K is {}x{} but A has {} columns", k.rows(), k.cols(), a.cols());
        steps.validate()?;
        Ok(Self { a, k, steps, auto_beta: true })
    }

    pub fn state_len(&self) -> usize {
        Layout::of(&self.k, &self.a).len()
    }

    pub fn infer(&self, d: &[f64], stop: &StopRule) -> Result<super::Inference> {
        super::infer(self, d, stop)
    }
}

impl ImplicitModel for IdmModel {
    fn init_state(&self, d: &[f64]) -> Result<Vec<f64>> {
        ensure!(d.len() == self.a.rows(), Contract, "data has length {}, expected {}", d.len(), self.a.rows());
        Ok(vec![0.0; self.state_len()])
    }

    fn step<'a, G: Graph<'a>>(&'a self, g: &mut G, state: &G::V, d: &[f64]) -> Result<G::V> {
        let k = g.param_mat(ParamId(0), &self.k);
        let a = g.const_mat(&self.a);
        let fidelity = Fidelity::Equality { d: g.constant(d) };
        l1_step(g, state, &k, &a, Layout::of(&self.k, &self.a), &fidelity, false, &self.steps)
    }

    fn readout<'a, G: Graph<'a>>(&'a self, g: &mut G, state: &G::V) -> Result<G::V> {
        x_block(g, state, self.k.cols())
    }

    fn param_blocks(&self) -> Vec<&[f64]> {
        vec![self.k.data()]
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.k.data_mut()]
    }

    fn after_update(&mut self) -> Result<()> {
        if self.auto_beta {
            self.steps = LadmmSteps::with_alpha(self.steps.alpha, &self.k, &self.a)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxL1Model {
    pub a: LinearMap,
    pub k: LinearMap,
    pub delta: f64,
    pub steps: LadmmSteps,
    pub train_k: bool,
}

impl BoxL1Model {
    pub fn new(a: LinearMap, k: LinearMap, delta: f64) -> Result<Self> {
        let steps = LadmmSteps::defaults_for(&k, &a)?;
        Self::with_steps(a, k, delta, steps)
    }

    pub fn with_steps(a: LinearMap, k: LinearMap, delta: f64, steps: LadmmSteps) -> Result<Self> {
        ensure!(delta >= 0.0, Contract, "delta must be nonnegative, got {delta}");
        ensure!(k.cols() == a.cols(), Contract, "K has {} columns but A has {}", k.cols(), a.cols());
        steps.validate()?;
        Ok(Self { a, k, delta, steps, train_k: false })
    }

    pub fn state_len(&self) -> usize {
        Layout::of(&self.k, &self.a).len()
    }

    pub fn infer(&self, d: &[f64], stop: &StopRule) -> Result<super::Inference> {
        super::infer(self, d, stop)
    }
}

impl ImplicitModel for BoxL1Model {
    fn init_state(&self, d: &[f64]) -> Result<Vec<f64>> {
        ensure!(d.len() == self.a.rows(), Contract, "data has length {}, expected {}", d.len(), self.a.rows());
        Ok(vec![0.0; self.state_len()])
    }

    fn step<'a, G: Graph<'a>>(&'a self, g: &mut G, state: &G::V, d: &[f64]) -> Result<G::V> {
        let k = if self.train_k { g.param_mat(ParamId(0), &self.k) } else { g.const_mat(&self.k) };
        let a = g.const_mat(&self.a);
        let fidelity = Fidelity::Ball { center: g.constant(d), radius: self.delta };
        l1_step(g, state, &k, &a, Layout::of(&self.k, &self.a), &fidelity, true, &self.steps)
    }

    fn readout<'a, G: Graph<'a>>(&'a self, g: &mut G, state: &G::V) -> Result<G::V> {
        x_block(g, state, self.k.cols())
    }

    fn param_blocks(&self) -> Vec<&[f64]> {
        if self.train_k {
            vec![self.k.data()]
        } else {
            vec![]
        }
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        if self.train_k {
            vec![self.k.data_mut()]
        } else {
            vec![]
        }
    }
}
