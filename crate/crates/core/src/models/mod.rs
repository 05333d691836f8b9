//! Implicit model instantiations.
//!
//! Every model exposes its operator `T_Θ(state; d)` through [`ImplicitModel`]
//! written once against [`Graph`]. The inference is a readout of the fixed
//! point of that operator. For sparse recovery the state is the signal
//! itself; the splitting-based models carry their auxiliary variables in a
//! packed state vector.

use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Eval, Graph};
use crate::solvers::{iterate_to_fixed_point, FixedPointTrace, StopRule};

pub mod cfmm;
pub mod dictionary;
pub mod sparse;

pub use cfmm::{CfmmMarket, CfmmModel, CfmmPool, PoolKind, TradeProposal};
pub use dictionary::{BoxL1Model, IdmModel};
pub use sparse::SparseRecoveryModel;

pub trait ImplicitModel {
    /// Starting state for data `d`.
    fn init_state(&self, d: &[f64]) -> Result<Vec<f64>>;

    /// One application of the model operator.
    fn step<'a, G: Graph<'a>>(&'a self, g: &mut G, state: &G::V, d: &[f64]) -> Result<G::V>;

    /// Map a state to the model inference.
    fn readout<'a, G: Graph<'a>>(&'a self, g: &mut G, state: &G::V) -> Result<G::V>;

    fn default_stop(&self) -> StopRule {
        StopRule::default()
    }

    /// Trainable parameter blocks; block `i` is registered as `ParamId(i)`.
    fn param_blocks(&self) -> Vec<&[f64]>;
    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]>;

    /// Restore invariants after the parameters were changed (projections
    /// onto feasible parameter sets, cached step sizes).
    fn after_update(&mut self) -> Result<()> {
        Ok(())
    }

    fn param_count(&self) -> usize {
        self.param_blocks().iter().map(|b| b.len()).sum()
    }
}

/// Result of an untaped forward solve.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub output: Vec<f64>,
    pub state: Vec<f64>,
    pub trace: FixedPointTrace,
}

/// `T_Θ(state; d)` on plain vectors.
pub fn apply_operator<M: ImplicitModel>(model: &M, state: &[f64], d: &[f64]) -> Result<Vec<f64>> {
    let mut g = Eval::new();
    model.step(&mut g, &state.to_vec(), d)
}

pub fn readout<M: ImplicitModel>(model: &M, state: &[f64]) -> Result<Vec<f64>> {
    let mut g = Eval::new();
    model.readout(&mut g, &state.to_vec())
}

/// Run the fixed-point iteration from the model's initial state.
pub fn infer<M: ImplicitModel>(model: &M, d: &[f64], stop: &StopRule) -> Result<Inference> {
    let x0 = model.init_state(d)?;
    infer_from(model, d, &x0, stop)
}

/// Run the fixed-point iteration from a given state (warm start).
pub fn infer_from<M: ImplicitModel>(
    model: &M,
    d: &[f64],
    state0: &[f64],
    stop: &StopRule,
) -> Result<Inference> {
    let trace = iterate_to_fixed_point(|s| apply_operator(model, s, d), state0, stop)?;
    let state = trace.final_point.clone();
    let output = readout(model, &state)?;
    Ok(Inference { output, state, trace })
}
