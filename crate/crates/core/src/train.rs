//! Jacobian-free backpropagation.
//!
//! The forward fixed-point solve runs without a tape. The model operator is
//! then applied once more on a [`Tape`] starting from the (constant) fixed
//! point, and the loss is differentiated through that single application
//! only. Tape size is therefore independent of the number of forward
//! iterations.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, ParamId};
use crate::models::{infer_from, ImplicitModel};
use crate::solvers::StopRule;
use crate::tape::Tape;
use crate::vector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Start each forward solve from the sample's previous fixed point.
    #[serde(default = "yes")]
    pub warm_start: bool,
}

fn yes() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            warm_start: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.learning_rate >= 0.0, Config, "learning rate must be nonnegative");
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            Config,
            "moment decays must lie in [0, 1)"
        );
        ensure!(self.eps > 0.0, Config, "eps must be positive");
        ensure!(self.batch_size >= 1, Config, "batch size must be at least 1");
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    /// Mean per-sample loss over the epoch.
    pub train_loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JfbGradient {
    pub loss: f64,
    /// One entry per parameter block, zero-filled where unreached.
    pub grads: Vec<Vec<f64>>,
    pub tape_len: usize,
    pub output: Vec<f64>,
}

/// Differentiate `loss(readout(T(state; d)))` with respect to the model
/// parameters, treating `state` as a constant. `loss` returns the loss and
/// its gradient with respect to the readout.
pub fn jfb_gradient_at<M, L>(model: &M, state: &[f64], d: &[f64], loss: L) -> Result<JfbGradient>
where
    M: ImplicitModel,
    L: FnOnce(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut tape = Tape::new();
    let s = tape.constant(state);
    let next = model.step(&mut tape, &s, d)?;
    let out = model.readout(&mut tape, &next)?;
    let output = tape.value(&out).to_vec();
    let (value, cot) = loss(&output)?;
    ensure!(cot.len() == output.len(), Contract, "loss gradient has length {}, output {}", cot.len(), output.len());
    let g = tape.backward(out, &cot)?;
    let grads = model
        .param_blocks()
        .iter()
        .enumerate()
        .map(|(i, b)| g.get(ParamId(i)).map_or_else(|| vec![0.0; b.len()], <[f64]>::to_vec))
        .collect();
    Ok(JfbGradient { loss: value, grads, tape_len: tape.len(), output })
}

/// `½‖y - target‖²` and its gradient.
pub fn mse_loss(target: &[f64]) -> impl Fn(&[f64]) -> Result<(f64, Vec<f64>)> + '_ {
    move |y| {
        ensure!(y.len() == target.len(), Contract, "target has length {}, output {}", target.len(), y.len());
        let r = vector::sub(y, target);
        Ok((0.5 * vector::dot(&r, &r), r))
    }
}

/// JFB gradient of the MSE loss: untaped solve, then one taped step.
pub fn jfb_gradient<M: ImplicitModel>(model: &M, d: &[f64], target: &[f64], stop: &StopRule) -> Result<JfbGradient> {
    let x0 = model.init_state(d)?;
    let inf = infer_from(model, d, &x0, stop)?;
    jfb_gradient_at(model, &inf.state, d, mse_loss(target))
}

/// Adam over a model's parameter blocks.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    cfg: TrainConfig,
}

impl Adam {
    pub fn new<M: ImplicitModel>(model: &M, cfg: TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = model.param_blocks().iter().map(|b| vec![0.0; b.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0, cfg }
    }

    pub fn step<M: ImplicitModel>(&mut self, model: &mut M, grads: &[Vec<f64>]) -> Result<()> {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - libm::pow(c.beta1, f64::from(self.t));
        let bc2 = 1.0 - libm::pow(c.beta2, f64::from(self.t));
        for (((block, g), m), v) in model.param_blocks_mut().into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..block.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                block[i] -= c.learning_rate * mh / (libm::sqrt(vh) + c.eps);
            }
        }
        model.after_update()
    }
}

/// Mini-batch JFB training with a per-sample loss. `loss(i, output)`
/// returns the loss of sample `i` and its gradient with respect to the
/// model readout.
pub fn train_with<M, L>(
    model: &mut M,
    data: &[Vec<f64>],
    cfg: &TrainConfig,
    stop: &StopRule,
    mut loss: L,
) -> Result<Vec<LossReport>>
where
    M: ImplicitModel,
    L: FnMut(usize, &[f64]) -> Result<(f64, Vec<f64>)>,
{
    ensure!(!data.is_empty(), Config, "training set is empty");
    cfg.validate()?;
    stop.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model, *cfg);
    let mut states: Vec<Option<Vec<f64>>> = vec![None; data.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut reports = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut gnorm_sum, mut batches) = (0.0, 0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: Vec<Vec<f64>> = model.param_blocks().iter().map(|p| vec![0.0; p.len()]).collect();
            for &i in batch {
                let d = &data[i];
                let start = match (&states[i], cfg.warm_start) {
                    (Some(s), true) => s.clone(),
                    _ => model.init_state(d)?,
                };
                let inf = infer_from(&*model, d, &start, stop)?;
                let jfb = jfb_gradient_at(&*model, &inf.state, d, |y| loss(i, y))?;
                if !jfb.loss.is_finite() {
                    return Err(Error::Numerical(format!("non-finite loss at epoch {epoch}, batch {b}, sample {i}")));
                }
                loss_sum += jfb.loss;
                for (a, g) in acc.iter_mut().zip(&jfb.grads) {
                    vector::axpy(a, 1.0 / batch.len() as f64, g);
                }
                states[i] = Some(inf.state);
            }
            let gnorm = libm::sqrt(acc.iter().map(|g| vector::dot(g, g)).sum::<f64>());
            if !gnorm.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient at epoch {epoch}, batch {b}")));
            }
            gnorm_sum += gnorm;
            batches += 1;
            adam.step(model, &acc)?;
        }
        reports.push(LossReport {
            epoch,
            train_loss: loss_sum / data.len() as f64,
            grad_norm: gnorm_sum / batches as f64,
        });
    }
    Ok(reports)
}

/// Mini-batch JFB training on `½‖readout - target‖²`.
pub fn train<M: ImplicitModel>(
    model: &mut M,
    dataset: &[(Vec<f64>, Vec<f64>)],
    cfg: &TrainConfig,
    stop: &StopRule,
) -> Result<Vec<LossReport>> {
    let data: Vec<Vec<f64>> = dataset.iter().map(|(d, _)| d.clone()).collect();
    train_with(model, &data, cfg, stop, |i, y| mse_loss(&dataset[i].1)(y))
}
