//! Fixed-point driver and the two splitting schemes.
//!
//! The splitting updates are written against [`Graph`] so the same code runs
//! in the untaped forward solve and on the tape for the final JFB step.
//! [`ladmm_step`] and [`davis_yin_step`] are plain-vector wrappers.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::graph::{Eval, Graph};
use crate::linops::LinearMap;
use crate::prox::BallConstraint;
use crate::vector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    /// `‖x^k - x^{k-1}‖`
    #[default]
    IterateResidual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub residual_tol: f64,
    pub max_iter: usize,
    #[serde(default)]
    pub residual_kind: ResidualKind,
}

impl StopRule {
    pub fn new(residual_tol: f64, max_iter: usize) -> Result<Self> {
        let rule = Self { residual_tol, max_iter, residual_kind: ResidualKind::IterateResidual };
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.residual_tol > 0.0 && self.residual_tol.is_finite(),
            Config,
            "residual_tol must be positive, got {}",
            self.residual_tol
        );
        ensure!(self.max_iter >= 1, Config, "max_iter must be at least 1");
        Ok(())
    }
}

impl Default for StopRule {
    fn default() -> Self {
        Self { residual_tol: 1e-7, max_iter: 5000, residual_kind: ResidualKind::IterateResidual }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointTrace {
    pub final_point: Vec<f64>,
    pub iterations: usize,
    pub residuals: Vec<f64>,
    pub converged: bool,
}

impl FixedPointTrace {
    pub fn last_residual(&self) -> Option<f64> {
        self.residuals.last().copied()
    }
}

/// Iterate `x <- t(x)` from `x0` until the iterate residual drops to
/// `stop.residual_tol` or `stop.max_iter` applications have been made.
///
/// The data `d` is whatever `t` captures.
pub fn iterate_to_fixed_point<F>(mut t: F, x0: &[f64], stop: &StopRule) -> Result<FixedPointTrace>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    stop.validate()?;
    let mut x = x0.to_vec();
    let mut residuals = Vec::new();
    let mut converged = false;
    for k in 1..=stop.max_iter {
        let next = t(&x)?;
        ensure!(
            next.len() == x.len(),
            Contract,
            "operator changed the state length from {} to {}",
            x.len(),
            next.len()
        );
        if !vector::all_finite(&next) {
            return Err(Error::Divergence { iteration: k });
        }
        let r = vector::dist(&next, &x);
        x = next;
        residuals.push(r);
        if r <= stop.residual_tol {
            converged = true;
            break;
        }
    }
    Ok(FixedPointTrace { iterations: residuals.len(), final_point: x, residuals, converged })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LadmmSteps {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl LadmmSteps {
    /// `α = 0.1`, `β = 0.5/‖S‖²`, `λ = 0.5/α` with `S = [K; M]`.
    pub fn defaults_for(k: &LinearMap, m: &LinearMap) -> Result<Self> {
        Self::with_alpha(0.1, k, m)
    }

    /// Same rule as [`LadmmSteps::defaults_for`] with a different `α`.
    pub fn with_alpha(alpha: f64, k: &LinearMap, m: &LinearMap) -> Result<Self> {
        ensure!(alpha > 0.0, Config, "L-ADMM alpha must be positive");
        let s = k.vstack(m)?;
        let norm = s.norm2();
        let beta = if norm > 0.0 { 0.5 / (norm * norm) } else { 1.0 };
        Ok(Self { alpha, beta, lambda: 0.5 / alpha })
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.alpha > 0.0 && self.beta > 0.0 && self.lambda > 0.0,
            Config,
            "L-ADMM step sizes must be positive: {self:?}"
        );
        Ok(())
    }
}

/// The constraint on `Mx`: a ball around `d`, or exact equality `Mx = d`.
#[derive(Debug, Clone)]
pub enum Fidelity<V> {
    Ball { center: V, radius: f64 },
    Equality { d: V },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LadmmVars<V> {
    pub x: V,
    pub p: V,
    /// Unused (and left untouched) by the equality variant.
    pub w: V,
    pub nu1: V,
    pub nu2: V,
}

pub type ProxFn<'c, G, V> = &'c mut dyn FnMut(&mut G, &V) -> Result<V>;

/// One linearized ADMM update in the order `p, w, ν₁, ν₂, r, x`.
///
/// `prox_f` evaluates `prox_{λf}` and `prox_h` evaluates `prox_{βh}`.
#[allow(clippy::too_many_arguments)]
pub fn ladmm_update<'a, G: Graph<'a>>(
    g: &mut G,
    s: &LadmmVars<G::V>,
    k: &G::M,
    m: &G::M,
    prox_f: ProxFn<'_, G, G::V>,
    prox_h: ProxFn<'_, G, G::V>,
    fidelity: &Fidelity<G::V>,
    steps: &LadmmSteps,
) -> Result<LadmmVars<G::V>> {
    let LadmmSteps { alpha, beta, lambda } = *steps;

    let kx = g.matvec(k, &s.x)?;
    let mx = g.matvec(m, &s.x)?;

    let t = g.sub(&kx, &s.p)?;
    let t = g.scale(&t, alpha);
    let t = g.add(&s.nu1, &t)?;
    let t = g.scale(&t, lambda);
    let t = g.add(&s.p, &t)?;
    let p = prox_f(g, &t)?;

    let (w, mx_minus_w) = match fidelity {
        Fidelity::Ball { center, radius } => {
            let t = g.sub(&mx, &s.w)?;
            let t = g.scale(&t, alpha);
            let t = g.add(&s.nu2, &t)?;
            let t = g.scale(&t, lambda);
            let t = g.add(&s.w, &t)?;
            let w = g.project_ball(&t, center, *radius)?;
            let diff = g.sub(&mx, &w)?;
            (w, diff)
        }
        Fidelity::Equality { d } => (s.w.clone(), g.sub(&mx, d)?),
    };

    let t = g.sub(&kx, &p)?;
    let t = g.scale(&t, alpha);
    let nu1 = g.add(&s.nu1, &t)?;
    let t = g.scale(&mx_minus_w, alpha);
    let nu2 = g.add(&s.nu2, &t)?;

    let t1 = g.affine(&nu1, 2.0, 0.0);
    let t1 = g.sub(&t1, &s.nu1)?;
    let t1 = g.matvec_t(k, &t1)?;
    let t2 = g.affine(&nu2, 2.0, 0.0);
    let t2 = g.sub(&t2, &s.nu2)?;
    let t2 = g.matvec_t(m, &t2)?;
    let r = g.add(&t1, &t2)?;

    let t = g.scale(&r, beta);
    let t = g.sub(&s.x, &t)?;
    let x = prox_h(g, &t)?;

    Ok(LadmmVars { x, p, w, nu1, nu2 })
}

/// Plain-vector L-ADMM iterate with its step sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct LadmmState {
    pub vars: LadmmVars<Vec<f64>>,
    pub steps: LadmmSteps,
}

impl LadmmState {
    /// Zero state sized for `K` (`p`, `ν₁`) and `M` (`w`, `ν₂`).
    pub fn zeros(k: &LinearMap, m: &LinearMap, steps: LadmmSteps) -> Result<Self> {
        steps.validate()?;
        ensure!(
            k.cols() == m.cols(),
            Contract,
            "K has {} columns, M has {}",
            k.cols(),
            m.cols()
        );
        let z = |n: usize| alloc::vec![0.0; n];
        Ok(Self {
            vars: LadmmVars {
                x: z(k.cols()),
                p: z(k.rows()),
                w: z(m.rows()),
                nu1: z(k.rows()),
                nu2: z(m.rows()),
            },
            steps,
        })
    }
}

/// Constraint on `Mx` for [`ladmm_step`].
#[derive(Debug, Clone, Copy)]
pub enum LadmmConstraint<'c> {
    Ball(&'c BallConstraint),
    Equality(&'c [f64]),
}

/// One L-ADMM update on plain vectors. `prox_f(u, λ)` must return
/// `prox_{λf}(u)`; `prox_h(u, β)` must return `prox_{βh}(u)`.
pub fn ladmm_step<PF, PH>(
    state: &LadmmState,
    k: &LinearMap,
    m: &LinearMap,
    prox_f: PF,
    prox_h: PH,
    constraint: LadmmConstraint<'_>,
) -> Result<LadmmState>
where
    PF: Fn(&[f64], f64) -> Vec<f64>,
    PH: Fn(&[f64], f64) -> Vec<f64>,
{
    state.steps.validate()?;
    let v = &state.vars;
    ensure!(
        v.x.len() == k.cols()
            && v.x.len() == m.cols()
            && v.p.len() == k.rows()
            && v.nu1.len() == k.rows()
            && v.w.len() == m.rows()
            && v.nu2.len() == m.rows(),
        Contract,
        "L-ADMM state does not match K ({}x{}) and M ({}x{})",
        k.rows(),
        k.cols(),
        m.rows(),
        m.cols()
    );
    let fidelity = match constraint {
        LadmmConstraint::Ball(b) => {
            ensure!(b.center.len() == m.rows(), Contract, "ball center has wrong length");
            Fidelity::Ball { center: b.center.clone(), radius: b.radius }
        }
        LadmmConstraint::Equality(d) => {
            ensure!(d.len() == m.rows(), Contract, "data has wrong length");
            Fidelity::Equality { d: d.to_vec() }
        }
    };
    let (lambda, beta) = (state.steps.lambda, state.steps.beta);
    let mut pf = |_: &mut Eval<'_>, u: &Vec<f64>| Ok(prox_f(u, lambda));
    let mut ph = |_: &mut Eval<'_>, u: &Vec<f64>| Ok(prox_h(u, beta));
    let mut g = Eval::new();
    let vars = ladmm_update(&mut g, v, &k, &m, &mut pf, &mut ph, &fidelity, &state.steps)?;
    Ok(LadmmState { vars, steps: state.steps })
}

/// One Davis-Yin update from the governing sequence `ζ`. Returns
/// `(ξ, ψ, ζ⁺)` with
/// `ξ = prox_f(ζ)`, `ψ = prox_g(2ξ - ζ - α∇h(ξ))`, `ζ⁺ = ζ + ψ - ξ`.
/// The step size is baked into the proximal maps.
pub fn davis_yin_update<'a, G: Graph<'a>>(
    g: &mut G,
    zeta: &G::V,
    prox_f: ProxFn<'_, G, G::V>,
    prox_g: ProxFn<'_, G, G::V>,
    grad_h: ProxFn<'_, G, G::V>,
    alpha: f64,
) -> Result<(G::V, G::V, G::V)> {
    let xi = prox_f(g, zeta)?;
    let grad = grad_h(g, &xi)?;
    let t = g.affine(&xi, 2.0, 0.0);
    let t = g.sub(&t, zeta)?;
    let gs = g.scale(&grad, alpha);
    let t = g.sub(&t, &gs)?;
    let psi = prox_g(g, &t)?;
    let t = g.add(zeta, &psi)?;
    let zeta_next = g.sub(&t, &xi)?;
    Ok((xi, psi, zeta_next))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DavisYinState {
    pub zeta: Vec<f64>,
    pub xi: Vec<f64>,
    pub psi: Vec<f64>,
    pub alpha: f64,
}

impl DavisYinState {
    /// Checks `0 < α < 2/L`. `L = 0` (no smooth term) admits any `α > 0`.
    pub fn new(zeta0: Vec<f64>, alpha: f64, lipschitz: f64) -> Result<Self> {
        check_davis_yin_step(alpha, lipschitz)?;
        let n = zeta0.len();
        Ok(Self { zeta: zeta0, xi: alloc::vec![0.0; n], psi: alloc::vec![0.0; n], alpha })
    }
}

pub fn check_davis_yin_step(alpha: f64, lipschitz: f64) -> Result<()> {
    ensure!(lipschitz >= 0.0, Config, "Lipschitz constant must be nonnegative");
    ensure!(
        alpha > 0.0 && alpha * lipschitz < 2.0,
        Config,
        "Davis-Yin step size {alpha} outside (0, 2/L) with L = {lipschitz}"
    );
    Ok(())
}

/// One Davis-Yin update on plain vectors. The proximal maps are taken at the
/// state's step size by the caller.
pub fn davis_yin_step<PF, PG, GH>(
    state: &DavisYinState,
    prox_f: PF,
    prox_g: PG,
    grad_h: GH,
) -> Result<DavisYinState>
where
    PF: Fn(&[f64]) -> Result<Vec<f64>>,
    PG: Fn(&[f64]) -> Result<Vec<f64>>,
    GH: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = state.zeta.len();
    let check = |v: Vec<f64>, what: &str| -> Result<Vec<f64>> {
        ensure!(v.len() == n, Contract, "{what} returned length {}, expected {n}", v.len());
        Ok(v)
    };
    let mut pf = |_: &mut Eval<'_>, u: &Vec<f64>| check(prox_f(u)?, "prox_f");
    let mut pg = |_: &mut Eval<'_>, u: &Vec<f64>| check(prox_g(u)?, "prox_g");
    let mut gh = |_: &mut Eval<'_>, u: &Vec<f64>| check(grad_h(u)?, "grad_h");
    let mut g = Eval::new();
    let (xi, psi, zeta) =
        davis_yin_update(&mut g, &state.zeta, &mut pf, &mut pg, &mut gh, state.alpha)?;
    Ok(DavisYinState { zeta, xi, psi, alpha: state.alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prox;
    use alloc::vec;

    #[test]
    fn contraction_converges() {
        let stop = StopRule::new(1e-8, 1000).unwrap();
        let tr = iterate_to_fixed_point(|x| Ok(vector::scale(x, 0.5)), &[1.0], &stop).unwrap();
        assert!(tr.converged);
        assert!(tr.final_point[0].abs() < 1e-7);
    }

    #[test]
    fn identity_converges_in_one_step() {
        let stop = StopRule::default();
        let tr = iterate_to_fixed_point(|x| Ok(x.to_vec()), &[3.0, -1.0], &stop).unwrap();
        assert!(tr.converged);
        assert_eq!(tr.iterations, 1);
        assert_eq!(tr.residuals, vec![0.0]);
    }

    #[test]
    fn nan_reports_iteration() {
        let stop = StopRule::default();
        let mut k = 0;
        let err = iterate_to_fixed_point(
            |x| {
                k += 1;
                Ok(if k == 3 { vec![f64::NAN] } else { vector::scale(x, 0.9) })
            },
            &[1.0],
            &stop,
        )
        .unwrap_err();
        assert_eq!(err, Error::Divergence { iteration: 3 });
    }

    #[test]
    fn unconverged_run_is_flagged() {
        let stop = StopRule::new(1e-12, 5).unwrap();
        let tr = iterate_to_fixed_point(|x| Ok(vector::scale(x, 0.9)), &[1.0], &stop).unwrap();
        assert!(!tr.converged);
        assert_eq!(tr.iterations, 5);
    }

    #[test]
    fn bad_stop_rule() {
        assert!(StopRule::new(0.0, 10).is_err());
        assert!(StopRule::new(1e-6, 0).is_err());
    }

    fn run_ladmm(
        k: &LinearMap,
        m: &LinearMap,
        d: &[f64],
        iters: usize,
    ) -> LadmmState {
        let steps = LadmmSteps::defaults_for(k, m).unwrap();
        let mut s = LadmmState::zeros(k, m, steps).unwrap();
        for _ in 0..iters {
            s = ladmm_step(
                &s,
                k,
                m,
                prox::shrink,
                |u, _| u.to_vec(),
                LadmmConstraint::Equality(d),
            )
            .unwrap();
        }
        s
    }

    #[test]
    fn ladmm_equality_pins_solution() {
        let i = LinearMap::identity(3);
        let d = [0.5, -1.0, 2.0];
        let s = run_ladmm(&i, &i, &d, 4000);
        assert!(vector::dist(&s.vars.x, &d) < 1e-6, "{:?}", s.vars.x);
    }

    #[test]
    fn ladmm_zero_data_gives_zero() {
        let k = LinearMap::identity(4);
        let m = LinearMap::from_rows(&[vec![1.0, 2.0, 0.0, -1.0], vec![0.0, 1.0, 1.0, 1.0]]).unwrap();
        let s = run_ladmm(&k, &m, &[0.0, 0.0], 50);
        assert!(vector::norm(&s.vars.x) < 1e-12);
    }

    #[test]
    fn ladmm_ball_with_zero_radius_matches_equality() {
        let k = LinearMap::identity(3);
        let m = LinearMap::from_rows(&[vec![1.0, 0.5, 0.0], vec![0.0, 1.0, -1.0]]).unwrap();
        let d = [1.0, 0.3];
        let steps = LadmmSteps::defaults_for(&k, &m).unwrap();
        let ball = BallConstraint::new(d.to_vec(), 0.0).unwrap();
        let mut a = LadmmState::zeros(&k, &m, steps).unwrap();
        let mut b = a.clone();
        for _ in 0..20 {
            a = ladmm_step(&a, &k, &m, prox::shrink, |u, _| u.to_vec(), LadmmConstraint::Equality(&d))
                .unwrap();
            b = ladmm_step(&b, &k, &m, prox::shrink, |u, _| u.to_vec(), LadmmConstraint::Ball(&ball))
                .unwrap();
        }
        assert!(vector::dist(&a.vars.x, &b.vars.x) < 1e-12);
        assert!(vector::dist(&a.vars.nu2, &b.vars.nu2) < 1e-12);
    }

    #[test]
    fn ladmm_dimension_mismatch() {
        let k = LinearMap::identity(3);
        let m = LinearMap::identity(3);
        let steps = LadmmSteps::defaults_for(&k, &m).unwrap();
        let s = LadmmState::zeros(&k, &m, steps).unwrap();
        let r = ladmm_step(&s, &k, &m, prox::shrink, |u, _| u.to_vec(), LadmmConstraint::Equality(&[1.0]));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn davis_yin_constant_proximals() {
        let target = vec![1.0, -2.0, 0.5];
        let s = DavisYinState::new(vec![0.0; 3], 1.0, 0.0).unwrap();
        let t = target.clone();
        let s = davis_yin_step(&s, |_| Ok(t.clone()), |_| Ok(t.clone()), |x| Ok(vec![0.0; x.len()]))
            .unwrap();
        assert_eq!(s.xi, target);
        assert_eq!(s.psi, target);
    }

    #[test]
    fn davis_yin_origin() {
        let mut s = DavisYinState::new(vec![3.0, -1.0], 0.5, 1.0).unwrap();
        for _ in 0..5 {
            s = davis_yin_step(
                &s,
                |x| Ok(vec![0.0; x.len()]),
                |x| Ok(vec![0.0; x.len()]),
                |x| Ok(x.to_vec()),
            )
            .unwrap();
        }
        assert_eq!(s.xi, vec![0.0, 0.0]);
    }

    #[test]
    fn davis_yin_step_size_checked() {
        assert!(DavisYinState::new(vec![0.0], 2.0, 1.0).is_err());
        assert!(DavisYinState::new(vec![0.0], 0.0, 1.0).is_err());
        assert!(DavisYinState::new(vec![0.0], 1.9, 1.0).is_ok());
        assert!(DavisYinState::new(vec![0.0], 100.0, 0.0).is_ok());
    }
}
