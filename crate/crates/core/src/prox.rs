//! Proximal and projection operators.
//!
//! All operators are pure functions of their inputs. The log-set projection
//! is the only iterative one: it finds the root of the point-slope optimality
//! function with a Newton method safeguarded by bisection.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::linops::{LinearMap, NormalSolver};
use crate::vector;

pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX: usize = 100;

/// Euclidean ball `{u : ‖u - center‖ ≤ radius}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallConstraint {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl BallConstraint {
    pub fn new(center: Vec<f64>, radius: f64) -> Result<Self> {
        ensure!(radius >= 0.0, Contract, "ball radius must be nonnegative, got {radius}");
        Ok(Self { center, radius })
    }
}

/// Shift `d` of the element-wise log set `{(v, z) : z ≤ ln(v + d), v + d ≥ 0}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogSetParams {
    pub shift: Vec<f64>,
}

impl LogSetParams {
    pub fn new(shift: Vec<f64>) -> Result<Self> {
        ensure!(
            shift.iter().all(|&d| d > 0.0 && d.is_finite()),
            Contract,
            "log-set shift must be positive"
        );
        Ok(Self { shift })
    }
}

/// Hyperplane `{z : ⟨normal, z⟩ = offset}`; also used as the halfspace
/// `{z : ⟨normal, z⟩ ≥ offset}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperplaneParams {
    pub normal: Vec<f64>,
    pub offset: f64,
}

impl HyperplaneParams {
    pub fn new(normal: Vec<f64>, offset: f64) -> Result<Self> {
        let p = Self { normal, offset };
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<f64> {
        let nn = vector::dot(&self.normal, &self.normal);
        ensure!(nn > 0.0, Contract, "hyperplane normal must be nonzero");
        Ok(nn)
    }
}

/// Linear coupling set `{(v, q) : v = N q}` with the factorization of
/// `I + NᵀN` computed once at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingParams {
    n_map: LinearMap,
    solver: NormalSolver,
}

impl CouplingParams {
    pub fn new(n_map: LinearMap) -> Result<Self> {
        let solver = NormalSolver::for_coupling(&n_map)?;
        Ok(Self { n_map, solver })
    }

    pub fn n_map(&self) -> &LinearMap {
        &self.n_map
    }

    pub fn solver(&self) -> &NormalSolver {
        &self.solver
    }

    /// Dimension of `v`.
    pub fn v_dim(&self) -> usize {
        self.n_map.rows()
    }

    /// Dimension of `q = (x, y)`.
    pub fn q_dim(&self) -> usize {
        self.n_map.cols()
    }
}

/// Soft threshold `sign(x) max(|x| - θ, 0)`.
pub fn shrink(x: &[f64], theta: f64) -> Vec<f64> {
    x.iter().map(|&xi| shrink_scalar(xi, theta)).collect()
}

#[inline]
pub fn shrink_scalar(x: f64, theta: f64) -> f64 {
    if x > theta {
        x - theta
    } else if x < -theta {
        x + theta
    } else {
        0.0
    }
}

pub fn project_box(x: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    debug_assert!(lo <= hi);
    x.iter().map(|&xi| xi.clamp(lo, hi)).collect()
}

pub fn project_nonneg(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&xi| xi.max(0.0)).collect()
}

pub fn project_ball(x: &[f64], c: &BallConstraint) -> Result<Vec<f64>> {
    ensure!(
        x.len() == c.center.len(),
        Contract,
        "project_ball: point has length {}, center {}",
        x.len(),
        c.center.len()
    );
    let dist = vector::dist(x, &c.center);
    if dist <= c.radius {
        return Ok(x.to_vec());
    }
    let s = c.radius / dist;
    Ok(x.iter().zip(&c.center).map(|(xi, ci)| ci + s * (xi - ci)).collect())
}

pub fn project_hyperplane(z: &[f64], h: &HyperplaneParams) -> Result<Vec<f64>> {
    let nn = h.check()?;
    ensure!(z.len() == h.normal.len(), Contract, "project_hyperplane: length mismatch");
    let t = (vector::dot(&h.normal, z) - h.offset) / nn;
    Ok(z.iter().zip(&h.normal).map(|(zi, wi)| zi - t * wi).collect())
}

/// Projection onto `{z : ⟨normal, z⟩ ≥ offset}`.
pub fn project_halfspace(z: &[f64], h: &HyperplaneParams) -> Result<Vec<f64>> {
    let nn = h.check()?;
    ensure!(z.len() == h.normal.len(), Contract, "project_halfspace: length mismatch");
    let gap = (vector::dot(&h.normal, z) - h.offset).min(0.0);
    let t = gap / nn;
    Ok(z.iter().zip(&h.normal).map(|(zi, wi)| zi - t * wi).collect())
}

/// Optimality function of the log-set projection for one coordinate:
/// `φ(u) = u² + u(d - v) - d v + ln(u + d) - z`.
#[inline]
pub fn logset_phi(u: f64, v: f64, z: f64, d: f64) -> f64 {
    (u + d) * (u - v) + libm::log(u + d) - z
}

#[inline]
fn logset_dphi(u: f64, v: f64, d: f64) -> f64 {
    2.0 * u + d - v + 1.0 / (u + d)
}

/// Whether `(v, z)` lies in `{z ≤ ln(v + d), v + d ≥ 0}`.
#[inline]
pub fn in_logset(v: f64, z: f64, d: f64) -> bool {
    v + d >= 0.0 && z <= libm::log(v + d)
}

/// Project a single coordinate pair onto the log set. Returns the root `v̄`
/// and whether the point was moved.
pub fn project_logset_scalar(
    v: f64,
    z: f64,
    d: f64,
    newton_tol: f64,
    newton_max: usize,
) -> Result<(f64, bool)> {
    if in_logset(v, z, d) {
        return Ok((v, false));
    }
    let phi = |u: f64| logset_phi(u, v, z, d);

    // left end: approach the domain boundary of ln until φ < 0
    let mut gap = 1e-8_f64.min(d.abs().max(1e-300));
    let mut lo = -d + gap;
    while !(phi(lo) < 0.0) {
        gap *= 1e-4;
        if gap < 1e-300 {
            return Err(Error::Numerical(format!(
                "log-set projection: no sign change near domain boundary at (v, z, d) = ({v}, {z}, {d})"
            )));
        }
        lo = -d + gap;
    }
    // right end: v itself when it lies in the domain, otherwise march right
    let mut hi = if v > lo { v } else { lo + 1.0 };
    let mut step = 1.0_f64.max(hi.abs());
    let mut guard = 0;
    while !(phi(hi) > 0.0) {
        hi += step;
        step *= 2.0;
        guard += 1;
        if guard > 200 || !hi.is_finite() {
            return Err(Error::Numerical(format!(
                "log-set projection: no sign change on bracket [{lo}, {hi}] at (v, z, d) = ({v}, {z}, {d})"
            )));
        }
    }

    let mut u = 0.5 * (lo + hi);
    // start from the right end when it is close to the root; Newton from the
    // convex side converges monotonically for most inputs
    if phi(hi) < 1.0 {
        u = hi;
    }
    for _ in 0..newton_max.max(1) {
        let f = phi(u);
        if f.abs() <= newton_tol {
            return Ok((u, true));
        }
        if f < 0.0 {
            lo = u;
        } else {
            hi = u;
        }
        let df = logset_dphi(u, v, d);
        let newton = u - f / df;
        u = if df > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo <= 4.0 * f64::EPSILON * hi.abs().max(lo.abs()).max(1.0) {
            break;
        }
    }
    // the bracket has collapsed to machine precision or the budget is spent;
    // accept the better end when it meets the tolerance
    let best = [u, lo, hi]
        .into_iter()
        .filter(|x| *x > -d)
        .min_by(|a, b| phi(*a).abs().total_cmp(&phi(*b).abs()))
        .unwrap_or(u);
    let residual = phi(best).abs();
    let width = hi - lo;
    if residual <= newton_tol || width <= 8.0 * f64::EPSILON * best.abs().max(1.0) {
        Ok((best, true))
    } else {
        Err(Error::Numerical(format!(
            "log-set projection did not converge at (v, z, d) = ({v}, {z}, {d}): |phi| = {residual:e}"
        )))
    }
}

/// Project `(v, z)` element-wise onto `{(v, z) : z ≤ ln(v + d), v + d ≥ 0}`.
pub fn project_logset(
    v: &[f64],
    z: &[f64],
    p: &LogSetParams,
    newton_tol: f64,
    newton_max: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure!(
        v.len() == z.len() && v.len() == p.shift.len(),
        Contract,
        "project_logset: lengths v={}, z={}, d={}",
        v.len(),
        z.len(),
        p.shift.len()
    );
    ensure!(newton_tol > 0.0, Config, "newton_tol must be positive");
    let mut vo = Vec::with_capacity(v.len());
    let mut zo = Vec::with_capacity(v.len());
    for ((&vi, &zi), &di) in v.iter().zip(z).zip(&p.shift) {
        let (u, moved) = project_logset_scalar(vi, zi, di, newton_tol, newton_max)?;
        if moved {
            vo.push(u);
            zo.push(libm::log(u + di));
        } else {
            vo.push(vi);
            zo.push(zi);
        }
    }
    Ok((vo, zo))
}

/// Projection onto `{(v, x, y) : v = N(x, y)}`.
pub fn project_coupling(
    v: &[f64],
    x: &[f64],
    y: &[f64],
    c: &CouplingParams,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    ensure!(
        v.len() == c.v_dim() && x.len() + y.len() == c.q_dim(),
        Contract,
        "project_coupling: dims v={}, x={}, y={} vs N {}x{}",
        v.len(),
        x.len(),
        y.len(),
        c.n_map.rows(),
        c.n_map.cols()
    );
    let mut q = x.to_vec();
    q.extend_from_slice(y);
    let q_bar = coupling_q(&q, v, c);
    let v_bar = c.n_map.apply_unchecked(&q_bar);
    let (xb, yb) = q_bar.split_at(x.len());
    Ok((v_bar, xb.to_vec(), yb.to_vec()))
}

/// `(I + NᵀN)⁻¹ (q + Nᵀ v)`
pub(crate) fn coupling_q(q: &[f64], v: &[f64], c: &CouplingParams) -> Vec<f64> {
    let rhs = vector::add(q, &c.n_map.apply_transpose_unchecked(v));
    c.solver.solve_unchecked(&rhs)
}
