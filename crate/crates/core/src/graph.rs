//! Backend-generic vocabulary for writing model operators once.
//!
//! Every model operator in this crate is written against [`Graph`]. The
//! [`Eval`] backend computes plain values and is used for the forward
//! fixed-point solve; [`crate::tape::Tape`] records the same calls so the
//! final operator application can be differentiated.
//!
//! Scalars are vectors of length one.

use alloc::string::ToString;
use alloc::vec::Vec;
use core::marker::PhantomData;

use crate::error::{ensure, Error, Result};
use crate::linops::{LinearMap, NormalSolver};
use crate::prox::{self, BallConstraint, HyperplaneParams, LogSetParams};
use crate::vector;

/// Index of a trainable parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

pub type OpaqueFn<'f> = &'f dyn Fn(&[f64]) -> Result<Vec<f64>>;

pub trait Graph<'a> {
    type V: Clone;
    type M: Clone;

    fn constant(&mut self, v: &[f64]) -> Self::V;
    fn param(&mut self, id: ParamId, v: &'a [f64]) -> Self::V;
    fn const_mat(&mut self, m: &'a LinearMap) -> Self::M;
    fn param_mat(&mut self, id: ParamId, m: &'a LinearMap) -> Self::M;
    fn value<'s>(&'s self, v: &'s Self::V) -> &'s [f64];

    fn matvec(&mut self, m: &Self::M, x: &Self::V) -> Result<Self::V>;
    fn matvec_t(&mut self, m: &Self::M, x: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    /// `scale * a + shift`, element-wise with constant coefficients.
    fn affine(&mut self, a: &Self::V, scale: f64, shift: f64) -> Self::V;
    /// `s * a` with a length-one `s`.
    fn scale_by(&mut self, a: &Self::V, s: &Self::V) -> Result<Self::V>;
    fn ln(&mut self, a: &Self::V) -> Result<Self::V>;
    fn dot(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;

    fn shrink(&mut self, x: &Self::V, theta: &Self::V) -> Result<Self::V>;
    fn clamp(&mut self, x: &Self::V, lo: f64, hi: f64) -> Self::V;
    fn project_ball(&mut self, x: &Self::V, center: &Self::V, radius: f64) -> Result<Self::V>;
    fn project_hyperplane(
        &mut self,
        z: &Self::V,
        normal: &[f64],
        offset: &Self::V,
    ) -> Result<Self::V>;
    fn project_halfspace(
        &mut self,
        z: &Self::V,
        normal: &[f64],
        offset: &Self::V,
    ) -> Result<Self::V>;
    fn project_logset(
        &mut self,
        v: &Self::V,
        z: &Self::V,
        shift: &[f64],
        newton_tol: f64,
        newton_max: usize,
    ) -> Result<(Self::V, Self::V)>;
    /// `(I + NᵀN)⁻¹ rhs`
    fn solve_normal(&mut self, solver: &'a NormalSolver, rhs: &Self::V) -> Result<Self::V>;

    fn slice(&mut self, v: &Self::V, start: usize, len: usize) -> Result<Self::V>;
    fn concat(&mut self, parts: &[Self::V]) -> Self::V;

    /// An arbitrary function without a derivative rule. Backends that
    /// differentiate reject it.
    fn opaque(&mut self, name: &str, x: &Self::V, f: OpaqueFn<'_>) -> Result<Self::V>;

    fn len(&self, v: &Self::V) -> usize {
        self.value(v).len()
    }

    fn scale(&mut self, a: &Self::V, s: f64) -> Self::V {
        self.affine(a, s, 0.0)
    }
}

/// Value-only backend.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval<'a> {
    _marker: PhantomData<&'a ()>,
}

impl<'a> Eval<'a> {
    pub fn new() -> Self {
        Self { _marker: PhantomData }
    }
}

fn same_len(op: &str, a: &[f64], b: &[f64]) -> Result<()> {
    ensure!(a.len() == b.len(), Contract, "{op}: lengths {} and {} differ", a.len(), b.len());
    Ok(())
}

pub(crate) fn scalar(op: &str, s: &[f64]) -> Result<f64> {
    ensure!(s.len() == 1, Contract, "{op}: expected a scalar, got length {}", s.len());
    Ok(s[0])
}

impl<'a> Graph<'a> for Eval<'a> {
    type V = Vec<f64>;
    type M = &'a LinearMap;

    fn constant(&mut self, v: &[f64]) -> Vec<f64> {
        v.to_vec()
    }

    fn param(&mut self, _id: ParamId, v: &'a [f64]) -> Vec<f64> {
        v.to_vec()
    }

    fn const_mat(&mut self, m: &'a LinearMap) -> &'a LinearMap {
        m
    }

    fn param_mat(&mut self, _id: ParamId, m: &'a LinearMap) -> &'a LinearMap {
        m
    }

    fn value<'s>(&'s self, v: &'s Vec<f64>) -> &'s [f64] {
        v
    }

    fn matvec(&mut self, m: &&'a LinearMap, x: &Vec<f64>) -> Result<Vec<f64>> {
        m.apply(x)
    }

    fn matvec_t(&mut self, m: &&'a LinearMap, x: &Vec<f64>) -> Result<Vec<f64>> {
        m.apply_transpose(x)
    }

    fn add(&mut self, a: &Vec<f64>, b: &Vec<f64>) -> Result<Vec<f64>> {
        same_len("add", a, b)?;
        Ok(vector::add(a, b))
    }

    fn sub(&mut self, a: &Vec<f64>, b: &Vec<f64>) -> Result<Vec<f64>> {
        same_len("sub", a, b)?;
        Ok(vector::sub(a, b))
    }

    fn mul(&mut self, a: &Vec<f64>, b: &Vec<f64>) -> Result<Vec<f64>> {
        same_len("mul", a, b)?;
        Ok(a.iter().zip(b).map(|(x, y)| x * y).collect())
    }

    fn affine(&mut self, a: &Vec<f64>, scale: f64, shift: f64) -> Vec<f64> {
        a.iter().map(|x| scale * x + shift).collect()
    }

    fn scale_by(&mut self, a: &Vec<f64>, s: &Vec<f64>) -> Result<Vec<f64>> {
        let s = scalar("scale_by", s)?;
        Ok(vector::scale(a, s))
    }

    fn ln(&mut self, a: &Vec<f64>) -> Result<Vec<f64>> {
        ensure!(a.iter().all(|&x| x > 0.0), Numerical, "ln of a nonpositive value");
        Ok(a.iter().map(|&x| libm::log(x)).collect())
    }

    fn dot(&mut self, a: &Vec<f64>, b: &Vec<f64>) -> Result<Vec<f64>> {
        same_len("dot", a, b)?;
        Ok(alloc::vec![vector::dot(a, b)])
    }

    fn shrink(&mut self, x: &Vec<f64>, theta: &Vec<f64>) -> Result<Vec<f64>> {
        let t = scalar("shrink", theta)?;
        Ok(prox::shrink(x, t))
    }

    fn clamp(&mut self, x: &Vec<f64>, lo: f64, hi: f64) -> Vec<f64> {
        prox::project_box(x, lo, hi)
    }

    fn project_ball(&mut self, x: &Vec<f64>, center: &Vec<f64>, radius: f64) -> Result<Vec<f64>> {
        prox::project_ball(x, &BallConstraint { center: center.clone(), radius })
    }

    fn project_hyperplane(
        &mut self,
        z: &Vec<f64>,
        normal: &[f64],
        offset: &Vec<f64>,
    ) -> Result<Vec<f64>> {
        let b = scalar("project_hyperplane", offset)?;
        prox::project_hyperplane(z, &HyperplaneParams { normal: normal.to_vec(), offset: b })
    }

    fn project_halfspace(
        &mut self,
        z: &Vec<f64>,
        normal: &[f64],
        offset: &Vec<f64>,
    ) -> Result<Vec<f64>> {
        let b = scalar("project_halfspace", offset)?;
        prox::project_halfspace(z, &HyperplaneParams { normal: normal.to_vec(), offset: b })
    }

    fn project_logset(
        &mut self,
        v: &Vec<f64>,
        z: &Vec<f64>,
        shift: &[f64],
        newton_tol: f64,
        newton_max: usize,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let p = LogSetParams { shift: shift.to_vec() };
        prox::project_logset(v, z, &p, newton_tol, newton_max)
    }

    fn solve_normal(&mut self, solver: &'a NormalSolver, rhs: &Vec<f64>) -> Result<Vec<f64>> {
        solver.solve(rhs)
    }

    fn slice(&mut self, v: &Vec<f64>, start: usize, len: usize) -> Result<Vec<f64>> {
        ensure!(start + len <= v.len(), Contract, "slice {start}+{len} out of {}", v.len());
        Ok(v[start..start + len].to_vec())
    }

    fn concat(&mut self, parts: &[Vec<f64>]) -> Vec<f64> {
        parts.concat()
    }

    fn opaque(&mut self, name: &str, x: &Vec<f64>, f: OpaqueFn<'_>) -> Result<Vec<f64>> {
        f(x).map_err(|e| match e {
            Error::Contract(msg) => Error::Contract(name.to_string() + ": " + &msg),
            other => other,
        })
    }
}
