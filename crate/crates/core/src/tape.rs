//! Minimal reverse-mode tape over the [`Graph`] vocabulary.
//!
//! Nodes are appended in evaluation order, so every input index is smaller
//! than the index of the node that consumes it. [`Tape::backward`] sweeps
//! the nodes in reverse and accumulates cotangents into parameter leaves.
//!
//! Kinks use elements of the subdifferential: shrink has derivative 0 at
//! `|u| = θ`, clamps have derivative 0 on the boundary.

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Error, Result};
use crate::graph::{scalar, Graph, OpaqueFn, ParamId};
use crate::linops::{LinearMap, NormalSolver};
use crate::prox;
use crate::vector;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatVar(usize);

#[derive(Debug)]
enum Op<'a> {
    Const,
    Param(ParamId),
    MatVec { m: usize, x: usize },
    MatVecT { m: usize, x: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine { a: usize, scale: f64 },
    ScaleBy { a: usize, s: usize },
    Ln(usize),
    Dot(usize, usize),
    Shrink { x: usize, theta: usize },
    Clamp { x: usize, lo: f64, hi: f64 },
    Ball { x: usize, center: usize, radius: f64 },
    Hyperplane { z: usize, offset: usize, normal: Vec<f64>, halfspace: bool },
    /// Output is `[v̄; z̄]`.
    LogSet { v: usize, z: usize, shift: Vec<f64> },
    Solve { solver: &'a NormalSolver, rhs: usize },
    Slice { src: usize, start: usize },
    Concat(Vec<usize>),
}

impl Op<'_> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Const | Op::Param(_) => vec![],
            Op::MatVec { x, .. } | Op::MatVecT { x, .. } => vec![*x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Dot(a, b) => vec![*a, *b],
            Op::Affine { a, .. } | Op::Ln(a) => vec![*a],
            Op::ScaleBy { a, s } => vec![*a, *s],
            Op::Shrink { x, theta } => vec![*x, *theta],
            Op::Clamp { x, .. } => vec![*x],
            Op::Ball { x, center, .. } => vec![*x, *center],
            Op::Hyperplane { z, offset, .. } => vec![*z, *offset],
            Op::LogSet { v, z, .. } => vec![*v, *z],
            Op::Solve { rhs, .. } => vec![*rhs],
            Op::Slice { src, .. } => vec![*src],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node<'a> {
    op: Op<'a>,
    value: Vec<f64>,
}

#[derive(Debug)]
struct MatEntry<'a> {
    map: &'a LinearMap,
    param: Option<ParamId>,
}

/// Gradients per parameter block, in the layout the block was registered
/// with (row-major for matrices).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub blocks: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.blocks.get(&id).map(Vec::as_slice)
    }

    fn accumulate(&mut self, id: ParamId, len: usize) -> &mut Vec<f64> {
        self.blocks.entry(id).or_insert_with(|| vec![0.0; len])
    }
}

#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    mats: Vec<MatEntry<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), mats: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<'a>, value: Vec<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Reverse sweep from `output` seeded with `seed` (the cotangent of the
    /// output). Returns gradients for every parameter leaf reached.
    pub fn backward(&self, output: Var, seed: &[f64]) -> Result<Gradients> {
        ensure!(output.0 < self.nodes.len(), Contract, "backward: unknown output variable");
        ensure!(
            seed.len() == self.nodes[output.0].value.len(),
            Contract,
            "backward: seed has length {}, output has length {}",
            seed.len(),
            self.nodes[output.0].value.len()
        );
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(seed.to_vec());
        let mut grads = Gradients::default();

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            for input in node.op.inputs() {
                if input >= idx {
                    return Err(Error::Internal(alloc::format!(
                        "tape cycle: node {idx} reads node {input}"
                    )));
                }
            }
            let acc = |adj: &mut Vec<Option<Vec<f64>>>, i: usize, contrib: &[f64]| {
                let len = self.nodes[i].value.len();
                let slot = adj[i].get_or_insert_with(|| vec![0.0; len]);
                for (s, c) in slot.iter_mut().zip(contrib) {
                    *s += c;
                }
            };
            match &node.op {
                Op::Const => {}
                Op::Param(id) => {
                    let slot = grads.accumulate(*id, g.len());
                    for (s, c) in slot.iter_mut().zip(&g) {
                        *s += c;
                    }
                }
                Op::MatVec { m, x } => {
                    let entry = &self.mats[*m];
                    acc(&mut adj, *x, &entry.map.apply_transpose_unchecked(&g));
                    if let Some(id) = entry.param {
                        let xv = &self.nodes[*x].value;
                        let cols = entry.map.cols();
                        let slot = grads.accumulate(id, entry.map.rows() * cols);
                        for (i, gi) in g.iter().enumerate() {
                            if *gi != 0.0 {
                                vector::axpy(&mut slot[i * cols..(i + 1) * cols], *gi, xv);
                            }
                        }
                    }
                }
                Op::MatVecT { m, x } => {
                    let entry = &self.mats[*m];
                    acc(&mut adj, *x, &entry.map.apply_unchecked(&g));
                    if let Some(id) = entry.param {
                        let xv = &self.nodes[*x].value;
                        let cols = entry.map.cols();
                        let slot = grads.accumulate(id, entry.map.rows() * cols);
                        for (i, xi) in xv.iter().enumerate() {
                            if *xi != 0.0 {
                                vector::axpy(&mut slot[i * cols..(i + 1) * cols], *xi, &g);
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, &g);
                    acc(&mut adj, *b, &g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, &g);
                    acc(&mut adj, *b, &vector::scale(&g, -1.0));
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let ga: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    acc(&mut adj, *a, &ga);
                    acc(&mut adj, *b, &gb);
                }
                Op::Affine { a, scale } => acc(&mut adj, *a, &vector::scale(&g, *scale)),
                Op::ScaleBy { a, s } => {
                    let sv = self.nodes[*s].value[0];
                    let av = &self.nodes[*a].value;
                    acc(&mut adj, *a, &vector::scale(&g, sv));
                    acc(&mut adj, *s, &[vector::dot(&g, av)]);
                }
                Op::Ln(a) => {
                    let av = &self.nodes[*a].value;
                    let ga: Vec<f64> = g.iter().zip(av).map(|(x, y)| x / y).collect();
                    acc(&mut adj, *a, &ga);
                }
                Op::Dot(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    acc(&mut adj, *a, &vector::scale(bv, g[0]));
                    acc(&mut adj, *b, &vector::scale(av, g[0]));
                }
                Op::Shrink { x, theta } => {
                    let xv = &self.nodes[*x].value;
                    let t = self.nodes[*theta].value[0];
                    let mut gx = vec![0.0; xv.len()];
                    let mut gt = 0.0;
                    for i in 0..xv.len() {
                        if xv[i].abs() > t {
                            gx[i] = g[i];
                            gt -= xv[i].signum() * g[i];
                        }
                    }
                    acc(&mut adj, *x, &gx);
                    acc(&mut adj, *theta, &[gt]);
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = &self.nodes[*x].value;
                    let gx: Vec<f64> = xv
                        .iter()
                        .zip(&g)
                        .map(|(xi, gi)| if *xi > *lo && *xi < *hi { *gi } else { 0.0 })
                        .collect();
                    acc(&mut adj, *x, &gx);
                }
                Op::Ball { x, center, radius } => {
                    let xv = &self.nodes[*x].value;
                    let cv = &self.nodes[*center].value;
                    let u = vector::sub(xv, cv);
                    let dist = vector::norm(&u);
                    if dist <= *radius {
                        acc(&mut adj, *x, &g);
                    } else {
                        // J_x = (r/‖u‖)(I - û ûᵀ), J_c = I - J_x
                        let s = radius / dist;
                        let ug = vector::dot(&u, &g) / (dist * dist);
                        let gx: Vec<f64> =
                            g.iter().zip(&u).map(|(gi, ui)| s * (gi - ug * ui)).collect();
                        let gc = vector::sub(&g, &gx);
                        acc(&mut adj, *x, &gx);
                        acc(&mut adj, *center, &gc);
                    }
                }
                Op::Hyperplane { z, offset, normal, halfspace } => {
                    let zv = &self.nodes[*z].value;
                    let b = self.nodes[*offset].value[0];
                    let nn = vector::dot(normal, normal);
                    let active = !*halfspace || vector::dot(normal, zv) < b;
                    if active {
                        let wg = vector::dot(normal, &g) / nn;
                        let gz: Vec<f64> =
                            g.iter().zip(normal).map(|(gi, wi)| gi - wg * wi).collect();
                        acc(&mut adj, *z, &gz);
                        acc(&mut adj, *offset, &[wg]);
                    } else {
                        acc(&mut adj, *z, &g);
                    }
                }
                Op::LogSet { v, z, shift } => {
                    let vin = &self.nodes[*v].value;
                    let zin = &self.nodes[*z].value;
                    let n = vin.len();
                    let out = &node.value;
                    let mut gv = vec![0.0; n];
                    let mut gz = vec![0.0; n];
                    for i in 0..n {
                        let moved = out[i] != vin[i] || out[n + i] != zin[i];
                        if !moved {
                            gv[i] = g[i];
                            gz[i] = g[n + i];
                            continue;
                        }
                        // u solves φ(u; v, z) = 0 and z̄ = ln(u + d)
                        let (u, d) = (out[i], shift[i]);
                        let dphi = 2.0 * u + d - vin[i] + 1.0 / (u + d);
                        let gu = g[i] + g[n + i] / (u + d);
                        gv[i] = gu * (u + d) / dphi;
                        gz[i] = gu / dphi;
                    }
                    acc(&mut adj, *v, &gv);
                    acc(&mut adj, *z, &gz);
                }
                Op::Solve { solver, rhs } => acc(&mut adj, *rhs, &solver.solve_unchecked(&g)),
                Op::Slice { src, start } => {
                    let len = self.nodes[*src].value.len();
                    let mut full = vec![0.0; len];
                    full[*start..*start + g.len()].copy_from_slice(&g);
                    acc(&mut adj, *src, &full);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.nodes[*p].value.len();
                        acc(&mut adj, *p, &g[off..off + len]);
                        off += len;
                    }
                }
            }
        }
        Ok(grads)
    }
}

/// Reverse accumulation of `seed` from `output`; see [`Tape::backward`].
pub fn tape_backward(tape: &Tape<'_>, output: Var, seed: &[f64]) -> Result<Gradients> {
    tape.backward(output, seed)
}

fn check_len(op: &str, a: usize, b: usize) -> Result<()> {
    ensure!(a == b, Contract, "{op}: lengths {a} and {b} differ");
    Ok(())
}

impl<'a> Graph<'a> for Tape<'a> {
    type V = Var;
    type M = MatVar;

    fn constant(&mut self, v: &[f64]) -> Var {
        self.push(Op::Const, v.to_vec())
    }

    fn param(&mut self, id: ParamId, v: &'a [f64]) -> Var {
        self.push(Op::Param(id), v.to_vec())
    }

    fn const_mat(&mut self, m: &'a LinearMap) -> MatVar {
        self.mats.push(MatEntry { map: m, param: None });
        MatVar(self.mats.len() - 1)
    }

    fn param_mat(&mut self, id: ParamId, m: &'a LinearMap) -> MatVar {
        self.mats.push(MatEntry { map: m, param: Some(id) });
        MatVar(self.mats.len() - 1)
    }

    fn value<'s>(&'s self, v: &'s Var) -> &'s [f64] {
        self.val(*v)
    }

    fn matvec(&mut self, m: &MatVar, x: &Var) -> Result<Var> {
        let value = self.mats[m.0].map.apply(self.val(*x))?;
        Ok(self.push(Op::MatVec { m: m.0, x: x.0 }, value))
    }

    fn matvec_t(&mut self, m: &MatVar, x: &Var) -> Result<Var> {
        let value = self.mats[m.0].map.apply_transpose(self.val(*x))?;
        Ok(self.push(Op::MatVecT { m: m.0, x: x.0 }, value))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        check_len("add", self.val(*a).len(), self.val(*b).len())?;
        let value = vector::add(self.val(*a), self.val(*b));
        Ok(self.push(Op::Add(a.0, b.0), value))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        check_len("sub", self.val(*a).len(), self.val(*b).len())?;
        let value = vector::sub(self.val(*a), self.val(*b));
        Ok(self.push(Op::Sub(a.0, b.0), value))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        check_len("mul", self.val(*a).len(), self.val(*b).len())?;
        let value = self.val(*a).iter().zip(self.val(*b)).map(|(x, y)| x * y).collect();
        Ok(self.push(Op::Mul(a.0, b.0), value))
    }

    fn affine(&mut self, a: &Var, scale: f64, shift: f64) -> Var {
        let value = self.val(*a).iter().map(|x| scale * x + shift).collect();
        self.push(Op::Affine { a: a.0, scale }, value)
    }

    fn scale_by(&mut self, a: &Var, s: &Var) -> Result<Var> {
        let sv = scalar("scale_by", self.val(*s))?;
        let value = vector::scale(self.val(*a), sv);
        Ok(self.push(Op::ScaleBy { a: a.0, s: s.0 }, value))
    }

    fn ln(&mut self, a: &Var) -> Result<Var> {
        let av = self.val(*a);
        ensure!(av.iter().all(|&x| x > 0.0), Numerical, "ln of a nonpositive value");
        let value = av.iter().map(|&x| libm::log(x)).collect();
        Ok(self.push(Op::Ln(a.0), value))
    }

    fn dot(&mut self, a: &Var, b: &Var) -> Result<Var> {
        check_len("dot", self.val(*a).len(), self.val(*b).len())?;
        let value = vec![vector::dot(self.val(*a), self.val(*b))];
        Ok(self.push(Op::Dot(a.0, b.0), value))
    }

    fn shrink(&mut self, x: &Var, theta: &Var) -> Result<Var> {
        let t = scalar("shrink", self.val(*theta))?;
        let value = prox::shrink(self.val(*x), t);
        Ok(self.push(Op::Shrink { x: x.0, theta: theta.0 }, value))
    }

    fn clamp(&mut self, x: &Var, lo: f64, hi: f64) -> Var {
        let value = prox::project_box(self.val(*x), lo, hi);
        self.push(Op::Clamp { x: x.0, lo, hi }, value)
    }

    fn project_ball(&mut self, x: &Var, center: &Var, radius: f64) -> Result<Var> {
        let c = prox::BallConstraint { center: self.val(*center).to_vec(), radius };
        let value = prox::project_ball(self.val(*x), &c)?;
        Ok(self.push(Op::Ball { x: x.0, center: center.0, radius }, value))
    }

    fn project_hyperplane(&mut self, z: &Var, normal: &[f64], offset: &Var) -> Result<Var> {
        let b = scalar("project_hyperplane", self.val(*offset))?;
        let h = prox::HyperplaneParams { normal: normal.to_vec(), offset: b };
        let value = prox::project_hyperplane(self.val(*z), &h)?;
        let op = Op::Hyperplane { z: z.0, offset: offset.0, normal: h.normal, halfspace: false };
        Ok(self.push(op, value))
    }

    fn project_halfspace(&mut self, z: &Var, normal: &[f64], offset: &Var) -> Result<Var> {
        let b = scalar("project_halfspace", self.val(*offset))?;
        let h = prox::HyperplaneParams { normal: normal.to_vec(), offset: b };
        let value = prox::project_halfspace(self.val(*z), &h)?;
        let op = Op::Hyperplane { z: z.0, offset: offset.0, normal: h.normal, halfspace: true };
        Ok(self.push(op, value))
    }

    fn project_logset(
        &mut self,
        v: &Var,
        z: &Var,
        shift: &[f64],
        newton_tol: f64,
        newton_max: usize,
    ) -> Result<(Var, Var)> {
        let p = prox::LogSetParams { shift: shift.to_vec() };
        let (vo, zo) = prox::project_logset(self.val(*v), self.val(*z), &p, newton_tol, newton_max)?;
        let n = vo.len();
        let mut value = vo;
        value.extend(zo);
        let pair = self.push(Op::LogSet { v: v.0, z: z.0, shift: p.shift }, value);
        let vb = self.slice(&pair, 0, n)?;
        let zb = self.slice(&pair, n, n)?;
        Ok((vb, zb))
    }

    fn solve_normal(&mut self, solver: &'a NormalSolver, rhs: &Var) -> Result<Var> {
        let value = solver.solve(self.val(*rhs))?;
        Ok(self.push(Op::Solve { solver, rhs: rhs.0 }, value))
    }

    fn slice(&mut self, v: &Var, start: usize, len: usize) -> Result<Var> {
        let src = self.val(*v);
        ensure!(start + len <= src.len(), Contract, "slice {start}+{len} out of {}", src.len());
        let value = src[start..start + len].to_vec();
        Ok(self.push(Op::Slice { src: v.0, start }, value))
    }

    fn concat(&mut self, parts: &[Var]) -> Var {
        let value: Vec<f64> = parts.iter().flat_map(|p| self.val(*p).iter().copied()).collect();
        self.push(Op::Concat(parts.iter().map(|p| p.0).collect()), value)
    }

    fn opaque(&mut self, name: &str, _x: &Var, _f: OpaqueFn<'_>) -> Result<Var> {
        Err(Error::UnsupportedOp(name.to_string()))
    }
}
