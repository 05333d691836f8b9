//! Dense linear operators.
//!
//! [`LinearMap`] stores a row-major matrix and exposes it as an operator:
//! forward and transposed products, spectral-norm estimation by power
//! iteration, and a Cholesky-backed [`NormalSolver`] for the SPD systems
//! `I + NᵀN` that appear in the coupling projection.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::vector;

/// Seed of the power-iteration start vector.
pub const POWER_ITERATION_SEED: u64 = 0x5eed_0f00_c0de_0001;

/// Dense `rows × cols` matrix viewed as a linear operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMap")]
pub struct LinearMap {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMap {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMap> for LinearMap {
    type Error = Error;

    fn try_from(raw: RawMap) -> Result<Self> {
        LinearMap::from_row_major(raw.rows, raw.cols, raw.data)
    }
}

impl LinearMap {
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            Contract,
            "matrix data has {} entries, expected {rows}x{cols}",
            data.len()
        );
        ensure!(vector::all_finite(&data), Contract, "matrix entries must be finite");
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        ensure!(rows.iter().all(|r| r.len() == cols), Contract, "ragged rows");
        Self::from_row_major(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(entries: &[f64]) -> Self {
        let n = entries.len();
        let mut m = Self::zeros(n, n);
        for (i, &e) in entries.iter().enumerate() {
            m.data[i * n + i] = e;
        }
        m
    }

    /// Build from a generator `f(i, j)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Forward difference operator `(Dx)_i = x_{i+1} - x_i`, shape `(n-1) × n`.
    pub fn first_difference(n: usize) -> Self {
        let rows = n.saturating_sub(1);
        Self::from_fn(rows, n, |i, j| {
            if j == i + 1 {
                1.0
            } else if j == i {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `L v`
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            v.len() == self.cols,
            Contract,
            "apply: vector length {} does not match {} columns",
            v.len(),
            self.cols
        );
        Ok(self.apply_unchecked(v))
    }

    pub(crate) fn apply_unchecked(&self, v: &[f64]) -> Vec<f64> {
        if self.cols == 0 {
            return vec![0.0; self.rows];
        }
        self.data.chunks_exact(self.cols).map(|row| vector::dot(row, v)).collect()
    }

    /// `Lᵀ w`
    pub fn apply_transpose(&self, w: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            w.len() == self.rows,
            Contract,
            "apply_transpose: vector length {} does not match {} rows",
            w.len(),
            self.rows
        );
        Ok(self.apply_transpose_unchecked(w))
    }

    pub(crate) fn apply_transpose_unchecked(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        if self.cols == 0 {
            return out;
        }
        for (row, &wi) in self.data.chunks_exact(self.cols).zip(w) {
            if wi != 0.0 {
                vector::axpy(&mut out, wi, row);
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, rhs: &LinearMap) -> Result<Self> {
        ensure!(
            self.cols == rhs.rows,
            Contract,
            "matmul: {}x{} times {}x{}",
            self.rows,
            self.cols,
            rhs.rows,
            rhs.cols
        );
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a != 0.0 {
                    vector::axpy(orow, a, rhs.row(k));
                }
            }
        }
        Ok(out)
    }

    /// `LᵀL`
    pub fn gram(&self) -> Self {
        let n = self.cols;
        let mut out = Self::zeros(n, n);
        for row in self.data.chunks_exact(n.max(1)).take(self.rows) {
            for i in 0..n {
                if row[i] != 0.0 {
                    vector::axpy(&mut out.data[i * n..(i + 1) * n], row[i], row);
                }
            }
        }
        out
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: vector::scale(&self.data, s) }
    }

    pub fn add(&self, rhs: &LinearMap) -> Result<Self> {
        ensure!(
            self.rows == rhs.rows && self.cols == rhs.cols,
            Contract,
            "add: shape mismatch"
        );
        Ok(Self { rows: self.rows, cols: self.cols, data: vector::add(&self.data, &rhs.data) })
    }

    /// Stack `[self; below]`.
    pub fn vstack(&self, below: &LinearMap) -> Result<Self> {
        ensure!(self.cols == below.cols, Contract, "vstack: column mismatch");
        let mut data = self.data.clone();
        data.extend_from_slice(&below.data);
        Ok(Self { rows: self.rows + below.rows, cols: self.cols, data })
    }

    /// Stack `[self, right]`.
    pub fn hstack(&self, right: &LinearMap) -> Result<Self> {
        ensure!(self.rows == right.rows, Contract, "hstack: row mismatch");
        Ok(Self::from_fn(self.rows, self.cols + right.cols, |i, j| {
            if j < self.cols {
                self.get(i, j)
            } else {
                right.get(i, j - self.cols)
            }
        }))
    }

    pub fn block_diag(blocks: &[LinearMap]) -> Self {
        let rows = blocks.iter().map(LinearMap::rows).sum();
        let cols = blocks.iter().map(LinearMap::cols).sum();
        let mut out = Self::zeros(rows, cols);
        let (mut r0, mut c0) = (0, 0);
        for b in blocks {
            for i in 0..b.rows {
                for j in 0..b.cols {
                    out.set(r0 + i, c0 + j, b.get(i, j));
                }
            }
            r0 += b.rows;
            c0 += b.cols;
        }
        out
    }

    pub fn frobenius(&self) -> f64 {
        vector::norm(&self.data)
    }

    /// Largest singular value by power iteration on `LᵀL`.
    ///
    /// The start vector is drawn from a fixed seed so the estimate is
    /// reproducible. When the relative change does not fall below `tol`
    /// within `max_iter` steps the last estimate is returned with
    /// `iterations_used == max_iter`.
    pub fn spectral_norm(&self, tol: f64, max_iter: usize) -> Result<SpectralEstimate> {
        ensure!(tol > 0.0, Config, "spectral_norm: tol must be positive");
        ensure!(max_iter >= 1, Config, "spectral_norm: max_iter must be at least 1");
        if self.rows == 0 || self.cols == 0 || self.data.iter().all(|&x| x == 0.0) {
            return Ok(SpectralEstimate { value: 0.0, iterations_used: 0, tolerance: tol });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(POWER_ITERATION_SEED);
        let mut v: Vec<f64> = (0..self.cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n0 = vector::norm(&v);
        v.iter_mut().for_each(|x| *x /= n0);

        let mut value = 0.0;
        for it in 1..=max_iter {
            let lv = self.apply_unchecked(&v);
            let estimate = vector::norm(&lv);
            let w = self.apply_transpose_unchecked(&lv);
            let wn = vector::norm(&w);
            if wn == 0.0 {
                // start vector fell in the null space; restart along a basis vector
                v.iter_mut().for_each(|x| *x = 0.0);
                v[it % self.cols] = 1.0;
                continue;
            }
            let change = (estimate - value).abs();
            value = estimate;
            v = vector::scale(&w, 1.0 / wn);
            if it > 1 && change <= tol * value {
                return Ok(SpectralEstimate { value, iterations_used: it, tolerance: tol });
            }
        }
        Ok(SpectralEstimate { value, iterations_used: max_iter, tolerance: tol })
    }

    /// Spectral norm with the defaults used for step-size rules.
    pub fn norm2(&self) -> f64 {
        self.spectral_norm(1e-10, 5000).map_or(self.frobenius(), |e| e.value)
    }
}

/// Result of [`LinearMap::spectral_norm`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralEstimate {
    pub value: f64,
    pub iterations_used: usize,
    pub tolerance: f64,
}

/// Cholesky factorization of a symmetric positive definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalSolver {
    n: usize,
    /// Lower triangular factor, row-major.
    lower: Vec<f64>,
}

impl NormalSolver {
    /// Factor an SPD matrix. Only the lower triangle is read.
    pub fn factor(matrix: &LinearMap) -> Result<Self> {
        ensure!(matrix.rows == matrix.cols, Contract, "cholesky: matrix must be square");
        let n = matrix.rows;
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut diag = matrix.get(j, j);
            for k in 0..j {
                diag -= l[j * n + k] * l[j * n + k];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::Singular { pivot: j, value: diag });
            }
            let djj = libm::sqrt(diag);
            l[j * n + j] = djj;
            for i in j + 1..n {
                let mut s = matrix.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / djj;
            }
        }
        Ok(Self { n, lower: l })
    }

    /// Factor `I + NᵀN`.
    pub fn for_coupling(n_map: &LinearMap) -> Result<Self> {
        let mut g = n_map.gram();
        for i in 0..g.rows {
            let v = g.get(i, i);
            g.set(i, i, v + 1.0);
        }
        Self::factor(&g)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            rhs.len() == self.n,
            Contract,
            "solve: rhs length {} does not match dimension {}",
            rhs.len(),
            self.n
        );
        Ok(self.solve_unchecked(rhs))
    }

    pub(crate) fn solve_unchecked(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.n;
        let l = &self.lower;
        let mut y = rhs.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= l[i * n + k] * y[k];
            }
            y[i] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[k * n + i] * y[k];
            }
            y[i] = s / l[i * n + i];
        }
        y
    }
}

/// Solve `(I + NᵀN) q = rhs` given the assembled system matrix.
pub fn solve_normal(i_plus_ntn: &LinearMap, rhs: &[f64]) -> Result<Vec<f64>> {
    NormalSolver::factor(i_plus_ntn)?.solve(rhs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo_random(rows: usize, cols: usize, seed: u64) -> LinearMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LinearMap::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_and_zero_apply() {
        let id = LinearMap::identity(3);
        assert_eq!(id.apply(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        let z = LinearMap::zeros(2, 2);
        assert_eq!(z.apply(&[5.0, 7.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn apply_matches_naive_loop() {
        let m = pseudo_random(4, 3, 7);
        let v = [0.3, -1.2, 2.5];
        let out = m.apply(&v).unwrap();
        for i in 0..4 {
            let mut s = 0.0;
            for j in 0..3 {
                s += m.get(i, j) * v[j];
            }
            assert!((out[i] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let m = LinearMap::zeros(2, 3);
        assert!(matches!(m.apply(&[1.0]), Err(Error::Contract(_))));
        assert!(matches!(m.apply_transpose(&[1.0]), Err(Error::Contract(_))));
        assert!(LinearMap::from_row_major(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn spectral_norm_of_simple_maps() {
        let e = LinearMap::identity(5).spectral_norm(1e-12, 1000).unwrap();
        assert!((e.value - 1.0).abs() < 1e-12);
        let e = LinearMap::diag(&[3.0, 1.0, 0.5]).spectral_norm(1e-12, 1000).unwrap();
        assert!((e.value - 3.0).abs() < 1e-9);
        let e = LinearMap::zeros(3, 2).spectral_norm(1e-12, 10).unwrap();
        assert_eq!(e.value, 0.0);
    }

    #[test]
    fn spectral_norm_flags_non_convergence() {
        let m = pseudo_random(6, 4, 3);
        let e = m.spectral_norm(1e-300, 3).unwrap();
        assert_eq!(e.iterations_used, 3);
        assert!(e.value <= m.frobenius());
    }

    #[test]
    fn spectral_norm_rejects_bad_config() {
        let m = LinearMap::identity(2);
        assert!(m.spectral_norm(0.0, 10).is_err());
        assert!(m.spectral_norm(1e-6, 0).is_err());
    }

    #[test]
    fn solve_normal_small_cases() {
        let i2 = LinearMap::identity(2);
        assert_eq!(solve_normal(&i2, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        let solver = NormalSolver::for_coupling(&LinearMap::identity(2)).unwrap();
        let q = solver.solve(&[4.0, 6.0]).unwrap();
        assert!((q[0] - 2.0).abs() < 1e-14 && (q[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn non_spd_is_singular() {
        let m = LinearMap::diag(&[1.0, -1.0]);
        assert!(matches!(NormalSolver::factor(&m), Err(Error::Singular { pivot: 1, .. })));
    }
}
