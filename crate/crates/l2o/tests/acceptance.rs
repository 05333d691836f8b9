//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Run a subset with `cargo test -p l2o --test acceptance -- 3 5`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use l2o::data::{gen_boxl1_data, gen_cfmm_market, CfmmData, CFMM_TOKENS, CFMM_TOPOLOGY};
use l2o::experiment::{self, ANALYTIC_GROUP, L2O_GROUP};
use l2o::formats::{Dataset, Weights};
use l2o::{ExperimentConfig, ExperimentKind};
use l2o_core::certs::{GuardOutcome, Label};
use l2o_core::models::{apply_operator, infer, readout, ImplicitModel};
use l2o_core::prox::{self, BallConstraint, CouplingParams, HyperplaneParams, LogSetParams};
use l2o_core::solvers::{LadmmSteps, StopRule};
use l2o_core::train::{jfb_gradient, jfb_gradient_at, mse_loss, TrainConfig};
use l2o_core::models::{BoxL1Model, CfmmMarket, CfmmModel, CfmmPool, IdmModel, PoolKind, SparseRecoveryModel, TradeProposal};
use l2o_core::{vector, LinearMap};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Criterion = (usize, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    (1, "operator suite", c1_operator_suite),
    (2, "l-admm vs l1 oracle", c2_ladmm_l1_oracle),
    (3, "davis-yin vs grid search", c3_davis_yin_grid),
    (4, "log-set newton", c4_logset_newton),
    (5, "gradient fidelity", c5_gradient_fidelity),
    (6, "certificate calibration", c6_calibration),
    (7, "cfmm execution", c7_cfmm_execution),
    (8, "idm sparsity", c8_idm_sparsity),
    (9, "jfb tape length", c9_tape_length),
    (10, "averagedness", c10_averagedness),
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (n, name, f) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|x| *x == n.to_string() || name.contains(x.as_str())) {
            continue;
        }
        let start = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} ({name}): {verdict} [{:.1}s] {}", start.elapsed().as_secs_f64(), out.detail);
        failed += usize::from(!out.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> LinearMap {
    LinearMap::from_fn(rows, cols, |_, _| scale * normal(rng))
}

fn concat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

// ---------------------------------------------------------------- 1

fn c1_operator_suite() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let pairs = 1000;
    let tol = 1e-10;
    let dim = 6;

    let ball = BallConstraint::new(normals(&mut r, dim), 1.5).unwrap();
    let mut normal_vec = normals(&mut r, dim);
    normal_vec[0] += 0.5;
    let plane = HyperplaneParams::new(normal_vec, 0.7).unwrap();
    let shift: Vec<f64> = (0..dim).map(|_| r.random_range(0.1..5.0)).collect();
    let logset = LogSetParams::new(shift).unwrap();
    let coupling = CouplingParams::new(gaussian(&mut r, 3, 6, 1.0)).unwrap();
    let theta = 0.8;

    // (name, operator on a flat vector, is a projection)
    type Op<'a> = Box<dyn Fn(&[f64]) -> Vec<f64> + 'a>;
    let ops: Vec<(&str, Op, bool)> = vec![
        ("shrink", Box::new(|x: &[f64]| prox::shrink(x, theta)), false),
        ("box", Box::new(|x: &[f64]| prox::project_box(x, -0.5, 1.0)), true),
        ("nonneg", Box::new(|x: &[f64]| prox::project_nonneg(x)), true),
        ("ball", Box::new(|x: &[f64]| prox::project_ball(x, &ball).unwrap()), true),
        ("hyperplane", Box::new(|x: &[f64]| prox::project_hyperplane(x, &plane).unwrap()), true),
        ("halfspace", Box::new(|x: &[f64]| prox::project_halfspace(x, &plane).unwrap()), true),
        (
            "logset",
            Box::new(|x: &[f64]| {
                let (v, z) = prox::project_logset(&x[..dim], &x[dim..], &logset, prox::NEWTON_TOL, prox::NEWTON_MAX).unwrap();
                concat(&[&v, &z])
            }),
            true,
        ),
        (
            "coupling",
            Box::new(|x: &[f64]| {
                let (v, a, b) = prox::project_coupling(&x[..3], &x[3..6], &x[6..9], &coupling).unwrap();
                concat(&[&v, &a, &b])
            }),
            true,
        ),
    ];
    let dims = [dim, dim, dim, dim, dim, dim, 2 * dim, 9];

    let mut worst_expansion = f64::NEG_INFINITY;
    let mut worst_idem: f64 = 0.0;
    let mut bad = Vec::new();
    for ((name, op, is_proj), &n) in ops.iter().zip(&dims) {
        let mut op_bad = false;
        for _ in 0..pairs {
            let a: Vec<f64> = (0..n).map(|_| 3.0 * normal(&mut r)).collect();
            let b: Vec<f64> = (0..n).map(|_| 3.0 * normal(&mut r)).collect();
            let (pa, pb) = (op(&a), op(&b));
            let excess = vector::dist(&pa, &pb) - vector::dist(&a, &b);
            worst_expansion = worst_expansion.max(excess);
            op_bad |= excess > tol;
            if *is_proj {
                let idem = vector::dist(&op(&pa), &pa);
                worst_idem = worst_idem.max(idem);
                op_bad |= idem > tol;
            }
        }
        if op_bad {
            bad.push(*name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        bad.is_empty() && secs < 10.0,
        format!(
            "{} operators x {pairs} pairs, max(|Pa-Pb| - |a-b|) = {worst_expansion:.2e}, max |P(Pa) - Pa| = {worst_idem:.2e}, {secs:.2}s (limit 10s){}",
            ops.len(),
            if bad.is_empty() { String::new() } else { format!(", violations in {bad:?}") }
        ),
    )
}

// ---------------------------------------------------------------- 2

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-10 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if n < k {
        return vec![];
    }
    let mut out = subsets(n - 1, k);
    for mut s in subsets(n - 1, k - 1) {
        s.push(n - 1);
        out.push(s);
    }
    out
}

/// `argmin ‖x‖₁ s.t. Ax = d` by enumerating bases of the LP; `None` when
/// the minimizer is not unique.
fn l1_oracle(a: &LinearMap, d: &[f64]) -> Option<Vec<f64>> {
    let (m, n) = (a.rows(), a.cols());
    let mut cands: Vec<(f64, Vec<f64>)> = Vec::new();
    for s in subsets(n, m) {
        let mat: Vec<Vec<f64>> = (0..m).map(|i| s.iter().map(|&j| a.get(i, j)).collect()).collect();
        if let Some(xs) = solve_dense(mat, d.to_vec()) {
            let mut x = vec![0.0; n];
            for (&j, v) in s.iter().zip(xs) {
                x[j] = v;
            }
            cands.push((vector::norm1(&x), x));
        }
    }
    cands.sort_by(|p, q| p.0.total_cmp(&q.0));
    let best = cands.first()?.clone();
    let tie = cands.iter().any(|(v, x)| *v <= best.0 + 1e-9 && vector::norm_inf(&vector::sub(x, &best.1)) > 1e-6);
    (!tie).then_some(best.1)
}

fn c2_ladmm_l1_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2);
    let (n, m, instances) = (8, 5, 50);
    let stop = StopRule::new(1e-13, 400_000).unwrap();
    let (mut worst_x, mut worst_feas, mut unconverged, mut max_iters) = (0.0f64, 0.0f64, 0, 0);
    let mut done = 0;
    while done < instances {
        let a = gaussian(&mut r, m, n, 1.0 / (m as f64).sqrt());
        let mut truth = vec![0.0; n];
        for j in index::sample(&mut r, n, 2) {
            truth[j] = r.random_range(0.5..2.0) * if r.random::<bool>() { 1.0 } else { -1.0 };
        }
        let d = a.apply(&truth).unwrap();
        let Some(oracle) = l1_oracle(&a, &d) else { continue };
        let k = LinearMap::identity(n);
        let steps = LadmmSteps::with_alpha(1.0, &k, &a).unwrap();
        let model = IdmModel::with_steps(a.clone(), k, steps).unwrap();
        let inf = infer(&model, &d, &stop).unwrap();
        unconverged += usize::from(!inf.trace.converged);
        max_iters = max_iters.max(inf.trace.iterations);
        worst_x = worst_x.max(vector::norm_inf(&vector::sub(&inf.output, &oracle)));
        worst_feas = worst_feas.max(vector::norm(&vector::sub(&a.apply(&inf.output).unwrap(), &d)));
        done += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_x <= 1e-4 && worst_feas <= 1e-5 && secs < 60.0,
        format!(
            "{instances} instances (n={n}, m={m}), max |x - x_oracle|_inf = {worst_x:.2e} (tol 1e-4), max |Ax - d| = {worst_feas:.2e} (tol 1e-5), {unconverged} hit the iteration cap, max iterations {max_iters}, {secs:.1}s (limit 60s)"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn product_accepts(r: &[f64], w: &[f64], v: &[f64]) -> bool {
    let mut s = 0.0;
    for i in 0..r.len() {
        if r[i] + v[i] <= 0.0 {
            return false;
        }
        s += w[i] * ((r[i] + v[i]).ln() - r[i].ln());
    }
    s >= 0.0
}

/// Value of the net reserve change `v` to the trader: tender `v/γ` where
/// `v > 0`, receive `-v` where `v < 0`.
fn net_utility(p: &[f64], v: &[f64], gamma: f64) -> f64 {
    v.iter().zip(p).map(|(vi, pi)| if *vi > 0.0 { -pi * vi / gamma } else { -pi * vi }).sum()
}

/// Net change of coordinate `i` that puts `v` on the invariant boundary
/// with the other coordinate held fixed.
fn push_to_boundary(r: &[f64], w: &[f64], v: &[f64], i: usize) -> f64 {
    let o = 1 - i;
    r[i] * (-(w[o] / w[i]) * ((r[o] + v[o]) / r[o]).ln()).exp() - r[i]
}

/// Refining grid search over net reserve changes `v` of a two-token pool.
/// Utility decreases in every coordinate, so each feasible grid point is
/// scored after pushing one coordinate onto the invariant boundary; along
/// the boundary the utility is concave and the zoom keeps the maximizer.
fn grid_arbitrage(r: &[f64], w: &[f64], p: &[f64], gamma: f64) -> f64 {
    let pts = 101;
    let floor = [-0.999 * r[0], -0.999 * r[1]];
    let mut lo = floor;
    let mut hi = [3.0 * r[0], 3.0 * r[1]];
    let mut best = (0.0, [0.0, 0.0]);
    for _ in 0..40 {
        let step = [(hi[0] - lo[0]) / (pts - 1) as f64, (hi[1] - lo[1]) / (pts - 1) as f64];
        for i in 0..pts {
            for j in 0..pts {
                let v = [lo[0] + i as f64 * step[0], lo[1] + j as f64 * step[1]];
                if !product_accepts(r, w, &v) {
                    continue;
                }
                for axis in 0..2 {
                    let mut b = v;
                    b[axis] = push_to_boundary(r, w, &v, axis);
                    let u = net_utility(p, &b, gamma);
                    if u > best.0 {
                        best = (u, v);
                    }
                }
            }
        }
        for t in 0..2 {
            lo[t] = (best.1[t] - 3.0 * step[t]).max(floor[t]);
            hi[t] = best.1[t] + 3.0 * step[t];
        }
    }
    best.0
}

fn c3_davis_yin_grid() -> Outcome {
    let mut r = rng(3);
    let instances = 20;
    let stop = StopRule::new(1e-11, 200_000).unwrap();
    let (mut worst_gap, mut worst_inv, mut unconverged) = (0.0f64, 0.0f64, 0);
    let mut utilities = Vec::new();
    for _ in 0..instances {
        let reserves = vec![r.random_range(50.0..150.0), r.random_range(50.0..150.0)];
        let w0 = r.random_range(0.3..0.7);
        let weights = vec![w0, 1.0 - w0];
        let gamma = 0.997;
        let implied = weights[1] * reserves[0] / (weights[0] * reserves[1]);
        let prices = vec![1.0, implied * (1.0 + r.random_range(-0.3..0.3))];
        let pool = CfmmPool::new(0, PoolKind::WeightedProduct, &[0, 1], 2, reserves.clone(), weights.clone(), gamma).unwrap();
        let market = CfmmMarket::new(vec![pool.clone()], 2, prices.clone()).unwrap();
        let model = CfmmModel::analytic(&market, 1.0).unwrap();
        let (trade, inf) = model.trade(&[reserves.clone()], &prices, &stop).unwrap();
        unconverged += usize::from(!inf.trace.converged);
        let grid = grid_arbitrage(&reserves, &weights, &prices, gamma);
        worst_gap = worst_gap.max((trade.utility - grid).abs());
        let v = pool.local_trade(&trade.x[0], &trade.y[0]).unwrap();
        worst_inv = worst_inv.max(-pool.invariant_change(&v).unwrap());
        utilities.push(trade.utility);
    }
    let mean_u = utilities.iter().sum::<f64>() / utilities.len() as f64;
    outcome(
        worst_gap <= 1e-3 && worst_inv <= 1e-6,
        format!(
            "{instances} single-pool instances (mean utility {mean_u:.3}), max |U_dys - U_grid| = {worst_gap:.2e} (tol 1e-3), max invariant shortfall = {worst_inv:.2e} (tol 1e-6), {unconverged} unconverged"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn c4_logset_newton() -> Outcome {
    let mut r = rng(4);
    let (mut worst_phi, mut worst_ps, mut moved_inside) = (0.0f64, 0.0f64, 0);
    let mut projected = 0;
    while projected < 1000 {
        let v: f64 = r.random_range(-5.0..5.0);
        let z = r.random_range(-5.0..5.0);
        let d = r.random_range(0.05..5.0);
        let inside = v + d >= 0.0 && z <= (v + d).ln();
        let (vb, moved) = prox::project_logset_scalar(v, z, d, prox::NEWTON_TOL, prox::NEWTON_MAX).unwrap();
        if inside {
            moved_inside += usize::from(moved || vb != v);
            continue;
        }
        projected += 1;
        // φ(v̄) = (v̄ + d)(v̄ - v) + ln(v̄ + d) - z
        let zb = (vb + d).ln();
        let phi = (vb + d) * (vb - v) + zb - z;
        // point-slope relation of the projection: z̄ - z = -(v̄ + d)(v̄ - v)
        let ps = (zb - z) + (vb + d) * (vb - v);
        worst_phi = worst_phi.max(phi.abs());
        worst_ps = worst_ps.max(ps.abs());
    }
    outcome(
        worst_phi <= 1e-10 && worst_ps <= 1e-8 && moved_inside == 0,
        format!(
            "1000 exterior points, max |phi(v_bar)| = {worst_phi:.2e} (tol 1e-10), max point-slope residual = {worst_ps:.2e} (tol 1e-8), interior points moved: {moved_inside}"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn random_market(r: &mut ChaCha8Rng, risk_scale: f64) -> CfmmMarket {
    let pools: Vec<CfmmPool> = CFMM_TOPOLOGY
        .iter()
        .enumerate()
        .map(|(j, toks)| {
            let reserves = toks.iter().map(|_| r.random_range(50.0..150.0)).collect();
            let weights = toks.iter().map(|_| r.random_range(0.2..1.0)).collect();
            CfmmPool::new(j, PoolKind::WeightedProduct, toks, CFMM_TOKENS, reserves, weights, 0.997).unwrap()
        })
        .collect();
    let prices = (0..CFMM_TOKENS).map(|_| r.random_range(0.5..2.0)).collect();
    let mut market = CfmmMarket::new(pools, CFMM_TOKENS, prices).unwrap();
    for w in market.risk_maps.iter_mut() {
        *w = gaussian(r, w.rows(), w.cols(), risk_scale);
    }
    market
}

fn rel_err(g: &[f64], fd: &[f64]) -> f64 {
    vector::norm_inf(&vector::sub(g, fd)) / vector::norm_inf(fd).max(1e-12)
}

fn utility_gradient_check(r: &mut ChaCha8Rng) -> f64 {
    let market = random_market(r, 0.3);
    let mut trade = TradeProposal::null(market.n_pools(), CFMM_TOKENS);
    for (j, pool) in market.pools.iter().enumerate() {
        for t in pool.tokens() {
            trade.x[j][t] = r.random_range(0.0..5.0);
            trade.y[j][t] = r.random_range(0.0..5.0);
        }
    }
    let (gx, gy) = market.utility_gradient(&trade).unwrap();
    let h = 1e-4;
    let (mut g, mut fd) = (Vec::new(), Vec::new());
    for (j, pool) in market.pools.iter().enumerate() {
        for t in pool.tokens() {
            for side in 0..2 {
                let mut plus = trade.clone();
                let mut minus = trade.clone();
                let (pv, mv) = if side == 0 { (&mut plus.x, &mut minus.x) } else { (&mut plus.y, &mut minus.y) };
                pv[j][t] += h;
                mv[j][t] -= h;
                let up = market.regularized_utility(&plus).unwrap();
                let down = market.regularized_utility(&minus).unwrap();
                fd.push((up - down) / (2.0 * h));
                g.push(if side == 0 { gx[j][t] } else { gy[j][t] });
            }
        }
    }
    rel_err(&g, &fd)
}

/// JFB gradient against central differences of `loss(readout(T_Θ(s; d)))`
/// with `s` fixed. Returns `None` near a kink, detected by disagreement
/// between two difference steps.
fn jfb_check<M: ImplicitModel + Clone>(model: &M, state: &[f64], d: &[f64], target: &[f64], r: &mut ChaCha8Rng, probes: usize) -> Option<f64> {
    let jfb = jfb_gradient_at(model, state, d, mse_loss(target)).unwrap();
    let f = |m: &M| {
        let next = apply_operator(m, state, d).unwrap();
        let out = readout(m, &next).unwrap();
        0.5 * vector::dist(&out, target).powi(2)
    };
    let fd_at = |block: usize, i: usize, h: f64| {
        let mut plus = model.clone();
        plus.param_blocks_mut()[block][i] += h;
        let mut minus = model.clone();
        minus.param_blocks_mut()[block][i] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    };
    let sizes: Vec<usize> = model.param_blocks().iter().map(|b| b.len()).collect();
    let total: usize = sizes.iter().sum();
    let (mut g, mut fd) = (Vec::new(), Vec::new());
    for flat in index::sample(r, total, probes.min(total)) {
        let (mut block, mut i) = (0, flat);
        while i >= sizes[block] {
            i -= sizes[block];
            block += 1;
        }
        let small = fd_at(block, i, 1e-6);
        let large = fd_at(block, i, 1e-5);
        if (small - large).abs() > 1e-7 * small.abs().max(large.abs()).max(1.0) {
            return None;
        }
        g.push(jfb.grads[block][i]);
        fd.push(small);
    }
    Some(rel_err(&g, &fd))
}

fn c5_gradient_fidelity() -> Outcome {
    let mut r = rng(5);
    let n_util = 50;
    let worst_util = (0..n_util).map(|_| utility_gradient_check(&mut r)).fold(0.0, f64::max);

    let per_model = 20;
    let stop = StopRule::new(1e-8, 2000).unwrap();
    let mut valid = [0usize; 3];
    let mut kinks = 0;
    let mut worst_jfb: f64 = 0.0;
    let mut attempts = 0;
    while valid.iter().any(|&v| v < per_model) && attempts < 500 {
        attempts += 1;
        let which = valid.iter().position(|&v| v < per_model).unwrap();
        let res = match which {
            0 => {
                let a = gaussian(&mut r, 10, 20, 1.0 / 10f64.sqrt());
                let mut model = SparseRecoveryModel::ista(a.clone(), 0.05).unwrap();
                for w in model.w.data_mut() {
                    *w += 0.01 * normal(&mut r);
                }
                let mut truth = vec![0.0; 20];
                for j in index::sample(&mut r, 20, 3) {
                    truth[j] = normal(&mut r);
                }
                let d = a.apply(&truth).unwrap();
                let inf = infer(&model, &d, &stop).unwrap();
                jfb_check(&model, &inf.state, &d, &truth, &mut r, 40)
            }
            1 => {
                let (n, m) = (12, 6);
                let a = gaussian(&mut r, m, n, 1.0 / (m as f64).sqrt());
                let k = LinearMap::identity(n).add(&gaussian(&mut r, n, n, 0.1)).unwrap();
                let model = IdmModel::new(a.clone(), k).unwrap();
                let truth = normals(&mut r, n);
                let d = a.apply(&truth).unwrap();
                let inf = infer(&model, &d, &StopRule::new(1e-8, 300).unwrap()).unwrap();
                jfb_check(&model, &inf.state, &d, &truth, &mut r, 40)
            }
            _ => {
                let market = random_market(&mut r, 0.05);
                let model = CfmmModel::new(market.clone(), 1.0).unwrap();
                let observed = market.reserves();
                let d = model.data_vector(&observed, &market.prices).unwrap();
                let inf = infer(&model, &d, &StopRule::new(1e-8, 500).unwrap()).unwrap();
                let target: Vec<f64> = inf.output.iter().map(|o| o + 0.1 * normal(&mut r)).collect();
                jfb_check(&model, &inf.state, &d, &target, &mut r, 40)
            }
        };
        match res {
            Some(e) => {
                worst_jfb = worst_jfb.max(e);
                valid[which] += 1;
            }
            None => kinks += 1,
        }
    }
    let n_jfb: usize = valid.iter().sum();
    outcome(
        worst_util <= 1e-5 && worst_jfb <= 1e-6 && n_jfb >= 50,
        format!(
            "utility gradient: {n_util} markets, max rel err {worst_util:.2e} (tol 1e-5); JFB: {n_jfb} instances (sparse/idm/cfmm = {valid:?}, {kinks} skipped near kinks), max rel err {worst_jfb:.2e} (tol 1e-6)"
        ),
    )
}

// ---------------------------------------------------------------- 6

fn c6_calibration() -> Outcome {
    let mut cfg = ExperimentConfig {
        experiment: ExperimentKind::Dictionary,
        seed: 6,
        train_n: Some(500),
        test_n: Some(500),
        train: TrainConfig { epochs: 2, batch_size: 25, ..TrainConfig::default() },
        ..ExperimentConfig::default()
    };
    cfg.dictionary.n = 40;
    cfg.dictionary.latent = 10;
    cfg.dictionary.m = 20;
    cfg.dictionary.support = 3;
    let dataset = experiment::generate(&cfg).unwrap();
    let weights = experiment::train(&cfg, &dataset).unwrap();
    let inferences = experiment::infer(&cfg, &dataset, &weights).unwrap();
    let (profiles, report) = experiment::certify(&cfg, &dataset, &weights, &inferences).unwrap();

    let p = cfg.probs;
    let mut partition_errors = 0;
    let mut fails = vec![0usize; profiles.len()];
    for rec in &report.records {
        let mut any_fail = false;
        let mut any_warn = false;
        for (i, (c, prof)) in rec.certificates.iter().zip(&profiles).enumerate() {
            // inclusive empirical CDF and the three branches, recomputed here
            let cdf = prof.samples.iter().filter(|&&s| s <= c.value).count() as f64 / prof.samples.len() as f64;
            let branch = if cdf < p.p_pass {
                Label::Pass
            } else if cdf < 1.0 - p.p_fail {
                Label::Warning
            } else {
                Label::Fail
            };
            partition_errors += usize::from(cdf != c.cdf || branch != c.label || c.name != prof.property.name);
            fails[i] += usize::from(c.label == Label::Fail);
            any_fail |= c.label == Label::Fail;
            any_warn |= c.label == Label::Warning;
        }
        let expect = if any_fail {
            GuardOutcome::Rejected
        } else if any_warn {
            GuardOutcome::Warned
        } else {
            GuardOutcome::Ok
        };
        partition_errors += usize::from(expect != rec.outcome);
    }
    let n = report.records.len();
    let rates: Vec<String> = profiles
        .iter()
        .zip(&fails)
        .map(|(prof, &f)| format!("{} {:.1}%", prof.property.name, 100.0 * f as f64 / n as f64))
        .collect();
    let in_band = fails.iter().all(|&f| (0.03..=0.07).contains(&(f as f64 / n as f64)));
    outcome(
        in_band && partition_errors == 0 && n == 500,
        format!(
            "N={n} fresh queries, calibration N={}, fail rates [{}] (target 5% +/- 2%), branch partition mismatches: {partition_errors}",
            profiles.first().map_or(0, |p| p.samples.len()),
            rates.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 7

fn c7_cfmm_execution() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig {
        experiment: ExperimentKind::Cfmm,
        seed: 7,
        train_n: Some(300),
        test_n: Some(500),
        train: TrainConfig { epochs: 2, ..TrainConfig::default() },
        ..ExperimentConfig::default()
    };
    let report = experiment::run_experiment(&cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let group = |g: &'static str| report.records.iter().filter(move |r| r.group == g);
    let executed = |r: &&l2o::report::SampleRecord| r.metrics["executed"] > 0.5;
    let risk_failed = |r: &&l2o::report::SampleRecord| {
        r.certificates.iter().any(|c| c.name == "risk_violation" && c.label == Label::Fail)
    };
    let n_an = group(ANALYTIC_GROUP).count();
    let an_exec = group(ANALYTIC_GROUP).filter(executed).count();
    let an_risk = group(ANALYTIC_GROUP).filter(risk_failed).count();
    let n_l2o = group(L2O_GROUP).count();
    let l2o_exec = group(L2O_GROUP).filter(executed).count();
    let min_u = group(L2O_GROUP).filter(executed).map(|r| r.metrics["executed_utility"]).fold(f64::INFINITY, f64::min);
    let exec_rate = l2o_exec as f64 / n_l2o.max(1) as f64;
    outcome(
        n_an > 0 && an_exec == 0 && an_risk == n_an && exec_rate >= 0.6 && min_u >= 0.0 && secs < 600.0,
        format!(
            "{n_an} test snapshots; analytic: {an_exec} executed, risk fail {:.1}% (target 0% / 100%); L2O: execution {:.1}% (target >= 60%), min executed utility {min_u:.4} (target >= 0); {secs:.0}s (limit 600s)",
            100.0 * an_risk as f64 / n_an.max(1) as f64,
            100.0 * exec_rate
        ),
    )
}

// ---------------------------------------------------------------- 8

fn c8_idm_sparsity() -> Outcome {
    let cfg = ExperimentConfig {
        experiment: ExperimentKind::Dictionary,
        seed: 8,
        train_n: Some(200),
        test_n: Some(50),
        train: TrainConfig { epochs: 10, batch_size: 10, ..TrainConfig::default() },
        ..ExperimentConfig::default()
    };
    let dataset = experiment::generate(&cfg).unwrap();
    let weights = experiment::train(&cfg, &dataset).unwrap();
    let Weights::Idm { k, .. } = &weights.weights else { panic!("dictionary run produced non-IDM weights") };
    let Dataset::Dictionary(data) = &dataset else { unreachable!() };
    let tol = cfg.dictionary.zero_tol;
    let mut ratios: Vec<f64> = data
        .test
        .iter()
        .map(|s| {
            let model = IdmModel::new(data.a.clone(), k.clone()).unwrap();
            let x = infer(&model, &s.d, &cfg.stop()).unwrap().output;
            let kx = k.apply(&x).unwrap();
            let nnz = |v: &[f64]| v.iter().filter(|a| a.abs() > tol).count() as f64;
            nnz(&kx) / nnz(&x).max(1.0)
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    let median = 0.5 * (ratios[(ratios.len() - 1) / 2] + ratios[ratios.len() / 2]);
    let d = &cfg.dictionary;
    outcome(
        median < 0.5 && weights.train_seconds < 900.0,
        format!(
            "n={} latent={} m={}, median nnz(Kx)/nnz(x) = {median:.3} over {} test signals (target < 0.5), training {:.0}s (limit 900s)",
            d.n,
            d.latent,
            d.m,
            ratios.len(),
            weights.train_seconds
        ),
    )
}

// ---------------------------------------------------------------- 9

fn tape_lens<M: ImplicitModel>(model: &M, d: &[f64], target: &[f64]) -> (usize, usize) {
    let one = StopRule::new(f64::MIN_POSITIVE, 1).unwrap();
    let many = StopRule::new(f64::MIN_POSITIVE, 1000).unwrap();
    let a = jfb_gradient(model, d, target, &one).unwrap().tape_len;
    let b = jfb_gradient(model, d, target, &many).unwrap().tape_len;
    (a, b)
}

fn c9_tape_length() -> Outcome {
    let mut r = rng(9);
    let mut lines = Vec::new();
    let mut ok = true;
    let mut record = |name: &str, (a, b): (usize, usize)| {
        ok &= a == b && a > 0;
        lines.push(format!("{name} {a}/{b}"));
    };

    let a = gaussian(&mut r, 10, 20, 0.3);
    let d = normals(&mut r, 10);
    let sparse = SparseRecoveryModel::ista(a.clone(), 0.05).unwrap();
    record("sparse", tape_lens(&sparse, &d, &vec![0.0; 20]));
    let idm = IdmModel::new(a.clone(), LinearMap::identity(20)).unwrap();
    record("idm", tape_lens(&idm, &d, &vec![0.0; 20]));

    let cfg = ExperimentConfig { experiment: ExperimentKind::Boxl1, train_n: Some(1), test_n: Some(1), ..ExperimentConfig::default() };
    let bx = gen_boxl1_data(&cfg);
    let boxl1 = BoxL1Model::new(bx.a.clone(), LinearMap::first_difference(cfg.boxl1.n), bx.delta).unwrap();
    record("boxl1", tape_lens(&boxl1, &bx.train[0].d, &bx.train[0].x));

    let market = random_market(&mut r, 0.05);
    let cfmm = CfmmModel::new(market.clone(), 1.0).unwrap();
    let dv = cfmm.data_vector(&market.reserves(), &market.prices).unwrap();
    let out_len = 2 * market.n_pools() * CFMM_TOKENS;
    record("cfmm", tape_lens(&cfmm, &dv, &vec![0.0; out_len]));

    outcome(ok, format!("tape nodes after 1/1000 forward iterations: {}", lines.join(", ")))
}

// ---------------------------------------------------------------- 10

struct Averaged {
    name: &'static str,
    worst_ratio: f64,
    converged: usize,
    worst_fixed_gap: f64,
}

fn averagedness<M: ImplicitModel>(
    name: &'static str,
    model: &M,
    data: &[Vec<f64>],
    state_len: usize,
    scale: f64,
    r: &mut ChaCha8Rng,
    stop: &StopRule,
) -> Averaged {
    let mut worst_ratio: f64 = 0.0;
    for k in 0..200 {
        let d = &data[k % data.len()];
        let x: Vec<f64> = (0..state_len).map(|_| scale * normal(r)).collect();
        let y: Vec<f64> = (0..state_len).map(|_| scale * normal(r)).collect();
        let tx = apply_operator(model, &x, d).unwrap();
        let ty = apply_operator(model, &y, d).unwrap();
        worst_ratio = worst_ratio.max(vector::dist(&tx, &ty) / vector::dist(&x, &y));
    }
    let (mut converged, mut worst_fixed_gap) = (0, 0.0f64);
    for d in data {
        let inf = infer(model, d, stop).unwrap();
        if inf.trace.converged {
            converged += 1;
            let t = apply_operator(model, &inf.state, d).unwrap();
            worst_fixed_gap = worst_fixed_gap.max(vector::dist(&t, &inf.state) / stop.residual_tol);
        }
    }
    Averaged { name, worst_ratio, converged, worst_fixed_gap }
}

fn c10_averagedness() -> Outcome {
    let mut r = rng(10);
    let stop = StopRule::new(1e-6, 50_000).unwrap();
    let mut results = Vec::new();

    let a = gaussian(&mut r, 15, 30, 1.0 / 15f64.sqrt());
    let sparse_data: Vec<Vec<f64>> = (0..10).map(|_| normals(&mut r, 15)).collect();
    let sparse = SparseRecoveryModel::ista(a.clone(), 0.05).unwrap();
    results.push(averagedness("sparse", &sparse, &sparse_data, 30, 1.0, &mut r, &stop));

    // step sizes as configured for the experiments
    let defaults = ExperimentConfig::default();
    let k = LinearMap::identity(30).add(&gaussian(&mut r, 30, 30, 0.05)).unwrap();
    let steps = LadmmSteps::with_alpha(defaults.dictionary.alpha, &k, &a).unwrap();
    let idm = IdmModel::with_steps(a.clone(), k, steps).unwrap();
    results.push(averagedness("idm", &idm, &sparse_data, idm.state_len(), 1.0, &mut r, &stop));

    let cfg = ExperimentConfig { experiment: ExperimentKind::Boxl1, seed: 10, train_n: Some(10), test_n: Some(1), ..ExperimentConfig::default() };
    let bx = gen_boxl1_data(&cfg);
    let kd = LinearMap::first_difference(cfg.boxl1.n);
    let steps = LadmmSteps::with_alpha(defaults.boxl1.alpha, &kd, &bx.a).unwrap();
    let boxl1 = BoxL1Model::with_steps(bx.a.clone(), kd, bx.delta, steps).unwrap();
    let bx_data: Vec<Vec<f64>> = bx.train.iter().map(|s| s.d.clone()).collect();
    results.push(averagedness("boxl1", &boxl1, &bx_data, boxl1.state_len(), 1.0, &mut r, &stop));

    let cfg = ExperimentConfig { experiment: ExperimentKind::Cfmm, seed: 10, train_n: Some(10), test_n: Some(1), ..ExperimentConfig::default() };
    let CfmmData { market, train, .. } = gen_cfmm_market(&cfg).unwrap();
    let mut trained = market.clone();
    for w in trained.risk_maps.iter_mut() {
        *w = LinearMap::identity(w.rows()).scaled(0.05);
    }
    let cfmm = CfmmModel::new(trained, 1.0).unwrap();
    let cfmm_data: Vec<Vec<f64>> = train.iter().map(|s| cfmm.data_vector(&s.observed, &market.prices).unwrap()).collect();
    let cfmm_stop = StopRule::new(1e-6, 50_000).unwrap();
    results.push(averagedness("cfmm", &cfmm, &cfmm_data, cfmm.state_len(), 10.0, &mut r, &cfmm_stop));

    let ok = results.iter().all(|a| a.worst_ratio <= 1.0 + 1e-9 && a.worst_fixed_gap <= 10.0);
    let parts: Vec<String> = results
        .iter()
        .map(|a| {
            format!(
                "{} max |Tx-Ty|/|x-y| = {:.9} with {} converged runs at max |T(x)-x|/tol = {:.2}",
                a.name, a.worst_ratio, a.converged, a.worst_fixed_gap
            )
        })
        .collect();
    outcome(ok, format!("200 pairs per operator (limit 1 + 1e-9, fixed-point gap <= 10 tol): {}", parts.join("; ")))
}
