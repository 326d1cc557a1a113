//! Cross-margin expected-loss ADL by dual decomposition.
//!
//! The clearing constraint `Σ x_i = Q` is priced by shadow prices `λ` and
//! each account solves a box-constrained convex subproblem. Assets that no
//! account links through a second free coordinate decouple, and each such
//! scalar market clears by bisection on its price with exact one-dimensional
//! best responses. Coupled blocks use supergradient ascent with step-weighted
//! primal averaging and a projection onto the clearing set.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accounts::{BoundsBox, CrossMarginAccount};
use crate::error::{check_dim, domain, AdlError, IterRecord, Result};
use crate::market_model::{discrete_cvar, sample, PriceLaw, PriceModel, ScenarioSet, SingleFactorModel};
use crate::numeric::clamped_fill;
use crate::single_factor::{psi, psi_prime};

/// How `E[σ_i(x_i, p_T)]` is evaluated.
#[derive(Clone)]
pub enum ExpectationModel {
    /// Sample average over weighted scenarios (exact for discrete laws).
    Scenarios(ScenarioSet),
    /// Closed form `E_i ψ(ℓ_i^{(v)})` under `p_T = p_tau + ε v`.
    SingleFactor(SingleFactorModel),
    /// Closed form for a single asset with a scalar law.
    Law(Arc<dyn PriceLaw>),
}

impl fmt::Debug for ExpectationModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExpectationModel::Scenarios(s) => write!(f, "Scenarios(S={}, d={})", s.len(), s.dim()),
            ExpectationModel::SingleFactor(m) => write!(f, "SingleFactor({m:?})"),
            ExpectationModel::Law(_) => f.write_str("Law"),
        }
    }
}

impl ExpectationModel {
    fn dim(&self) -> usize {
        match self {
            ExpectationModel::Scenarios(s) => s.dim(),
            ExpectationModel::SingleFactor(m) => m.dim(),
            ExpectationModel::Law(_) => 1,
        }
    }

    /// Closed forms where available, otherwise `n_scenarios` seeded draws.
    pub fn from_price_model(model: &PriceModel, n_scenarios: usize, seed: u64) -> Result<Self> {
        model.validate()?;
        Ok(match model {
            PriceModel::Gbm(m) => ExpectationModel::Law(Arc::new(*m)),
            PriceModel::ShiftedExponential(m) => ExpectationModel::Law(Arc::new(*m)),
            PriceModel::SingleFactor(m) => ExpectationModel::SingleFactor(m.clone()),
            PriceModel::BivariateGbm(_) => ExpectationModel::Scenarios(sample(model, n_scenarios, seed)?),
        })
    }
}

/// Accounts, target reductions `Q`, trigger prices and the loss model.
#[derive(Debug, Clone)]
pub struct ClearingProblem {
    accounts: Vec<CrossMarginAccount>,
    q_target: Vec<f64>,
    p_tau: Vec<f64>,
    model: ExpectationModel,
    equity: Vec<f64>,
    bounds: Vec<BoundsBox>,
    /// Scenario increments `p_s - p_tau`, row-major `S x d`.
    deltas: Vec<f64>,
    weights: Vec<f64>,
}

impl ClearingProblem {
    pub fn new(accounts: Vec<CrossMarginAccount>, q_target: Vec<f64>, p_tau: Vec<f64>, model: ExpectationModel) -> Result<Self> {
        let d = p_tau.len();
        check_dim(d, q_target.len())?;
        check_dim(d, model.dim())?;
        if let ExpectationModel::SingleFactor(m) = &model {
            m.validate()?;
            if m.p_tau != p_tau {
                return Err(domain("factor model trigger prices differ from the problem's"));
            }
        }
        for a in &accounts {
            a.validate(&p_tau)?;
        }
        for k in 0..d {
            let lo: f64 = accounts.iter().map(|a| a.q[k].min(0.0)).sum();
            let hi: f64 = accounts.iter().map(|a| a.q[k].max(0.0)).sum();
            let tol = 1e-12 * (1.0 + lo.abs() + hi.abs());
            if !(q_target[k] >= lo - tol && q_target[k] <= hi + tol) {
                return Err(AdlError::Infeasible(format!(
                    "Q[{k}] = {} outside [{lo}, {hi}]",
                    q_target[k]
                )));
            }
        }
        let equity = accounts.iter().map(|a| a.equity(&p_tau)).collect();
        let bounds = accounts
            .iter()
            .map(|a| a.directional_bounds(&q_target))
            .collect::<Result<Vec<_>>>()?;
        let (deltas, weights) = match &model {
            ExpectationModel::Scenarios(s) => (
                s.prices()
                    .iter()
                    .flat_map(|row| row.iter().zip(&p_tau).map(|(p, t)| p - t))
                    .collect(),
                s.probs().to_vec(),
            ),
            _ => (Vec::new(), Vec::new()),
        };
        Ok(Self {
            accounts,
            q_target,
            p_tau,
            model,
            equity,
            bounds,
            deltas,
            weights,
        })
    }

    pub fn accounts(&self) -> &[CrossMarginAccount] {
        &self.accounts
    }

    pub fn q_target(&self) -> &[f64] {
        &self.q_target
    }

    pub fn p_tau(&self) -> &[f64] {
        &self.p_tau
    }

    pub fn model(&self) -> &ExpectationModel {
        &self.model
    }

    pub fn bounds(&self) -> &[BoundsBox] {
        &self.bounds
    }

    pub fn dim(&self) -> usize {
        self.p_tau.len()
    }

    fn residual_exposure(&self, i: usize, x: &[f64]) -> Vec<f64> {
        self.accounts[i].q.iter().zip(x).map(|(q, x)| q - x).collect()
    }

    fn delta(&self, s: usize) -> &[f64] {
        let d = self.dim();
        &self.deltas[s * d..(s + 1) * d]
    }

    /// `E[σ_i(x_i, p_T)]` under the problem's model.
    fn account_loss(&self, i: usize, x: &[f64]) -> f64 {
        let y = self.residual_exposure(i, x);
        let e = self.equity[i];
        match &self.model {
            ExpectationModel::Scenarios(_) => (0..self.weights.len())
                .map(|s| self.weights[s] * (dot(&y, self.delta(s)) - e).max(0.0))
                .sum(),
            ExpectationModel::SingleFactor(m) => e * psi(&m.epsilon, dot(&m.v, &y) / e),
            ExpectationModel::Law(law) => law_loss(law.as_ref(), self.p_tau[0], y[0], e),
        }
    }

    /// A subgradient of `E[σ_i]` in `x_i`.
    fn account_subgradient(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let y = self.residual_exposure(i, x);
        let e = self.equity[i];
        let d = self.dim();
        match &self.model {
            ExpectationModel::Scenarios(_) => {
                let mut g = vec![0.0; d];
                for s in 0..self.weights.len() {
                    let delta = self.delta(s);
                    if dot(&y, delta) - e > 0.0 {
                        for k in 0..d {
                            g[k] -= self.weights[s] * delta[k];
                        }
                    }
                }
                g
            }
            ExpectationModel::SingleFactor(m) => {
                let slope = psi_prime(&m.epsilon, dot(&m.v, &y) / e);
                m.v.iter().map(|v| -v * slope).collect()
            }
            ExpectationModel::Law(law) => vec![-law_slope(law.as_ref(), self.p_tau[0], y[0], e)],
        }
    }

    /// Bound on `|∂E[σ_i]/∂x^k|`.
    fn lipschitz(&self, k: usize) -> f64 {
        match &self.model {
            ExpectationModel::Scenarios(_) => (0..self.weights.len())
                .map(|s| self.weights[s] * self.delta(s)[k].abs())
                .sum(),
            ExpectationModel::SingleFactor(m) => {
                let sup = psi_prime(&m.epsilon, 1e12).max(-psi_prime(&m.epsilon, -1e12));
                m.v[k].abs() * sup
            }
            ExpectationModel::Law(law) => {
                let p = self.p_tau[0];
                2.0 * law.expected_excess(p) - (law.mean() - p)
            }
        }
    }

    /// `E[σ_i]` along `x0 + a·dir` for `a ∈ [amin, amax]`.
    fn line(&self, i: usize, x0: &[f64], dir: &[f64], amin: f64, amax: f64) -> Line {
        let y0 = self.residual_exposure(i, x0);
        let e = self.equity[i];
        let kind = match &self.model {
            ExpectationModel::Scenarios(_) => {
                let terms = (0..self.weights.len()).map(|s| {
                    let delta = self.delta(s);
                    (dot(&y0, delta) - e, -dot(dir, delta), self.weights[s])
                });
                LineKind::Hinge(HingeSum1d::new(terms, amin, amax))
            }
            ExpectationModel::SingleFactor(m) => LineKind::Factor {
                e,
                z0: dot(&m.v, &y0) / e,
                dz: -dot(&m.v, dir) / e,
                law: m.epsilon,
            },
            ExpectationModel::Law(law) => LineKind::Law {
                law: Arc::clone(law),
                p: self.p_tau[0],
                e,
                y0: y0[0],
                dy: -dir[0],
            },
        };
        Line { amin, amax, kind }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

/// `E[(y(p_T - p) - e)₊]` for a scalar law.
fn law_loss(law: &dyn PriceLaw, p: f64, y: f64, e: f64) -> f64 {
    if y > 0.0 {
        y * law.expected_excess(p + e / y)
    } else if y < 0.0 {
        let c = p + e / y;
        (-y * (law.expected_excess(c) - law.mean() + c)).max(0.0)
    } else {
        0.0
    }
}

/// `d/dy E[(y(p_T - p) - e)₊] = E[(p_T - p) 1{y(p_T - p) > e}]`.
fn law_slope(law: &dyn PriceLaw, p: f64, y: f64, e: f64) -> f64 {
    if y == 0.0 {
        return 0.0;
    }
    let c = p + e / y;
    let upper = law.tail_excess_over(p, c);
    if y > 0.0 {
        upper
    } else {
        (law.mean() - p) - upper
    }
}

/// `a ↦ Σ_s w_s (c_s + g_s a)₊` on `[amin, amax]`, stored as sorted
/// breakpoints and the slope on each segment.
#[derive(Debug, Clone)]
pub struct HingeSum1d {
    amin: f64,
    amax: f64,
    breakpoints: Vec<f64>,
    slopes: Vec<f64>,
}

impl HingeSum1d {
    pub fn new(terms: impl Iterator<Item = (f64, f64, f64)>, amin: f64, amax: f64) -> Self {
        let mut base = 0.0;
        let mut kinks: Vec<(f64, f64)> = Vec::new();
        for (c, g, w) in terms {
            if g == 0.0 || w == 0.0 {
                continue;
            }
            let b = -c / g;
            let active_right_of_min = if g > 0.0 { b <= amin } else { b > amin };
            if active_right_of_min {
                base += w * g;
            }
            if b > amin && b < amax {
                kinks.push((b, w * g.abs()));
            }
        }
        kinks.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut slopes = Vec::with_capacity(kinks.len() + 1);
        slopes.push(base);
        let mut s = base;
        for &(_, inc) in &kinks {
            s += inc;
            slopes.push(s);
        }
        Self {
            amin,
            amax,
            breakpoints: kinks.into_iter().map(|k| k.0).collect(),
            slopes,
        }
    }

    /// Smallest and largest minimizers of `f(a) + c·a`.
    pub fn argmin(&self, c: f64) -> (f64, f64) {
        let j = self.slopes.partition_point(|s| s + c < 0.0);
        if j == self.slopes.len() {
            return (self.amax, self.amax);
        }
        let left = if j == 0 { self.amin } else { self.breakpoints[j - 1] };
        if self.slopes[j] + c > 0.0 {
            return (left, left);
        }
        let right = self.breakpoints.get(j).copied().unwrap_or(self.amax);
        (left, right)
    }
}

enum LineKind {
    Hinge(HingeSum1d),
    Factor {
        e: f64,
        z0: f64,
        dz: f64,
        law: crate::market_model::EpsilonLaw,
    },
    Law {
        law: Arc<dyn PriceLaw>,
        p: f64,
        e: f64,
        y0: f64,
        dy: f64,
    },
}

struct Line {
    amin: f64,
    amax: f64,
    kind: LineKind,
}

impl Line {
    fn derivative(&self, a: f64) -> f64 {
        match &self.kind {
            LineKind::Hinge(_) => unreachable!("hinge lines are minimized from breakpoints"),
            LineKind::Factor { e, z0, dz, law } => e * psi_prime(law, z0 + dz * a) * dz,
            LineKind::Law { law, p, e, y0, dy } => law_slope(law.as_ref(), *p, y0 + dy * a, *e) * dy,
        }
    }

    /// Smallest and largest minimizers of `f(a) + c·a` over the range.
    fn argmin(&self, c: f64) -> (f64, f64) {
        if let LineKind::Hinge(h) = &self.kind {
            return h.argmin(c);
        }
        let h = |a: f64| self.derivative(a) + c;
        let (h_lo, h_hi) = (h(self.amin), h(self.amax));
        let smallest = if h_lo >= 0.0 {
            self.amin
        } else if h_hi < 0.0 {
            self.amax
        } else {
            bisect(self.amin, self.amax, |a| h(a) >= 0.0).1
        };
        let largest = if h_hi <= 0.0 {
            self.amax
        } else if h_lo > 0.0 {
            self.amin
        } else {
            bisect(self.amin, self.amax, |a| h(a) > 0.0).0
        };
        (smallest, largest.max(smallest))
    }
}

/// Shrinks `[lo, hi]` around the switch of a monotone predicate
/// (`false` at `lo`, `true` at `hi`) to adjacent floats.
fn bisect(mut lo: f64, mut hi: f64, pred: impl Fn(f64) -> bool) -> (f64, f64) {
    for _ in 0..2100 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if pred(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    (lo, hi)
}

/// Per-account subproblem shape, fixed by the box.
enum Prep {
    Fixed,
    One { k: usize, line: Line },
    Many { free: Vec<usize> },
}

fn prepare(problem: &ClearingProblem, i: usize) -> Prep {
    let b = &problem.bounds[i];
    let free = b.free_coords();
    match free.as_slice() {
        [] => Prep::Fixed,
        [k] => {
            let mut x0 = b.lower.clone();
            x0[*k] = 0.0;
            let mut dir = vec![0.0; problem.dim()];
            dir[*k] = 1.0;
            Prep::One {
                k: *k,
                line: problem.line(i, &x0, &dir, b.lower[*k], b.upper[*k]),
            }
        }
        _ => Prep::Many { free },
    }
}

fn prepare_all(problem: &ClearingProblem) -> Vec<Prep> {
    (0..problem.accounts.len()).into_par_iter().map(|i| prepare(problem, i)).collect()
}

const MANY_ROUNDS: usize = 200;

/// Direction search for accounts with several free coordinates: exact line
/// minimization along coordinates, coordinate pairs and the projected
/// negative subgradient until no direction improves.
fn solve_many(problem: &ClearingProblem, i: usize, free: &[usize], lambda: &[f64], warm: &[f64]) -> Vec<f64> {
    let b = &problem.bounds[i];
    let d = problem.dim();
    let h = |x: &[f64]| problem.account_loss(i, x) + dot(lambda, x);
    let mut x = warm.to_vec();
    b.project(&mut x);
    let mut hx = h(&x);
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for (a, &j) in free.iter().enumerate() {
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        dirs.push(e);
        for &k in &free[a + 1..] {
            for sign in [1.0, -1.0] {
                let mut e = vec![0.0; d];
                e[j] = 1.0;
                e[k] = sign;
                dirs.push(e);
            }
        }
    }
    for _ in 0..MANY_ROUNDS {
        let mut improved = false;
        let g = problem.account_subgradient(i, &x);
        let steepest: Vec<f64> = (0..d)
            .map(|k| {
                let s = -(g[k] + lambda[k]);
                let blocked = (x[k] <= b.lower[k] && s < 0.0) || (x[k] >= b.upper[k] && s > 0.0);
                if blocked || !free.contains(&k) {
                    0.0
                } else {
                    s
                }
            })
            .collect();
        let candidates = dirs.iter().chain(std::iter::once(&steepest));
        for dir in candidates {
            if dir.iter().all(|v| *v == 0.0) {
                continue;
            }
            let (mut amin, mut amax) = (f64::NEG_INFINITY, f64::INFINITY);
            for k in 0..d {
                if dir[k] > 0.0 {
                    amin = amin.max((b.lower[k] - x[k]) / dir[k]);
                    amax = amax.min((b.upper[k] - x[k]) / dir[k]);
                } else if dir[k] < 0.0 {
                    amin = amin.max((b.upper[k] - x[k]) / dir[k]);
                    amax = amax.min((b.lower[k] - x[k]) / dir[k]);
                }
            }
            let (amin, amax) = (amin.min(0.0), amax.max(0.0));
            if amax - amin <= 0.0 {
                continue;
            }
            let line = problem.line(i, &x, dir, amin, amax);
            let (a, _) = line.argmin(dot(lambda, dir));
            let mut cand: Vec<f64> = x.iter().zip(dir).map(|(x, d)| x + a * d).collect();
            b.project(&mut cand);
            let hc = h(&cand);
            if hc < hx - 1e-15 * (1.0 + hx.abs()) {
                x = cand;
                hx = hc;
                improved = true;
            }
        }
        if !improved {
            match kink_descent(problem, i, free, lambda, &x, hx) {
                Some((cand, hc)) => {
                    x = cand;
                    hx = hc;
                }
                None => break,
            }
        }
    }
    x
}

/// Exact line minimization of `x ↦ E[σ_i(x)] + λᵀx` from `x` along `dir`,
/// clipped to the box.
fn line_step(problem: &ClearingProblem, i: usize, lambda: &[f64], x: &[f64], dir: &[f64]) -> Option<Vec<f64>> {
    let b = &problem.bounds[i];
    let (mut amin, mut amax) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..x.len() {
        if dir[k] > 0.0 {
            amin = amin.max((b.lower[k] - x[k]) / dir[k]);
            amax = amax.min((b.upper[k] - x[k]) / dir[k]);
        } else if dir[k] < 0.0 {
            amin = amin.max((b.upper[k] - x[k]) / dir[k]);
            amax = amax.min((b.lower[k] - x[k]) / dir[k]);
        }
    }
    let (amin, amax) = (amin.min(0.0), amax.max(0.0));
    if !(amax - amin > 0.0) {
        return None;
    }
    let (a, _) = problem.line(i, x, dir, amin, amax).argmin(dot(lambda, dir));
    let mut cand: Vec<f64> = x.iter().zip(dir).map(|(x, d)| x + a * d).collect();
    b.project(&mut cand);
    Some(cand)
}

/// ε-steepest descent for scenario losses, used once every fixed direction
/// stalls on a kink. Hinges within `ε` of their switch enter the
/// subdifferential with a free weight in `[0, 1]`; the negative of its
/// minimum-norm element is a descent direction unless `x` is
/// `ε`-optimal, in which case `ε` shrinks.
fn kink_descent(problem: &ClearingProblem, i: usize, free: &[usize], lambda: &[f64], x: &[f64], hx: f64) -> Option<(Vec<f64>, f64)> {
    if !matches!(problem.model, ExpectationModel::Scenarios(_)) {
        return None;
    }
    let b = &problem.bounds[i];
    let d = problem.dim();
    let y = problem.residual_exposure(i, x);
    let e = problem.equity[i];
    let n_s = problem.weights.len();
    let margins: Vec<f64> = (0..n_s).map(|s| dot(&y, problem.delta(s)) - e).collect();
    let scale = e.abs() + (0..n_s).map(|s| y.iter().zip(problem.delta(s)).map(|(y, d)| (y * d).abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut eps = 1e-3 * scale;
    while eps > 1e-13 * scale {
        let mut base: Vec<f64> = lambda.to_vec();
        let mut tight: Vec<Vec<f64>> = Vec::new();
        for s in 0..n_s {
            let grad: Vec<f64> = problem.delta(s).iter().map(|v| -problem.weights[s] * v).collect();
            if margins[s] > eps {
                for k in 0..d {
                    base[k] += grad[k];
                }
            } else if margins[s] >= -eps {
                tight.push(grad);
            }
        }
        // coordinates pinned by the box drop out of the tangent cone when
        // the descent direction would push through the bound
        let mut open: Vec<usize> = free.to_vec();
        for _ in 0..=d {
            let v = min_norm(&base, &tight, &open);
            let before = open.len();
            open.retain(|&k| !((x[k] <= b.lower[k] && v[k] > 0.0) || (x[k] >= b.upper[k] && v[k] < 0.0)));
            if open.len() == before {
                let dir: Vec<f64> = (0..d).map(|k| if open.contains(&k) { -v[k] } else { 0.0 }).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    if let Some(cand) = line_step(problem, i, lambda, x, &dir) {
                        let hc = problem.account_loss(i, &cand) + dot(lambda, &cand);
                        if hc < hx - 1e-15 * (1.0 + hx.abs()) {
                            return Some((cand, hc));
                        }
                    }
                }
                break;
            }
        }
        eps *= 0.1;
    }
    None
}

/// `base + Σ_j θ_j a_j` of least norm on the `open` coordinates over
/// `θ ∈ [0, 1]^m`, by cyclic exact coordinate minimization.
fn min_norm(base: &[f64], tight: &[Vec<f64>], open: &[usize]) -> Vec<f64> {
    let mut theta = vec![0.5; tight.len()];
    let mut v = base.to_vec();
    for (t, a) in theta.iter().zip(tight) {
        for k in 0..v.len() {
            v[k] += t * a[k];
        }
    }
    let sq: Vec<f64> = tight.iter().map(|a| open.iter().map(|&k| a[k] * a[k]).sum()).collect();
    for _ in 0..200 {
        let mut moved = 0.0f64;
        for (j, a) in tight.iter().enumerate() {
            if sq[j] == 0.0 {
                continue;
            }
            let slope: f64 = open.iter().map(|&k| a[k] * v[k]).sum();
            let next = (theta[j] - slope / sq[j]).clamp(0.0, 1.0);
            let step = next - theta[j];
            if step != 0.0 {
                for k in 0..v.len() {
                    v[k] += step * a[k];
                }
                theta[j] = next;
                moved = moved.max(step.abs());
            }
        }
        if moved < 1e-12 {
            break;
        }
    }
    v
}

/// Smallest and largest best responses of account `i` (equal unless the
/// account has a single free coordinate with a flat stretch).
fn best_response(problem: &ClearingProblem, prep: &Prep, i: usize, lambda: &[f64], warm: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
    let b = &problem.bounds[i];
    match prep {
        Prep::Fixed => (b.lower.clone(), b.lower.clone()),
        Prep::One { k, line } => {
            let (lo, hi) = line.argmin(lambda[*k]);
            let mut xl = b.lower.clone();
            let mut xh = b.lower.clone();
            xl[*k] = lo;
            xh[*k] = hi;
            (xl, xh)
        }
        Prep::Many { free } => {
            let x = solve_many(problem, i, free, lambda, warm.unwrap_or(&b.lower));
            (x.clone(), x)
        }
    }
}

/// `argmin_{x_i ∈ Y_i} E[σ_i(x_i, p_T)] + λᵀx_i`, ties toward the lower bound.
pub fn account_subproblem(problem: &ClearingProblem, i: usize, lambda: &[f64]) -> Result<Vec<f64>> {
    check_dim(problem.dim(), lambda.len())?;
    if i >= problem.accounts.len() {
        return Err(domain(format!("account index {i} out of range")));
    }
    Ok(best_response(problem, &prepare(problem, i), i, lambda, None).0)
}

/// Shadow prices with the supergradient `Σ x_i(λ) - Q` and `g(λ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub lambda: Vec<f64>,
    pub residual: Vec<f64>,
    pub g_value: f64,
}

pub fn dual_state(problem: &ClearingProblem, lambda: &[f64]) -> Result<DualState> {
    check_dim(problem.dim(), lambda.len())?;
    let preps = prepare_all(problem);
    let xs: Vec<Vec<f64>> = (0..problem.accounts.len())
        .into_par_iter()
        .map(|i| best_response(problem, &preps[i], i, lambda, None).0)
        .collect();
    let phi: f64 = xs
        .iter()
        .enumerate()
        .map(|(i, x)| problem.account_loss(i, x) + dot(lambda, x))
        .sum();
    Ok(DualState {
        lambda: lambda.to_vec(),
        residual: clearing_residual(problem, &xs),
        g_value: phi - dot(lambda, &problem.q_target),
    })
}

/// `g(λ) = -λᵀQ + Σ_i φ_i(λ)`.
pub fn dual_value(problem: &ClearingProblem, lambda: &[f64]) -> Result<f64> {
    Ok(dual_state(problem, lambda)?.g_value)
}

fn clearing_residual(problem: &ClearingProblem, x: &[Vec<f64>]) -> Vec<f64> {
    (0..problem.dim())
        .map(|k| x.iter().map(|xi| xi[k]).sum::<f64>() - problem.q_target[k])
        .collect()
}

fn check_allocation(problem: &ClearingProblem, x: &[Vec<f64>]) -> Result<()> {
    check_dim(problem.accounts.len(), x.len())?;
    for xi in x {
        check_dim(problem.dim(), xi.len())?;
    }
    Ok(())
}

/// Expected loss `Σ_i E[σ_i(x_i, p_T)]` under the problem's model.
pub fn expected_loss(problem: &ClearingProblem, x: &[Vec<f64>]) -> Result<f64> {
    check_allocation(problem, x)?;
    Ok(x.iter().enumerate().map(|(i, xi)| problem.account_loss(i, xi)).sum())
}

/// Total shortfall `L(x, p)` in each scenario.
pub fn scenario_total_losses(problem: &ClearingProblem, x: &[Vec<f64>], scenarios: &ScenarioSet) -> Result<Vec<f64>> {
    check_allocation(problem, x)?;
    check_dim(problem.dim(), scenarios.dim())?;
    Ok(scenarios
        .prices()
        .iter()
        .map(|p| {
            problem
                .accounts
                .iter()
                .zip(x)
                .map(|(a, xi)| a.shortfall(xi, p, &problem.p_tau).unwrap_or(0.0))
                .sum()
        })
        .collect())
}

/// Probability-weighted average of `L(x, p)` over the scenarios.
pub fn saa_loss(problem: &ClearingProblem, x: &[Vec<f64>], scenarios: &ScenarioSet) -> Result<f64> {
    let losses = scenario_total_losses(problem, x, scenarios)?;
    Ok(losses.iter().zip(scenarios.probs()).map(|(l, w)| l * w).sum())
}

/// `CVaR_β` of the total shortfall under the scenario law.
pub fn saa_cvar(problem: &ClearingProblem, x: &[Vec<f64>], scenarios: &ScenarioSet, beta: f64) -> Result<f64> {
    let losses = scenario_total_losses(problem, x, scenarios)?;
    discrete_cvar(&losses, scenarios.probs(), beta)
}

/// Number of assets with `Q^k ≠ 0`.
pub fn effective_dimension(problem: &ClearingProblem) -> usize {
    problem.q_target.iter().filter(|q| **q != 0.0).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualParams {
    pub max_iter: usize,
    pub tol: f64,
    /// Initial step `t₀`; defaults to a price scale over `1 + Σ_i ‖u_i - l_i‖₁`.
    pub t0: Option<f64>,
}

impl Default for DualParams {
    fn default() -> Self {
        Self {
            max_iter: 20_000,
            tol: 1e-6,
            t0: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSolveReport {
    pub x: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub objective: f64,
    pub dual_value: f64,
    pub duality_gap: f64,
    /// `|objective - dual_value| / max(1, |objective|, |dual_value|)`.
    pub relative_gap: f64,
    /// `Σ_i x_i - Q` recomputed from the returned allocation.
    pub residual: Vec<f64>,
    pub iterations: usize,
    pub effective_dimension: usize,
    pub method: String,
    pub trace: Vec<IterRecord>,
}

struct Block {
    x: Vec<(usize, Vec<f64>)>,
    lambda: Vec<(usize, f64)>,
    g_value: f64,
    trace: Vec<IterRecord>,
}

/// Groups active assets that some account links through two free coordinates.
fn blocks(problem: &ClearingProblem, preps: &[Prep]) -> Vec<(Vec<usize>, Vec<usize>)> {
    let d = problem.dim();
    let mut parent: Vec<usize> = (0..d).collect();
    fn root(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for prep in preps {
        if let Prep::Many { free } = prep {
            for w in free.windows(2) {
                let (a, b) = (root(&mut parent, w[0]), root(&mut parent, w[1]));
                parent[a] = b;
            }
        }
    }
    let mut out: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    for k in (0..d).filter(|&k| problem.q_target[k] != 0.0) {
        let r = root(&mut parent, k);
        match out.iter_mut().find(|(assets, _)| root(&mut parent, assets[0]) == r) {
            Some((assets, _)) => assets.push(k),
            None => out.push((vec![k], Vec::new())),
        }
    }
    for (i, prep) in preps.iter().enumerate() {
        let first = match prep {
            Prep::Fixed => continue,
            Prep::One { k, .. } => *k,
            Prep::Many { free } => free[0],
        };
        let r = root(&mut parent, first);
        if let Some((_, accts)) = out.iter_mut().find(|(assets, _)| root(&mut parent, assets[0]) == r) {
            accts.push(i);
        }
    }
    out
}

fn scalar_block(problem: &ClearingProblem, preps: &[Prep], k: usize, accts: &[usize]) -> Result<Block> {
    let q = problem.q_target[k];
    let d = problem.dim();
    let lip = problem.lipschitz(k);
    let (mut lo, mut hi) = (-(2.0 * lip + 1.0), 2.0 * lip + 1.0);
    let lam_vec = |l: f64| {
        let mut v = vec![0.0; d];
        v[k] = l;
        v
    };
    let respond = |l: f64| -> Vec<(Vec<f64>, Vec<f64>)> {
        let lam = lam_vec(l);
        accts
            .par_iter()
            .map(|&i| best_response(problem, &preps[i], i, &lam, None))
            .collect()
    };
    let g_at = |l: f64, resp: &[(Vec<f64>, Vec<f64>)]| -> f64 {
        let phi: f64 = accts
            .iter()
            .zip(resp)
            .map(|(&i, (x, _))| problem.account_loss(i, x) + l * x[k])
            .sum();
        phi - l * q
    };
    let mut trace = Vec::new();
    let mut exact = None;
    for iter in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let resp = respond(mid);
        let r_min: f64 = resp.iter().map(|(a, _)| a[k]).sum::<f64>() - q;
        let r_max: f64 = resp.iter().map(|(_, b)| b[k]).sum::<f64>() - q;
        let res = if r_min > 0.0 {
            r_min
        } else if r_max < 0.0 {
            -r_max
        } else {
            0.0
        };
        trace.push(IterRecord {
            iter,
            residual_inf: res,
            g_value: g_at(mid, &resp),
        });
        if r_min > 0.0 {
            lo = mid;
        } else if r_max < 0.0 {
            hi = mid;
        } else {
            exact = Some(mid);
            break;
        }
    }
    let lambda = exact.unwrap_or(0.5 * (lo + hi));
    // Responses just either side of λ. The slack keeps flat stretches whose
    // slope ties with λ only up to rounding.
    let slack = 1e-11 * (1.0 + lip);
    let upper_at_lo: Vec<f64> = respond(lambda - slack).iter().map(|(_, b)| b[k]).collect();
    let lower_at_hi: Vec<f64> = respond(lambda + slack).iter().map(|(a, _)| a[k]).collect();
    // among optimal allocations, equalize leverage in this asset
    let a: Vec<f64> = accts.iter().map(|&i| problem.accounts[i].q[k]).collect();
    let b: Vec<f64> = accts.iter().map(|&i| problem.equity[i] / problem.p_tau[k]).collect();
    let lower: Vec<f64> = lower_at_hi.iter().zip(&upper_at_lo).map(|(l, u)| l.min(*u)).collect();
    let upper: Vec<f64> = lower_at_hi.iter().zip(&upper_at_lo).map(|(l, u)| l.max(*u)).collect();
    let (_, xk) = clamped_fill(&a, &b, &lower, &upper, q)?;
    let x = accts
        .iter()
        .zip(xk)
        .map(|(&i, v)| {
            let mut xi = problem.bounds[i].lower.clone();
            xi[k] = v;
            (i, xi)
        })
        .collect();
    let g_value = g_at(lambda, &respond(lambda));
    Ok(Block {
        x,
        lambda: vec![(k, lambda)],
        g_value,
        trace,
    })
}

/// Per-asset Euclidean projection onto `{Σ_i x_i^k = Q^k, l ≤ x ≤ u}`.
fn project_clearing(problem: &ClearingProblem, assets: &[usize], accts: &[usize], x: &mut [Vec<f64>]) -> Result<()> {
    for &k in assets {
        let a: Vec<f64> = x.iter().map(|xi| xi[k]).collect();
        let ones = vec![1.0; accts.len()];
        let lo: Vec<f64> = accts.iter().map(|&i| problem.bounds[i].lower[k]).collect();
        let hi: Vec<f64> = accts.iter().map(|&i| problem.bounds[i].upper[k]).collect();
        let (_, xk) = clamped_fill(&a, &ones, &lo, &hi, problem.q_target[k])?;
        for (xi, v) in x.iter_mut().zip(xk) {
            xi[k] = v;
        }
    }
    Ok(())
}

fn coupled_block(problem: &ClearingProblem, preps: &[Prep], assets: &[usize], accts: &[usize], params: &DualParams) -> Result<Block> {
    let d = problem.dim();
    let q_inf = problem.q_target.iter().fold(0.0f64, |m, q| m.max(q.abs()));
    let tol = params.tol * (1.0 + q_inf);
    // per-asset step scale: price sensitivity over the room to move
    let t0: Vec<f64> = (0..d)
        .map(|k| {
            let width: f64 = accts.iter().map(|&i| problem.bounds[i].upper[k] - problem.bounds[i].lower[k]).sum();
            params.t0.unwrap_or(problem.lipschitz(k).max(f64::MIN_POSITIVE) / (1.0 + width))
        })
        .collect();
    let block_loss = |x: &[Vec<f64>]| -> f64 { accts.iter().zip(x).map(|(&i, xi)| problem.account_loss(i, xi)).sum() };
    let q_dot = |lam: &[f64]| -> f64 { assets.iter().map(|&k| lam[k] * problem.q_target[k]).sum() };

    let mut lambda = vec![0.0; d];
    let mut x: Vec<Vec<f64>> = accts.iter().map(|&i| problem.bounds[i].lower.clone()).collect();
    let mut avg: Vec<Vec<f64>> = vec![vec![0.0; d]; accts.len()];
    let mut weight = 0.0;
    let (mut best_g, mut best_lambda) = (f64::NEG_INFINITY, lambda.clone());
    let (mut best_x, mut best_f) = (None::<Vec<Vec<f64>>>, f64::INFINITY);
    let mut trace = Vec::new();
    let mut bar_res = f64::INFINITY;
    let mut certified = false;
    for iter in 0..params.max_iter {
        x = accts
            .par_iter()
            .zip(x.par_iter())
            .map(|(&i, warm)| best_response(problem, &preps[i], i, &lambda, Some(warm)).0)
            .collect();
        let r: Vec<f64> = assets
            .iter()
            .map(|&k| x.iter().map(|xi| xi[k]).sum::<f64>() - problem.q_target[k])
            .collect();
        let g = block_loss(&x) + accts.iter().zip(&x).map(|(_, xi)| dot(&lambda, xi)).sum::<f64>() - q_dot(&lambda);
        if g > best_g {
            best_g = g;
            best_lambda = lambda.clone();
        }
        let r_inf = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        trace.push(IterRecord {
            iter,
            residual_inf: r_inf,
            g_value: g,
        });
        let t = 1.0 / ((iter + 1) as f64).sqrt();
        for (acc, xi) in avg.iter_mut().zip(&x) {
            for k in 0..d {
                acc[k] += t * xi[k];
            }
        }
        weight += t;
        let bar: Vec<Vec<f64>> = avg.iter().map(|a| a.iter().map(|v| v / weight).collect()).collect();
        bar_res = assets
            .iter()
            .map(|&k| (bar.iter().map(|xi| xi[k]).sum::<f64>() - problem.q_target[k]).abs())
            .fold(0.0, f64::max);
        if r_inf == 0.0 || iter % 10 == 0 || iter + 1 == params.max_iter {
            for mut cand in [bar, x.clone()] {
                project_clearing(problem, assets, accts, &mut cand)?;
                let f = block_loss(&cand);
                if f < best_f {
                    best_f = f;
                    best_x = Some(cand);
                }
            }
            // a feasible candidate within the duality-gap tolerance of g is
            // optimal whatever the averaged residual
            certified = best_f - best_g <= params.tol * best_f.abs().max(1.0);
            if r_inf == 0.0 || certified {
                break;
            }
        }
        for (j, &k) in assets.iter().enumerate() {
            lambda[k] += t * t0[k] * r[j];
        }
    }
    if !certified && bar_res > tol && trace.last().is_none_or(|t| t.residual_inf > 0.0) {
        return Err(AdlError::Convergence {
            iterations: trace.len(),
            residual: bar_res,
            trace: Box::new(trace),
        });
    }
    let x = best_x.ok_or_else(|| AdlError::Internal("no primal candidate".into()))?;
    Ok(Block {
        x: accts.iter().copied().zip(x).collect(),
        lambda: assets.iter().map(|&k| (k, best_lambda[k])).collect(),
        g_value: best_g,
        trace,
    })
}

/// Maximizes `g` and recovers a clearing allocation.
pub fn dual_ascent(problem: &ClearingProblem, params: &DualParams) -> Result<MultiSolveReport> {
    if !(params.tol > 0.0) || params.max_iter == 0 {
        return Err(domain("dual ascent needs tol > 0 and max_iter >= 1"));
    }
    let n = problem.accounts.len();
    let d = problem.dim();
    let preps = prepare_all(problem);
    let mut x: Vec<Vec<f64>> = problem.bounds.iter().map(|b| b.lower.clone()).collect();
    let mut lambda = vec![0.0; d];
    let mut g_value: f64 = (0..n)
        .filter(|&i| matches!(preps[i], Prep::Fixed))
        .map(|i| problem.account_loss(i, &x[i]))
        .sum();
    let mut trace = Vec::new();
    let mut methods = Vec::new();
    for (assets, accts) in blocks(problem, &preps) {
        let block = if assets.len() == 1 {
            methods.push("bisection");
            scalar_block(problem, &preps, assets[0], &accts)?
        } else {
            methods.push("supergradient");
            coupled_block(problem, &preps, &assets, &accts, params)?
        };
        for (i, xi) in block.x {
            x[i] = xi;
        }
        for (k, l) in block.lambda {
            lambda[k] = l;
        }
        g_value += block.g_value;
        let offset = trace.len();
        trace.extend(block.trace.into_iter().map(|r| IterRecord {
            iter: r.iter + offset,
            ..r
        }));
    }
    methods.dedup();
    let objective = expected_loss(problem, &x)?;
    let residual = clearing_residual(problem, &x);
    let q_inf = problem.q_target.iter().fold(0.0f64, |m, q| m.max(q.abs()));
    let res_inf = residual.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    if res_inf > params.tol * (1.0 + q_inf) {
        return Err(AdlError::Convergence {
            iterations: trace.len(),
            residual: res_inf,
            trace: Box::new(trace),
        });
    }
    let gap = objective - g_value;
    let denom = objective.abs().max(g_value.abs()).max(1.0);
    Ok(MultiSolveReport {
        x,
        lambda,
        objective,
        dual_value: g_value,
        duality_gap: gap,
        relative_gap: gap.abs() / denom,
        residual,
        iterations: trace.len(),
        effective_dimension: effective_dimension(problem),
        method: if methods.is_empty() {
            "trivial".into()
        } else {
            methods.join("+")
        },
        trace,
    })
}
