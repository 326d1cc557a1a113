//! Clipped water-filling on factor leverage under `p_T = p_tau + ε v`.
//!
//! Per unit of equity an account's expected shortfall is `ψ(ℓ)` with
//! `ψ(z) = E[(εz - 1)₊]` and `ℓ = vᵀ(q - x) / E` its factor leverage. The
//! optimal targets clip a common level to each account's feasible interval.

use serde::{Deserialize, Serialize};

use crate::accounts::{BoundsBox, CrossMarginAccount};
use crate::error::{check_dim, domain, AdlError, Result};
use crate::market_model::{EpsilonLaw, SingleFactorModel};
use crate::normal;
use crate::numeric::{clamped_fill, integrate};

const QUAD_TOL: f64 = 1e-14;

/// `ψ(z) = E[(εz - 1)₊]`.
pub fn psi(law: &EpsilonLaw, z: f64) -> f64 {
    if z == 0.0 {
        return 0.0;
    }
    match law {
        EpsilonLaw::StandardNormal => {
            // |z| E[(ε - 1/|z|)₊], by symmetry of ε
            z.abs() * normal::expected_excess(1.0 / z.abs())
        }
        _ => psi_quadrature(law, z),
    }
}

/// `ψ'(z) = E[ε 1{εz > 1}]`, strictly increasing with `ψ'(0) = 0`.
pub fn psi_prime(law: &EpsilonLaw, z: f64) -> f64 {
    if z == 0.0 {
        return 0.0;
    }
    match law {
        EpsilonLaw::StandardNormal => z.signum() * normal::pdf(1.0 / z),
        _ => psi_prime_quadrature(law, z),
    }
}

/// Integration window `{e : e z > 1}` truncated to the effective support.
fn window(law: &EpsilonLaw, z: f64) -> Option<(f64, f64)> {
    let r = law.support_radius();
    let c = 1.0 / z;
    if c.abs() >= r {
        None
    } else if z > 0.0 {
        Some((c, r))
    } else {
        Some((-r, c))
    }
}

fn split_integral<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    // the Laplace density has a kink at zero
    if a < 0.0 && b > 0.0 {
        integrate(f, a, 0.0, QUAD_TOL) + integrate(f, 0.0, b, QUAD_TOL)
    } else {
        integrate(f, a, b, QUAD_TOL)
    }
}

pub(crate) fn psi_quadrature(law: &EpsilonLaw, z: f64) -> f64 {
    match window(law, z) {
        None => 0.0,
        Some((a, b)) => split_integral(&|e: f64| (e * z - 1.0) * law.pdf(e), a, b).max(0.0),
    }
}

pub(crate) fn psi_prime_quadrature(law: &EpsilonLaw, z: f64) -> f64 {
    match window(law, z) {
        None => 0.0,
        Some((a, b)) => split_integral(&|e: f64| e * law.pdf(e), a, b),
    }
}

/// Smallest `z` in `[lo, hi]` with `ψ'(z) ≥ eta`, by bisection to full precision.
fn bisect_psi_prime(law: &EpsilonLaw, eta: f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if psi_prime(law, mid) < eta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// `(ψ')⁻¹(η)` by safeguarded bisection on a geometrically grown bracket.
pub fn psi_prime_inverse(law: &EpsilonLaw, eta: f64) -> Result<f64> {
    if eta == 0.0 {
        return Ok(0.0);
    }
    let mut z = 1.0;
    while psi_prime(law, z) < eta || psi_prime(law, -z) > eta {
        z *= 2.0;
        if z > 1e300 {
            return Err(domain(format!("{eta} is outside the range of ψ'")));
        }
    }
    Ok(bisect_psi_prime(law, eta, -z, z))
}

/// Feasible factor-leverage range of one account.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorInterval {
    pub lo: f64,
    pub hi: f64,
}

impl FactorInterval {
    pub fn contains(&self, z: f64, tol: f64) -> bool {
        z >= self.lo - tol && z <= self.hi + tol
    }
}

/// Image of the directional box under `x ↦ vᵀ(q - x) / E`.
pub fn factor_interval(account: &CrossMarginAccount, q_target: &[f64], v: &[f64], p_tau: &[f64]) -> Result<FactorInterval> {
    check_dim(account.dim(), v.len())?;
    let bounds = account.directional_bounds(q_target)?;
    let e = account.equity(p_tau);
    let (mut lo, mut hi) = (0.0, 0.0);
    for k in 0..account.dim() {
        let a = v[k] * (account.q[k] - bounds.upper[k]);
        let b = v[k] * (account.q[k] - bounds.lower[k]);
        lo += a.min(b);
        hi += a.max(b);
    }
    Ok(FactorInterval { lo: lo / e, hi: hi / e })
}

/// Unique minimizer of `ψ(z) - ηz` over the interval.
pub fn clipped_target(law: &EpsilonLaw, interval: FactorInterval, eta: f64) -> f64 {
    if eta <= psi_prime(law, interval.lo) {
        interval.lo
    } else if eta >= psi_prime(law, interval.hi) {
        interval.hi
    } else {
        bisect_psi_prime(law, eta, interval.lo, interval.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorTargets {
    pub eta_star: f64,
    /// Common water level; targets are this level clipped to each interval.
    pub level: f64,
    pub targets: Vec<f64>,
    pub intervals: Vec<FactorInterval>,
    pub implementable: bool,
    pub x_star: Option<Vec<Vec<f64>>>,
}

/// `vᵀ(Σ q_i - Q)`: the equity-weighted factor exposure every feasible
/// allocation leaves behind.
pub fn factor_budget(accounts: &[CrossMarginAccount], q_target: &[f64], v: &[f64]) -> f64 {
    let held: f64 = accounts
        .iter()
        .map(|a| a.q.iter().zip(v).map(|(q, v)| q * v).sum::<f64>())
        .sum();
    held - q_target.iter().zip(v).map(|(q, v)| q * v).sum::<f64>()
}

/// Solves the budget equation `Σ E_i ℓ_i*(η) = vᵀ(Σ q_i - Q)`.
///
/// Since `ψ'` is strictly increasing, `ℓ_i*(ψ'(z)) = clamp(z, lo_i, hi_i)`,
/// so the equation is solved exactly in the level `z` and `η* = ψ'(z*)`.
pub fn solve_eta(accounts: &[CrossMarginAccount], q_target: &[f64], model: &SingleFactorModel) -> Result<FactorTargets> {
    model.validate()?;
    check_dim(model.dim(), q_target.len())?;
    let p_tau = &model.p_tau;
    let intervals = accounts
        .iter()
        .map(|a| factor_interval(a, q_target, &model.v, p_tau))
        .collect::<Result<Vec<_>>>()?;
    let equity: Vec<f64> = accounts.iter().map(|a| a.equity(p_tau)).collect();
    let rhs = factor_budget(accounts, q_target, &model.v);
    let zeros = vec![0.0; accounts.len()];
    let lo: Vec<f64> = intervals.iter().zip(&equity).map(|(iv, e)| e * iv.lo).collect();
    let hi: Vec<f64> = intervals.iter().zip(&equity).map(|(iv, e)| e * iv.hi).collect();
    let (nu, _) = clamped_fill(&zeros, &equity, &lo, &hi, rhs).map_err(|_| {
        let (a, b): (f64, f64) = (lo.iter().sum(), hi.iter().sum());
        AdlError::Infeasible(format!("factor budget {rhs} outside [{a}, {b}]"))
    })?;
    let level = -nu;
    let targets: Vec<f64> = intervals.iter().map(|iv| level.clamp(iv.lo, iv.hi)).collect();
    let achieved: f64 = targets.iter().zip(&equity).map(|(t, e)| t * e).sum();
    if (achieved - rhs).abs() > 1e-10 * (1.0 + rhs.abs()) {
        return Err(AdlError::Internal(format!("budget residual {}", achieved - rhs)));
    }
    Ok(FactorTargets {
        eta_star: psi_prime(&model.epsilon, level),
        level,
        targets,
        intervals,
        implementable: false,
        x_star: None,
    })
}

/// Allocation hitting the targets when only asset `k0` is delevered.
pub fn implement_single_asset(
    accounts: &[CrossMarginAccount],
    q_target: &[f64],
    k0: usize,
    targets: &[f64],
    model: &SingleFactorModel,
) -> Result<Vec<Vec<f64>>> {
    let d = model.dim();
    check_dim(d, q_target.len())?;
    check_dim(accounts.len(), targets.len())?;
    if k0 >= d {
        return Err(domain(format!("asset index {k0} out of range")));
    }
    if (0..d).any(|k| k != k0 && q_target[k] != 0.0) {
        return Err(domain("single-asset construction needs Q^k = 0 off the delevered asset"));
    }
    let v = &model.v;
    if v[k0] == 0.0 {
        return Err(AdlError::Unsupported(format!("factor loading on asset {k0} is zero")));
    }
    let mut x = Vec::with_capacity(accounts.len());
    for (a, &target) in accounts.iter().zip(targets) {
        let iv = factor_interval(a, q_target, v, &model.p_tau)?;
        if !iv.contains(target, 1e-9 * (1.0 + iv.lo.abs() + iv.hi.abs())) {
            return Err(domain(format!(
                "target {target} for account {} outside [{}, {}]",
                a.id, iv.lo, iv.hi
            )));
        }
        let bounds = a.directional_bounds(q_target)?;
        let others: f64 = (0..d).filter(|&k| k != k0).map(|k| v[k] * a.q[k]).sum();
        let e = a.equity(&model.p_tau);
        let mut xi = vec![0.0; d];
        xi[k0] = (a.q[k0] - (e * target - others) / v[k0]).clamp(bounds.lower[k0], bounds.upper[k0]);
        x.push(xi);
    }
    let cleared: f64 = x.iter().map(|xi| xi[k0]).sum();
    if (cleared - q_target[k0]).abs() > 1e-9 * (1.0 + q_target[k0].abs()) {
        return Err(AdlError::Internal(format!(
            "constructed allocation clears {cleared} instead of {}",
            q_target[k0]
        )));
    }
    Ok(x)
}

/// Targets plus, when a single asset is delevered, the implementing allocation.
pub fn factor_water_fill(accounts: &[CrossMarginAccount], q_target: &[f64], model: &SingleFactorModel) -> Result<FactorTargets> {
    let mut out = solve_eta(accounts, q_target, model)?;
    let active: Vec<usize> = (0..q_target.len()).filter(|&k| q_target[k] != 0.0).collect();
    match active.as_slice() {
        [] => {
            out.x_star = Some(vec![vec![0.0; q_target.len()]; accounts.len()]);
            out.implementable = true;
        }
        [k0] if model.v[*k0] != 0.0 => {
            out.x_star = Some(implement_single_asset(accounts, q_target, *k0, &out.targets, model)?);
            out.implementable = true;
        }
        _ => {}
    }
    Ok(out)
}

/// Interior-coverage graph over the actively delevered assets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageGraph {
    /// `K = {k : Q^k ≠ 0, v^k ≠ 0}`.
    pub assets: Vec<usize>,
    /// Strictly interior active coordinates of each account.
    pub interior: Vec<Vec<usize>>,
    pub edges: Vec<(usize, usize)>,
    /// Every asset in `K` is partially reduced by some account.
    pub covered: bool,
    pub connected: bool,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

pub fn interior_coverage_connected(x: &[Vec<f64>], bounds: &[BoundsBox], q_target: &[f64], v: &[f64]) -> Result<CoverageGraph> {
    check_dim(x.len(), bounds.len())?;
    check_dim(q_target.len(), v.len())?;
    let assets: Vec<usize> = (0..v.len()).filter(|&k| q_target[k] != 0.0 && v[k] != 0.0).collect();
    let interior: Vec<Vec<usize>> = x
        .iter()
        .zip(bounds)
        .map(|(xi, b)| {
            assets
                .iter()
                .copied()
                .filter(|&k| {
                    let margin = 1e-9 * (b.upper[k] - b.lower[k]);
                    xi[k] > b.lower[k] + margin && xi[k] < b.upper[k] - margin
                })
                .collect()
        })
        .collect();
    let pos = |k: usize| assets.iter().position(|&a| a == k).unwrap_or(0);
    let mut parent: Vec<usize> = (0..assets.len()).collect();
    let mut edges = Vec::new();
    for f in &interior {
        for (a, &j) in f.iter().enumerate() {
            for &k in &f[a + 1..] {
                if !edges.contains(&(j, k)) {
                    edges.push((j, k));
                }
                let (rj, rk) = (find(&mut parent, pos(j)), find(&mut parent, pos(k)));
                parent[rj] = rk;
            }
        }
    }
    edges.sort_unstable();
    let covered = assets.iter().all(|k| interior.iter().any(|f| f.contains(k)));
    let roots = (0..assets.len()).filter(|&i| find(&mut parent, i) == i).count();
    Ok(CoverageGraph {
        covered,
        connected: covered && roots <= 1,
        assets,
        interior,
        edges,
    })
}

/// Whether `λ^k / v^k` agree across `assets` within `1e-6`.
pub fn lambda_parallel(lambda: &[f64], v: &[f64], assets: &[usize]) -> bool {
    let ratios: Vec<f64> = assets.iter().map(|&k| lambda[k] / v[k]).collect();
    let scale = ratios.iter().fold(1.0f64, |m, r| m.max(r.abs()));
    ratios.windows(2).all(|w| (w[0] - w[1]).abs() <= 1e-6 * scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    const N: EpsilonLaw = EpsilonLaw::StandardNormal;

    fn b5() -> (Vec<CrossMarginAccount>, SingleFactorModel) {
        let p = [1.0, 1.0];
        let a1 = CrossMarginAccount::from_equity("1", vec![1.0, 0.0], 1.0, 0.0, &p).unwrap();
        let a2 = CrossMarginAccount::from_equity("2", vec![0.0, 1.0], 1.0, 0.0, &p).unwrap();
        (vec![a1, a2], SingleFactorModel::new(p.to_vec(), vec![1.0, 1.0], N).unwrap())
    }

    #[test]
    fn psi_basics() {
        assert_eq!(psi(&N, 0.0), 0.0);
        assert_eq!(psi_prime(&N, 0.0), 0.0);
        for z in [0.05, 0.3, 1.0, 2.5, 9.0] {
            assert_eq!(psi(&N, z), psi(&N, -z));
            assert!((psi(&N, z) - psi_quadrature(&N, z)).abs() < 1e-12);
            assert!((psi_prime(&N, z) - psi_prime_quadrature(&N, z)).abs() < 1e-12);
        }
    }

    #[test]
    fn laplace_matches_closed_form() {
        let b = 0.7;
        let law = EpsilonLaw::Laplace { scale: b };
        for z in [0.2, 1.0, 4.0] {
            let exact = z * b / 2.0 * (-1.0 / (z * b)).exp();
            assert!((psi(&law, z) - exact).abs() < 1e-12, "z={z}");
            assert!((psi(&law, -z) - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_roundtrip() {
        for z in [-3.0, -0.5, 0.2, 0.8, 5.0] {
            let eta = psi_prime(&N, z);
            assert!((psi_prime_inverse(&N, eta).unwrap() - z).abs() < 1e-9);
        }
        assert!(psi_prime_inverse(&N, 0.5).is_err());
    }

    #[test]
    fn b5_intervals_and_targets() {
        let (accts, model) = b5();
        let q = [0.2, 0.8];
        let iv = factor_interval(&accts[0], &q, &model.v, &model.p_tau).unwrap();
        assert_eq!(iv, FactorInterval { lo: 0.0, hi: 1.0 });
        let neg = factor_interval(&accts[0], &q, &[-1.0, -1.0], &model.p_tau).unwrap();
        assert_eq!(neg, FactorInterval { lo: -1.0, hi: 0.0 });
        let t = solve_eta(&accts, &q, &model).unwrap();
        assert!((t.targets[0] - 0.5).abs() < 1e-12 && (t.targets[1] - 0.5).abs() < 1e-12);
        // two active assets: the construction does not apply
        assert!(!factor_water_fill(&accts, &q, &model).unwrap().implementable);
    }

    #[test]
    fn degenerate_box_gives_point_interval() {
        let (accts, model) = b5();
        let iv = factor_interval(&accts[0], &[0.0, 0.0], &model.v, &model.p_tau).unwrap();
        assert_eq!(iv.lo, iv.hi);
        let t = factor_water_fill(&accts, &[0.0, 0.0], &model).unwrap();
        assert_eq!(t.targets, vec![1.0, 1.0]);
        assert_eq!(t.x_star.unwrap(), vec![vec![0.0; 2]; 2]);
    }

    #[test]
    fn symmetric_single_asset_split_is_even() {
        let p = [1.0, 1.0];
        let a = CrossMarginAccount::from_equity("a", vec![2.0, 1.0], 1.0, 0.0, &p).unwrap();
        let b = CrossMarginAccount::from_equity("b", vec![2.0, 1.0], 1.0, 0.0, &p).unwrap();
        let model = SingleFactorModel::new(p.to_vec(), vec![1.0, 0.5], N).unwrap();
        let t = factor_water_fill(&[a, b], &[1.0, 0.0], &model).unwrap();
        let x = t.x_star.unwrap();
        assert!((x[0][0] - 0.5).abs() < 1e-12 && (x[1][0] - 0.5).abs() < 1e-12);
        assert_eq!(x[0][1], 0.0);
    }

    #[test]
    fn clipped_target_cases() {
        let iv = FactorInterval { lo: 0.4, hi: 1.5 };
        assert_eq!(clipped_target(&N, iv, 0.0), 0.4);
        assert_eq!(clipped_target(&N, iv, 0.39), 1.5);
        let eta = psi_prime(&N, 0.9);
        assert!((clipped_target(&N, iv, eta) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn coverage_examples() {
        let bounds = vec![
            BoundsBox::new(vec![0.0, 0.0], vec![1.0, 0.0]).unwrap(),
            BoundsBox::new(vec![0.0, 0.0], vec![0.0, 1.0]).unwrap(),
        ];
        let x = vec![vec![0.2, 0.0], vec![0.0, 0.8]];
        let g = interior_coverage_connected(&x, &bounds, &[0.2, 0.8], &[1.0, 1.0]).unwrap();
        assert!(g.covered && !g.connected && g.edges.is_empty());
        let both = vec![BoundsBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap()];
        let g = interior_coverage_connected(&[vec![0.2, 0.8]], &both, &[0.2, 0.8], &[1.0, 1.0]).unwrap();
        assert!(g.connected && g.edges == vec![(0, 1)]);
        let one = vec![BoundsBox::new(vec![0.0], vec![1.0]).unwrap()];
        assert!(interior_coverage_connected(&[vec![0.5]], &one, &[0.5], &[1.0]).unwrap().connected);
    }

    #[test]
    fn parallel_ratio_check() {
        assert!(lambda_parallel(&[2.0, 4.0], &[1.0, 2.0], &[0, 1]));
        assert!(!lambda_parallel(&[2.0, 3.0], &[1.0, 2.0], &[0, 1]));
    }
}
