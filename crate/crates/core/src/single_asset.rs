//! Isolated-margin ADL: the minimax-leverage water-filling allocation, the
//! risk objectives it optimizes, the leverage cutoff, and first-order
//! optimality verifiers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::accounts::SingleAssetAccount;
use crate::error::{check_dim, domain, AdlError, Result};
use crate::market_model::{discrete_cvar, GbmModel, PriceLaw, ScenarioSet};

/// Result of the water-filling solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaterfillResult {
    pub x: Vec<f64>,
    pub t_star: f64,
    pub active: Vec<usize>,
}

/// Risk functional applied to the aggregate exchange loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RiskSpec {
    Expected,
    Cvar { beta: f64 },
    /// Mixture of CVaR levels as `(beta, weight)` pairs.
    Spectral { levels: Vec<(f64, f64)> },
}

impl RiskSpec {
    pub fn validate(&self) -> Result<()> {
        let level_ok = |b: f64| (0.0..1.0).contains(&b);
        match self {
            RiskSpec::Expected => Ok(()),
            RiskSpec::Cvar { beta } if level_ok(*beta) => Ok(()),
            RiskSpec::Cvar { beta } => Err(domain(format!("CVaR level {beta} outside [0, 1)"))),
            RiskSpec::Spectral { levels } => {
                if levels.is_empty() {
                    return Err(domain("spectral mixture needs at least one level"));
                }
                if levels.iter().any(|(b, w)| !level_ok(*b) || !(*w >= 0.0)) {
                    return Err(domain("spectral levels must lie in [0, 1) with weights >= 0"));
                }
                let total: f64 = levels.iter().map(|(_, w)| w).sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(domain(format!("spectral weights sum to {total}, not 1")));
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for RiskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RiskSpec::Expected => write!(f, "expected"),
            RiskSpec::Cvar { beta } => write!(f, "cvar:{beta}"),
            RiskSpec::Spectral { levels } => {
                write!(f, "spectral:")?;
                for (j, (b, w)) in levels.iter().enumerate() {
                    if j > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{b}:{w}")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for RiskSpec {
    type Err = AdlError;

    /// `expected`, `cvar:<beta>`, or `spectral:<beta>:<w>,<beta>:<w>,...`.
    fn from_str(s: &str) -> Result<Self> {
        let parse = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| domain(format!("bad number `{t}` in risk spec: {e}")))
        };
        let spec = match s.split_once(':') {
            None if s.trim() == "expected" => RiskSpec::Expected,
            Some(("cvar", b)) => RiskSpec::Cvar { beta: parse(b)? },
            Some(("spectral", rest)) => {
                let levels = rest
                    .split(',')
                    .map(|pair| {
                        let (b, w) = pair
                            .split_once(':')
                            .ok_or_else(|| domain(format!("spectral term `{pair}` is not beta:weight")))?;
                        Ok((parse(b)?, parse(w)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                RiskSpec::Spectral { levels }
            }
            _ => return Err(domain(format!("unknown risk spec `{s}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Terminal-price information for the single-asset objective.
#[derive(Clone, Copy)]
pub enum SingleAssetLaw<'a> {
    Law(&'a dyn PriceLaw),
    Scenarios(&'a ScenarioSet),
}

/// Verifier outcome: `multiplier` is the common threshold when one exists,
/// `violation` names the first offending account otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalityCheck {
    pub optimal: bool,
    pub multiplier: Option<f64>,
    pub violation: Option<usize>,
}

impl OptimalityCheck {
    fn pass(multiplier: f64) -> Self {
        Self {
            optimal: true,
            multiplier: Some(multiplier),
            violation: None,
        }
    }

    fn fail(index: usize) -> Self {
        Self {
            optimal: false,
            multiplier: None,
            violation: Some(index),
        }
    }
}

/// Diagnostic fields of a [`SolveReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub g_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub x: Vec<f64>,
    pub t_star: f64,
    pub objective: f64,
    pub spec: String,
    pub diagnostics: Diagnostics,
}

/// `(q_i, E_i)` pairs: the only state the allocation depends on.
pub(crate) fn exposures(accounts: &[SingleAssetAccount], p_tau: f64) -> Vec<(f64, f64)> {
    accounts.iter().map(|a| (a.q, a.equity(p_tau))).collect()
}

pub(crate) fn demand(exposures: &[(f64, f64)], p_tau: f64, t: f64) -> f64 {
    exposures
        .iter()
        .map(|&(q, e)| (q - e / p_tau * t).max(0.0))
        .sum()
}

/// `G(t) = Σ (q_i - (E_i / p_tau) t)_+`.
pub fn aggregate_demand(accounts: &[SingleAssetAccount], p_tau: f64, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(domain(format!("leverage level {t} must be >= 0")));
    }
    Ok(demand(&exposures(accounts, p_tau), p_tau, t))
}

fn check_budget(exposures: &[(f64, f64)], q_total: f64) -> Result<f64> {
    let total: f64 = exposures.iter().map(|(q, _)| q).sum();
    if !(q_total > 0.0) || q_total > total * (1.0 + 1e-12) {
        return Err(AdlError::Infeasible(format!(
            "buyback {q_total} must lie in (0, {total}]"
        )));
    }
    Ok(total)
}

/// Exact root of `G(t) = Q`: sort the kinks `ℓ_i(0)` and solve the affine
/// piece that brackets `Q`.
pub(crate) fn threshold_for(exposures: &[(f64, f64)], p_tau: f64, q_total: f64) -> Result<f64> {
    let total = check_budget(exposures, q_total)?;
    if q_total >= total {
        return Ok(0.0);
    }
    let mut kinks: Vec<(f64, f64, f64)> = exposures
        .iter()
        .filter(|(q, _)| *q > 0.0)
        .map(|&(q, e)| (p_tau * q / e, q, e / p_tau))
        .collect();
    kinks.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut a, mut b) = (0.0, 0.0);
    for j in 0..kinks.len() {
        a += kinks[j].1;
        b += kinks[j].2;
        let lower = kinks.get(j + 1).map_or(0.0, |k| k.0);
        if a - b * lower >= q_total {
            let t = (a - q_total) / b;
            return Ok(t.clamp(lower, kinks[j].0));
        }
    }
    Err(AdlError::Internal("no affine piece of G brackets Q".into()))
}

pub fn solve_threshold(accounts: &[SingleAssetAccount], p_tau: f64, q_total: f64) -> Result<f64> {
    threshold_for(&exposures(accounts, p_tau), p_tau, q_total)
}

pub(crate) fn waterfill_exposures(exposures: &[(f64, f64)], p_tau: f64, q_total: f64) -> Result<WaterfillResult> {
    let t_star = threshold_for(exposures, p_tau, q_total)?;
    let x: Vec<f64> = exposures
        .iter()
        .map(|&(q, e)| (q - e / p_tau * t_star).clamp(0.0, q))
        .collect();
    let active = (0..x.len()).filter(|&i| x[i] > 0.0).collect();
    Ok(WaterfillResult { x, t_star, active })
}

/// Minimax-leverage allocation `x_i = (q_i - (E_i / p_tau) t*)_+`.
pub fn waterfill(accounts: &[SingleAssetAccount], p_tau: f64, q_total: f64) -> Result<WaterfillResult> {
    if accounts.is_empty() {
        return Err(AdlError::Infeasible("no accounts to deleverage".into()));
    }
    waterfill_exposures(&exposures(accounts, p_tau), p_tau, q_total)
}

fn check_box(accounts: &[SingleAssetAccount], x: &[f64]) -> Result<()> {
    check_dim(accounts.len(), x.len())?;
    for (i, (a, xi)) in accounts.iter().zip(x).enumerate() {
        if !(*xi >= -1e-12 && *xi <= a.q + 1e-12 * a.q.max(1.0)) {
            return Err(domain(format!("allocation {xi} for account {i} outside [0, {}]", a.q)));
        }
    }
    Ok(())
}

fn check_feasible(accounts: &[SingleAssetAccount], q_total: f64, x: &[f64]) -> Result<()> {
    check_box(accounts, x)?;
    let s: f64 = x.iter().sum();
    if (s - q_total).abs() > 1e-9 * q_total.abs().max(1.0) {
        return Err(domain(format!("allocation sums to {s}, expected {q_total}")));
    }
    Ok(())
}

fn residual_size(a: &SingleAssetAccount, x: f64) -> f64 {
    (a.q - x).max(0.0)
}

/// `E[σ_i]` for one account under a price law.
pub fn expected_shortfall_account(account: &SingleAssetAccount, x: f64, law: &dyn PriceLaw, p_tau: f64) -> Result<f64> {
    let z = account.bankruptcy_price(x.clamp(0.0, account.q), p_tau)?;
    if z == f64::INFINITY {
        return Ok(0.0);
    }
    Ok(residual_size(account, x) * law.expected_excess(z))
}

/// `CVaR_β(σ_i)` for one account under an atomless price law, by the
/// stressed / non-stressed split around the price quantile.
pub fn cvar_account(account: &SingleAssetAccount, x: f64, law: &dyn PriceLaw, p_tau: f64, beta: f64) -> Result<f64> {
    if beta == 0.0 {
        return expected_shortfall_account(account, x, law, p_tau);
    }
    let z = account.bankruptcy_price(x, p_tau)?;
    if z == f64::INFINITY {
        return Ok(0.0);
    }
    let p_beta = law.quantile(beta)?;
    let size = residual_size(account, x);
    if z <= p_beta {
        Ok(size * (law.tail_mean(beta)? - z))
    } else {
        Ok(size / (1.0 - beta) * law.expected_excess(z))
    }
}

pub fn cvar_account_gbm(account: &SingleAssetAccount, x: f64, model: &GbmModel, beta: f64) -> Result<f64> {
    cvar_account(account, x, model, model.p_tau, beta)
}

fn law_objective(accounts: &[SingleAssetAccount], x: &[f64], law: &dyn PriceLaw, p_tau: f64, beta: f64) -> Result<f64> {
    // comonotone: CVaR of the sum is the sum of the per-account CVaRs
    accounts
        .iter()
        .zip(x)
        .map(|(a, xi)| cvar_account(a, xi.clamp(0.0, a.q), law, p_tau, beta))
        .sum()
}

/// Aggregate loss per scenario.
pub fn scenario_losses(accounts: &[SingleAssetAccount], x: &[f64], scenarios: &ScenarioSet, p_tau: f64) -> Result<Vec<f64>> {
    check_dim(1, scenarios.dim())?;
    Ok(scenarios
        .prices()
        .iter()
        .map(|p| {
            accounts
                .iter()
                .zip(x)
                .map(|(a, xi)| a.shortfall(*xi, p[0], p_tau))
                .sum()
        })
        .collect())
}

/// Risk of the aggregate shortfall `Σ_i σ_i(x_i, p_T)`.
pub fn risk_objective(
    accounts: &[SingleAssetAccount],
    x: &[f64],
    p_tau: f64,
    law: SingleAssetLaw<'_>,
    spec: &RiskSpec,
) -> Result<f64> {
    spec.validate()?;
    check_box(accounts, x)?;
    let levels: Vec<(f64, f64)> = match spec {
        RiskSpec::Expected => vec![(0.0, 1.0)],
        RiskSpec::Cvar { beta } => vec![(*beta, 1.0)],
        RiskSpec::Spectral { levels } => levels.clone(),
    };
    match law {
        SingleAssetLaw::Law(law) => levels
            .iter()
            .map(|(b, w)| Ok(w * law_objective(accounts, x, law, p_tau, *b)?))
            .sum(),
        SingleAssetLaw::Scenarios(s) => {
            let losses = scenario_losses(accounts, x, s, p_tau)?;
            levels
                .iter()
                .map(|(b, w)| Ok(w * discrete_cvar(&losses, s.probs(), *b)?))
                .sum()
        }
    }
}

/// `ℓ_β = p_tau / (p_β - p_tau)`, or `+inf` when the quantile is not above `p_tau`.
pub fn leverage_cutoff(law: &dyn PriceLaw, beta: f64, p_tau: f64) -> Result<f64> {
    let p_beta = law.quantile(beta)?;
    Ok(if p_beta > p_tau {
        p_tau / (p_beta - p_tau)
    } else {
        f64::INFINITY
    })
}

/// `Q_β = G(ℓ_β)`: the smallest budget that brings every account to the cutoff.
pub fn budget_to_cutoff(accounts: &[SingleAssetAccount], p_tau: f64, ell_beta: f64) -> f64 {
    if ell_beta == f64::INFINITY {
        return 0.0;
    }
    demand(&exposures(accounts, p_tau), p_tau, ell_beta.max(0.0))
}

const REL_TOL: f64 = 1e-8;

fn at_lower(x: f64, q: f64) -> bool {
    x <= 1e-12 * q.max(1.0)
}

fn at_upper(x: f64, q: f64) -> bool {
    x >= q - 1e-12 * q.max(1.0)
}

/// Threshold characterization of the expected-loss optimum: all reduced
/// accounts share one leverage `t`, untouched ones sit at or below it.
pub fn verify_expected_loss_optimality(
    accounts: &[SingleAssetAccount],
    p_tau: f64,
    q_total: f64,
    x: &[f64],
) -> Result<OptimalityCheck> {
    check_feasible(accounts, q_total, x)?;
    let lev: Vec<f64> = accounts
        .iter()
        .zip(x)
        .map(|(a, xi)| a.leverage(xi.clamp(0.0, a.q), p_tau))
        .collect::<Result<_>>()?;
    let active: Vec<usize> = (0..x.len()).filter(|&i| !at_lower(x[i], accounts[i].q)).collect();
    let t = match active.iter().map(|&i| lev[i]).reduce(f64::max) {
        Some(t) => t,
        None => return Ok(OptimalityCheck::pass(lev.iter().copied().fold(0.0, f64::max))),
    };
    let tol = REL_TOL * t.max(1.0);
    if let Some(&i) = active.iter().find(|&&i| (lev[i] - t).abs() > tol) {
        return Ok(OptimalityCheck::fail(i));
    }
    if let Some(i) = (0..x.len()).find(|&i| !active.contains(&i) && lev[i] > t + tol) {
        return Ok(OptimalityCheck::fail(i));
    }
    Ok(OptimalityCheck::pass(t))
}

/// `v_β(ℓ) = E[(p_T - p_tau) 1{p_T - p_tau > p_tau max(1/ℓ_β, 1/ℓ)}]`.
pub fn marginal_tail_value(law: &dyn PriceLaw, beta: f64, p_tau: f64, ell: f64) -> Result<f64> {
    let ell_beta = leverage_cutoff(law, beta, p_tau)?;
    let inv = |l: f64| if l == f64::INFINITY { 0.0 } else { 1.0 / l };
    if ell <= 0.0 {
        return Ok(0.0);
    }
    let c = p_tau + p_tau * inv(ell_beta).max(inv(ell));
    Ok(law.tail_excess_over(p_tau, c))
}

/// KKT test for the CVaR problem in leverage form.
pub fn verify_cvar_optimality(
    accounts: &[SingleAssetAccount],
    p_tau: f64,
    q_total: f64,
    x: &[f64],
    law: &dyn PriceLaw,
    beta: f64,
) -> Result<OptimalityCheck> {
    check_feasible(accounts, q_total, x)?;
    let mut values = Vec::with_capacity(x.len());
    for (a, xi) in accounts.iter().zip(x) {
        let xi = xi.clamp(0.0, a.q);
        let ell = if at_lower(xi, a.q) {
            a.leverage(0.0, p_tau)?
        } else {
            a.leverage(xi, p_tau)?
        };
        values.push(marginal_tail_value(law, beta, p_tau, ell)?);
    }
    let scale = values.iter().copied().fold(f64::MIN_POSITIVE, f64::max);
    let tol = REL_TOL * scale;
    let class = |i: usize| {
        let (xi, q) = (x[i], accounts[i].q);
        if at_lower(xi, q) {
            0
        } else if at_upper(xi, q) {
            2
        } else {
            1
        }
    };
    let interior: Vec<usize> = (0..x.len()).filter(|&i| class(i) == 1).collect();
    let lower: Vec<usize> = (0..x.len()).filter(|&i| class(i) == 0).collect();
    let upper: Vec<usize> = (0..x.len()).filter(|&i| class(i) == 2).collect();

    let theta = match interior.iter().map(|&i| values[i]).reduce(f64::max) {
        Some(theta) => {
            if let Some(&i) = interior.iter().find(|&&i| values[i] < theta - tol) {
                return Ok(OptimalityCheck::fail(i));
            }
            theta
        }
        None => lower.iter().map(|&i| values[i]).fold(0.0, f64::max),
    };
    if let Some(&i) = lower.iter().find(|&&i| values[i] > theta + tol) {
        return Ok(OptimalityCheck::fail(i));
    }
    if let Some(&i) = upper.iter().find(|_| theta > tol) {
        return Ok(OptimalityCheck::fail(i));
    }
    Ok(OptimalityCheck::pass(theta))
}

/// Water-filling allocation with its objective under `spec`.
pub fn solve_single(
    accounts: &[SingleAssetAccount],
    p_tau: f64,
    q_total: f64,
    law: SingleAssetLaw<'_>,
    spec: &RiskSpec,
) -> Result<SolveReport> {
    let wf = waterfill(accounts, p_tau, q_total)?;
    let objective = risk_objective(accounts, &wf.x, p_tau, law, spec)?;
    let g_residual = aggregate_demand(accounts, p_tau, wf.t_star)? - q_total;
    Ok(SolveReport {
        x: wf.x,
        t_star: wf.t_star,
        objective,
        spec: spec.to_string(),
        diagnostics: Diagnostics { g_residual },
    })
}

/// One row of a leverage-versus-budget sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeveragePoint {
    pub q: f64,
    pub account_id: String,
    pub post_leverage: f64,
}

pub fn leverage_curve(accounts: &[SingleAssetAccount], p_tau: f64, budgets: &[f64]) -> Result<Vec<LeveragePoint>> {
    let mut rows = Vec::with_capacity(budgets.len() * accounts.len());
    for &q in budgets {
        let x = if q == 0.0 {
            vec![0.0; accounts.len()]
        } else {
            waterfill(accounts, p_tau, q)?.x
        };
        for (a, xi) in accounts.iter().zip(&x) {
            rows.push(LeveragePoint {
                q,
                account_id: a.id.clone(),
                post_leverage: a.leverage(*xi, p_tau)?,
            });
        }
    }
    Ok(rows)
}

/// Objective of the water-filling allocation along a budget sweep.
pub fn objective_curve(
    accounts: &[SingleAssetAccount],
    p_tau: f64,
    budgets: &[f64],
    law: SingleAssetLaw<'_>,
    spec: &RiskSpec,
) -> Result<Vec<(f64, f64)>> {
    budgets
        .iter()
        .map(|&q| {
            let x = if q == 0.0 {
                vec![0.0; accounts.len()]
            } else {
                waterfill(accounts, p_tau, q)?.x
            };
            Ok((q, risk_objective(accounts, &x, p_tau, law, spec)?))
        })
        .collect()
}
