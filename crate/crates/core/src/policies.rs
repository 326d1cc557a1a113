//! Reference ADL policies and the manipulation-resistance harness.
//!
//! The queue policy ranks accounts by `percentage P&L × leverage` (the
//! BitMEX convention) and fully depletes them in rank order. Percentage
//! P&L for a short is `(p_entry - p_tau) / p_entry`, so profitable shorts
//! rank higher. Ties go to the lower index.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accounts::SingleAssetAccount;
use crate::error::{check_dim, domain, AdlError, Result};
use crate::single_asset::waterfill_exposures;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Waterfill,
    Queue,
    ProRata,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::Waterfill, Policy::Queue, Policy::ProRata];
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Waterfill => "waterfill",
            Policy::Queue => "queue",
            Policy::ProRata => "pro_rata",
        })
    }
}

impl FromStr for Policy {
    type Err = AdlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "waterfill" => Ok(Policy::Waterfill),
            "queue" => Ok(Policy::Queue),
            "pro_rata" | "pro-rata" => Ok(Policy::ProRata),
            _ => Err(domain(format!("unknown policy `{s}`"))),
        }
    }
}

/// What the policies observe about each account: size, equity and the
/// percentage P&L used by the queue ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub q: Vec<f64>,
    pub equity: Vec<f64>,
    pub pnl: Vec<f64>,
}

impl PolicyState {
    pub fn new(q: Vec<f64>, equity: Vec<f64>, pnl: Vec<f64>) -> Result<Self> {
        check_dim(q.len(), equity.len())?;
        check_dim(q.len(), pnl.len())?;
        if q.iter().any(|v| !(*v >= 0.0)) || equity.iter().any(|e| !(*e > 0.0)) {
            return Err(domain("policy state needs q >= 0 and E > 0"));
        }
        Ok(Self { q, equity, pnl })
    }

    pub fn from_accounts(accounts: &[SingleAssetAccount], p_tau: f64) -> Self {
        Self {
            q: accounts.iter().map(|a| a.q).collect(),
            equity: accounts.iter().map(|a| a.equity(p_tau)).collect(),
            pnl: accounts.iter().map(|a| a.percentage_pnl(p_tau)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    fn leverage(&self, i: usize, p_tau: f64) -> f64 {
        p_tau * self.q[i] / self.equity[i]
    }

    fn exposures(&self) -> Vec<(f64, f64)> {
        self.q.iter().copied().zip(self.equity.iter().copied()).collect()
    }

    /// State after a buyback: sizes shrink, equity and P&L are unchanged.
    pub fn after(&self, x: &[f64]) -> Self {
        let q = self.q.iter().zip(x).map(|(q, x)| (q - x).max(0.0)).collect();
        Self {
            q,
            ..self.clone()
        }
    }
}

/// Queue rank order: priority descending, index ascending on ties.
pub fn queue_order(state: &PolicyState, p_tau: f64) -> Vec<usize> {
    let prio: Vec<f64> = (0..state.len()).map(|i| state.pnl[i] * state.leverage(i, p_tau)).collect();
    let mut order: Vec<usize> = (0..state.len()).collect();
    order.sort_by(|&a, &b| prio[b].total_cmp(&prio[a]).then(a.cmp(&b)));
    order
}

pub fn apply_policy(policy: Policy, state: &PolicyState, p_tau: f64, q_total: f64) -> Result<Vec<f64>> {
    let total: f64 = state.q.iter().sum();
    if !(q_total >= 0.0) || q_total > total * (1.0 + 1e-12) {
        return Err(AdlError::Infeasible(format!("buyback {q_total} must lie in [0, {total}]")));
    }
    let n = state.len();
    if q_total == 0.0 {
        return Ok(vec![0.0; n]);
    }
    match policy {
        Policy::Waterfill => Ok(waterfill_exposures(&state.exposures(), p_tau, q_total)?.x),
        Policy::ProRata => Ok(state.q.iter().map(|q| q_total * q / total).collect()),
        Policy::Queue => {
            let mut x = vec![0.0; n];
            let mut remaining = q_total;
            for i in queue_order(state, p_tau) {
                if remaining <= 0.0 {
                    break;
                }
                let take = state.q[i].min(remaining);
                x[i] = take;
                remaining -= take;
            }
            Ok(x)
        }
    }
}

/// The attacker's aggregate holding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attacker {
    pub q: f64,
    pub equity: f64,
    pub pnl: f64,
}

/// Split of the attacker into accounts `(q_k, E_k)` with the same totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SybilSplit {
    pub parts: Vec<(f64, f64)>,
}

impl SybilSplit {
    pub fn validate(&self, attacker: &Attacker) -> Result<()> {
        if self.parts.is_empty() {
            return Err(domain("a split needs at least one part"));
        }
        if self.parts.iter().any(|(q, e)| !(*q >= 0.0) || !(*e > 0.0)) {
            return Err(domain("split parts need q_k >= 0 and E_k > 0"));
        }
        let q: f64 = self.parts.iter().map(|p| p.0).sum();
        let e: f64 = self.parts.iter().map(|p| p.1).sum();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * b.abs().max(1.0);
        if !close(q, attacker.q) || !close(e, attacker.equity) {
            return Err(domain(format!(
                "split totals ({q}, {e}) differ from attacker ({}, {})",
                attacker.q, attacker.equity
            )));
        }
        Ok(())
    }
}

fn with_accounts(others: &PolicyState, extra: &[(f64, f64)], pnl: f64) -> PolicyState {
    let mut s = others.clone();
    for &(q, e) in extra {
        s.q.push(q);
        s.equity.push(e);
        s.pnl.push(pnl);
    }
    s
}

/// Attacker's total buyback `(unsplit, split)`; split parts inherit the
/// attacker's percentage P&L.
pub fn sybil_gain(
    policy: Policy,
    others: &PolicyState,
    attacker: &Attacker,
    split: &SybilSplit,
    p_tau: f64,
    q_total: f64,
) -> Result<(f64, f64)> {
    split.validate(attacker)?;
    let n = others.len();
    let unsplit = with_accounts(others, &[(attacker.q, attacker.equity)], attacker.pnl);
    let splitted = with_accounts(others, &split.parts, attacker.pnl);
    let xu = apply_policy(policy, &unsplit, p_tau, q_total)?;
    let xs = apply_policy(policy, &splitted, p_tau, q_total)?;
    Ok((xu[n..].iter().sum(), xs[n..].iter().sum()))
}

/// `‖x(Q1+Q2) - (x(Q1) + x'(Q2))‖∞` where `x'` acts on the post-`Q1` state.
pub fn path_gap(policy: Policy, state: &PolicyState, p_tau: f64, q1: f64, q2: f64) -> Result<f64> {
    if !(q1 >= 0.0 && q2 >= 0.0) {
        return Err(AdlError::Infeasible("event sizes must be >= 0".into()));
    }
    let joint = apply_policy(policy, state, p_tau, q1 + q2)?;
    let first = apply_policy(policy, state, p_tau, q1)?;
    let second = apply_policy(policy, &state.after(&first), p_tau, q2.min(state.after(&first).q.iter().sum()))?;
    Ok(joint
        .iter()
        .zip(first.iter().zip(&second))
        .map(|(j, (a, b))| (j - (a + b)).abs())
        .fold(0.0, f64::max))
}

/// Replacement `(p_entry, margin)` for one account.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub account: usize,
    pub p_entry: f64,
    pub margin: f64,
}

impl Perturbation {
    /// Move `delta` of P&L into margin: entry up by `delta`, margin down by `q delta`.
    pub fn entry_shift(accounts: &[SingleAssetAccount], account: usize, delta: f64) -> Self {
        let a = &accounts[account];
        Self {
            account,
            p_entry: a.p_entry + delta,
            margin: a.margin - a.q * delta,
        }
    }
}

fn perturbed(accounts: &[SingleAssetAccount], p: &Perturbation, p_tau: f64) -> Result<Vec<SingleAssetAccount>> {
    let a = accounts
        .get(p.account)
        .ok_or_else(|| domain(format!("perturbation index {} out of range", p.account)))?;
    let mut out = accounts.to_vec();
    out[p.account] = SingleAssetAccount {
        p_entry: p.p_entry,
        margin: p.margin,
        ..a.clone()
    };
    let (e0, e1) = (a.equity(p_tau), out[p.account].equity(p_tau));
    if (e0 - e1).abs() > 1e-9 * e0.abs().max(1.0) {
        return Err(domain(format!("perturbation changes equity from {e0} to {e1}")));
    }
    Ok(out)
}

/// Whether `policy` allocates identically (1e-12) after an equity-neutral
/// wash trade.
pub fn wash_trade_invariance(
    policy: Policy,
    accounts: &[SingleAssetAccount],
    p_tau: f64,
    q_total: f64,
    perturbation: &Perturbation,
) -> Result<bool> {
    let after = perturbed(accounts, perturbation, p_tau)?;
    let x0 = apply_policy(policy, &PolicyState::from_accounts(accounts, p_tau), p_tau, q_total)?;
    let x1 = apply_policy(policy, &PolicyState::from_accounts(&after, p_tau), p_tau, q_total)?;
    Ok(x0.iter().zip(&x1).all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(1.0)))
}

/// Budget that drains the top leverage tier down to the runner-up, or the
/// tier's whole size when every account shares the top leverage.
pub fn priority_budget(state: &PolicyState, p_tau: f64) -> (Vec<usize>, f64) {
    let lev: Vec<f64> = (0..state.len()).map(|i| state.leverage(i, p_tau)).collect();
    let top = lev.iter().copied().fold(0.0, f64::max);
    let tier: Vec<usize> = (0..lev.len()).filter(|&i| lev[i] >= top * (1.0 - 1e-12)).collect();
    let runner_up = (0..lev.len())
        .filter(|i| !tier.contains(i))
        .map(|i| lev[i])
        .fold(0.0, f64::max);
    let budget = tier
        .iter()
        .map(|&i| (state.q[i] - state.equity[i] / p_tau * runner_up).max(0.0))
        .sum();
    (tier, budget)
}

/// Below the drain budget, only the maximal-leverage tier is touched.
pub fn leverage_priority_check(policy: Policy, state: &PolicyState, p_tau: f64) -> Result<bool> {
    let (tier, budget) = priority_budget(state, p_tau);
    if budget <= 0.0 {
        return Ok(true);
    }
    for frac in [0.1, 0.25, 0.5, 0.75, 0.999] {
        let x = apply_policy(policy, state, p_tau, frac * budget)?;
        let leak = (0..x.len()).any(|i| !tier.contains(&i) && x[i] > 1e-12 * budget.max(1.0));
        if leak {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    Sybil,
    PathIndependence,
    WashTrade,
    LeveragePriority,
}

impl Property {
    pub const ALL: [Property; 4] = [
        Property::Sybil,
        Property::PathIndependence,
        Property::WashTrade,
        Property::LeveragePriority,
    ];
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Property::Sybil => "sybil",
            Property::PathIndependence => "path_independence",
            Property::WashTrade => "wash_trade",
            Property::LeveragePriority => "leverage_priority",
        })
    }
}

/// A concrete instance on which a policy violates a property.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "property", rename_all = "snake_case")]
pub enum Counterexample {
    Sybil {
        others: PolicyState,
        attacker: Attacker,
        split: SybilSplit,
        p_tau: f64,
        q_total: f64,
        unsplit_total: f64,
        split_total: f64,
    },
    PathIndependence {
        state: PolicyState,
        p_tau: f64,
        q1: f64,
        q2: f64,
        gap: f64,
    },
    WashTrade {
        accounts: Vec<SingleAssetAccount>,
        p_tau: f64,
        q_total: f64,
        perturbation: Perturbation,
    },
    LeveragePriority {
        state: PolicyState,
        p_tau: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyOutcome {
    pub policy: Policy,
    pub property: Property,
    pub trials: usize,
    pub pass: bool,
    pub counterexample: Option<Counterexample>,
}

const P_TAU: f64 = 100.0;

fn trial_rng(seed: u64, trial: usize) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Random solvent short accounts with spread-out leverage and P&L.
pub fn random_accounts<R: Rng>(rng: &mut R, n: usize, p_tau: f64) -> Vec<SingleAssetAccount> {
    (0..n)
        .map(|i| loop {
            let q = rng.random_range(0.5..10.0);
            let p_entry = p_tau * rng.random_range(0.8..1.25);
            let margin = p_tau * q * rng.random_range(0.03..0.6);
            if let Ok(a) = SingleAssetAccount::new(i.to_string(), q, p_entry, margin, p_tau) {
                break a;
            }
        })
        .collect()
}

fn dirichlet<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0f64)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn sybil_trial(policy: Policy, seed: u64, trial: usize) -> Result<Option<Counterexample>> {
    let mut rng = trial_rng(seed, trial);
    let n = rng.random_range(2..=4);
    let others = PolicyState::from_accounts(&random_accounts(&mut rng, n, P_TAU), P_TAU);
    let max_prio = (0..n)
        .map(|i| others.pnl[i] * others.leverage(i, P_TAU))
        .fold(f64::MIN, f64::max);
    let max_lev = (0..n).map(|i| others.leverage(i, P_TAU)).fold(0.0, f64::max);
    // attacker on top of both rankings, as in the classic split attack
    let pnl = rng.random_range(0.05..0.3);
    let lev = (max_lev * rng.random_range(1.05..2.0)).max(max_prio / pnl * 1.05);
    let q = rng.random_range(1.0..10.0);
    let attacker = Attacker {
        q,
        equity: P_TAU * q / lev,
        pnl,
    };
    let split = if trial.is_multiple_of(2) {
        // high-leverage sliver plus a low-leverage remainder
        let fq = rng.random_range(0.05..0.6);
        let fe = rng.random_range(0.001..0.05) * fq;
        SybilSplit {
            parts: vec![
                (fq * q, fe * attacker.equity),
                ((1.0 - fq) * q, (1.0 - fe) * attacker.equity),
            ],
        }
    } else {
        let k = rng.random_range(1..=4);
        let wq = dirichlet(&mut rng, k);
        let we = dirichlet(&mut rng, k);
        SybilSplit {
            parts: wq.iter().zip(&we).map(|(a, b)| (a * q, b * attacker.equity)).collect(),
        }
    };
    let total = others.q.iter().sum::<f64>() + q;
    let q_total = if trial.is_multiple_of(2) { q } else { rng.random_range(0.0..total) };
    let (unsplit_total, split_total) = sybil_gain(policy, &others, &attacker, &split, P_TAU, q_total)?;
    Ok((split_total < unsplit_total - 1e-9).then_some(Counterexample::Sybil {
        others,
        attacker,
        split,
        p_tau: P_TAU,
        q_total,
        unsplit_total,
        split_total,
    }))
}

fn path_trial(policy: Policy, seed: u64, trial: usize) -> Result<Option<Counterexample>> {
    let mut rng = trial_rng(seed, trial);
    let n = rng.random_range(2..=5);
    let state = PolicyState::from_accounts(&random_accounts(&mut rng, n, P_TAU), P_TAU);
    let total: f64 = state.q.iter().sum();
    let (q1, q2) = if trial.is_multiple_of(2) {
        // first event only partially drains the top-ranked account
        let top = queue_order(&state, P_TAU)[0];
        let q1 = state.q[top] * rng.random_range(0.05..0.95);
        (q1, (state.q[top] - q1) * rng.random_range(0.1..1.0))
    } else {
        let w = dirichlet(&mut rng, 3);
        (w[0] * total, w[1] * total)
    };
    let gap = path_gap(policy, &state, P_TAU, q1, q2)?;
    Ok((gap > 1e-9).then_some(Counterexample::PathIndependence {
        state,
        p_tau: P_TAU,
        q1,
        q2,
        gap,
    }))
}

fn wash_trial(policy: Policy, seed: u64, trial: usize) -> Result<Option<Counterexample>> {
    let mut rng = trial_rng(seed, trial);
    let n = rng.random_range(2..=5);
    let accounts = random_accounts(&mut rng, n, P_TAU);
    let state = PolicyState::from_accounts(&accounts, P_TAU);
    let top = queue_order(&state, P_TAU)[0];
    let target = if trial.is_multiple_of(2) { top } else { rng.random_range(0..n) };
    // realize a loss on paper and top up margin by the same amount
    let delta = -rng.random_range(0.05..0.4) * accounts[target].p_entry;
    let perturbation = Perturbation::entry_shift(&accounts, target, delta);
    let q_total = state.q[top] * rng.random_range(0.2..1.0);
    let same = wash_trade_invariance(policy, &accounts, P_TAU, q_total, &perturbation)?;
    Ok((!same).then_some(Counterexample::WashTrade {
        accounts,
        p_tau: P_TAU,
        q_total,
        perturbation,
    }))
}

fn priority_trial(policy: Policy, seed: u64, trial: usize) -> Result<Option<Counterexample>> {
    let mut rng = trial_rng(seed, trial);
    let n = rng.random_range(1..=5);
    let state = PolicyState::from_accounts(&random_accounts(&mut rng, n, P_TAU), P_TAU);
    let ok = leverage_priority_check(policy, &state, P_TAU)?;
    Ok((!ok).then_some(Counterexample::LeveragePriority { state, p_tau: P_TAU }))
}

/// Seeded randomized search for a violation of `property` under `policy`.
/// Trials are independent and the lowest-index violation is reported.
pub fn run_property(policy: Policy, property: Property, seed: u64, trials: usize) -> Result<PropertyOutcome> {
    let trial = match property {
        Property::Sybil => sybil_trial,
        Property::PathIndependence => path_trial,
        Property::WashTrade => wash_trial,
        Property::LeveragePriority => priority_trial,
    };
    let found = (0..trials)
        .into_par_iter()
        .map(|t| trial(policy, seed, t))
        .find_first(|r| !matches!(r, Ok(None)));
    let counterexample = match found {
        Some(Err(e)) => return Err(e),
        Some(Ok(c)) => c,
        None => None,
    };
    Ok(PropertyOutcome {
        policy,
        property,
        trials,
        pass: counterexample.is_none(),
        counterexample,
    })
}
