//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero if any fail.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use adl_core::market_model::{
    gbm_call_expectation, gbm_quantile, gbm_tail_mean, increment_covariance, leading_factor, sample, EpsilonLaw,
    PriceLaw, PriceModel, ScenarioSet, SingleFactorModel,
};
use adl_core::multi_asset::{
    dual_ascent, saa_cvar, ClearingProblem, DualParams, ExpectationModel, MultiSolveReport,
};
use adl_core::policies::{path_gap, run_property, Counterexample, Policy, Property, PropertyOutcome};
use adl_core::single_asset::{
    budget_to_cutoff, cvar_account_gbm, expected_shortfall_account, leverage_curve, leverage_cutoff,
    objective_curve, risk_objective, waterfill,
};
use adl_core::single_factor::{factor_water_fill, interior_coverage_connected, psi, psi_prime};
use adl_core::{CrossMarginAccount, RiskSpec, SingleAssetAccount, SingleAssetLaw};
use adl_verify::fixtures::*;
use adl_verify::oracles::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

// ---------------------------------------------------------------------------

const FACTOR_LEVERAGE: [f64; 4] = [0.49, 0.41, 0.66, 0.07];
const GROSS_LEVERAGE: [f64; 4] = [4.8, 5.2, 6.4, 7.1];
const FACTOR_TOL: f64 = 0.01;
const GROSS_TOL: f64 = 0.05;

fn pair_leverages() -> Outcome {
    let p = PAIR_P_TAU;
    let ((gross, factor), elapsed) = timed(|| {
        let lf = leading_factor(&increment_covariance(&pair_model())).unwrap();
        let accounts = pair_accounts();
        let zero = [0.0, 0.0];
        let gross: Vec<f64> = accounts.iter().map(|a| a.gross_leverage(&zero, &p).unwrap()).collect();
        let factor: Vec<f64> = accounts.iter().map(|a| a.factor_leverage(&zero, &lf.v, &p).unwrap()).collect();
        (gross, factor)
    });
    // the same numbers straight from the raw rows
    let cov = increment_covariance(&pair_model());
    let (lambda, u) = symmetric_2x2_top(cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
    let v = [lambda.sqrt() * u[0], lambda.sqrt() * u[1]];
    for (i, &(qb, qe, _, e)) in PAIR_ROWS.iter().enumerate() {
        let e = e * 1e3;
        let g = (qb.abs() * p[0] + qe.abs() * p[1]) / e;
        let f = (qb * v[0] + qe * v[1]) / e;
        ensure(rel(gross[i], g) < 1e-12 && rel(factor[i], f) < 1e-9, || {
            format!("account {} disagrees with the raw-row oracle", i + 1)
        })?;
    }
    let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ");
    let detail = format!("factor ({}), gross ({}), {elapsed:?}", fmt(&factor), fmt(&gross));
    for i in 0..4 {
        ensure((factor[i] - FACTOR_LEVERAGE[i]).abs() <= FACTOR_TOL, || {
            format!("factor leverage of account {} is {:.4}, want {} ± {FACTOR_TOL}; {detail}", i + 1, factor[i], FACTOR_LEVERAGE[i])
        })?;
        ensure((gross[i] - GROSS_LEVERAGE[i]).abs() <= GROSS_TOL, || {
            format!("gross leverage of account {} is {:.4}, want {} ± {GROSS_TOL}; {detail}", i + 1, gross[i], GROSS_LEVERAGE[i])
        })?;
    }
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(detail)
}

fn pair_calibration() -> Outcome {
    let cov = increment_covariance(&pair_model());
    let expected = [(0, 0, 44_494_130.91), (0, 1, 1_341_048.70), (1, 1, 56_064.46)];
    for (i, j, want) in expected {
        ensure(rel(cov[(i, j)], want) < 1e-6, || format!("cov[{i}{j}] = {} vs {want}", cov[(i, j)]))?;
    }
    let lf = leading_factor(&cov).unwrap();
    ensure(rel(lf.lambda1, 44_534_564.19) < 1e-6, || format!("lambda1 = {}", lf.lambda1))?;
    ensure((lf.v[0] - 6670.3910).abs() < 1e-3 && (lf.v[1] - 201.1156).abs() < 1e-3, || {
        format!("v = {:?}", lf.v)
    })?;
    let (lambda, u) = symmetric_2x2_top(cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
    ensure(rel(lf.lambda1, lambda) < 1e-12 && (lf.u1[0] - u[0]).abs() < 1e-12 && (lf.u1[1] - u[1]).abs() < 1e-12, || {
        format!("eigenpair differs from the closed form: {lambda} {u:?}")
    })?;
    Ok(format!("lambda1 = {:.2}, v = ({:.4}, {:.4})", lf.lambda1, lf.v[0], lf.v[1]))
}

fn level_shift_scan() -> Outcome {
    let (accounts, s, p) = level_shift_instance();
    let problem = ClearingProblem::new(accounts.clone(), vec![10.0, 0.0], p.clone(), ExpectationModel::Scenarios(s.clone())).unwrap();
    let equity: Vec<f64> = accounts.iter().map(|a| a.equity(&p)).collect();
    let mut best = [(f64::INFINITY, Vec::new()), (f64::INFINITY, Vec::new())];
    for k in 0..=10_000 {
        let a = k as f64 / 1000.0;
        let x = vec![vec![a, 0.0], vec![10.0 - a, 0.0]];
        let losses: Vec<f64> = s
            .prices()
            .iter()
            .map(|pr| (0..2).map(|i| portfolio_loss(&accounts[i].q, equity[i], &p, &x[i], pr)).sum())
            .collect();
        for (slot, beta) in [0.90, 0.95].into_iter().enumerate() {
            let value = saa_cvar(&problem, &x, &s, beta).unwrap();
            let oracle = variational_cvar(&losses, s.probs(), beta);
            ensure((value - oracle).abs() < 1e-9, || format!("CVaR {beta} at a = {a}: {value} vs {oracle}"))?;
            let (v, at) = &mut best[slot];
            if value < *v - 1e-12 {
                *v = value;
                at.clear();
            }
            if (value - *v).abs() <= 1e-12 {
                at.push(a);
            }
        }
    }
    let [(v90, a90), (v95, a95)] = best;
    ensure(a90 == vec![4.0] && (v90 - 2.0).abs() < 1e-9, || format!("CVaR 0.90 minimized at {a90:?} with {v90}"))?;
    ensure(a95 == vec![3.0] && (v95 - 3.0).abs() < 1e-9, || format!("CVaR 0.95 minimized at {a95:?} with {v95}"))?;
    Ok(format!("a*(0.90) = 4 (value {v90}), a*(0.95) = 3 (value {v95})"))
}

fn flat_continuum() -> Outcome {
    let (accounts, law, p_tau) = exponential_twins();
    let spec = RiskSpec::Cvar { beta: 0.5 };
    let expected = 7.0 * (1.0 + std::f64::consts::LN_2) - 2.0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for k in 0..=1000 {
        let x1 = k as f64 / 1000.0;
        let x = [x1, 1.0 - x1];
        let value = risk_objective(&accounts, &x, p_tau, SingleAssetLaw::Law(&law), &spec).unwrap();
        let oracle: f64 = accounts
            .iter()
            .zip(x)
            .map(|(a, xi)| {
                let y = a.q - xi;
                y * exponential_call_cvar(1.0, 1.0, 0.5, p_tau * (1.0 + a.equity(p_tau) / (p_tau * y)))
            })
            .sum();
        ensure((value - oracle).abs() < 1e-12, || format!("x1 = {x1}: {value} vs oracle {oracle}"))?;
        lo = lo.min(value);
        hi = hi.max(value);
    }
    ensure(hi - lo <= 1e-9, || format!("objective varies by {} over the segment", hi - lo))?;
    ensure((lo - expected).abs() <= 1e-9, || format!("level {lo}, expected {expected}"))?;
    let wf = waterfill(&accounts, p_tau, 1.0).unwrap();
    let at_wf = risk_objective(&accounts, &wf.x, p_tau, SingleAssetLaw::Law(&law), &spec).unwrap();
    ensure(wf.x == vec![0.5, 0.5], || format!("waterfill returned {:?}", wf.x))?;
    ensure((at_wf - expected).abs() <= 1e-9, || format!("waterfill objective {at_wf}"))?;
    Ok(format!("objective {lo:.12} on the whole segment, spread {:.1e}", hi - lo))
}

struct Instance {
    accounts: Vec<SingleAssetAccount>,
    q_total: f64,
    scenarios: Option<ScenarioSet>,
}

fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p_tau = 100.0;
    let n = rng.random_range(2..=5);
    let accounts: Vec<SingleAssetAccount> = (0..n)
        .map(|i| loop {
            let q = rng.random_range(0.5..5.0);
            let p_entry = p_tau * rng.random_range(0.8..1.2);
            let margin = p_tau * q * rng.random_range(0.05..0.6);
            if let Ok(a) = SingleAssetAccount::new(i.to_string(), q, p_entry, margin, p_tau) {
                break a;
            }
        })
        .collect();
    let total: f64 = accounts.iter().map(|a| a.q).sum();
    let q_total = total * rng.random_range(0.1..0.7);
    let scenarios = (seed % 2 == 1).then(|| {
        let law = PriceModel::Gbm(adl_core::GbmModel::new(p_tau, 0.0, 1.5, 30.0 / 365.0).unwrap());
        sample(&law, 300, seed).unwrap()
    });
    Instance {
        accounts,
        q_total,
        scenarios,
    }
}

fn grid_steps(n: usize) -> usize {
    match n {
        2 => 4000,
        3 => 300,
        4 => 70,
        _ => 28,
    }
}

fn waterfill_grid_oracle() -> Outcome {
    let p_tau = 100.0;
    let gbm = adl_core::GbmModel::new(p_tau, 0.0, 1.5, 30.0 / 365.0).unwrap();
    let mut worst_excess: f64 = 0.0;
    for seed in 0..100u64 {
        let inst = random_instance(seed);
        let accounts = &inst.accounts;
        let equity: Vec<f64> = accounts.iter().map(|a| a.equity(p_tau)).collect();
        let objective = |x: &[f64]| -> f64 {
            match &inst.scenarios {
                Some(s) => s
                    .iter()
                    .map(|(p, w)| {
                        w * (0..x.len()).map(|i| isolated_loss(accounts[i].q, equity[i], p_tau, x[i], p[0])).sum::<f64>()
                    })
                    .sum(),
                None => accounts
                    .iter()
                    .zip(x)
                    .map(|(a, xi)| expected_shortfall_account(a, *xi, &gbm, p_tau).unwrap())
                    .sum(),
            }
        };
        // largest |∂F/∂x_i|
        let slope = match &inst.scenarios {
            Some(s) => s.prices().iter().map(|p| (p[0] - p_tau).abs()).fold(0.0, f64::max),
            None => gbm.mean() + p_tau,
        };
        let wf = waterfill(accounts, p_tau, inst.q_total).unwrap();
        let f_wf = objective(&wf.x);
        let caps: Vec<f64> = accounts.iter().map(|a| a.q).collect();
        let steps = grid_steps(accounts.len());
        let h = inst.q_total / steps as f64;
        let mut f_grid = f64::INFINITY;
        let mut min_max_lev = f64::INFINITY;
        simplex_grid(&caps, inst.q_total, steps, |x| {
            f_grid = f_grid.min(objective(x));
            let lev = (0..x.len())
                .map(|i| p_tau * (caps[i] - x[i]).max(0.0) / equity[i])
                .fold(0.0, f64::max);
            min_max_lev = min_max_lev.min(lev);
        });
        let scale = 1e-9 * (1.0 + f_wf.abs());
        ensure(f_wf <= f_grid + scale, || format!("seed {seed}: grid point beats waterfill ({f_grid} < {f_wf})"))?;
        let resolution = 2.0 * accounts.len() as f64 * h * slope;
        ensure(f_grid - f_wf <= resolution, || {
            format!("seed {seed}: grid optimum {f_grid} is {} above waterfill, resolution {resolution}", f_grid - f_wf)
        })?;
        ensure(min_max_lev >= wf.t_star * (1.0 - 1e-9), || {
            format!("seed {seed}: grid max-leverage {min_max_lev} below t* = {}", wf.t_star)
        })?;
        worst_excess = worst_excess.max((f_grid - f_wf) / resolution);
    }
    Ok(format!("100 instances, grid gap at most {:.3} of the resolution bound", worst_excess))
}

const PROPERTY_SEED: u64 = 7;

fn sybil_suite() -> Outcome {
    let wf = run_property(Policy::Waterfill, Property::Sybil, PROPERTY_SEED, 1000).unwrap();
    ensure(wf.pass, || format!("waterfill split gain: {:?}", wf.counterexample))?;
    let queue = run_property(Policy::Queue, Property::Sybil, PROPERTY_SEED, 10_000).unwrap();
    let Some(Counterexample::Sybil {
        unsplit_total,
        split_total,
        ..
    }) = queue.counterexample
    else {
        return Err("no queue violation in 10^4 trials".into());
    };
    Ok(format!("waterfill clean over 1000 splits; queue split cuts buyback {unsplit_total:.4} -> {split_total:.4}"))
}

fn path_and_priority_suite() -> Outcome {
    let wf = run_property(Policy::Waterfill, Property::PathIndependence, PROPERTY_SEED, 1000).unwrap();
    ensure(wf.pass, || format!("waterfill path gap: {:?}", wf.counterexample))?;
    let wf = run_property(Policy::Waterfill, Property::LeveragePriority, PROPERTY_SEED, 1000).unwrap();
    ensure(wf.pass, || format!("waterfill priority: {:?}", wf.counterexample))?;
    let archive = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../core/tests/fixtures/policy_counterexamples.json"
    ))
    .unwrap();
    let archived: Vec<PropertyOutcome> = serde_json::from_str(&archive).unwrap();
    let gap = archived
        .iter()
        .find_map(|o| match (&o.policy, &o.counterexample) {
            (Policy::Queue, Some(Counterexample::PathIndependence { state, p_tau, q1, q2, .. })) => {
                Some(path_gap(Policy::Queue, state, *p_tau, *q1, *q2).unwrap())
            }
            _ => None,
        })
        .ok_or("archive has no queue path counterexample")?;
    ensure(gap > 0.0, || format!("archived queue path gap is {gap}"))?;
    let pr_path = run_property(Policy::ProRata, Property::PathIndependence, PROPERTY_SEED, 1000).unwrap();
    ensure(pr_path.pass, || format!("pro-rata path gap: {:?}", pr_path.counterexample))?;
    let pr_prio = run_property(Policy::ProRata, Property::LeveragePriority, PROPERTY_SEED, 1000).unwrap();
    ensure(!pr_prio.pass, || "pro-rata never broke leverage priority".into())?;
    Ok(format!("waterfill path and priority hold; archived queue gap {gap:.4}; pro-rata path ok, priority broken"))
}

const MC_DRAWS: usize = 4_000_000;
const MC_SIGMAS: f64 = 3.0;

fn gbm_closed_forms() -> Outcome {
    let model = btc_gbm();
    let beta = 0.98;
    let p_beta = gbm_quantile(&model, beta).unwrap();
    let ell = leverage_cutoff(&model, beta, BTC_P_TAU).unwrap();
    ensure(rel(ell * (p_beta - BTC_P_TAU), BTC_P_TAU) < 1e-10, || format!("cutoff identity off: {ell}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(98);
    let draws: Vec<f64> = (0..MC_DRAWS).map(|_| model.sample_one(&mut rng)).collect();
    let check = |name: &str, closed: f64, f: &dyn Fn(f64) -> f64| -> Result<String, String> {
        let (mean, se) = mean_se(&draws.iter().map(|&p| f(p)).collect::<Vec<_>>());
        let z = (closed - mean) / se;
        ensure(z.abs() <= MC_SIGMAS, || format!("{name}: closed {closed} vs MC {mean} ± {se} ({z:.2} SE)"))?;
        Ok(format!("{name} {z:+.2}"))
    };
    let tail = 1.0 - beta;
    let mut parts = vec![check("quantile", tail, &|p| if p >= p_beta { 1.0 } else { 0.0 })?];
    parts.push(check("tail mean", gbm_tail_mean(&model, beta).unwrap(), &|p| if p >= p_beta { p / tail } else { 0.0 })?);
    for strike in [BTC_P_TAU, p_beta, 1.1 * p_beta] {
        parts.push(check("call", gbm_call_expectation(&model, strike).unwrap(), &|p| (p - strike).max(0.0))?);
    }
    for a in btc_shorts() {
        for x in [0.0, 0.5 * a.q] {
            let e = a.equity(BTC_P_TAU);
            let closed = cvar_account_gbm(&a, x, &model, beta).unwrap();
            let name = format!("cvar[{}]", a.id);
            parts.push(check(&name, closed, &|p| {
                if p >= p_beta {
                    isolated_loss(a.q, e, BTC_P_TAU, x, p) / tail
                } else {
                    0.0
                }
            })?);
        }
    }
    Ok(format!("cutoff {ell:.4} at p_beta {p_beta:.1}; z-scores: {}", parts.join(", ")))
}

fn single_asset_embedding(law: ExpectationModel, q_total: f64) -> Result<f64, String> {
    let singles = btc_shorts();
    let cross: Vec<CrossMarginAccount> = singles
        .iter()
        .map(|a| CrossMarginAccount::new(a.id.clone(), vec![a.q], vec![a.p_entry], a.margin, &[BTC_P_TAU]).unwrap())
        .collect();
    let problem = ClearingProblem::new(cross, vec![q_total], vec![BTC_P_TAU], law).unwrap();
    let report = dual_ascent(&problem, &DualParams::default()).map_err(|e| e.to_string())?;
    let wf = waterfill(&singles, BTC_P_TAU, q_total).unwrap();
    let err = report.x.iter().zip(&wf.x).map(|(x, w)| (x[0] - w).abs()).fold(0.0, f64::max);
    ensure(err <= 1e-6, || format!("Q = {q_total}: dual {:?} vs waterfill {:?}", report.x, wf.x))?;
    Ok(err)
}

fn multi_asset_solver() -> Outcome {
    let (accounts, p) = split_assets_instance();
    let q = vec![0.2, 0.8];
    let v = vec![1.0, 1.0];
    let model = SingleFactorModel::new(p.clone(), v.clone(), EpsilonLaw::StandardNormal).unwrap();
    let problem = ClearingProblem::new(accounts, q.clone(), p, ExpectationModel::SingleFactor(model)).unwrap();
    let r = dual_ascent(&problem, &DualParams::default()).unwrap();
    let want = [[0.2, 0.0], [0.0, 0.8]];
    for (got, want) in r.x.iter().zip(&want) {
        for (g, w) in got.iter().zip(want) {
            ensure((g - w).abs() < 1e-9, || format!("allocation {:?}", r.x))?;
        }
    }
    let graph = interior_coverage_connected(&r.x, problem.bounds(), &q, &v).unwrap();
    ensure(!graph.connected, || "coverage graph reported connected".into())?;

    let gbm = Arc::new(btc_gbm());
    let scenarios = sample(&PriceModel::Gbm(btc_gbm()), 10_000, 11).unwrap();
    let mut embed_err: f64 = 0.0;
    for q_total in [5.0, 15.0, 25.0] {
        embed_err = embed_err.max(single_asset_embedding(ExpectationModel::Law(gbm.clone()), q_total)?);
        embed_err = embed_err.max(single_asset_embedding(ExpectationModel::Scenarios(scenarios.clone()), q_total)?);
    }

    let s = sample(&PriceModel::BivariateGbm(pair_model()), 10_000, 7).unwrap();
    let mut rows = Vec::new();
    for q_btc in [2.0, 6.0, 10.0] {
        let problem = ClearingProblem::new(pair_accounts(), vec![q_btc, 0.0], PAIR_P_TAU.to_vec(), ExpectationModel::Scenarios(s.clone())).unwrap();
        let (r, elapsed): (MultiSolveReport, _) = timed(|| dual_ascent(&problem, &DualParams::default()).unwrap());
        ensure(r.relative_gap <= 1e-6, || format!("Q = {q_btc}: relative gap {:e}", r.relative_gap))?;
        ensure(elapsed < Duration::from_secs(10), || format!("Q = {q_btc}: {elapsed:?}"))?;
        rows.push(format!("Q={q_btc}: gap {:.1e} in {elapsed:.0?}", r.relative_gap));
    }
    Ok(format!("split-asset allocation exact and disconnected; embedding error {embed_err:.1e}; {}", rows.join(", ")))
}

fn richardson_derivative(f: impl Fn(f64) -> f64, z: f64, h: f64) -> f64 {
    (8.0 * (f(z + h) - f(z - h)) - (f(z + 2.0 * h) - f(z - 2.0 * h))) / (12.0 * h)
}

fn single_factor_suite() -> Outcome {
    let laws = [
        EpsilonLaw::StandardNormal,
        EpsilonLaw::Laplace { scale: 0.7 },
        EpsilonLaw::Logistic { scale: 0.6 },
    ];
    let mut worst_fd: f64 = 0.0;
    for law in laws {
        for mag in [0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0] {
            for z in [mag, -mag] {
                let fd = richardson_derivative(|t| psi(&law, t), z, 1e-3 * mag.min(mag.powi(3)));
                let exact = psi_prime(&law, z);
                let err = rel(fd, exact);
                ensure(err <= 1e-6, || format!("{law:?} at z = {z}: psi' {exact} vs difference {fd}"))?;
                worst_fd = worst_fd.max(err);
            }
        }
    }

    let lf = leading_factor(&increment_covariance(&pair_model())).unwrap();
    let model = SingleFactorModel::new(PAIR_P_TAU.to_vec(), lf.v.clone(), EpsilonLaw::StandardNormal).unwrap();
    let mut worst_match: f64 = 0.0;
    for q_btc in [2.0, 6.0, 10.0] {
        let q = vec![q_btc, 0.0];
        let construction = factor_water_fill(&pair_accounts(), &q, &model).map_err(|e| e.to_string())?;
        let x_star = construction.x_star.ok_or("construction not implementable")?;
        let problem = ClearingProblem::new(pair_accounts(), q, PAIR_P_TAU.to_vec(), ExpectationModel::SingleFactor(model.clone())).unwrap();
        let r = dual_ascent(&problem, &DualParams::default()).unwrap();
        for (a, b) in x_star.iter().flatten().zip(r.x.iter().flatten()) {
            ensure((a - b).abs() <= 1e-6, || format!("Q = {q_btc}: construction {x_star:?} vs dual {:?}", r.x))?;
            worst_match = worst_match.max((a - b).abs());
        }
    }

    // Σ E_i ℓ_i(x_i) = vᵀ(Σ q_i - Q) for every feasible allocation
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let accounts = pair_accounts();
    let mut worst_identity: f64 = 0.0;
    for _ in 0..1000 {
        let q = vec![rng.random_range(0.1..30.0), rng.random_range(1.0..600.0)];
        let mut x = vec![vec![0.0; 2]; accounts.len()];
        for k in 0..2 {
            let caps: Vec<f64> = accounts.iter().map(|a| a.q[k].max(0.0)).collect();
            let w: Vec<f64> = (0..accounts.len()).map(|_| rng.random_range(0.01..1.0)).collect();
            for (i, xi) in capped_split(&w, &caps, q[k]).into_iter().enumerate() {
                x[i][k] = xi;
            }
        }
        let lhs: f64 = accounts
            .iter()
            .zip(&x)
            .map(|(a, xi)| a.equity(&PAIR_P_TAU) * a.factor_leverage(xi, &lf.v, &PAIR_P_TAU).unwrap())
            .sum();
        let held: f64 = accounts.iter().map(|a| a.q[0] * lf.v[0] + a.q[1] * lf.v[1]).sum();
        let rhs = held - q[0] * lf.v[0] - q[1] * lf.v[1];
        let err = (lhs - rhs).abs() / held.abs();
        ensure(err <= 1e-12, || format!("budget identity off by {err:e} at Q = {q:?}"))?;
        worst_identity = worst_identity.max(err);
    }
    Ok(format!(
        "psi' vs differences {worst_fd:.1e}; construction vs dual {worst_match:.1e}; identity {worst_identity:.1e}"
    ))
}

fn scaling_instance(n: usize, scenarios: &ScenarioSet) -> ClearingProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let accounts: Vec<CrossMarginAccount> = (0..n)
        .map(|i| {
            let q: Vec<f64> = vec![rng.random_range(1.0..10.0), rng.random_range(-300.0..300.0)];
            let notional = q[0].abs() * PAIR_P_TAU[0] + q[1].abs() * PAIR_P_TAU[1];
            let equity = notional * rng.random_range(0.04..0.15);
            CrossMarginAccount::from_equity(i.to_string(), q, equity, 0.5 * equity, &PAIR_P_TAU).unwrap()
        })
        .collect();
    let q_btc = 0.3 * accounts.iter().map(|a| a.q[0]).sum::<f64>();
    ClearingProblem::new(accounts, vec![q_btc, 0.0], PAIR_P_TAU.to_vec(), ExpectationModel::Scenarios(scenarios.clone())).unwrap()
}

fn linear_scaling() -> Outcome {
    let scenarios = sample(&PriceModel::BivariateGbm(pair_model()), 2000, 5).unwrap();
    let sizes = [10usize, 100, 1000];
    let times: Vec<f64> = sizes
        .iter()
        .map(|&n| {
            let problem = scaling_instance(n, &scenarios);
            (0..3)
                .map(|_| timed(|| dual_ascent(&problem, &DualParams::default()).unwrap()).1.as_secs_f64())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    for w in 0..2 {
        let ratio = times[w + 1] / times[w];
        let bound = 2.0 * (sizes[w + 1] / sizes[w]) as f64;
        ensure(ratio <= bound, || format!("n {} -> {}: time ratio {ratio:.1} exceeds {bound}", sizes[w], sizes[w + 1]))?;
    }
    Ok(format!(
        "S = 2000: {}",
        sizes
            .iter()
            .zip(&times)
            .map(|(n, t)| format!("n={n} {:.1} ms", t * 1e3))
            .collect::<Vec<_>>()
            .join(", ")
    ))
}

fn figure_series() -> Outcome {
    let accounts = btc_shorts();
    let model = btc_gbm();
    let beta = 0.98;
    let total: f64 = accounts.iter().map(|a| a.q).sum();
    let budgets: Vec<f64> = (0..=660).map(|k| total * k as f64 / 660.0).collect();
    let curve = leverage_curve(&accounts, BTC_P_TAU, &budgets).unwrap();
    let n = accounts.len();
    for i in 0..n {
        for w in 1..budgets.len() {
            let (a, b) = (curve[(w - 1) * n + i].post_leverage, curve[w * n + i].post_leverage);
            ensure(b <= a + 1e-12 * a.max(1.0), || format!("account {} leverage rises at Q = {}", i + 1, budgets[w]))?;
        }
    }
    let spec = RiskSpec::Cvar { beta };
    let obj = objective_curve(&accounts, BTC_P_TAU, &budgets, SingleAssetLaw::Law(&model), &spec).unwrap();
    ensure(obj.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-9), || "objective is not nonincreasing".into())?;

    let ell = leverage_cutoff(&model, beta, BTC_P_TAU).unwrap();
    let q_beta = budget_to_cutoff(&accounts, BTC_P_TAU, ell);
    ensure(q_beta > 0.0 && q_beta < total, || format!("Q_beta = {q_beta} outside (0, {total})"))?;
    let f = |q: f64| {
        let x = waterfill(&accounts, BTC_P_TAU, q).unwrap().x;
        risk_objective(&accounts, &x, BTC_P_TAU, SingleAssetLaw::Law(&model), &spec).unwrap()
    };
    // every reduced account is stressed below Q_beta, so the slope is -(tail mean - p_tau)
    let stressed = -(model.tail_mean(beta).unwrap() - BTC_P_TAU);
    let h = 1e-3 * q_beta;
    for q in [0.25 * q_beta, 0.5 * q_beta, q_beta - 2.0 * h] {
        let slope = (f(q + h) - f(q)) / h;
        ensure(rel(slope, stressed) < 1e-7, || format!("slope {slope} at Q = {q}, expected {stressed}"))?;
    }
    let after = (f(q_beta + 2.0 * h) - f(q_beta + h)) / h;
    let later = (f(q_beta + 0.2 * (total - q_beta) + h) - f(q_beta + 0.2 * (total - q_beta))) / h;
    ensure(after > stressed && later > after && later - stressed > 1e-3 * stressed.abs(), || {
        format!("no slope change past Q_beta: {stressed} -> {after} -> {later}")
    })?;
    Ok(format!("Q_beta = {q_beta:.4}; slope {stressed:.1} before, {later:.1} at 20% past"))
}

// ---------------------------------------------------------------------------

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 12] = [
        ("1 pair leverages", pair_leverages),
        ("2 factor calibration", pair_calibration),
        ("3 CVaR level shift", level_shift_scan),
        ("4 flat continuum", flat_continuum),
        ("5 waterfill grid oracle", waterfill_grid_oracle),
        ("6 sybil resistance", sybil_suite),
        ("7 path and priority", path_and_priority_suite),
        ("8 GBM closed forms", gbm_closed_forms),
        ("9 multi-asset solver", multi_asset_solver),
        ("10 single-factor suite", single_factor_suite),
        ("11 linear scaling", linear_scaling),
        ("figure series", figure_series),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{name}] ({secs:.2}s) {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL [{name}] ({secs:.2}s) {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
