//! Regenerates the published tables and figure data from bundled configs.

use std::fmt::Write as _;

use adl_core::market_model::{fmt17, sample};
use adl_core::multi_asset::{saa_cvar, ClearingProblem, ExpectationModel};
use adl_core::single_asset::{budget_to_cutoff, leverage_curve, leverage_cutoff, objective_curve};
use adl_core::single_factor::{factor_water_fill, interior_coverage_connected};
use adl_core::{PriceLaw, PriceModel, RiskSpec, ScenarioSet, SingleAssetLaw};
use anyhow::{Context, Result};
use serde::Serialize;

use crate::commands::{calibration, factor_model, leverage_csv, leverage_table, run_dual, Common, MultiOutput};
use crate::io::{self, OutDir};

const FIXTURES: [(&str, &str); 8] = [
    ("btc_shorts.json", include_str!("../fixtures/btc_shorts.json")),
    ("btc_gbm.json", include_str!("../fixtures/btc_gbm.json")),
    ("pair_accounts.json", include_str!("../fixtures/pair_accounts.json")),
    ("pair_model.json", include_str!("../fixtures/pair_model.json")),
    ("level_shift_accounts.json", include_str!("../fixtures/level_shift_accounts.json")),
    ("level_shift_scenarios.csv", include_str!("../fixtures/level_shift_scenarios.csv")),
    ("split_assets_accounts.json", include_str!("../fixtures/split_assets_accounts.json")),
    ("split_assets_model.json", include_str!("../fixtures/split_assets_model.json")),
];

fn fixture(name: &str) -> &'static str {
    FIXTURES.iter().find(|(n, _)| *n == name).map(|(_, body)| *body).unwrap_or_default()
}

fn model(name: &str) -> Result<PriceModel> {
    serde_json::from_str(fixture(name)).with_context(|| format!("bundled fixture {name}"))
}

/// Sizes of the leverage sweep and the level-shift scan.
const SWEEP_STEPS: usize = 660;
const SCAN_STEPS: usize = 10_000;
const TABLE_BUDGETS: [f64; 3] = [2.0, 6.0, 10.0];
const FIGURE_BETA: f64 = 0.98;

#[derive(Serialize)]
struct Cutoff {
    beta: f64,
    p_beta: f64,
    ell_beta: f64,
    q_beta: f64,
}

#[derive(Serialize)]
struct LevelShift {
    beta: f64,
    minimizers: Vec<f64>,
    value: f64,
}

#[derive(Serialize)]
struct SplitAssets<'a> {
    #[serde(flatten)]
    solve: MultiOutput<'a>,
    coverage_connected: bool,
    factor_targets: Vec<f64>,
    factor_implementable: bool,
}

pub fn reproduce_cmd(n_scenarios: usize, common: &Common) -> Result<bool> {
    let params = common.dual_params()?;
    let out = OutDir::create(&common.out)?;
    for (name, body) in FIXTURES {
        out.write(&format!("fixture_{name}"), body)?;
    }
    let mut ok = true;

    // leverage draining and the CVaR objective along the budget
    let gbm = model("btc_gbm.json")?;
    let PriceModel::Gbm(law) = gbm else { unreachable!("btc_gbm.json holds a GBM") };
    let shorts = io::single_accounts_from_str(fixture("btc_shorts.json"), "btc_shorts.json", law.p_tau)?;
    let total: f64 = shorts.iter().map(|a| a.q).sum();
    let budgets: Vec<f64> = (0..=SWEEP_STEPS).map(|k| total * k as f64 / SWEEP_STEPS as f64).collect();
    out.write("leverage_path.csv", &leverage_csv(&leverage_curve(&shorts, law.p_tau, &budgets)?))?;
    let spec = RiskSpec::Cvar { beta: FIGURE_BETA };
    let mut csv = String::from("Q,objective\n");
    for (q, f) in objective_curve(&shorts, law.p_tau, &budgets, SingleAssetLaw::Law(&law), &spec)? {
        let _ = writeln!(csv, "{},{}", fmt17(q), fmt17(f));
    }
    out.write("cvar_objective.csv", &csv)?;
    let ell_beta = leverage_cutoff(&law, FIGURE_BETA, law.p_tau)?;
    out.json(
        "cvar_cutoff.json",
        &Cutoff {
            beta: FIGURE_BETA,
            p_beta: law.quantile(FIGURE_BETA)?,
            ell_beta,
            q_beta: budget_to_cutoff(&shorts, law.p_tau, ell_beta),
        },
    )?;

    // factor calibration, the leverage table and SAA solves on the BTC/ETH book
    let pair = model("pair_model.json")?;
    let cal = calibration(&pair)?;
    out.json("pair_calibration.json", &cal)?;
    let p_tau = pair.p_tau();
    let pair_accounts = io::cross_accounts_from_str(fixture("pair_accounts.json"), "pair_accounts.json", &p_tau)?;
    out.write("pair_leverage_table.csv", &leverage_table(&pair_accounts, &cal.factor.v, &p_tau)?)?;
    let scenarios = sample(&pair, n_scenarios, common.seed)?;
    let (factor, _) = factor_model(pair.clone())?;
    let mut csv = String::from("Q,account_id,x_1,x_2,gross_leverage,factor_leverage,factor_target\n");
    for q_btc in TABLE_BUDGETS {
        let q = vec![q_btc, 0.0];
        let problem = ClearingProblem::new(pair_accounts.clone(), q.clone(), p_tau.clone(), ExpectationModel::Scenarios(scenarios.clone()))?;
        let r = run_dual(&problem, &params, &out, &format!("pair_trace_Q{q_btc}.csv"))?;
        ok &= r.relative_gap <= common.tol;
        let targets = factor_water_fill(&pair_accounts, &q, &factor)?;
        for ((a, x), t) in pair_accounts.iter().zip(&r.x).zip(&targets.targets) {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                fmt17(q_btc),
                a.id,
                fmt17(x[0]),
                fmt17(x[1]),
                fmt17(a.gross_leverage(x, &p_tau)?),
                fmt17(a.factor_leverage(x, &factor.v, &p_tau)?),
                fmt17(*t)
            );
        }
    }
    out.write("pair_saa.csv", &csv)?;

    // CVaR optimizers that move with the level
    let ls_p = vec![1.0, 1.0];
    let ls_accounts = io::cross_accounts_from_str(fixture("level_shift_accounts.json"), "level_shift_accounts.json", &ls_p)?;
    let ls_scen = ScenarioSet::from_csv(fixture("level_shift_scenarios.csv"))?;
    let q_ls = 10.0;
    let problem = ClearingProblem::new(ls_accounts, vec![q_ls, 0.0], ls_p, ExpectationModel::Scenarios(ls_scen.clone()))?;
    let betas = [0.90, 0.95];
    let mut csv = String::from("a,cvar_0.90,cvar_0.95\n");
    let mut best: Vec<LevelShift> = betas.iter().map(|&beta| LevelShift { beta, minimizers: Vec::new(), value: f64::INFINITY }).collect();
    for k in 0..=SCAN_STEPS {
        let a = q_ls * k as f64 / SCAN_STEPS as f64;
        let x = vec![vec![a, 0.0], vec![q_ls - a, 0.0]];
        let vals = betas.iter().map(|&b| saa_cvar(&problem, &x, &ls_scen, b)).collect::<adl_core::Result<Vec<_>>>()?;
        if k % 10 == 0 {
            let _ = writeln!(csv, "{},{},{}", fmt17(a), fmt17(vals[0]), fmt17(vals[1]));
        }
        for (slot, v) in best.iter_mut().zip(vals) {
            if v < slot.value - 1e-12 {
                slot.value = v;
                slot.minimizers.clear();
            }
            if (v - slot.value).abs() <= 1e-12 {
                slot.minimizers.push(a);
            }
        }
    }
    out.write("level_shift_scan.csv", &csv)?;
    out.json("level_shift_minimizers.json", &best)?;

    // two accounts that can each absorb only their own asset
    let sa_model = model("split_assets_model.json")?;
    let (sf, _) = factor_model(sa_model)?;
    let sa_accounts = io::cross_accounts_from_str(fixture("split_assets_accounts.json"), "split_assets_accounts.json", &sf.p_tau)?;
    let q_sa = vec![0.2, 0.8];
    let problem = ClearingProblem::new(sa_accounts.clone(), q_sa.clone(), sf.p_tau.clone(), ExpectationModel::SingleFactor(sf.clone()))?;
    let r = run_dual(&problem, &params, &out, "split_assets_trace.csv")?;
    ok &= r.relative_gap <= common.tol;
    let graph = interior_coverage_connected(&r.x, problem.bounds(), &q_sa, &sf.v)?;
    let targets = factor_water_fill(&sa_accounts, &q_sa, &sf)?;
    out.json(
        "split_assets.json",
        &SplitAssets {
            solve: MultiOutput::new(&problem, &r)?,
            coverage_connected: graph.connected,
            factor_targets: targets.targets,
            factor_implementable: targets.implementable,
        },
    )?;
    Ok(ok)
}
