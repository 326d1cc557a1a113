//! Subcommand bodies. Each returns whether every solve met its tolerance.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use adl_core::market_model::{fmt17, increment_covariance, leading_factor, sample, LeadingFactor};
use adl_core::multi_asset::{dual_ascent, saa_cvar, ClearingProblem, DualParams, ExpectationModel, MultiSolveReport};
use adl_core::policies::{apply_policy, run_property, Policy, PolicyState, Property};
use adl_core::single_asset::{
    leverage_curve, solve_single, verify_cvar_optimality, verify_expected_loss_optimality, LeveragePoint, OptimalityCheck,
};
use adl_core::single_factor::{factor_water_fill, interior_coverage_connected, lambda_parallel, CoverageGraph, FactorTargets};
use adl_core::{
    AdlError, CrossMarginAccount, EpsilonLaw, IterRecord, PriceLaw, PriceModel, RiskSpec, ScenarioSet, SingleAssetLaw,
    SingleFactorModel, SolveReport,
};
use anyhow::{bail, ensure, Result};
use serde::Serialize;

use crate::io::{self, csv_field, OutDir};

/// Flags shared by every subcommand.
#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// Output directory.
    #[arg(long, default_value = "adl-out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long = "max-iter", default_value_t = 20_000)]
    pub max_iter: usize,
}

impl Common {
    pub fn dual_params(&self) -> Result<DualParams> {
        ensure!(self.tol > 0.0, "--tol must be positive");
        ensure!(self.max_iter > 0, "--max-iter must be at least 1");
        Ok(DualParams {
            max_iter: self.max_iter,
            tol: self.tol,
            t0: None,
        })
    }
}

/// How the terminal price enters: a model (inline JSON or path) or a scenario CSV.
#[derive(Debug, Clone, clap::Args)]
pub struct Law {
    /// Price model as inline JSON or a path to a JSON file.
    #[arg(long, conflicts_with = "scenarios")]
    pub model: Option<String>,
    /// Scenario CSV with header `prob,p1,...,pd`.
    #[arg(long)]
    pub scenarios: Option<PathBuf>,
    /// ADL price(s); required with --scenarios, otherwise taken from the model.
    #[arg(long = "p-tau", value_delimiter = ',', allow_hyphen_values = true)]
    pub p_tau: Vec<f64>,
}

enum Loaded {
    Model(PriceModel),
    Scenarios(ScenarioSet),
}

impl Law {
    fn load(&self) -> Result<(Loaded, Vec<f64>)> {
        match (&self.model, &self.scenarios) {
            (Some(m), None) => {
                let model = io::load_model(m)?;
                let implied = model.p_tau();
                if !self.p_tau.is_empty() && self.p_tau != implied {
                    bail!("--p-tau {:?} disagrees with the model's {:?}", self.p_tau, implied);
                }
                Ok((Loaded::Model(model), implied))
            }
            (None, Some(path)) => {
                let s = io::load_scenarios(path)?;
                ensure!(!self.p_tau.is_empty(), "--scenarios needs --p-tau");
                ensure!(
                    self.p_tau.len() == s.dim(),
                    "--p-tau has {} entries for {}-asset scenarios",
                    self.p_tau.len(),
                    s.dim()
                );
                Ok((Loaded::Scenarios(s), self.p_tau.clone()))
            }
            (None, None) => bail!("pass --model or --scenarios"),
            (Some(_), Some(_)) => bail!("--model and --scenarios are exclusive"),
        }
    }
}

fn scalar_law(model: &PriceModel) -> Result<&dyn PriceLaw> {
    match model {
        PriceModel::Gbm(m) => Ok(m),
        PriceModel::ShiftedExponential(m) => Ok(m),
        other => bail!("a one-asset law is needed, got a {}-asset model", other.dim()),
    }
}

pub fn risk_spec(spec: Option<&str>, beta: Option<f64>) -> Result<RiskSpec> {
    Ok(match (spec, beta) {
        (Some(s), None) => s.parse()?,
        (None, Some(b)) => {
            let spec = RiskSpec::Cvar { beta: b };
            spec.validate()?;
            spec
        }
        (None, None) => RiskSpec::Expected,
        (Some(_), Some(_)) => bail!("--beta is shorthand for --spec cvar:<beta>; pass one of them"),
    })
}

#[derive(Serialize)]
struct SingleOutput<'a> {
    account_ids: Vec<&'a str>,
    q_total: f64,
    p_tau: f64,
    #[serde(flatten)]
    report: SolveReport,
    post_leverage: Vec<f64>,
    optimality: Option<OptimalityCheck>,
    tolerance_met: bool,
}

pub fn leverage_csv(rows: &[LeveragePoint]) -> String {
    let mut out = String::from("Q,account_id,post_leverage\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", fmt17(r.q), csv_field(&r.account_id), fmt17(r.post_leverage));
    }
    out
}

pub struct SingleArgs<'a> {
    pub accounts: &'a Path,
    pub law: &'a Law,
    pub q: f64,
    pub spec: RiskSpec,
    pub sweep: usize,
}

pub fn solve_single_cmd(args: SingleArgs<'_>, common: &Common) -> Result<bool> {
    let (loaded, p_tau) = args.law.load()?;
    ensure!(p_tau.len() == 1, "solve-single needs a one-asset law");
    let p_tau = p_tau[0];
    let accounts = io::load_single_accounts(args.accounts, p_tau)?;
    let law = match &loaded {
        Loaded::Model(m) => SingleAssetLaw::Law(scalar_law(m)?),
        Loaded::Scenarios(s) => SingleAssetLaw::Scenarios(s),
    };
    let report = solve_single(&accounts, p_tau, args.q, law, &args.spec)?;
    let optimality = match (&args.spec, law) {
        (RiskSpec::Expected, _) => Some(verify_expected_loss_optimality(&accounts, p_tau, args.q, &report.x)?),
        (RiskSpec::Cvar { beta }, SingleAssetLaw::Law(l)) if *beta > 0.0 => {
            Some(verify_cvar_optimality(&accounts, p_tau, args.q, &report.x, l, *beta)?)
        }
        _ => None,
    };
    let post_leverage = accounts
        .iter()
        .zip(&report.x)
        .map(|(a, x)| a.leverage(*x, p_tau))
        .collect::<adl_core::Result<Vec<_>>>()?;
    let tolerance_met = report.diagnostics.g_residual.abs() <= common.tol * args.q.abs().max(1.0)
        && optimality.as_ref().is_none_or(|c| c.optimal);

    let out = OutDir::create(&common.out)?;
    let budgets: Vec<f64> = (0..=args.sweep).map(|j| args.q * j as f64 / args.sweep.max(1) as f64).collect();
    out.write("leverage.csv", &leverage_csv(&leverage_curve(&accounts, p_tau, &budgets)?))?;
    out.json(
        "report.json",
        &SingleOutput {
            account_ids: accounts.iter().map(|a| a.id.as_str()).collect(),
            q_total: args.q,
            p_tau,
            report,
            post_leverage,
            optimality,
            tolerance_met,
        },
    )?;
    Ok(tolerance_met)
}

pub fn trace_csv(trace: &[IterRecord]) -> String {
    let mut out = String::from("iter,residual_inf,g_value\n");
    for r in trace {
        let _ = writeln!(out, "{},{},{}", r.iter, fmt17(r.residual_inf), fmt17(r.g_value));
    }
    out
}

#[derive(Serialize)]
pub struct MultiOutput<'a> {
    pub account_ids: Vec<&'a str>,
    pub q_target: &'a [f64],
    pub p_tau: &'a [f64],
    pub x: &'a [Vec<f64>],
    pub lambda: &'a [f64],
    pub objective: f64,
    pub dual_value: f64,
    pub duality_gap: f64,
    pub relative_gap: f64,
    pub residual: &'a [f64],
    pub iterations: usize,
    pub effective_dimension: usize,
    pub method: &'a str,
    pub gross_leverage: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cvar: Option<(f64, f64)>,
}

impl<'a> MultiOutput<'a> {
    pub fn new(problem: &'a ClearingProblem, r: &'a MultiSolveReport) -> Result<Self> {
        let gross_leverage = problem
            .accounts()
            .iter()
            .zip(&r.x)
            .map(|(a, x)| a.gross_leverage(x, problem.p_tau()))
            .collect::<adl_core::Result<Vec<_>>>()?;
        Ok(Self {
            account_ids: problem.accounts().iter().map(|a| a.id.as_str()).collect(),
            q_target: problem.q_target(),
            p_tau: problem.p_tau(),
            x: &r.x,
            lambda: &r.lambda,
            objective: r.objective,
            dual_value: r.dual_value,
            duality_gap: r.duality_gap,
            relative_gap: r.relative_gap,
            residual: &r.residual,
            iterations: r.iterations,
            effective_dimension: r.effective_dimension,
            method: &r.method,
            gross_leverage,
            cvar: None,
        })
    }
}

/// Runs the dual solver; a convergence failure still leaves its trace behind.
pub fn run_dual(problem: &ClearingProblem, params: &DualParams, out: &OutDir<'_>, trace_name: &str) -> Result<MultiSolveReport> {
    match dual_ascent(problem, params) {
        Ok(r) => {
            out.write(trace_name, &trace_csv(&r.trace))?;
            Ok(r)
        }
        Err(AdlError::Convergence { iterations, residual, trace }) => {
            out.write(trace_name, &trace_csv(&trace))?;
            bail!("dual ascent did not converge in {iterations} iterations (residual {residual:e}); trace written to {trace_name}")
        }
        Err(e) => Err(e.into()),
    }
}

pub struct MultiArgs<'a> {
    pub accounts: &'a Path,
    pub law: &'a Law,
    pub q: &'a [f64],
    pub beta: Option<f64>,
    pub n_scenarios: usize,
}

pub fn solve_multi_cmd(args: MultiArgs<'_>, common: &Common) -> Result<bool> {
    let params = common.dual_params()?;
    let (loaded, p_tau) = args.law.load()?;
    ensure!(args.q.len() == p_tau.len(), "--q has {} entries for {} assets", args.q.len(), p_tau.len());
    let accounts = io::load_cross_accounts(args.accounts, &p_tau)?;
    let model = match loaded {
        Loaded::Model(m) => ExpectationModel::from_price_model(&m, args.n_scenarios, common.seed)?,
        Loaded::Scenarios(s) => ExpectationModel::Scenarios(s),
    };
    let problem = ClearingProblem::new(accounts, args.q.to_vec(), p_tau, model)?;
    let out = OutDir::create(&common.out)?;
    let report = run_dual(&problem, &params, &out, "trace.csv")?;
    let mut view = MultiOutput::new(&problem, &report)?;
    if let Some(beta) = args.beta {
        // CVaR is evaluated on the expected-loss allocation, never optimized
        let s = match problem.model() {
            ExpectationModel::Scenarios(s) => s.clone(),
            ExpectationModel::SingleFactor(m) => sample(&PriceModel::SingleFactor(m.clone()), args.n_scenarios, common.seed)?,
            ExpectationModel::Law(_) => bail!("--beta with a closed-form one-asset law: use solve-single"),
        };
        view.cvar = Some((beta, saa_cvar(&problem, &report.x, &s, beta)?));
    }
    out.json("report.json", &view)?;
    Ok(true)
}

/// A one-factor model from `--model`: given directly, or calibrated from a
/// bivariate GBM with a standard normal shock.
pub fn factor_model(model: PriceModel) -> Result<(SingleFactorModel, Option<LeadingFactor>)> {
    match model {
        PriceModel::SingleFactor(m) => Ok((m, None)),
        PriceModel::BivariateGbm(m) => {
            let lf = leading_factor(&increment_covariance(&m))?;
            let sf = SingleFactorModel::new(m.p_tau.to_vec(), lf.v.clone(), EpsilonLaw::StandardNormal)?;
            Ok((sf, Some(lf)))
        }
        other => bail!("solve-factor needs a single_factor or bivariate_gbm model, got {}-asset {:?}", other.dim(), other),
    }
}

#[derive(Serialize)]
struct FactorOutput<'a> {
    account_ids: Vec<&'a str>,
    q_target: &'a [f64],
    v: &'a [f64],
    #[serde(flatten)]
    targets: &'a FactorTargets,
    initial_factor_leverage: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    coverage: Option<Coverage<'a>>,
}

#[derive(Serialize)]
struct Coverage<'a> {
    x: &'a [Vec<f64>],
    lambda: &'a [f64],
    graph: &'a CoverageGraph,
    lambda_parallel: bool,
}

pub fn coverage_edges(graph: &CoverageGraph) -> String {
    let mut out = String::from("asset_a,asset_b\n");
    for (a, b) in &graph.edges {
        let _ = writeln!(out, "{a},{b}");
    }
    out
}

pub struct FactorArgs<'a> {
    pub accounts: &'a Path,
    pub model: &'a str,
    pub q: &'a [f64],
    pub check_connectivity: bool,
}

pub fn solve_factor_cmd(args: FactorArgs<'_>, common: &Common) -> Result<bool> {
    let (model, _) = factor_model(io::load_model(args.model)?)?;
    ensure!(args.q.len() == model.dim(), "--q has {} entries for {} assets", args.q.len(), model.dim());
    let accounts = io::load_cross_accounts(args.accounts, &model.p_tau)?;
    let targets = factor_water_fill(&accounts, args.q, &model)?;
    let initial = accounts
        .iter()
        .map(|a| a.factor_leverage(&vec![0.0; model.dim()], &model.v, &model.p_tau))
        .collect::<adl_core::Result<Vec<_>>>()?;
    let out = OutDir::create(&common.out)?;

    let mut ok = true;
    let solved;
    let graph;
    let coverage = if args.check_connectivity {
        let problem = ClearingProblem::new(accounts.clone(), args.q.to_vec(), model.p_tau.clone(), ExpectationModel::SingleFactor(model.clone()))?;
        solved = run_dual(&problem, &common.dual_params()?, &out, "trace.csv")?;
        graph = interior_coverage_connected(&solved.x, problem.bounds(), args.q, &model.v)?;
        let parallel = lambda_parallel(&solved.lambda, &model.v, &graph.assets);
        print!("{}", coverage_edges(&graph));
        out.write("coverage.csv", &coverage_edges(&graph))?;
        ok &= solved.relative_gap <= common.tol;
        Some(Coverage {
            x: &solved.x,
            lambda: &solved.lambda,
            graph: &graph,
            lambda_parallel: parallel,
        })
    } else {
        None
    };
    out.json(
        "report.json",
        &FactorOutput {
            account_ids: accounts.iter().map(|a| a.id.as_str()).collect(),
            q_target: args.q,
            v: &model.v,
            targets: &targets,
            initial_factor_leverage: initial,
            coverage,
        },
    )?;
    Ok(ok)
}

pub fn compare_policies_cmd(trials: usize, allocate: Option<(&Path, f64, f64)>, common: &Common) -> Result<bool> {
    ensure!(trials > 0, "--trials must be at least 1");
    let mut csv = String::from("policy,property,pass,counterexample_json\n");
    for policy in Policy::ALL {
        for property in Property::ALL {
            let o = run_property(policy, property, common.seed, trials)?;
            let ce = match &o.counterexample {
                Some(c) => io::to_json(c)?.replace('\n', " "),
                None => String::new(),
            };
            let _ = writeln!(csv, "{policy},{property},{},{}", o.pass, csv_field(ce.trim_end()));
        }
    }
    let out = OutDir::create(&common.out)?;
    out.write("policies.csv", &csv)?;
    if let Some((path, q, p_tau)) = allocate {
        let accounts = io::load_single_accounts(path, p_tau)?;
        let state = PolicyState::from_accounts(&accounts, p_tau);
        let mut alloc = String::from("policy,account_id,x,post_leverage\n");
        for policy in Policy::ALL {
            let x = apply_policy(policy, &state, p_tau, q)?;
            for (a, xi) in accounts.iter().zip(&x) {
                let _ = writeln!(alloc, "{policy},{},{},{}", csv_field(&a.id), fmt17(*xi), fmt17(a.leverage(*xi, p_tau)?));
            }
        }
        out.write("allocations.csv", &alloc)?;
    }
    Ok(true)
}

#[derive(Serialize)]
pub struct Calibration {
    pub covariance: Vec<Vec<f64>>,
    #[serde(flatten)]
    pub factor: LeadingFactor,
}

pub fn calibration(model: &PriceModel) -> Result<Calibration> {
    let PriceModel::BivariateGbm(m) = model else {
        bail!("calibrate-factor needs a bivariate_gbm model");
    };
    let cov = increment_covariance(m);
    let factor = leading_factor(&cov)?;
    let covariance = (0..cov.nrows()).map(|i| cov.row(i).iter().copied().collect()).collect();
    Ok(Calibration { covariance, factor })
}

pub fn leverage_table(accounts: &[CrossMarginAccount], v: &[f64], p_tau: &[f64]) -> Result<String> {
    let zero = vec![0.0; p_tau.len()];
    let mut out = String::from("account_id,factor_leverage,gross_leverage\n");
    for a in accounts {
        let f = a.factor_leverage(&zero, v, p_tau)?;
        let g = a.gross_leverage(&zero, p_tau)?;
        let _ = writeln!(out, "{},{},{}", csv_field(&a.id), fmt17(f), fmt17(g));
    }
    Ok(out)
}

pub fn calibrate_cmd(model: &str, accounts: Option<&Path>, common: &Common) -> Result<bool> {
    let model = io::load_model(model)?;
    let cal = calibration(&model)?;
    let out = OutDir::create(&common.out)?;
    if let Some(path) = accounts {
        let p_tau = model.p_tau();
        let accounts = io::load_cross_accounts(path, &p_tau)?;
        out.write("leverage_table.csv", &leverage_table(&accounts, &cal.factor.v, &p_tau)?)?;
    }
    out.json("calibration.json", &cal)?;
    Ok(true)
}
