//! Terminal-price laws, their quantiles and tail functionals, scenario
//! generation, and one-factor calibration.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_level, domain, Result};
use crate::normal;

/// A scalar terminal-price law for a single asset.
///
/// Every law here is atomless, so the `β`-quantile of any nondecreasing
/// function of the price is that function evaluated at the price quantile.
pub trait PriceLaw: Send + Sync {
    /// Left `β`-quantile of the terminal price.
    fn quantile(&self, beta: f64) -> Result<f64>;

    /// `E[(p_T - k)_+]` for any real `k`.
    fn expected_excess(&self, k: f64) -> f64;

    /// `P(p_T > c)`.
    fn survival(&self, c: f64) -> f64;

    fn mean(&self) -> f64;

    /// `E[p_T | p_T >= p_β]`.
    fn tail_mean(&self, beta: f64) -> Result<f64> {
        let p_beta = self.quantile(beta)?;
        Ok(p_beta + self.expected_excess(p_beta) / (1.0 - beta))
    }

    /// `E[(p_T - p_tau) 1{p_T > c}]`.
    fn tail_excess_over(&self, p_tau: f64, c: f64) -> f64 {
        if c == f64::INFINITY {
            return 0.0;
        }
        self.expected_excess(c) + (c - p_tau) * self.survival(c)
    }
}

/// Geometric Brownian motion over a fixed horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbmModel {
    pub p_tau: f64,
    pub mu: f64,
    pub sigma: f64,
    pub delta: f64,
}

impl GbmModel {
    pub fn new(p_tau: f64, mu: f64, sigma: f64, delta: f64) -> Result<Self> {
        let model = Self {
            p_tau,
            mu,
            sigma,
            delta,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_tau > 0.0 && self.sigma > 0.0 && self.delta > 0.0 && self.mu.is_finite()) {
            return Err(domain(format!(
                "GBM requires p_tau > 0, sigma > 0, delta > 0 (got {self:?})"
            )));
        }
        Ok(())
    }

    fn vol(&self) -> f64 {
        self.sigma * self.delta.sqrt()
    }

    fn forward(&self) -> f64 {
        self.p_tau * (self.mu * self.delta).exp()
    }

    /// `d₂(K)`: the standardized log-distance of `K` below the median drift.
    fn d2(&self, k: f64) -> f64 {
        ((self.p_tau / k).ln() + (self.mu - 0.5 * self.sigma * self.sigma) * self.delta) / self.vol()
    }

    pub fn call_expectation(&self, strike: f64) -> Result<f64> {
        if !(strike > 0.0) {
            return Err(domain(format!("strike {strike} must be positive")));
        }
        Ok(self.expected_excess(strike))
    }

    pub fn sample_one<R: rand::Rng>(&self, rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        self.p_tau * ((self.mu - 0.5 * self.sigma * self.sigma) * self.delta + self.vol() * z).exp()
    }
}

impl PriceLaw for GbmModel {
    fn quantile(&self, beta: f64) -> Result<f64> {
        check_level(beta)?;
        let z = normal::quantile(beta);
        Ok(self.p_tau * ((self.mu - 0.5 * self.sigma * self.sigma) * self.delta + self.vol() * z).exp())
    }

    fn expected_excess(&self, k: f64) -> f64 {
        if k <= 0.0 {
            return self.forward() - k;
        }
        let d2 = self.d2(k);
        let d1 = d2 + self.vol();
        (self.forward() * normal::cdf(d1) - k * normal::cdf(d2)).max(0.0)
    }

    fn survival(&self, c: f64) -> f64 {
        if c <= 0.0 {
            1.0
        } else {
            normal::cdf(self.d2(c))
        }
    }

    fn mean(&self) -> f64 {
        self.forward()
    }

    fn tail_mean(&self, beta: f64) -> Result<f64> {
        check_level(beta)?;
        let z = normal::quantile(beta);
        Ok(self.forward() * normal::cdf(self.vol() - z) / (1.0 - beta))
    }
}

pub fn gbm_quantile(model: &GbmModel, beta: f64) -> Result<f64> {
    model.quantile(beta)
}

pub fn gbm_tail_mean(model: &GbmModel, beta: f64) -> Result<f64> {
    model.tail_mean(beta)
}

pub fn gbm_call_expectation(model: &GbmModel, strike: f64) -> Result<f64> {
    model.call_expectation(strike)
}

/// `p_T = p0 + Y / rate` with `Y ~ Exp(1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftedExponential {
    pub p0: f64,
    pub rate: f64,
}

impl ShiftedExponential {
    pub fn new(p0: f64, rate: f64) -> Result<Self> {
        if !(rate > 0.0 && p0.is_finite()) {
            return Err(domain(format!("exponential rate {rate} must be positive")));
        }
        Ok(Self { p0, rate })
    }
}

impl PriceLaw for ShiftedExponential {
    fn quantile(&self, beta: f64) -> Result<f64> {
        check_level(beta)?;
        Ok(self.p0 - (-beta).ln_1p() / self.rate)
    }

    fn expected_excess(&self, k: f64) -> f64 {
        if k >= self.p0 {
            (-self.rate * (k - self.p0)).exp() / self.rate
        } else {
            self.p0 - k + 1.0 / self.rate
        }
    }

    fn survival(&self, c: f64) -> f64 {
        if c < self.p0 {
            1.0
        } else {
            (-self.rate * (c - self.p0)).exp()
        }
    }

    fn mean(&self) -> f64 {
        self.p0 + 1.0 / self.rate
    }
}

/// Correlated two-asset GBM with zero drift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BivariateGbmModel {
    pub p_tau: [f64; 2],
    pub sigma_ann: [f64; 2],
    pub rho: f64,
    pub delta: f64,
}

impl BivariateGbmModel {
    pub fn new(p_tau: [f64; 2], sigma_ann: [f64; 2], rho: f64, delta: f64) -> Result<Self> {
        let model = Self {
            p_tau,
            sigma_ann,
            rho,
            delta,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.p_tau.iter().all(|p| *p > 0.0)
            && self.sigma_ann.iter().all(|s| *s > 0.0)
            && self.rho.abs() <= 1.0
            && self.delta >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(domain(format!("invalid bivariate GBM parameters {self:?}")))
        }
    }

    pub fn sample_one<R: rand::Rng>(&self, rng: &mut R) -> [f64; 2] {
        let z1: f64 = StandardNormal.sample(rng);
        let w: f64 = StandardNormal.sample(rng);
        let z2 = self.rho * z1 + (1.0 - self.rho * self.rho).sqrt() * w;
        let sd = self.delta.sqrt();
        let leg = |k: usize, z: f64| {
            let s = self.sigma_ann[k];
            self.p_tau[k] * (-0.5 * s * s * self.delta + s * sd * z).exp()
        };
        [leg(0, z1), leg(1, z2)]
    }
}

/// Covariance of the price increment `p_T - p_tau` under the bivariate GBM.
pub fn increment_covariance(model: &BivariateGbmModel) -> DMatrix<f64> {
    let [p1, p2] = model.p_tau;
    let [s1, s2] = model.sigma_ann;
    let dt = model.delta;
    let c11 = p1 * p1 * (s1 * s1 * dt).exp_m1();
    let c22 = p2 * p2 * (s2 * s2 * dt).exp_m1();
    let c12 = p1 * p2 * (model.rho * s1 * s2 * dt).exp_m1();
    DMatrix::from_row_slice(2, 2, &[c11, c12, c12, c22])
}

/// Principal eigenpair of a covariance matrix and the induced factor loading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadingFactor {
    pub lambda1: f64,
    pub u1: Vec<f64>,
    pub v: Vec<f64>,
}

/// Largest eigenpair of a symmetric PSD matrix, signed so that the
/// largest-magnitude entry of `u1` is positive, with `v = sqrt(lambda1) u1`.
pub fn leading_factor(cov: &DMatrix<f64>) -> Result<LeadingFactor> {
    let n = cov.nrows();
    if n == 0 || cov.ncols() != n {
        return Err(domain("covariance must be a non-empty square matrix"));
    }
    let scale = cov.amax().max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in 0..i {
            if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 * scale {
                return Err(domain(format!("covariance is not symmetric at ({i}, {j})")));
            }
        }
    }
    let eig = SymmetricEigen::new(cov.clone());
    let top = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .ok_or_else(|| domain("empty spectrum"))?;
    let lambda1 = eig.eigenvalues[top];
    let mut u1: Vec<f64> = eig.eigenvectors.column(top).iter().copied().collect();
    let norm = u1.iter().map(|x| x * x).sum::<f64>().sqrt();
    u1.iter_mut().for_each(|x| *x /= norm);
    let pivot = u1
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    if u1[pivot] < 0.0 {
        u1.iter_mut().for_each(|x| *x = -*x);
    }
    let root = lambda1.max(0.0).sqrt();
    let v = u1.iter().map(|x| root * x).collect();
    Ok(LeadingFactor { lambda1, u1, v })
}

/// Law of the scalar factor shock `ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EpsilonLaw {
    #[default]
    StandardNormal,
    Laplace {
        scale: f64,
    },
    Logistic {
        scale: f64,
    },
}

impl EpsilonLaw {
    pub fn pdf(&self, e: f64) -> f64 {
        match *self {
            EpsilonLaw::StandardNormal => normal::pdf(e),
            EpsilonLaw::Laplace { scale } => (-e.abs() / scale).exp() / (2.0 * scale),
            EpsilonLaw::Logistic { scale } => {
                let t = (-e.abs() / scale).exp();
                t / (scale * (1.0 + t) * (1.0 + t))
            }
        }
    }

    /// Radius beyond which the remaining mass and first moment are below
    /// double precision resolution.
    pub fn support_radius(&self) -> f64 {
        match *self {
            EpsilonLaw::StandardNormal => 40.0,
            EpsilonLaw::Laplace { scale } | EpsilonLaw::Logistic { scale } => 800.0 * scale,
        }
    }

    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            EpsilonLaw::StandardNormal => StandardNormal.sample(rng),
            EpsilonLaw::Laplace { scale } => {
                let e: f64 = Exp1.sample(rng);
                if rng.random::<bool>() {
                    scale * e
                } else {
                    -scale * e
                }
            }
            EpsilonLaw::Logistic { scale } => {
                let u: f64 = rng.random_range(f64::EPSILON..1.0);
                scale * (u / (1.0 - u)).ln()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            EpsilonLaw::StandardNormal => Ok(()),
            EpsilonLaw::Laplace { scale } | EpsilonLaw::Logistic { scale } if scale > 0.0 => Ok(()),
            _ => Err(domain(format!("epsilon law scale must be positive ({self:?})"))),
        }
    }
}

/// Additive one-factor model `p_T = p_tau + ε v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleFactorModel {
    pub p_tau: Vec<f64>,
    pub v: Vec<f64>,
    #[serde(default)]
    pub epsilon: EpsilonLaw,
}

impl SingleFactorModel {
    pub fn new(p_tau: Vec<f64>, v: Vec<f64>, epsilon: EpsilonLaw) -> Result<Self> {
        let model = Self { p_tau, v, epsilon };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        check_dim(self.p_tau.len(), self.v.len())?;
        if self.v.iter().all(|x| *x == 0.0) {
            return Err(domain("factor loading v must have a nonzero component"));
        }
        self.epsilon.validate()
    }

    pub fn dim(&self) -> usize {
        self.p_tau.len()
    }
}

/// Equally or unequally weighted terminal price scenarios (S x d).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    prices: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl ScenarioSet {
    pub fn new(prices: Vec<Vec<f64>>, probs: Vec<f64>) -> Result<Self> {
        if prices.is_empty() {
            return Err(domain("scenario set must contain at least one scenario"));
        }
        check_dim(prices.len(), probs.len())?;
        let d = prices[0].len();
        for row in &prices {
            check_dim(d, row.len())?;
        }
        if probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(domain("scenario probabilities must be nonnegative"));
        }
        let total: f64 = probs.iter().sum();
        // summation error grows with the number of terms
        if (total - 1.0).abs() > 1e-12 + 4.0 * f64::EPSILON * probs.len() as f64 {
            return Err(domain(format!("scenario probabilities sum to {total}, not 1")));
        }
        Ok(Self { prices, probs })
    }

    pub fn equiprobable(prices: Vec<Vec<f64>>) -> Result<Self> {
        let n = prices.len();
        let w = 1.0 / n.max(1) as f64;
        Self::new(prices, vec![w; n])
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prices[0].len()
    }

    pub fn prices(&self) -> &[Vec<f64>] {
        &self.prices
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.prices.iter().map(Vec::as_slice).zip(self.probs.iter().copied())
    }

    /// CSV with header `prob,p1,...,pd` and 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("prob");
        for k in 1..=self.dim() {
            out.push_str(&format!(",p{k}"));
        }
        out.push('\n');
        for (row, p) in self.iter() {
            out.push_str(&fmt17(p));
            for x in row {
                out.push(',');
                out.push_str(&fmt17(*x));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| domain("empty scenario CSV"))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"prob") || cols.len() < 2 {
            return Err(domain(format!("bad scenario CSV header `{header}`")));
        }
        for (k, c) in cols.iter().enumerate().skip(1) {
            if *c != format!("p{k}") {
                return Err(domain(format!("bad scenario CSV column `{c}`")));
            }
        }
        let mut prices = Vec::new();
        let mut probs = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let vals = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| domain(format!("scenario CSV row {}: {e}", lineno + 1)))?;
            check_dim(cols.len(), vals.len())?;
            probs.push(vals[0]);
            prices.push(vals[1..].to_vec());
        }
        Self::new(prices, probs)
    }
}

/// Format with 17 significant digits.
pub fn fmt17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

/// Generative price models understood by the sampler and the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriceModel {
    Gbm(GbmModel),
    BivariateGbm(BivariateGbmModel),
    SingleFactor(SingleFactorModel),
    ShiftedExponential(ShiftedExponential),
}

impl PriceModel {
    pub fn dim(&self) -> usize {
        match self {
            PriceModel::Gbm(_) | PriceModel::ShiftedExponential(_) => 1,
            PriceModel::BivariateGbm(_) => 2,
            PriceModel::SingleFactor(m) => m.dim(),
        }
    }

    pub fn p_tau(&self) -> Vec<f64> {
        match self {
            PriceModel::Gbm(m) => vec![m.p_tau],
            PriceModel::ShiftedExponential(m) => vec![m.p0],
            PriceModel::BivariateGbm(m) => m.p_tau.to_vec(),
            PriceModel::SingleFactor(m) => m.p_tau.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PriceModel::Gbm(m) => m.validate(),
            PriceModel::BivariateGbm(m) => m.validate(),
            PriceModel::SingleFactor(m) => m.validate(),
            PriceModel::ShiftedExponential(m) => ShiftedExponential::new(m.p0, m.rate).map(|_| ()),
        }
    }
}

/// Draw `n` equiprobable scenarios; `(model, n, seed)` fixes the output bits.
pub fn sample(model: &PriceModel, n: usize, seed: u64) -> Result<ScenarioSet> {
    if n == 0 {
        return Err(domain("sample count must be at least 1"));
    }
    model.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let prices: Vec<Vec<f64>> = match model {
        PriceModel::Gbm(m) => (0..n).map(|_| vec![m.sample_one(&mut rng)]).collect(),
        PriceModel::ShiftedExponential(m) => (0..n)
            .map(|_| {
                let y: f64 = Exp1.sample(&mut rng);
                vec![m.p0 + y / m.rate]
            })
            .collect(),
        PriceModel::BivariateGbm(m) => (0..n).map(|_| m.sample_one(&mut rng).to_vec()).collect(),
        PriceModel::SingleFactor(m) => (0..n)
            .map(|_| {
                let e = m.epsilon.sample(&mut rng);
                m.p_tau.iter().zip(&m.v).map(|(p, v)| p + e * v).collect()
            })
            .collect(),
    };
    ScenarioSet::equiprobable(prices)
}

/// `CVaR_β` of a discrete law: the quantile integral over `[β, 1)` divided
/// by `1 - β`, splitting the atom that straddles level `β`.
pub fn discrete_cvar(values: &[f64], probs: &[f64], beta: f64) -> Result<f64> {
    check_dim(values.len(), probs.len())?;
    if values.is_empty() {
        return Err(domain("CVaR of an empty law"));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(domain(format!("CVaR level {beta} must lie in [0, 1)")));
    }
    if probs.iter().any(|p| !(*p >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(domain("CVaR probabilities must form a distribution"));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let tail = 1.0 - beta;
    let mut remaining = tail;
    let mut acc = 0.0;
    for i in order {
        if remaining <= 0.0 {
            break;
        }
        let w = probs[i].min(remaining);
        acc += w * values[i];
        remaining -= w;
    }
    Ok(acc / tail)
}
