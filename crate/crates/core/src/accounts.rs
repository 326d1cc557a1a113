//! Account state, equity, shortfall, leverage, bankruptcy price and the
//! directional bounds that make a reduction admissible.
//!
//! Equity is never stored. It is recomputed from `(q, p_entry, margin)` at
//! the ADL price, so a wash trade that moves P&L between entry price and
//! margin cannot change any quantity derived here.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, domain, AdlError, Result};

fn check_solvent(id: &str, equity: f64, margin: f64) -> Result<()> {
    if equity > 1e-9 * (1.0 + margin.abs()) {
        Ok(())
    } else {
        Err(AdlError::Insolvent {
            id: id.to_string(),
            equity,
        })
    }
}

/// A short position in one asset under isolated margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleAssetAccount {
    pub id: String,
    pub q: f64,
    pub p_entry: f64,
    pub margin: f64,
}

impl SingleAssetAccount {
    pub fn new(id: impl Into<String>, q: f64, p_entry: f64, margin: f64, p_tau: f64) -> Result<Self> {
        let acct = Self {
            id: id.into(),
            q,
            p_entry,
            margin,
        };
        acct.validate(p_tau)?;
        Ok(acct)
    }

    /// Build from a stated equity by back-solving a consistent entry price.
    pub fn from_equity(id: impl Into<String>, q: f64, equity: f64, margin: f64, p_tau: f64) -> Result<Self> {
        let id = id.into();
        let p_entry = if q > 0.0 {
            p_tau + (equity - margin) / q
        } else if (equity - margin).abs() <= 1e-12 * (1.0 + margin.abs()) {
            p_tau
        } else {
            return Err(domain(format!(
                "account {id}: a flat account must have equity equal to its margin"
            )));
        };
        Self::new(id, q, p_entry, margin, p_tau)
    }

    pub fn validate(&self, p_tau: f64) -> Result<()> {
        if !(self.q >= 0.0 && self.q.is_finite()) {
            return Err(domain(format!("account {}: short size {} must be >= 0", self.id, self.q)));
        }
        if !(self.margin >= 0.0 && self.p_entry.is_finite()) {
            return Err(domain(format!("account {}: margin must be >= 0", self.id)));
        }
        check_solvent(&self.id, self.equity(p_tau), self.margin)
    }

    pub fn equity(&self, p_tau: f64) -> f64 {
        self.q * (self.p_entry - p_tau) + self.margin
    }

    /// Equity at terminal price `p` after buying back `x` units at `p_tau`.
    pub fn equity_at(&self, x: f64, p: f64, p_tau: f64) -> f64 {
        self.equity(p_tau) + (self.q - x) * (p_tau - p)
    }

    pub fn shortfall(&self, x: f64, p: f64, p_tau: f64) -> f64 {
        (-self.equity_at(x, p, p_tau)).max(0.0)
    }

    fn check_reduction(&self, x: f64) -> Result<()> {
        if (0.0..=self.q).contains(&x) {
            Ok(())
        } else {
            Err(domain(format!(
                "account {}: reduction {x} outside [0, {}]",
                self.id, self.q
            )))
        }
    }

    /// Residual notional over equity, `p_tau (q - x) / E`.
    pub fn leverage(&self, x: f64, p_tau: f64) -> Result<f64> {
        self.check_reduction(x)?;
        Ok(p_tau * (self.q - x) / self.equity(p_tau))
    }

    /// Terminal price at which equity hits zero; `+inf` once fully closed.
    pub fn bankruptcy_price(&self, x: f64, p_tau: f64) -> Result<f64> {
        self.check_reduction(x)?;
        if x >= self.q {
            Ok(f64::INFINITY)
        } else {
            Ok(p_tau + self.equity(p_tau) / (self.q - x))
        }
    }

    /// P&L as a fraction of entry price, positive when the short is in profit.
    pub fn percentage_pnl(&self, p_tau: f64) -> f64 {
        (self.p_entry - p_tau) / self.p_entry
    }
}

/// A signed multi-asset portfolio under cross margin (positive = short).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossMarginAccount {
    pub id: String,
    pub q: Vec<f64>,
    pub p_entry: Vec<f64>,
    pub margin: f64,
}

impl CrossMarginAccount {
    pub fn new(id: impl Into<String>, q: Vec<f64>, p_entry: Vec<f64>, margin: f64, p_tau: &[f64]) -> Result<Self> {
        let acct = Self {
            id: id.into(),
            q,
            p_entry,
            margin,
        };
        acct.validate(p_tau)?;
        Ok(acct)
    }

    /// Build from a stated equity; the synthetic entry prices are the
    /// minimum-norm offset `p_tau + (E - m) q / |q|²`.
    pub fn from_equity(id: impl Into<String>, q: Vec<f64>, equity: f64, margin: f64, p_tau: &[f64]) -> Result<Self> {
        let id = id.into();
        check_dim(p_tau.len(), q.len())?;
        let nrm2: f64 = q.iter().map(|x| x * x).sum();
        let gap = equity - margin;
        let p_entry = if nrm2 > 0.0 {
            p_tau.iter().zip(&q).map(|(p, qk)| p + gap * qk / nrm2).collect()
        } else if gap.abs() <= 1e-12 * (1.0 + margin.abs()) {
            p_tau.to_vec()
        } else {
            return Err(domain(format!(
                "account {id}: a flat account must have equity equal to its margin"
            )));
        };
        Self::new(id, q, p_entry, margin, p_tau)
    }

    pub fn validate(&self, p_tau: &[f64]) -> Result<()> {
        check_dim(p_tau.len(), self.q.len())?;
        check_dim(p_tau.len(), self.p_entry.len())?;
        if !(self.margin >= 0.0) || self.q.iter().chain(&self.p_entry).any(|v| !v.is_finite()) {
            return Err(domain(format!("account {}: non-finite or negative fields", self.id)));
        }
        check_solvent(&self.id, self.equity(p_tau), self.margin)
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn equity(&self, p_tau: &[f64]) -> f64 {
        dot_diff(&self.q, &self.p_entry, p_tau) + self.margin
    }

    /// `E + (q - x)ᵀ(p_tau - p)`.
    pub fn equity_at(&self, x: &[f64], p: &[f64], p_tau: &[f64]) -> Result<f64> {
        let d = self.dim();
        check_dim(d, x.len())?;
        check_dim(d, p.len())?;
        check_dim(d, p_tau.len())?;
        let residual: f64 = (0..d).map(|k| (self.q[k] - x[k]) * (p_tau[k] - p[k])).sum();
        Ok(self.equity(p_tau) + residual)
    }

    pub fn shortfall(&self, x: &[f64], p: &[f64], p_tau: &[f64]) -> Result<f64> {
        Ok((-self.equity_at(x, p, p_tau)?).max(0.0))
    }

    /// `Σ_k |p_tau^k (q^k - x^k)| / E`.
    pub fn gross_leverage(&self, x: &[f64], p_tau: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), p_tau.len())?;
        let gross: f64 = (0..self.dim()).map(|k| (p_tau[k] * (self.q[k] - x[k])).abs()).sum();
        Ok(gross / self.equity(p_tau))
    }

    /// `vᵀ(q - x) / E`.
    pub fn factor_leverage(&self, x: &[f64], v: &[f64], p_tau: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), v.len())?;
        let exposure: f64 = (0..self.dim()).map(|k| v[k] * (self.q[k] - x[k])).sum();
        Ok(exposure / self.equity(p_tau))
    }

    /// Reductions allowed only toward zero and only along the sign of `Q`.
    pub fn directional_bounds(&self, q_target: &[f64]) -> Result<BoundsBox> {
        check_dim(self.dim(), q_target.len())?;
        let mut lower = vec![0.0; self.dim()];
        let mut upper = vec![0.0; self.dim()];
        for k in 0..self.dim() {
            if q_target[k] > 0.0 {
                upper[k] = self.q[k].max(0.0);
            } else if q_target[k] < 0.0 {
                lower[k] = self.q[k].min(0.0);
            }
        }
        Ok(BoundsBox { lower, upper })
    }
}

fn dot_diff(q: &[f64], a: &[f64], b: &[f64]) -> f64 {
    q.iter().zip(a.iter().zip(b)).map(|(q, (a, b))| q * (a - b)).sum()
}

/// Componentwise box `l ≤ x ≤ u` with `l ≤ 0 ≤ u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoundsBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_dim(lower.len(), upper.len())?;
        for (l, u) in lower.iter().zip(&upper) {
            if !(l.is_finite() && u.is_finite() && *l <= 0.0 && *u >= 0.0) {
                return Err(domain(format!("bounds [{l}, {u}] must satisfy l <= 0 <= u")));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (l, u))| *x >= l - tol && *x <= u + tol)
    }

    pub fn project(&self, x: &mut [f64]) {
        for (k, xk) in x.iter_mut().enumerate() {
            *xk = xk.clamp(self.lower[k], self.upper[k]);
        }
    }

    /// Coordinates with room to move.
    pub fn free_coords(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&k| self.upper[k] > self.lower[k]).collect()
    }

    pub fn width_l1(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).sum()
    }
}
