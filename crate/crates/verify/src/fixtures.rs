//! Published instances, rebuilt from their raw fields.

use adl_core::market_model::{BivariateGbmModel, GbmModel, ScenarioSet, ShiftedExponential};
use adl_core::{CrossMarginAccount, SingleAssetAccount};

pub const BTC_P_TAU: f64 = 67_000.0;
pub const HORIZON: f64 = 10.0 / 365.0;

/// The four isolated BTC shorts behind the leverage-draining figures.
pub fn btc_shorts() -> Vec<SingleAssetAccount> {
    [(8.0, 71e3, 146e3), (10.0, 72e3, 178.8e3), (8.0, 70e3, 171.8e3), (7.0, 69.5e3, 83.5e3)]
        .iter()
        .enumerate()
        .map(|(i, &(q, p, m))| SingleAssetAccount::new((i + 1).to_string(), q, p, m, BTC_P_TAU).unwrap())
        .collect()
}

/// Zero drift, unit annual volatility, ten-day horizon.
pub fn btc_gbm() -> GbmModel {
    GbmModel::new(BTC_P_TAU, 0.0, 1.0, HORIZON).unwrap()
}

pub const PAIR_P_TAU: [f64; 2] = [67_000.0, 1_900.0];

/// Raw BTC/ETH rows `(q_BTC, q_ETH, margin, equity)` with dollar amounts in thousands.
pub const PAIR_ROWS: [(f64, f64, f64, f64); 4] = [
    (8.0, 323.0, 137.5, 242.1),
    (10.0, -38.7, 85.3, 143.0),
    (8.0, 326.2, 75.4, 180.6),
    (7.0, -190.0, 43.9, 116.9),
];

pub fn pair_accounts() -> Vec<CrossMarginAccount> {
    PAIR_ROWS
        .iter()
        .enumerate()
        .map(|(i, &(qb, qe, m, e))| {
            CrossMarginAccount::from_equity((i + 1).to_string(), vec![qb, qe], e * 1e3, m * 1e3, &PAIR_P_TAU).unwrap()
        })
        .collect()
}

pub fn pair_model() -> BivariateGbmModel {
    BivariateGbmModel::new(PAIR_P_TAU, [0.6, 0.75], 0.85, HORIZON).unwrap()
}

/// Two cross-margin accounts and three scenarios on which the CVaR optimum
/// moves with the level.
pub fn level_shift_instance() -> (Vec<CrossMarginAccount>, ScenarioSet, Vec<f64>) {
    let p = vec![1.0, 1.0];
    let a1 = CrossMarginAccount::new("1", vec![10.0, 0.0], vec![1.0, 1.0], 18.0, &p).unwrap();
    let a2 = CrossMarginAccount::new("2", vec![10.0, 10.0], vec![1.0, 1.0], 40.0, &p).unwrap();
    let s = ScenarioSet::new(vec![vec![1.0, 1.0], vec![4.0, 1.0], vec![2.0, 5.0]], vec![0.9, 0.05, 0.05]).unwrap();
    (vec![a1, a2], s, p)
}

/// Two single-asset accounts that can each only absorb their own asset.
pub fn split_assets_instance() -> (Vec<CrossMarginAccount>, Vec<f64>) {
    let p = vec![1.0, 1.0];
    let a1 = CrossMarginAccount::from_equity("1", vec![1.0, 0.0], 1.0, 0.0, &p).unwrap();
    let a2 = CrossMarginAccount::from_equity("2", vec![0.0, 1.0], 1.0, 0.0, &p).unwrap();
    (vec![a1, a2], p)
}

/// Identical accounts under a shifted exponential price, where every
/// split of a unit budget has the same CVaR at level one half.
pub fn exponential_twins() -> (Vec<SingleAssetAccount>, ShiftedExponential, f64) {
    let accounts = (1..=2)
        .map(|i| SingleAssetAccount::new(i.to_string(), 4.0, 1.0, 1.0, 1.0).unwrap())
        .collect();
    (accounts, ShiftedExponential::new(1.0, 1.0).unwrap(), 1.0)
}
