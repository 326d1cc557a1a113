//! Risk-optimal auto-deleveraging (ADL) allocation.
//!
//! * [`single_asset`]: isolated-margin water-filling on leverage and the
//!   expected-loss, CVaR and spectral objectives it minimizes.
//! * [`policies`]: queue and pro-rata reference policies with the
//!   manipulation-resistance property harness.
//! * [`multi_asset`]: cross-margin expected-loss solver by dual decomposition.
//! * [`single_factor`]: clipped water-filling on factor leverage.

// `!(x > 0.0)` rejects NaN along with the out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod accounts;
pub mod error;
pub mod market_model;
pub mod multi_asset;
pub mod normal;
mod numeric;
pub mod policies;
pub mod single_asset;
pub mod single_factor;

pub use accounts::{BoundsBox, CrossMarginAccount, SingleAssetAccount};
pub use error::{AdlError, IterRecord, Result};
pub use market_model::{
    BivariateGbmModel, EpsilonLaw, GbmModel, PriceLaw, PriceModel, ScenarioSet, ShiftedExponential,
    SingleFactorModel,
};
pub use single_asset::{RiskSpec, SingleAssetLaw, SolveReport, WaterfillResult};
