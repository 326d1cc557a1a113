//! Reference instances and brute-force oracles used to check the solvers.
//!
//! Nothing here calls into the code under test for the quantity being
//! checked: losses, CVaRs, eigenpairs and optima are recomputed from the raw
//! account fields by enumeration or closed forms.

pub mod fixtures;
pub mod oracles;
