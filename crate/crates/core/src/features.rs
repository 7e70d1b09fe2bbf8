//! Causal controller inputs.
//!
//! Both builders take only quantities that exist before frame `t` is
//! encoded: the effective target, the budget state, the base λ, and the
//! previous frame's [`EncodeResult`]. Nothing from the current encode can
//! reach them.

use crate::budget::BudgetState;
use crate::plant::EncodeResult;

/// Floor applied inside every log and ratio denominator.
pub const EPS: f64 = 1e-9;

pub const BUDGET_FEATURES: usize = 5;
pub const CODING_STATS: usize = 4;

/// `[log r_eff, log(r̂_{t−1}/r_eff), E_{t−1}/r_eff, p_t, log(λ_base/λ_max)]`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetFeatures(pub [f64; BUDGET_FEATURES]);

/// `[r̂mv_{t−1}/r_eff, r̂res_{t−1}/r_eff, ρmv_{t−1}, log d_warp_{t−1}]`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodingStats(pub [f64; CODING_STATS]);

fn safe_ln(x: f64) -> f64 {
    x.max(EPS).ln()
}

pub fn build_budget_features(
    r_eff: f64,
    prev_rate: f64,
    budget: &BudgetState,
    lambda_base: f64,
    lambda_max: f64,
) -> BudgetFeatures {
    let denom = r_eff.max(EPS);
    BudgetFeatures([
        safe_ln(r_eff),
        safe_ln(prev_rate) - safe_ln(r_eff),
        budget.deviation / denom,
        budget.progress(),
        safe_ln(lambda_base) - safe_ln(lambda_max),
    ])
}

pub fn build_coding_stats(prev: &EncodeResult, r_eff: f64) -> CodingStats {
    let denom = r_eff.max(EPS);
    CodingStats([
        prev.bpp_mv / denom,
        prev.bpp_res / denom,
        prev.motion_sparsity,
        safe_ln(prev.warp_error),
    ])
}
