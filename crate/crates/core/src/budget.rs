//! Mini-GOP budget allocation.
//!
//! All quantities are bpp or bpp-sums (bpp × frame count), so the budget
//! equations stay dimensionally consistent without a resolution. Only
//! P-frames are accounted; I-frames never touch [`BudgetState`].

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    /// Sequence-level target, bpp.
    pub target_rate: f64,
    /// Horizon (frames) over which accumulated deviation is amortized.
    pub smoothing_window: usize,
    pub minigop_len: usize,
    pub r_min: f64,
    pub r_max: f64,
}

impl BudgetConfig {
    /// `N_m = 4`, `SW = 40`, and effective-target clip `[R_s/8, 8·R_s]`.
    pub fn with_defaults(target_rate: f64) -> Self {
        Self {
            target_rate,
            smoothing_window: 40,
            minigop_len: 4,
            r_min: target_rate / 8.0,
            r_max: target_rate * 8.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_rate > 0.0 && self.target_rate.is_finite()) {
            return Err(invalid("target_rate", format!("must be > 0, got {}", self.target_rate)));
        }
        if !(self.r_min > 0.0 && self.r_min < self.r_max && self.r_max.is_finite()) {
            return Err(invalid(
                "r_min",
                format!("need 0 < r_min < r_max, got [{}, {}]", self.r_min, self.r_max),
            ));
        }
        if self.smoothing_window == 0 {
            return Err(invalid("smoothing_window", "must be >= 1"));
        }
        if self.minigop_len == 0 {
            return Err(invalid("minigop_len", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BudgetState {
    pub coded_p_frames: usize,
    /// Sum of coded P-frame bpp.
    pub accumulated_bits: f64,
    pub minigop_budget: f64,
    pub spent_in_minigop: f64,
    pub frames_left_in_minigop: usize,
    /// Length of the open mini-GOP; equals the configured length except
    /// for a mini-GOP truncated by a GOP boundary.
    pub current_minigop_len: usize,
    /// Sequence-wide sum of `(actual − effective target)`.
    pub deviation: f64,
}

impl BudgetState {
    /// Position of the next frame inside the open mini-GOP, in `[0, 1)`.
    pub fn progress(&self) -> f64 {
        if self.current_minigop_len == 0 {
            return 0.0;
        }
        (self.current_minigop_len - self.frames_left_in_minigop) as f64
            / self.current_minigop_len as f64
    }

    pub fn needs_minigop(&self) -> bool {
        self.frames_left_in_minigop == 0
    }
}

/// Open a full-length mini-GOP.
pub fn open_minigop(cfg: &BudgetConfig, state: &BudgetState) -> BudgetState {
    open_minigop_with_len(cfg, state, cfg.minigop_len)
}

/// Open a mini-GOP of `len` frames (`1 ≤ len ≤ minigop_len`). The budget
/// may be nonpositive after heavy overspending; the effective-target clip
/// floors it.
pub fn open_minigop_with_len(cfg: &BudgetConfig, state: &BudgetState, len: usize) -> BudgetState {
    debug_assert!(state.frames_left_in_minigop == 0, "previous mini-GOP still open");
    let len = len.clamp(1, cfg.minigop_len);
    let sw = cfg.smoothing_window as f64;
    let per_frame = (cfg.target_rate * (state.coded_p_frames as f64 + sw) - state.accumulated_bits) / sw;
    BudgetState {
        minigop_budget: per_frame * len as f64,
        spent_in_minigop: 0.0,
        frames_left_in_minigop: len,
        current_minigop_len: len,
        ..*state
    }
}

/// Remaining budget spread over the remaining frames, clipped to
/// `[r_min, r_max]`.
pub fn effective_target(cfg: &BudgetConfig, state: &BudgetState) -> f64 {
    debug_assert!(state.frames_left_in_minigop >= 1);
    let left = state.frames_left_in_minigop.max(1) as f64;
    ((state.minigop_budget - state.spent_in_minigop) / left).clamp(cfg.r_min, cfg.r_max)
}

pub fn record_p_frame(_cfg: &BudgetConfig, state: &BudgetState, bpp_actual: f64, r_eff: f64) -> BudgetState {
    debug_assert!(state.frames_left_in_minigop >= 1);
    BudgetState {
        coded_p_frames: state.coded_p_frames + 1,
        accumulated_bits: state.accumulated_bits + bpp_actual,
        spent_in_minigop: state.spent_in_minigop + bpp_actual,
        frames_left_in_minigop: state.frames_left_in_minigop.saturating_sub(1),
        deviation: state.deviation + (bpp_actual - r_eff),
        ..*state
    }
}
