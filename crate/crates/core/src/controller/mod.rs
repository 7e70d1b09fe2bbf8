//! Dual-branch GRU adjustment controller.
//!
//! Budget features and coding statistics are embedded by separate two-layer
//! MLPs, run through separate GRU cells, and fused by a sigmoid gate:
//!
//! ```text
//! x_b = embed_b(b_t)            x_c = embed_c(c_t)
//! h_b' = gru_b(x_b, h_b)        h_c' = gru_c(x_c, h_c)
//! g = σ(gate([h_b'; h_c']))     h = g ⊙ h_c' + (1 − g) ⊙ h_b'
//! Δ = δ_max · tanh(head(h))
//! ```
//!
//! `Δ` is a bounded log-domain residual on top of the PI output; see
//! [`compose_lambda`].
//!
//! All parameters live in one flat buffer laid out by [`TENSORS`]. Gradients
//! and optimizer moments use the same layout.

mod grad;
mod io;

pub use grad::StepCache;
pub use io::{load_weights, read_weights, save_weights, write_weights, FORMAT_NAME, FORMAT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::{BudgetFeatures, CodingStats, BUDGET_FEATURES, CODING_STATS};
use crate::pi::PiBounds;

pub const HIDDEN: usize = 64;
pub const DEFAULT_DELTA_MAX: f64 = 0.20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: &'static str,
    pub shape: &'static [usize],
}

impl TensorInfo {
    pub const fn len(&self) -> usize {
        let mut n = 1;
        let mut i = 0;
        while i < self.shape.len() {
            n *= self.shape[i];
            i += 1;
        }
        n
    }

    /// Module the tensor belongs to, e.g. `gru_b`.
    pub fn group(&self) -> &'static str {
        self.name.split('.').next().unwrap_or(self.name)
    }
}

const H: usize = HIDDEN;

macro_rules! tensors {
    ($($name:literal => [$($d:expr),+]),* $(,)?) => {
        pub const TENSORS: &[TensorInfo] = &[$(TensorInfo { name: $name, shape: &[$($d),+] }),*];
    };
}

tensors! {
    "embed_b.l1.weight" => [H, BUDGET_FEATURES],
    "embed_b.l1.bias" => [H],
    "embed_b.l2.weight" => [H, H],
    "embed_b.l2.bias" => [H],
    "embed_c.l1.weight" => [H, CODING_STATS],
    "embed_c.l1.bias" => [H],
    "embed_c.l2.weight" => [H, H],
    "embed_c.l2.bias" => [H],
    "gru_b.w_z" => [H, H],
    "gru_b.w_r" => [H, H],
    "gru_b.w_h" => [H, H],
    "gru_b.u_z" => [H, H],
    "gru_b.u_r" => [H, H],
    "gru_b.u_h" => [H, H],
    "gru_b.b_z" => [H],
    "gru_b.b_r" => [H],
    "gru_b.b_h" => [H],
    "gru_c.w_z" => [H, H],
    "gru_c.w_r" => [H, H],
    "gru_c.w_h" => [H, H],
    "gru_c.u_z" => [H, H],
    "gru_c.u_r" => [H, H],
    "gru_c.u_h" => [H, H],
    "gru_c.b_z" => [H],
    "gru_c.b_r" => [H],
    "gru_c.b_h" => [H],
    "gate.l1.weight" => [H, 2 * H],
    "gate.l1.bias" => [H],
    "gate.l2.weight" => [H, H],
    "gate.l2.bias" => [H],
    "head.weight" => [1, H],
    "head.bias" => [1],
}

// First tensor index of each block.
pub(crate) const EMBED_B: usize = 0;
pub(crate) const EMBED_C: usize = 4;
pub(crate) const GRU_B: usize = 8;
pub(crate) const GRU_C: usize = 17;
pub(crate) const GATE: usize = 26;
pub(crate) const HEAD: usize = 30;

const N_TENSORS: usize = 32;

const fn offsets() -> [usize; N_TENSORS + 1] {
    let mut out = [0; N_TENSORS + 1];
    let mut i = 0;
    while i < N_TENSORS {
        out[i + 1] = out[i] + TENSORS[i].len();
        i += 1;
    }
    out
}

pub(crate) const OFFSETS: [usize; N_TENSORS + 1] = offsets();

/// Total scalar parameter count.
pub const PARAMETER_COUNT: usize = OFFSETS[N_TENSORS];

pub(crate) fn range(tensor: usize) -> std::ops::Range<usize> {
    OFFSETS[tensor]..OFFSETS[tensor + 1]
}

/// Every learnable tensor plus the output bound.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerWeights {
    params: Vec<f64>,
    pub delta_max: f64,
    /// Seed used for initialization; carried into the weight file.
    pub seed: u64,
}

impl ControllerWeights {
    /// Uniform `±1/√fan_in` initialization with a zero head, so the
    /// controller starts out emitting `Δ = 0`.
    pub fn init(seed: u64, delta_max: f64) -> Self {
        let mut w = Self::init_random_head(seed, delta_max);
        w.params[range(HEAD)].fill(0.0);
        w.params[range(HEAD + 1)].fill(0.0);
        w
    }

    /// Like [`init`](Self::init) but the head is also random. Used where a
    /// nonzero signal is needed through every tensor, e.g. gradient checks.
    pub fn init_random_head(seed: u64, delta_max: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; PARAMETER_COUNT];
        let mut fan_in = 1;
        for (i, t) in TENSORS.iter().enumerate() {
            if t.shape.len() == 2 {
                fan_in = t.shape[1];
            }
            // Biases follow their layer's weight; GRU biases see a 64-wide input.
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[range(i)] {
                *p = rng.gen_range(-bound..bound);
            }
        }
        Self {
            params,
            delta_max,
            seed,
        }
    }

    pub fn zeros(delta_max: f64) -> Self {
        Self {
            params: vec![0.0; PARAMETER_COUNT],
            delta_max,
            seed: 0,
        }
    }

    pub(crate) fn from_parts(params: Vec<f64>, delta_max: f64, seed: u64) -> Self {
        debug_assert_eq!(params.len(), PARAMETER_COUNT);
        Self {
            params,
            delta_max,
            seed,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn tensor(&self, index: usize) -> &[f64] {
        &self.params[range(index)]
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.params[range(index)]
    }

    pub fn tensor_by_name(&self, name: &str) -> Option<&[f64]> {
        TENSORS.iter().position(|t| t.name == name).map(|i| self.tensor(i))
    }

    pub fn tensor_by_name_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        TENSORS
            .iter()
            .position(|t| t.name == name)
            .map(move |i| self.tensor_mut(i))
    }

    /// One controller step. Returns the residual, the next hidden state,
    /// and the fusion gate.
    pub fn forward(&self, state: &ControllerState, b: &BudgetFeatures, c: &CodingStats) -> ControllerOutput {
        let cache = self.forward_cached(state, b, c);
        ControllerOutput {
            delta: cache.delta,
            state: ControllerState {
                h_b: cache.gru_b.h_new.clone(),
                h_c: cache.gru_c.h_new.clone(),
            },
            gate: cache.gate,
        }
    }
}

/// Recurrent state of both branches.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub h_b: Vec<f64>,
    pub h_c: Vec<f64>,
}

impl ControllerState {
    pub fn zeros() -> Self {
        Self {
            h_b: vec![0.0; HIDDEN],
            h_c: vec![0.0; HIDDEN],
        }
    }
}

impl Default for ControllerState {
    fn default() -> Self {
        Self::zeros()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerOutput {
    pub delta: f64,
    pub state: ControllerState,
    pub gate: Vec<f64>,
}

/// `clip(λ_base·exp(Δ), λ_min, λ_max)`.
pub fn compose_lambda(lambda_base: f64, delta: f64, bounds: &PiBounds) -> f64 {
    compose_lambda_checked(lambda_base, delta, bounds).0
}

/// [`compose_lambda`] plus whether the clip was active, in which case the
/// composed λ does not depend on `delta`.
pub fn compose_lambda_checked(lambda_base: f64, delta: f64, bounds: &PiBounds) -> (f64, bool) {
    let raw = lambda_base * delta.exp();
    if raw < bounds.lambda_min {
        (bounds.lambda_min, true)
    } else if raw > bounds.lambda_max {
        (bounds.lambda_max, true)
    } else {
        (raw, false)
    }
}

/// Standard GRU cell on explicit tensors. `w` and `u` are the update,
/// reset, and candidate matrices (row-major, `hidden × input` and
/// `hidden × hidden`); `b` the matching biases.
pub fn gru_cell(x: &[f64], h: &[f64], w: [&[f64]; 3], u: [&[f64]; 3], b: [&[f64]; 3]) -> Vec<f64> {
    grad::gru_forward(x, h, w, u, b).h_new
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
