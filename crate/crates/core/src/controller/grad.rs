//! Cached forward step and its reverse-mode adjoint.

use super::{range, sigmoid, ControllerState, ControllerWeights, EMBED_B, EMBED_C, GATE, GRU_B, GRU_C, HEAD, HIDDEN};
use crate::features::{BudgetFeatures, CodingStats};

/// `out = W x + b` for a row-major `rows × cols` matrix.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o = b[r] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    }
}

/// `out += W x` without bias.
fn matvec_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o += row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    }
}

/// `dx += Wᵀ dy`.
fn matvec_t_acc(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let cols = dx.len();
    for (r, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (d, a) in dx.iter_mut().zip(row) {
            *d += a * g;
        }
    }
}

/// `gw += dy xᵀ`.
fn outer_acc(gw: &mut [f64], dy: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &mut gw[r * cols..(r + 1) * cols];
        for (d, v) in row.iter_mut().zip(x) {
            *d += g * v;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpCache {
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
    pub out: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub rh: Vec<f64>,
    pub n: Vec<f64>,
    pub h_new: Vec<f64>,
}

/// Every intermediate of one controller step, enough to run the adjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCache {
    pub embed_b: MlpCache,
    pub embed_c: MlpCache,
    pub gru_b: GruCache,
    pub gru_c: GruCache,
    pub gate_hidden: Vec<f64>,
    pub gate: Vec<f64>,
    pub fused: Vec<f64>,
    pub head_pre: f64,
    pub delta: f64,
}

impl StepCache {
    pub fn next_state(&self) -> ControllerState {
        ControllerState {
            h_b: self.gru_b.h_new.clone(),
            h_c: self.gru_c.h_new.clone(),
        }
    }
}

fn tanh_mlp(p: &[f64], base: usize, input: &[f64]) -> MlpCache {
    let mut hidden = vec![0.0; HIDDEN];
    affine(&p[range(base)], &p[range(base + 1)], input, &mut hidden);
    hidden.iter_mut().for_each(|v| *v = v.tanh());
    let mut out = vec![0.0; HIDDEN];
    affine(&p[range(base + 2)], &p[range(base + 3)], &hidden, &mut out);
    out.iter_mut().for_each(|v| *v = v.tanh());
    MlpCache {
        input: input.to_vec(),
        hidden,
        out,
    }
}

pub(super) fn gru_forward(x: &[f64], h: &[f64], w: [&[f64]; 3], u: [&[f64]; 3], b: [&[f64]; 3]) -> GruCache {
    let n_h = h.len();
    let mut z = vec![0.0; n_h];
    affine(w[0], b[0], x, &mut z);
    matvec_acc(u[0], h, &mut z);
    z.iter_mut().for_each(|v| *v = sigmoid(*v));

    let mut r = vec![0.0; n_h];
    affine(w[1], b[1], x, &mut r);
    matvec_acc(u[1], h, &mut r);
    r.iter_mut().for_each(|v| *v = sigmoid(*v));

    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let mut n = vec![0.0; n_h];
    affine(w[2], b[2], x, &mut n);
    matvec_acc(u[2], &rh, &mut n);
    n.iter_mut().for_each(|v| *v = v.tanh());

    let h_new = (0..n_h).map(|i| (1.0 - z[i]) * h[i] + z[i] * n[i]).collect();
    GruCache {
        x: x.to_vec(),
        h_prev: h.to_vec(),
        z,
        r,
        rh,
        n,
        h_new,
    }
}

fn gru_block(p: &[f64], base: usize, x: &[f64], h: &[f64]) -> GruCache {
    let t = |i: usize| &p[range(base + i)];
    gru_forward(x, h, [t(0), t(1), t(2)], [t(3), t(4), t(5)], [t(6), t(7), t(8)])
}

impl ControllerWeights {
    pub fn forward_cached(&self, state: &ControllerState, b: &BudgetFeatures, c: &CodingStats) -> StepCache {
        let p = self.params();
        let embed_b = tanh_mlp(p, EMBED_B, &b.0);
        let embed_c = tanh_mlp(p, EMBED_C, &c.0);
        let gru_b = gru_block(p, GRU_B, &embed_b.out, &state.h_b);
        let gru_c = gru_block(p, GRU_C, &embed_c.out, &state.h_c);

        let mut joint = Vec::with_capacity(2 * HIDDEN);
        joint.extend_from_slice(&gru_b.h_new);
        joint.extend_from_slice(&gru_c.h_new);
        let mut gate_hidden = vec![0.0; HIDDEN];
        affine(&p[range(GATE)], &p[range(GATE + 1)], &joint, &mut gate_hidden);
        gate_hidden.iter_mut().for_each(|v| *v = v.tanh());
        let mut gate = vec![0.0; HIDDEN];
        affine(&p[range(GATE + 2)], &p[range(GATE + 3)], &gate_hidden, &mut gate);
        gate.iter_mut().for_each(|v| *v = sigmoid(*v));

        let fused: Vec<f64> = (0..HIDDEN)
            .map(|i| gate[i] * gru_c.h_new[i] + (1.0 - gate[i]) * gru_b.h_new[i])
            .collect();
        let head_w = &p[range(HEAD)];
        let head_pre = p[range(HEAD + 1)][0] + head_w.iter().zip(&fused).map(|(a, v)| a * v).sum::<f64>();
        let delta = self.delta_max * head_pre.tanh();
        StepCache {
            embed_b,
            embed_c,
            gru_b,
            gru_c,
            gate_hidden,
            gate,
            fused,
            head_pre,
            delta,
        }
    }

    /// Adjoint of one step. `d_delta` is ∂L/∂Δ at this step; `dh_b_next` and
    /// `dh_c_next` carry ∂L/∂h' from later steps. Parameter gradients are
    /// accumulated into `grads`; returns ∂L/∂h for the previous step.
    pub fn backward_step(
        &self,
        cache: &StepCache,
        d_delta: f64,
        dh_b_next: &[f64],
        dh_c_next: &[f64],
        grads: &mut [f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let p = self.params();
        let th = cache.head_pre.tanh();
        let dy = d_delta * self.delta_max * (1.0 - th * th);

        // head
        let head_w = &p[range(HEAD)];
        outer_acc(&mut grads[range(HEAD)], &[dy], &cache.fused);
        grads[range(HEAD + 1)][0] += dy;
        let dh: Vec<f64> = head_w.iter().map(|w| w * dy).collect();

        // fusion
        let mut dh_b: Vec<f64> = dh_b_next.to_vec();
        let mut dh_c: Vec<f64> = dh_c_next.to_vec();
        let mut dv = vec![0.0; HIDDEN];
        for i in 0..HIDDEN {
            let g = cache.gate[i];
            dh_c[i] += dh[i] * g;
            dh_b[i] += dh[i] * (1.0 - g);
            let dg = dh[i] * (cache.gru_c.h_new[i] - cache.gru_b.h_new[i]);
            dv[i] = dg * g * (1.0 - g);
        }

        // gate net
        outer_acc(&mut grads[range(GATE + 2)], &dv, &cache.gate_hidden);
        add(&mut grads[range(GATE + 3)], &dv);
        let mut du = vec![0.0; HIDDEN];
        matvec_t_acc(&p[range(GATE + 2)], &dv, &mut du);
        let da: Vec<f64> = du
            .iter()
            .zip(&cache.gate_hidden)
            .map(|(d, u)| d * (1.0 - u * u))
            .collect();
        let mut joint = Vec::with_capacity(2 * HIDDEN);
        joint.extend_from_slice(&cache.gru_b.h_new);
        joint.extend_from_slice(&cache.gru_c.h_new);
        outer_acc(&mut grads[range(GATE)], &da, &joint);
        add(&mut grads[range(GATE + 1)], &da);
        let mut d_joint = vec![0.0; 2 * HIDDEN];
        matvec_t_acc(&p[range(GATE)], &da, &mut d_joint);
        add(&mut dh_b, &d_joint[..HIDDEN]);
        add(&mut dh_c, &d_joint[HIDDEN..]);

        let (dx_b, dh_b_prev) = gru_backward(p, GRU_B, &cache.gru_b, &dh_b, grads);
        let (dx_c, dh_c_prev) = gru_backward(p, GRU_C, &cache.gru_c, &dh_c, grads);
        mlp_backward(p, EMBED_B, &cache.embed_b, &dx_b, grads);
        mlp_backward(p, EMBED_C, &cache.embed_c, &dx_c, grads);
        (dh_b_prev, dh_c_prev)
    }
}

fn add(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Returns (∂L/∂x, ∂L/∂h_prev).
fn gru_backward(p: &[f64], base: usize, c: &GruCache, dh_new: &[f64], grads: &mut [f64]) -> (Vec<f64>, Vec<f64>) {
    let n_h = c.h_prev.len();
    let mut dh_prev = vec![0.0; n_h];
    let mut da_z = vec![0.0; n_h];
    let mut da_n = vec![0.0; n_h];
    for i in 0..n_h {
        let d = dh_new[i];
        dh_prev[i] = d * (1.0 - c.z[i]);
        let dz = d * (c.n[i] - c.h_prev[i]);
        let dn = d * c.z[i];
        da_z[i] = dz * c.z[i] * (1.0 - c.z[i]);
        da_n[i] = dn * (1.0 - c.n[i] * c.n[i]);
    }
    // candidate: a_n = W_h x + U_h (r ⊙ h) + b_h
    let mut d_rh = vec![0.0; n_h];
    matvec_t_acc(&p[range(base + 5)], &da_n, &mut d_rh);
    let mut da_r = vec![0.0; n_h];
    for i in 0..n_h {
        dh_prev[i] += d_rh[i] * c.r[i];
        let dr = d_rh[i] * c.h_prev[i];
        da_r[i] = dr * c.r[i] * (1.0 - c.r[i]);
    }
    let mut dx = vec![0.0; c.x.len()];
    for (k, da) in [(0, &da_z), (1, &da_r), (2, &da_n)] {
        outer_acc(&mut grads[range(base + k)], da, &c.x);
        add(&mut grads[range(base + 6 + k)], da);
        matvec_t_acc(&p[range(base + k)], da, &mut dx);
    }
    outer_acc(&mut grads[range(base + 3)], &da_z, &c.h_prev);
    outer_acc(&mut grads[range(base + 4)], &da_r, &c.h_prev);
    outer_acc(&mut grads[range(base + 5)], &da_n, &c.rh);
    matvec_t_acc(&p[range(base + 3)], &da_z, &mut dh_prev);
    matvec_t_acc(&p[range(base + 4)], &da_r, &mut dh_prev);
    (dx, dh_prev)
}

fn mlp_backward(p: &[f64], base: usize, c: &MlpCache, d_out: &[f64], grads: &mut [f64]) {
    let da2: Vec<f64> = d_out.iter().zip(&c.out).map(|(d, y)| d * (1.0 - y * y)).collect();
    outer_acc(&mut grads[range(base + 2)], &da2, &c.hidden);
    add(&mut grads[range(base + 3)], &da2);
    let mut d_hidden = vec![0.0; HIDDEN];
    matvec_t_acc(&p[range(base + 2)], &da2, &mut d_hidden);
    let da1: Vec<f64> = d_hidden
        .iter()
        .zip(&c.hidden)
        .map(|(d, y)| d * (1.0 - y * y))
        .collect();
    outer_acc(&mut grads[range(base)], &da1, &c.input);
    add(&mut grads[range(base + 1)], &da1);
}
