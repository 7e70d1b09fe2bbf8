//! Finite-difference check of [`super::episode_backward`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{episode_backward, trajectory_loss, EpisodeTape, EpisodeTarget, LossParts, LossWeights};
use crate::controller::{compose_lambda, ControllerWeights, TENSORS};
use crate::error::Result;
use crate::pi::PiBounds;
use crate::plant::CodecPlant;

/// Recompute the episode loss from the tape's inputs with `weights`,
/// holding λ_base, features, and the initial hidden state fixed. This is
/// the function whose gradient the reverse pass computes.
pub fn replay_loss<P: CodecPlant + ?Sized>(
    plant: &P,
    weights: &ControllerWeights,
    tape: &EpisodeTape,
    target: &EpisodeTarget,
    lw: &LossWeights,
    bounds: &PiBounds,
) -> Result<LossParts> {
    let mut state = tape.initial_state.clone();
    let n = tape.steps.len();
    let (mut rates, mut dists, mut deltas) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for step in &tape.steps {
        let out = weights.forward(&state, &step.budget_features, &step.coding_stats);
        let lambda = compose_lambda(step.lambda_base, out.delta, bounds);
        let res = plant.encode_frame(step.frame, lambda)?;
        rates.push(res.bpp_total);
        dists.push(res.distortion);
        deltas.push(out.delta);
        state = out.state;
    }
    Ok(trajectory_loss(&rates, &dists, &deltas, target, lw))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates checked per tensor; smaller tensors are checked fully.
    pub coords_per_tensor: usize,
    /// Denominator floor of the relative error. Central differences at
    /// `h = 1e-5` on an O(10) loss carry about 1e-9 of roundoff, so
    /// derivatives smaller than the floor are judged on an absolute scale.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_tensor: 32,
            floor: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub group: &'static str,
    pub max_rel_error: f64,
    /// Tensor holding the worst coordinate.
    pub worst_tensor: &'static str,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_pair: (f64, f64),
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare `analytic` against central differences of [`replay_loss`].
/// Reports are in weight-group order.
pub fn compare_gradients<P: CodecPlant + ?Sized>(
    plant: &P,
    weights: &ControllerWeights,
    tape: &EpisodeTape,
    target: &EpisodeTarget,
    lw: &LossWeights,
    bounds: &PiBounds,
    analytic: &[f64],
    cfg: &GradCheckConfig,
) -> Result<Vec<GroupReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports: Vec<GroupReport> = Vec::new();
    let mut probe = weights.clone();
    let mut offset = 0;
    for t in TENSORS {
        let len = t.len();
        let coords: Vec<usize> = if len <= cfg.coords_per_tensor {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, cfg.coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        let group = t.group();
        if reports.last().is_none_or(|r| r.group != group) {
            reports.push(GroupReport {
                group,
                max_rel_error: 0.0,
                worst_tensor: t.name,
                worst_pair: (0.0, 0.0),
                checked: 0,
            });
        }
        let report = reports.last_mut().expect("pushed above");
        for c in coords {
            let i = offset + c;
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + cfg.step;
            let up = replay_loss(plant, &probe, tape, target, lw, bounds)?.total;
            probe.params_mut()[i] = orig - cfg.step;
            let down = replay_loss(plant, &probe, tape, target, lw, bounds)?.total;
            probe.params_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let err = relative_error(analytic[i], numeric, cfg.floor);
            if err.is_nan() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_tensor = t.name;
                report.worst_pair = (analytic[i], numeric);
            }
            report.checked += 1;
        }
        offset += len;
    }
    Ok(reports)
}

/// Reverse-pass gradient of the taped episode checked against central
/// differences.
pub fn gradient_check<P: CodecPlant + ?Sized>(
    plant: &P,
    weights: &ControllerWeights,
    tape: &EpisodeTape,
    target: &EpisodeTarget,
    lw: &LossWeights,
    bounds: &PiBounds,
    cfg: &GradCheckConfig,
) -> Result<Vec<GroupReport>> {
    let analytic = episode_backward(weights, tape, target, lw);
    compare_gradients(plant, weights, tape, target, lw, bounds, &analytic, cfg)
}
