//! Controller-only training against a frozen plant.
//!
//! An episode is a window of consecutive P-frames inside one GOP. The
//! pipeline runs from the sequence start with the current weights up to the
//! window (no gradient), then the window is taped and backpropagated:
//! hidden state and PI signal at the window start are constants, and so are
//! the per-frame λ_base and features inside it. Gradients flow only through
//! the residual Δ into the plant's rate and distortion.
//!
//! Targets come from pre-encoding: a λ_pre is drawn from the configured
//! set, the sequence target is the mean P-frame rate at that constant λ,
//! and the window loss compares against the pre-encoded window.

mod gradcheck;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{ControllerState, ControllerWeights, StepCache, PARAMETER_COUNT};
use crate::error::{invalid, Error, Result};
use crate::features::{BudgetFeatures, CodingStats};
use crate::pipeline::{ControlSetup, Mode, SequenceConfig, SequenceRunner};
use crate::plant::{CodecPlant, EncodeResult, SyntheticSequence};

pub use gradcheck::{compare_gradients, gradient_check, relative_error, replay_loss, GradCheckConfig, GroupReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_dist: f64,
    pub w_budget: f64,
    pub w_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_dist: 1.0,
            w_budget: 10.0,
            w_smooth: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("w_dist", self.w_dist), ("w_budget", self.w_budget), ("w_smooth", self.w_smooth)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if self.w_dist + self.w_budget + self.w_smooth == 0.0 {
            return Err(invalid("loss_weights", "at least one weight must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub lambda_pre_set: Vec<f64>,
    /// P-frames per episode.
    pub episode_len: usize,
    /// Offset between consecutive training windows. Equal to
    /// `episode_len` tiles each GOP; smaller values overlap windows.
    pub episode_stride: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 4,
            epochs: 20,
            lr_step: 5,
            lr_gamma: 0.5,
            lambda_pre_set: vec![256.0, 512.0, 1024.0, 2048.0],
            episode_len: 4,
            episode_stride: 4,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, setup: &ControlSetup) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(invalid("learning_rate", format!("must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be >= 1"));
        }
        if self.lr_step == 0 {
            return Err(invalid("lr_step", "must be >= 1"));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(invalid("lr_gamma", format!("must lie in (0, 1], got {}", self.lr_gamma)));
        }
        if self.lambda_pre_set.is_empty() {
            return Err(invalid("lambda_pre_set", "must not be empty"));
        }
        let b = &setup.bounds;
        if let Some(l) = self.lambda_pre_set.iter().find(|l| !(**l >= b.lambda_min && **l <= b.lambda_max)) {
            return Err(invalid(
                "lambda_pre_set",
                format!("{l} lies outside [{}, {}]", b.lambda_min, b.lambda_max),
            ));
        }
        if self.episode_len < setup.minigop_len {
            return Err(invalid(
                "episode_len",
                format!("must cover at least one mini-GOP ({} frames)", setup.minigop_len),
            ));
        }
        if self.episode_stride == 0 {
            return Err(invalid("episode_stride", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(invalid(
                "validation_fraction",
                format!("must lie in [0, 1), got {}", self.validation_fraction),
            ));
        }
        Ok(())
    }
}

/// Step decay: `lr · gamma^⌊epoch / step⌋`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.learning_rate * cfg.lr_gamma.powi((epoch / cfg.lr_step) as i32)
}

/// P-frame rates and distortions of a constant-λ encode.
#[derive(Debug, Clone, PartialEq)]
pub struct PreEncode {
    pub lambda: f64,
    pub rates: Vec<f64>,
    pub distortions: Vec<f64>,
}

impl PreEncode {
    pub fn mean_rate(&self) -> f64 {
        mean(&self.rates)
    }

    pub fn mean_distortion(&self) -> f64 {
        mean(&self.distortions)
    }

    /// Rate sums over consecutive groups of `minigop_len` frames; the last
    /// group may be shorter.
    pub fn minigop_budgets(&self, minigop_len: usize) -> Vec<f64> {
        self.rates.chunks(minigop_len.max(1)).map(|c| c.iter().sum()).collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Encode `frames` once at `lambda_pre`. The result is reachable by
/// construction: it is the plant's own response.
pub fn build_target_budget<P: CodecPlant + ?Sized>(plant: &P, frames: &[usize], lambda_pre: f64) -> Result<PreEncode> {
    let mut rates = Vec::with_capacity(frames.len());
    let mut distortions = Vec::with_capacity(frames.len());
    for &f in frames {
        let r = plant.encode_frame(f, lambda_pre)?;
        rates.push(r.bpp_total);
        distortions.push(r.distortion);
    }
    Ok(PreEncode {
        lambda: lambda_pre,
        rates,
        distortions,
    })
}

/// What an episode is scored against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeTarget {
    /// Mean P-frame rate the window should hit.
    pub mean_rate: f64,
    /// Distortion scale; the distortion term is relative to it.
    pub distortion_ref: f64,
}

impl EpisodeTarget {
    pub fn from_pre_encode(pre: &PreEncode) -> Self {
        Self {
            mean_rate: pre.mean_rate(),
            distortion_ref: pre.mean_distortion(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub dist: f64,
    pub budget: f64,
    pub smooth: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.total += o.total;
        self.dist += o.dist;
        self.budget += o.budget;
        self.smooth += o.smooth;
    }

    fn scale(&mut self, k: f64) {
        self.total *= k;
        self.dist *= k;
        self.budget *= k;
        self.smooth *= k;
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// Episode loss from a trajectory.
///
/// * distortion: mean of `D_t / D_ref`
/// * budget: `((mean rate − target) / target)²`
/// * smoothness: `Σ (Δ_t − Δ_{t−1})²` with `Δ_0 = 0`
pub fn trajectory_loss(
    rates: &[f64],
    distortions: &[f64],
    deltas: &[f64],
    target: &EpisodeTarget,
    w: &LossWeights,
) -> LossParts {
    let t = rates.len().max(1) as f64;
    let dist = distortions.iter().sum::<f64>() / (t * target.distortion_ref);
    let rel = (rates.iter().sum::<f64>() / t - target.mean_rate) / target.mean_rate;
    let budget = rel * rel;
    let mut prev = 0.0;
    let mut smooth = 0.0;
    for &d in deltas {
        smooth += (d - prev) * (d - prev);
        prev = d;
    }
    LossParts {
        total: w.w_dist * dist + w.w_budget * budget + w.w_smooth * smooth,
        dist,
        budget,
        smooth,
    }
}

/// One taped P-frame.
#[derive(Debug, Clone)]
pub struct TapeStep {
    pub frame: usize,
    pub budget_features: BudgetFeatures,
    pub coding_stats: CodingStats,
    pub lambda_base: f64,
    pub lambda: f64,
    pub clipped: bool,
    pub result: EncodeResult,
    pub cache: StepCache,
}

/// Everything needed to recompute and differentiate one episode.
#[derive(Debug, Clone)]
pub struct EpisodeTape {
    pub seed: u64,
    pub window_start: usize,
    pub initial_state: ControllerState,
    pub steps: Vec<TapeStep>,
}

impl EpisodeTape {
    pub fn deltas(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.cache.delta).collect()
    }
}

pub fn episode_loss(tape: &EpisodeTape, target: &EpisodeTarget, w: &LossWeights) -> LossParts {
    let rates: Vec<f64> = tape.steps.iter().map(|s| s.result.bpp_total).collect();
    let dists: Vec<f64> = tape.steps.iter().map(|s| s.result.distortion).collect();
    trajectory_loss(&rates, &dists, &tape.deltas(), target, w)
}

/// ∂L/∂Δ_t for every taped frame.
pub fn loss_wrt_deltas(tape: &EpisodeTape, target: &EpisodeTarget, w: &LossWeights) -> Vec<f64> {
    let n = tape.steps.len();
    let t = n.max(1) as f64;
    let mean_rate = tape.steps.iter().map(|s| s.result.bpp_total).sum::<f64>() / t;
    let d_mean_rate = w.w_budget * 2.0 * (mean_rate - target.mean_rate) / (target.mean_rate * target.mean_rate);
    let deltas = tape.deltas();
    (0..n)
        .map(|i| {
            let s = &tape.steps[i];
            let mut g = 0.0;
            // λ = λ_base·exp(Δ), so ∂/∂Δ = ∂/∂log λ unless the clip is active.
            if !s.clipped {
                g += w.w_dist * s.result.d_dist_d_loglambda / (t * target.distortion_ref);
                g += d_mean_rate * s.result.d_rate_d_loglambda / t;
            }
            let prev = if i == 0 { 0.0 } else { deltas[i - 1] };
            g += w.w_smooth * 2.0 * (deltas[i] - prev);
            if i + 1 < n {
                g -= w.w_smooth * 2.0 * (deltas[i + 1] - deltas[i]);
            }
            g
        })
        .collect()
}

/// Reverse pass through the taped window. Returns a flat gradient laid out
/// like [`ControllerWeights::params`].
pub fn episode_backward(
    weights: &ControllerWeights,
    tape: &EpisodeTape,
    target: &EpisodeTarget,
    w: &LossWeights,
) -> Vec<f64> {
    let mut grads = vec![0.0; PARAMETER_COUNT];
    accumulate_backward(weights, tape, target, w, &mut grads);
    grads
}

fn accumulate_backward(
    weights: &ControllerWeights,
    tape: &EpisodeTape,
    target: &EpisodeTarget,
    w: &LossWeights,
    grads: &mut [f64],
) {
    let d_delta = loss_wrt_deltas(tape, target, w);
    let mut dh_b = vec![0.0; crate::controller::HIDDEN];
    let mut dh_c = vec![0.0; crate::controller::HIDDEN];
    for (step, dd) in tape.steps.iter().zip(&d_delta).rev() {
        let (b, c) = weights.backward_step(&step.cache, *dd, &dh_b, &dh_c, grads);
        dh_b = b;
        dh_c = c;
    }
}

/// An episode: a window of P-frames of one sequence and the λ_pre that
/// sets its targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Episode {
    pub sequence: usize,
    pub start: usize,
    pub len: usize,
    pub lambda_pre: f64,
}

/// `(start, len)` windows of P-frames that never cross an I-frame. Starts
/// advance by `stride` from each GOP's first P-frame. With `stride ≥ len`
/// a GOP's tail yields one shorter window; overlapping windows are always
/// full length.
pub fn episode_windows(seq: &SequenceConfig, len: usize, stride: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut gop_start = 0;
    while gop_start < seq.num_frames {
        let end = (gop_start + seq.gop_size).min(seq.num_frames);
        let mut s = gop_start + 1;
        while s < end {
            let l = len.min(end - s);
            if l == len || stride >= len {
                out.push((s, l));
            }
            s += stride.max(1);
        }
        gop_start += seq.gop_size;
    }
    out
}

fn p_frames(seq: &SequenceConfig) -> Vec<usize> {
    (0..seq.num_frames).filter(|&i| !seq.is_iframe(i)).collect()
}

/// Sequence target and episode target for `ep`.
pub fn episode_targets<P: CodecPlant + ?Sized>(
    plant: &P,
    seq: &SequenceConfig,
    ep: &Episode,
) -> Result<(f64, EpisodeTarget)> {
    let whole = build_target_budget(plant, &p_frames(seq), ep.lambda_pre)?;
    let window: Vec<usize> = (ep.start..ep.start + ep.len).collect();
    let local = build_target_budget(plant, &window, ep.lambda_pre)?;
    Ok((whole.mean_rate(), EpisodeTarget::from_pre_encode(&local)))
}

/// Run the pipeline up to the window, then tape the window.
pub fn record_episode<P: CodecPlant + ?Sized>(
    plant: &P,
    seq: &SequenceConfig,
    setup: &ControlSetup,
    weights: &ControllerWeights,
    target_rate: f64,
    start: usize,
    len: usize,
) -> Result<EpisodeTape> {
    let cfg = SequenceConfig {
        mode: Mode::PiGru,
        fixed_lambda_value: None,
        target_rate,
        ..*seq
    };
    let mut runner = SequenceRunner::new(plant, &cfg, setup, Some(weights))?;
    while runner.next_frame() < start {
        runner.step()?;
    }
    let initial_state = runner.controller_state().clone();
    let mut steps = Vec::with_capacity(len);
    for _ in 0..len {
        if runner.is_done() || runner.next_is_iframe() {
            return Err(Error::Contract(format!(
                "episode window [{start}, {}) crosses an I-frame or the sequence end",
                start + len
            )));
        }
        let prepared = runner.prepare_p_frame()?;
        let cache = weights.forward_cached(runner.controller_state(), &prepared.budget_features, &prepared.coding_stats);
        let finished = runner.finish_p_frame(&prepared, cache.delta, Some(cache.next_state()))?;
        steps.push(TapeStep {
            frame: prepared.index,
            budget_features: prepared.budget_features,
            coding_stats: prepared.coding_stats,
            lambda_base: prepared.lambda_base,
            lambda: finished.record.lambda,
            clipped: finished.clipped,
            result: finished.result,
            cache,
        });
    }
    Ok(EpisodeTape {
        seed: 0,
        window_start: start,
        initial_state,
        steps,
    })
}

/// First-moment/second-moment optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
}

/// Split sequence indices into training and validation sets. The split is
/// a seeded shuffle; at least one sequence stays in training.
pub fn split_corpus(n: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    let n_val = ((n as f64 * validation_fraction).round() as usize).min(n.saturating_sub(1));
    let mut val = idx.split_off(n - n_val);
    idx.sort_unstable();
    val.sort_unstable();
    (idx, val)
}

/// Keeps the split stream apart from the episode stream of the same seed.
const SPLIT_SALT: u64 = 0x5e_ed0f_5911;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: String,
    pub loss_total: f64,
    pub loss_dist: f64,
    pub loss_budget: f64,
    pub loss_smooth: f64,
    pub lr: f64,
}

pub fn write_log_csv<W: std::io::Write>(rows: &[LogRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if rows.is_empty() {
        out.write_record(["epoch", "split", "loss_total", "loss_dist", "loss_budget", "loss_smooth", "lr"])?;
    }
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights with the lowest validation loss seen, including the
    /// starting point.
    pub weights: ControllerWeights,
    /// Weights after the last epoch.
    pub last: ControllerWeights,
    pub best_epoch: usize,
    pub log: Vec<LogRow>,
}

struct EpisodeEval {
    loss: LossParts,
    grads: Option<Vec<f64>>,
}

fn run_one<P: CodecPlant + ?Sized>(
    plant: &P,
    seed: u64,
    seq: &SequenceConfig,
    setup: &ControlSetup,
    weights: &ControllerWeights,
    ep: &Episode,
    lw: &LossWeights,
    with_grads: bool,
) -> Result<EpisodeEval> {
    let (rate, target) = episode_targets(plant, seq, ep)?;
    let mut tape = record_episode(plant, seq, setup, weights, rate, ep.start, ep.len)?;
    tape.seed = seed;
    let loss = episode_loss(&tape, &target, lw);
    if !loss.is_finite() {
        return Err(Error::Diverged {
            seed,
            window_start: ep.start,
        });
    }
    let grads = with_grads.then(|| episode_backward(weights, &tape, &target, lw));
    if let Some(g) = &grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                seed,
                window_start: ep.start,
            });
        }
    }
    Ok(EpisodeEval { loss, grads })
}

/// Everything that stays fixed over a training run.
#[derive(Debug, Clone)]
pub struct TrainSetup<'a> {
    pub corpus: &'a [SyntheticSequence],
    pub sequence: SequenceConfig,
    pub control: ControlSetup,
    pub config: &'a TrainConfig,
    pub loss: LossWeights,
}

impl TrainSetup<'_> {
    fn validation_episodes(&self, val: &[usize]) -> Vec<Episode> {
        let set = &self.config.lambda_pre_set;
        let mut out = Vec::new();
        for &s in val {
            for (start, len) in episode_windows(&self.sequence, self.config.episode_len, self.config.episode_len) {
                let lambda_pre = set[out.len() % set.len()];
                out.push(Episode {
                    sequence: s,
                    start,
                    len,
                    lambda_pre,
                });
            }
        }
        out
    }

    fn train_episodes(&self, train: &[usize], rng: &mut ChaCha8Rng) -> Vec<Episode> {
        let windows = episode_windows(&self.sequence, self.config.episode_len, self.config.episode_stride);
        let mut out = Vec::with_capacity(train.len() * windows.len());
        for &s in train {
            for &(start, len) in &windows {
                out.push(Episode {
                    sequence: s,
                    start,
                    len,
                    lambda_pre: 0.0,
                });
            }
        }
        out.shuffle(rng);
        for ep in &mut out {
            ep.lambda_pre = *self.config.lambda_pre_set.choose(rng).expect("nonempty set");
        }
        out
    }

    fn eval_batch(&self, weights: &ControllerWeights, eps: &[Episode], with_grads: bool) -> Result<Vec<EpisodeEval>> {
        eps.par_iter()
            .map(|ep| {
                let plant = &self.corpus[ep.sequence];
                run_one(plant, plant.seed(), &self.sequence, &self.control, weights, ep, &self.loss, with_grads)
            })
            .collect()
    }

    fn mean_loss(&self, weights: &ControllerWeights, eps: &[Episode]) -> Result<LossParts> {
        let evals = self.eval_batch(weights, eps, false)?;
        let mut total = LossParts::default();
        for e in &evals {
            total.add(&e.loss);
        }
        total.scale(1.0 / evals.len().max(1) as f64);
        Ok(total)
    }
}

impl TrainSetup<'_> {
    /// Mean loss of `weights` over every sequence of the corpus, using the
    /// tiled windows and λ_pre cycling of the validation split.
    pub fn held_out_loss(&self, weights: &ControllerWeights) -> Result<LossParts> {
        self.sequence.validate()?;
        let all: Vec<usize> = (0..self.corpus.len()).collect();
        self.mean_loss(weights, &self.validation_episodes(&all))
    }
}

fn log_row(epoch: usize, split: &str, l: &LossParts, lr: f64) -> LogRow {
    LogRow {
        epoch,
        split: split.into(),
        loss_total: l.total,
        loss_dist: l.dist,
        loss_budget: l.budget,
        loss_smooth: l.smooth,
        lr,
    }
}

/// Train from `init`. Epoch 0 in the log is the untrained validation loss;
/// epoch `k ≥ 1` rows describe the k-th pass over the training episodes.
pub fn train(setup: &TrainSetup<'_>, init: ControllerWeights) -> Result<TrainOutcome> {
    let cfg = setup.config;
    cfg.validate(&setup.control)?;
    setup.loss.validate()?;
    setup.sequence.validate()?;
    if setup.corpus.is_empty() {
        return Err(invalid("corpus", "must contain at least one sequence"));
    }
    let (train_idx, val_idx) = split_corpus(setup.corpus.len(), cfg.validation_fraction, cfg.seed);
    let val_eps = setup.validation_episodes(&val_idx);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut weights = init;
    let mut adam = AdamState::new(weights.parameter_count());
    let mut log = Vec::new();
    let mut best = (f64::INFINITY, 0usize, weights.clone());
    if !val_eps.is_empty() {
        let l = setup.mean_loss(&weights, &val_eps)?;
        log.push(log_row(0, "validation", &l, lr_at_epoch(cfg, 0)));
        best = (l.total, 0, weights.clone());
    }

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        let eps = setup.train_episodes(&train_idx, &mut rng);
        let mut epoch_loss = LossParts::default();
        for batch in eps.chunks(cfg.batch_size) {
            let evals = setup.eval_batch(&weights, batch, true)?;
            let mut grads = vec![0.0; weights.parameter_count()];
            for e in &evals {
                epoch_loss.add(&e.loss);
                for (g, v) in grads.iter_mut().zip(e.grads.as_ref().expect("gradients requested")) {
                    *g += v;
                }
            }
            let k = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= k);
            adam_step(&mut adam, weights.params_mut(), &grads, lr);
            if weights.params().iter().any(|p| !p.is_finite()) {
                let ep = batch[0];
                return Err(Error::Diverged {
                    seed: setup.corpus[ep.sequence].seed(),
                    window_start: ep.start,
                });
            }
        }
        epoch_loss.scale(1.0 / eps.len().max(1) as f64);
        log.push(log_row(epoch + 1, "train", &epoch_loss, lr));
        if !val_eps.is_empty() {
            let l = setup.mean_loss(&weights, &val_eps)?;
            log.push(log_row(epoch + 1, "validation", &l, lr));
            if l.total < best.0 {
                best = (l.total, epoch + 1, weights.clone());
            }
        }
    }

    let (weights_out, best_epoch) = if val_eps.is_empty() {
        (weights.clone(), cfg.epochs)
    } else {
        (best.2, best.1)
    };
    Ok(TrainOutcome {
        weights: weights_out,
        last: weights,
        best_epoch,
        log,
    })
}

#[cfg(test)]
mod tests;
