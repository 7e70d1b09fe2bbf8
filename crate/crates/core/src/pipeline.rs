//! The online encoding loop.
//!
//! Per P-frame: budget read (open a mini-GOP if needed, compute `r_eff`),
//! PI update from the previous P-frame's error, controller forward, encode,
//! budget write. I-frames are encoded outside the loop and leave every
//! controller state untouched.
//!
//! [`SequenceRunner`] exposes the same loop one frame at a time so the
//! trainer can drive it with its own controller forward.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::budget::{self, BudgetConfig, BudgetState};
use crate::controller::{compose_lambda_checked, ControllerState, ControllerWeights};
use crate::error::{invalid, Error, Result};
use crate::features::{build_budget_features, build_coding_stats, BudgetFeatures, CodingStats};
use crate::pi::{log_error, pi_step, PiBounds, PiGains, PiState};
use crate::plant::{CodecPlant, EncodeResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    FixedLambda,
    PiOnly,
    PiGru,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::FixedLambda, Mode::PiOnly, Mode::PiGru];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::FixedLambda => "fixed_lambda",
            Mode::PiOnly => "pi_only",
            Mode::PiGru => "pi_gru",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| invalid("mode", format!("expected fixed_lambda, pi_only or pi_gru, got `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceConfig {
    pub num_frames: usize,
    pub gop_size: usize,
    pub mode: Mode,
    pub fixed_lambda_value: Option<f64>,
    /// Sequence-level P-frame target, bpp.
    pub target_rate: f64,
}

impl SequenceConfig {
    pub fn new(mode: Mode, target_rate: f64) -> Self {
        Self {
            num_frames: 96,
            gop_size: 32,
            mode,
            fixed_lambda_value: None,
            target_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_frames == 0 {
            return Err(invalid("num_frames", "must be >= 1"));
        }
        if self.gop_size < 2 {
            return Err(invalid("gop_size", format!("must be >= 2, got {}", self.gop_size)));
        }
        if !(self.target_rate.is_finite() && self.target_rate > 0.0) {
            return Err(invalid("target_rate", format!("must be > 0, got {}", self.target_rate)));
        }
        match (self.mode, self.fixed_lambda_value) {
            (Mode::FixedLambda, None) => {
                Err(invalid("fixed_lambda_value", "required when mode = fixed_lambda"))
            }
            (Mode::FixedLambda, Some(v)) if !(v.is_finite() && v > 0.0) => {
                Err(invalid("fixed_lambda_value", format!("must be > 0, got {v}")))
            }
            (Mode::PiOnly | Mode::PiGru, Some(_)) => Err(invalid(
                "fixed_lambda_value",
                "only allowed when mode = fixed_lambda",
            )),
            _ => Ok(()),
        }
    }

    pub fn is_iframe(&self, index: usize) -> bool {
        index.is_multiple_of(self.gop_size)
    }

    /// P-frames from `index` up to the next I-frame or the sequence end.
    pub fn p_frames_until_boundary(&self, index: usize) -> usize {
        let next_i = (index / self.gop_size + 1) * self.gop_size;
        next_i.min(self.num_frames).saturating_sub(index)
    }
}

/// PI and budget settings shared by every sequence of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlSetup {
    pub gains: PiGains,
    pub bounds: PiBounds,
    pub lambda_init: f64,
    pub smoothing_window: usize,
    pub minigop_len: usize,
    /// `r_min = target · r_min_ratio`.
    pub r_min_ratio: f64,
    /// `r_max = target · r_max_ratio`.
    pub r_max_ratio: f64,
}

impl Default for ControlSetup {
    fn default() -> Self {
        Self {
            gains: PiGains::default(),
            bounds: PiBounds::default(),
            lambda_init: 1024.0,
            smoothing_window: 40,
            minigop_len: 4,
            r_min_ratio: 0.125,
            r_max_ratio: 8.0,
        }
    }
}

impl ControlSetup {
    pub fn budget_config(&self, target_rate: f64) -> BudgetConfig {
        BudgetConfig {
            target_rate,
            smoothing_window: self.smoothing_window,
            minigop_len: self.minigop_len,
            r_min: target_rate * self.r_min_ratio,
            r_max: target_rate * self.r_max_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gains.validate()?;
        self.bounds.validate()?;
        if !(self.lambda_init >= self.bounds.lambda_min && self.lambda_init <= self.bounds.lambda_max) {
            return Err(invalid(
                "lambda_init",
                format!(
                    "must lie in [{}, {}], got {}",
                    self.bounds.lambda_min, self.bounds.lambda_max, self.lambda_init
                ),
            ));
        }
        if !(self.r_min_ratio > 0.0 && self.r_min_ratio < 1.0) {
            return Err(invalid("r_min_ratio", format!("must lie in (0, 1), got {}", self.r_min_ratio)));
        }
        if !(self.r_max_ratio > 1.0 && self.r_max_ratio.is_finite()) {
            return Err(invalid("r_max_ratio", format!("must be > 1, got {}", self.r_max_ratio)));
        }
        self.budget_config(1.0).validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameKind {
    I,
    P,
}

/// One row of the per-frame log. I-frames carry neutral markers: zero
/// `r_eff`, `delta_gru`, and `e_t`, and no mini-GOP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub kind: FrameKind,
    pub r_eff: f64,
    pub lambda_base: f64,
    pub delta_gru: f64,
    pub lambda: f64,
    pub bpp_total: f64,
    pub bpp_mv: f64,
    pub bpp_res: f64,
    pub distortion: f64,
    /// `log(bpp_total / r_eff)` of this frame.
    #[serde(rename = "e_t")]
    pub error: f64,
    /// PI integral after accumulating `e_t`.
    #[serde(rename = "I_t")]
    pub integral: f64,
    /// Accumulated deviation after this frame.
    #[serde(rename = "E_t")]
    pub deviation: f64,
    pub minigop: Option<usize>,
    pub minigop_budget: Option<f64>,
    pub psnr: f64,
}

pub const FRAME_HEADER: [&str; 16] = [
    "frame",
    "kind",
    "r_eff",
    "lambda_base",
    "delta_gru",
    "lambda",
    "bpp_total",
    "bpp_mv",
    "bpp_res",
    "distortion",
    "e_t",
    "I_t",
    "E_t",
    "minigop",
    "minigop_budget",
    "psnr",
];

/// `−10·log10(distortion)` with unit reference.
pub fn psnr_equivalent(distortion: f64) -> f64 {
    -10.0 * distortion.max(1e-300).log10()
}

pub fn write_frames_csv<W: Write>(records: &[FrameRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if records.is_empty() {
        out.write_record(FRAME_HEADER)?;
    }
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_frames_csv<R: Read>(r: R) -> Result<Vec<FrameRecord>> {
    let mut reader = csv::Reader::from_reader(r);
    let header = reader.headers()?.clone();
    if header.iter().ne(FRAME_HEADER) {
        return Err(Error::FrameLog(format!(
            "unexpected header `{}`",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let records: Vec<FrameRecord> = reader.deserialize().collect::<std::result::Result<_, _>>()?;
    for (i, r) in records.iter().enumerate() {
        if r.frame != i {
            return Err(Error::FrameLog(format!("row {i} has frame index {}", r.frame)));
        }
    }
    Ok(records)
}

/// Steps of one P-frame, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    BudgetRead,
    PiUpdate,
    ControllerForward,
    Encode,
    BudgetWrite,
}

/// Everything known about a P-frame before its λ is chosen.
#[derive(Debug, Clone, Copy)]
pub struct PreparedFrame {
    pub index: usize,
    pub r_eff: f64,
    pub lambda_base: f64,
    pub budget_features: BudgetFeatures,
    pub coding_stats: CodingStats,
}

/// Result of finishing a P-frame.
#[derive(Debug, Clone, Copy)]
pub struct FinishedFrame {
    pub record: FrameRecord,
    pub result: EncodeResult,
    /// The λ clip was active, so the encode does not depend on Δ.
    pub clipped: bool,
}

/// Frame-by-frame driver of the online loop.
pub struct SequenceRunner<'a, P: CodecPlant + ?Sized> {
    plant: &'a P,
    cfg: SequenceConfig,
    setup: ControlSetup,
    budget_cfg: BudgetConfig,
    weights: Option<&'a ControllerWeights>,
    next_frame: usize,
    pi: PiState,
    pending_error: Option<f64>,
    budget: BudgetState,
    controller: ControllerState,
    /// Most recent encode of either kind, and whether it was a P-frame.
    last: Option<(EncodeResult, bool)>,
    minigop_index: Option<usize>,
    events: Option<Vec<(usize, Event)>>,
}

impl<'a, P: CodecPlant + ?Sized> SequenceRunner<'a, P> {
    pub fn new(
        plant: &'a P,
        cfg: &SequenceConfig,
        setup: &ControlSetup,
        weights: Option<&'a ControllerWeights>,
    ) -> Result<Self> {
        cfg.validate()?;
        setup.validate()?;
        if cfg.num_frames > plant.num_frames() {
            return Err(invalid(
                "num_frames",
                format!("{} exceeds the plant's {} frames", cfg.num_frames, plant.num_frames()),
            ));
        }
        if (cfg.mode == Mode::PiGru) != weights.is_some() {
            return Err(Error::Contract(
                "controller weights are required exactly when mode = pi_gru".into(),
            ));
        }
        let budget_cfg = setup.budget_config(cfg.target_rate);
        Ok(Self {
            plant,
            cfg: *cfg,
            setup: *setup,
            budget_cfg,
            weights,
            next_frame: 0,
            pi: PiState::new(setup.lambda_init, &setup.bounds),
            pending_error: None,
            budget: BudgetState::default(),
            controller: ControllerState::zeros(),
            last: None,
            minigop_index: None,
            events: None,
        })
    }

    /// Record the order of P-frame steps for inspection.
    pub fn with_events(mut self) -> Self {
        self.events = Some(Vec::new());
        self
    }

    pub fn events(&self) -> &[(usize, Event)] {
        self.events.as_deref().unwrap_or(&[])
    }

    pub fn next_frame(&self) -> usize {
        self.next_frame
    }

    pub fn is_done(&self) -> bool {
        self.next_frame >= self.cfg.num_frames
    }

    pub fn next_is_iframe(&self) -> bool {
        self.cfg.is_iframe(self.next_frame)
    }

    pub fn pi_state(&self) -> &PiState {
        &self.pi
    }

    pub fn budget_state(&self) -> &BudgetState {
        &self.budget
    }

    pub fn controller_state(&self) -> &ControllerState {
        &self.controller
    }

    pub fn budget_config(&self) -> &BudgetConfig {
        &self.budget_cfg
    }

    fn lambda_base(&self) -> f64 {
        match (self.cfg.mode, self.cfg.fixed_lambda_value) {
            (Mode::FixedLambda, Some(v)) => self.setup.bounds.clamp_lambda(v),
            _ => self.pi.lambda_base,
        }
    }

    fn log(&mut self, event: Event) {
        let frame = self.next_frame;
        if let Some(events) = self.events.as_mut() {
            events.push((frame, event));
        }
    }

    /// Encode the next frame with the configured mode.
    pub fn step(&mut self) -> Result<FrameRecord> {
        if self.next_is_iframe() {
            return self.encode_iframe();
        }
        let prepared = self.prepare_p_frame()?;
        let (delta, state) = match (self.cfg.mode, self.weights) {
            (Mode::PiGru, Some(w)) => {
                self.log(Event::ControllerForward);
                let out = w.forward(&self.controller, &prepared.budget_features, &prepared.coding_stats);
                (out.delta, Some(out.state))
            }
            _ => (0.0, None),
        };
        Ok(self.finish_p_frame(&prepared, delta, state)?.record)
    }

    pub fn encode_iframe(&mut self) -> Result<FrameRecord> {
        let index = self.next_frame;
        if !self.cfg.is_iframe(index) {
            return Err(Error::Contract(format!("frame {index} is not an I-frame")));
        }
        let res = self.plant.encode_iframe(index)?;
        // A straddling mini-GOP is closed early; the next P-frame opens a
        // fresh one.
        self.budget.frames_left_in_minigop = 0;
        self.last = Some((res, false));
        self.next_frame += 1;
        let lambda_base = self.lambda_base();
        Ok(FrameRecord {
            frame: index,
            kind: FrameKind::I,
            r_eff: 0.0,
            lambda_base,
            delta_gru: 0.0,
            lambda: lambda_base,
            bpp_total: res.bpp_total,
            bpp_mv: res.bpp_mv,
            bpp_res: res.bpp_res,
            distortion: res.distortion,
            error: 0.0,
            integral: self.pi.integral,
            deviation: self.budget.deviation,
            minigop: None,
            minigop_budget: None,
            psnr: psnr_equivalent(res.distortion),
        })
    }

    /// Budget read, PI update, and feature construction for the next
    /// P-frame.
    pub fn prepare_p_frame(&mut self) -> Result<PreparedFrame> {
        let index = self.next_frame;
        if self.is_done() || self.cfg.is_iframe(index) {
            return Err(Error::Contract(format!("frame {index} is not a pending P-frame")));
        }
        self.log(Event::BudgetRead);
        if self.budget.needs_minigop() {
            let len = self.cfg.p_frames_until_boundary(index);
            self.budget = budget::open_minigop_with_len(&self.budget_cfg, &self.budget, len);
            self.minigop_index = Some(self.minigop_index.map_or(0, |i| i + 1));
        }
        let r_eff = budget::effective_target(&self.budget_cfg, &self.budget);

        if self.cfg.mode != Mode::FixedLambda {
            self.log(Event::PiUpdate);
            if let Some(e) = self.pending_error.take() {
                self.pi = pi_step(&self.pi, &self.setup.gains, &self.setup.bounds, e).0;
            }
        }
        let lambda_base = self.lambda_base();

        // After an I-frame (or at the start) there is no previous P-frame:
        // the previous rate reads as on-target and the coding statistics
        // come from whatever was encoded last.
        let (prev_rate, coding_stats) = match &self.last {
            Some((res, true)) => (res.bpp_total, build_coding_stats(res, r_eff)),
            Some((res, false)) => (r_eff, build_coding_stats(res, r_eff)),
            None => (r_eff, CodingStats([0.0; crate::features::CODING_STATS])),
        };
        let budget_features = build_budget_features(
            r_eff,
            prev_rate,
            &self.budget,
            lambda_base,
            self.setup.bounds.lambda_max,
        );
        Ok(PreparedFrame {
            index,
            r_eff,
            lambda_base,
            budget_features,
            coding_stats,
        })
    }

    /// Compose λ from `delta`, encode, and write the budget. `state` is
    /// the controller's next hidden state, if a controller ran.
    pub fn finish_p_frame(
        &mut self,
        prepared: &PreparedFrame,
        delta: f64,
        state: Option<ControllerState>,
    ) -> Result<FinishedFrame> {
        if prepared.index != self.next_frame {
            return Err(Error::Contract(format!(
                "prepared frame {} does not match pending frame {}",
                prepared.index, self.next_frame
            )));
        }
        let (lambda, clipped) = compose_lambda_checked(prepared.lambda_base, delta, &self.setup.bounds);
        self.log(Event::Encode);
        let res = self.plant.encode_frame(prepared.index, lambda)?;
        let error = log_error(res.bpp_total, prepared.r_eff)?;

        self.log(Event::BudgetWrite);
        let budget_before = self.budget;
        self.budget = budget::record_p_frame(&self.budget_cfg, &self.budget, res.bpp_total, prepared.r_eff);

        let integral = if self.cfg.mode == Mode::FixedLambda {
            0.0
        } else {
            self.pending_error = Some(error);
            (self.pi.integral + error).clamp(-self.setup.bounds.i_max, self.setup.bounds.i_max)
        };
        if let Some(s) = state {
            self.controller = s;
        }
        self.last = Some((res, true));
        self.next_frame += 1;
        Ok(FinishedFrame {
            record: FrameRecord {
                frame: prepared.index,
                kind: FrameKind::P,
                r_eff: prepared.r_eff,
                lambda_base: prepared.lambda_base,
                delta_gru: delta,
                lambda,
                bpp_total: res.bpp_total,
                bpp_mv: res.bpp_mv,
                bpp_res: res.bpp_res,
                distortion: res.distortion,
                error,
                integral,
                deviation: self.budget.deviation,
                minigop: self.minigop_index,
                minigop_budget: Some(budget_before.minigop_budget),
                psnr: psnr_equivalent(res.distortion),
            },
            result: res,
            clipped,
        })
    }

    /// Run the remaining frames.
    pub fn run(mut self) -> Result<Vec<FrameRecord>> {
        let mut out = Vec::with_capacity(self.cfg.num_frames - self.next_frame);
        while !self.is_done() {
            out.push(self.step()?);
        }
        Ok(out)
    }
}

/// Encode a whole sequence. `weights` must be present iff `mode = pi_gru`.
pub fn encode_sequence<P: CodecPlant + ?Sized>(
    plant: &P,
    cfg: &SequenceConfig,
    setup: &ControlSetup,
    weights: Option<&ControllerWeights>,
) -> Result<Vec<FrameRecord>> {
    SequenceRunner::new(plant, cfg, setup, weights)?.run()
}

/// Mean P-frame bpp; I-frames are excluded.
pub fn mean_p_rate(records: &[FrameRecord]) -> Option<f64> {
    mean(records.iter().filter(|r| r.kind == FrameKind::P).map(|r| r.bpp_total))
}

/// Sequence quality: PSNR-equivalent of the mean P-frame distortion.
pub fn sequence_quality(records: &[FrameRecord]) -> Option<f64> {
    mean(records.iter().filter(|r| r.kind == FrameKind::P).map(|r| r.distortion)).map(psnr_equivalent)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}
