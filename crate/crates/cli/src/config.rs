//! Experiment configuration file.
//!
//! Relative paths inside the file resolve against the file's directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use lambdarc::controller::DEFAULT_DELTA_MAX;
use lambdarc::pi::{PiBounds, PiGains};
use lambdarc::pipeline::{ControlSetup, Mode, SequenceConfig};
use lambdarc::plant::SyntheticCodecParams;
use lambdarc::train::{GradCheckConfig, LossWeights, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Sequence-level P-frame targets, bpp.
    #[serde(default)]
    pub targets: Vec<f64>,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    #[serde(default)]
    pub plant: PlantSection,
    #[serde(default)]
    pub sequence: SequenceSection,
    #[serde(default)]
    pub control: ControlSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub gradcheck: GradcheckSection,
    #[serde(default)]
    pub gen_trace: GenTraceSection,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_out() -> PathBuf {
    "runs".into()
}

fn default_modes() -> Vec<Mode> {
    vec![Mode::FixedLambda, Mode::PiOnly]
}

/// Synthetic plant parameters, or a trace file that replaces them.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantSection {
    pub trace: Option<PathBuf>,
    pub gamma: f64,
    pub eta: f64,
    pub base_rate: f64,
    pub base_distortion: f64,
    pub ar_coeff: f64,
    pub log_noise_sigma: f64,
    pub detail_coupling: f64,
    pub iframe_rate: f64,
    pub iframe_distortion: f64,
}

impl Default for PlantSection {
    fn default() -> Self {
        let p = SyntheticCodecParams::default();
        Self {
            trace: None,
            gamma: p.gamma,
            eta: p.eta,
            base_rate: p.base_rate,
            base_distortion: p.base_distortion,
            ar_coeff: p.ar_coeff,
            log_noise_sigma: p.log_noise_sigma,
            detail_coupling: p.detail_coupling,
            iframe_rate: p.iframe_rate,
            iframe_distortion: p.iframe_distortion,
        }
    }
}

impl PlantSection {
    pub fn synthetic(&self, seed: u64) -> SyntheticCodecParams {
        SyntheticCodecParams {
            gamma: self.gamma,
            eta: self.eta,
            base_rate: self.base_rate,
            base_distortion: self.base_distortion,
            ar_coeff: self.ar_coeff,
            log_noise_sigma: self.log_noise_sigma,
            detail_coupling: self.detail_coupling,
            iframe_rate: self.iframe_rate,
            iframe_distortion: self.iframe_distortion,
            seed,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceSection {
    pub num_frames: usize,
    pub gop_size: usize,
    /// λ for `fixed_lambda` runs. When absent, synthetic plants use the
    /// nominal λ of each target.
    pub fixed_lambda: Option<f64>,
    /// Synthetic sequences per run.
    pub count: usize,
    /// Plant seed of the first sequence is `seed + offset`.
    pub offset: u64,
}

impl Default for SequenceSection {
    fn default() -> Self {
        Self {
            num_frames: 96,
            gop_size: 32,
            fixed_lambda: None,
            count: 1,
            offset: 1000,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSection {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub i_max: f64,
    /// Per-frame PI step limit in log λ.
    pub step_max: f64,
    pub lambda_init: f64,
    pub smoothing_window: usize,
    pub minigop_len: usize,
    pub r_min_ratio: f64,
    pub r_max_ratio: f64,
    /// Controller weights for `pi_gru` runs.
    pub weights: Option<PathBuf>,
    /// Residual bound of freshly initialized controllers.
    pub residual_max: f64,
}

impl Default for ControlSection {
    fn default() -> Self {
        let c = ControlSetup::default();
        Self {
            kp: c.gains.kp,
            ki: c.gains.ki,
            kd: c.gains.kd,
            lambda_min: c.bounds.lambda_min,
            lambda_max: c.bounds.lambda_max,
            i_max: c.bounds.i_max,
            step_max: c.bounds.delta_max,
            lambda_init: c.lambda_init,
            smoothing_window: c.smoothing_window,
            minigop_len: c.minigop_len,
            r_min_ratio: c.r_min_ratio,
            r_max_ratio: c.r_max_ratio,
            weights: None,
            residual_max: DEFAULT_DELTA_MAX,
        }
    }
}

impl ControlSection {
    pub fn setup(&self) -> ControlSetup {
        ControlSetup {
            gains: PiGains {
                kp: self.kp,
                ki: self.ki,
                kd: self.kd,
            },
            bounds: PiBounds {
                lambda_min: self.lambda_min,
                lambda_max: self.lambda_max,
                i_max: self.i_max,
                delta_max: self.step_max,
            },
            lambda_init: self.lambda_init,
            smoothing_window: self.smoothing_window,
            minigop_len: self.minigop_len,
            r_min_ratio: self.r_min_ratio,
            r_max_ratio: self.r_max_ratio,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub lambda_pre_set: Vec<f64>,
    pub episode_len: usize,
    pub episode_stride: usize,
    pub validation_fraction: f64,
    /// Training sequences; plant seeds `seed .. seed + corpus_size`.
    pub corpus_size: usize,
    pub w_dist: f64,
    pub w_budget: f64,
    pub w_smooth: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let w = LossWeights::default();
        Self {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            lr_step: t.lr_step,
            lr_gamma: t.lr_gamma,
            lambda_pre_set: t.lambda_pre_set,
            episode_len: t.episode_len,
            episode_stride: t.episode_stride,
            validation_fraction: t.validation_fraction,
            corpus_size: 40,
            w_dist: w.w_dist,
            w_budget: w.w_budget,
            w_smooth: w.w_smooth,
        }
    }
}

impl TrainSection {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr_step: self.lr_step,
            lr_gamma: self.lr_gamma,
            lambda_pre_set: self.lambda_pre_set.clone(),
            episode_len: self.episode_len,
            episode_stride: self.episode_stride,
            validation_fraction: self.validation_fraction,
            seed,
        }
    }

    pub fn loss(&self) -> LossWeights {
        LossWeights {
            w_dist: self.w_dist,
            w_budget: self.w_budget,
            w_smooth: self.w_smooth,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    /// Sequences checked; plant seeds `seed .. seed + sequences`.
    pub sequences: usize,
    pub episode_len: usize,
    pub episode_start: usize,
    pub lambda_pre: f64,
    pub step: f64,
    pub coords_per_tensor: usize,
    pub floor: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        let g = GradCheckConfig::default();
        Self {
            sequences: 5,
            episode_len: 8,
            episode_start: 1,
            lambda_pre: 512.0,
            step: g.step,
            coords_per_tensor: g.coords_per_tensor,
            floor: g.floor,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenTraceSection {
    pub lambda_grid: Vec<f64>,
}

impl Default for GenTraceSection {
    fn default() -> Self {
        // 32 .. 4096 in half-octave steps.
        let lambda_grid = (0..=14).map(|k| 32.0 * 2f64.powf(k as f64 / 2.0)).collect();
        Self { lambda_grid }
    }
}

/// `section.field: reason` for parameter errors raised by the library.
fn qualify(section: &str, e: lambdarc::Error) -> anyhow::Error {
    match e {
        lambdarc::Error::InvalidParameter { name, reason } => anyhow::anyhow!("{section}.{name}: {reason}"),
        other => anyhow::anyhow!("{section}: {other}"),
    }
}

/// Command-line overrides of config keys.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mode: Option<Mode>,
    pub tolerance: Option<f64>,
}

/// Plant-independent view of one sequence run.
pub fn sequence_config(cfg: &ExperimentConfig, mode: Mode, target: f64, fixed_lambda: Option<f64>) -> SequenceConfig {
    SequenceConfig {
        num_frames: cfg.sequence.num_frames,
        gop_size: cfg.sequence.gop_size,
        mode,
        fixed_lambda_value: (mode == Mode::FixedLambda).then_some(fixed_lambda).flatten(),
        target_rate: target,
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            anyhow::anyhow!("{path}: {}", e.into_inner().message().trim())
        })?;
        Ok(cfg)
    }

    /// Read, apply overrides, resolve relative paths, and validate.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let resolve = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        cfg.out = resolve(&cfg.out);
        cfg.plant.trace = cfg.plant.trace.as_deref().map(resolve);
        cfg.control.weights = cfg.control.weights.as_deref().map(resolve);
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &overrides.out {
            cfg.out = out.clone();
        }
        if let Some(mode) = overrides.mode {
            cfg.modes = vec![mode];
        }
        if let Some(tol) = overrides.tolerance {
            cfg.gradcheck.tolerance = tol;
        }
        cfg.validate().with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!("schema_version: expected {SCHEMA_VERSION}, found {}", self.schema_version);
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            bail!("name: must be a nonempty plain file name, got `{}`", self.name);
        }
        if let Some(t) = self.targets.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            bail!("targets: every target must be a positive bpp, got {t}");
        }
        if self.modes.is_empty() {
            bail!("modes: must list at least one mode");
        }
        match &self.plant.trace {
            Some(p) if !p.is_file() => bail!("plant.trace: file {} does not exist", p.display()),
            Some(_) => {}
            None => self.plant.synthetic(self.seed).validate().map_err(|e| qualify("plant", e))?,
        }
        let seq = &self.sequence;
        if seq.count == 0 {
            bail!("sequence.count: must be >= 1");
        }
        if let Some(l) = seq.fixed_lambda {
            if !(l.is_finite() && l > 0.0) {
                bail!("sequence.fixed_lambda: must be > 0, got {l}");
            }
        }
        sequence_config(self, Mode::PiOnly, 0.1, None)
            .validate()
            .map_err(|e| qualify("sequence", e))?;
        let setup = self.control.setup();
        setup.validate().map_err(|e| qualify("control", e))?;
        if !(self.control.residual_max.is_finite() && self.control.residual_max > 0.0) {
            bail!("control.residual_max: must be > 0, got {}", self.control.residual_max);
        }
        self.train
            .config(self.seed)
            .validate(&setup)
            .map_err(|e| qualify("train", e))?;
        self.train.loss().validate().map_err(|e| qualify("train", e))?;
        if self.train.corpus_size == 0 {
            bail!("train.corpus_size: must be >= 1");
        }
        let g = &self.gradcheck;
        if g.sequences == 0 || g.episode_len == 0 || g.coords_per_tensor == 0 {
            bail!("gradcheck: sequences, episode_len and coords_per_tensor must be >= 1");
        }
        for (name, v) in [("step", g.step), ("floor", g.floor), ("tolerance", g.tolerance), ("lambda_pre", g.lambda_pre)] {
            if !(v.is_finite() && v > 0.0) {
                bail!("gradcheck.{name}: must be > 0, got {v}");
            }
        }
        if g.episode_start == 0 || g.episode_start + g.episode_len > seq.num_frames {
            bail!(
                "gradcheck.episode_start: window {}..{} must lie within P-frames 1..{}",
                g.episode_start,
                g.episode_start + g.episode_len,
                seq.num_frames
            );
        }
        if self.gen_trace.lambda_grid.len() < 2 {
            bail!("gen_trace.lambda_grid: needs at least 2 points");
        }
        Ok(())
    }

    /// Directory holding this experiment's outputs.
    pub fn run_dir(&self) -> PathBuf {
        self.out.join(&self.name)
    }

    pub fn needs_weights(&self) -> bool {
        self.modes.contains(&Mode::PiGru)
    }

    pub fn gradcheck_config(&self, seed: u64) -> GradCheckConfig {
        GradCheckConfig {
            step: self.gradcheck.step,
            coords_per_tensor: self.gradcheck.coords_per_tensor,
            floor: self.gradcheck.floor,
            seed,
        }
    }
}
