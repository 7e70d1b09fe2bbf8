//! Codec plants: the λ → (rate, distortion) response the controllers act on.
//!
//! Two implementations share the [`CodecPlant`] interface:
//!
//! * [`SyntheticSequence`] evaluates a power-law model, `rate = c·λ^γ` and
//!   `distortion = d·λ^(−η)`, over content generated by [`synth_sequence`].
//!   Its derivative fields are exact, which is what the trainer
//!   backpropagates through.
//! * [`TracePlant`] replays sampled encoder responses from a CSV file with
//!   log–log interpolation between grid points.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Per-frame content drawn once per sequence. Noise is frozen here, so
/// encoding the same frame at two λ values is a controlled comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameContent {
    pub complexity: f64,
    pub detail: f64,
    pub motion_share: f64,
    pub motion_sparsity: f64,
    pub warp_error: f64,
    pub noise_factor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCodecParams {
    /// Rate exponent in λ. Must lie in (0, 1].
    pub gamma: f64,
    /// Distortion exponent in λ.
    pub eta: f64,
    pub base_rate: f64,
    pub base_distortion: f64,
    /// AR(1) persistence of log complexity.
    pub ar_coeff: f64,
    /// Standard deviation of the AR innovation and of the per-frame log
    /// rate noise.
    pub log_noise_sigma: f64,
    /// Exponent tying distortion scale to complexity (`detail = c^κ`).
    /// With κ = 1 the rate–distortion slope depends on λ alone.
    pub detail_coupling: f64,
    pub iframe_rate: f64,
    pub iframe_distortion: f64,
    pub seed: u64,
}

impl Default for SyntheticCodecParams {
    fn default() -> Self {
        Self {
            gamma: 0.7,
            eta: 0.9,
            base_rate: 0.001,
            base_distortion: 0.16,
            ar_coeff: 0.9,
            log_noise_sigma: 0.1,
            detail_coupling: 1.0,
            iframe_rate: 0.5,
            iframe_distortion: 2.0e-4,
            seed: 0,
        }
    }
}

impl SyntheticCodecParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("eta", self.eta),
            ("base_rate", self.base_rate),
            ("base_distortion", self.base_distortion),
            ("iframe_rate", self.iframe_rate),
            ("iframe_distortion", self.iframe_distortion),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(name, format!("must be finite and > 0, got {v}")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(invalid("gamma", format!("must lie in (0, 1], got {}", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.ar_coeff) {
            return Err(invalid("ar_coeff", format!("must lie in [0, 1), got {}", self.ar_coeff)));
        }
        if !(self.log_noise_sigma.is_finite() && self.log_noise_sigma >= 0.0) {
            return Err(invalid(
                "log_noise_sigma",
                format!("must be finite and >= 0, got {}", self.log_noise_sigma),
            ));
        }
        if !self.detail_coupling.is_finite() {
            return Err(invalid("detail_coupling", "must be finite"));
        }
        Ok(())
    }

    /// λ that yields `rate` on a unit-complexity, noise-free frame. This is
    /// the open-loop operating point a fixed-λ encoder would be tuned to.
    pub fn nominal_lambda_for_rate(&self, rate: f64) -> f64 {
        (rate / self.base_rate).powf(1.0 / self.gamma)
    }

    /// Rate of a unit-complexity, noise-free frame at `lambda`.
    pub fn nominal_rate(&self, lambda: f64) -> f64 {
        self.base_rate * lambda.powf(self.gamma)
    }
}

/// Output of one frame encode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodeResult {
    pub bpp_total: f64,
    pub bpp_mv: f64,
    pub bpp_res: f64,
    pub distortion: f64,
    pub motion_sparsity: f64,
    pub warp_error: f64,
    /// ∂bpp_total / ∂log λ.
    pub d_rate_d_loglambda: f64,
    /// ∂distortion / ∂log λ.
    pub d_dist_d_loglambda: f64,
    /// Set by the trace plant when λ fell outside the sampled grid.
    pub clamped: bool,
}

/// A sequence of frames that can be encoded at any λ.
pub trait CodecPlant: Sync {
    fn num_frames(&self) -> usize;

    /// Encode frame `index` as a P-frame at `lambda`.
    fn encode_frame(&self, index: usize, lambda: f64) -> Result<EncodeResult>;

    /// Encode frame `index` as an I-frame. The result does not depend on λ.
    fn encode_iframe(&self, index: usize) -> Result<EncodeResult>;
}

/// Generate `num_frames` frames of content. Fully determined by `params.seed`.
pub fn synth_sequence(params: &SyntheticCodecParams, num_frames: usize) -> Vec<FrameContent> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let sigma = params.log_noise_sigma;
    let a = params.ar_coeff;
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };

    let mut frames = Vec::with_capacity(num_frames);
    // Start from the stationary distribution so early frames look like late ones.
    let mut log_c = sigma / (1.0 - a * a).sqrt() * normal();
    for t in 0..num_frames {
        if t > 0 {
            log_c = a * log_c + sigma * normal();
        }
        let noise = (sigma * normal()).exp();
        let warp = (log_c + 0.25 * sigma * normal()).exp();
        let sparsity = 1.0 / (1.0 + (log_c + 3.0 * sigma * normal()).exp());
        let share = 0.25 + 0.1 * (log_c + 3.0 * sigma * normal()).tanh();
        let complexity = log_c.exp();
        frames.push(FrameContent {
            complexity,
            detail: complexity.powf(params.detail_coupling),
            motion_share: share,
            motion_sparsity: sparsity,
            warp_error: warp,
            noise_factor: noise,
        });
    }
    frames
}

/// The power-law plant law, independent of any particular sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPlant {
    params: SyntheticCodecParams,
}

impl SyntheticPlant {
    pub fn new(params: SyntheticCodecParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &SyntheticCodecParams {
        &self.params
    }

    pub fn encode(&self, frame: &FrameContent, lambda: f64) -> EncodeResult {
        let p = &self.params;
        let total = frame.complexity * p.base_rate * lambda.powf(p.gamma) * frame.noise_factor;
        let distortion = frame.detail * p.base_distortion * lambda.powf(-p.eta);
        let (bpp_mv, bpp_res, bpp_total) = split_rate(total, frame.motion_share);
        EncodeResult {
            bpp_total,
            bpp_mv,
            bpp_res,
            distortion,
            motion_sparsity: frame.motion_sparsity,
            warp_error: frame.warp_error,
            d_rate_d_loglambda: p.gamma * bpp_total,
            d_dist_d_loglambda: -p.eta * distortion,
            clamped: false,
        }
    }

    pub fn encode_iframe(&self, frame: &FrameContent) -> EncodeResult {
        let p = &self.params;
        let total = p.iframe_rate * frame.complexity;
        let (bpp_mv, bpp_res, bpp_total) = split_rate(total, 0.0);
        EncodeResult {
            bpp_total,
            bpp_mv,
            bpp_res,
            distortion: p.iframe_distortion * frame.detail,
            motion_sparsity: frame.motion_sparsity,
            warp_error: frame.warp_error,
            d_rate_d_loglambda: 0.0,
            d_dist_d_loglambda: 0.0,
            clamped: false,
        }
    }
}

// The total is re-derived from the parts so that mv + res == total holds
// exactly in floating point.
fn split_rate(total: f64, share: f64) -> (f64, f64, f64) {
    let mv = total * share;
    let res = total - mv;
    (mv, res, mv + res)
}

/// A synthetic plant bound to one generated sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    plant: SyntheticPlant,
    frames: Vec<FrameContent>,
}

impl SyntheticSequence {
    pub fn generate(params: SyntheticCodecParams, num_frames: usize) -> Result<Self> {
        if num_frames == 0 {
            return Err(invalid("num_frames", "must be >= 1"));
        }
        let plant = SyntheticPlant::new(params)?;
        let frames = synth_sequence(plant.params(), num_frames);
        Ok(Self { plant, frames })
    }

    pub fn from_frames(plant: SyntheticPlant, frames: Vec<FrameContent>) -> Self {
        Self { plant, frames }
    }

    pub fn plant(&self) -> &SyntheticPlant {
        &self.plant
    }

    pub fn frames(&self) -> &[FrameContent] {
        &self.frames
    }

    pub fn seed(&self) -> u64 {
        self.plant.params.seed
    }

    fn frame(&self, index: usize) -> Result<&FrameContent> {
        self.frames.get(index).ok_or(Error::FrameOutOfRange {
            index,
            len: self.frames.len(),
        })
    }
}

impl CodecPlant for SyntheticSequence {
    fn num_frames(&self) -> usize {
        self.frames.len()
    }

    fn encode_frame(&self, index: usize, lambda: f64) -> Result<EncodeResult> {
        Ok(self.plant.encode(self.frame(index)?, lambda))
    }

    fn encode_iframe(&self, index: usize) -> Result<EncodeResult> {
        Ok(self.plant.encode_iframe(self.frame(index)?))
    }
}

/// One sampled operating point of a traced encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub lambda: f64,
    pub bpp_mv: f64,
    pub bpp_res: f64,
    pub distortion: f64,
    pub motion_sparsity: f64,
    pub warp_error: f64,
}

impl TraceSample {
    fn total(&self) -> f64 {
        self.bpp_mv + self.bpp_res
    }
}

/// Per-frame λ grids. Construction validates every invariant, so a
/// `TraceTable` in hand is always safe to interpolate.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceTable {
    frames: Vec<Vec<TraceSample>>,
}

pub const TRACE_HEADER: [&str; 7] = [
    "frame_idx",
    "lambda",
    "bpp_mv",
    "bpp_res",
    "distortion",
    "motion_sparsity",
    "warp_error",
];

#[derive(Debug, Deserialize)]
struct TraceRow {
    frame_idx: usize,
    lambda: f64,
    bpp_mv: f64,
    bpp_res: f64,
    distortion: f64,
    motion_sparsity: f64,
    warp_error: f64,
}

impl TraceTable {
    pub fn new(frames: Vec<Vec<TraceSample>>) -> Result<Self> {
        for (frame, grid) in frames.iter().enumerate() {
            validate_grid(frame, grid)?;
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[Vec<TraceSample>] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Sample a synthetic sequence on a λ grid.
    pub fn sample(seq: &SyntheticSequence, lambda_grid: &[f64]) -> Result<Self> {
        let frames = seq
            .frames()
            .iter()
            .map(|f| {
                lambda_grid
                    .iter()
                    .map(|&lambda| {
                        let r = seq.plant().encode(f, lambda);
                        TraceSample {
                            lambda,
                            bpp_mv: r.bpp_mv,
                            bpp_res: r.bpp_res,
                            distortion: r.distortion,
                            motion_sparsity: r.motion_sparsity,
                            warp_error: r.warp_error,
                        }
                    })
                    .collect()
            })
            .collect();
        Self::new(frames)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(TRACE_HEADER)?;
        for (idx, grid) in self.frames.iter().enumerate() {
            for s in grid {
                out.write_record([
                    idx.to_string(),
                    s.lambda.to_string(),
                    s.bpp_mv.to_string(),
                    s.bpp_res.to_string(),
                    s.distortion.to_string(),
                    s.motion_sparsity.to_string(),
                    s.warp_error.to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, path: &Path) -> Result<Self> {
        let fmt_err = |msg: String| Error::TraceFormat {
            path: path.to_path_buf(),
            msg,
        };
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let header = rdr.headers().map_err(|e| fmt_err(e.to_string()))?.clone();
        if header.iter().ne(TRACE_HEADER.iter().copied()) {
            return Err(fmt_err(format!(
                "header must be `{}`, found `{}`",
                TRACE_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut frames: Vec<Vec<TraceSample>> = Vec::new();
        for (i, row) in rdr.deserialize::<TraceRow>().enumerate() {
            // Line 1 is the header.
            let line = i + 2;
            let row = row.map_err(|e| fmt_err(format!("line {line}: {e}")))?;
            if row.frame_idx == frames.len() {
                frames.push(Vec::new());
            } else if row.frame_idx + 1 != frames.len() {
                return Err(Error::TraceValidation {
                    frame: row.frame_idx,
                    column: "frame_idx",
                    msg: format!(
                        "line {line}: rows must be sorted by frame_idx with no gaps (expected {} or {})",
                        frames.len().saturating_sub(1),
                        frames.len()
                    ),
                });
            }
            frames[row.frame_idx].push(TraceSample {
                lambda: row.lambda,
                bpp_mv: row.bpp_mv,
                bpp_res: row.bpp_res,
                distortion: row.distortion,
                motion_sparsity: row.motion_sparsity,
                warp_error: row.warp_error,
            });
        }
        if frames.is_empty() {
            return Err(fmt_err("no data rows".into()));
        }
        Self::new(frames)
    }
}

fn validate_grid(frame: usize, grid: &[TraceSample]) -> Result<()> {
    let err = |column, msg: String| Error::TraceValidation { frame, column, msg };
    if grid.len() < 2 {
        return Err(err("lambda", format!("needs at least 2 grid points, found {}", grid.len())));
    }
    for s in grid {
        if !(s.lambda.is_finite() && s.lambda > 0.0) {
            return Err(err("lambda", format!("must be finite and > 0, got {}", s.lambda)));
        }
        if !(s.bpp_mv >= 0.0 && s.bpp_mv.is_finite()) {
            return Err(err("bpp_mv", format!("must be finite and >= 0, got {}", s.bpp_mv)));
        }
        if !(s.bpp_res >= 0.0 && s.bpp_res.is_finite()) {
            return Err(err("bpp_res", format!("must be finite and >= 0, got {}", s.bpp_res)));
        }
        if s.total() <= 0.0 {
            return Err(err("bpp_res", "bpp_mv + bpp_res must be > 0".into()));
        }
        if !(s.distortion > 0.0 && s.distortion.is_finite()) {
            return Err(err("distortion", format!("must be finite and > 0, got {}", s.distortion)));
        }
        if !(0.0..=1.0).contains(&s.motion_sparsity) {
            return Err(err(
                "motion_sparsity",
                format!("must lie in [0, 1], got {}", s.motion_sparsity),
            ));
        }
        if !(s.warp_error > 0.0 && s.warp_error.is_finite()) {
            return Err(err("warp_error", format!("must be finite and > 0, got {}", s.warp_error)));
        }
    }
    for w in grid.windows(2) {
        if w[1].lambda <= w[0].lambda {
            return Err(err(
                "lambda",
                format!("grid must be strictly increasing ({} then {})", w[0].lambda, w[1].lambda),
            ));
        }
        if w[1].total() < w[0].total() {
            return Err(err(
                "bpp_res",
                format!(
                    "bpp_mv + bpp_res must be nondecreasing in lambda ({} at {} then {} at {})",
                    w[0].total(),
                    w[0].lambda,
                    w[1].total(),
                    w[1].lambda
                ),
            ));
        }
    }
    Ok(())
}

/// Replays a [`TraceTable`]. I-frames are a λ-independent stub: the frame's
/// sample at the top of its grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TracePlant {
    table: TraceTable,
}

impl TracePlant {
    pub fn new(table: TraceTable) -> Self {
        Self { table }
    }

    pub fn table(&self) -> &TraceTable {
        &self.table
    }

    fn grid(&self, index: usize) -> Result<&[TraceSample]> {
        self.table
            .frames
            .get(index)
            .map(Vec::as_slice)
            .ok_or(Error::FrameOutOfRange {
                index,
                len: self.table.len(),
            })
    }
}

pub fn load_trace(path: &Path) -> Result<TraceTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::TraceFormat {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    TraceTable::read_csv(std::io::BufReader::new(file), path)
}

fn sample_result(s: &TraceSample, clamped: bool) -> EncodeResult {
    let (bpp_mv, bpp_res, bpp_total) = (s.bpp_mv, s.bpp_res, s.bpp_mv + s.bpp_res);
    EncodeResult {
        bpp_total,
        bpp_mv,
        bpp_res,
        distortion: s.distortion,
        motion_sparsity: s.motion_sparsity,
        warp_error: s.warp_error,
        d_rate_d_loglambda: 0.0,
        d_dist_d_loglambda: 0.0,
        clamped,
    }
}

impl CodecPlant for TracePlant {
    fn num_frames(&self) -> usize {
        self.table.len()
    }

    fn encode_frame(&self, index: usize, lambda: f64) -> Result<EncodeResult> {
        let grid = self.grid(index)?;
        let first = &grid[0];
        let last = &grid[grid.len() - 1];
        if lambda <= first.lambda {
            return Ok(sample_result(first, lambda < first.lambda));
        }
        if lambda >= last.lambda {
            return Ok(sample_result(last, lambda > last.lambda));
        }
        // First grid point strictly above lambda; exact hits return the sample.
        let hi = grid.partition_point(|s| s.lambda <= lambda);
        let (a, b) = (&grid[hi - 1], &grid[hi]);
        if a.lambda == lambda {
            let mut r = sample_result(a, false);
            let (ls, ld) = segment_slopes(a, b);
            r.d_rate_d_loglambda = ls * r.bpp_total;
            r.d_dist_d_loglambda = ld * r.distortion;
            return Ok(r);
        }
        let span = b.lambda.ln() - a.lambda.ln();
        let w = (lambda.ln() - a.lambda.ln()) / span;
        let loglerp = |x: f64, y: f64| (x.ln() + w * (y.ln() - x.ln())).exp();
        let total = loglerp(a.total(), b.total());
        let share_a = a.bpp_mv / a.total();
        let share_b = b.bpp_mv / b.total();
        let (bpp_mv, bpp_res, bpp_total) = split_rate(total, share_a + w * (share_b - share_a));
        let distortion = loglerp(a.distortion, b.distortion);
        let (ls, ld) = segment_slopes(a, b);
        Ok(EncodeResult {
            bpp_total,
            bpp_mv,
            bpp_res,
            distortion,
            motion_sparsity: a.motion_sparsity + w * (b.motion_sparsity - a.motion_sparsity),
            warp_error: loglerp(a.warp_error, b.warp_error),
            d_rate_d_loglambda: ls * bpp_total,
            d_dist_d_loglambda: ld * distortion,
            clamped: false,
        })
    }

    fn encode_iframe(&self, index: usize) -> Result<EncodeResult> {
        let grid = self.grid(index)?;
        Ok(sample_result(&grid[grid.len() - 1], false))
    }
}

// Log–log slopes of total rate and distortion over one grid segment.
fn segment_slopes(a: &TraceSample, b: &TraceSample) -> (f64, f64) {
    let span = b.lambda.ln() - a.lambda.ln();
    (
        (b.total().ln() - a.total().ln()) / span,
        (b.distortion.ln() - a.distortion.ln()) / span,
    )
}
