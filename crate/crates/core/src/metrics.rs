//! Rate accuracy, BD-rate, and mini-GOP budget alignment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{FrameKind, FrameRecord};

/// Relative rate error in percent: `|actual − target| / target · 100`.
pub fn delta_r(actual: f64, target: f64) -> Result<f64> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::Metrics(format!("target rate must be > 0, got {target}")));
    }
    Ok((actual - target).abs() / target * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    /// Mean P-frame bpp.
    pub rate: f64,
    /// PSNR-equivalent, dB.
    pub quality: f64,
}

/// How log-rate is interpolated as a function of quality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BdInterpolation {
    /// Least-squares cubic polynomial.
    #[default]
    Cubic,
    /// Piecewise cubic Hermite with monotone slopes.
    Pchip,
}

const BD_SAMPLES: usize = 1000;

/// Bjøntegaard delta rate of `test` against `anchor`, in percent. Negative
/// means `test` needs less rate for the same quality.
pub fn bd_rate(anchor: &[RdPoint], test: &[RdPoint]) -> Result<f64> {
    bd_rate_with(anchor, test, BdInterpolation::Cubic)
}

pub fn bd_rate_with(anchor: &[RdPoint], test: &[RdPoint], method: BdInterpolation) -> Result<f64> {
    let a = prepare_curve("anchor", anchor)?;
    let b = prepare_curve("test", test)?;
    let lo = a.0[0].max(b.0[0]);
    let hi = a.0[a.0.len() - 1].min(b.0[b.0.len() - 1]);
    if !(hi > lo) {
        return Err(Error::Metrics(format!(
            "quality ranges do not overlap: anchor [{:.4}, {:.4}], test [{:.4}, {:.4}]",
            a.0[0],
            a.0[a.0.len() - 1],
            b.0[0],
            b.0[b.0.len() - 1]
        )));
    }
    let fa = Interpolant::fit(&a.0, &a.1, method)?;
    let fb = Interpolant::fit(&b.0, &b.1, method)?;
    let step = (hi - lo) / (BD_SAMPLES - 1) as f64;
    let diff = |i: usize| {
        let q = lo + step * i as f64;
        fb.eval(q) - fa.eval(q)
    };
    // Trapezoid rule over evenly spaced samples, divided by the interval.
    let mut sum = 0.5 * (diff(0) + diff(BD_SAMPLES - 1));
    for i in 1..BD_SAMPLES - 1 {
        sum += diff(i);
    }
    let mean = sum / (BD_SAMPLES - 1) as f64;
    Ok((mean.exp() - 1.0) * 100.0)
}

/// Sorted qualities and matching log-rates, after validation.
fn prepare_curve(name: &str, points: &[RdPoint]) -> Result<(Vec<f64>, Vec<f64>)> {
    if points.len() < 4 {
        return Err(Error::Metrics(format!(
            "{name} curve needs at least 4 points, got {}",
            points.len()
        )));
    }
    if let Some(p) = points.iter().find(|p| !(p.rate > 0.0 && p.rate.is_finite() && p.quality.is_finite())) {
        return Err(Error::Metrics(format!("{name} curve has an invalid point {p:?}")));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|x, y| x.rate.total_cmp(&y.rate));
    for w in sorted.windows(2) {
        if !(w[1].rate > w[0].rate && w[1].quality > w[0].quality) {
            return Err(Error::Metrics(format!(
                "{name} curve is not strictly increasing in rate and quality near rate {}",
                w[1].rate
            )));
        }
    }
    Ok((
        sorted.iter().map(|p| p.quality).collect(),
        sorted.iter().map(|p| p.rate.ln()).collect(),
    ))
}

enum Interpolant {
    /// Coefficients in the centered, scaled variable `(q − center) / scale`.
    Poly { coeffs: [f64; 4], center: f64, scale: f64 },
    Pchip { x: Vec<f64>, y: Vec<f64>, d: Vec<f64> },
}

impl Interpolant {
    fn fit(x: &[f64], y: &[f64], method: BdInterpolation) -> Result<Self> {
        match method {
            BdInterpolation::Cubic => {
                let center = x.iter().sum::<f64>() / x.len() as f64;
                let scale = x.iter().map(|v| (v - center).abs()).fold(0.0, f64::max).max(1e-12);
                let u: Vec<f64> = x.iter().map(|v| (v - center) / scale).collect();
                let coeffs = cubic_least_squares(&u, y)?;
                Ok(Interpolant::Poly { coeffs, center, scale })
            }
            BdInterpolation::Pchip => Ok(Interpolant::Pchip {
                x: x.to_vec(),
                y: y.to_vec(),
                d: pchip_slopes(x, y),
            }),
        }
    }

    fn eval(&self, q: f64) -> f64 {
        match self {
            Interpolant::Poly { coeffs, center, scale } => {
                let u = (q - center) / scale;
                ((coeffs[3] * u + coeffs[2]) * u + coeffs[1]) * u + coeffs[0]
            }
            Interpolant::Pchip { x, y, d } => {
                let k = match x.iter().rposition(|v| *v <= q) {
                    Some(k) => k.min(x.len() - 2),
                    None => 0,
                };
                let h = x[k + 1] - x[k];
                let t = (q - x[k]) / h;
                let (t2, t3) = (t * t, t * t * t);
                (2.0 * t3 - 3.0 * t2 + 1.0) * y[k]
                    + (t3 - 2.0 * t2 + t) * h * d[k]
                    + (-2.0 * t3 + 3.0 * t2) * y[k + 1]
                    + (t3 - t2) * h * d[k + 1]
            }
        }
    }
}

/// Least-squares cubic through `(u, y)`; coefficients in increasing degree.
fn cubic_least_squares(u: &[f64], y: &[f64]) -> Result<[f64; 4]> {
    let mut a = [[0.0; 5]; 4];
    for (&ui, &yi) in u.iter().zip(y) {
        let pow = [1.0, ui, ui * ui, ui * ui * ui];
        for r in 0..4 {
            for c in 0..4 {
                a[r][c] += pow[r] * pow[c];
            }
            a[r][4] += pow[r] * yi;
        }
    }
    // Gaussian elimination with partial pivoting on the normal equations.
    for col in 0..4 {
        let pivot = (col..4)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("nonempty range");
        if a[pivot][col].abs() < 1e-14 {
            return Err(Error::Metrics("cubic fit is singular".into()));
        }
        a.swap(col, pivot);
        for r in col + 1..4 {
            let f = a[r][col] / a[col][col];
            for c in col..5 {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    let mut coeffs = [0.0; 4];
    for r in (0..4).rev() {
        let tail: f64 = (r + 1..4).map(|c| a[r][c] * coeffs[c]).sum();
        coeffs[r] = (a[r][4] - tail) / a[r][r];
    }
    Ok(coeffs)
}

/// Fritsch–Carlson slopes.
fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = (0..n - 1).map(|k| x[k + 1] - x[k]).collect();
    let s: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        if s[k - 1] * s[k] > 0.0 {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            d[k] = (w1 + w2) / (w1 / s[k - 1] + w2 / s[k]);
        }
    }
    let end = |h0: f64, h1: f64, s0: f64, s1: f64| {
        let v = ((2.0 * h0 + h1) * s0 - h0 * s1) / (h0 + h1);
        if v.signum() != s0.signum() {
            0.0
        } else if s0.signum() != s1.signum() && v.abs() > 3.0 * s0.abs() {
            3.0 * s0
        } else {
            v
        }
    };
    d[0] = end(h[0], h[1], s[0], s[1]);
    d[n - 1] = end(h[n - 2], h[n - 3], s[n - 2], s[n - 3]);
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiniGopAlignment {
    pub minigop: usize,
    pub frames: usize,
    pub budget: f64,
    pub spent: f64,
    /// `spent / budget`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub groups: Vec<MiniGopAlignment>,
    /// Mean of `|spent − budget| / budget`, as a fraction.
    pub mean_abs_deviation: f64,
    /// Largest `|ratio − 1|`.
    pub max_ratio_deviation: f64,
    /// Mini-GOPs left out because heavy earlier overspending had driven
    /// their budget to zero or below.
    pub skipped_nonpositive: usize,
}

/// Spent versus allocated budget per mini-GOP of one run.
pub fn alignment_report(records: &[FrameRecord]) -> AlignmentReport {
    let mut groups: BTreeMap<usize, (usize, f64, f64)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.kind == FrameKind::P) {
        if let (Some(m), Some(budget)) = (r.minigop, r.minigop_budget) {
            let g = groups.entry(m).or_insert((0, budget, 0.0));
            g.0 += 1;
            g.2 += r.bpp_total;
        }
    }
    let mut report = AlignmentReport::default();
    for (minigop, (frames, budget, spent)) in groups {
        if budget <= 0.0 {
            report.skipped_nonpositive += 1;
            continue;
        }
        report.groups.push(MiniGopAlignment {
            minigop,
            frames,
            budget,
            spent,
            ratio: spent / budget,
        });
    }
    if !report.groups.is_empty() {
        let n = report.groups.len() as f64;
        report.mean_abs_deviation = report.groups.iter().map(|g| (g.ratio - 1.0).abs()).sum::<f64>() / n;
        report.max_ratio_deviation = report.groups.iter().map(|g| (g.ratio - 1.0).abs()).fold(0.0, f64::max);
    }
    report
}
