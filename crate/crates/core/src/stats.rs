//! Small summary statistics shared by reports and tests.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation (`n - 1`); zero for a single value.
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = if n == 0 {
            f64::NAN
        } else {
            values.iter().sum::<f64>() / n as f64
        };
        let sd = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, sd, n }
    }

    pub fn lower(&self) -> f64 {
        self.mean - self.sd
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.sd
    }
}

/// Whether every `mean +- sd` band overlaps every other one.
pub fn bands_overlap(bands: &[MeanSd]) -> bool {
    let lo = bands.iter().map(MeanSd::lower).fold(f64::NEG_INFINITY, f64::max);
    let hi = bands.iter().map(MeanSd::upper).fold(f64::INFINITY, f64::min);
    lo <= hi
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = MeanSd::of(&lx).mean;
    let my = MeanSd::of(&ly).mean;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}
