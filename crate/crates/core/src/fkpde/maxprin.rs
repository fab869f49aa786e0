//! Maximum-principle and growth-bound checks on finite-difference solutions.

use serde::{Deserialize, Serialize};

use super::{BoundarySet, FdProblem, FdSeries, Grid1D, SourceFn};
use crate::error::{param_err, Result};

/// Terminal-value problem `du/dt = -(sigma^2/2) u'' + l` on `[0, T]`,
/// `u(., T) = terminal`, `u = l` on the boundary set.
///
/// Only well posed backward in time; it is solved in reversed time
/// `s = T - t`, where it reads `du/ds = (sigma^2/2) u'' - l`.
#[derive(Clone, Copy)]
pub struct BackwardProblem<'a> {
    pub grid: Grid1D,
    pub sigma: f64,
    pub boundary: &'a BoundarySet,
    pub loss: SourceFn<'a>,
    pub terminal: SourceFn<'a>,
}

/// Frames run from the terminal time backwards; frame 0 is the terminal data.
pub fn solve_backward(p: &BackwardProblem<'_>, horizon: f64, dt: f64, record_every: usize) -> Result<FdSeries> {
    let neg = |x: &[f64]| -(p.loss)(x);
    FdProblem::new(p.grid, p.sigma, p.loss, p.boundary)
        .with_forcing(&neg)
        .with_initial(p.terminal)
        .solve(horizon, dt, record_every)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxPrincipleReport {
    /// Largest value on held nodes at any time, or anywhere in the first frame.
    pub boundary_max: f64,
    /// Largest value on free nodes after the first frame.
    pub interior_max: f64,
    /// `boundary_max - interior_max`.
    pub margin: f64,
    pub holds: bool,
}

/// Compare interior values against boundary and initial (terminal) data.
pub fn check_maximum_principle(series: &FdSeries, tol: f64) -> MaxPrincipleReport {
    let mut boundary_max = series.frames[0].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut interior_max = f64::NEG_INFINITY;
    for frame in &series.frames[1..] {
        for (v, &held) in frame.iter().zip(&series.fixed) {
            if held {
                boundary_max = boundary_max.max(*v);
            } else {
                interior_max = interior_max.max(*v);
            }
        }
    }
    let margin = boundary_max - interior_max;
    MaxPrincipleReport {
        boundary_max,
        interior_max,
        margin,
        holds: margin >= -tol || interior_max == f64::NEG_INFINITY,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub lower: f64,
    pub upper: f64,
    pub observed_min: f64,
    pub observed_max: f64,
    pub lower_margin: f64,
    pub upper_margin: f64,
    pub holds: bool,
}

/// Check `min u(., T) <= u(., T + tau) <= rate * tau + max u(., T)` between
/// frames `from` and `to` of a forward solution, for a non-negative source
/// bounded by `rate`.
pub fn check_growth_bound(series: &FdSeries, from: usize, to: usize, rate: f64, tol: f64) -> Result<GrowthReport> {
    if from > to || to >= series.frames.len() {
        return Err(param_err!("frames {from}..{to} out of range"));
    }
    let tau = series.times[to] - series.times[from];
    let (lo, hi) = min_max(&series.frames[from]);
    let (observed_min, observed_max) = min_max(&series.frames[to]);
    let upper = rate * tau + hi;
    let lower_margin = observed_min - lo;
    let upper_margin = upper - observed_max;
    Ok(GrowthReport {
        lower: lo,
        upper,
        observed_min,
        observed_max,
        lower_margin,
        upper_margin,
        holds: lower_margin >= -tol && upper_margin >= -tol,
    })
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)))
}
