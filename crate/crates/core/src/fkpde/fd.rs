//! Explicit finite differences in one dimension.

use super::{BoundarySet, Grid1D, SourceFn};
use crate::error::{param_err, Result};
use crate::pcl::DriftDescriptor;

/// A 1-D problem `du/dt = (sigma^2/2) u'' + mu u' + forcing`, with `u` held
/// at `boundary_value` on the boundary set and at both grid ends.
#[derive(Clone, Copy)]
pub struct FdProblem<'a> {
    pub grid: Grid1D,
    pub sigma: f64,
    pub boundary: &'a BoundarySet,
    pub drift: Option<&'a DriftDescriptor>,
    pub forcing: SourceFn<'a>,
    pub boundary_value: SourceFn<'a>,
    pub initial: SourceFn<'a>,
}

impl<'a> FdProblem<'a> {
    /// Forcing, boundary data and initial condition all equal to `source`.
    pub fn new(grid: Grid1D, sigma: f64, source: SourceFn<'a>, boundary: &'a BoundarySet) -> Self {
        Self {
            grid,
            sigma,
            boundary,
            drift: None,
            forcing: source,
            boundary_value: source,
            initial: source,
        }
    }

    pub fn with_drift(mut self, drift: &'a DriftDescriptor) -> Self {
        self.drift = drift.is_active().then_some(drift);
        self
    }

    pub fn with_forcing(mut self, f: SourceFn<'a>) -> Self {
        self.forcing = f;
        self
    }

    pub fn with_boundary_value(mut self, f: SourceFn<'a>) -> Self {
        self.boundary_value = f;
        self
    }

    pub fn with_initial(mut self, f: SourceFn<'a>) -> Self {
        self.initial = f;
        self
    }

    fn drift_at(&self, x: f64) -> f64 {
        let mut mu = [0.0];
        if let Some(d) = self.drift {
            d.eval(&[x], &mut mu);
        }
        mu[0]
    }

    /// Largest stable explicit step: `1 / (sigma^2 / dx^2 + max|mu| / dx)`.
    pub fn stable_dt(&self) -> f64 {
        let dx = self.grid.dx();
        let mu_max = self
            .grid
            .nodes()
            .iter()
            .map(|&x| self.drift_at(x).abs())
            .fold(0.0, f64::max);
        1.0 / (self.sigma * self.sigma / (dx * dx) + mu_max / dx)
    }

    /// March to `t_final`. Every `record_every` steps a frame is stored
    /// (0 keeps only the initial and final frames). The step is shrunk so
    /// an integer number of steps lands exactly on `t_final`.
    pub fn solve(&self, t_final: f64, dt: f64, record_every: usize) -> Result<FdSeries> {
        self.grid.validate()?;
        self.boundary.validate()?;
        if let Some(d) = self.drift {
            d.validate(Some(1))?;
        }
        if self.boundary.centers.iter().any(|c| c.len() != 1) {
            return Err(param_err!("finite differences need 1-D boundary centers"));
        }
        if !(self.sigma >= 0.0) || !(t_final >= 0.0) || !(dt > 0.0) {
            return Err(param_err!("need sigma >= 0, t_final >= 0, dt > 0"));
        }
        let limit = self.stable_dt();
        if dt > limit * (1.0 + 1e-12) {
            return Err(param_err!("dt = {dt:e} exceeds the explicit stability limit {limit:e}"));
        }

        let nodes = self.grid.nodes();
        let m = nodes.len();
        let fixed: Vec<bool> = nodes
            .iter()
            .enumerate()
            .map(|(i, &x)| i == 0 || i == m - 1 || self.boundary.contains(&[x]))
            .collect();
        let forcing: Vec<f64> = nodes.iter().map(|&x| (self.forcing)(&[x])).collect();
        let drift: Vec<f64> = nodes.iter().map(|&x| self.drift_at(x)).collect();
        let mut u: Vec<f64> = nodes
            .iter()
            .zip(&fixed)
            .map(|(&x, &f)| {
                if f {
                    (self.boundary_value)(&[x])
                } else {
                    (self.initial)(&[x])
                }
            })
            .collect();
        if u.iter().chain(&forcing).any(|v| !v.is_finite()) {
            return Err(param_err!("source is not finite on the grid"));
        }

        let steps = (t_final / dt - 1e-9).ceil().max(0.0) as usize;
        let h = if steps == 0 { 0.0 } else { t_final / steps as f64 };
        let dx = self.grid.dx();
        let diff = 0.5 * self.sigma * self.sigma / (dx * dx);

        let mut times = vec![0.0];
        let mut frames = vec![u.clone()];
        let mut next = u.clone();
        for s in 1..=steps {
            for i in 1..m - 1 {
                if fixed[i] {
                    continue;
                }
                let lap = u[i + 1] - 2.0 * u[i] + u[i - 1];
                let adv = if drift[i] > 0.0 {
                    drift[i] * (u[i + 1] - u[i]) / dx
                } else {
                    drift[i] * (u[i] - u[i - 1]) / dx
                };
                next[i] = u[i] + h * (diff * lap + adv + forcing[i]);
            }
            std::mem::swap(&mut u, &mut next);
            if s == steps || (record_every > 0 && s % record_every == 0) {
                times.push(s as f64 * h);
                frames.push(u.clone());
            }
        }
        Ok(FdSeries {
            nodes,
            times,
            frames,
            fixed,
        })
    }
}

/// Grid solution, one frame per recorded time.
#[derive(Debug, Clone, PartialEq)]
pub struct FdSeries {
    pub nodes: Vec<f64>,
    pub times: Vec<f64>,
    pub frames: Vec<Vec<f64>>,
    /// Nodes held at boundary data (grid ends and boundary-set members).
    pub fixed: Vec<bool>,
}

impl FdSeries {
    pub fn last(&self) -> &[f64] {
        self.frames.last().expect("series has at least one frame")
    }

    /// Linear interpolation of the final frame at `x`.
    pub fn at(&self, x: f64) -> f64 {
        interpolate(&self.nodes, self.last(), x)
    }
}

fn interpolate(nodes: &[f64], u: &[f64], x: f64) -> f64 {
    let m = nodes.len();
    let dx = nodes[1] - nodes[0];
    let pos = ((x - nodes[0]) / dx).clamp(0.0, (m - 1) as f64);
    let i = (pos.floor() as usize).min(m - 2);
    let w = pos - i as f64;
    if w == 0.0 {
        return u[i];
    }
    (1.0 - w) * u[i] + w * u[i + 1]
}

/// Driftless solve where source, boundary data and initial condition coincide.
pub fn solve_fd(
    grid: Grid1D,
    sigma: f64,
    source: SourceFn<'_>,
    boundary: &BoundarySet,
    t_final: f64,
    dt: f64,
) -> Result<FdSeries> {
    FdProblem::new(grid, sigma, source, boundary).solve(t_final, dt, 0)
}

/// Largest stable explicit step for a driftless problem.
pub fn stable_dt(grid: Grid1D, sigma: f64) -> f64 {
    let dx = grid.dx();
    dx * dx / (sigma * sigma)
}
