//! Reference solvers for the parabolic equation behind the learner.
//!
//! On low-dimensional domains the equation
//!
//! ```text
//! du/dt = (sigma^2 / 2) u'' + mu(x) u' + l(x),   u(x, 0) = l(x),
//! u = l on the boundary set
//! ```
//!
//! is solved twice: by an explicit finite-difference march on a uniform grid
//! and by Feynman-Kac Monte Carlo with first-hitting-time stopping. The two
//! must agree; the suite in [`suite`] cross-checks them.

mod fd;
mod fk;
mod maxprin;
pub mod suite;

pub use fd::{solve_fd, stable_dt, FdProblem, FdSeries};
pub use fk::{estimate_fk, DriftMode, FkConfig, FkEstimate};
pub use maxprin::{
    check_growth_bound, check_maximum_principle, solve_backward, BackwardProblem, GrowthReport, MaxPrincipleReport,
};

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};

/// A scalar field evaluated at a point.
pub type SourceFn<'a> = &'a (dyn Fn(&[f64]) -> f64 + Sync);

/// Uniform grid on `[lo, hi]` with `n` interior nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Grid1D {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        let g = Self { lo, hi, n };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) {
            return Err(param_err!("grid needs lo < hi, got [{}, {}]", self.lo, self.hi));
        }
        if self.n < 3 {
            return Err(param_err!("grid needs at least 3 interior nodes, got {}", self.n));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        (self.hi - self.lo) / (self.n + 1) as f64
    }

    /// All `n + 2` node positions, ends included.
    pub fn nodes(&self) -> Vec<f64> {
        let dx = self.dx();
        (0..self.n + 2).map(|i| self.lo + i as f64 * dx).collect()
    }
}

/// Union of closed balls `|x - c| <= epsilon` around buffer points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySet {
    pub centers: Vec<Vec<f64>>,
    pub epsilon: f64,
}

impl BoundarySet {
    pub fn new(centers: Vec<Vec<f64>>, epsilon: f64) -> Result<Self> {
        let b = Self { centers, epsilon };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(param_err!("boundary radius must be positive"));
        }
        if self.centers.is_empty() {
            return Err(param_err!("boundary set has no centers"));
        }
        Ok(())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        let eps2 = self.epsilon * self.epsilon;
        self.centers.iter().any(|c| {
            let d2: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            d2 <= eps2
        })
    }
}
