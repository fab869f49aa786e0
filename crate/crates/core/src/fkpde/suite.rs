//! Built-in 1-D problems cross-checking Feynman-Kac against finite differences.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{estimate_fk, BoundarySet, DriftMode, FdProblem, FkConfig, Grid1D};
use crate::error::{PclError, Result};
use crate::exec::Exec;
use crate::pcl::DriftDescriptor;

/// Rows whose `3 * stderr` exceeds this fraction of the reference are too
/// noisy to judge.
const MAX_REL_NOISE: f64 = 0.25;
const FD_NODES: usize = 199;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Debug, Clone)]
pub struct SuiteProblem {
    pub id: &'static str,
    pub grid: Grid1D,
    pub sigma: f64,
    pub boundary: BoundarySet,
    pub source: fn(&[f64]) -> f64,
    pub drift: DriftDescriptor,
    pub mode: DriftMode,
    pub t: f64,
    pub x0s: Vec<f64>,
    /// Relative tolerance floor of the comparison.
    pub rel_tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteOptions {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            n_paths: 10_000,
            dt: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRow {
    pub problem_id: String,
    pub x0: f64,
    pub t: f64,
    pub fd_value: f64,
    pub fk_value: f64,
    pub stderr: f64,
    pub status: Status,
}

fn offset_bump(x: &[f64]) -> f64 {
    0.5 + (-((x[0] - 0.6) / 0.15).powi(2)).exp()
}

fn constant(_: &[f64]) -> f64 {
    1.0
}

fn slope(x: &[f64]) -> f64 {
    0.25 + x[0]
}

/// The default suite: unit interval, absorbing balls at both ends, `sigma = 1`.
pub fn builtin_suite() -> Vec<SuiteProblem> {
    let grid = Grid1D {
        lo: 0.0,
        hi: 1.0,
        n: FD_NODES,
    };
    let ends = BoundarySet {
        centers: vec![vec![0.0], vec![1.0]],
        epsilon: 0.1,
    };
    let drift = DriftDescriptor::gaussian_prior(vec![0.5], 1.0);
    let base = SuiteProblem {
        id: "bump",
        grid,
        sigma: 1.0,
        boundary: ends.clone(),
        source: offset_bump,
        drift: DriftDescriptor::none(),
        mode: DriftMode::Direct,
        t: 1.0,
        x0s: vec![0.3, 0.5, 0.7],
        rel_tol: 0.05,
    };
    vec![
        base.clone(),
        SuiteProblem {
            id: "constant",
            source: constant,
            x0s: vec![0.5],
            ..base.clone()
        },
        SuiteProblem {
            id: "slope_short",
            source: slope,
            t: 0.1,
            x0s: vec![0.25, 0.5],
            ..base.clone()
        },
        SuiteProblem {
            id: "inside",
            x0s: vec![0.05],
            ..base.clone()
        },
        SuiteProblem {
            id: "drift_direct",
            drift: drift.clone(),
            x0s: vec![0.4, 0.6],
            rel_tol: 0.10,
            ..base.clone()
        },
        SuiteProblem {
            id: "drift_girsanov",
            drift,
            mode: DriftMode::Girsanov,
            x0s: vec![0.4, 0.6],
            rel_tol: 0.10,
            ..base
        },
    ]
}

pub fn judge(fd: f64, fk: f64, stderr: f64, rel_tol: f64) -> Status {
    let noisy = stderr > 0.0 && !(3.0 * stderr <= MAX_REL_NOISE * fd.abs());
    if noisy {
        Status::Inconclusive
    } else if (fk - fd).abs() <= (3.0 * stderr).max(rel_tol * fd.abs()) {
        Status::Pass
    } else {
        Status::Fail
    }
}

pub fn verify_problem(index: usize, p: &SuiteProblem, opts: &SuiteOptions, exec: Exec) -> Result<Vec<VerifyRow>> {
    let src = |x: &[f64]| (p.source)(x);
    let fd_problem = FdProblem::new(p.grid, p.sigma, &src, &p.boundary).with_drift(&p.drift);
    let fd = fd_problem.solve(p.t, 0.95 * fd_problem.stable_dt(), 0)?;
    p.x0s
        .iter()
        .enumerate()
        .map(|(j, &x0)| {
            let cfg = FkConfig {
                n_paths: opts.n_paths,
                dt: opts.dt,
                mode: p.mode,
                seed: opts.seed,
                stream: (index * 1000 + j) as u64,
            };
            let est = estimate_fk(&[x0], p.t, p.sigma, &src, &p.boundary, &p.drift, &cfg, exec)?;
            let fd_value = fd.at(x0);
            Ok(VerifyRow {
                problem_id: p.id.to_string(),
                x0,
                t: p.t,
                fd_value,
                fk_value: est.value,
                stderr: est.stderr,
                status: judge(fd_value, est.value, est.stderr, p.rel_tol),
            })
        })
        .collect()
}

pub fn verify_suite(opts: &SuiteOptions, exec: Exec) -> Result<Vec<VerifyRow>> {
    let mut rows = Vec::new();
    for (i, p) in builtin_suite().iter().enumerate() {
        rows.extend(verify_problem(i, p, opts, exec)?);
    }
    Ok(rows)
}

pub fn write_verify_csv(rows: &[VerifyRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => PclError::io(path, io),
        other => PclError::Config(format!("{other:?}")),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| PclError::io(path, e))
}
