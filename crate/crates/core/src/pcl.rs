//! Parabolic continual loss.
//!
//! Each training batch (optionally extended with replayed buffer rows) is
//! paired with a permutation of itself, joint feature/label Brownian bridges
//! are drawn between the pairs, and the loss is integrated along every path
//! with a left Riemann sum plus an optional terminal evaluation:
//!
//! ```text
//! L = (1 / P) sum_p w_p [ sum_{j<k} dt * l(x_j, y_j) + l(x_k, y_k) ]
//! ```
//!
//! `w_p = 1` without drift. With a drift the weight is the discretized
//! Radon-Nikodym factor, self-normalized over the batch. Gradients flow
//! through every evaluated point; bridge noise is held fixed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{sample_paired_bridges, BridgeOptions, BridgePath, BridgeSpec, NoiseKey, VarianceStrategy};
use crate::buffer::ReservoirBuffer;
use crate::error::{param_err, shape_err, PclError, Result};
use crate::exec::Exec;
use crate::net::{per_row_soft_cross_entropy, weighted_soft_cross_entropy, DenseNetwork, Matrix, ParamGrads};

/// Largest admissible log Radon-Nikodym weight.
pub const MAX_LOG_WEIGHT: f64 = 30.0;

/// Paths evaluated together in one forward/backward pass.
const PATH_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    #[default]
    None,
    /// `mu(x) = (x - center) / scale^2`, the gradient of a quadratic potential.
    GaussianPrior,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftDescriptor {
    pub kind: DriftKind,
    pub center: Vec<f64>,
    pub scale: f64,
}

impl DriftDescriptor {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn gaussian_prior(center: Vec<f64>, scale: f64) -> Self {
        Self {
            kind: DriftKind::GaussianPrior,
            center,
            scale,
        }
    }

    pub fn is_active(&self) -> bool {
        self.kind != DriftKind::None
    }

    pub fn validate(&self, dim: Option<usize>) -> Result<()> {
        if self.is_active() {
            if !(self.scale > 0.0 && self.scale.is_finite()) {
                return Err(param_err!("drift scale must be positive"));
            }
            if let Some(d) = dim {
                if self.center.len() != d {
                    return Err(shape_err!("drift center has {} dims, data has {d}", self.center.len()));
                }
            }
        }
        Ok(())
    }

    /// Drift at `x`, written into `out`.
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        match self.kind {
            DriftKind::None => out.iter_mut().for_each(|v| *v = 0.0),
            DriftKind::GaussianPrior => {
                let inv = 1.0 / (self.scale * self.scale);
                for ((o, xi), ci) in out.iter_mut().zip(x).zip(&self.center) {
                    *o = (xi - ci) * inv;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GirsanovWeight {
    pub value: f64,
    pub log_value: f64,
    pub clamped: bool,
}

/// Itô (left-point) log Radon-Nikodym factor of a path sampled on a uniform
/// grid of spacing `dt`, for unit diffusion:
/// `sum_j mu(x_j) . (x_{j+1} - x_j) - 0.5 sum_j |mu(x_j)|^2 dt`.
pub fn girsanov_log_weight(points: &Matrix, dt: f64, drift: &DriftDescriptor) -> f64 {
    let d = points.cols();
    let mut mu = vec![0.0; d];
    let mut log_w = 0.0;
    for j in 0..points.rows().saturating_sub(1) {
        let (x, next) = (points.row(j), points.row(j + 1));
        drift.eval(x, &mut mu);
        for i in 0..d {
            log_w += mu[i] * (next[i] - x[i]) - 0.5 * mu[i] * mu[i] * dt;
        }
    }
    log_w
}

/// Radon-Nikodym weight of a feature path, clamped at `exp(30)`.
pub fn girsanov_weight(path: &BridgePath, drift: &DriftDescriptor) -> Result<GirsanovWeight> {
    if !drift.is_active() {
        return Err(param_err!("girsanov weight needs an active drift"));
    }
    drift.validate(Some(path.xs.cols()))?;
    let dt = match path.times.as_slice() {
        [t0, t1, ..] => t1 - t0,
        _ => 0.0,
    };
    let raw = girsanov_log_weight(&path.xs, dt, drift);
    let clamped = !(raw <= MAX_LOG_WEIGHT);
    let log_value = if clamped { MAX_LOG_WEIGHT } else { raw };
    Ok(GirsanovWeight {
        value: log_value.exp(),
        log_value,
        clamped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PclConfig {
    pub bridge: BridgeSpec,
    /// Replay rows drawn per step; a training run sets this from its own
    /// replay batch size.
    #[serde(skip)]
    pub buffer_batch: usize,
    pub options: BridgeOptions,
    pub include_endpoints: bool,
    pub drift: DriftDescriptor,
}

impl Default for PclConfig {
    fn default() -> Self {
        Self {
            bridge: BridgeSpec::default(),
            buffer_batch: 32,
            options: BridgeOptions::default(),
            include_endpoints: true,
            drift: DriftDescriptor::none(),
        }
    }
}

impl PclConfig {
    pub fn validate(&self) -> Result<()> {
        self.bridge.validate()?;
        self.drift.validate(None)?;
        if self.options.paths_per_pair == 0 {
            return Err(param_err!("paths_per_pair must be positive"));
        }
        Ok(())
    }

    /// Quadrature weight of point `j` on a `k`-step path.
    pub fn point_weight(&self, j: usize) -> f64 {
        if j < self.bridge.steps {
            self.bridge.dt()
        } else if self.include_endpoints {
            1.0
        } else {
            0.0
        }
    }

    fn points_per_path(&self) -> usize {
        self.bridge.steps + usize::from(self.include_endpoints)
    }
}

#[derive(Debug, Clone)]
pub struct PclOutput {
    pub loss: f64,
    pub grads: ParamGrads,
    pub n_paths: usize,
    pub n_points: usize,
    /// Normalized path weights (all ones without drift).
    pub path_weights: Vec<f64>,
    pub clamped_weights: usize,
}

/// Concatenate a replay draw of `m` buffer rows onto `(x, y)`.
pub fn with_replay<R: Rng + ?Sized>(
    x: &Matrix,
    y: &Matrix,
    buf: &ReservoirBuffer,
    m: usize,
    rng: &mut R,
) -> Result<(Matrix, Matrix)> {
    if m == 0 {
        return Ok((x.clone(), y.clone()));
    }
    match buf.sample_batch(m, rng) {
        Some((bx, by)) => Ok((x.vstack(&bx)?, y.vstack(&by)?)),
        None => Ok((x.clone(), y.clone())),
    }
}

/// Per-row `||d loss / d x||_2` at the endpoints.
pub fn input_gradient_norms(net: &DenseNetwork, x: &Matrix, y: &Matrix) -> Result<Vec<f64>> {
    let (logits, cache) = net.forward(x)?;
    let (_, g) = weighted_soft_cross_entropy(&logits, y, &vec![1.0; x.rows()])?;
    let (_, gx) = net.backward(&cache, &g)?;
    Ok(gx
        .iter_rows()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}

/// Full parabolic loss on a batch plus a replay draw from `buf`.
#[allow(clippy::too_many_arguments)]
pub fn pcl_loss<R: Rng + ?Sized>(
    net: &DenseNetwork,
    x: &Matrix,
    y: &Matrix,
    buf: &ReservoirBuffer,
    cfg: &PclConfig,
    rng: &mut R,
    key: NoiseKey,
    exec: Exec,
) -> Result<PclOutput> {
    if x.rows() != y.rows() {
        return Err(shape_err!("{} feature rows vs {} label rows", x.rows(), y.rows()));
    }
    let (xa, ya) = with_replay(x, y, buf, cfg.buffer_batch, rng)?;
    pcl_loss_on_batch(net, &xa, &ya, cfg, key, exec)
}

/// Parabolic loss on an already assembled batch.
pub fn pcl_loss_on_batch(
    net: &DenseNetwork,
    x: &Matrix,
    y: &Matrix,
    cfg: &PclConfig,
    key: NoiseKey,
    exec: Exec,
) -> Result<PclOutput> {
    cfg.validate()?;
    if x.rows() == 0 {
        return Err(shape_err!("empty batch"));
    }
    if x.cols() != net.input_dim() || y.cols() != net.output_dim() {
        return Err(shape_err!(
            "batch is {}x{} / {}x{}, network maps {} -> {}",
            x.rows(),
            x.cols(),
            y.rows(),
            y.cols(),
            net.input_dim(),
            net.output_dim()
        ));
    }
    cfg.drift.validate(Some(x.cols()))?;

    let grad_norms = match cfg.options.variance {
        VarianceStrategy::Tempering => Some(input_gradient_norms(net, x, y)?),
        VarianceStrategy::Constant => None,
    };
    let paths = sample_paired_bridges(x, y, &cfg.bridge, &cfg.options, grad_norms.as_deref(), key, exec)?;
    let (path_weights, clamped) = path_weights(&paths, cfg)?;
    let n_paths = paths.len();
    let per_path = cfg.points_per_path();

    let chunks = n_paths.div_ceil(PATH_CHUNK);
    let parts = exec.map(chunks, |c| -> Result<(f64, ParamGrads)> {
        let lo = c * PATH_CHUNK;
        let hi = (lo + PATH_CHUNK).min(n_paths);
        let rows = (hi - lo) * per_path;
        let mut px = Vec::with_capacity(rows * x.cols());
        let mut py = Vec::with_capacity(rows * y.cols());
        let mut w = Vec::with_capacity(rows);
        for p in lo..hi {
            for j in 0..per_path {
                px.extend_from_slice(paths[p].xs.row(j));
                py.extend_from_slice(paths[p].ys.row(j));
                w.push(path_weights[p] * cfg.point_weight(j) / n_paths as f64);
            }
        }
        let px = Matrix::from_vec(rows, x.cols(), px)?;
        let py = Matrix::from_vec(rows, y.cols(), py)?;
        let (logits, cache) = net.forward(&px)?;
        let (loss, g) = weighted_soft_cross_entropy(&logits, &py, &w)?;
        let (grads, _) = net.backward(&cache, &g)?;
        Ok((loss, grads))
    });

    let mut loss = 0.0;
    let mut grads = ParamGrads::zeros_like(net);
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grads.add_scaled(&g, 1.0);
    }
    if !loss.is_finite() {
        return Err(PclError::Training {
            task: 0,
            step: key.step as usize,
            reason: format!("non-finite parabolic loss {loss}"),
        });
    }
    Ok(PclOutput {
        loss,
        grads,
        n_paths,
        n_points: n_paths * per_path,
        path_weights,
        clamped_weights: clamped,
    })
}

/// Self-normalized Radon-Nikodym weights (mean one), or all ones without drift.
fn path_weights(paths: &[BridgePath], cfg: &PclConfig) -> Result<(Vec<f64>, usize)> {
    if !cfg.drift.is_active() {
        return Ok((vec![1.0; paths.len()], 0));
    }
    let mut clamped = 0;
    let mut raw = Vec::with_capacity(paths.len());
    for p in paths {
        let w = girsanov_weight(p, &cfg.drift)?;
        clamped += usize::from(w.clamped);
        raw.push(w.value);
    }
    let total: f64 = raw.iter().sum();
    let n = raw.len() as f64;
    Ok((raw.iter().map(|w| w * n / total).collect(), clamped))
}

/// Mean per-sample loss of the network on `(x, y)`.
pub fn mean_loss(net: &DenseNetwork, x: &Matrix, y: &Matrix) -> Result<f64> {
    let logits = net.predict(x)?;
    let l = per_row_soft_cross_entropy(&logits, y)?;
    Ok(l.iter().sum::<f64>() / l.len().max(1) as f64)
}
