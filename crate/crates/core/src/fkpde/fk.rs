//! Feynman-Kac Monte Carlo with first-hitting-time stopping.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{BoundarySet, SourceFn};
use crate::error::{param_err, Result};
use crate::exec::Exec;
use crate::pcl::DriftDescriptor;
use crate::seed::{stream_rng, Purpose};

/// Paths simulated per RNG stream.
const CHUNK: usize = 256;

/// How an active drift enters the estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftMode {
    /// Euler-Maruyama with the drift in the update.
    #[default]
    Direct,
    /// Driftless paths reweighted by the Radon-Nikodym factor.
    Girsanov,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FkConfig {
    pub n_paths: usize,
    pub dt: f64,
    pub mode: DriftMode,
    pub seed: u64,
    /// Distinguishes independent estimates sharing a seed.
    pub stream: u64,
}

impl Default for FkConfig {
    fn default() -> Self {
        Self {
            n_paths: 10_000,
            dt: 1e-3,
            mode: DriftMode::Direct,
            seed: 0,
            stream: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FkEstimate {
    pub value: f64,
    /// Sample standard deviation over `sqrt(n_paths)`; infinite below two paths.
    pub stderr: f64,
    pub n_paths: usize,
    pub mean_hitting_time: f64,
}

/// Running mean / second moment, merged with Chan's update.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
    tau: f64,
}

impl Moments {
    fn push(&mut self, v: f64, tau: f64) {
        self.n += 1.0;
        let d = v - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (v - self.mean);
        self.tau += tau;
    }

    fn merge(self, o: Moments) -> Moments {
        if o.n == 0.0 {
            return self;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        Moments {
            n,
            mean: self.mean + d * o.n / n,
            m2: self.m2 + o.m2 + d * d * self.n * o.n / n,
            tau: self.tau + o.tau,
        }
    }
}

/// Estimate `u(x0, t) = E[l(X_{t^tau}) + int_0^{t^tau} l(X_s) ds]` where
/// `dX = mu dt + sigma dW` and `tau` is the first step inside `boundary`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_fk(
    x0: &[f64],
    t: f64,
    sigma: f64,
    source: SourceFn<'_>,
    boundary: &BoundarySet,
    drift: &DriftDescriptor,
    cfg: &FkConfig,
    exec: Exec,
) -> Result<FkEstimate> {
    if cfg.n_paths == 0 {
        return Err(param_err!("n_paths must be positive"));
    }
    if !(cfg.dt > 0.0) || !(t >= 0.0) || !(sigma >= 0.0) {
        return Err(param_err!("need dt > 0, t >= 0, sigma >= 0"));
    }
    boundary.validate()?;
    drift.validate(Some(x0.len()))?;
    let reweight = drift.is_active() && cfg.mode == DriftMode::Girsanov;
    if reweight && sigma == 0.0 {
        return Err(param_err!("girsanov reweighting needs sigma > 0"));
    }
    if boundary.contains(x0) {
        return Ok(FkEstimate {
            value: source(x0),
            stderr: 0.0,
            n_paths: cfg.n_paths,
            mean_hitting_time: 0.0,
        });
    }

    let steps = (t / cfg.dt - 1e-9).ceil().max(0.0) as usize;
    let h = if steps == 0 { 0.0 } else { t / steps as f64 };
    let sqrt_h = h.sqrt();
    let d = x0.len();
    let chunks = cfg.n_paths.div_ceil(CHUNK);

    let parts = exec.map(chunks, |c| {
        let mut rng = stream_rng(cfg.seed, Purpose::FeynmanKac, &[cfg.stream, c as u64]);
        let paths = CHUNK.min(cfg.n_paths - c * CHUNK);
        let mut acc = Moments::default();
        let mut x = vec![0.0; d];
        let mut mu = vec![0.0; d];
        for _ in 0..paths {
            x.copy_from_slice(x0);
            let mut integral = 0.0;
            let mut log_w = 0.0;
            let mut stopped = steps;
            for j in 0..steps {
                if boundary.contains(&x) {
                    stopped = j;
                    break;
                }
                integral += source(&x) * h;
                drift.eval(&x, &mut mu);
                for i in 0..d {
                    let dw = sqrt_h * rng.sample::<f64, _>(StandardNormal);
                    if reweight {
                        log_w += mu[i] * dw / sigma - 0.5 * mu[i] * mu[i] * h / (sigma * sigma);
                        x[i] += sigma * dw;
                    } else {
                        x[i] += mu[i] * h + sigma * dw;
                    }
                }
            }
            let v = source(&x) + integral;
            let w = if reweight { log_w.exp() } else { 1.0 };
            acc.push(w * v, stopped as f64 * h);
        }
        acc
    });

    let m = parts.into_iter().fold(Moments::default(), Moments::merge);
    let stderr = if m.n > 1.0 {
        (m.m2 / (m.n - 1.0)).sqrt() / m.n.sqrt()
    } else {
        f64::INFINITY
    };
    Ok(FkEstimate {
        value: m.mean,
        stderr,
        n_paths: cfg.n_paths,
        mean_hitting_time: m.tau / m.n,
    })
}
