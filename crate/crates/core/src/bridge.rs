//! Discretized Brownian bridges between paired endpoints.
//!
//! A path is built as Brownian motion started at `x0`, accumulated over `k`
//! steps of size `dt = T / k`, then pinned to `x1` by subtracting
//! `(t / T) (W_T - x1)`. The pinning is evaluated as linear interpolation
//! plus a zero-endpoint noise bridge, which is the same quantity but makes
//! the `sigma = 0` path bit-identical to `(1 - s) x0 + s x1`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::exec::Exec;
use crate::net::Matrix;
use crate::seed::{stream_rng, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeSpec {
    /// Number of time steps `k`; a path has `k + 1` points.
    pub steps: usize,
    pub sigma_x: f64,
    pub sigma_y: f64,
    /// Terminal time `T`.
    pub horizon: f64,
}

impl Default for BridgeSpec {
    fn default() -> Self {
        Self {
            steps: 4,
            sigma_x: 0.03,
            sigma_y: 0.01,
            horizon: 1.0,
        }
    }
}

impl BridgeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(param_err!("bridge needs at least one time step"));
        }
        if !(self.sigma_x >= 0.0 && self.sigma_y >= 0.0) {
            return Err(param_err!("diffusion coefficients must be non-negative"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(param_err!("terminal time must be positive"));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Fraction `t_j / T = j / k`.
    #[inline]
    pub fn fraction(&self, j: usize) -> f64 {
        j as f64 / self.steps as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|j| self.fraction(j) * self.horizon).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BridgePath {
    pub times: Vec<f64>,
    /// `(k + 1) x d`
    pub xs: Matrix,
    /// `(k + 1) x c`
    pub ys: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingStrategy {
    #[default]
    RandomShuffle,
    /// Sort rows by distance to the batch centroid and pair the i-th nearest
    /// with the i-th farthest.
    EuclideanSorted,
    /// Every row is paired with itself.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceStrategy {
    #[default]
    Constant,
    /// Per-step diffusion interpolated between the endpoints' normalized
    /// input-gradient norms.
    Tempering,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSharing {
    /// Independent noise for every endpoint pair.
    #[default]
    PerPair,
    /// A single noise realization reused by every pair in the batch.
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeOptions {
    pub pairing: PairingStrategy,
    pub variance: VarianceStrategy,
    pub sharing: NoiseSharing,
    pub paths_per_pair: usize,
}

impl Default for BridgeOptions {
    fn default() -> Self {
        Self {
            pairing: PairingStrategy::RandomShuffle,
            variance: VarianceStrategy::Constant,
            sharing: NoiseSharing::PerPair,
            paths_per_pair: 1,
        }
    }
}

/// Identifies the noise streams of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseKey {
    pub seed: u64,
    pub step: u64,
}

/// Accumulate `k` Gaussian increments into a bridge from `x0` to `x1`.
///
/// `sigma_at(j)` is the diffusion applied to the increment from `t_j` to
/// `t_{j+1}`. Rows of `out` receive the `k + 1` path points.
fn fill_bridge<R: Rng + ?Sized>(
    x0: &[f64],
    x1: &[f64],
    spec: &BridgeSpec,
    sigma_at: impl Fn(usize) -> f64,
    rng: &mut R,
    out: &mut Matrix,
) {
    let k = spec.steps;
    let d = x0.len();
    let sqrt_dt = spec.dt().sqrt();
    // walk[j] = W_{t_j} - x0, running sum of increments
    let mut walk = Matrix::zeros(k + 1, d);
    for j in 0..k {
        let sigma = sigma_at(j);
        for i in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            let prev = walk.get(j, i);
            walk.set(j + 1, i, prev + sigma * sqrt_dt * z);
        }
    }
    for j in 0..=k {
        let s = spec.fraction(j);
        for i in 0..d {
            let noise = walk.get(j, i) - s * walk.get(k, i);
            out.set(j, i, (1.0 - s) * x0[i] + s * x1[i] + noise);
        }
    }
    out.row_mut(0).copy_from_slice(x0);
    out.row_mut(k).copy_from_slice(x1);
}

/// One bridge from `x0` to `x1` with constant diffusion `sigma`.
pub fn sample_bridge<R: Rng + ?Sized>(
    x0: &[f64],
    x1: &[f64],
    sigma: f64,
    spec: &BridgeSpec,
    rng: &mut R,
) -> Result<Matrix> {
    spec.validate()?;
    if x0.len() != x1.len() {
        return Err(shape_err!("endpoints have {} and {} dims", x0.len(), x1.len()));
    }
    if !(sigma >= 0.0) {
        return Err(param_err!("sigma must be non-negative"));
    }
    let mut out = Matrix::zeros(spec.steps + 1, x0.len());
    fill_bridge(x0, x1, spec, |_| sigma, rng, &mut out);
    Ok(out)
}

/// Endpoint permutation: row `i` travels to row `perm[i]`.
pub fn pairing_permutation<R: Rng + ?Sized>(x: &Matrix, strategy: PairingStrategy, rng: &mut R) -> Vec<usize> {
    let n = x.rows();
    match strategy {
        PairingStrategy::Identity => (0..n).collect(),
        PairingStrategy::RandomShuffle => {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(rng);
            p
        }
        PairingStrategy::EuclideanSorted => {
            let d = x.cols();
            let mut centroid = vec![0.0; d];
            for r in x.iter_rows() {
                centroid.iter_mut().zip(r).for_each(|(c, v)| *c += v);
            }
            centroid.iter_mut().for_each(|c| *c /= n.max(1) as f64);
            let dist: Vec<f64> = x
                .iter_rows()
                .map(|r| r.iter().zip(&centroid).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
            let mut p = vec![0; n];
            for (rank, &row) in order.iter().enumerate() {
                p[row] = order[n - 1 - rank];
            }
            p
        }
    }
}

/// Normalize gradient norms by their batch mean so the average diffusion
/// matches the constant strategy. An all-zero batch maps to all ones.
pub fn normalized_grad_norms(norms: &[f64]) -> Vec<f64> {
    let mean = norms.iter().sum::<f64>() / norms.len().max(1) as f64;
    if mean > 0.0 && mean.is_finite() {
        norms.iter().map(|g| g / mean).collect()
    } else {
        vec![1.0; norms.len()]
    }
}

/// One joint `(x, y)` bridge per endpoint pair (times `paths_per_pair`).
///
/// Paths are ordered pair-major. The noise for pair `i`, repetition `r` comes
/// from its own stream keyed by `(seed, step, i, r)`, so the result does not
/// depend on `exec`.
pub fn sample_paired_bridges(
    x: &Matrix,
    y: &Matrix,
    spec: &BridgeSpec,
    opts: &BridgeOptions,
    grad_norms: Option<&[f64]>,
    key: NoiseKey,
    exec: Exec,
) -> Result<Vec<BridgePath>> {
    spec.validate()?;
    if x.rows() != y.rows() {
        return Err(shape_err!("{} feature rows vs {} label rows", x.rows(), y.rows()));
    }
    if opts.paths_per_pair == 0 {
        return Err(param_err!("paths_per_pair must be positive"));
    }
    let n = x.rows();
    let tempering = match (opts.variance, grad_norms) {
        (VarianceStrategy::Constant, _) => None,
        (VarianceStrategy::Tempering, Some(g)) if g.len() == n => Some(normalized_grad_norms(g)),
        (VarianceStrategy::Tempering, Some(g)) => return Err(param_err!("{} gradient norms for {n} rows", g.len())),
        (VarianceStrategy::Tempering, None) => return Err(param_err!("tempering requires endpoint gradient norms")),
    };
    let mut pair_rng = stream_rng(key.seed, Purpose::Pairing, &[key.step]);
    let perm = pairing_permutation(x, opts.pairing, &mut pair_rng);
    let times = spec.times();
    let reps = opts.paths_per_pair;

    let paths = exec.map(n * reps, |idx| {
        let (i, r) = (idx / reps, idx % reps);
        let j = perm[i];
        let noise_pair = match opts.sharing {
            NoiseSharing::PerPair => i as u64,
            NoiseSharing::Shared => 0,
        };
        let mut rng = stream_rng(key.seed, Purpose::Bridge, &[key.step, noise_pair, r as u64]);
        let scale = |base: f64| {
            let g = tempering.as_ref().map(|g| (g[i], g[j]));
            move |step: usize| match g {
                None => base,
                Some((gs, ge)) => {
                    let s = spec.fraction(step);
                    base * ((1.0 - s) * gs + s * ge)
                }
            }
        };
        let mut xs = Matrix::zeros(spec.steps + 1, x.cols());
        let mut ys = Matrix::zeros(spec.steps + 1, y.cols());
        fill_bridge(x.row(i), x.row(j), spec, scale(spec.sigma_x), &mut rng, &mut xs);
        fill_bridge(y.row(i), y.row(j), spec, scale(spec.sigma_y), &mut rng, &mut ys);
        BridgePath {
            times: times.clone(),
            xs,
            ys,
        }
    });
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(k: usize, sx: f64, sy: f64) -> BridgeSpec {
        BridgeSpec {
            steps: k,
            sigma_x: sx,
            sigma_y: sy,
            horizon: 1.0,
        }
    }

    #[test]
    fn zero_steps_is_a_parameter_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_bridge(&[0.0], &[1.0], 1.0, &spec(0, 1.0, 1.0), &mut rng).is_err());
        assert!(sample_bridge(&[0.0], &[1.0, 2.0], 1.0, &spec(3, 1.0, 1.0), &mut rng).is_err());
    }

    #[test]
    fn zero_sigma_is_exact_linear_interpolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = ([0.3, -1.7, 2.2], [1.1, 0.4, -0.9]);
        let s = spec(7, 0.0, 0.0);
        let p = sample_bridge(&a, &b, 0.0, &s, &mut rng).unwrap();
        for j in 0..=7 {
            let t = j as f64 / 7.0;
            for i in 0..3 {
                assert_eq!(p.get(j, i), (1.0 - t) * a[i] + t * b[i]);
            }
        }
    }

    #[test]
    fn endpoints_are_pinned() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in [1, 2, 5, 13] {
            let p = sample_bridge(&[0.1, 0.7], &[-3.0, 9.5], 2.5, &spec(k, 0.0, 0.0), &mut rng).unwrap();
            assert_eq!(p.row(0), &[0.1, 0.7]);
            assert_eq!(p.row(k), &[-3.0, 9.5]);
        }
    }

    #[test]
    fn two_rows_pair_mutually_under_every_non_identity_strategy() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [3.0, 4.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            pairing_permutation(&x, PairingStrategy::EuclideanSorted, &mut rng),
            vec![1, 0]
        );
        // shuffle of two rows is either identity or a swap; both are permutations
        let p = pairing_permutation(&x, PairingStrategy::RandomShuffle, &mut rng);
        assert!(p == vec![1, 0] || p == vec![0, 1]);
    }

    #[test]
    fn euclidean_pairing_is_an_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Matrix::from_vec(9, 3, (0..27).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let p = pairing_permutation(&x, PairingStrategy::EuclideanSorted, &mut rng);
        let mut seen = p.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..9).collect::<Vec<_>>());
        for i in 0..9 {
            assert_eq!(p[p[i]], i);
        }
    }

    #[test]
    fn zero_diffusion_paths_are_straight_lines() {
        let x = Matrix::from_rows(&[[0.0, 1.0], [2.0, 3.0], [-1.0, 0.5]]).unwrap();
        let y = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]).unwrap();
        let s = spec(4, 0.0, 0.0);
        let key = NoiseKey { seed: 3, step: 0 };
        let paths = sample_paired_bridges(&x, &y, &s, &BridgeOptions::default(), None, key, Exec::Sequential).unwrap();
        for p in &paths {
            for j in 0..=4 {
                let t = j as f64 / 4.0;
                for i in 0..2 {
                    let lin = (1.0 - t) * p.xs.get(0, i) + t * p.xs.get(4, i);
                    assert!((p.xs.get(j, i) - lin).abs() < 1e-15);
                    let lin = (1.0 - t) * p.ys.get(0, i) + t * p.ys.get(4, i);
                    assert!((p.ys.get(j, i) - lin).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn seeded_paths_replay_bit_identically() {
        let x = Matrix::from_rows(&[[0.0, 1.0], [2.0, 3.0], [-1.0, 0.5], [4.0, 4.0]]).unwrap();
        let y = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let s = spec(5, 0.3, 0.1);
        let key = NoiseKey { seed: 42, step: 17 };
        let o = BridgeOptions::default();
        let a = sample_paired_bridges(&x, &y, &s, &o, None, key, Exec::Parallel).unwrap();
        let b = sample_paired_bridges(&x, &y, &s, &o, None, key, Exec::Sequential).unwrap();
        assert_eq!(a, b);
        let c = sample_paired_bridges(&x, &y, &s, &o, None, NoiseKey { seed: 43, step: 17 }, Exec::Sequential).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn tempering_requires_gradient_norms() {
        let x = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let y = Matrix::from_rows(&[[1.0], [1.0]]).unwrap();
        let o = BridgeOptions {
            variance: VarianceStrategy::Tempering,
            ..Default::default()
        };
        let key = NoiseKey { seed: 0, step: 0 };
        let s = spec(3, 0.1, 0.1);
        assert!(sample_paired_bridges(&x, &y, &s, &o, None, key, Exec::Sequential).is_err());
        assert!(sample_paired_bridges(&x, &y, &s, &o, Some(&[1.0]), key, Exec::Sequential).is_err());
        assert!(sample_paired_bridges(&x, &y, &s, &o, Some(&[1.0, 3.0]), key, Exec::Sequential).is_ok());
    }

    #[test]
    fn tempering_with_uniform_norms_matches_constant() {
        let x = Matrix::from_rows(&[[0.0, 1.0], [2.0, 3.0], [-1.0, 0.5]]).unwrap();
        let y = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]).unwrap();
        let s = spec(4, 0.2, 0.05);
        let key = NoiseKey { seed: 8, step: 2 };
        let c = sample_paired_bridges(&x, &y, &s, &BridgeOptions::default(), None, key, Exec::Sequential).unwrap();
        let o = BridgeOptions {
            variance: VarianceStrategy::Tempering,
            ..Default::default()
        };
        let t = sample_paired_bridges(&x, &y, &s, &o, Some(&[2.0, 2.0, 2.0]), key, Exec::Sequential).unwrap();
        for (a, b) in c.iter().zip(&t) {
            assert!(a.xs.max_abs_diff(&b.xs) < 1e-15);
        }
    }

    #[test]
    fn shared_noise_reuses_one_realization() {
        let x = Matrix::from_rows(&[[0.0], [0.0], [0.0]]).unwrap();
        let y = Matrix::from_rows(&[[0.0], [0.0], [0.0]]).unwrap();
        let s = spec(6, 1.0, 0.0);
        let o = BridgeOptions {
            pairing: PairingStrategy::Identity,
            sharing: NoiseSharing::Shared,
            ..Default::default()
        };
        let p = sample_paired_bridges(&x, &y, &s, &o, None, NoiseKey { seed: 1, step: 1 }, Exec::Sequential).unwrap();
        assert_eq!(p[0].xs, p[1].xs);
        assert_eq!(p[1].xs, p[2].xs);
        assert!(p[0].xs.get(3, 0) != 0.0);
    }
}
