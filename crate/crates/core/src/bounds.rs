//! Empirical checks of the forgetting and generalization inequalities.
//!
//! The continual loss profile `u(x, t)` is estimated by mean losses over
//! sample sets, and buffer contents stand in for the boundary of the
//! buffer's hull. Everything here is a diagnostic: rows carry margins
//! (`bound - observed`, non-negative when the inequality holds) and flags.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::Sample;
use crate::error::{PclError, Result};
use crate::net::{per_row_soft_cross_entropy, DenseNetwork, Matrix};
use crate::seed::{derive_key, stream_rng, Purpose};
use crate::streams::EvalSet;
use crate::trainer::Checkpoint;

/// Segment offset used for the finite-difference slopes.
const SLOPE_STEP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub max: f64,
    pub min: f64,
    pub mean: f64,
    pub count: usize,
}

fn summarize(losses: &[f64]) -> LossSummary {
    let n = losses.len();
    LossSummary {
        max: losses.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        min: losses.iter().copied().fold(f64::INFINITY, f64::min),
        mean: if n == 0 {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / n as f64
        },
        count: n,
    }
}

fn buffer_matrices(buffer: &[Sample]) -> Result<(Matrix, Matrix)> {
    let d = buffer[0].features.len();
    let c = buffer[0].label.len();
    let x = Matrix::from_vec(
        buffer.len(),
        d,
        buffer.iter().flat_map(|s| s.features.clone()).collect(),
    )?;
    let y = Matrix::from_vec(buffer.len(), c, buffer.iter().flat_map(|s| s.label.clone()).collect())?;
    Ok((x, y))
}

pub fn buffer_losses(net: &DenseNetwork, buffer: &[Sample]) -> Result<Vec<f64>> {
    if buffer.is_empty() {
        return Ok(Vec::new());
    }
    let (x, y) = buffer_matrices(buffer)?;
    per_row_soft_cross_entropy(&net.predict(&x)?, &y)
}

pub fn mean_set_loss(net: &DenseNetwork, set: &EvalSet) -> Result<f64> {
    if set.labels.is_empty() {
        return Ok(f64::NAN);
    }
    let l = per_row_soft_cross_entropy(&net.predict(&set.x)?, &set.y)?;
    Ok(l.iter().sum::<f64>() / l.len() as f64)
}

/// Largest slope `|l(a) - l(b)| / |a - b|` over `pairs` random short
/// segments between buffer points, in joint feature-label space.
pub fn estimate_lipschitz(net: &DenseNetwork, buffer: &[Sample], pairs: usize, seed: u64) -> Result<f64> {
    if buffer.len() < 2 || pairs == 0 {
        return Ok(0.0);
    }
    let mut rng = stream_rng(seed, Purpose::Lipschitz, &[]);
    let d = buffer[0].features.len();
    let c = buffer[0].label.len();
    let mut xs = Vec::with_capacity(2 * pairs * d);
    let mut ys = Vec::with_capacity(2 * pairs * c);
    let mut gaps = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let i = rng.random_range(0..buffer.len());
        let mut j = rng.random_range(0..buffer.len() - 1);
        if j >= i {
            j += 1;
        }
        let lam = rng.random_range(0.0..1.0 - SLOPE_STEP);
        let (a, b) = (&buffer[i], &buffer[j]);
        let mut gap2 = 0.0;
        for (lam, push_gap) in [(lam, false), (lam + SLOPE_STEP, true)] {
            for (p, q) in a.features.iter().zip(&b.features) {
                xs.push((1.0 - lam) * p + lam * q);
                if push_gap {
                    gap2 += (SLOPE_STEP * (q - p)).powi(2);
                }
            }
            for (p, q) in a.label.iter().zip(&b.label) {
                ys.push((1.0 - lam) * p + lam * q);
                if push_gap {
                    gap2 += (SLOPE_STEP * (q - p)).powi(2);
                }
            }
        }
        gaps.push(gap2.sqrt());
    }
    let x = Matrix::from_vec(2 * pairs, d, xs)?;
    let y = Matrix::from_vec(2 * pairs, c, ys)?;
    let l = per_row_soft_cross_entropy(&net.predict(&x)?, &y)?;
    Ok(gaps
        .iter()
        .enumerate()
        .filter(|(_, g)| **g > 0.0)
        .map(|(k, g)| (l[2 * k] - l[2 * k + 1]).abs() / g)
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingRow {
    pub task: usize,
    pub buffer: LossSummary,
    /// Mean loss on held-out data of the first task.
    pub earlier_task_loss: f64,
    /// Mean loss on held-out data of the task just trained.
    pub latest_task_loss: f64,
    /// `max buffer loss - earlier task loss`
    pub forgetting_margin: f64,
    /// `mean buffer loss - earlier task loss`
    pub mean_margin: f64,
    pub holds: bool,
}

/// After each task, the first task's loss should not exceed the largest
/// loss over buffer contents.
pub fn check_forgetting(checkpoints: &[Checkpoint], eval: &[EvalSet]) -> Result<Vec<ForgettingRow>> {
    checkpoints
        .iter()
        .map(|cp| {
            let buffer = summarize(&buffer_losses(&cp.net, &cp.buffer)?);
            let earlier = mean_set_loss(&cp.net, &eval[0])?;
            let latest = mean_set_loss(&cp.net, &eval[cp.task])?;
            let margin = buffer.max - earlier;
            Ok(ForgettingRow {
                task: cp.task,
                buffer,
                earlier_task_loss: earlier,
                latest_task_loss: latest,
                forgetting_margin: margin,
                mean_margin: buffer.mean - earlier,
                holds: margin >= 0.0,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationRow {
    pub task: usize,
    /// Task gap to the final task.
    pub tau: usize,
    pub lipschitz: f64,
    pub future_task_loss: f64,
    pub buffer: LossSummary,
    /// `future loss - min buffer loss`
    pub lower_margin: f64,
    /// `C tau + max buffer loss - future loss`
    pub upper_margin: f64,
    pub lower_holds: bool,
    pub upper_holds: bool,
}

/// At each checkpoint compare the final task's loss against
/// `[min buffer loss, C tau + max buffer loss]`.
pub fn check_generalization(
    checkpoints: &[Checkpoint],
    eval: &[EvalSet],
    lipschitz: &[f64],
) -> Result<Vec<GeneralizationRow>> {
    let last = eval.len() - 1;
    checkpoints
        .iter()
        .zip(lipschitz)
        .map(|(cp, &c)| {
            let buffer = summarize(&buffer_losses(&cp.net, &cp.buffer)?);
            let future = mean_set_loss(&cp.net, &eval[last])?;
            let tau = last.saturating_sub(cp.task);
            let lower_margin = future - buffer.min;
            let upper_margin = c * tau as f64 + buffer.max - future;
            Ok(GeneralizationRow {
                task: cp.task,
                tau,
                lipschitz: c,
                future_task_loss: future,
                buffer,
                lower_margin,
                upper_margin,
                lower_holds: lower_margin >= 0.0,
                upper_holds: upper_margin >= 0.0,
            })
        })
        .collect()
}

/// One flattened CSV row per checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub schema_version: u32,
    pub seed: u64,
    pub task: usize,
    pub tau: usize,
    pub buffer_size: usize,
    pub buffer_loss_max: f64,
    pub buffer_loss_min: f64,
    pub buffer_loss_mean: f64,
    pub earlier_task_loss: f64,
    pub latest_task_loss: f64,
    pub future_task_loss: f64,
    pub lipschitz: f64,
    pub forgetting_margin: f64,
    pub mean_margin: f64,
    pub lower_margin: f64,
    pub upper_margin: f64,
    pub forgetting_holds: bool,
    pub lower_holds: bool,
    pub upper_holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub rows: Vec<BoundRow>,
}

impl BoundReport {
    /// Forgetting inequality held at every checkpoint.
    pub fn forgetting_pattern(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.forgetting_holds)
    }

    /// Lower generalization inequality held at every checkpoint.
    pub fn lower_pattern(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.lower_holds)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_bound_rows(&self.rows, path)
    }
}

pub fn write_bound_rows(rows: &[BoundRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => PclError::io(path, io),
        other => PclError::Config(format!("{other:?}")),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| PclError::io(path, e))
}

/// Full report for one run. `lipschitz_pairs` segments are sampled per
/// checkpoint with streams derived from `seed`.
pub fn bound_report(
    checkpoints: &[Checkpoint],
    eval: &[EvalSet],
    seed: u64,
    lipschitz_pairs: usize,
) -> Result<BoundReport> {
    let lips = checkpoints
        .iter()
        .map(|cp| {
            estimate_lipschitz(
                &cp.net,
                &cp.buffer,
                lipschitz_pairs,
                derive_key(seed, Purpose::Lipschitz, &[cp.task as u64]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let forgetting = check_forgetting(checkpoints, eval)?;
    let general = check_generalization(checkpoints, eval, &lips)?;
    let rows = forgetting
        .into_iter()
        .zip(general)
        .zip(checkpoints)
        .map(|((f, g), cp)| BoundRow {
            schema_version: crate::trainer::SCHEMA_VERSION,
            seed,
            task: f.task,
            tau: g.tau,
            buffer_size: cp.buffer.len(),
            buffer_loss_max: f.buffer.max,
            buffer_loss_min: f.buffer.min,
            buffer_loss_mean: f.buffer.mean,
            earlier_task_loss: f.earlier_task_loss,
            latest_task_loss: f.latest_task_loss,
            future_task_loss: g.future_task_loss,
            lipschitz: g.lipschitz,
            forgetting_margin: f.forgetting_margin,
            mean_margin: f.mean_margin,
            lower_margin: g.lower_margin,
            upper_margin: g.upper_margin,
            forgetting_holds: f.holds,
            lower_holds: g.lower_holds,
            upper_holds: g.upper_holds,
        })
        .collect();
    Ok(BoundReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::one_hot;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_net(d: usize, c: usize) -> DenseNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = DenseNetwork::init(&[d, c], &mut rng).unwrap();
        let n = net.param_count();
        net.set_params(&vec![0.0; n]).unwrap();
        net
    }

    fn sample(x: Vec<f64>, label: usize, c: usize) -> Sample {
        let mut y = vec![0.0; c];
        y[label] = 1.0;
        Sample {
            features: x,
            label: y,
            task_id: 0,
            stream_index: 0,
        }
    }

    #[test]
    fn constant_logits_give_chance_level_losses() {
        let net = zero_net(2, 4);
        let buffer: Vec<Sample> = (0..6).map(|i| sample(vec![i as f64, 1.0], i % 4, 4)).collect();
        let set = EvalSet {
            task_id: 0,
            classes: vec![0, 1],
            x: Matrix::from_rows(&[[0.0, 1.0], [2.0, 3.0]]).unwrap(),
            y: one_hot(&[0, 1], 4),
            labels: vec![0, 1],
        };
        let cp = Checkpoint {
            task: 0,
            net: net.clone(),
            buffer: buffer.clone(),
        };
        let rows = check_forgetting(std::slice::from_ref(&cp), std::slice::from_ref(&set)).unwrap();
        let ln4 = 4f64.ln();
        approx::assert_relative_eq!(rows[0].buffer.max, ln4, epsilon = 1e-12);
        approx::assert_relative_eq!(rows[0].earlier_task_loss, ln4, epsilon = 1e-12);
        assert!(rows[0].forgetting_margin.abs() < 1e-12);
        // constant loss along every segment
        assert!(estimate_lipschitz(&net, &buffer, 100, 0).unwrap() < 1e-12);

        let g = check_generalization(&[cp], &[set], &[0.0]).unwrap();
        assert_eq!(g[0].tau, 0);
        assert!(g[0].upper_margin.abs() < 1e-12);
    }

    #[test]
    fn zero_horizon_upper_bound_is_max_buffer_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = DenseNetwork::init(&[2, 5, 3], &mut rng).unwrap();
        let buffer: Vec<Sample> = (0..10)
            .map(|i| sample(vec![rng.random(), rng.random()], i % 3, 3))
            .collect();
        let set = EvalSet {
            task_id: 0,
            classes: vec![0, 1, 2],
            x: Matrix::from_vec(10, 2, buffer.iter().flat_map(|s| s.features.clone()).collect()).unwrap(),
            y: Matrix::from_vec(10, 3, buffer.iter().flat_map(|s| s.label.clone()).collect()).unwrap(),
            labels: (0..10).map(|i| i % 3).collect(),
        };
        let cp = Checkpoint { task: 0, net, buffer };
        let g = check_generalization(&[cp], &[set], &[123.0]).unwrap();
        // the set equals the buffer, so its mean sits between min and max
        assert!(g[0].lower_holds && g[0].upper_holds);
    }
}
