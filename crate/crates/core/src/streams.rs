//! Online class-incremental task streams.
//!
//! A stream is a sequence of tasks with disjoint classes; each task is a
//! sequence of mini-batches seen exactly once. A held-out evaluation split
//! (a fixed fraction of every class) is never streamed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::buffer::Sample;
use crate::error::{param_err, PclError, Result};
use crate::net::Matrix;
use crate::seed::{stream_rng, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// Class means on a sphere of radius `blob_radius`, unit covariance.
    #[default]
    GaussianBlobs,
    /// One pair of interleaved half-moons per task, shifted along the first
    /// axis and zero-padded with unit-variance noise dimensions.
    TwoMoonsSequence,
    /// Rows read from `csv_path`: `f0,...,f{d-1},label`.
    CsvFile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImbalanceOrder {
    /// Class 0 keeps the most samples.
    #[default]
    Normal,
    Reversed,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    pub feature_dim: usize,
    pub generator: Generator,
    pub blob_radius: f64,
    pub csv_path: Option<PathBuf>,
    pub corruption_rate: f64,
    /// Ratio `gamma` between the largest and smallest class; 1 disables.
    pub imbalance_factor: f64,
    pub imbalance_order: ImbalanceOrder,
    pub batch_size: usize,
    pub eval_fraction: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            n_tasks: 5,
            classes_per_task: 2,
            samples_per_class: 500,
            feature_dim: 16,
            generator: Generator::GaussianBlobs,
            blob_radius: 3.0,
            csv_path: None,
            corruption_rate: 0.0,
            imbalance_factor: 1.0,
            imbalance_order: ImbalanceOrder::Normal,
            batch_size: 32,
            eval_fraction: 0.2,
        }
    }
}

impl StreamConfig {
    pub fn n_classes(&self) -> usize {
        self.n_tasks * self.classes_per_task
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 || self.classes_per_task == 0 {
            return Err(param_err!("need at least one task and one class per task"));
        }
        if self.feature_dim == 0 || self.batch_size == 0 {
            return Err(param_err!("feature_dim and batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.corruption_rate) {
            return Err(param_err!(
                "corruption_rate must lie in [0, 1), got {}",
                self.corruption_rate
            ));
        }
        if !(self.imbalance_factor >= 1.0 && self.imbalance_factor.is_finite()) {
            return Err(param_err!("imbalance_factor must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(param_err!("eval_fraction must lie in [0, 1)"));
        }
        match self.generator {
            Generator::GaussianBlobs if !(self.blob_radius > 0.0) => Err(param_err!("blob_radius must be positive")),
            Generator::TwoMoonsSequence if self.classes_per_task != 2 || self.feature_dim < 2 => Err(param_err!(
                "two_moons_sequence needs 2 classes per task and feature_dim >= 2"
            )),
            Generator::CsvFile if self.csv_path.is_none() => Err(param_err!("csv_file generator needs csv_path")),
            _ => Ok(()),
        }
    }

    /// Per-class sample counts after imbalance scaling,
    /// `n_c = round(N * gamma^(-rank_c / (C - 1)))`.
    pub fn class_counts(&self, available: &[usize], seed: u64) -> Vec<usize> {
        let c = available.len();
        let ranks: Vec<usize> = match self.imbalance_order {
            ImbalanceOrder::Normal => (0..c).collect(),
            ImbalanceOrder::Reversed => (0..c).rev().collect(),
            ImbalanceOrder::Random => {
                let mut r: Vec<usize> = (0..c).collect();
                r.shuffle(&mut stream_rng(seed, Purpose::Stream, &[u64::MAX]));
                r
            }
        };
        available
            .iter()
            .zip(ranks)
            .map(|(&n, rank)| {
                if c < 2 || self.imbalance_factor == 1.0 {
                    return n;
                }
                let scale = self.imbalance_factor.powf(-(rank as f64) / (c - 1) as f64);
                (n as f64 * scale).round() as usize
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    /// One-hot, possibly corrupted.
    pub y: Matrix,
    pub clean_labels: Vec<usize>,
    pub flipped: Vec<bool>,
    pub stream_index: Vec<u64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples(&self, task_id: usize) -> Vec<Sample> {
        (0..self.len())
            .map(|r| Sample {
                features: self.x.row(r).to_vec(),
                label: self.y.row(r).to_vec(),
                task_id,
                stream_index: self.stream_index[r],
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: usize,
    pub classes: Vec<usize>,
    pub batches: Vec<Batch>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub task_id: usize,
    pub classes: Vec<usize>,
    pub x: Matrix,
    pub y: Matrix,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task_id: usize,
    pub classes: Vec<usize>,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub batches: usize,
    pub flipped_labels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub seed: u64,
    pub config: StreamConfig,
    pub n_classes: usize,
    pub feature_dim: usize,
    pub train_per_class: Vec<usize>,
    pub eval_per_class: Vec<usize>,
    pub tasks: Vec<TaskSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub n_classes: usize,
    pub feature_dim: usize,
    pub tasks: Vec<Task>,
    pub eval: Vec<EvalSet>,
    pub manifest: StreamManifest,
}

impl TaskStream {
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(path, text).map_err(|e| PclError::io(path, e))
    }
}

pub fn one_hot(labels: &[usize], n_classes: usize) -> Matrix {
    let mut y = Matrix::zeros(labels.len(), n_classes);
    for (r, &l) in labels.iter().enumerate() {
        y.set(r, l, 1.0);
    }
    y
}

/// Flip each row, with probability `rate`, to a uniformly drawn different
/// class. Rows are read through their argmax. Returns the new labels and the
/// flip mask.
pub fn corrupt_labels<R: Rng + ?Sized>(y: &Matrix, rate: f64, rng: &mut R) -> (Matrix, Vec<bool>) {
    let c = y.cols();
    let mut out = Matrix::zeros(y.rows(), c);
    let mut mask = vec![false; y.rows()];
    for (r, row) in y.iter_rows().enumerate() {
        let clean = argmax(row);
        let flip = c > 1 && rng.random::<f64>() < rate;
        let label = if flip {
            let other = rng.random_range(0..c - 1);
            if other >= clean {
                other + 1
            } else {
                other
            }
        } else {
            clean
        };
        mask[r] = flip;
        out.set(r, label, 1.0);
    }
    (out, mask)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-class feature rows before splitting.
type ClassPool = Vec<Vec<Vec<f64>>>;

fn blobs(cfg: &StreamConfig, seed: u64, counts: &[usize]) -> ClassPool {
    let d = cfg.feature_dim;
    let mut rng = stream_rng(seed, Purpose::Stream, &[0]);
    let means: Vec<Vec<f64>> = (0..counts.len())
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter().map(|a| a * cfg.blob_radius / norm).collect()
        })
        .collect();
    counts
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            let mut rng = stream_rng(seed, Purpose::Stream, &[1, c as u64]);
            (0..n)
                .map(|_| {
                    means[c]
                        .iter()
                        .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn moons(cfg: &StreamConfig, seed: u64, counts: &[usize]) -> ClassPool {
    let d = cfg.feature_dim;
    let noise = Normal::new(0.0, 0.1).expect("valid std");
    counts
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            let mut rng = stream_rng(seed, Purpose::Stream, &[1, c as u64]);
            let shift = 3.0 * (c / 2) as f64;
            (0..n)
                .map(|_| {
                    let theta = rng.random_range(0.0..std::f64::consts::PI);
                    let (a, b) = if c % 2 == 0 {
                        (theta.cos(), theta.sin())
                    } else {
                        (1.0 - theta.cos(), 0.5 - theta.sin())
                    };
                    let mut x = vec![a + shift + noise.sample(&mut rng), b + noise.sample(&mut rng)];
                    x.extend((2..d).map(|_| noise.sample(&mut rng)));
                    x
                })
                .collect()
        })
        .collect()
}

/// Read `f0,...,f{d-1},label` rows grouped by class.
pub fn read_csv_dataset(path: &Path, feature_dim: usize, n_classes: usize) -> Result<ClassPool> {
    let ingest = |line: usize, message: String| PclError::Ingestion {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| ingest(0, e.to_string()))?;
    let header = reader.headers().map_err(|e| ingest(1, e.to_string()))?.clone();
    let expected: Vec<String> = (0..feature_dim)
        .map(|i| format!("f{i}"))
        .chain(["label".to_string()])
        .collect();
    if header.iter().map(str::trim).ne(expected.iter().map(String::as_str)) {
        return Err(ingest(1, format!("expected header {}", expected.join(","))));
    }
    let mut pool: ClassPool = vec![Vec::new(); n_classes];
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| ingest(line, e.to_string()))?;
        if rec.len() != feature_dim + 1 {
            return Err(ingest(
                line,
                format!("expected {} fields, found {}", feature_dim + 1, rec.len()),
            ));
        }
        let mut x = Vec::with_capacity(feature_dim);
        for f in rec.iter().take(feature_dim) {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| ingest(line, format!("bad feature value {f:?}")))?;
            if !v.is_finite() {
                return Err(ingest(line, format!("non-finite feature {f:?}")));
            }
            x.push(v);
        }
        let raw = rec[feature_dim].trim();
        let label: usize = raw.parse().map_err(|_| ingest(line, format!("bad label {raw:?}")))?;
        if label >= n_classes {
            return Err(ingest(line, format!("label {label} outside 0..{n_classes}")));
        }
        pool[label].push(x);
    }
    Ok(pool)
}

/// Build a stream. Identical `(cfg, seed)` give identical streams.
pub fn make_stream(cfg: &StreamConfig, seed: u64) -> Result<TaskStream> {
    cfg.validate()?;
    let n_classes = cfg.n_classes();
    let pool = match cfg.generator {
        Generator::GaussianBlobs => blobs(
            cfg,
            seed,
            &cfg.class_counts(&vec![cfg.samples_per_class; n_classes], seed),
        ),
        Generator::TwoMoonsSequence => moons(
            cfg,
            seed,
            &cfg.class_counts(&vec![cfg.samples_per_class; n_classes], seed),
        ),
        Generator::CsvFile => {
            let path = cfg.csv_path.as_deref().expect("validated");
            let mut pool = read_csv_dataset(path, cfg.feature_dim, n_classes)?;
            let avail: Vec<usize> = pool.iter().map(Vec::len).collect();
            for (rows, n) in pool.iter_mut().zip(cfg.class_counts(&avail, seed)) {
                rows.truncate(n);
            }
            pool
        }
    };

    let mut train: Vec<Vec<(Vec<f64>, usize)>> = vec![Vec::new(); cfg.n_tasks];
    let mut eval: BTreeMap<usize, Vec<(Vec<f64>, usize)>> = BTreeMap::new();
    let mut train_per_class = vec![0; n_classes];
    let mut eval_per_class = vec![0; n_classes];
    for (class, rows) in pool.into_iter().enumerate() {
        let task = class / cfg.classes_per_task;
        let n_eval = (rows.len() as f64 * cfg.eval_fraction).round() as usize;
        eval_per_class[class] = n_eval;
        train_per_class[class] = rows.len() - n_eval;
        for (i, x) in rows.into_iter().enumerate() {
            if i < n_eval {
                eval.entry(task).or_default().push((x, class));
            } else {
                train[task].push((x, class));
            }
        }
    }

    let mut next_index = 0u64;
    let mut tasks = Vec::with_capacity(cfg.n_tasks);
    let mut summaries = Vec::with_capacity(cfg.n_tasks);
    for (t, mut rows) in train.into_iter().enumerate() {
        rows.shuffle(&mut stream_rng(seed, Purpose::Stream, &[2, t as u64]));
        let mut corrupt_rng = stream_rng(seed, Purpose::Corruption, &[t as u64]);
        let classes: Vec<usize> = (t * cfg.classes_per_task..(t + 1) * cfg.classes_per_task).collect();
        let mut batches = Vec::new();
        let mut flipped_total = 0;
        for chunk in rows.chunks(cfg.batch_size) {
            let data: Vec<f64> = chunk.iter().flat_map(|(x, _)| x.iter().copied()).collect();
            let x = Matrix::from_vec(chunk.len(), cfg.feature_dim, data)?;
            let clean_labels: Vec<usize> = chunk.iter().map(|(_, c)| *c).collect();
            let (y, flipped) = if cfg.corruption_rate > 0.0 {
                corrupt_labels(
                    &one_hot(&clean_labels, n_classes),
                    cfg.corruption_rate,
                    &mut corrupt_rng,
                )
            } else {
                (one_hot(&clean_labels, n_classes), vec![false; chunk.len()])
            };
            flipped_total += flipped.iter().filter(|f| **f).count();
            let stream_index = (next_index..next_index + chunk.len() as u64).collect();
            next_index += chunk.len() as u64;
            batches.push(Batch {
                x,
                y,
                clean_labels,
                flipped,
                stream_index,
            });
        }
        summaries.push(TaskSummary {
            task_id: t,
            classes: classes.clone(),
            train_samples: rows.len(),
            eval_samples: eval.get(&t).map_or(0, Vec::len),
            batches: batches.len(),
            flipped_labels: flipped_total,
        });
        tasks.push(Task {
            id: t,
            classes,
            batches,
        });
    }

    let eval_sets = (0..cfg.n_tasks)
        .map(|t| {
            let rows = eval.remove(&t).unwrap_or_default();
            let labels: Vec<usize> = rows.iter().map(|(_, c)| *c).collect();
            let data: Vec<f64> = rows.into_iter().flat_map(|(x, _)| x).collect();
            Ok(EvalSet {
                task_id: t,
                classes: tasks[t].classes.clone(),
                x: Matrix::from_vec(labels.len(), cfg.feature_dim, data)?,
                y: one_hot(&labels, n_classes),
                labels,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(TaskStream {
        n_classes,
        feature_dim: cfg.feature_dim,
        tasks,
        eval: eval_sets,
        manifest: StreamManifest {
            seed,
            config: cfg.clone(),
            n_classes,
            feature_dim: cfg.feature_dim,
            train_per_class,
            eval_per_class,
            tasks: summaries,
        },
    })
}
