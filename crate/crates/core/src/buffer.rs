//! Fixed-capacity replay memory filled by reservoir sampling.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, PclError, Result};
use crate::net::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    /// One-hot at ingestion; corrupted labels are kept as-is.
    pub label: Vec<f64>,
    pub task_id: usize,
    pub stream_index: u64,
}

/// Which rows of an incoming batch are offered to the reservoir.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFilter {
    #[default]
    None,
    MaxLoss,
    MinLoss,
    /// Rows whose loss rank falls inside the batch's interquartile range.
    MiddleLoss,
}

impl LossFilter {
    /// Indices (ascending) admitted by this filter.
    pub fn admissible(self, losses: &[f64]) -> Vec<usize> {
        let n = losses.len();
        if n == 0 {
            return Vec::new();
        }
        let by_loss = || {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
            order
        };
        match self {
            LossFilter::None => (0..n).collect(),
            LossFilter::MaxLoss => vec![*by_loss().last().unwrap()],
            LossFilter::MinLoss => vec![by_loss()[0]],
            LossFilter::MiddleLoss => {
                let q = n / 4;
                let mut mid = by_loss()[q..n - q].to_vec();
                mid.sort_unstable();
                mid
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReservoirBuffer {
    capacity: usize,
    items: Vec<Sample>,
    n_seen: u64,
    filter: LossFilter,
}

impl ReservoirBuffer {
    pub fn new(capacity: usize, filter: LossFilter) -> Self {
        Self {
            capacity,
            items: Vec::with_capacity(capacity),
            n_seen: 0,
            filter,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_seen(&self) -> u64 {
        self.n_seen
    }

    pub fn filter(&self) -> LossFilter {
        self.filter
    }

    pub fn items(&self) -> &[Sample] {
        &self.items
    }

    fn check_dims(&self, s: &Sample) -> Result<()> {
        if let Some(first) = self.items.first() {
            if first.features.len() != s.features.len() || first.label.len() != s.label.len() {
                return Err(shape_err!(
                    "sample has {}/{} feature/label dims, buffer holds {}/{}",
                    s.features.len(),
                    s.label.len(),
                    first.features.len(),
                    first.label.len()
                ));
            }
        }
        Ok(())
    }

    /// Algorithm R: fill, then replace a uniform slot with probability
    /// `capacity / n_seen`. Returns the slot written, if any.
    pub fn maybe_insert<R: Rng + ?Sized>(&mut self, sample: Sample, rng: &mut R) -> Result<Option<usize>> {
        self.check_dims(&sample)?;
        self.n_seen += 1;
        if self.items.len() < self.capacity {
            self.items.push(sample);
            return Ok(Some(self.items.len() - 1));
        }
        let j = rng.random_range(0..self.n_seen);
        if (j as usize) < self.capacity {
            self.items[j as usize] = sample;
            Ok(Some(j as usize))
        } else {
            Ok(None)
        }
    }

    /// Offer the rows admitted by the buffer's filter. Returns the offered
    /// batch indices.
    pub fn filtered_insert<R: Rng + ?Sized>(
        &mut self,
        batch: &[Sample],
        losses: &[f64],
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        if losses.len() != batch.len() {
            return Err(shape_err!("{} losses for {} samples", losses.len(), batch.len()));
        }
        let offered = self.filter.admissible(losses);
        for &i in &offered {
            self.maybe_insert(batch[i].clone(), rng)?;
        }
        Ok(offered)
    }

    /// Draw `m` item indices: without replacement when `m <= len`, otherwise
    /// uniformly with replacement. `None` when the buffer is empty.
    pub fn sample_indices<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Option<Vec<usize>> {
        let n = self.items.len();
        if n == 0 {
            return None;
        }
        if m <= n {
            Some(index::sample(rng, n, m).into_vec())
        } else {
            Some((0..m).map(|_| rng.random_range(0..n)).collect())
        }
    }

    /// Features and labels of `m` drawn items, or `None` when empty.
    pub fn sample_batch<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Option<(Matrix, Matrix)> {
        let idx = self.sample_indices(m, rng)?;
        Some(self.gather(&idx))
    }

    pub fn gather(&self, idx: &[usize]) -> (Matrix, Matrix) {
        let d = self.items[0].features.len();
        let c = self.items[0].label.len();
        let mut x = Vec::with_capacity(idx.len() * d);
        let mut y = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            x.extend_from_slice(&self.items[i].features);
            y.extend_from_slice(&self.items[i].label);
        }
        (
            Matrix::from_vec(idx.len(), d, x).unwrap(),
            Matrix::from_vec(idx.len(), c, y).unwrap(),
        )
    }

    /// All items as matrices (in slot order).
    pub fn to_matrices(&self) -> Option<(Matrix, Matrix)> {
        if self.items.is_empty() {
            return None;
        }
        let idx: Vec<usize> = (0..self.items.len()).collect();
        Some(self.gather(&idx))
    }

    /// One JSON object per line: features, label, task_id, stream_index.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_samples_jsonl(&self.items, path)
    }
}

pub fn write_samples_jsonl(items: &[Sample], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| PclError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for s in items {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| PclError::io(path, e))?;
    }
    w.flush().map_err(|e| PclError::io(path, e))
}

pub fn read_samples_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let f = std::fs::File::open(path).map_err(|e| PclError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| PclError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line).map_err(|e| PclError::Ingestion {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(s);
    }
    Ok(out)
}
