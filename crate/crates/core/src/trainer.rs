//! Online class-incremental training with PCL, ER and plain SGD.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bridge::NoiseKey;
use crate::buffer::{LossFilter, ReservoirBuffer, Sample};
use crate::error::{param_err, PclError, Result};
use crate::exec::Exec;
use crate::net::{per_row_soft_cross_entropy, soft_cross_entropy, DenseNetwork, Matrix, ParamGrads};
use crate::pcl::{pcl_loss, with_replay, PclConfig};
use crate::seed::{stream_rng, Purpose, StreamRng};
use crate::streams::{argmax, make_stream, EvalSet, StreamConfig, TaskStream};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Pcl,
    Er,
    Sgd,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Pcl => "pcl",
            Method::Er => "er",
            Method::Sgd => "sgd",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = PclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcl" => Ok(Method::Pcl),
            "er" => Ok(Method::Er),
            "sgd" => Ok(Method::Sgd),
            _ => Err(param_err!("unknown method {s:?} (pcl, er, sgd)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: Method,
    pub stream: StreamConfig,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub buffer_capacity: usize,
    pub buffer_batch: usize,
    pub buffer_filter: LossFilter,
    pub pcl: PclConfig,
    /// Extra evaluations every this many batches; 0 evaluates only after
    /// each task.
    pub eval_every: usize,
    /// Supplied per run by the experiment's seed list.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Pcl,
            stream: StreamConfig::default(),
            hidden: vec![64, 64],
            lr: 0.08,
            buffer_capacity: 200,
            buffer_batch: 32,
            buffer_filter: LossFilter::None,
            pcl: PclConfig::default(),
            eval_every: 0,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(param_err!("lr must be positive, got {}", self.lr));
        }
        if self.hidden.contains(&0) {
            return Err(param_err!("hidden layer sizes must be positive"));
        }
        if self.method != Method::Sgd && self.buffer_capacity == 0 {
            return Err(param_err!("{} needs a positive buffer capacity", self.method.name()));
        }
        self.stream.validate()?;
        if self.method == Method::Pcl {
            self.pcl.validate()?;
            self.pcl.drift.validate(Some(self.stream.feature_dim))?;
        }
        Ok(())
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.stream.feature_dim];
        s.extend(&self.hidden);
        s.push(self.stream.n_classes());
        s
    }

    /// The loss configuration actually used, with the replay batch size
    /// taken from the run.
    pub fn effective_pcl(&self) -> PclConfig {
        PclConfig {
            buffer_batch: self.buffer_batch,
            ..self.pcl.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Accuracy per evaluation set, in input order.
    pub per_group: Vec<f64>,
    /// Accuracy pooled over every sample of every set.
    pub overall: f64,
    pub correct: usize,
    pub total: usize,
}

/// Argmax-of-logits accuracy per class group and pooled.
pub fn evaluate(net: &DenseNetwork, sets: &[EvalSet]) -> Result<Evaluation> {
    let mut per_group = Vec::with_capacity(sets.len());
    let (mut correct, mut total) = (0, 0);
    for s in sets {
        let hits = if s.labels.is_empty() {
            0
        } else {
            let logits = net.predict(&s.x)?;
            logits
                .iter_rows()
                .zip(&s.labels)
                .filter(|(row, l)| argmax(row) == **l)
                .count()
        };
        per_group.push(if s.labels.is_empty() {
            0.0
        } else {
            hits as f64 / s.labels.len() as f64
        });
        correct += hits;
        total += s.labels.len();
    }
    Ok(Evaluation {
        per_group,
        overall: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub task: usize,
    pub step: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub task: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub seed: u64,
    pub method: Method,
    /// Row `j`: accuracy on each task seen so far, measured after task `j`.
    pub accuracy_matrix: Vec<Vec<f64>>,
    /// Pooled accuracy over all classes seen so far, after each task.
    pub anytime_accuracy: Vec<f64>,
    pub aaa: f64,
    pub final_acc: f64,
    pub loss_trace: Vec<f64>,
    /// Mean loss over the buffer contents after each task.
    pub buffer_loss_trace: Vec<f64>,
    pub eval_trace: Vec<EvalPoint>,
    pub steps: usize,
    pub clamped_weights: usize,
    pub divergence: Option<Divergence>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Network and buffer state at the end of a task.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub task: usize,
    pub net: DenseNetwork,
    pub buffer: Vec<Sample>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: RunRecord,
    pub checkpoints: Vec<Checkpoint>,
    pub stream: TaskStream,
}

/// Loss and gradients of one method on one batch.
pub struct StepLoss {
    pub loss: f64,
    pub grads: ParamGrads,
    pub clamped_weights: usize,
}

/// Method loss for training step `step`; `draw` feeds the replay sample.
#[allow(clippy::too_many_arguments)]
pub fn method_loss(
    cfg: &RunConfig,
    pcl: &PclConfig,
    net: &DenseNetwork,
    x: &Matrix,
    y: &Matrix,
    buffer: &ReservoirBuffer,
    step: usize,
    exec: Exec,
) -> Result<StepLoss> {
    let mut draw = stream_rng(cfg.seed, Purpose::BufferDraw, &[step as u64]);
    let (xb, yb) = match cfg.method {
        Method::Sgd => (x.clone(), y.clone()),
        Method::Er => with_replay(x, y, buffer, cfg.buffer_batch, &mut draw)?,
        Method::Pcl => {
            let key = NoiseKey {
                seed: cfg.seed,
                step: step as u64,
            };
            let out = pcl_loss(net, x, y, buffer, pcl, &mut draw, key, exec)?;
            return Ok(StepLoss {
                loss: out.loss,
                grads: out.grads,
                clamped_weights: out.clamped_weights,
            });
        }
    };
    let (logits, cache) = net.forward(&xb)?;
    let (loss, g) = soft_cross_entropy(&logits, &yb)?;
    let (grads, _) = net.backward(&cache, &g)?;
    Ok(StepLoss {
        loss,
        grads,
        clamped_weights: 0,
    })
}

fn mean_buffer_loss(net: &DenseNetwork, buffer: &ReservoirBuffer) -> Result<f64> {
    match buffer.to_matrices() {
        Some((x, y)) => {
            let l = per_row_soft_cross_entropy(&net.predict(&x)?, &y)?;
            Ok(l.iter().sum::<f64>() / l.len() as f64)
        }
        None => Ok(0.0),
    }
}

pub fn run(cfg: &RunConfig, exec: Exec) -> Result<RunOutput> {
    run_with_observer(cfg, exec, |_, _| {})
}

/// Train on the configured stream; `observe(step, net)` sees the network
/// after every update.
pub fn run_with_observer<F>(cfg: &RunConfig, exec: Exec, mut observe: F) -> Result<RunOutput>
where
    F: FnMut(usize, &DenseNetwork),
{
    cfg.validate()?;
    let started = Instant::now();
    let stream = make_stream(&cfg.stream, cfg.seed)?;
    let mut net = DenseNetwork::init(&cfg.layer_sizes(), &mut stream_rng(cfg.seed, Purpose::Init, &[]))?;
    let mut buffer = ReservoirBuffer::new(cfg.buffer_capacity, cfg.buffer_filter);
    let mut buffer_rng: StreamRng = stream_rng(cfg.seed, Purpose::Buffer, &[]);
    let pcl = cfg.effective_pcl();

    let mut record = RunRecord {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        method: cfg.method,
        accuracy_matrix: Vec::new(),
        anytime_accuracy: Vec::new(),
        aaa: 0.0,
        final_acc: 0.0,
        loss_trace: Vec::new(),
        buffer_loss_trace: Vec::new(),
        eval_trace: Vec::new(),
        steps: 0,
        clamped_weights: 0,
        divergence: None,
        wall_clock_secs: 0.0,
    };
    let mut checkpoints = Vec::new();
    let mut step = 0;

    'tasks: for task in &stream.tasks {
        for batch in &task.batches {
            let offered = if cfg.method != Method::Sgd && buffer.filter() != LossFilter::None {
                Some(per_row_soft_cross_entropy(&net.predict(&batch.x)?, &batch.y)?)
            } else {
                None
            };
            let outcome = method_loss(cfg, &pcl, &net, &batch.x, &batch.y, &buffer, step, exec).and_then(|s| {
                if !s.loss.is_finite() || !s.grads.is_finite() {
                    return Err(param_err!("non-finite loss {}", s.loss));
                }
                net.sgd_step(&s.grads, cfg.lr)?;
                Ok(s)
            });
            let s = match outcome {
                Ok(s) => s,
                Err(PclError::Training { reason, .. }) | Err(PclError::Parameter(reason)) => {
                    record.divergence = Some(Divergence {
                        task: task.id,
                        step,
                        reason,
                    });
                    break 'tasks;
                }
                Err(e) => return Err(e),
            };
            record.loss_trace.push(s.loss);
            record.clamped_weights += s.clamped_weights;
            step += 1;
            observe(step, &net);

            if cfg.method != Method::Sgd {
                let samples = batch.samples(task.id);
                match &offered {
                    Some(losses) => {
                        buffer.filtered_insert(&samples, losses, &mut buffer_rng)?;
                    }
                    None => {
                        for sample in samples {
                            buffer.maybe_insert(sample, &mut buffer_rng)?;
                        }
                    }
                }
            }
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
                let ev = evaluate(&net, &stream.eval[..=task.id])?;
                record.eval_trace.push(EvalPoint {
                    step,
                    task: task.id,
                    accuracy: ev.overall,
                });
            }
        }

        let ev = evaluate(&net, &stream.eval[..=task.id])?;
        record.accuracy_matrix.push(ev.per_group);
        record.anytime_accuracy.push(ev.overall);
        record.buffer_loss_trace.push(mean_buffer_loss(&net, &buffer)?);
        checkpoints.push(Checkpoint {
            task: task.id,
            net: net.clone(),
            buffer: buffer.items().to_vec(),
        });
    }

    let n = record.anytime_accuracy.len();
    record.aaa = if n == 0 {
        0.0
    } else {
        record.anytime_accuracy.iter().sum::<f64>() / n as f64
    };
    record.final_acc = if record.divergence.is_none() {
        evaluate(&net, &stream.eval)?.overall
    } else {
        record.anytime_accuracy.last().copied().unwrap_or(0.0)
    };
    record.steps = step;
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(RunOutput {
        record,
        checkpoints,
        stream,
    })
}
