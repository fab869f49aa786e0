use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Experiment, ExperimentFile};
use crate::bounds::{bound_report, write_bound_rows, BoundRow};
use crate::buffer::{read_samples_jsonl, write_samples_jsonl};
use crate::error::{PclError, Result};
use crate::exec::Exec;
use crate::fkpde::suite::{verify_suite, write_verify_csv, SuiteOptions, VerifyRow};
use crate::net::DenseNetwork;
use crate::stats::MeanSd;
use crate::streams::make_stream;
use crate::trainer::{run, Checkpoint, Method, RunConfig, RunRecord, SCHEMA_VERSION};

/// Share of seeds that must show both bound patterns.
pub const BOUNDS_PASS_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub variant: String,
    pub variant_index: usize,
    pub config: RunConfig,
}

impl Job {
    fn stem(&self) -> String {
        stem(&self.variant, self.config.method, self.config.seed)
    }
}

fn stem(variant: &str, method: Method, seed: u64) -> String {
    format!("{variant}__{}__seed{seed}", method.name())
}

/// Per-seed result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFile {
    pub variant: String,
    pub variant_index: usize,
    #[serde(flatten)]
    pub record: RunRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub schema_version: u32,
    pub variant: String,
    pub method: String,
    pub n_seeds: usize,
    pub acc_mean: f64,
    pub acc_sd: f64,
    pub aaa_mean: f64,
    pub aaa_sd: f64,
    pub diverged: usize,
}

#[derive(Debug, Clone, Serialize)]
struct RunsRow<'a> {
    schema_version: u32,
    variant: &'a str,
    method: &'a str,
    seed: u64,
    task: usize,
    aa: f64,
    acc_final: f64,
    aaa: f64,
}

#[derive(Debug, Clone)]
pub struct BundleSummary {
    pub dir: PathBuf,
    pub seeds: Vec<SeedFile>,
    pub aggregate: Vec<AggregateRow>,
    pub diverged: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PclError + '_ {
    move |e| PclError::io(path, e)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    Ok(csv::Writer::from_writer(f))
}

/// Write via a temporary file and rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// One job per (method, seed) of the plain run.
pub fn run_jobs(exp: &ExperimentFile) -> Vec<Job> {
    let mut jobs = Vec::new();
    for method in exp.methods() {
        for &seed in &exp.seeds {
            jobs.push(Job {
                variant: "default".into(),
                variant_index: 0,
                config: RunConfig {
                    method,
                    seed,
                    ..exp.run.clone()
                },
            });
        }
    }
    jobs
}

/// One job per (strategy variant, seed), always with the PCL method.
pub fn ablation_jobs(exp: &ExperimentFile) -> Result<Vec<Job>> {
    let spec = &exp.ablate;
    let variants: Vec<(String, RunConfig)> = if spec.is_grid() {
        let base = exp.variant("default")?;
        let mut out = Vec::new();
        for p in or_base(&spec.pairing, base.pcl.options.pairing) {
            for v in or_base(&spec.variance, base.pcl.options.variance) {
                for f in or_base(&spec.filter, base.buffer_filter) {
                    let mut cfg = base.clone();
                    cfg.pcl.options.pairing = p;
                    cfg.pcl.options.variance = v;
                    cfg.buffer_filter = f;
                    let name = format!(
                        "pairing-{}+variance-{}+filter-{}",
                        enum_name(&p)?,
                        enum_name(&v)?,
                        enum_name(&f)?
                    );
                    out.push((name, cfg));
                }
            }
        }
        out
    } else {
        spec.variants
            .iter()
            .map(|v| Ok((v.clone(), exp.variant(v)?)))
            .collect::<Result<_>>()?
    };
    let mut jobs = Vec::new();
    for (i, (name, cfg)) in variants.into_iter().enumerate() {
        for &seed in &exp.seeds {
            jobs.push(Job {
                variant: name.clone(),
                variant_index: i,
                config: RunConfig { seed, ..cfg.clone() },
            });
        }
    }
    Ok(jobs)
}

fn or_base<T: Clone>(axis: &[T], base: T) -> Vec<T> {
    if axis.is_empty() {
        vec![base]
    } else {
        axis.to_vec()
    }
}

fn enum_name<T: Serialize>(v: &T) -> Result<String> {
    match serde_json::to_value(v)? {
        serde_json::Value::String(s) => Ok(s),
        other => Ok(other.to_string()),
    }
}

/// Execute `jobs` into the experiment's output directory.
pub fn run_jobs_in(exp: &Experiment, jobs: &[Job], exec: Exec) -> Result<BundleSummary> {
    let dir = &exp.file.output_dir;
    for sub in ["runs", "checkpoints", "manifests"] {
        fs::create_dir_all(dir.join(sub)).map_err(io_err(dir))?;
    }
    fs::write(dir.join("config.toml"), exp.to_toml()?).map_err(io_err(dir))?;

    let outputs = exec.map(jobs.len(), |i| run(&jobs[i].config, Exec::Sequential));
    let mut timings = csv_writer(&dir.join("timings.csv"))?;
    timings
        .write_record(["variant", "method", "seed", "wall_clock_secs"])
        .map_err(PclError::from)?;
    for (job, out) in jobs.iter().zip(outputs) {
        let out = out?;
        let stem = job.stem();
        out.stream
            .write_manifest(&dir.join("manifests").join(format!("{stem}.json")))?;
        write_checkpoints(&dir.join("checkpoints").join(&stem), &out.checkpoints)?;
        let file = SeedFile {
            variant: job.variant.clone(),
            variant_index: job.variant_index,
            record: out.record,
        };
        let path = dir.join("runs").join(format!("{stem}.json"));
        fs::write(&path, serde_json::to_string_pretty(&file)?).map_err(io_err(&path))?;
        timings.write_record([
            job.variant.clone(),
            job.config.method.name().to_string(),
            job.config.seed.to_string(),
            format!("{:.6}", file.record.wall_clock_secs),
        ])?;
    }
    timings.flush().map_err(io_err(dir))?;

    let (seeds, aggregate) = aggregate_dir(dir)?;
    let diverged = seeds.iter().filter(|s| s.record.divergence.is_some()).count();
    Ok(BundleSummary {
        dir: dir.clone(),
        seeds,
        aggregate,
        diverged,
    })
}

fn write_checkpoints(dir: &Path, checkpoints: &[Checkpoint]) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for cp in checkpoints {
        let net = dir.join(format!("task{}_net.json", cp.task));
        fs::write(&net, serde_json::to_string(&cp.net)?).map_err(io_err(&net))?;
        write_samples_jsonl(&cp.buffer, &dir.join(format!("task{}_buffer.jsonl", cp.task)))?;
    }
    Ok(())
}

fn read_checkpoints(dir: &Path, tasks: usize) -> Result<Vec<Checkpoint>> {
    (0..tasks)
        .map(|task| {
            let net_path = dir.join(format!("task{task}_net.json"));
            let text = fs::read_to_string(&net_path).map_err(io_err(&net_path))?;
            let net: DenseNetwork = serde_json::from_str(&text)?;
            let net = DenseNetwork::from_layers(net.layers().to_vec())?;
            let buffer = read_samples_jsonl(&dir.join(format!("task{task}_buffer.jsonl")))?;
            Ok(Checkpoint { task, net, buffer })
        })
        .collect()
}

/// All per-seed files of a bundle, in (variant, method, seed) order.
pub fn read_seed_files(dir: &Path) -> Result<Vec<SeedFile>> {
    let runs = dir.join("runs");
    let mut files = Vec::new();
    for entry in fs::read_dir(&runs).map_err(io_err(&runs))? {
        let path = entry.map_err(io_err(&runs))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            files.push(serde_json::from_str::<SeedFile>(&text)?);
        }
    }
    let order = |m: Method| [Method::Pcl, Method::Er, Method::Sgd].iter().position(|x| *x == m);
    files.sort_by(|a, b| {
        (a.variant_index, &a.variant, order(a.record.method), a.record.seed).cmp(&(
            b.variant_index,
            &b.variant,
            order(b.record.method),
            b.record.seed,
        ))
    });
    Ok(files)
}

/// Recompute `runs.csv` and `aggregate.csv` from the per-seed files.
pub fn aggregate_dir(dir: &Path) -> Result<(Vec<SeedFile>, Vec<AggregateRow>)> {
    let seeds = read_seed_files(dir)?;

    let mut runs = csv::Writer::from_writer(Vec::new());
    let mut groups: Vec<((String, Method), Vec<&SeedFile>)> = Vec::new();
    for s in &seeds {
        let r = &s.record;
        for (task, aa) in r.anytime_accuracy.iter().enumerate() {
            runs.serialize(RunsRow {
                schema_version: SCHEMA_VERSION,
                variant: &s.variant,
                method: r.method.name(),
                seed: r.seed,
                task,
                aa: *aa,
                acc_final: r.final_acc,
                aaa: r.aaa,
            })?;
        }
        let key = (s.variant.clone(), r.method);
        match groups.last_mut() {
            Some((k, v)) if *k == key => v.push(s),
            _ => groups.push((key, vec![s])),
        }
    }

    let aggregate: Vec<AggregateRow> = groups
        .iter()
        .map(|((variant, method), files)| {
            let acc = MeanSd::of(&files.iter().map(|f| f.record.final_acc).collect::<Vec<_>>());
            let aaa = MeanSd::of(&files.iter().map(|f| f.record.aaa).collect::<Vec<_>>());
            AggregateRow {
                schema_version: SCHEMA_VERSION,
                variant: variant.clone(),
                method: method.name().to_string(),
                n_seeds: files.len(),
                acc_mean: acc.mean,
                acc_sd: acc.sd,
                aaa_mean: aaa.mean,
                aaa_sd: aaa.sd,
                diverged: files.iter().filter(|f| f.record.divergence.is_some()).count(),
            }
        })
        .collect();
    let mut agg = csv::Writer::from_writer(Vec::new());
    for row in &aggregate {
        agg.serialize(row)?;
    }

    let bytes = |w: csv::Writer<Vec<u8>>| w.into_inner().map_err(|e| PclError::Config(e.to_string()));
    write_atomic(&dir.join("runs.csv"), &bytes(runs)?)?;
    write_atomic(&dir.join("aggregate.csv"), &bytes(agg)?)?;
    Ok((seeds, aggregate))
}

#[derive(Debug, Clone)]
pub struct BoundsOutcome {
    pub rows: Vec<BoundRow>,
    /// Per (variant, method): seeds with both patterns, seeds checked.
    pub groups: BTreeMap<(String, String), (usize, usize)>,
    pub passed: bool,
}

/// Bound report for every replay run of a bundle, written to `bounds.csv`.
pub fn check_bounds_dir(dir: &Path, lipschitz_pairs: Option<usize>) -> Result<BoundsOutcome> {
    let cfg_path = dir.join("config.toml");
    let text = fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
    let exp = super::parse_experiment(&text, &cfg_path.display().to_string(), dir, &[])?;
    let pairs = lipschitz_pairs.unwrap_or(exp.file.bounds.lipschitz_pairs);

    let mut rows = Vec::new();
    let mut groups: BTreeMap<(String, String), (usize, usize)> = BTreeMap::new();
    for s in read_seed_files(dir)? {
        let r = &s.record;
        if r.method == Method::Sgd || r.divergence.is_some() {
            continue;
        }
        let stream = make_stream(&exp.file.run.stream, r.seed)?;
        let cp_dir = dir.join("checkpoints").join(stem(&s.variant, r.method, r.seed));
        let checkpoints = read_checkpoints(&cp_dir, r.accuracy_matrix.len())?;
        let report = bound_report(&checkpoints, &stream.eval, r.seed, pairs)?;
        let g = groups
            .entry((s.variant.clone(), r.method.name().to_string()))
            .or_default();
        g.0 += usize::from(report.forgetting_pattern() && report.lower_pattern());
        g.1 += 1;
        rows.extend(report.rows);
    }
    write_bound_rows(&rows, &dir.join("bounds.csv"))?;
    let passed = !groups.is_empty()
        && groups
            .values()
            .all(|&(ok, n)| ok as f64 >= BOUNDS_PASS_FRACTION * n as f64);
    Ok(BoundsOutcome { rows, groups, passed })
}

/// Run the built-in PDE suite and write its CSV.
pub fn verify_pde(opts: &SuiteOptions, out: &Path, exec: Exec) -> Result<Vec<VerifyRow>> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let rows = verify_suite(opts, exec)?;
    write_verify_csv(&rows, out)?;
    Ok(rows)
}
