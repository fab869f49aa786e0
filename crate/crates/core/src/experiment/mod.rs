//! Experiment files, result bundles and the drivers behind the command line.
//!
//! An experiment file is TOML. Top-level keys name the output directory,
//! seed list and methods; `[run]` (with `[run.stream]`, `[run.pcl]`, ...)
//! mirrors [`RunConfig`]; `[ablate]`, `[bounds]` and `[pde]` configure the
//! other commands. Unknown keys are rejected and relative paths resolve
//! against the file's directory.

mod bundle;

pub use bundle::{
    ablation_jobs, aggregate_dir, check_bounds_dir, read_seed_files, run_jobs, run_jobs_in, verify_pde, AggregateRow,
    BoundsOutcome, BundleSummary, Job, SeedFile, BOUNDS_PASS_FRACTION,
};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bridge::{NoiseSharing, PairingStrategy, VarianceStrategy};
use crate::buffer::LossFilter;
use crate::error::{PclError, Result};
use crate::fkpde::suite::SuiteOptions;
use crate::trainer::{Method, RunConfig};

/// Named strategy variants for ablations.
pub const ABLATION_VARIANTS: [&str; 7] = [
    "default",
    "one_bb",
    "tempering",
    "eu_endpoints",
    "max_loss",
    "min_loss",
    "middle_loss",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSpec {
    /// Named variants, used when no grid axis is given.
    pub variants: Vec<String>,
    pub pairing: Vec<PairingStrategy>,
    pub variance: Vec<VarianceStrategy>,
    pub filter: Vec<LossFilter>,
}

impl Default for AblateSpec {
    fn default() -> Self {
        Self {
            variants: ABLATION_VARIANTS.iter().map(|s| s.to_string()).collect(),
            pairing: Vec::new(),
            variance: Vec::new(),
            filter: Vec::new(),
        }
    }
}

impl AblateSpec {
    pub fn is_grid(&self) -> bool {
        !(self.pairing.is_empty() && self.variance.is_empty() && self.filter.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsSpec {
    pub lipschitz_pairs: usize,
}

impl Default for BoundsSpec {
    fn default() -> Self {
        Self { lipschitz_pairs: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentFile {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Methods to run; empty means `run.method` only.
    pub methods: Vec<Method>,
    pub run: RunConfig,
    pub ablate: AblateSpec,
    pub bounds: BoundsSpec,
    pub pde: SuiteOptions,
}

impl Default for ExperimentFile {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("results"),
            seeds: (0..5).collect(),
            methods: Vec::new(),
            run: RunConfig::default(),
            ablate: AblateSpec::default(),
            bounds: BoundsSpec::default(),
            pde: SuiteOptions::default(),
        }
    }
}

impl ExperimentFile {
    pub fn methods(&self) -> Vec<Method> {
        if self.methods.is_empty() {
            vec![self.run.method]
        } else {
            self.methods.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(PclError::Config("seeds must not be empty".into()));
        }
        for m in self.methods() {
            RunConfig {
                method: m,
                ..self.run.clone()
            }
            .validate()?;
        }
        if self.ablate.is_grid()
            && self.ablate.variants != AblateSpec::default().variants
            && !self.ablate.variants.is_empty()
        {
            return Err(PclError::Config(
                "ablate: give either variants or a grid, not both".into(),
            ));
        }
        for v in &self.ablate.variants {
            if !ABLATION_VARIANTS.contains(&v.as_str()) {
                return Err(PclError::Config(format!(
                    "ablate.variants: unknown variant {v:?} (expected one of {})",
                    ABLATION_VARIANTS.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// Apply a named ablation variant to the run configuration.
    pub fn variant(&self, name: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig {
            method: Method::Pcl,
            ..self.run.clone()
        };
        match name {
            "default" => {}
            "one_bb" => cfg.pcl.options.sharing = NoiseSharing::Shared,
            "tempering" => cfg.pcl.options.variance = VarianceStrategy::Tempering,
            "eu_endpoints" => cfg.pcl.options.pairing = PairingStrategy::EuclideanSorted,
            "max_loss" => cfg.buffer_filter = LossFilter::MaxLoss,
            "min_loss" => cfg.buffer_filter = LossFilter::MinLoss,
            "middle_loss" => cfg.buffer_filter = LossFilter::MiddleLoss,
            other => return Err(PclError::Config(format!("unknown ablation variant {other:?}"))),
        }
        Ok(cfg)
    }
}

/// A parsed experiment with overrides applied and paths resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub file: ExperimentFile,
    pub base_dir: PathBuf,
}

impl Experiment {
    /// Canonical TOML of the effective configuration.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&self.file).map_err(|e| PclError::Config(e.to_string()))
    }
}

/// Set `key.path = value` in a TOML table. The value is parsed as a TOML
/// literal when possible and kept as a string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| PclError::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(PclError::Config(format!("bad override key {key:?}")));
    }
    let mut node = table;
    for p in &parts[..parts.len() - 1] {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| PclError::Config(format!("override {key:?}: {p:?} is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parse experiment text; `origin` names the source in error messages.
pub fn parse_experiment(text: &str, origin: &str, base_dir: &Path, overrides: &[String]) -> Result<Experiment> {
    let config_err = |e: toml::de::Error| PclError::Config(format!("{origin}: {e}"));
    // typed pass over the raw text first so schema errors carry a line number
    toml::from_str::<ExperimentFile>(text).map_err(config_err)?;
    let mut table: toml::Table = toml::from_str(text).map_err(config_err)?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let mut file: ExperimentFile = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| PclError::Config(format!("{origin}: {e}")))?;
    let resolve = |p: &Path| {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base_dir.join(p)
        }
    };
    file.output_dir = resolve(&file.output_dir);
    if let Some(p) = &file.run.stream.csv_path {
        file.run.stream.csv_path = Some(resolve(p));
    }
    file.validate()?;
    Ok(Experiment {
        file,
        base_dir: base_dir.to_path_buf(),
    })
}

pub fn load_experiment(path: &Path, overrides: &[String]) -> Result<Experiment> {
    let text = std::fs::read_to_string(path).map_err(|e| PclError::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let base = if base.as_os_str().is_empty() {
        PathBuf::from(".")
    } else {
        base
    };
    parse_experiment(&text, &path.display().to_string(), &base, overrides)
}
