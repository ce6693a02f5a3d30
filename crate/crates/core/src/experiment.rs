//! Experiment configuration, multi-seed execution and result files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, write_atomic, NamedTensor};
use crate::data::{gen_dataset, load_manifest, Dataset, GeneratorConfig};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{BranchMask, ModelConfig};
use crate::nn::SgdConfig;
use crate::protocol::{build_stream, compose_cross_domain, repeat_with_seeds, run_fscil, Aggregate, RunSettings, ScenarioConfig, TaskStream};
use crate::prototype::PrototypeConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(GeneratorConfig),
    Manifest { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(GeneratorConfig::default())
    }
}

/// A further data source whose classes arrive as incremental tasks after the main stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncrementalSource {
    pub data: DataSource,
    pub scenario: ScenarioConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub sgd: SgdConfig,
    pub prototype: PrototypeConfig,
    pub scenario: ScenarioConfig,
    pub data: DataSource,
    pub incremental_sources: Vec<IncrementalSource>,
    pub seeds: Vec<u64>,
    /// Also write the feature extractor and classifier state of every seed.
    pub save_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            sgd: SgdConfig::default(),
            prototype: PrototypeConfig::default(),
            scenario: ScenarioConfig::default(),
            data: DataSource::default(),
            incremental_sources: Vec::new(),
            seeds: vec![0],
            save_checkpoints: false,
        }
    }
}

impl ExperimentConfig {
    /// Reduced-budget setup for a single CPU core: 32x32 inputs, widths 16..128,
    /// 40 samples per class and short training phases.
    pub fn desk() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.model.pretrain_epochs = 5;
        cfg.model.pretrain_lr = 0.05;
        cfg.sgd.epochs = 5;
        cfg.sgd.learning_rate = 0.05;
        cfg.sgd.batch_size = 16;
        if let DataSource::Synthetic(g) = &mut cfg.data {
            g.per_class = 40;
        }
        cfg.seeds = (0..5).collect();
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    /// Reads a config file. Relative manifest paths are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |d: &mut DataSource| {
            if let DataSource::Manifest { path } = d {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        resolve(&mut cfg.data);
        cfg.incremental_sources.iter_mut().for_each(|s| resolve(&mut s.data));
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.sgd.validate()?;
        self.prototype.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let check_source = |d: &DataSource, scenario: &ScenarioConfig| -> Result<()> {
            if let DataSource::Synthetic(g) = d {
                g.validate()?;
                if g.size != self.model.input_size {
                    return Err(Error::Config(format!(
                        "generator size {} differs from model input size {}",
                        g.size, self.model.input_size
                    )));
                }
                scenario.task_sizes(scenario.total_classes.unwrap_or(g.num_classes))?;
            }
            Ok(())
        };
        check_source(&self.data, &self.scenario)?;
        if self.scenario.base_classes < 2 {
            return Err(Error::Config("scenario.base_classes must be at least 2".into()));
        }
        for src in &self.incremental_sources {
            if src.scenario.base_classes != 0 {
                return Err(Error::Config("incremental sources must have base_classes = 0".into()));
            }
            check_source(&src.data, &src.scenario)?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(format!("{:x}", Sha256::digest(&bytes)))
    }
}

fn load_source(d: &DataSource, size: usize) -> Result<Dataset> {
    match d {
        DataSource::Synthetic(g) => Ok(gen_dataset(g)?.0),
        DataSource::Manifest { path } => load_manifest(path, size),
    }
}

/// Loaded data of the main source followed by every incremental source.
pub fn load_sources(cfg: &ExperimentConfig) -> Result<Vec<Dataset>> {
    let mut out = vec![load_source(&cfg.data, cfg.model.input_size)?];
    for src in &cfg.incremental_sources {
        out.push(load_source(&src.data, cfg.model.input_size)?);
    }
    Ok(out)
}

/// The run's task stream for one seed. Class ids of incremental sources are
/// shifted past those of earlier sources before composition.
pub fn stream_for_seed(cfg: &ExperimentConfig, sources: &[Dataset], seed: u64) -> Result<TaskStream> {
    let scenarios = std::iter::once(&cfg.scenario).chain(cfg.incremental_sources.iter().map(|s| &s.scenario));
    let mut streams = Vec::with_capacity(sources.len());
    let mut offset = 0;
    for (i, (data, scenario)) in sources.iter().zip(scenarios).enumerate() {
        let mut s = build_stream(data, scenario, seed.wrapping_add(i as u64 * 0x9E37_79B9))?;
        s.labels.iter_mut().for_each(|l| *l += offset);
        s.tasks.iter_mut().for_each(|t| t.classes.iter_mut().for_each(|c| *c += offset));
        offset += data.num_classes;
        streams.push(s);
    }
    compose_cross_domain(streams)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Results {
    pub scenario: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub variants: Vec<Aggregate>,
}

/// Everything a command produces, held in memory until it is written.
#[derive(Debug, Clone)]
pub struct Outputs {
    pub results: Results,
    /// `(file name, container)` pairs for saved checkpoints.
    pub checkpoints: Vec<(String, Vec<NamedTensor>)>,
}

/// Runs every seed of `cfg`, evaluating each branch mask on the same trained network.
pub fn run_experiment(cfg: &ExperimentConfig, masks: &[BranchMask]) -> Result<Outputs> {
    cfg.validate()?;
    let config_hash = cfg.hash()?;
    let sources = load_sources(cfg)?;
    let scenario = cfg.scenario.name();
    let settings = RunSettings {
        model: &cfg.model,
        loss: &cfg.loss,
        sgd: &cfg.sgd,
        prototype: &cfg.prototype,
        scenario: &scenario,
        config_hash: &config_hash,
    };
    let saved: Mutex<BTreeMap<u64, Vec<(String, Vec<NamedTensor>)>>> = Mutex::new(BTreeMap::new());
    let variants = repeat_with_seeds(&cfg.seeds, |seed| {
        let stream = stream_for_seed(cfg, &sources, seed)?;
        stream.check_invariants(Some(cfg.scenario.k))?;
        let outcome = run_fscil(&settings, &stream, seed, masks)?;
        if cfg.save_checkpoints {
            let mut files = vec![(format!("extractor_seed{seed}.tensors"), checkpoint::from_store(&outcome.model.store))];
            for (mask, state) in masks.iter().zip(&outcome.classifiers) {
                let name = crate::protocol::variant_name(*mask);
                files.push((format!("classifier_{name}_seed{seed}.tensors"), state.to_tensors()?));
            }
            saved.lock().expect("checkpoint map").insert(seed, files);
        }
        Ok(outcome.reports)
    })?;
    Ok(Outputs {
        results: Results {
            scenario,
            config_hash,
            config: cfg.clone(),
            variants,
        },
        checkpoints: saved.into_inner().expect("checkpoint map").into_values().flatten().collect(),
    })
}

pub fn results_json(results: &Results) -> Result<String> {
    let mut s = serde_json::to_string_pretty(results)?;
    s.push('\n');
    Ok(s)
}

/// One row per (variant, seed, task).
pub fn results_csv(results: &Results) -> String {
    let mut out = String::from("variant,seed,task,accuracy\n");
    for v in &results.variants {
        for r in &v.runs {
            for (t, a) in r.per_task_accuracy.iter().enumerate() {
                let _ = writeln!(out, "{},{},{},{}", r.variant, r.seed, t, a);
            }
        }
    }
    out
}

/// Per-task accuracies (%) of every variant's seed mean, then average and drop.
pub fn format_table(results: &Results) -> String {
    let tasks = results.variants.first().map_or(0, |v| v.mean_per_task_accuracy.len());
    let seeds = results.variants.first().map(|v| v.seeds.clone()).unwrap_or_default();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{}  seeds {:?}  config {}",
        results.scenario,
        seeds,
        &results.config_hash[..12.min(results.config_hash.len())]
    );
    let _ = write!(out, "{:<14}|", "method");
    for t in 0..tasks {
        let _ = write!(out, "{t:>7}");
    }
    let _ = writeln!(out, " |{:>7}{:>7}", "Avg", "PD");
    let _ = writeln!(out, "{}", "-".repeat(15 + 7 * tasks + 16));
    for v in &results.variants {
        let _ = write!(out, "{:<14}|", v.variant);
        for a in &v.mean_per_task_accuracy {
            let _ = write!(out, "{:>7.2}", 100.0 * a);
        }
        let _ = writeln!(out, " |{:>7.2}{:>7.2}", 100.0 * v.mean_avg_inc_accuracy, 100.0 * v.mean_performance_drop);
    }
    out
}

/// Writes `results.json`, `results.csv` and any checkpoints into `dir`.
/// Every file goes through a temp-and-rename.
pub fn write_outputs(dir: &Path, outputs: &Outputs) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, tensors) in &outputs.checkpoints {
        checkpoint::save(&dir.join(name), tensors)?;
    }
    write_atomic(&dir.join("results.csv"), results_csv(&outputs.results).as_bytes())?;
    write_atomic(&dir.join("results.json"), results_json(&outputs.results)?.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = ExperimentConfig::from_json(r#"{"modle": {}}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = ExperimentConfig::from_json(r#"{"sgd": {"learning_rate": 0.1, "momentum": 0.9}}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let ok = ExperimentConfig::from_json(r#"{"data": {"synthetic": {"num_classes": 6}}, "seeds": [3]}"#).unwrap();
        assert_eq!(ok.seeds, vec![3]);
    }

    #[test]
    fn validation() {
        ExperimentConfig::default().validate().unwrap();
        ExperimentConfig::desk().validate().unwrap();
        let mut bad = ExperimentConfig::default();
        bad.model.input_size = 33;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = ExperimentConfig::default();
        bad.scenario.n = 4;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = ExperimentConfig::default();
        bad.seeds.clear();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.loss.gamma = 1.0;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }

    #[test]
    fn roundtrip_json() {
        let cfg = ExperimentConfig::desk();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    }
}
