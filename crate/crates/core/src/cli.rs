//! Experiment configuration and the commands behind the `unshuffle` binary.
//!
//! An experiment is a TOML document with the sections `data`, `partition`,
//! `train`, `eval` and `output`. Unknown keys are rejected, referenced files
//! must exist when the config is loaded, and every command writes an echo of
//! the config (`config.toml`) next to its outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{read_dataset, write_dataset, Dataset};
use crate::datagen::{gen_spurious, gen_token_groups_splits, Splits, SpuriousSpec, TokenGroupsConfig};
use crate::error::{Error, Result};
use crate::eval::{accuracy, ensemble_accuracy, sweep, ExperimentData, SweepAxis, SweepSpec};
use crate::model::{HeadSelector, ModelParams};
use crate::optimizer::{train, TrainConfig};
use crate::partitioning::PartitionStrategy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Spurious {
        seed: u64,
        spec: SpuriousSpec,
    },
    TokenGroups {
        seed: u64,
        #[serde(default)]
        config: TokenGroupsConfig,
    },
    /// Previously written JSONL files; each train file is one source dataset.
    Files {
        train: Vec<PathBuf>,
        val: PathBuf,
        test: PathBuf,
    },
    /// A directory written by `gen`, read through its manifest.
    Manifest {
        dir: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
    pub repeats: usize,
    #[serde(default)]
    pub base_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "one")]
    pub ensemble: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ensemble: 1,
            sweep: None,
        }
    }
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    #[serde(default = "pooled")]
    pub partition: PartitionStrategy,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputConfig>,
}

fn pooled() -> PartitionStrategy {
    PartitionStrategy::Pooled
}

fn require_exists(field: &str, path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::config(field, format!("{} does not exist", path.display())))
    }
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::config("config", e.message().to_string() + &span_hint(s, e.span())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| prefix("train", e))?;
        match &self.data {
            Some(DataConfig::Spurious { spec, .. }) => spec.validate().map_err(|e| prefix("data.spec", e))?,
            Some(DataConfig::TokenGroups { config, .. }) => {
                config.validate().map_err(|e| prefix("data.config", e))?
            }
            Some(DataConfig::Files { train, val, test }) => {
                if train.is_empty() {
                    return Err(Error::config("data.train", "needs at least one file"));
                }
                for p in train {
                    require_exists("data.train", p)?;
                }
                require_exists("data.val", val)?;
                require_exists("data.test", test)?;
            }
            Some(DataConfig::Manifest { dir }) => require_exists("data.dir", &dir.join(MANIFEST))?,
            None => {}
        }
        if let PartitionStrategy::File { path } = &self.partition {
            require_exists("partition.path", path)?;
        }
        if self.eval.ensemble < 1 {
            return Err(Error::config("eval.ensemble", "must be >= 1"));
        }
        if let Some(s) = &self.eval.sweep {
            self.sweep_spec(s)?.validate().map_err(|e| prefix("eval.sweep", e))?;
        }
        Ok(())
    }

    fn sweep_spec(&self, s: &SweepSection) -> Result<SweepSpec> {
        Ok(SweepSpec {
            axis: s.axis,
            grid: s.grid.clone(),
            repeats: s.repeats,
            base: self.train.clone(),
            strategy: self.partition.clone(),
            base_seed: s.base_seed.unwrap_or(self.train.seed),
        })
    }

    fn data(&self) -> Result<&DataConfig> {
        self.data
            .as_ref()
            .ok_or_else(|| Error::config("data", "section is required for this command"))
    }

    fn output_dir(&self) -> Result<&Path> {
        self.output
            .as_ref()
            .map(|o| o.dir.as_path())
            .ok_or_else(|| Error::config("output.dir", "is required for this command"))
    }
}

fn prefix(section: &str, e: Error) -> Error {
    match e {
        Error::InvalidConfig { field, reason } => Error::InvalidConfig {
            field: format!("{section}.{field}"),
            reason,
        },
        other => other,
    }
}

fn span_hint(src: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(r) => {
            let line = src[..r.start.min(src.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}

const MANIFEST: &str = "manifest.json";
const CONFIG_ECHO: &str = "config.toml";

/// File listing written by `gen`; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: String,
    pub seed: u64,
    pub train: Vec<String>,
    pub val: String,
    pub test: String,
}

impl DataConfig {
    /// Training sources plus validation and test sets.
    pub fn resolve(&self) -> Result<ExperimentData> {
        let splits = match self {
            DataConfig::Spurious { seed, spec } => gen_spurious(spec, *seed)?,
            DataConfig::TokenGroups { seed, config } => gen_token_groups_splits(config, *seed)?,
            DataConfig::Files { train, val, test } => Splits {
                train: train.iter().map(read_dataset).collect::<Result<_>>()?,
                val: read_dataset(val)?,
                test: read_dataset(test)?,
            },
            DataConfig::Manifest { dir } => {
                let path = dir.join(MANIFEST);
                let s = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let m: Manifest = serde_json::from_str(&s)?;
                Splits {
                    train: m.train.iter().map(|f| read_dataset(dir.join(f))).collect::<Result<_>>()?,
                    val: read_dataset(dir.join(&m.val))?,
                    test: read_dataset(dir.join(&m.test))?,
                }
            }
        };
        Ok(ExperimentData {
            sources: splits.train,
            val: splits.val,
            test: splits.test,
        })
    }
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force` is set.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let nonempty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if nonempty && !force {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn echo_config(config: &ExperimentConfig, dir: &Path) -> Result<()> {
    write_file(&dir.join(CONFIG_ECHO), &config.to_toml()?)
}

fn to_json_line<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// Writes the generated splits as JSONL plus a manifest.
pub fn cmd_gen(config: &ExperimentConfig, out: &Path, force: bool) -> Result<Manifest> {
    let (kind, seed) = match config.data()? {
        DataConfig::Spurious { seed, .. } => ("spurious", *seed),
        DataConfig::TokenGroups { seed, .. } => ("token_groups", *seed),
        _ => return Err(Error::config("data.kind", "gen needs a generator (spurious or token_groups)")),
    };
    let data = config.data()?.resolve()?;
    prepare_output_dir(out, force)?;
    let mut train = Vec::with_capacity(data.sources.len());
    for (e, d) in data.sources.iter().enumerate() {
        let name = if data.sources.len() == 1 {
            "train.jsonl".to_string()
        } else {
            format!("train_env{e}.jsonl")
        };
        write_dataset(d, out.join(&name))?;
        train.push(name);
    }
    write_dataset(&data.val, out.join("val.jsonl"))?;
    write_dataset(&data.test, out.join("test.jsonl"))?;
    let manifest = Manifest {
        kind: kind.into(),
        seed,
        train,
        val: "val.jsonl".into(),
        test: "test.jsonl".into(),
    };
    write_file(&out.join(MANIFEST), &to_json_line(&manifest)?)?;
    echo_config(config, out)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub strategy: String,
    pub seed: u64,
    pub num_envs: usize,
    pub env_sizes: Vec<usize>,
    /// Per environment, examples per class.
    pub label_histograms: Vec<BTreeMap<usize, usize>>,
}

/// Partitions the pooled input datasets and writes `partition.json` and `summary.json`.
pub fn cmd_partition(
    config: &ExperimentConfig,
    inputs: &[PathBuf],
    out: &Path,
    force: bool,
) -> Result<PartitionSummary> {
    if inputs.is_empty() {
        return Err(Error::config("--in", "at least one dataset is required"));
    }
    let sources = inputs.iter().map(read_dataset).collect::<Result<Vec<_>>>()?;
    let pooled = if sources.len() == 1 {
        sources[0].clone()
    } else {
        Dataset::concat(&sources)?
    };
    let seed = config.train.seed;
    let partition = config
        .partition
        .partition(&pooled, &sources, seed)?
        .ok_or_else(|| {
            Error::config(
                "partition.strategy",
                format!("{} does not produce an index partition", config.partition.name()),
            )
        })?;
    partition.validate(pooled.len())?;
    let envs = partition.materialize(&pooled)?;
    let summary = PartitionSummary {
        strategy: partition.strategy.clone(),
        seed,
        num_envs: envs.len(),
        env_sizes: envs.iter().map(Dataset::len).collect(),
        label_histograms: envs.iter().map(Dataset::label_histogram).collect(),
    };
    prepare_output_dir(out, force)?;
    partition.save(out.join("partition.json"))?;
    write_file(&out.join("summary.json"), &to_json_line(&summary)?)?;
    echo_config(config, out)?;
    Ok(summary)
}

/// Trains per the config and writes `model.json`, `report.json`, `trace.csv`.
pub fn cmd_train(config: &ExperimentConfig, force: bool) -> Result<crate::optimizer::RunReport> {
    let out = config.output_dir()?;
    let data = config.data()?.resolve()?;
    let envs = config.partition.apply(&data.sources, config.train.seed)?;
    prepare_output_dir(out, force)?;
    let (params, mut report) = train(&config.train, &envs, &data.val)?;
    report.ood_accuracy = Some(accuracy(&params, HeadSelector::Merged, &data.test)?);
    params.save(out.join("model.json"))?;
    write_file(&out.join("report.json"), &(report.to_json()? + "\n"))?;
    report.save_trace_csv(out.join("trace.csv"))?;
    echo_config(config, out)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetric {
    pub path: PathBuf,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub models: Vec<PathBuf>,
    pub ensemble: bool,
    /// With `ensemble`, one list holding the averaged model; otherwise one list per model.
    pub results: Vec<Vec<DatasetMetric>>,
}

/// Accuracy of the merged head of each model, or of their prediction average.
pub fn cmd_eval(models: &[PathBuf], datasets: &[PathBuf], ensemble: bool) -> Result<EvalMetrics> {
    if models.is_empty() {
        return Err(Error::config("--model", "at least one model is required"));
    }
    if datasets.is_empty() {
        return Err(Error::config("--data", "at least one dataset is required"));
    }
    let params = models.iter().map(ModelParams::load).collect::<Result<Vec<_>>>()?;
    let data = datasets.iter().map(read_dataset).collect::<Result<Vec<_>>>()?;
    let score = |ms: &[ModelParams]| -> Result<Vec<DatasetMetric>> {
        datasets
            .iter()
            .zip(&data)
            .map(|(path, d)| {
                Ok(DatasetMetric {
                    path: path.clone(),
                    accuracy: ensemble_accuracy(ms, HeadSelector::Merged, d)?,
                })
            })
            .collect()
    };
    let results = if ensemble {
        vec![score(&params)?]
    } else {
        params
            .iter()
            .map(|p| score(std::slice::from_ref(p)))
            .collect::<Result<_>>()?
    };
    Ok(EvalMetrics {
        models: models.to_vec(),
        ensemble,
        results,
    })
}

impl EvalMetrics {
    pub fn to_json(&self) -> Result<String> {
        to_json_line(self)
    }
}

/// Runs the configured sweep; `sweep.csv` grows one row per finished grid point.
pub fn cmd_sweep(config: &ExperimentConfig, force: bool) -> Result<crate::eval::ComparisonReport> {
    let section = config
        .eval
        .sweep
        .as_ref()
        .ok_or_else(|| Error::config("eval.sweep", "section is required for sweep"))?;
    let spec = config.sweep_spec(section)?;
    let out = config.output_dir()?;
    let data = config.data()?.resolve()?;
    prepare_output_dir(out, force)?;
    echo_config(config, out)?;
    let csv_path = out.join("sweep.csv");
    let mut file = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let report = sweep(&spec, &data, Some(&mut file))?;
    write_file(&out.join("report.json"), &(report.to_json()? + "\n"))?;
    Ok(report)
}
