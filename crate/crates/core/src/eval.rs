//! Accuracy, prediction-averaging ensembles, multi-seed comparisons and
//! hyperparameter sweeps.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::mpsc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{argmax, Dataset};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{forward, Batch, HeadSelector, Labels, ModelParams};
use crate::optimizer::{train, Objective, TrainConfig};
use crate::partitioning::PartitionStrategy;

/// Environment variable capping the number of worker threads used by sweeps.
pub const THREADS_ENV: &str = "UNSHUFFLE_THREADS";

/// Percentage of examples whose highest-probability class (lowest index on
/// ties) matches the label. For soft labels the credit is the target value
/// of the predicted class.
pub fn accuracy_from_probs(probs: &Matrix, labels: &Labels) -> Result<f64> {
    if probs.rows == 0 {
        return Err(Error::EmptyDataset);
    }
    if labels.len() != probs.rows {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} predictions",
            labels.len(),
            probs.rows
        )));
    }
    let credit: f64 = (0..probs.rows)
        .map(|i| {
            let pred = argmax(probs.row(i));
            match labels {
                Labels::Classes(c) => (c[i] == pred) as u8 as f64,
                Labels::MultiHot(m) => m.get(i, pred),
            }
        })
        .sum();
    Ok(100.0 * credit / probs.rows as f64)
}

pub fn batch_accuracy(params: &ModelParams, selector: HeadSelector, batch: &Batch) -> Result<f64> {
    let probs = forward(params, selector, &batch.features)?;
    accuracy_from_probs(&probs, &batch.labels)
}

pub fn accuracy(params: &ModelParams, selector: HeadSelector, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    batch_accuracy(params, selector, &dataset.to_batch()?)
}

/// Elementwise mean of the models' output probabilities.
pub fn ensemble_predict(models: &[ModelParams], selector: HeadSelector, x: &Matrix) -> Result<Matrix> {
    let first = models
        .first()
        .ok_or_else(|| Error::config("models", "ensemble needs at least one model"))?;
    for (k, m) in models.iter().enumerate() {
        if m.input_dim() != first.input_dim() || m.num_classes() != first.num_classes() {
            return Err(Error::ShapeMismatch(format!(
                "model {k} maps {} inputs to {} classes, model 0 maps {} to {}",
                m.input_dim(),
                m.num_classes(),
                first.input_dim(),
                first.num_classes()
            )));
        }
    }
    let mut sum = forward(first, selector, x)?;
    if models.len() == 1 {
        return Ok(sum);
    }
    for m in &models[1..] {
        let p = forward(m, selector, x)?;
        for (s, v) in sum.data.iter_mut().zip(&p.data) {
            *s += v;
        }
    }
    let k = models.len() as f64;
    sum.data.iter_mut().for_each(|s| *s /= k);
    Ok(sum)
}

pub fn ensemble_accuracy(models: &[ModelParams], selector: HeadSelector, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batch = dataset.to_batch()?;
    let probs = ensemble_predict(models, selector, &batch.features)?;
    accuracy_from_probs(&probs, &batch.labels)
}

/// Training sources, in-distribution validation set and OOD test set.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub sources: Vec<Dataset>,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub seed: u64,
    pub val_accuracy: f64,
    pub ood_accuracy: f64,
    pub final_variance: f64,
}

/// Trains one configuration (or an ensemble of `ensemble` members seeded
/// `seed + 100000·m`) and scores it.
pub fn run_once(
    config: &TrainConfig,
    strategy: &PartitionStrategy,
    ensemble: usize,
    data: &ExperimentData,
    seed: u64,
) -> Result<RunOutcome> {
    let mut models = Vec::with_capacity(ensemble.max(1));
    let mut first = None;
    for m in 0..ensemble.max(1) as u64 {
        let member_seed = seed + 100_000 * m;
        let envs = strategy.apply(&data.sources, member_seed)?;
        let cfg = TrainConfig {
            seed: member_seed,
            ..config.clone()
        };
        let (params, report) = train(&cfg, &envs, &data.val)?;
        first.get_or_insert(report);
        models.push(params);
    }
    let report = first.expect("at least one member");
    let (val_accuracy, ood_accuracy) = if models.len() == 1 {
        (report.best_val_accuracy, accuracy(&models[0], HeadSelector::Merged, &data.test)?)
    } else {
        (
            ensemble_accuracy(&models, HeadSelector::Merged, &data.val)?,
            ensemble_accuracy(&models, HeadSelector::Merged, &data.test)?,
        )
    };
    Ok(RunOutcome {
        seed,
        val_accuracy,
        ood_accuracy,
        final_variance: report.final_variance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis_value: Option<f64>,
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub mean_val_acc: Option<f64>,
    pub std_val_acc: Option<f64>,
    pub mean_ood_acc: Option<f64>,
    pub std_ood_acc: Option<f64>,
    pub mean_final_variance: Option<f64>,
    pub runs: Vec<RunOutcome>,
}

impl ComparisonRow {
    fn aggregate(label: String, axis_value: Option<f64>, results: Vec<Result<RunOutcome>>) -> Self {
        let mut runs = Vec::with_capacity(results.len());
        let mut error = None;
        for r in results {
            match r {
                Ok(o) => runs.push(o),
                Err(e) => {
                    error.get_or_insert_with(|| e.to_string());
                }
            }
        }
        if let Some(error) = error {
            return Self {
                label,
                axis_value,
                failed: true,
                error: Some(error),
                mean_val_acc: None,
                std_val_acc: None,
                mean_ood_acc: None,
                std_ood_acc: None,
                mean_final_variance: None,
                runs,
            };
        }
        let col = |f: fn(&RunOutcome) -> f64| runs.iter().map(f).collect::<Vec<_>>();
        let val = col(|r| r.val_accuracy);
        let ood = col(|r| r.ood_accuracy);
        let var = col(|r| r.final_variance);
        Self {
            label,
            axis_value,
            failed: false,
            error: None,
            mean_val_acc: Some(mean(&val)),
            std_val_acc: sample_std(&val),
            mean_ood_acc: Some(mean(&ood)),
            std_ood_acc: sample_std(&ood),
            mean_final_variance: Some(mean(&var)),
            runs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<SweepAxis>,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn row(&self, label: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; `None` below two values.
pub fn sample_std(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v);
    Some((v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
}

/// One named configuration in a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub config: TrainConfig,
    pub strategy: PartitionStrategy,
    pub ensemble: usize,
}

impl Variant {
    pub fn new(label: impl Into<String>, config: TrainConfig, strategy: PartitionStrategy) -> Self {
        Self {
            label: label.into(),
            config,
            strategy,
            ensemble: 1,
        }
    }

    /// Pooled risk minimization.
    pub fn erm(config: &TrainConfig) -> Self {
        Self::new(
            "erm",
            TrainConfig {
                objective: Objective::Erm,
                ..config.clone()
            },
            PartitionStrategy::Pooled,
        )
    }
}

/// Seed of repeat `r` at grid point `i`.
pub fn derived_seed(base_seed: u64, point: usize, repeat: usize) -> u64 {
    base_seed + point as u64 * 1000 + repeat as u64
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::config(THREADS_ENV, format!("{v:?} is not a thread count")))?;
        if n == 0 {
            return Err(Error::config(THREADS_ENV, "must be >= 1"));
        }
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::config(THREADS_ENV, e.to_string()))
}

/// Runs every (point, repeat) job concurrently and hands completed points to
/// `on_point` in index order.
fn run_points<F>(
    points: usize,
    repeats: usize,
    job: F,
    mut on_point: impl FnMut(usize, Vec<Result<RunOutcome>>) -> Result<()>,
) -> Result<()>
where
    F: Fn(usize, usize) -> Result<RunOutcome> + Sync,
{
    let pool = thread_pool()?;
    let jobs: Vec<(usize, usize)> = (0..points)
        .flat_map(|p| (0..repeats).map(move |r| (p, r)))
        .collect();
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|s| {
        let job = &job;
        let jobs = &jobs;
        let pool = &pool;
        s.spawn(move || {
            pool.install(|| {
                jobs.par_iter().for_each_with(tx, |tx, &(p, r)| {
                    let _ = tx.send((p, r, job(p, r)));
                });
            });
        });
        let mut pending: BTreeMap<usize, Vec<Option<Result<RunOutcome>>>> = BTreeMap::new();
        let mut next = 0;
        let mut outcome = Ok(());
        for (p, r, res) in rx {
            pending
                .entry(p)
                .or_insert_with(|| (0..repeats).map(|_| None).collect())[r] = Some(res);
            while pending
                .get(&next)
                .is_some_and(|slots| slots.iter().all(Option::is_some))
            {
                let slots = pending.remove(&next).unwrap();
                if outcome.is_ok() {
                    outcome = on_point(next, slots.into_iter().map(Option::unwrap).collect());
                }
                next += 1;
            }
        }
        outcome
    })
}

/// Trains each variant over `repeats` seeds (`base_seed + 1000·variant + repeat`).
pub fn compare(
    variants: &[Variant],
    data: &ExperimentData,
    repeats: usize,
    base_seed: u64,
) -> Result<ComparisonReport> {
    if repeats < 1 {
        return Err(Error::config("repeats", "must be >= 1"));
    }
    let mut rows = Vec::with_capacity(variants.len());
    run_points(
        variants.len(),
        repeats,
        |p, r| {
            let v = &variants[p];
            run_once(&v.config, &v.strategy, v.ensemble, data, derived_seed(base_seed, p, r))
        },
        |p, results| {
            rows.push(ComparisonRow::aggregate(variants[p].label.clone(), None, results));
            Ok(())
        },
    )?;
    Ok(ComparisonReport { axis: None, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lambda,
    #[serde(rename = "E", alias = "envs")]
    Envs,
    #[serde(rename = "K", alias = "clusters")]
    Clusters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
    pub repeats: usize,
    pub base: TrainConfig,
    pub strategy: PartitionStrategy,
    pub base_seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::config("grid", "must not be empty"));
        }
        if self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("grid", "must be strictly increasing"));
        }
        if self.repeats < 1 {
            return Err(Error::config("repeats", "must be >= 1"));
        }
        match self.axis {
            SweepAxis::Lambda => {
                if self.grid.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::config("grid", "lambda values must be finite and >= 0"));
                }
                let positive: Vec<f64> = self.grid.iter().copied().filter(|v| *v > 0.0).collect();
                if positive.len() >= 3 {
                    let ratios: Vec<f64> = positive.windows(2).map(|w| (w[1] / w[0]).ln()).collect();
                    let m = mean(&ratios);
                    if ratios.iter().any(|r| (r - m).abs() > 1e-6 * m.abs().max(1.0)) {
                        return Err(Error::config("grid", "positive lambda values must be log-spaced"));
                    }
                }
            }
            SweepAxis::Envs | SweepAxis::Clusters => {
                if self.grid.iter().any(|v| v.fract() != 0.0 || *v < 1.0) {
                    return Err(Error::config("grid", "E and K values must be positive integers"));
                }
            }
        }
        Ok(())
    }

    fn point(&self, value: f64) -> Result<(TrainConfig, PartitionStrategy)> {
        let mut config = self.base.clone();
        let strategy = match self.axis {
            SweepAxis::Lambda => {
                config.lambda = value;
                self.strategy.clone()
            }
            SweepAxis::Envs => self.strategy.with_envs(value as usize)?,
            SweepAxis::Clusters => self.strategy.with_clusters(value as usize)?,
        };
        Ok((config, strategy))
    }
}

pub const SWEEP_CSV_HEADER: [&str; 6] = [
    "axis_value",
    "mean_val_acc",
    "std_val_acc",
    "mean_ood_acc",
    "std_ood_acc",
    "mean_final_variance",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Runs the sweep, writing one CSV row per grid point as soon as that point
/// and all earlier ones have finished.
pub fn sweep(spec: &SweepSpec, data: &ExperimentData, csv_out: Option<&mut dyn Write>) -> Result<ComparisonReport> {
    spec.validate()?;
    let mut writer = csv_out.map(csv::Writer::from_writer);
    if let Some(w) = writer.as_mut() {
        w.write_record(SWEEP_CSV_HEADER)?;
        w.flush().map_err(|e| Error::io("sweep.csv", e))?;
    }
    let points: Vec<Result<(TrainConfig, PartitionStrategy)>> =
        spec.grid.iter().map(|&v| spec.point(v)).collect();
    let mut rows = Vec::with_capacity(spec.grid.len());
    run_points(
        spec.grid.len(),
        spec.repeats,
        |p, r| {
            let (config, strategy) = points[p].as_ref().map_err(|e| Error::config("grid", e.to_string()))?;
            run_once(config, strategy, 1, data, derived_seed(spec.base_seed, p, r))
        },
        |p, results| {
            let value = spec.grid[p];
            let row = ComparisonRow::aggregate(value.to_string(), Some(value), results);
            if let Some(w) = writer.as_mut() {
                w.write_record([
                    value.to_string(),
                    opt(row.mean_val_acc),
                    opt(row.std_val_acc),
                    opt(row.mean_ood_acc),
                    opt(row.std_ood_acc),
                    opt(row.mean_final_variance),
                ])?;
                w.flush().map_err(|e| Error::io("sweep.csv", e))?;
            }
            rows.push(row);
            Ok(())
        },
    )?;
    Ok(ComparisonReport {
        axis: Some(spec.axis),
        rows,
    })
}
