//! Training under the multi-environment objective
//! `Σ_e L_e(w_e f_θ) + λ Var_e(w_e)` with AdaDelta, optional alternating
//! extractor/head updates, early stopping on merged-model validation
//! accuracy, and head merging for inference.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::batch_accuracy;
use crate::model::{self, init_params, Activation, Head, HeadSelector, LayerGrad, ModelParams};
use crate::regularizers::{
    add_into, grad_variance, irmv1_objective_grad, mean_head, variance, HeadStack, RelDenominator,
    VarianceMode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    #[default]
    Mean,
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Per-environment heads with the variance penalty.
    #[default]
    Eq2,
    /// Single environment, plain risk minimization.
    Erm,
    /// Shared head with the IRMv1 gradient-norm penalty.
    Irmv1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub variance_mode: VarianceMode,
    pub rel_denominator: RelDenominator,
    pub alternating: bool,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub adadelta_rho: f64,
    pub adadelta_eps: f64,
    pub seed: u64,
    pub merge_mode: MergeMode,
    pub objective: Objective,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            variance_mode: VarianceMode::Relative,
            rel_denominator: RelDenominator::L1,
            alternating: false,
            warmup_epochs: 0,
            batch_size: 64,
            max_epochs: 60,
            patience: 10,
            adadelta_rho: 0.95,
            adadelta_eps: 1e-6,
            seed: 0,
            merge_mode: MergeMode::Mean,
            objective: Objective::Eq2,
            hidden_dims: vec![16],
            feature_dim: 8,
            activation: Activation::Relu,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config("lambda", "must be a finite value >= 0"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.max_epochs < 1 {
            return Err(Error::config("max_epochs", "must be >= 1"));
        }
        if self.patience < 1 {
            return Err(Error::config("patience", "must be >= 1"));
        }
        if self.warmup_epochs > self.max_epochs {
            return Err(Error::config("warmup_epochs", "must be <= max_epochs"));
        }
        if !(self.adadelta_rho > 0.0 && self.adadelta_rho < 1.0) {
            return Err(Error::config("adadelta_rho", "must be in (0, 1)"));
        }
        if !(self.adadelta_eps.is_finite() && self.adadelta_eps > 0.0) {
            return Err(Error::config("adadelta_eps", "must be > 0"));
        }
        if self.feature_dim < 1 {
            return Err(Error::config("feature_dim", "must be >= 1"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::config("hidden_dims", "every width must be >= 1"));
        }
        Ok(())
    }
}

/// Running averages of squared gradients and squared updates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaDeltaState {
    pub sq_grad: Vec<f64>,
    pub sq_delta: Vec<f64>,
}

impl AdaDeltaState {
    pub fn new(len: usize) -> Self {
        Self {
            sq_grad: vec![0.0; len],
            sq_delta: vec![0.0; len],
        }
    }
}

/// One AdaDelta update of `params` in place:
/// `E[g²] ← ρE[g²] + (1−ρ)g²`, `Δ = −√(E[Δ²]+ε)/√(E[g²]+ε)·g`,
/// `E[Δ²] ← ρE[Δ²] + (1−ρ)Δ²`, `x ← x + Δ`.
pub fn adadelta_step(
    state: &mut AdaDeltaState,
    params: &mut [f64],
    grads: &[f64],
    rho: f64,
    eps: f64,
    tensor: &str,
) -> Result<()> {
    if params.len() != grads.len() || state.sq_grad.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{tensor}: {} params, {} grads, {} accumulators",
            params.len(),
            grads.len(),
            state.sq_grad.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {tensor}")));
    }
    for (((x, &g), eg), ed) in params
        .iter_mut()
        .zip(grads)
        .zip(state.sq_grad.iter_mut())
        .zip(state.sq_delta.iter_mut())
    {
        *eg = rho * *eg + (1.0 - rho) * g * g;
        let delta = -((*ed + eps).sqrt() / (*eg + eps).sqrt()) * g;
        *ed = rho * *ed + (1.0 - rho) * delta * delta;
        *x += delta;
    }
    Ok(())
}

/// Sets `merged` to the elementwise mean or median of the heads.
pub fn merge_heads(params: &ModelParams, mode: MergeMode) -> ModelParams {
    let mut out = params.clone();
    merge_in_place(&mut out, mode);
    out
}

fn merge_in_place(params: &mut ModelParams, mode: MergeMode) {
    let flats: Vec<Vec<f64>> = params.heads.iter().map(Head::flatten).collect();
    let e = flats.len();
    let stack = HeadStack::new(flats.clone()).expect("heads share one shape");
    let mean = mean_head(&stack).expect("at least one head");
    let merged: Vec<f64> = (0..flats[0].len())
        .map(|j| match mode {
            MergeMode::Mean => mean[j],
            MergeMode::Median => {
                let mut col: Vec<f64> = flats.iter().map(|v| v[j]).collect();
                col.sort_by(f64::total_cmp);
                if e % 2 == 1 {
                    col[e / 2]
                } else {
                    0.5 * (col[e / 2 - 1] + col[e / 2])
                }
            }
        })
        .collect();
    params.merged = Some(params.heads[0].unflatten_like(&merged, e));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean mini-batch loss per environment over the epoch.
    pub env_losses: Vec<f64>,
    pub variance: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub seed: u64,
    pub num_envs: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Head variance of the returned parameters, in the configured mode.
    pub final_variance: f64,
    pub stopped_early: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood_accuracy: Option<f64>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Everything but the config echo.
    pub fn same_outcome(&self, other: &RunReport) -> bool {
        self.epochs == other.epochs
            && self.best_epoch == other.best_epoch
            && self.best_val_accuracy.to_bits() == other.best_val_accuracy.to_bits()
            && self.final_variance.to_bits() == other.final_variance.to_bits()
            && self.stopped_early == other.stopped_early
    }

    /// Per-epoch trace: `epoch,loss_env0,...,variance,val_acc`.
    pub fn write_trace_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["epoch".to_string()];
        header.extend((0..self.num_envs).map(|e| format!("loss_env{e}")));
        header.push("variance".into());
        header.push("val_acc".into());
        w.write_record(&header)?;
        for r in &self.epochs {
            let mut row = vec![r.epoch.to_string()];
            row.extend(r.env_losses.iter().map(f64::to_string));
            row.push(r.variance.to_string());
            row.push(r.val_accuracy.to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("trace.csv", e))?;
        Ok(())
    }

    pub fn save_trace_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_trace_csv(file)
    }
}

/// Cycles through a dataset in reshuffled passes.
///
/// Every environment's sampler starts from the same seed, so environments
/// holding identical data see identical batches.
struct Sampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            order: (0..len).collect(),
            cursor: len,
            rng,
        }
    }

    fn draw(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let take = (k - out.len()).min(self.order.len() - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }
}

struct TensorState {
    weights: AdaDeltaState,
    bias: AdaDeltaState,
}

impl TensorState {
    fn like(weights: usize, bias: usize) -> Self {
        Self {
            weights: AdaDeltaState::new(weights),
            bias: AdaDeltaState::new(bias),
        }
    }
}

struct OptimizerState {
    layers: Vec<TensorState>,
    heads: Vec<TensorState>,
    rho: f64,
    eps: f64,
}

impl OptimizerState {
    fn new(params: &ModelParams, rho: f64, eps: f64) -> Self {
        Self {
            layers: params
                .extractor
                .layers
                .iter()
                .map(|l| TensorState::like(l.weights.data.len(), l.bias.len()))
                .collect(),
            heads: params
                .heads
                .iter()
                .map(|h| TensorState::like(h.weights.data.len(), h.bias.len()))
                .collect(),
            rho,
            eps,
        }
    }

    fn step_extractor(&mut self, params: &mut ModelParams, grads: &[LayerGrad]) -> Result<()> {
        for (l, ((layer, g), st)) in params
            .extractor
            .layers
            .iter_mut()
            .zip(grads)
            .zip(&mut self.layers)
            .enumerate()
        {
            let name = format!("extractor layer {l} weights");
            adadelta_step(&mut st.weights, &mut layer.weights.data, &g.weights.data, self.rho, self.eps, &name)?;
            let name = format!("extractor layer {l} bias");
            adadelta_step(&mut st.bias, &mut layer.bias, &g.bias, self.rho, self.eps, &name)?;
        }
        Ok(())
    }

    fn step_head(&mut self, params: &mut ModelParams, e: usize, g: &LayerGrad) -> Result<()> {
        let head = &mut params.heads[e];
        let st = &mut self.heads[e];
        adadelta_step(&mut st.weights, &mut head.weights.data, &g.weights.data, self.rho, self.eps, &format!("head {e} weights"))?;
        adadelta_step(&mut st.bias, &mut head.bias, &g.bias, self.rho, self.eps, &format!("head {e} bias"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Joint,
    ExtractorOnly,
    HeadsOnly,
}

fn head_variance(params: &ModelParams, config: &TrainConfig) -> Result<f64> {
    if params.heads.len() < 2 {
        return Ok(0.0);
    }
    let stack = HeadStack::from_heads(&params.heads)?;
    variance(&stack, config.variance_mode, config.rel_denominator)
}

fn check_inputs(config: &TrainConfig, envs: &[Dataset], val: &Dataset) -> Result<(usize, usize)> {
    config.validate()?;
    if envs.is_empty() {
        return Err(Error::config("envs", "need at least one environment"));
    }
    if let Some(e) = envs.iter().position(Dataset::is_empty) {
        return Err(Error::EmptyEnvironment(e));
    }
    if val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.objective == Objective::Erm && envs.len() > 1 {
        return Err(Error::config(
            "objective",
            format!("erm trains on one pooled environment, got {}", envs.len()),
        ));
    }
    let dim = envs[0].dim();
    if let Some(e) = envs.iter().position(|d| d.dim() != dim) {
        return Err(Error::ShapeMismatch(format!(
            "environment {e} has dimension {}, environment 0 has {dim}",
            envs[e].dim()
        )));
    }
    if val.dim() != dim {
        return Err(Error::ShapeMismatch(format!(
            "validation set has dimension {}, training data has {dim}",
            val.dim()
        )));
    }
    let classes = envs
        .iter()
        .chain(std::iter::once(val))
        .map(Dataset::num_classes)
        .max()
        .unwrap_or(0)
        .max(2);
    Ok((dim, classes))
}

/// Trains one model per the config and returns the best-epoch parameters
/// (merged head set) together with the run report.
pub fn train(config: &TrainConfig, envs: &[Dataset], val: &Dataset) -> Result<(ModelParams, RunReport)> {
    let (dim, classes) = check_inputs(config, envs, val)?;
    let num_envs = envs.len();
    let mut params = init_params(
        dim,
        &config.hidden_dims,
        config.feature_dim,
        classes,
        num_envs,
        config.activation,
        config.seed,
    )?;
    let mut opt = OptimizerState::new(&params, config.adadelta_rho, config.adadelta_eps);
    let mut samplers: Vec<Sampler> = envs.iter().map(|d| Sampler::new(d.len(), config.seed)).collect();
    let smallest = envs.iter().map(Dataset::len).min().unwrap();
    let steps_per_epoch = smallest.div_ceil(config.batch_size);
    let penalized = config.objective == Objective::Eq2 && num_envs >= 2;
    let val_batch = val.to_batch()?;

    let mut records = Vec::new();
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut alt_step = 0usize;
    let mut stopped_early = false;

    for epoch in 0..config.max_epochs {
        let mut loss_sums = vec![0.0; num_envs];
        for step in 0..steps_per_epoch {
            let size = config.batch_size.min(smallest - step * config.batch_size);
            let batches = envs
                .iter()
                .zip(&mut samplers)
                .map(|(d, s)| d.batch(&s.draw(size)))
                .collect::<Result<Vec<_>>>()?;
            let phase = if config.alternating && epoch >= config.warmup_epochs {
                alt_step += 1;
                if alt_step % 2 == 1 {
                    Phase::ExtractorOnly
                } else {
                    Phase::HeadsOnly
                }
            } else {
                Phase::Joint
            };

            let losses = match config.objective {
                Objective::Irmv1 => irmv1_step(&mut params, &mut opt, &batches, config.lambda, phase)?,
                Objective::Eq2 | Objective::Erm => {
                    eq2_step(&mut params, &mut opt, &batches, config, penalized, phase)?
                }
            };
            add_into(&mut loss_sums, &losses);
        }

        let variance = head_variance(&params, config)?;
        merge_in_place(&mut params, config.merge_mode);
        let val_accuracy = batch_accuracy(&params, HeadSelector::Merged, &val_batch)?;
        records.push(EpochRecord {
            epoch,
            env_losses: loss_sums.iter().map(|s| s / steps_per_epoch as f64).collect(),
            variance,
            val_accuracy,
        });
        if best.as_ref().is_none_or(|(_, acc, _)| val_accuracy > *acc) {
            best = Some((epoch, val_accuracy, params.clone()));
        }
        let best_epoch = best.as_ref().unwrap().0;
        if epoch - best_epoch >= config.patience {
            stopped_early = epoch + 1 < config.max_epochs;
            break;
        }
    }

    let (best_epoch, best_val_accuracy, best_params) = best.expect("max_epochs >= 1");
    let final_variance = head_variance(&best_params, config)?;
    let report = RunReport {
        config: config.clone(),
        seed: config.seed,
        num_envs,
        epochs: records,
        best_epoch,
        best_val_accuracy,
        final_variance,
        stopped_early,
        ood_accuracy: None,
    };
    Ok((best_params, report))
}

fn eq2_step(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    batches: &[model::Batch],
    config: &TrainConfig,
    penalized: bool,
    phase: Phase,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(batches.len());
    let mut extractor: Option<Vec<LayerGrad>> = None;
    let mut heads = Vec::with_capacity(batches.len());
    for (e, batch) in batches.iter().enumerate() {
        let (loss, g) = model::loss_and_grad(params, e, batch)?;
        losses.push(loss);
        match &mut extractor {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g.extractor) {
                    add_into(&mut a.weights.data, &b.weights.data);
                    add_into(&mut a.bias, &b.bias);
                }
            }
            None => extractor = Some(g.extractor),
        }
        heads.push(g.head);
    }

    let mut objective: f64 = losses.iter().sum();
    if penalized && phase != Phase::ExtractorOnly {
        let stack = HeadStack::from_heads(&params.heads)?;
        objective += config.lambda * variance(&stack, config.variance_mode, config.rel_denominator)?;
        if config.lambda > 0.0 {
            let vg = grad_variance(&stack, config.variance_mode, config.rel_denominator)?;
            for (hg, v) in heads.iter_mut().zip(vg) {
                let nw = hg.weights.data.len();
                for (a, b) in hg.weights.data.iter_mut().chain(hg.bias.iter_mut()).zip(&v) {
                    *a += config.lambda * b;
                }
                debug_assert_eq!(nw + hg.bias.len(), v.len());
            }
        }
    }
    if !objective.is_finite() {
        return Err(Error::NonFinite("training objective".into()));
    }

    if phase != Phase::HeadsOnly {
        opt.step_extractor(params, extractor.as_deref().unwrap())?;
    }
    if phase != Phase::ExtractorOnly {
        for (e, g) in heads.iter().enumerate() {
            opt.step_head(params, e, g)?;
        }
    }
    Ok(losses)
}

fn irmv1_step(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    batches: &[model::Batch],
    weight: f64,
    phase: Phase,
) -> Result<Vec<f64>> {
    let (losses, penalty, extractor, head) = irmv1_objective_grad(params, batches, weight)?;
    if !(losses.iter().sum::<f64>() + weight * penalty).is_finite() {
        return Err(Error::NonFinite("training objective".into()));
    }
    if phase != Phase::HeadsOnly {
        opt.step_extractor(params, &extractor)?;
    }
    if phase != Phase::ExtractorOnly {
        // The shared head is replicated; identical updates keep the copies equal.
        for e in 0..params.heads.len() {
            opt.step_head(params, e, &head)?;
        }
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;

    #[test]
    fn adadelta_zero_gradient_is_noop() {
        let mut st = AdaDeltaState::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        adadelta_step(&mut st, &mut p, &[0.0; 3], 0.95, 1e-6, "t").unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(st.sq_grad, vec![0.0; 3]);
    }

    #[test]
    fn adadelta_sign_symmetry() {
        let mut a = AdaDeltaState::new(1);
        let mut b = AdaDeltaState::new(1);
        let (mut pa, mut pb) = (vec![0.0], vec![0.0]);
        for k in 0..20 {
            let g = 0.3 + 0.01 * k as f64;
            adadelta_step(&mut a, &mut pa, &[g], 0.9, 1e-6, "a").unwrap();
            adadelta_step(&mut b, &mut pb, &[-g], 0.9, 1e-6, "b").unwrap();
            assert_eq!(pa[0], -pb[0]);
            assert!(pa[0] < 0.0);
        }
    }

    #[test]
    fn adadelta_rejects_nan_naming_tensor() {
        let mut st = AdaDeltaState::new(1);
        let err = adadelta_step(&mut st, &mut [0.0], &[f64::NAN], 0.9, 1e-6, "head 3 bias").unwrap_err();
        assert!(err.to_string().contains("head 3 bias"));
    }

    #[test]
    fn merge_hand_values() {
        let mut p = init_params(1, &[], 1, 1, 3, Activation::Relu, 0).unwrap();
        for (h, v) in p.heads.iter_mut().zip([1.0, 2.0, 10.0]) {
            h.weights = Matrix::from_vec(1, 1, vec![v]).unwrap();
        }
        let med = merge_heads(&p, MergeMode::Median);
        assert_eq!(med.merged.unwrap().weights.data, vec![2.0]);
        p.heads.truncate(2);
        p.heads[1].weights.data[0] = 3.0;
        let mean = merge_heads(&p, MergeMode::Mean);
        assert_eq!(mean.merged.as_ref().unwrap().weights.data, vec![2.0]);
        assert_eq!(mean.heads, p.heads);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            warmup_epochs: 100,
            max_epochs: 10,
            ..TrainConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("warmup_epochs"));
        let bad = TrainConfig {
            adadelta_rho: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
