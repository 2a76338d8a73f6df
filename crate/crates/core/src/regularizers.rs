//! Variance of the per-environment heads in parameter space, and the
//! gradient-norm penalty used by the IRMv1 baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{bce_logit_grad, loss_bce, Batch, Head, LayerGrad, ModelParams, LOG_CLAMP};

/// Guard on the norm used as the relative-variance denominator.
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    Absolute,
    #[default]
    Relative,
}

/// Norm of `v_e` dividing each term of the relative variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelDenominator {
    #[default]
    L1,
    L2,
}

/// Flattened heads `v_1..v_E` (weights followed by bias), all of one length.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadStack {
    vectors: Vec<Vec<f64>>,
}

impl HeadStack {
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(first) = vectors.first() {
            if let Some(e) = vectors.iter().position(|v| v.len() != first.len()) {
                return Err(Error::ShapeMismatch(format!(
                    "head {e} has length {}, head 0 has {}",
                    vectors[e].len(),
                    first.len()
                )));
            }
        }
        Ok(Self { vectors })
    }

    pub fn from_heads(heads: &[Head]) -> Result<Self> {
        Self::new(heads.iter().map(Head::flatten).collect())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    fn require_spread(&self) -> Result<()> {
        if self.vectors.len() < 2 {
            return Err(Error::TooFewHeads(self.vectors.len()));
        }
        Ok(())
    }
}

pub fn mean_head(stack: &HeadStack) -> Result<Vec<f64>> {
    if stack.is_empty() {
        return Err(Error::TooFewHeads(0));
    }
    // running mean: exact when all vectors are equal
    let mut mean = vec![0.0; stack.dim()];
    for (k, v) in stack.vectors.iter().enumerate() {
        let w = 1.0 / (k + 1) as f64;
        for (m, x) in mean.iter_mut().zip(v) {
            *m += (x - *m) * w;
        }
    }
    Ok(mean)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn norm(v: &[f64], denom: RelDenominator) -> f64 {
    match denom {
        RelDenominator::L1 => v.iter().map(|x| x.abs()).sum(),
        RelDenominator::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
    }
}

/// `(1/E) Σ_e ‖v_e − v̄‖₂²`.
pub fn variance_abs(stack: &HeadStack) -> Result<f64> {
    stack.require_spread()?;
    let mean = mean_head(stack)?;
    let total: f64 = stack.vectors.iter().map(|v| sq_dist(v, &mean)).sum();
    Ok(total / stack.len() as f64)
}

/// `(1/E) Σ_e (‖v_e − v̄‖₂ / ‖v_e‖₁)²`, or with `‖v_e‖₂` in the denominator.
pub fn variance_rel(stack: &HeadStack, denom: RelDenominator) -> Result<f64> {
    stack.require_spread()?;
    let mean = mean_head(stack)?;
    let norms = guarded_norms(stack, denom)?;
    let total: f64 = stack
        .vectors
        .iter()
        .zip(&norms)
        .map(|(v, n)| sq_dist(v, &mean) / (n * n))
        .sum();
    Ok(total / stack.len() as f64)
}

fn guarded_norms(stack: &HeadStack, denom: RelDenominator) -> Result<Vec<f64>> {
    stack
        .vectors
        .iter()
        .enumerate()
        .map(|(head, v)| {
            let n = norm(v, denom);
            if n <= NORM_GUARD {
                Err(Error::DegenerateHead {
                    head,
                    norm: n,
                    guard: NORM_GUARD,
                })
            } else {
                Ok(n)
            }
        })
        .collect()
}

pub fn variance(stack: &HeadStack, mode: VarianceMode, denom: RelDenominator) -> Result<f64> {
    match mode {
        VarianceMode::Absolute => variance_abs(stack),
        VarianceMode::Relative => variance_rel(stack, denom),
    }
}

/// Gradient of the selected variance w.r.t. every `v_e`, including the
/// dependence of `v̄` on each head.
pub fn grad_variance(
    stack: &HeadStack,
    mode: VarianceMode,
    denom: RelDenominator,
) -> Result<Vec<Vec<f64>>> {
    stack.require_spread()?;
    let e_count = stack.len() as f64;
    let mean = mean_head(stack)?;
    match mode {
        VarianceMode::Absolute => Ok(stack
            .vectors
            .iter()
            .map(|v| v.iter().zip(&mean).map(|(x, m)| 2.0 / e_count * (x - m)).collect())
            .collect()),
        VarianceMode::Relative => {
            let norms = guarded_norms(stack, denom)?;
            // (2/E) Σ_e (v_e − v̄) / N_e², shared by every head through v̄.
            let mut coupling = vec![0.0; stack.dim()];
            for (v, n) in stack.vectors.iter().zip(&norms) {
                let w = 2.0 / (e_count * n * n);
                for ((c, x), m) in coupling.iter_mut().zip(v).zip(&mean) {
                    *c += w * (x - m);
                }
            }
            let grads = stack
                .vectors
                .iter()
                .zip(&norms)
                .map(|(v, &n)| {
                    let dev_sq = sq_dist(v, &mean);
                    v.iter()
                        .zip(&mean)
                        .zip(&coupling)
                        .map(|((&x, &m), &c)| {
                            let norm_grad = match denom {
                                RelDenominator::L1 => sign(x) * -2.0 * dev_sq / (n * n * n),
                                RelDenominator::L2 => -2.0 * dev_sq * x / (n * n * n * n),
                            };
                            (2.0 * (x - m) / (n * n) - c + norm_grad) / e_count
                        })
                        .collect()
                })
                .collect();
            Ok(grads)
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn require_equal_heads(params: &ModelParams) -> Result<&Head> {
    let first = &params.heads[0];
    for (e, h) in params.heads.iter().enumerate().skip(1) {
        if h.weights.data != first.weights.data || h.bias != first.bias {
            return Err(Error::UnequalHeads(e));
        }
    }
    Ok(first)
}

/// Per-environment `dL_e/ds` at `s = 1` for logits `s · (w f_θ(x) + b)`.
fn scale_gradient(probs: &Matrix, logits: &Matrix, targets: &Matrix) -> f64 {
    let scale = 1.0 / probs.data.len() as f64;
    probs
        .data
        .iter()
        .zip(&logits.data)
        .zip(&targets.data)
        .filter(|((&p, _), _)| (LOG_CLAMP..=1.0 - LOG_CLAMP).contains(&p))
        .map(|((&p, &z), &y)| (p - y) * z)
        .sum::<f64>()
        * scale
}

/// `Σ_e (∂ L_e(s · w f_θ(x)) / ∂s |_{s=1})²` for the shared head.
pub fn irmv1_penalty(params: &ModelParams, batches: &[Batch]) -> Result<f64> {
    let head = require_equal_heads(params)?;
    let mut total = 0.0;
    for batch in batches {
        let cache = params.forward_cached(head, &batch.features)?;
        let targets = batch.labels.targets(head.num_classes())?;
        let g = scale_gradient(&cache.probs, &cache.logits, &targets);
        total += g * g;
    }
    Ok(total)
}

/// Data loss, penalty and gradients of `Σ_e L_e + weight · irmv1_penalty`
/// w.r.t. the extractor and the shared head.
pub(crate) fn irmv1_objective_grad(
    params: &ModelParams,
    batches: &[Batch],
    weight: f64,
) -> Result<(Vec<f64>, f64, Vec<LayerGrad>, LayerGrad)> {
    let head = require_equal_heads(params)?;
    let mut losses = Vec::with_capacity(batches.len());
    let mut penalty = 0.0;
    let mut ex_acc: Option<Vec<LayerGrad>> = None;
    let mut head_acc: Option<LayerGrad> = None;
    for batch in batches {
        let cache = params.forward_cached(head, &batch.features)?;
        let targets = batch.labels.targets(head.num_classes())?;
        losses.push(loss_bce(&cache.probs, &batch.labels)?);
        let g = scale_gradient(&cache.probs, &cache.logits, &targets);
        penalty += g * g;

        let mut dlogits = bce_logit_grad(&cache.probs, &targets);
        let scale = 1.0 / cache.probs.data.len() as f64;
        for (((d, &p), &z), &y) in dlogits
            .data
            .iter_mut()
            .zip(&cache.probs.data)
            .zip(&cache.logits.data)
            .zip(&targets.data)
        {
            if (LOG_CLAMP..=1.0 - LOG_CLAMP).contains(&p) {
                *d += weight * 2.0 * g * (p * (1.0 - p) * z + (p - y)) * scale;
            }
        }
        let (ex, hd) = params.backward(head, &cache, &dlogits);
        match (&mut ex_acc, &mut head_acc) {
            (Some(ea), Some(ha)) => {
                for (a, b) in ea.iter_mut().zip(&ex) {
                    add_into(&mut a.weights.data, &b.weights.data);
                    add_into(&mut a.bias, &b.bias);
                }
                add_into(&mut ha.weights.data, &hd.weights.data);
                add_into(&mut ha.bias, &hd.bias);
            }
            _ => {
                ex_acc = Some(ex);
                head_acc = Some(hd);
            }
        }
    }
    match (ex_acc, head_acc) {
        (Some(ex), Some(hd)) => Ok((losses, penalty, ex, hd)),
        _ => Err(Error::EmptyDataset),
    }
}

pub(crate) fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}
