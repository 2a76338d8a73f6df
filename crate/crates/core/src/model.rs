//! Shared feature extractor with per-environment linear heads.
//!
//! A model is `σ(w_e · f_θ(x) + b_e)`: an MLP `f_θ` common to every
//! environment, followed by one linear head per environment and an
//! elementwise logistic. At inference the heads are replaced by a single
//! merged head (see [`crate::optimizer::merge_heads`]).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Floor and ceiling applied to probabilities inside the log of the loss.
pub const LOG_CLAMP: f64 = 1e-7;

/// Largest double strictly below one.
const ONE_MINUS_ULP: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// One affine layer, weights stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
    pub layers: Vec<Layer>,
}

/// Linear classifier over extracted features: `num_classes × feature_dim` plus bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub env_id: usize,
}

impl Head {
    pub fn num_classes(&self) -> usize {
        self.weights.rows
    }

    /// Weights (row-major) followed by the bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.weights.data.len() + self.bias.len());
        v.extend_from_slice(&self.weights.data);
        v.extend_from_slice(&self.bias);
        v
    }

    /// Inverse of [`Head::flatten`] for a head of the same shape.
    pub fn unflatten_like(&self, flat: &[f64], env_id: usize) -> Head {
        let nw = self.weights.data.len();
        Head {
            weights: Matrix {
                rows: self.weights.rows,
                cols: self.weights.cols,
                data: flat[..nw].to_vec(),
            },
            bias: flat[nw..].to_vec(),
            env_id,
        }
    }

    fn same_shape(&self, other: &Head) -> bool {
        self.weights.rows == other.weights.rows
            && self.weights.cols == other.weights.cols
            && self.bias.len() == other.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub extractor: FeatureExtractor,
    pub heads: Vec<Head>,
    pub merged: Option<Head>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSelector {
    Env(usize),
    Merged,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    /// Soft or multi-hot targets in `[0, 1]`, one row per example.
    MultiHot(Matrix),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(c) => c.len(),
            Labels::MultiHot(m) => m.rows,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dense `n × num_classes` targets; class indices become one-hot rows.
    pub fn targets(&self, num_classes: usize) -> Result<Matrix> {
        match self {
            Labels::Classes(classes) => {
                let mut m = Matrix::zeros(classes.len(), num_classes);
                for (i, &c) in classes.iter().enumerate() {
                    if c >= num_classes {
                        return Err(Error::ShapeMismatch(format!(
                            "label {c} on row {i} out of range for {num_classes} classes"
                        )));
                    }
                    m.row_mut(i)[c] = 1.0;
                }
                Ok(m)
            }
            Labels::MultiHot(m) => {
                if m.cols != num_classes {
                    return Err(Error::ShapeMismatch(format!(
                        "{} label columns for {num_classes} classes",
                        m.cols
                    )));
                }
                Ok(m.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Labels,
}

impl Batch {
    pub fn new(features: Matrix, labels: Labels) -> Result<Self> {
        if features.rows == 0 {
            return Err(Error::EmptyDataset);
        }
        if labels.len() != features.rows {
            return Err(Error::ShapeMismatch(format!(
                "{} label rows for {} feature rows",
                labels.len(),
                features.rows
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.rows
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows == 0
    }
}

/// Gradient of one affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Gradients of the data loss w.r.t. the extractor and the selected head.
/// Every other head has zero gradient and is omitted.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub extractor: Vec<LayerGrad>,
    pub head: LayerGrad,
    pub env: usize,
}

pub fn init_params(
    input_dim: usize,
    hidden_dims: &[usize],
    feature_dim: usize,
    num_classes: usize,
    num_envs: usize,
    activation: Activation,
    seed: u64,
) -> Result<ModelParams> {
    if input_dim == 0 {
        return Err(Error::InvalidDimension("input_dim must be >= 1".into()));
    }
    if let Some(i) = hidden_dims.iter().position(|&h| h == 0) {
        return Err(Error::InvalidDimension(format!("hidden_dims[{i}] must be >= 1")));
    }
    if feature_dim == 0 {
        return Err(Error::InvalidDimension("feature_dim must be >= 1".into()));
    }
    if num_classes == 0 {
        return Err(Error::InvalidDimension("num_classes must be >= 1".into()));
    }
    if num_envs == 0 {
        return Err(Error::InvalidDimension("number of environments must be >= 1".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = Vec::with_capacity(hidden_dims.len() + 2);
    dims.push(input_dim);
    dims.extend_from_slice(hidden_dims);
    dims.push(feature_dim);

    let layers = dims
        .windows(2)
        .map(|w| Layer {
            weights: glorot(&mut rng, w[1], w[0]),
            bias: vec![0.0; w[1]],
        })
        .collect();
    let head = Head {
        weights: glorot(&mut rng, num_classes, feature_dim),
        bias: vec![0.0; num_classes],
        env_id: 0,
    };
    let heads = (0..num_envs)
        .map(|e| Head {
            env_id: e,
            ..head.clone()
        })
        .collect();

    Ok(ModelParams {
        extractor: FeatureExtractor {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            feature_dim,
            activation,
            layers,
        },
        heads,
        merged: None,
    })
}

fn glorot(rng: &mut ChaCha8Rng, fan_out: usize, fan_in: usize) -> Matrix {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_out * fan_in)
        .map(|_| rng.random_range(-a..=a))
        .collect();
    Matrix {
        rows: fan_out,
        cols: fan_in,
        data,
    }
}

#[inline]
pub(crate) fn logistic(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::MIN_POSITIVE, ONE_MINUS_ULP)
}

/// Intermediate values of a forward pass kept for backpropagation.
pub(crate) struct ForwardCache {
    /// Input followed by each layer's activated output.
    pub activations: Vec<Matrix>,
    /// Pre-activation of each layer.
    pub pre: Vec<Matrix>,
    pub logits: Matrix,
    pub probs: Matrix,
}

impl ForwardCache {
    pub fn features(&self) -> &Matrix {
        self.activations.last().expect("input is always present")
    }
}

impl ModelParams {
    pub fn num_envs(&self) -> usize {
        self.heads.len()
    }

    pub fn num_classes(&self) -> usize {
        self.heads[0].num_classes()
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.input_dim
    }

    pub fn head(&self, selector: HeadSelector) -> Result<&Head> {
        match selector {
            HeadSelector::Env(e) => self.heads.get(e).ok_or(Error::EnvOutOfRange {
                index: e,
                count: self.heads.len(),
            }),
            HeadSelector::Merged => self.merged.as_ref().ok_or(Error::MergedHeadMissing),
        }
    }

    /// Extracted features `f_θ(x)`.
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut a = x.clone();
        for layer in &self.extractor.layers {
            let mut z = a.affine_t(&layer.weights, &layer.bias);
            let act = self.extractor.activation;
            z.data.iter_mut().for_each(|v| *v = act.apply(*v));
            a = z;
        }
        Ok(a)
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols != self.extractor.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "input has {} columns, model expects {}",
                x.cols, self.extractor.input_dim
            )));
        }
        Ok(())
    }

    pub(crate) fn forward_cached(&self, head: &Head, x: &Matrix) -> Result<ForwardCache> {
        self.check_input(x)?;
        let act = self.extractor.activation;
        let mut activations = Vec::with_capacity(self.extractor.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.extractor.layers.len());
        activations.push(x.clone());
        for layer in &self.extractor.layers {
            let z = activations
                .last()
                .unwrap()
                .affine_t(&layer.weights, &layer.bias);
            let mut a = z.clone();
            a.data.iter_mut().for_each(|v| *v = act.apply(*v));
            pre.push(z);
            activations.push(a);
        }
        let logits = activations
            .last()
            .unwrap()
            .affine_t(&head.weights, &head.bias);
        let mut probs = logits.clone();
        probs.data.iter_mut().for_each(|v| *v = logistic(*v));
        Ok(ForwardCache {
            activations,
            pre,
            logits,
            probs,
        })
    }

    /// Backpropagates a gradient on the logits through `head` and the extractor.
    pub(crate) fn backward(
        &self,
        head: &Head,
        cache: &ForwardCache,
        dlogits: &Matrix,
    ) -> (Vec<LayerGrad>, LayerGrad) {
        let features = cache.features();
        let head_grad = LayerGrad {
            weights: dlogits.t_matmul(features),
            bias: dlogits.col_sums(),
        };
        let mut upstream = dlogits.matmul(&head.weights);
        let act = self.extractor.activation;
        let mut grads = Vec::with_capacity(self.extractor.layers.len());
        for (l, layer) in self.extractor.layers.iter().enumerate().rev() {
            let z = &cache.pre[l];
            let a = &cache.activations[l + 1];
            for ((u, &zv), &av) in upstream.data.iter_mut().zip(&z.data).zip(&a.data) {
                *u *= act.derivative(zv, av);
            }
            let input = &cache.activations[l];
            grads.push(LayerGrad {
                weights: upstream.t_matmul(input),
                bias: upstream.col_sums(),
            });
            if l > 0 {
                upstream = upstream.matmul(&layer.weights);
            }
        }
        grads.reverse();
        (grads, head_grad)
    }

    /// Structural validation used after deserialization.
    pub fn validate(&self) -> Result<()> {
        let ex = &self.extractor;
        if ex.input_dim == 0 || ex.feature_dim == 0 {
            return Err(Error::InvalidDimension("extractor dims must be >= 1".into()));
        }
        let mut dims = vec![ex.input_dim];
        dims.extend_from_slice(&ex.hidden_dims);
        dims.push(ex.feature_dim);
        if ex.layers.len() != dims.len() - 1 {
            return Err(Error::ShapeMismatch(format!(
                "{} layers for {} layer dims",
                ex.layers.len(),
                dims.len() - 1
            )));
        }
        for (i, (layer, w)) in ex.layers.iter().zip(dims.windows(2)).enumerate() {
            if layer.weights.rows != w[1] || layer.weights.cols != w[0] || layer.bias.len() != w[1]
            {
                return Err(Error::ShapeMismatch(format!("layer {i} does not chain")));
            }
            if layer.weights.data.len() != w[0] * w[1] {
                return Err(Error::ShapeMismatch(format!("layer {i} data length")));
            }
            if !layer.weights.is_finite() || layer.bias.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("extractor layer {i}")));
            }
        }
        let first = self
            .heads
            .first()
            .ok_or_else(|| Error::InvalidDimension("model has no heads".into()))?;
        if first.weights.cols != ex.feature_dim
            || first.bias.len() != first.weights.rows
            || first.weights.data.len() != first.weights.rows * first.weights.cols
        {
            return Err(Error::ShapeMismatch("head 0 does not match feature_dim".into()));
        }
        for (e, h) in self.heads.iter().enumerate().chain(self.merged.iter().map(|h| (usize::MAX, h))) {
            let name = if e == usize::MAX { "merged head".to_string() } else { format!("head {e}") };
            if !first.same_shape(h) || h.weights.data.len() != first.weights.data.len() {
                return Err(Error::ShapeMismatch(format!("{name} shape differs from head 0")));
            }
            if !h.weights.is_finite() || h.bias.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDocument {
            version: MODEL_FORMAT_VERSION,
            extractor: self.extractor.clone(),
            heads: self.heads.clone(),
            merged: self.merged.clone(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(s)?;
        if doc.version != MODEL_FORMAT_VERSION {
            return Err(Error::config(
                "version",
                format!("unsupported model format version {}", doc.version),
            ));
        }
        let params = ModelParams {
            extractor: doc.extractor,
            heads: doc.heads,
            merged: doc.merged,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDocument {
    version: u32,
    extractor: FeatureExtractor,
    heads: Vec<Head>,
    merged: Option<Head>,
}

/// Per-class probabilities `σ(w f_θ(x) + b)` for the selected head.
pub fn forward(params: &ModelParams, selector: HeadSelector, x: &Matrix) -> Result<Matrix> {
    let head = params.head(selector)?;
    Ok(params.forward_cached(head, x)?.probs)
}

/// Mean binary cross-entropy over all examples and classes, with the
/// probabilities clamped to `[LOG_CLAMP, 1 - LOG_CLAMP]` inside the logs.
pub fn loss_bce(probs: &Matrix, labels: &Labels) -> Result<f64> {
    let targets = labels.targets(probs.cols)?;
    if targets.rows != probs.rows {
        return Err(Error::ShapeMismatch(format!(
            "{} label rows for {} prediction rows",
            targets.rows, probs.rows
        )));
    }
    if probs.data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let total: f64 = probs
        .data
        .iter()
        .zip(&targets.data)
        .map(|(&p, &y)| {
            let pc = p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
            -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
        })
        .sum();
    Ok(total / probs.data.len() as f64)
}

/// `∂ loss_bce / ∂ logits`, zero wherever the clamp is active.
pub(crate) fn bce_logit_grad(probs: &Matrix, targets: &Matrix) -> Matrix {
    let scale = 1.0 / probs.data.len() as f64;
    let data = probs
        .data
        .iter()
        .zip(&targets.data)
        .map(|(&p, &y)| {
            if (LOG_CLAMP..=1.0 - LOG_CLAMP).contains(&p) {
                (p - y) * scale
            } else {
                0.0
            }
        })
        .collect();
    Matrix {
        rows: probs.rows,
        cols: probs.cols,
        data,
    }
}

/// Loss and exact gradients of `loss_bce(forward(params, Env(env), x), y)`
/// w.r.t. the extractor and head `env`.
pub fn loss_and_grad(params: &ModelParams, env: usize, batch: &Batch) -> Result<(f64, ModelGrads)> {
    let head = params.head(HeadSelector::Env(env))?;
    let cache = params.forward_cached(head, &batch.features)?;
    let targets = batch.labels.targets(head.num_classes())?;
    let loss = loss_bce(&cache.probs, &batch.labels)?;
    let dlogits = bce_logit_grad(&cache.probs, &targets);
    let (extractor, head) = params.backward(head, &cache, &dlogits);
    Ok((
        loss,
        ModelGrads {
            extractor,
            head,
            env,
        },
    ))
}

pub fn grad_model(params: &ModelParams, env: usize, batch: &Batch) -> Result<ModelGrads> {
    loss_and_grad(params, env, batch).map(|(_, g)| g)
}
