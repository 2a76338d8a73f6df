//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unshuffle::model::{Activation, ModelGrads};
use unshuffle::{forward, init_params, loss_bce, Batch, HeadSelector, Labels, Matrix, ModelParams};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Half the mean pairwise squared distance, which equals the spread around the mean.
pub fn variance_abs_pairwise(vs: &[Vec<f64>]) -> f64 {
    let e = vs.len() as f64;
    let mut total = 0.0;
    for a in vs {
        for b in vs {
            total += a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        }
    }
    total / (2.0 * e * e)
}

pub fn variance_rel_naive(vs: &[Vec<f64>], l2: bool) -> f64 {
    let e = vs.len();
    let d = vs[0].len();
    let mut total = 0.0;
    for v in vs {
        let mut dev = 0.0;
        for j in 0..d {
            let mut col = 0.0;
            for w in vs {
                col += w[j];
            }
            dev += (v[j] - col / e as f64).powi(2);
        }
        let n = if l2 {
            v.iter().map(|x| x * x).sum::<f64>().sqrt()
        } else {
            v.iter().map(|x| x.abs()).sum::<f64>()
        };
        total += dev / (n * n);
    }
    total / e as f64
}

pub fn rand_index_pairs(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let mut agree = 0u64;
    let mut total = 0u64;
    for i in 0..n {
        for j in i + 1..n {
            total += 1;
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    agree as f64 / total as f64
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub fn flat_grads(g: &ModelGrads) -> Vec<f64> {
    let mut out = Vec::new();
    for l in &g.extractor {
        out.extend(&l.weights.data);
        out.extend(&l.bias);
    }
    out.extend(&g.head.weights.data);
    out.extend(&g.head.bias);
    out
}

/// Mutable references to every parameter `grad_model` differentiates, in `flat_grads` order.
fn params_for(p: &mut ModelParams, env: usize) -> Vec<&mut f64> {
    let mut out: Vec<&mut f64> = Vec::new();
    for l in p.extractor.layers.iter_mut() {
        out.extend(l.weights.data.iter_mut());
        out.extend(l.bias.iter_mut());
    }
    let h = &mut p.heads[env];
    out.extend(h.weights.data.iter_mut());
    out.extend(h.bias.iter_mut());
    out
}

pub fn model_loss(p: &ModelParams, env: usize, batch: &Batch) -> f64 {
    let probs = forward(p, HeadSelector::Env(env), &batch.features).unwrap();
    loss_bce(&probs, &batch.labels).unwrap()
}

pub fn fd_model_grad(p: &ModelParams, env: usize, batch: &Batch, h: f64) -> Vec<f64> {
    let n = params_for(&mut p.clone(), env).len();
    (0..n)
        .map(|i| {
            let mut plus = p.clone();
            *params_for(&mut plus, env).swap_remove(i) += h;
            let mut minus = p.clone();
            *params_for(&mut minus, env).swap_remove(i) -= h;
            (model_loss(&plus, env, batch) - model_loss(&minus, env, batch)) / (2.0 * h)
        })
        .collect()
}

pub fn fd_grad(f: impl Fn(&[Vec<f64>]) -> f64, vs: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; vs[0].len()]; vs.len()];
    for e in 0..vs.len() {
        for j in 0..vs[0].len() {
            let mut plus = vs.to_vec();
            plus[e][j] += h;
            let mut minus = vs.to_vec();
            minus[e][j] -= h;
            out[e][j] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
    }
    out
}

/// A small model with every parameter drawn at random, plus a matching batch.
pub fn random_problem(seed: u64) -> (ModelParams, Batch, usize) {
    let mut r = rng(seed);
    let input = r.random_range(1..5);
    let depth = r.random_range(0..3);
    let hidden: Vec<usize> = (0..depth).map(|_| r.random_range(1..6)).collect();
    let feat = r.random_range(1..5);
    let classes = r.random_range(1..4);
    let envs = r.random_range(1..4);
    let act = if seed.is_multiple_of(2) { Activation::Tanh } else { Activation::Relu };
    let mut p = init_params(input, &hidden, feat, classes, envs, act, seed).unwrap();
    for l in p.extractor.layers.iter_mut() {
        l.weights.data.iter_mut().chain(l.bias.iter_mut()).for_each(|w| *w = r.random_range(-1.0..1.0));
    }
    for h in p.heads.iter_mut() {
        h.weights.data.iter_mut().chain(h.bias.iter_mut()).for_each(|w| *w = r.random_range(-1.0..1.0));
    }
    let n = r.random_range(1..7);
    let x = Matrix::from_vec(n, input, (0..n * input).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
    let labels = if r.random_bool(0.5) {
        Labels::Classes((0..n).map(|_| r.random_range(0..classes)).collect())
    } else {
        Labels::MultiHot(
            Matrix::from_vec(n, classes, (0..n * classes).map(|_| r.random_range(0..2) as f64).collect()).unwrap(),
        )
    };
    let env = r.random_range(0..envs);
    (p, Batch::new(x, labels).unwrap(), env)
}

pub fn random_heads(r: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let e = r.random_range(2..6);
    let d = r.random_range(1..7);
    (0..e)
        .map(|_| {
            (0..d)
                .map(|_| {
                    let x: f64 = r.random_range(0.05..2.0);
                    if r.random_bool(0.5) {
                        x
                    } else {
                        -x
                    }
                })
                .collect()
        })
        .collect()
}

pub fn random_labeling(r: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..k)).collect()
}
