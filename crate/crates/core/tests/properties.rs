#![allow(clippy::needless_range_loop)]

mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use unshuffle::data::{Dataset, Example, Label, Meta};
use unshuffle::model::Activation;
use unshuffle::optimizer::{adadelta_step, AdaDeltaState};
use unshuffle::partitioning::{assign_clusters_to_envs, kmeans_cosine, partition_random, rand_index};
use unshuffle::regularizers::{grad_variance, irmv1_penalty, variance, variance_abs, variance_rel, HeadStack};
use unshuffle::{
    forward, grad_model, init_params, loss_bce, merge_heads, Batch, HeadSelector, Labels, Matrix, MergeMode, ModelParams,
    RelDenominator, VarianceMode,
};

fn heads() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..6, 1usize..6).prop_flat_map(|(e, d)| {
        prop::collection::vec(
            prop::collection::vec(prop_oneof![0.05f64..3.0, -3.0f64..-0.05], d),
            e,
        )
    })
}

fn labelings() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (2usize..30).prop_flat_map(|n| (prop::collection::vec(0usize..4, n), prop::collection::vec(0usize..5, n)))
}

/// Straight-line evaluation of the network, one example at a time.
fn forward_oracle(p: &ModelParams, head: usize, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    for layer in &p.extractor.layers {
        let w = &layer.weights;
        let mut next = Vec::with_capacity(w.rows);
        for i in 0..w.rows {
            let mut z = layer.bias[i];
            for j in 0..w.cols {
                z += w.data[i * w.cols + j] * a[j];
            }
            next.push(match p.extractor.activation {
                Activation::Relu => z.max(0.0),
                Activation::Tanh => z.tanh(),
            });
        }
        a = next;
    }
    let h = &p.heads[head];
    (0..h.weights.rows)
        .map(|c| {
            let mut z = h.bias[c];
            for j in 0..h.weights.cols {
                z += h.weights.data[c * h.weights.cols + j] * a[j];
            }
            1.0 / (1.0 + (-z).exp())
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_matches_straight_line_oracle(seed in 0u64..10_000) {
        let (p, batch, env) = random_problem(seed);
        let probs = forward(&p, HeadSelector::Env(env), &batch.features).unwrap();
        for i in 0..batch.features.rows {
            let want = forward_oracle(&p, env, batch.features.row(i));
            for (got, want) in probs.row(i).iter().zip(&want) {
                prop_assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn model_gradient_matches_finite_differences(seed in 0u64..10_000) {
        let (p, batch, env) = random_problem(seed);
        let g = flat_grads(&grad_model(&p, env, &batch).unwrap());
        let fd = fd_model_grad(&p, env, &batch, 1e-5);
        prop_assert!(rel_err(&g, &fd) <= 1e-4, "relative error {}", rel_err(&g, &fd));
    }

    #[test]
    fn variance_gradient_matches_finite_differences(vs in heads(), mode in 0usize..3) {
        let (mode, denom) = [
            (VarianceMode::Absolute, RelDenominator::L1),
            (VarianceMode::Relative, RelDenominator::L1),
            (VarianceMode::Relative, RelDenominator::L2),
        ][mode];
        let g = grad_variance(&HeadStack::new(vs.clone()).unwrap(), mode, denom).unwrap();
        let fd = fd_grad(|v| variance(&HeadStack::new(v.to_vec()).unwrap(), mode, denom).unwrap(), &vs, 1e-6);
        prop_assert!(rel_err(&g.concat(), &fd.concat()) <= 1e-4);
    }

    #[test]
    fn variances_match_brute_force(vs in heads()) {
        let stack = HeadStack::new(vs.clone()).unwrap();
        let abs = variance_abs(&stack).unwrap();
        prop_assert!((abs - variance_abs_pairwise(&vs)).abs() <= 1e-10 * abs.max(1.0));
        let l1 = variance_rel(&stack, RelDenominator::L1).unwrap();
        prop_assert!((l1 - variance_rel_naive(&vs, false)).abs() <= 1e-10 * l1.max(1.0));
        let l2 = variance_rel(&stack, RelDenominator::L2).unwrap();
        prop_assert!((l2 - variance_rel_naive(&vs, true)).abs() <= 1e-10 * l2.max(1.0));
    }

    #[test]
    fn variance_scaling_and_permutation(vs in heads(), s in 0.1f64..10.0, rot in 0usize..5) {
        let stack = HeadStack::new(vs.clone()).unwrap();
        let scaled = HeadStack::new(vs.iter().map(|v| v.iter().map(|x| x * s).collect()).collect()).unwrap();
        let mut perm = vs.clone();
        perm.rotate_left(rot % vs.len());
        let perm = HeadStack::new(perm).unwrap();

        let abs = variance_abs(&stack).unwrap();
        prop_assert!(abs >= 0.0);
        prop_assert!((variance_abs(&scaled).unwrap() - s * s * abs).abs() <= 1e-9 * (s * s * abs).max(1.0));
        prop_assert!((variance_abs(&perm).unwrap() - abs).abs() <= 1e-12 * abs.max(1.0));
        for denom in [RelDenominator::L1, RelDenominator::L2] {
            let rel = variance_rel(&stack, denom).unwrap();
            prop_assert!(rel >= 0.0);
            prop_assert!((variance_rel(&scaled, denom).unwrap() - rel).abs() <= 1e-9 * rel.max(1.0));
            prop_assert!((variance_rel(&perm, denom).unwrap() - rel).abs() <= 1e-12 * rel.max(1.0));
        }
    }

    #[test]
    fn equal_heads_have_zero_variance_and_gradient(v in prop::collection::vec(0.1f64..2.0, 1..6), e in 2usize..5) {
        let stack = HeadStack::new(vec![v; e]).unwrap();
        for (mode, denom) in [(VarianceMode::Absolute, RelDenominator::L1), (VarianceMode::Relative, RelDenominator::L1), (VarianceMode::Relative, RelDenominator::L2)] {
            prop_assert_eq!(variance(&stack, mode, denom).unwrap(), 0.0);
            prop_assert!(grad_variance(&stack, mode, denom).unwrap().concat().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn rand_index_matches_pair_counting((a, b) in labelings()) {
        let ri = rand_index(&a, &b).unwrap();
        prop_assert!((ri - rand_index_pairs(&a, &b)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&ri));
        prop_assert_eq!(ri, rand_index(&b, &a).unwrap());
        prop_assert_eq!(rand_index(&a, &a).unwrap(), 1.0);
        let relabeled: Vec<usize> = a.iter().map(|x| 7 - x).collect();
        prop_assert_eq!(rand_index(&relabeled, &b).unwrap(), ri);
    }

    #[test]
    fn adadelta_matches_transcript(
        init in prop::collection::vec(-2.0f64..2.0, 1..5),
        steps in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 5), 1..8),
        rho in 0.5f64..0.99,
        eps in 1e-8f64..1e-3,
    ) {
        let n = init.len();
        let mut params = init.clone();
        let mut state = AdaDeltaState::new(n);
        let (mut x, mut eg, mut ed) = (init, vec![0.0; n], vec![0.0; n]);
        for g in &steps {
            let g = &g[..n];
            adadelta_step(&mut state, &mut params, g, rho, eps, "w").unwrap();
            for i in 0..n {
                eg[i] = rho * eg[i] + (1.0 - rho) * g[i].powi(2);
                let dx = -(ed[i] + eps).sqrt() / (eg[i] + eps).sqrt() * g[i];
                ed[i] = rho * ed[i] + (1.0 - rho) * dx.powi(2);
                x[i] += dx;
            }
            for i in 0..n {
                prop_assert!((params[i] - x[i]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn irmv1_penalty_matches_scale_derivative(seed in 0u64..10_000, envs in 1usize..4) {
        let (p, _, _) = random_problem(seed);
        let mut p = init_params(
            p.input_dim(), &p.extractor.hidden_dims, p.extractor.feature_dim, p.num_classes(), envs,
            p.extractor.activation, seed,
        ).unwrap();
        let mut r = rng(seed);
        let head: Vec<f64> = (0..p.heads[0].flatten().len()).map(|_| r.random_range(-1.0..1.0)).collect();
        for e in 0..envs {
            p.heads[e] = p.heads[e].unflatten_like(&head, e);
        }
        let batches: Vec<Batch> = (0..envs).map(|e| random_problem(seed * 7 + e as u64 + 1).1).collect();
        let batches: Vec<Batch> = batches
            .into_iter()
            .map(|b| {
                let n = b.features.rows;
                let d = p.input_dim();
                let x = Matrix::from_vec(n, d, (0..n * d).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
                let c = p.num_classes();
                Batch::new(x, Labels::Classes((0..n).map(|_| r.random_range(0..c)).collect())).unwrap()
            })
            .collect();
        let loss_at = |s: f64, b: &Batch| {
            let mut q = p.clone();
            let scaled: Vec<f64> = head.iter().map(|w| w * s).collect();
            q.heads[0] = q.heads[0].unflatten_like(&scaled, 0);
            loss_bce(&forward(&q, HeadSelector::Env(0), &b.features).unwrap(), &b.labels).unwrap()
        };
        let h = 1e-6;
        let want: f64 = batches.iter().map(|b| ((loss_at(1.0 + h, b) - loss_at(1.0 - h, b)) / (2.0 * h)).powi(2)).sum();
        let got = irmv1_penalty(&p, &batches).unwrap();
        prop_assert!((got - want).abs() <= 1e-3 * want.max(1e-6), "{got} vs {want}");
    }

    #[test]
    fn random_partition_is_balanced_cover(n in 1usize..200, e in 1usize..6, seed in 0u64..1000) {
        prop_assume!(n >= e);
        let ds = Dataset::new((0..n).map(|i| Example::new(vec![i as f64], Label::Class(i % 2))).collect()).unwrap();
        let p = partition_random(&ds, e, seed).unwrap();
        let mut all: Vec<usize> = p.envs.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = p.envs.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn cluster_fill_conserves_counts(sizes in prop::collection::vec(0usize..50, 1..10), e in 1usize..6, seed in 0u64..100) {
        let n: usize = sizes.iter().sum();
        prop_assume!(n >= e);
        let shares = assign_clusters_to_envs(&sizes, e, seed).unwrap();
        prop_assert_eq!(shares.len(), sizes.len());
        let mut totals = vec![0; e];
        let mut per_cluster = vec![0; sizes.len()];
        for (c, cluster) in shares.iter().enumerate() {
            for share in cluster {
                totals[share.env] += share.count;
                per_cluster[c] += share.count;
            }
        }
        prop_assert!(totals.iter().all(|&t| t > 0));
        prop_assert!(totals.iter().max().unwrap() - totals.iter().min().unwrap() <= 1);
        prop_assert_eq!(per_cluster, sizes);
    }

    #[test]
    fn kmeans_objective_never_decreases(seed in 0u64..500, k in 2usize..5) {
        let mut r = rng(seed);
        let vs: Vec<Vec<f64>> = (0..40).map(|_| (0..4).map(|_| r.random_range(0.0..1.0)).collect()).collect();
        let a = kmeans_cosine(&vs, k, seed, 100).unwrap();
        for w in a.objective_trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9, "{:?}", a.objective_trace);
        }
        prop_assert!(a.labels.iter().all(|&l| l < k));
    }

    #[test]
    fn jsonl_round_trips(rows in prop::collection::vec((prop::collection::vec(-1e6f64..1e6, 3), 0usize..3, prop::option::of("[a-z]{1,6}")), 1..20)) {
        let ds = Dataset::new(rows.into_iter().map(|(x, y, g)| Example {
            x,
            y: Label::Class(y),
            meta: Meta { group: g, ..Meta::default() },
        }).collect()).unwrap();
        let text = ds.to_jsonl().unwrap();
        let back = Dataset::from_reader(text.as_bytes(), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn merged_mean_of_equal_heads_matches_every_head(seed in 0u64..10_000) {
        let (p, batch, _) = random_problem(seed);
        let mut p = p;
        let h0 = p.heads[0].clone();
        for (e, h) in p.heads.iter_mut().enumerate() {
            *h = h0.unflatten_like(&h0.flatten(), e);
        }
        let merged = merge_heads(&p, MergeMode::Mean);
        let m = forward(&merged, HeadSelector::Merged, &batch.features).unwrap();
        for e in 0..p.heads.len() {
            prop_assert_eq!(&forward(&merged, HeadSelector::Env(e), &batch.features).unwrap(), &m);
        }
    }
}
