use unshuffle::datagen::{gen_spurious, SpuriousSpec};
use unshuffle::eval::accuracy;
use unshuffle::regularizers::HeadStack;
use unshuffle::{train, Dataset, Error, HeadSelector, Objective, PartitionStrategy, TrainConfig};

fn small_spec() -> SpuriousSpec {
    SpuriousSpec {
        n_per_env: 400,
        n_val: 300,
        n_test: 300,
        ..SpuriousSpec::default()
    }
}

fn quick(config: TrainConfig) -> TrainConfig {
    TrainConfig {
        max_epochs: 15,
        ..config
    }
}

#[test]
fn same_seed_gives_identical_runs() {
    let s = gen_spurious(&small_spec(), 1).unwrap();
    let cfg = quick(TrainConfig {
        seed: 4,
        ..TrainConfig::default()
    });
    let (p1, r1) = train(&cfg, &s.train, &s.val).unwrap();
    let (p2, r2) = train(&cfg, &s.train, &s.val).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(r1.to_json().unwrap(), r2.to_json().unwrap());
}

#[test]
fn single_environment_equals_erm() {
    let s = gen_spurious(&small_spec(), 2).unwrap();
    let pooled = Dataset::concat(&s.train).unwrap();
    for lambda in [0.0, 1.0, 1e3] {
        let cfg = quick(TrainConfig {
            lambda,
            ..TrainConfig::default()
        });
        let erm = TrainConfig {
            objective: Objective::Erm,
            ..cfg.clone()
        };
        let (pa, ra) = train(&cfg, std::slice::from_ref(&pooled), &s.val).unwrap();
        let (pb, rb) = train(&erm, std::slice::from_ref(&pooled), &s.val).unwrap();
        assert_eq!(pa, pb);
        assert!(ra.same_outcome(&rb));
    }
}

#[test]
fn identical_environments_keep_heads_equal_without_penalty() {
    let s = gen_spurious(&small_spec(), 3).unwrap();
    let env = s.train[0].clone();
    let cfg = quick(TrainConfig {
        lambda: 0.0,
        ..TrainConfig::default()
    });
    let (p, r) = train(&cfg, &[env.clone(), env.clone(), env], &s.val).unwrap();
    for h in &p.heads[1..] {
        assert_eq!(h.weights, p.heads[0].weights);
        assert_eq!(h.bias, p.heads[0].bias);
    }
    assert!(r.epochs.iter().all(|e| e.variance == 0.0));
}

#[test]
fn large_lambda_collapses_head_spread() {
    let s = gen_spurious(&small_spec(), 4).unwrap();
    let cfg = quick(TrainConfig {
        lambda: 1e3,
        ..TrainConfig::default()
    });
    let (p, r) = train(&cfg, &s.train, &s.val).unwrap();
    let stack = HeadStack::from_heads(&p.heads).unwrap();
    let mean_sq: f64 = stack
        .vectors()
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        / stack.len() as f64;
    let abs = unshuffle::regularizers::variance_abs(&stack).unwrap();
    assert!(abs <= 1e-3 * mean_sq, "variance {abs}, mean squared norm {mean_sq}");
    assert!(r.final_variance.is_finite());
}

#[test]
fn returned_model_reproduces_best_validation_accuracy() {
    let s = gen_spurious(&small_spec(), 5).unwrap();
    let cfg = TrainConfig {
        patience: 3,
        max_epochs: 40,
        ..TrainConfig::default()
    };
    let (p, r) = train(&cfg, &s.train, &s.val).unwrap();
    let best = r.epochs.iter().map(|e| e.val_accuracy).fold(f64::MIN, f64::max);
    assert_eq!(r.best_val_accuracy, best);
    assert_eq!(r.epochs[r.best_epoch].val_accuracy, best);
    assert_eq!(accuracy(&p, HeadSelector::Merged, &s.val).unwrap(), best);
    if r.stopped_early {
        assert_eq!(r.epochs.len(), r.best_epoch + 1 + cfg.patience);
    }
}

#[test]
fn alternating_and_irm_variants_train() {
    let s = gen_spurious(&small_spec(), 6).unwrap();
    for cfg in [
        TrainConfig {
            alternating: true,
            warmup_epochs: 2,
            ..TrainConfig::default()
        },
        TrainConfig {
            objective: Objective::Irmv1,
            lambda: 10.0,
            ..TrainConfig::default()
        },
    ] {
        let (p, r) = train(&quick(cfg), &s.train, &s.val).unwrap();
        assert!(r.best_val_accuracy > 80.0, "{}", r.best_val_accuracy);
        assert!(p.merged.is_some());
    }
}

#[test]
fn erm_objective_rejects_several_environments() {
    let s = gen_spurious(&small_spec(), 7).unwrap();
    let cfg = TrainConfig {
        objective: Objective::Erm,
        ..TrainConfig::default()
    };
    assert!(train(&cfg, &s.train, &s.val).is_err());
}

#[test]
fn empty_environment_is_rejected() {
    let s = gen_spurious(&small_spec(), 8).unwrap();
    let envs = vec![s.train[0].clone(), Dataset::default()];
    assert!(matches!(
        train(&TrainConfig::default(), &envs, &s.val),
        Err(Error::EmptyEnvironment(_)) | Err(Error::EmptyDataset)
    ));
}

#[test]
fn strategies_build_expected_environment_counts() {
    let s = gen_spurious(&small_spec(), 9).unwrap();
    assert_eq!(PartitionStrategy::Pooled.apply(&s.train, 0).unwrap().len(), 1);
    assert_eq!(PartitionStrategy::DatasetId.apply(&s.train, 0).unwrap().len(), 2);
    let random = PartitionStrategy::Random { envs: 3 }.apply(&s.train, 0).unwrap();
    assert_eq!(random.iter().map(Dataset::len).sum::<usize>(), 800);
}
