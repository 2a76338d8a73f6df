//! Synthetic multi-environment benchmarks.
//!
//! [`gen_spurious`] draws two Gaussian feature blocks: a stable block whose
//! relation to the label is the same everywhere, and a spurious block whose
//! sign agrees with the label at a rate that changes per environment.
//!
//! [`gen_token_groups`] draws token bags from latent groups. The group sets
//! the label prior (spurious) and the style tokens; content tokens carry the
//! label in the same way in every group (stable). Some examples carry
//! alternative forms that keep the content and resample the style.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example, Label, Meta};
use crate::error::{Error, Result};

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpuriousSpec {
    pub d_stable: usize,
    pub d_spur: usize,
    pub mu_stable: f64,
    pub mu_spur: f64,
    pub sigma: f64,
    /// Probability that the spurious block agrees with the label, per training environment.
    pub env_agreement: Vec<f64>,
    pub test_agreement: f64,
    pub n_per_env: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for SpuriousSpec {
    fn default() -> Self {
        Self {
            d_stable: 5,
            d_spur: 5,
            mu_stable: 1.0,
            mu_spur: 1.0,
            sigma: 1.0,
            env_agreement: vec![0.9, 0.8],
            test_agreement: 0.1,
            n_per_env: 2000,
            n_val: 1000,
            n_test: 5000,
        }
    }
}

impl SpuriousSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("d_stable", self.d_stable), ("d_spur", self.d_spur)] {
            if v < 1 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        for (name, v) in [
            ("n_per_env", self.n_per_env),
            ("n_val", self.n_val),
            ("n_test", self.n_test),
        ] {
            if v < 1 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        for (name, v) in [
            ("mu_stable", self.mu_stable),
            ("mu_spur", self.mu_spur),
            ("sigma", self.sigma),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(name, "must be a finite value > 0"));
            }
        }
        if self.env_agreement.len() < 2 {
            return Err(Error::config("env_agreement", "needs at least 2 environments"));
        }
        if let Some(p) = self.env_agreement.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::config("env_agreement", format!("{p} is not a probability")));
        }
        if !(0.0..=1.0).contains(&self.test_agreement) {
            return Err(Error::config("test_agreement", "must be in [0, 1]"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.d_stable + self.d_spur
    }
}

/// Training environments, an in-distribution validation set, and an OOD test set.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Dataset>,
    pub val: Dataset,
    pub test: Dataset,
}

fn spurious_example(
    spec: &SpuriousSpec,
    agreement: f64,
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> Example {
    let y = rng.random_bool(0.5);
    let t = if y { 1.0 } else { -1.0 };
    let s = if rng.random_bool(agreement) { 1.0 } else { -1.0 };
    let mut x = Vec::with_capacity(spec.dim());
    for _ in 0..spec.d_stable {
        x.push(t * spec.mu_stable + noise.sample(rng));
    }
    for _ in 0..spec.d_spur {
        x.push(s * t * spec.mu_spur + noise.sample(rng));
    }
    Example::new(x, Label::Class(y as usize))
}

pub fn gen_spurious(spec: &SpuriousSpec, seed: u64) -> Result<Splits> {
    spec.validate()?;
    let noise = Normal::new(0.0, spec.sigma).expect("sigma validated");
    let train = spec
        .env_agreement
        .iter()
        .enumerate()
        .map(|(e, &p)| {
            let mut rng = stream(seed, e as u64);
            let examples = (0..spec.n_per_env)
                .map(|_| {
                    let mut ex = spurious_example(spec, p, &noise, &mut rng);
                    ex.meta.group = Some(format!("env{e}"));
                    ex
                })
                .collect();
            Dataset { examples }
        })
        .collect();

    let envs = spec.env_agreement.len();
    let mut rng = stream(seed, 1000);
    let val = (0..spec.n_val)
        .map(|_| {
            let e = rng.random_range(0..envs);
            spurious_example(spec, spec.env_agreement[e], &noise, &mut rng)
        })
        .collect();
    let mut rng = stream(seed, 1001);
    let test = (0..spec.n_test)
        .map(|_| spurious_example(spec, spec.test_agreement, &noise, &mut rng))
        .collect();
    Ok(Splits {
        train,
        val: Dataset { examples: val },
        test: Dataset { examples: test },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenGroupsConfig {
    pub n: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub groups: usize,
    /// Groups alternate between a label prior of `0.5 + skew/2` and `0.5 - skew/2`.
    pub label_skew: f64,
    /// Content tokens per label.
    pub content_vocab: usize,
    pub content_per_example: usize,
    /// Probability that a content token comes from the label's own set.
    pub content_reliability: f64,
    pub style_vocab: usize,
    pub style_per_example: usize,
    pub filler_vocab: usize,
    pub filler_per_example: usize,
    pub fraction_with_forms: f64,
    pub max_forms: usize,
}

impl Default for TokenGroupsConfig {
    fn default() -> Self {
        Self {
            n: 3000,
            n_val: 1000,
            n_test: 3000,
            groups: 8,
            label_skew: 0.8,
            content_vocab: 6,
            content_per_example: 3,
            content_reliability: 0.7,
            style_vocab: 5,
            style_per_example: 3,
            filler_vocab: 10,
            filler_per_example: 2,
            fraction_with_forms: 0.174,
            max_forms: 3,
        }
    }
}

impl TokenGroupsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::config("n", "must be >= 1"));
        }
        if self.groups < 2 {
            return Err(Error::config("groups", "must be >= 2"));
        }
        if !(0.0..1.0).contains(&self.label_skew) {
            return Err(Error::config("label_skew", "must be in [0, 1)"));
        }
        for (name, v) in [
            ("content_vocab", self.content_vocab),
            ("content_per_example", self.content_per_example),
            ("style_vocab", self.style_vocab),
            ("style_per_example", self.style_per_example),
        ] {
            if v < 1 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        if self.filler_per_example > 0 && self.filler_vocab == 0 {
            return Err(Error::config("filler_vocab", "must be >= 1 when fillers are drawn"));
        }
        if !(0.0..=1.0).contains(&self.content_reliability) {
            return Err(Error::config("content_reliability", "must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.fraction_with_forms) {
            return Err(Error::config("fraction_with_forms", "must be in [0, 1]"));
        }
        if self.fraction_with_forms > 0.0 && self.max_forms < 1 {
            return Err(Error::config("max_forms", "must be >= 1 when forms are drawn"));
        }
        Ok(())
    }

    /// Feature vocabulary: content tokens, then style tokens by group, then fillers.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut v = Vec::new();
        for label in ["pos", "neg"] {
            v.extend((0..self.content_vocab).map(|k| format!("{label}{k}")));
        }
        for g in 0..self.groups {
            v.extend((0..self.style_vocab).map(|k| format!("g{g}s{k}")));
        }
        v.extend((0..self.filler_vocab).map(|k| format!("f{k}")));
        v
    }

    fn prior(&self, group: usize) -> f64 {
        if group.is_multiple_of(2) {
            0.5 + self.label_skew / 2.0
        } else {
            0.5 - self.label_skew / 2.0
        }
    }

    fn style_offset(&self, group: usize) -> usize {
        2 * self.content_vocab + group * self.style_vocab
    }

    fn filler_offset(&self) -> usize {
        2 * self.content_vocab + self.groups * self.style_vocab
    }
}

/// Token indices of one bag, split by role.
struct Bag {
    content: Vec<usize>,
    style: Vec<usize>,
    filler: Vec<usize>,
}

impl Bag {
    fn features(&self, vocab_len: usize) -> Vec<f64> {
        let mut x = vec![0.0; vocab_len];
        for &t in self.content.iter().chain(&self.style).chain(&self.filler) {
            x[t] = 1.0;
        }
        x
    }
}

fn draw_style(cfg: &TokenGroupsConfig, group: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let off = cfg.style_offset(group);
    (0..cfg.style_per_example)
        .map(|_| off + rng.random_range(0..cfg.style_vocab))
        .collect()
}

fn draw_bag(cfg: &TokenGroupsConfig, y: bool, style_group: usize, rng: &mut ChaCha8Rng) -> Bag {
    let content = (0..cfg.content_per_example)
        .map(|_| {
            let own = rng.random_bool(cfg.content_reliability);
            let positive = own == y;
            let base = if positive { 0 } else { cfg.content_vocab };
            base + rng.random_range(0..cfg.content_vocab)
        })
        .collect();
    let style = draw_style(cfg, style_group, rng);
    let filler = (0..cfg.filler_per_example)
        .map(|_| cfg.filler_offset() + rng.random_range(0..cfg.filler_vocab))
        .collect();
    Bag {
        content,
        style,
        filler,
    }
}

fn other_group(cfg: &TokenGroupsConfig, group: usize, rng: &mut ChaCha8Rng) -> usize {
    let g = rng.random_range(0..cfg.groups - 1);
    if g >= group {
        g + 1
    } else {
        g
    }
}

fn token_example(
    cfg: &TokenGroupsConfig,
    vocab: &[String],
    group: usize,
    style_group: usize,
    forms: usize,
    rng: &mut ChaCha8Rng,
) -> Example {
    let y = rng.random_bool(cfg.prior(group));
    let bag = draw_bag(cfg, y, style_group, rng);
    let x = bag.features(vocab.len());
    let forms = (forms > 0).then(|| {
        (0..forms)
            .map(|_| {
                let g = other_group(cfg, style_group, rng);
                Bag {
                    content: bag.content.clone(),
                    style: draw_style(cfg, g, rng),
                    filler: bag.filler.clone(),
                }
                .features(vocab.len())
            })
            .collect()
    });
    let tokens = bag
        .content
        .iter()
        .chain(&bag.style)
        .chain(&bag.filler)
        .map(|&t| vocab[t].clone())
        .collect();
    Example {
        x,
        y: Label::Class(y as usize),
        meta: Meta {
            group: Some(format!("g{group}")),
            dataset_id: None,
            forms,
            tokens: Some(tokens),
        },
    }
}

/// Training set with group metadata, token bags and alternative forms.
///
/// Exactly `round(n · fraction_with_forms)` examples carry between one and
/// `max_forms` forms.
pub fn gen_token_groups(cfg: &TokenGroupsConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let vocab = cfg.vocabulary();
    let mut rng = stream(seed, 0);
    let with_forms = (cfg.n as f64 * cfg.fraction_with_forms).round() as usize;
    let mut has_forms: Vec<bool> = (0..cfg.n).map(|i| i < with_forms).collect();
    has_forms.shuffle(&mut rng);
    let examples = has_forms
        .into_iter()
        .map(|f| {
            let group = rng.random_range(0..cfg.groups);
            let forms = if f { rng.random_range(1..=cfg.max_forms) } else { 0 };
            token_example(cfg, &vocab, group, group, forms, &mut rng)
        })
        .collect();
    Ok(Dataset { examples })
}

/// Training set plus an i.i.d. validation set and an OOD test set whose style
/// tokens come from a group with the opposite label prior.
pub fn gen_token_groups_splits(cfg: &TokenGroupsConfig, seed: u64) -> Result<Splits> {
    let train = gen_token_groups(cfg, seed)?;
    let vocab = cfg.vocabulary();
    let mut rng = stream(seed, 1000);
    let val = (0..cfg.n_val)
        .map(|_| {
            let group = rng.random_range(0..cfg.groups);
            token_example(cfg, &vocab, group, group, 0, &mut rng)
        })
        .collect();
    let mut rng = stream(seed, 1001);
    let test = (0..cfg.n_test)
        .map(|_| {
            let group = rng.random_range(0..cfg.groups);
            let style_group = opposite_group(cfg, group, &mut rng);
            token_example(cfg, &vocab, group, style_group, 0, &mut rng)
        })
        .collect();
    Ok(Splits {
        train: vec![train],
        val: Dataset { examples: val },
        test: Dataset { examples: test },
    })
}

fn opposite_group(cfg: &TokenGroupsConfig, group: usize, rng: &mut ChaCha8Rng) -> usize {
    let candidates: Vec<usize> = (0..cfg.groups).filter(|g| g % 2 != group % 2).collect();
    candidates[rng.random_range(0..candidates.len())]
}
