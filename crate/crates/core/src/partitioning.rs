//! Building training environments out of a dataset.
//!
//! Strategies: metadata groups, spherical k-means over binary bags of words,
//! equivalent forms, one environment per source dataset, and a uniformly
//! random split as the null baseline.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example, Meta};
use crate::error::{Error, Result};

/// `E` disjoint, nonempty index sets whose union is `[0, n)`.
/// Each set is kept sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentPartition {
    pub strategy: String,
    pub seed: u64,
    pub envs: Vec<Vec<usize>>,
}

impl EnvironmentPartition {
    pub fn new(strategy: impl Into<String>, seed: u64, mut envs: Vec<Vec<usize>>) -> Result<Self> {
        envs.iter_mut().for_each(|e| e.sort_unstable());
        let p = Self {
            strategy: strategy.into(),
            seed,
            envs,
        };
        p.validate(p.len())?;
        Ok(p)
    }

    /// Total number of indices.
    pub fn len(&self) -> usize {
        self.envs.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn num_envs(&self) -> usize {
        self.envs.len()
    }

    /// Checks disjointness, nonempty sets and exact cover of `[0, n)`.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.envs.is_empty() {
            return Err(Error::InvalidPartition("no environments".into()));
        }
        let mut seen = vec![false; n];
        for (e, set) in self.envs.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::InvalidPartition(format!("environment {e} is empty")));
            }
            for &i in set {
                if i >= n {
                    return Err(Error::InvalidPartition(format!(
                        "index {i} in environment {e} is out of range for {n} examples"
                    )));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::InvalidPartition(format!("index {i} appears twice")));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidPartition(format!("index {i} is not covered")));
        }
        Ok(())
    }

    /// Environment id per example.
    pub fn labels(&self) -> Vec<usize> {
        let mut labels = vec![0; self.len()];
        for (e, set) in self.envs.iter().enumerate() {
            for &i in set {
                labels[i] = e;
            }
        }
        labels
    }

    pub fn materialize(&self, dataset: &Dataset) -> Result<Vec<Dataset>> {
        self.validate(dataset.len())?;
        Ok(self.envs.iter().map(|set| dataset.subset(set)).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: EnvironmentPartition = serde_json::from_str(&s)?;
        p.validate(p.len())?;
        Ok(p)
    }
}

/// Vocabulary of tokens kept after the count threshold, in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BowVocabulary {
    pub tokens: Vec<String>,
    pub counts: Vec<usize>,
    pub min_count: usize,
}

/// Binary bag-of-words. A token's count is the number of examples it occurs in.
pub fn bow_vectorize<S: AsRef<str>>(
    token_lists: &[Vec<S>],
    min_count: usize,
) -> Result<(BowVocabulary, Vec<Vec<f64>>)> {
    if token_lists.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for list in token_lists {
        let unique: BTreeSet<&str> = list.iter().map(AsRef::as_ref).collect();
        for t in unique {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    counts.retain(|_, c| *c >= min_count);
    if counts.is_empty() {
        return Err(Error::EmptyVocabulary(min_count));
    }
    let index: BTreeMap<&str, usize> = counts.keys().enumerate().map(|(i, t)| (*t, i)).collect();
    let rows = token_lists
        .iter()
        .map(|list| {
            let mut row = vec![0.0; index.len()];
            for t in list {
                if let Some(&j) = index.get(t.as_ref()) {
                    row[j] = 1.0;
                }
            }
            row
        })
        .collect();
    let vocab = BowVocabulary {
        tokens: counts.keys().map(|t| t.to_string()).collect(),
        counts: counts.values().copied().collect(),
        min_count,
    };
    Ok((vocab, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    /// Unit-norm centroids, `K × V`. The overflow cluster's centroid is zero.
    pub centroids: Vec<Vec<f64>>,
    /// Cluster holding the all-zero rows, when there are any.
    pub overflow: Option<usize>,
    /// Sum of cosine similarities to the assigned centroid, after each iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub const DEFAULT_KMEANS_ITERS: usize = 100;

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 0.0).then(|| v.iter().map(|x| x / n).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Spherical k-means: rows are unit-normalized, points go to the centroid of
/// highest cosine similarity (lowest index on ties), centroids are the
/// normalized means of their members.
///
/// All-zero rows have no direction; when present they form cluster `K - 1`
/// and the remaining rows are clustered into `K - 1` groups.
pub fn kmeans_cosine(
    vectors: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<ClusterAssignment> {
    let n = vectors.len();
    if k < 2 {
        return Err(Error::config("clusters", "K must be >= 2"));
    }
    if k > n {
        return Err(Error::config("clusters", format!("K = {k} exceeds n = {n}")));
    }
    let units: Vec<Option<Vec<f64>>> = vectors.iter().map(|v| normalized(v)).collect();
    let live: Vec<usize> = (0..n).filter(|&i| units[i].is_some()).collect();
    let has_zero = live.len() < n;
    let kk = if has_zero { k - 1 } else { k };
    if live.len() < kk {
        return Err(Error::config(
            "clusters",
            format!("K = {k} exceeds the {} nonzero rows", live.len()),
        ));
    }
    let points: Vec<&[f64]> = live.iter().map(|&i| units[i].as_deref().unwrap()).collect();
    let dim = vectors.first().map_or(0, Vec::len);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(&points, kk, &mut rng);
    let mut assign = vec![usize::MAX; points.len()];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iters {
        iterations += 1;
        let mut changed = false;
        for (p, a) in points.iter().zip(assign.iter_mut()) {
            let best = nearest(p, &centroids).0;
            if best != *a {
                *a = best;
                changed = true;
            }
        }
        reseed_empty(&points, &mut assign, &mut centroids);
        centroids = recompute(&points, &assign, kk, dim);
        trace.push(objective(&points, &assign, &centroids));
        if !changed {
            converged = true;
            break;
        }
    }

    let mut labels = vec![k - 1; n];
    for (&i, &a) in live.iter().zip(&assign) {
        labels[i] = a;
    }
    if has_zero {
        centroids.push(vec![0.0; dim]);
    }
    Ok(ClusterAssignment {
        labels,
        centroids,
        overflow: has_zero.then_some(k - 1),
        objective_trace: trace,
        iterations,
        converged,
    })
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let s = dot(p, centroid);
        if s > best.1 {
            best = (c, s);
        }
    }
    best
}

/// k-means++ seeding with `1 − cos` as the distance.
fn plus_plus_init(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].to_vec()];
    let mut dist: Vec<f64> = points
        .iter()
        .map(|p| (1.0 - dot(p, &centroids[0])).max(0.0))
        .collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = dist.len() - 1;
            for (i, d) in dist.iter().enumerate() {
                if *d > 0.0 && r < *d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick].to_vec();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min((1.0 - dot(p, &c)).max(0.0));
        }
        centroids.push(c);
    }
    centroids
}

/// Gives every empty cluster the point farthest from its own centroid,
/// taken from a cluster with more than one member.
fn reseed_empty(points: &[&[f64]], assign: &mut [usize], centroids: &mut [Vec<f64>]) {
    loop {
        let mut sizes = vec![0usize; centroids.len()];
        for &a in assign.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut far: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if sizes[assign[i]] < 2 {
                continue;
            }
            let s = dot(p, &centroids[assign[i]]);
            if far.is_none_or(|(_, fs)| s < fs) {
                far = Some((i, s));
            }
        }
        let Some((i, _)) = far else { return };
        assign[i] = empty;
        centroids[empty] = points[i].to_vec();
    }
}

fn recompute(points: &[&[f64]], assign: &[usize], k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    for (p, &a) in points.iter().zip(assign) {
        for (s, x) in sums[a].iter_mut().zip(p.iter()) {
            *s += x;
        }
    }
    sums.into_iter()
        .map(|s| normalized(&s).unwrap_or(s))
        .collect()
}

fn objective(points: &[&[f64]], assign: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assign)
        .map(|(p, &a)| dot(p, &centroids[a]))
        .sum()
}

/// Contiguous share of one cluster sent to one environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterShare {
    pub env: usize,
    pub count: usize,
}

/// Randomized greedy fill of clusters into `E` environments of near-equal size.
///
/// Clusters are visited in a seeded random order and poured into the current
/// environment; a cluster that overflows it is split, the remainder flowing to
/// the next. Capacities are `⌈n/E⌉` for the first `n mod E` environments and
/// `⌊n/E⌋` for the rest, so no environment is left empty. The result lists,
/// per cluster, the shares it was split into.
pub fn assign_clusters_to_envs(
    cluster_sizes: &[usize],
    num_envs: usize,
    seed: u64,
) -> Result<Vec<Vec<ClusterShare>>> {
    let n: usize = cluster_sizes.iter().sum();
    if num_envs < 1 {
        return Err(Error::config("envs", "E must be >= 1"));
    }
    if num_envs > n {
        return Err(Error::config("envs", format!("E = {num_envs} exceeds n = {n}")));
    }
    let mut order: Vec<usize> = (0..cluster_sizes.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let capacity = |e: usize| n / num_envs + usize::from(e < n % num_envs);
    let mut shares = vec![Vec::new(); cluster_sizes.len()];
    let mut env = 0;
    let mut room = capacity(0);
    for c in order {
        let mut left = cluster_sizes[c];
        while left > 0 {
            if room == 0 {
                env += 1;
                room = capacity(env);
            }
            let take = left.min(room);
            shares[c].push(ClusterShare { env, count: take });
            left -= take;
            room -= take;
        }
    }
    Ok(shares)
}

/// Turns per-example cluster labels into a partition. Members of a split
/// cluster are shuffled and dealt out by prefix.
fn clusters_to_partition(
    labels: &[usize],
    num_clusters: usize,
    num_envs: usize,
    seed: u64,
    strategy: &str,
) -> Result<EnvironmentPartition> {
    let mut members = vec![Vec::new(); num_clusters];
    for (i, &c) in labels.iter().enumerate() {
        members[c].push(i);
    }
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    let shares = assign_clusters_to_envs(&sizes, num_envs, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut envs = vec![Vec::new(); num_envs];
    for (mut m, split) in members.into_iter().zip(shares) {
        if split.len() > 1 {
            m.shuffle(&mut rng);
        }
        let mut rest = m.as_slice();
        for share in split {
            let (head, tail) = rest.split_at(share.count);
            envs[share.env].extend_from_slice(head);
            rest = tail;
        }
    }
    EnvironmentPartition::new(strategy, seed, envs)
}

/// Which metadata field names the natural groups of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaKey {
    Group,
    DatasetId,
}

impl MetaKey {
    fn get(self, meta: &Meta) -> Option<&str> {
        match self {
            MetaKey::Group => meta.group.as_deref(),
            MetaKey::DatasetId => meta.dataset_id.as_deref(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            MetaKey::Group => "group",
            MetaKey::DatasetId => "dataset_id",
        }
    }
}

pub fn partition_by_metadata(
    dataset: &Dataset,
    key: MetaKey,
    num_envs: usize,
    seed: u64,
) -> Result<EnvironmentPartition> {
    let missing: Vec<usize> = dataset
        .examples
        .iter()
        .enumerate()
        .filter(|(_, e)| key.get(&e.meta).is_none())
        .map(|(i, _)| i)
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingMetadata {
            key: key.name().into(),
            indices: missing,
        });
    }
    let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &dataset.examples {
        let next = ids.len();
        ids.entry(key.get(&e.meta).unwrap()).or_insert(next);
    }
    // Cluster ids follow sorted group values so the result does not depend on example order.
    let rank: BTreeMap<&str, usize> = ids.keys().enumerate().map(|(r, k)| (*k, r)).collect();
    let labels: Vec<usize> = dataset
        .examples
        .iter()
        .map(|e| rank[key.get(&e.meta).unwrap()])
        .collect();
    clusters_to_partition(&labels, rank.len(), num_envs, seed, "metadata")
}

pub fn partition_by_clustering(
    dataset: &Dataset,
    clusters: usize,
    num_envs: usize,
    min_count: usize,
    seed: u64,
) -> Result<(EnvironmentPartition, ClusterAssignment)> {
    if num_envs >= clusters {
        return Err(Error::config(
            "envs",
            format!("E = {num_envs} must be smaller than K = {clusters}"),
        ));
    }
    let missing: Vec<usize> = dataset
        .examples
        .iter()
        .enumerate()
        .filter(|(_, e)| e.meta.tokens.is_none())
        .map(|(i, _)| i)
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingMetadata {
            key: "tokens".into(),
            indices: missing,
        });
    }
    let lists: Vec<Vec<String>> = dataset
        .examples
        .iter()
        .map(|e| e.meta.tokens.clone().unwrap())
        .collect();
    let (_, rows) = bow_vectorize(&lists, min_count)?;
    let assignment = kmeans_cosine(&rows, clusters, seed, DEFAULT_KMEANS_ITERS)?;
    let partition = clusters_to_partition(&assignment.labels, clusters, num_envs, seed, "clustering")?;
    Ok((partition, assignment))
}

/// Seeded shuffle dealt round-robin; sizes differ by at most one.
pub fn partition_random(dataset: &Dataset, num_envs: usize, seed: u64) -> Result<EnvironmentPartition> {
    let n = dataset.len();
    if num_envs < 1 || num_envs > n {
        return Err(Error::config("envs", format!("E = {num_envs} must be in [1, {n}]")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut envs = vec![Vec::with_capacity(n / num_envs + 1); num_envs];
    for (pos, i) in order.into_iter().enumerate() {
        envs[pos % num_envs].push(i);
    }
    EnvironmentPartition::new("random", seed, envs)
}

/// `E` full-size datasets: environment `e` holds form `e` of each example
/// when it exists and the original otherwise. Environment 0 is the input.
pub fn partition_by_forms(dataset: &Dataset, num_envs: usize) -> Result<Vec<Dataset>> {
    if num_envs < 2 {
        return Err(Error::config("envs", "forms partition needs E >= 2"));
    }
    if let Some((index, e)) = dataset
        .examples
        .iter()
        .enumerate()
        .find(|(_, e)| e.meta.num_forms() > num_envs - 1)
    {
        return Err(Error::TooManyForms {
            index,
            forms: e.meta.num_forms(),
            envs: num_envs,
        });
    }
    let mut envs = vec![dataset.clone()];
    for k in 1..num_envs {
        let examples = dataset
            .examples
            .iter()
            .map(|e| match e.meta.forms.as_ref().and_then(|f| f.get(k - 1)) {
                Some(form) => Example {
                    x: form.clone(),
                    y: e.y.clone(),
                    meta: Meta {
                        tokens: None,
                        ..e.meta.clone()
                    },
                },
                None => e.clone(),
            })
            .collect();
        envs.push(Dataset { examples });
    }
    Ok(envs)
}

/// Concatenation of the inputs, environment `e` being the rows of input `e`.
pub fn partition_by_dataset_id(datasets: &[Dataset]) -> Result<(Dataset, EnvironmentPartition)> {
    if datasets.len() < 2 {
        return Err(Error::config("datasets", "need at least 2 datasets"));
    }
    let dim = datasets[0].dim();
    let classes = datasets[0].num_classes();
    for (k, d) in datasets.iter().enumerate() {
        if d.is_empty() {
            return Err(Error::EmptyEnvironment(k));
        }
        if d.dim() != dim {
            return Err(Error::ShapeMismatch(format!(
                "dataset {k} has dimension {}, dataset 0 has {dim}",
                d.dim()
            )));
        }
        if matches!(d.examples[0].y, crate::data::Label::MultiHot(_)) && d.num_classes() != classes {
            return Err(Error::ShapeMismatch(format!("dataset {k} has a different label space")));
        }
    }
    let pooled = Dataset::concat(datasets)?;
    let mut envs = Vec::with_capacity(datasets.len());
    let mut start = 0;
    for d in datasets {
        envs.push((start..start + d.len()).collect());
        start += d.len();
    }
    Ok((pooled, EnvironmentPartition::new("dataset_id", 0, envs)?))
}

/// Fraction of example pairs on which two labelings agree (both together or
/// both apart).
pub fn rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "labelings of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidPartition("rand index needs n >= 2".into()));
    }
    let pairs = |c: usize| (c * c.saturating_sub(1) / 2) as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ca: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cb: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0) += 1;
        *ca.entry(x).or_insert(0) += 1;
        *cb.entry(y).or_insert(0) += 1;
    }
    let both: f64 = joint.values().map(|&c| pairs(c)).sum();
    let in_a: f64 = ca.values().map(|&c| pairs(c)).sum();
    let in_b: f64 = cb.values().map(|&c| pairs(c)).sum();
    let total = pairs(n);
    Ok((total + 2.0 * both - in_a - in_b) / total)
}

fn default_min_count() -> usize {
    10
}

fn default_meta_key() -> MetaKey {
    MetaKey::Group
}

/// How training data (one or more source datasets) becomes environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionStrategy {
    /// All sources concatenated into a single environment.
    Pooled,
    /// One environment per source dataset.
    DatasetId,
    Random {
        envs: usize,
    },
    Metadata {
        #[serde(default = "default_meta_key")]
        key: MetaKey,
        envs: usize,
    },
    Clustering {
        clusters: usize,
        envs: usize,
        #[serde(default = "default_min_count")]
        min_count: usize,
    },
    Forms {
        envs: usize,
    },
    /// Pooled originals plus every alternative form as an extra example.
    Augment,
    /// A partition file over the pooled sources.
    File {
        path: std::path::PathBuf,
    },
}

impl PartitionStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            PartitionStrategy::Pooled => "pooled",
            PartitionStrategy::DatasetId => "dataset_id",
            PartitionStrategy::Random { .. } => "random",
            PartitionStrategy::Metadata { .. } => "metadata",
            PartitionStrategy::Clustering { .. } => "clustering",
            PartitionStrategy::Forms { .. } => "forms",
            PartitionStrategy::Augment => "augment",
            PartitionStrategy::File { .. } => "file",
        }
    }

    /// Same strategy with `E` replaced. A forms strategy with `E = 1` becomes pooled.
    pub fn with_envs(&self, envs: usize) -> Result<PartitionStrategy> {
        Ok(match self.clone() {
            PartitionStrategy::Random { .. } => PartitionStrategy::Random { envs },
            PartitionStrategy::Metadata { key, .. } => PartitionStrategy::Metadata { key, envs },
            PartitionStrategy::Clustering {
                clusters, min_count, ..
            } => PartitionStrategy::Clustering {
                clusters,
                envs,
                min_count,
            },
            PartitionStrategy::Forms { .. } if envs == 1 => PartitionStrategy::Pooled,
            PartitionStrategy::Forms { .. } => PartitionStrategy::Forms { envs },
            other => {
                return Err(Error::config(
                    "partition.strategy",
                    format!("{} has no environment count", other.name()),
                ))
            }
        })
    }

    pub fn with_clusters(&self, clusters: usize) -> Result<PartitionStrategy> {
        match self {
            PartitionStrategy::Clustering {
                envs, min_count, ..
            } => Ok(PartitionStrategy::Clustering {
                clusters,
                envs: *envs,
                min_count: *min_count,
            }),
            other => Err(Error::config(
                "partition.strategy",
                format!("{} has no cluster count", other.name()),
            )),
        }
    }

    /// Index partition over the pooled sources, for strategies that have one.
    pub fn partition(&self, pooled: &Dataset, sources: &[Dataset], seed: u64) -> Result<Option<EnvironmentPartition>> {
        Ok(Some(match self {
            PartitionStrategy::Pooled => {
                EnvironmentPartition::new("pooled", seed, vec![(0..pooled.len()).collect()])?
            }
            PartitionStrategy::DatasetId => {
                if sources.len() < 2 {
                    return Err(Error::config("partition.strategy", "dataset_id needs at least 2 input datasets"));
                }
                partition_by_dataset_id(sources)?.1
            }
            PartitionStrategy::Random { envs } => partition_random(pooled, *envs, seed)?,
            PartitionStrategy::Metadata { key, envs } => partition_by_metadata(pooled, *key, *envs, seed)?,
            PartitionStrategy::Clustering {
                clusters,
                envs,
                min_count,
            } => partition_by_clustering(pooled, *clusters, *envs, *min_count, seed)?.0,
            PartitionStrategy::File { path } => {
                let p = EnvironmentPartition::load(path)?;
                p.validate(pooled.len())?;
                p
            }
            PartitionStrategy::Forms { .. } | PartitionStrategy::Augment => return Ok(None),
        }))
    }

    /// Training environments built from the source datasets.
    pub fn apply(&self, sources: &[Dataset], seed: u64) -> Result<Vec<Dataset>> {
        if sources.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let pooled = if sources.len() == 1 {
            sources[0].clone()
        } else {
            Dataset::concat(sources)?
        };
        match self {
            PartitionStrategy::Pooled => Ok(vec![pooled]),
            PartitionStrategy::Forms { envs } => partition_by_forms(&pooled, *envs),
            PartitionStrategy::Augment => Ok(vec![pooled.augmented_with_forms()]),
            _ => self
                .partition(&pooled, sources, seed)?
                .expect("index strategies return a partition")
                .materialize(&pooled),
        }
    }
}
