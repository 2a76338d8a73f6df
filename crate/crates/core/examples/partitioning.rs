//! Builds environments from a token dataset three ways: ground-truth groups,
//! k-means over bag-of-words vectors, and a random split. Prints environment
//! sizes and how well the clusters match the groups.
//!
//!     cargo run --release --example partitioning

use unshuffle::datagen::{gen_token_groups, TokenGroupsConfig};
use unshuffle::partitioning::{
    partition_by_clustering, partition_by_metadata, partition_random, rand_index, MetaKey,
};

fn main() -> unshuffle::Result<()> {
    let cfg = TokenGroupsConfig::default();
    let ds = gen_token_groups(&cfg, 1)?;
    let truth: Vec<String> = ds.examples.iter().map(|e| e.meta.group.clone().unwrap()).collect();

    let by_group = partition_by_metadata(&ds, MetaKey::Group, 4, 1)?;
    println!("metadata:   {:?}", sizes(&by_group.envs));

    let (by_cluster, assignment) = partition_by_clustering(&ds, cfg.groups, 4, 5, 1)?;
    println!("clustering: {:?}", sizes(&by_cluster.envs));
    let mut names: Vec<&String> = truth.iter().collect();
    names.sort();
    names.dedup();
    let ids: Vec<usize> = truth.iter().map(|g| names.binary_search(&g).unwrap()).collect();
    println!(
        "  k-means converged: {} after {} iterations, rand index vs groups {:.3}",
        assignment.converged,
        assignment.iterations,
        rand_index(&assignment.labels, &ids)?
    );

    let random = partition_random(&ds, 4, 1)?;
    println!("random:     {:?}", sizes(&random.envs));
    println!("rand index metadata vs random environments {:.3}", rand_index(&by_group.labels(), &random.labels())?);
    Ok(())
}

fn sizes(envs: &[Vec<usize>]) -> Vec<usize> {
    envs.iter().map(Vec::len).collect()
}
