//! Splitting a dataset across simulated clients.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};

/// How samples are assigned to clients. Every plan gives each client exactly
/// `floor(m / num_clients)` samples; the remainder is left unassigned so all
/// clients hold equally sized shards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case")]
pub enum PartitionPlan {
    /// IID split: a global shuffle dealt out in order.
    UniformRandom { num_clients: usize, seed: u64 },
    /// Non-IID split: client `i` draws from `classes_per_client` classes
    /// starting at `(i * classes_per_client) mod num_classes`. When its
    /// preferred class pools run dry the client falls back to whatever
    /// classes still have samples, so shard sizes stay exact.
    LabelSkew {
        num_clients: usize,
        classes_per_client: usize,
        seed: u64,
    },
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        match self {
            PartitionPlan::UniformRandom { num_clients, .. }
            | PartitionPlan::LabelSkew { num_clients, .. } => *num_clients,
        }
    }
}

/// Compute the per-client sample indices for `plan`.
pub fn partition_indices(ds: &LabeledDataset, plan: &PartitionPlan) -> Result<Vec<Vec<u32>>> {
    let k = plan.num_clients();
    if k == 0 {
        return Err(Error::InvalidArgument("partition needs at least one client".into()));
    }
    let per_client = ds.len() / k;
    if per_client == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} samples cannot cover {k} clients",
            ds.len()
        )));
    }
    match *plan {
        PartitionPlan::UniformRandom { seed, .. } => {
            let mut order: Vec<u32> = (0..ds.len() as u32).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            Ok(order
                .chunks_exact(per_client)
                .take(k)
                .map(|c| c.to_vec())
                .collect())
        }
        PartitionPlan::LabelSkew {
            classes_per_client,
            seed,
            ..
        } => {
            let num_classes = ds.num_classes() as usize;
            if classes_per_client == 0 || classes_per_client > num_classes {
                return Err(Error::InvalidArgument(format!(
                    "classes_per_client {classes_per_client} must be in 1..={num_classes}"
                )));
            }
            let mut order: Vec<u32> = (0..ds.len() as u32).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut pools: Vec<VecDeque<u32>> = vec![VecDeque::new(); num_classes];
            for &i in &order {
                pools[ds.labels()[i as usize] as usize].push_back(i);
            }
            let mut clients = Vec::with_capacity(k);
            for i in 0..k {
                let start = (i * classes_per_client) % num_classes;
                let preferred: Vec<usize> = (0..classes_per_client)
                    .map(|j| (start + j) % num_classes)
                    .collect();
                let mut shard = Vec::with_capacity(per_client);
                let mut cursor = 0usize;
                while shard.len() < per_client {
                    let mut drew = false;
                    // One pass over the preferred classes, round-robin.
                    for _ in 0..preferred.len() {
                        let class = preferred[cursor % preferred.len()];
                        cursor += 1;
                        if let Some(idx) = pools[class].pop_front() {
                            shard.push(idx);
                            drew = true;
                            break;
                        }
                    }
                    if !drew {
                        // Preferred classes exhausted; take from any class.
                        let fallback = pools.iter_mut().find(|p| !p.is_empty());
                        match fallback {
                            Some(pool) => shard.push(pool.pop_front().expect("nonempty")),
                            None => unreachable!("k * per_client <= m guarantees enough samples"),
                        }
                    }
                }
                clients.push(shard);
            }
            Ok(clients)
        }
    }
}

/// Materialize [`partition_indices`] into per-client datasets.
pub fn partition(ds: &LabeledDataset, plan: &PartitionPlan) -> Result<Vec<LabeledDataset>> {
    partition_indices(ds, plan)?
        .iter()
        .map(|indices| ds.subset(indices))
        .collect()
}
