use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::euclidean;
use crate::vit::ActivationRecord;

/// Head-averaged key of one patch token from the last attention block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchKey {
    pub image_id: u64,
    pub position: usize,
    pub cluster: usize,
    pub key: Vec<f64>,
}

/// Per-token mean over heads of the last-block keys.
pub fn token_keys(record: &ActivationRecord) -> Vec<Vec<f64>> {
    let (h, dh) = (record.heads, record.head_dim);
    (0..record.tokens())
        .map(|t| {
            let mut key = vec![0.0; dh];
            for head in 0..h {
                for (k, v) in key.iter_mut().zip(record.key(head, t)) {
                    *k += v;
                }
            }
            key.iter_mut().for_each(|k| *k /= h as f64);
            key
        })
        .collect()
}

pub fn patch_key_summary(record: &ActivationRecord, cluster: usize) -> Vec<PatchKey> {
    token_keys(record)
        .into_iter()
        .zip(&record.token_positions)
        .map(|(key, &position)| PatchKey {
            image_id: record.image_id,
            position,
            cluster,
            key,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPatch {
    pub patch: PatchKey,
    pub score: f64,
}

/// Every scored patch of the representative subsets, per cluster, sorted
/// by descending score (ties keep input order). `top(c)` yields the `m`
/// prototypes; the full lists are kept because the key bank draws its
/// negatives from the low end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub clusters: Vec<Vec<ScoredPatch>>,
    pub n: usize,
    pub m: usize,
}

impl PrototypeBank {
    pub fn top(&self, cluster: usize) -> &[ScoredPatch] {
        let list = &self.clusters[cluster];
        &list[..self.m.min(list.len())]
    }
}

/// Mean Euclidean distance from each patch key to every key of the other
/// clusters, summed in a fixed order.
pub fn prototypicality_scores(patches: Vec<Vec<PatchKey>>, n: usize, m: usize) -> Result<PrototypeBank> {
    if patches.len() < 2 {
        return Err(Error::invalid("prototypicality needs at least two clusters"));
    }
    if patches.iter().any(|p| p.is_empty()) {
        return Err(Error::invalid("every cluster needs at least one representative patch"));
    }
    let mut clusters = Vec::with_capacity(patches.len());
    for (c, own) in patches.iter().enumerate() {
        let others: Vec<&PatchKey> = patches
            .iter()
            .enumerate()
            .filter(|(o, _)| *o != c)
            .flat_map(|(_, p)| p.iter())
            .collect();
        let mut scored: Vec<ScoredPatch> = own
            .iter()
            .map(|p| {
                let sum: f64 = others.iter().map(|q| euclidean(&p.key, &q.key)).sum();
                ScoredPatch {
                    patch: p.clone(),
                    score: sum / others.len() as f64,
                }
            })
            .collect();
        scored.sort_by(|a, b| b.score.total_cmp(&a.score));
        clusters.push(scored);
    }
    Ok(PrototypeBank { clusters, n, m })
}
