use serde::{Deserialize, Serialize};

use crate::detection::{token_keys, PrototypeBank, ScoredPatch};
use crate::error::{Error, Result};
use crate::numerics::{euclidean, KnnClassifier, Matrix};
use crate::vit::ActivationRecord;

/// Balanced set of shortcut (positive) and ordinary (negative) key vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyBank {
    pub positives: Matrix,
    pub negatives: Matrix,
    pub k: usize,
}

impl KeyBank {
    pub fn len(&self) -> usize {
        self.positives.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.rows() == 0
    }

    /// Positives then negatives, with labels 1 and 0.
    pub fn stacked(&self) -> Result<(Matrix, Vec<u8>)> {
        let rows: Vec<&[f64]> = self.positives.iter_rows().chain(self.negatives.iter_rows()).collect();
        let labels = std::iter::repeat_n(1u8, self.positives.rows())
            .chain(std::iter::repeat_n(0u8, self.negatives.rows()))
            .collect();
        Ok((Matrix::from_rows(&rows)?, labels))
    }
}

/// Top-`m` prototypes of the shortcut cluster against the `m` lowest-scored
/// patches pooled from the other clusters; `m` shrinks to what both sides
/// can supply.
pub fn build_key_bank(prototypes: &PrototypeBank, shortcut: usize, m: usize, k: usize) -> Result<KeyBank> {
    if shortcut >= prototypes.clusters.len() {
        return Err(Error::invalid(format!("cluster {shortcut} does not exist")));
    }
    let pos: &[ScoredPatch] = &prototypes.clusters[shortcut];
    let mut neg: Vec<&ScoredPatch> = prototypes
        .clusters
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != shortcut)
        .flat_map(|(_, l)| l.iter())
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidState("prototype lists are empty".into()));
    }
    // Ascending score; stable, so equal scores keep cluster then rank order.
    neg.sort_by(|a, b| a.score.total_cmp(&b.score));
    let m = m.min(pos.len()).min(neg.len());
    if m == 0 || k == 0 {
        return Err(Error::invalid("bank size and k must be positive"));
    }
    let positives = Matrix::from_rows(&pos[..m].iter().map(|p| p.patch.key.as_slice()).collect::<Vec<_>>())?;
    let negatives = Matrix::from_rows(&neg[..m].iter().map(|p| p.patch.key.as_slice()).collect::<Vec<_>>())?;
    Ok(KeyBank {
        positives,
        negatives,
        k: k.min(2 * m),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationMask {
    pub image_id: u64,
    /// One flag per token of the record, in record order; true = ablate.
    pub flags: Vec<bool>,
    pub guard_applied: bool,
}

impl AblationMask {
    pub fn any(&self) -> bool {
        self.flags.iter().any(|&f| f)
    }

    pub fn flagged(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

/// Reusable KNN over a bank.
pub struct Flagger {
    points: Matrix,
    labels: Vec<u8>,
    positives: Matrix,
    k: usize,
}

impl Flagger {
    pub fn new(bank: &KeyBank) -> Result<Self> {
        let (points, labels) = bank.stacked()?;
        Ok(Self {
            points,
            labels,
            positives: bank.positives.clone(),
            k: bank.k,
        })
    }

    pub fn flag(&self, record: &ActivationRecord) -> Result<AblationMask> {
        let knn = KnnClassifier::new(&self.points, &self.labels, self.k)?;
        let keys = token_keys(record);
        let mut flags = keys
            .iter()
            .map(|key| knn.predict(key).map(|v| v.label == 1))
            .collect::<Result<Vec<_>>>()?;
        let mut guard_applied = false;
        if !flags.is_empty() && flags.iter().all(|&f| f) {
            let mut best = (f64::NEG_INFINITY, 0);
            for (t, key) in keys.iter().enumerate() {
                let mean =
                    self.positives.iter_rows().map(|p| euclidean(key, p)).sum::<f64>() / self.positives.rows() as f64;
                if mean > best.0 {
                    best = (mean, t);
                }
            }
            flags[best.1] = false;
            guard_applied = true;
        }
        Ok(AblationMask {
            image_id: record.image_id,
            flags,
            guard_applied,
        })
    }
}

/// KNN decision per token against the bank; if every token would go, the
/// one farthest (on average) from the positives is kept.
pub fn flag_patches(record: &ActivationRecord, bank: &KeyBank) -> Result<AblationMask> {
    Flagger::new(bank)?.flag(record)
}
