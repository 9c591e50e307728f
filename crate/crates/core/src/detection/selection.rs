use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{brier, conditional_entropy, entropy, label_counts};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Homogeneity {
    pub global: f64,
    pub per_cluster: Vec<f64>,
}

/// `1 - H(C|K) / H(C)` globally and `1 - H(C|cluster c) / H(C)` per
/// cluster, clamped to [0, 1]; a label-pure population scores 1.
pub fn cluster_homogeneity(labels: &[u8], assignment: &[usize], k: usize) -> Result<Homogeneity> {
    if labels.len() != assignment.len() || labels.is_empty() {
        return Err(Error::invalid(
            "labels and assignment must be non-empty and equally long",
        ));
    }
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let h_c = entropy(&label_counts(&labels))?;
    if h_c == 0.0 {
        return Ok(Homogeneity {
            global: 1.0,
            per_cluster: vec![1.0; k],
        });
    }
    let global = 1.0 - conditional_entropy(&labels, assignment)? / h_c;
    let per_cluster = (0..k)
        .map(|c| {
            let members: Vec<usize> = labels
                .iter()
                .zip(assignment)
                .filter(|(_, &a)| a == c)
                .map(|(&l, _)| l)
                .collect();
            if members.is_empty() {
                return Ok(0.0);
            }
            let h = entropy(&label_counts(&members))?;
            Ok((1.0 - h / h_c).clamp(0.0, 1.0))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Homogeneity {
        global: global.clamp(0.0, 1.0),
        per_cluster,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterBrier {
    pub dominant: u8,
    pub count: usize,
    /// `None` only for an empty cluster.
    pub bd: Option<f64>,
    /// `None` when every member belongs to the dominant class.
    pub bn: Option<f64>,
    pub empty: bool,
}

/// Brier scores of class-1 probabilities, split into dominant-class and
/// other members of each cluster. Majority ties go to class 0.
pub fn cluster_brier(p1: &[f64], labels: &[u8], assignment: &[usize], k: usize) -> Result<Vec<ClusterBrier>> {
    if p1.len() != labels.len() || labels.len() != assignment.len() {
        return Err(Error::invalid("probabilities, labels and assignment differ in length"));
    }
    (0..k)
        .map(|c| {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| assignment[i] == c).collect();
            if idx.is_empty() {
                log::warn!("cluster {c} is empty; skipped in Brier statistics");
                return Ok(ClusterBrier {
                    dominant: 0,
                    count: 0,
                    bd: None,
                    bn: None,
                    empty: true,
                });
            }
            let ones = idx.iter().filter(|&&i| labels[i] == 1).count();
            let dominant = u8::from(ones > idx.len() - ones);
            let split = |dom: bool| -> Result<Option<f64>> {
                let (p, o): (Vec<f64>, Vec<u8>) = idx
                    .iter()
                    .filter(|&&i| (labels[i] == dominant) == dom)
                    .map(|&i| (p1[i], labels[i]))
                    .unzip();
                if p.is_empty() {
                    Ok(None)
                } else {
                    brier(&p, &o).map(Some)
                }
            };
            Ok(ClusterBrier {
                dominant,
                count: idx.len(),
                bd: split(true)?,
                bn: split(false)?,
                empty: false,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionWeights {
    pub homogeneity: f64,
    pub dominant: f64,
    pub non_dominant: f64,
}

impl Default for SelectionWeights {
    fn default() -> Self {
        Self {
            homogeneity: 1.0,
            dominant: 1.0,
            non_dominant: 1.0,
        }
    }
}

impl SelectionWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.homogeneity, self.dominant, self.non_dominant];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().all(|x| *x == 0.0) {
            return Err(Error::invalid(
                "selection weights must be non-negative and not all zero",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub cluster: usize,
    pub count: usize,
    pub homogeneity: f64,
    pub dominant: u8,
    pub bd: Option<f64>,
    pub bn: Option<f64>,
    pub score: f64,
    pub empty: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub cluster: usize,
    pub scores: Vec<f64>,
    /// Set when another cluster reached exactly the same score.
    pub tie: bool,
}

pub fn selection_score(h: f64, bd: Option<f64>, bn: Option<f64>, w: &SelectionWeights) -> f64 {
    let term_d = bd.map_or(0.0, |b| (-b).exp());
    let term_n = bn.map_or(0.0, |b| 1.0 - (-b).exp());
    w.homogeneity * h + w.dominant * term_d + w.non_dominant * term_n
}

/// Combines homogeneity and Brier statistics into per-cluster scores.
pub fn cluster_stats(h: &Homogeneity, briers: &[ClusterBrier], w: &SelectionWeights) -> Vec<ClusterStats> {
    briers
        .iter()
        .enumerate()
        .map(|(c, b)| ClusterStats {
            cluster: c,
            count: b.count,
            homogeneity: h.per_cluster[c],
            dominant: b.dominant,
            bd: b.bd,
            bn: b.bn,
            score: if b.empty {
                f64::NEG_INFINITY
            } else {
                selection_score(h.per_cluster[c], b.bd, b.bn, w)
            },
            empty: b.empty,
        })
        .collect()
}

/// Highest-scoring cluster; exact ties go to the lower index and are flagged.
pub fn select_shortcut_cluster(stats: &[ClusterStats]) -> Result<Selection> {
    if stats.len() < 2 {
        return Err(Error::invalid("selection needs at least two clusters"));
    }
    let scores: Vec<f64> = stats.iter().map(|s| s.score).collect();
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = c;
        }
    }
    let tie = scores.iter().enumerate().any(|(c, &s)| c != best && s == scores[best]);
    if tie {
        log::warn!("clusters tie on the selection score; cluster {best} chosen, expert review advised");
    }
    Ok(Selection {
        cluster: best,
        scores,
        tie,
    })
}
