use crate::error::{Error, Result};

/// Shannon entropy (natural log) of a count vector, with `0 ln 0 = 0`.
pub fn entropy(counts: &[usize]) -> Result<f64> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("entropy of all-zero counts"));
    }
    let n = total as f64;
    Ok(counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum())
}

pub fn label_counts(labels: &[usize]) -> Vec<usize> {
    let width = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0; width];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}

/// H(labels | assignment): cluster entropies weighted by cluster size.
pub fn conditional_entropy(labels: &[usize], assignment: &[usize]) -> Result<f64> {
    if labels.len() != assignment.len() {
        return Err(Error::invalid("labels and assignment differ in length"));
    }
    if labels.is_empty() {
        return Err(Error::invalid("conditional entropy of an empty sample"));
    }
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    let n_clusters = assignment.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; n_labels]; n_clusters];
    for (&l, &c) in labels.iter().zip(assignment) {
        table[c][l] += 1;
    }
    let n = labels.len() as f64;
    let mut h = 0.0;
    for row in &table {
        let size: usize = row.iter().sum();
        if size > 0 {
            h += size as f64 / n * entropy(row)?;
        }
    }
    Ok(h)
}

/// Mean squared difference between predicted probabilities and 0/1 outcomes.
pub fn brier(probs: &[f64], outcomes: &[u8]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::invalid("Brier score of empty input"));
    }
    if probs.len() != outcomes.len() {
        return Err(Error::invalid("Brier inputs differ in length"));
    }
    let mut sum = 0.0;
    for (&p, &o) in probs.iter().zip(outcomes) {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
        }
        if o > 1 {
            return Err(Error::invalid("Brier outcomes must be 0 or 1"));
        }
        let diff = p - o as f64;
        sum += diff * diff;
    }
    Ok(sum / probs.len() as f64)
}
