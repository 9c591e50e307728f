use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{squared_euclidean, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnnVote {
    pub label: u8,
    /// Neighbour votes for label 0 and label 1.
    pub votes: [usize; 2],
}

/// Exact brute-force binary KNN classifier (Euclidean).
#[derive(Clone, Debug)]
pub struct KnnClassifier<'a> {
    points: &'a Matrix,
    labels: &'a [u8],
    k: usize,
}

impl<'a> KnnClassifier<'a> {
    pub fn new(points: &'a Matrix, labels: &'a [u8], k: usize) -> Result<Self> {
        if points.rows() == 0 {
            return Err(Error::InvalidState("KNN bank is empty".into()));
        }
        if labels.len() != points.rows() {
            return Err(Error::invalid("KNN labels and points differ in length"));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::invalid("KNN labels must be binary"));
        }
        if k == 0 || k > points.rows() {
            return Err(Error::invalid(format!("KNN k={k} must be in [1, {}]", points.rows())));
        }
        Ok(Self { points, labels, k })
    }

    /// Majority vote over the `k` nearest bank points. Equidistant
    /// neighbours are ranked by bank index; a tied vote yields label 0.
    pub fn predict(&self, query: &[f64]) -> Result<KnnVote> {
        if query.len() != self.points.cols() {
            return Err(Error::invalid(format!(
                "query has {} dims, bank has {}",
                query.len(),
                self.points.cols()
            )));
        }
        // Keep the k best (distance, index) pairs in ascending order.
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(self.k + 1);
        for i in 0..self.points.rows() {
            let d = squared_euclidean(query, self.points.row(i));
            if best.len() == self.k && d >= best[self.k - 1].0 {
                continue;
            }
            let pos = best.partition_point(|&(bd, _)| bd <= d);
            best.insert(pos, (d, i));
            best.truncate(self.k);
        }
        let mut votes = [0usize; 2];
        for &(_, i) in &best {
            votes[self.labels[i] as usize] += 1;
        }
        let label = u8::from(votes[1] > votes[0]);
        Ok(KnnVote { label, votes })
    }
}

pub fn knn_predict(bank_points: &Matrix, bank_labels: &[u8], query: &[f64], k: usize) -> Result<KnnVote> {
    KnnClassifier::new(bank_points, bank_labels, k)?.predict(query)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_and_tie_rule() {
        let bank = Matrix::from_rows(&[[0.0, 0.0], [2.0, 0.0]]).unwrap();
        let labels = [0u8, 1u8];
        assert_eq!(knn_predict(&bank, &labels, &[2.0, 0.0], 1).unwrap().label, 1);
        let vote = knn_predict(&bank, &labels, &[1.0, 0.0], 2).unwrap();
        assert_eq!(vote.votes, [1, 1]);
        assert_eq!(vote.label, 0);
    }

    #[test]
    fn equidistant_neighbours_prefer_lower_index() {
        let bank = Matrix::from_rows(&[[1.0], [-1.0], [1.0]]).unwrap();
        // Index 0 (label 1) wins over index 1 (label 0) at equal distance.
        let vote = knn_predict(&bank, &[1, 0, 0], &[0.0], 1).unwrap();
        assert_eq!(vote.label, 1);
    }

    #[test]
    fn empty_bank_is_invalid_state() {
        let bank = Matrix::zeros(0, 2);
        assert!(matches!(
            knn_predict(&bank, &[], &[0.0, 0.0], 1),
            Err(Error::InvalidState(_))
        ));
    }
}
