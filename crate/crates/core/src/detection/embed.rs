use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kmeans_with, pca_fit, squared_euclidean, ClusterAssignment, KMeansParams, Matrix, PcaModel};
use crate::vit::ActivationRecord;

/// Mean of the last-layer patch-token embeddings (CLS excluded).
pub fn image_embedding(record: &ActivationRecord) -> Result<Vec<f64>> {
    if record.tokens() == 0 {
        return Err(Error::invalid(format!("record {} has no tokens", record.image_id)));
    }
    Ok(record.token_embeddings.column_means())
}

pub fn embedding_matrix(records: &[ActivationRecord]) -> Result<Matrix> {
    let rows = records.iter().map(image_embedding).collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub pca: PcaModel,
    /// Embeddings projected on the principal components.
    pub reduced: Matrix,
    pub assignment: ClusterAssignment,
}

/// PCA to `k_pca` dimensions (clamped to `min(k_pca, n - 1, d)`), then
/// k-means with `k` clusters on the reduced embeddings.
pub fn cluster_images(embeddings: &Matrix, k_pca: usize, k: usize, seed: u64) -> Result<Clustering> {
    let (n, d) = (embeddings.rows(), embeddings.cols());
    if n < k {
        return Err(Error::invalid(format!("{n} images cannot form {k} clusters")));
    }
    let used = k_pca.min(n.saturating_sub(1)).min(d);
    if used < k_pca {
        log::info!("PCA dimension clamped from {k_pca} to {used} (n = {n}, d = {d})");
    }
    let pca = pca_fit(embeddings, k_pca)?;
    let reduced = pca.transform(embeddings)?;
    let assignment = kmeans_with(&reduced, &KMeansParams::new(k, seed))?;
    Ok(Clustering {
        pca,
        reduced,
        assignment,
    })
}

/// For each cluster, the indices of the `n` members nearest its centroid
/// (ties by lower index); smaller clusters return all members.
pub fn representative_samples(assignment: &ClusterAssignment, points: &Matrix, n: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::invalid("representative count must be positive"));
    }
    if points.rows() != assignment.labels.len() {
        return Err(Error::invalid("points and assignment differ in length"));
    }
    Ok((0..assignment.k)
        .map(|c| {
            let centroid = assignment.centroids.row(c);
            let mut members: Vec<(f64, usize)> = assignment
                .members(c)
                .into_iter()
                .map(|i| (squared_euclidean(points.row(i), centroid), i))
                .collect();
            members.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            members.into_iter().take(n).map(|(_, i)| i).collect()
        })
        .collect())
}
