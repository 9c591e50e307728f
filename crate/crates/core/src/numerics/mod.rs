//! Deterministic linear algebra and statistics kernels shared by every
//! pipeline stage. Everything is 64-bit and single-threaded; reductions
//! always run in index order so results are reproducible bit for bit.

mod eigen;
mod kmeans;
mod knn;
mod matrix;
mod pca;
mod stats;

pub use eigen::symmetric_eigen;
pub use kmeans::{kmeans, kmeans_with, silhouette_score, silhouette_select_k, ClusterAssignment, KMeansParams};
pub use knn::{knn_predict, KnnClassifier, KnnVote};
pub use matrix::{euclidean, squared_euclidean, Matrix};
pub use pca::{pca_fit, PcaModel};
pub use stats::{brier, conditional_entropy, entropy, label_counts};
