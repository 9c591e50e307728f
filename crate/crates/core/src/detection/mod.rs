//! Unsupervised shortcut detection: embed images by their mean token,
//! cluster them, score representative patches by their key-space distance
//! to other clusters, and rank clusters by label homogeneity and Brier
//! statistics.

mod embed;
mod prototypes;
mod selection;

use serde::{Deserialize, Serialize};

pub use embed::{cluster_images, embedding_matrix, image_embedding, representative_samples, Clustering};
pub use prototypes::{patch_key_summary, prototypicality_scores, token_keys, PatchKey, PrototypeBank, ScoredPatch};
pub use selection::{
    cluster_brier, cluster_homogeneity, cluster_stats, select_shortcut_cluster, selection_score, ClusterBrier,
    ClusterStats, Homogeneity, Selection, SelectionWeights,
};

use crate::error::{Error, Result};
use crate::numerics::{ClusterAssignment, Matrix, PcaModel};
use crate::store::{Artifact, ArtifactReader, ArtifactWriter, Tensor};
use crate::vit::ActivationRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionParams {
    pub k_pca: usize,
    pub clusters: usize,
    /// Representative images per cluster.
    pub n: usize,
    /// Prototype patches kept per cluster.
    pub m: usize,
    pub weights: SelectionWeights,
    pub seed: u64,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self {
            k_pca: 50,
            clusters: 2,
            n: 20,
            m: 200,
            weights: SelectionWeights::default(),
            seed: 0,
        }
    }
}

impl DetectionParams {
    pub fn validate(&self) -> Result<()> {
        if self.k_pca == 0 || self.clusters < 2 || self.n == 0 || self.m == 0 {
            return Err(Error::invalid(
                "k_pca, n and m must be positive and clusters at least 2",
            ));
        }
        self.weights.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    /// Image ids of the clustered population, in row order.
    pub image_ids: Vec<u64>,
    pub pca: PcaModel,
    pub reduced: Matrix,
    pub assignment: ClusterAssignment,
    pub homogeneity: Homogeneity,
    pub stats: Vec<ClusterStats>,
    pub selection: Selection,
    /// Representative image ids per cluster, nearest to the centroid first.
    pub representatives: Vec<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub report: ClusterReport,
    pub prototypes: PrototypeBank,
}

/// Runs every detection step on the baseline model's records of the
/// clustering population (the validation split) and its class labels.
pub fn detect(records: &[ActivationRecord], labels: &[u8], params: &DetectionParams) -> Result<Detection> {
    params.validate()?;
    if records.len() != labels.len() {
        return Err(Error::invalid("records and labels differ in length"));
    }
    let embeddings = embedding_matrix(records)?;
    let clustering = cluster_images(&embeddings, params.k_pca, params.clusters, params.seed)?;
    let assignment = &clustering.assignment;
    let reps = representative_samples(assignment, &clustering.reduced, params.n)?;

    let patches: Vec<Vec<PatchKey>> = reps
        .iter()
        .enumerate()
        .map(|(c, idx)| idx.iter().flat_map(|&i| patch_key_summary(&records[i], c)).collect())
        .collect();
    let prototypes = prototypicality_scores(patches, params.n, params.m)?;

    let homogeneity = cluster_homogeneity(labels, &assignment.labels, params.clusters)?;
    let p1: Vec<f64> = records.iter().map(|r| r.p1()).collect();
    let briers = cluster_brier(&p1, labels, &assignment.labels, params.clusters)?;
    let stats = cluster_stats(&homogeneity, &briers, &params.weights);
    let selection = select_shortcut_cluster(&stats)?;

    let image_ids: Vec<u64> = records.iter().map(|r| r.image_id).collect();
    let representatives = reps
        .iter()
        .map(|idx| idx.iter().map(|&i| image_ids[i]).collect())
        .collect();
    Ok(Detection {
        report: ClusterReport {
            image_ids,
            pca: clustering.pca,
            reduced: clustering.reduced,
            assignment: clustering.assignment,
            homogeneity,
            stats,
            selection,
            representatives,
        },
        prototypes,
    })
}

fn matrix_tensor(m: &Matrix) -> Result<Tensor> {
    Tensor::f64(&[m.rows(), m.cols()], m.as_slice().to_vec())
}

fn tensor_matrix(t: Tensor) -> Result<Matrix> {
    let dims = t.dims();
    if dims.len() != 2 {
        return Err(Error::invalid("expected a rank-2 tensor"));
    }
    Matrix::new(dims[0], dims[1], t.into_f64()?)
}

#[derive(Serialize, Deserialize)]
struct ReportMeta {
    image_ids: Vec<u64>,
    explained_variance: Vec<f64>,
    k: usize,
    labels: Vec<usize>,
    inertia: f64,
    inertia_trace: Vec<f64>,
    homogeneity: Homogeneity,
    stats: Vec<ClusterStats>,
    selection: Selection,
    representatives: Vec<Vec<u64>>,
}

impl Artifact for ClusterReport {
    const KIND: &'static str = "clusters";

    fn write(&self, w: &mut ArtifactWriter) -> Result<()> {
        w.tensor("pca_mean", &Tensor::f64(&[self.pca.mean.len()], self.pca.mean.clone())?)?;
        w.tensor("pca_components", &matrix_tensor(&self.pca.components)?)?;
        w.tensor("reduced", &matrix_tensor(&self.reduced)?)?;
        w.tensor("centroids", &matrix_tensor(&self.assignment.centroids)?)?;
        w.meta(&ReportMeta {
            image_ids: self.image_ids.clone(),
            explained_variance: self.pca.explained_variance.clone(),
            k: self.assignment.k,
            labels: self.assignment.labels.clone(),
            inertia: self.assignment.inertia,
            inertia_trace: self.assignment.inertia_trace.clone(),
            homogeneity: self.homogeneity.clone(),
            stats: self.stats.clone(),
            selection: self.selection.clone(),
            representatives: self.representatives.clone(),
        })
    }

    fn read(r: &ArtifactReader) -> Result<Self> {
        let meta: ReportMeta = r.meta()?;
        Ok(Self {
            image_ids: meta.image_ids,
            pca: PcaModel {
                mean: r.tensor("pca_mean")?.into_f64()?,
                components: tensor_matrix(r.tensor("pca_components")?)?,
                explained_variance: meta.explained_variance,
            },
            reduced: tensor_matrix(r.tensor("reduced")?)?,
            assignment: ClusterAssignment {
                k: meta.k,
                labels: meta.labels,
                centroids: tensor_matrix(r.tensor("centroids")?)?,
                inertia: meta.inertia,
                inertia_trace: meta.inertia_trace,
            },
            homogeneity: meta.homogeneity,
            stats: meta.stats,
            selection: meta.selection,
            representatives: meta.representatives,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct BankMeta {
    n: usize,
    m: usize,
    sizes: Vec<usize>,
    key_dim: usize,
}

impl Artifact for PrototypeBank {
    const KIND: &'static str = "prototypes";

    fn write(&self, w: &mut ArtifactWriter) -> Result<()> {
        let key_dim = self.clusters[0].first().map_or(0, |p| p.patch.key.len());
        for (c, list) in self.clusters.iter().enumerate() {
            let mut keys = Vec::with_capacity(list.len() * key_dim);
            for p in list {
                keys.extend_from_slice(&p.patch.key);
            }
            w.tensor(&format!("keys_{c}"), &Tensor::f64(&[list.len(), key_dim], keys)?)?;
            w.tensor(
                &format!("scores_{c}"),
                &Tensor::f64(&[list.len()], list.iter().map(|p| p.score).collect())?,
            )?;
            w.tensor(
                &format!("image_ids_{c}"),
                &Tensor::u64(&[list.len()], list.iter().map(|p| p.patch.image_id).collect())?,
            )?;
            w.tensor(
                &format!("positions_{c}"),
                &Tensor::u32(&[list.len()], list.iter().map(|p| p.patch.position as u32).collect())?,
            )?;
        }
        w.meta(&BankMeta {
            n: self.n,
            m: self.m,
            sizes: self.clusters.iter().map(Vec::len).collect(),
            key_dim,
        })
    }

    fn read(r: &ArtifactReader) -> Result<Self> {
        let meta: BankMeta = r.meta()?;
        let mut clusters = Vec::with_capacity(meta.sizes.len());
        for (c, &len) in meta.sizes.iter().enumerate() {
            let keys = r.tensor(&format!("keys_{c}"))?.into_f64()?;
            let scores = r.tensor(&format!("scores_{c}"))?.into_f64()?;
            let ids = r.tensor(&format!("image_ids_{c}"))?.into_u64()?;
            let pos = r.tensor(&format!("positions_{c}"))?.into_u32()?;
            if scores.len() != len || ids.len() != len || pos.len() != len || keys.len() != len * meta.key_dim {
                return Err(Error::invalid(format!(
                    "prototype cluster {c} has inconsistent lengths"
                )));
            }
            clusters.push(
                (0..len)
                    .map(|i| ScoredPatch {
                        patch: PatchKey {
                            image_id: ids[i],
                            position: pos[i] as usize,
                            cluster: c,
                            key: keys[i * meta.key_dim..(i + 1) * meta.key_dim].to_vec(),
                        },
                        score: scores[i],
                    })
                    .collect(),
            );
        }
        Ok(Self {
            clusters,
            n: meta.n,
            m: meta.m,
        })
    }
}
