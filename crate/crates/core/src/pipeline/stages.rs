use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use crate::detection::{detect, Detection};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mitigation::{
    ablate_and_classify, baseline_group_balanced_retrain, build_key_bank, evaluate_groups, retrain_head, AblationMask,
    Flagger, GroupMetrics, KeyBank, RetrainedHead,
};
use crate::numerics::Matrix;
use crate::store::{Artifact, ArtifactReader, ArtifactWriter, Tensor};
use crate::synth::{generate, SampleMeta, SynthDataset, SynthSample};
use crate::vit::{export_activations, train, ActivationRecord, ActivationSet, TrainReport, ViTModel};

pub fn generate_data(config: &PipelineConfig) -> Result<SynthDataset> {
    config.validate()?;
    generate(&config.data)
}

pub fn train_model(config: &PipelineConfig, data: &SynthDataset) -> Result<(ViTModel, TrainReport)> {
    let images: Vec<&Image> = data.train.iter().map(|s| &s.image).collect();
    let labels: Vec<u8> = data.train.iter().map(|s| s.meta.label).collect();
    train(&config.vit, &images, &labels, &config.train)
}

fn export(model: &ViTModel, split: &[SynthSample]) -> Result<ActivationSet> {
    let records = export_activations(model, split.iter().enumerate().map(|(i, s)| (i as u64, &s.image)))?;
    Ok(ActivationSet { records })
}

/// Baseline activations of the validation and test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Exports {
    pub val: ActivationSet,
    pub test: ActivationSet,
}

pub fn export_splits(model: &ViTModel, data: &SynthDataset) -> Result<Exports> {
    Ok(Exports {
        val: export(model, &data.val)?,
        test: export(model, &data.test)?,
    })
}

/// Clusters the validation split; group annotations are not consulted.
pub fn run_detection(config: &PipelineConfig, data: &SynthDataset, val: &ActivationSet) -> Result<Detection> {
    let labels: Vec<u8> = data.val.iter().map(|s| s.meta.label).collect();
    detect(&val.records, &labels, &config.detection)
}

/// How the clusters line up with the held-out shortcut annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterCheck {
    pub selected: usize,
    pub sizes: Vec<usize>,
    /// Shortcut-bearing validation images per cluster.
    pub shortcut_counts: Vec<usize>,
    /// Cluster holding the most shortcut-bearing images (ties: lower index).
    pub shortcut_cluster: usize,
    pub selected_matches: bool,
    /// Percent of validation images whose cluster agrees with shortcut
    /// presence when the shortcut cluster is read as "shortcut present".
    pub agreement: f64,
}

pub fn cluster_check(labels: &[usize], k: usize, samples: &[SampleMeta], selected: usize) -> ClusterCheck {
    let mut sizes = vec![0; k];
    let mut counts = vec![0; k];
    for (&c, s) in labels.iter().zip(samples) {
        sizes[c] += 1;
        if s.shortcut {
            counts[c] += 1;
        }
    }
    let mut best = 0;
    for c in 1..k {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    let agree = labels
        .iter()
        .zip(samples)
        .filter(|(&c, s)| (c == best) == s.shortcut)
        .count();
    ClusterCheck {
        selected,
        sizes,
        shortcut_counts: counts,
        shortcut_cluster: best,
        selected_matches: selected == best,
        agreement: 100.0 * agree as f64 / labels.len().max(1) as f64,
    }
}

/// Group metrics of the four evaluated variants on the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cluster: usize,
    pub clusters: ClusterCheck,
    pub baseline: GroupMetrics,
    pub asm_without_retraining: GroupMetrics,
    pub asm: GroupMetrics,
    pub group_balanced_retraining: GroupMetrics,
    pub test_guard_applied: usize,
    pub val_images_ablated: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MitigationResult {
    pub cluster: usize,
    pub bank: KeyBank,
    pub val_masks: Vec<AblationMask>,
    pub test_masks: Vec<AblationMask>,
    pub head: RetrainedHead,
    pub baseline_head: RetrainedHead,
    pub metrics: MetricsReport,
}

struct Ablated {
    cls: Vec<Vec<f64>>,
    predicted: Vec<u8>,
}

/// Ablates every flagged image; unflagged images reuse their baseline
/// record, which is bitwise what the ablated pass would return.
fn ablate_split(
    model: &ViTModel,
    split: &[SynthSample],
    records: &[ActivationRecord],
    masks: &[AblationMask],
) -> Result<Ablated> {
    let mut cls = Vec::with_capacity(split.len());
    let mut predicted = Vec::with_capacity(split.len());
    for ((s, r), m) in split.iter().zip(records).zip(masks) {
        if m.any() {
            let out = ablate_and_classify(model, &s.image, m)?;
            predicted.push(u8::from(out.probs[1] > out.probs[0]));
            cls.push(out.cls_embedding);
        } else {
            predicted.push(r.predicted());
            cls.push(r.cls_embedding.clone());
        }
    }
    Ok(Ablated { cls, predicted })
}

pub fn mitigate(
    config: &PipelineConfig,
    model: &ViTModel,
    data: &SynthDataset,
    exports: &Exports,
    detection: &Detection,
    cluster: usize,
) -> Result<MitigationResult> {
    let k = detection.report.assignment.k;
    if cluster >= k {
        return Err(Error::invalid(format!("cluster {cluster} does not exist (K = {k})")));
    }
    let (val, test) = (&exports.val.records, &exports.test.records);
    if val.len() != data.val.len() || test.len() != data.test.len() {
        return Err(Error::invalid("activations do not match the dataset splits"));
    }
    let bank = build_key_bank(
        &detection.prototypes,
        cluster,
        config.detection.m,
        config.mitigation.knn_k,
    )?;
    let flagger = Flagger::new(&bank)?;
    let val_masks = val.iter().map(|r| flagger.flag(r)).collect::<Result<Vec<_>>>()?;
    let test_masks = test.iter().map(|r| flagger.flag(r)).collect::<Result<Vec<_>>>()?;

    let val_ablated = ablate_split(model, &data.val, val, &val_masks)?;
    let test_ablated = ablate_split(model, &data.test, test, &test_masks)?;

    let (w0, b0) = model.head();
    let val_labels: Vec<u8> = data.val.iter().map(|s| s.meta.label).collect();
    let head = retrain_head(
        &Matrix::from_rows(&val_ablated.cls)?,
        &val_labels,
        &w0,
        &b0,
        &config.mitigation.head,
    )?;

    let val_meta: Vec<SampleMeta> = data.val.iter().map(|s| s.meta.clone()).collect();
    let val_cls: Vec<&[f64]> = val.iter().map(|r| r.cls_embedding.as_slice()).collect();
    let baseline_head = baseline_group_balanced_retrain(
        &Matrix::from_rows(&val_cls)?,
        &val_meta,
        &w0,
        &b0,
        &config.mitigation.head,
        config.detection.seed,
    )?;

    let test_meta: Vec<SampleMeta> = data.test.iter().map(|s| s.meta.clone()).collect();
    let baseline_pred: Vec<u8> = test.iter().map(|r| r.predicted()).collect();
    let asm_pred: Vec<u8> = test_ablated.cls.iter().map(|x| head.predict(x)).collect();
    let dfr_pred: Vec<u8> = test.iter().map(|r| baseline_head.predict(&r.cls_embedding)).collect();

    let metrics = MetricsReport {
        cluster,
        clusters: cluster_check(
            &detection.report.assignment.labels,
            k,
            &val_meta,
            detection.report.selection.cluster,
        ),
        baseline: evaluate_groups(&baseline_pred, &test_meta, None)?,
        asm_without_retraining: evaluate_groups(&test_ablated.predicted, &test_meta, Some(&test_masks))?,
        asm: evaluate_groups(&asm_pred, &test_meta, Some(&test_masks))?,
        group_balanced_retraining: evaluate_groups(&dfr_pred, &test_meta, None)?,
        test_guard_applied: test_masks.iter().filter(|m| m.guard_applied).count(),
        val_images_ablated: val_masks.iter().filter(|m| m.any()).count(),
    };
    Ok(MitigationResult {
        cluster,
        bank,
        val_masks,
        test_masks,
        head,
        baseline_head,
        metrics,
    })
}

fn masks_tensor(masks: &[AblationMask]) -> Result<Tensor> {
    let t = masks.first().map_or(0, |m| m.flags.len());
    if masks.iter().any(|m| m.flags.len() != t) {
        return Err(Error::invalid("masks differ in length"));
    }
    let data = masks
        .iter()
        .flat_map(|m| m.flags.iter().map(|&f| u8::from(f)))
        .collect();
    Tensor::u8(&[masks.len(), t], data)
}

fn masks_from(t: Tensor, ids: Vec<u64>, guards: Vec<u8>) -> Result<Vec<AblationMask>> {
    let dims = t.dims();
    if dims.len() != 2 || dims[0] != ids.len() || guards.len() != ids.len() {
        return Err(Error::invalid("mask tensor disagrees with its id list"));
    }
    let flags = t.into_u8()?;
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(i, image_id)| AblationMask {
            image_id,
            flags: flags[i * dims[1]..(i + 1) * dims[1]].iter().map(|&f| f == 1).collect(),
            guard_applied: guards[i] == 1,
        })
        .collect())
}

fn matrix_tensor(m: &Matrix) -> Result<Tensor> {
    Tensor::f64(&[m.rows(), m.cols()], m.as_slice().to_vec())
}

fn matrix_from(t: Tensor) -> Result<Matrix> {
    let dims = t.dims();
    if dims.len() != 2 {
        return Err(Error::invalid("expected a rank-2 tensor"));
    }
    Matrix::new(dims[0], dims[1], t.into_f64()?)
}

#[derive(Serialize, Deserialize)]
struct MitigationMeta {
    cluster: usize,
    knn_k: usize,
    head_trace: Vec<f64>,
    baseline_head_trace: Vec<f64>,
    dim: usize,
    classes: usize,
    metrics: MetricsReport,
}

impl Artifact for MitigationResult {
    const KIND: &'static str = "mitigation";

    fn write(&self, w: &mut ArtifactWriter) -> Result<()> {
        w.tensor("bank_positives", &matrix_tensor(&self.bank.positives)?)?;
        w.tensor("bank_negatives", &matrix_tensor(&self.bank.negatives)?)?;
        for (name, masks) in [("val", &self.val_masks), ("test", &self.test_masks)] {
            w.tensor(&format!("{name}_masks"), &masks_tensor(masks)?)?;
            w.tensor(
                &format!("{name}_ids"),
                &Tensor::u64(&[masks.len()], masks.iter().map(|m| m.image_id).collect())?,
            )?;
            w.tensor(
                &format!("{name}_guard"),
                &Tensor::u8(
                    &[masks.len()],
                    masks.iter().map(|m| u8::from(m.guard_applied)).collect(),
                )?,
            )?;
        }
        let (d, c) = (self.head.dim, self.head.classes);
        w.tensor("head_weight", &Tensor::f64(&[d, c], self.head.weight.clone())?)?;
        w.tensor("head_bias", &Tensor::f64(&[c], self.head.bias.clone())?)?;
        w.tensor(
            "baseline_head_weight",
            &Tensor::f64(&[d, c], self.baseline_head.weight.clone())?,
        )?;
        w.tensor(
            "baseline_head_bias",
            &Tensor::f64(&[c], self.baseline_head.bias.clone())?,
        )?;
        w.meta(&MitigationMeta {
            cluster: self.cluster,
            knn_k: self.bank.k,
            head_trace: self.head.trace.clone(),
            baseline_head_trace: self.baseline_head.trace.clone(),
            dim: d,
            classes: c,
            metrics: self.metrics.clone(),
        })?;
        let mut json = serde_json::to_vec_pretty(&self.metrics)?;
        json.push(b'\n');
        w.file("metrics.json", &json)
    }

    fn read(r: &ArtifactReader) -> Result<Self> {
        let meta: MitigationMeta = r.meta()?;
        let masks = |name: &str| -> Result<Vec<AblationMask>> {
            masks_from(
                r.tensor(&format!("{name}_masks"))?,
                r.tensor(&format!("{name}_ids"))?.into_u64()?,
                r.tensor(&format!("{name}_guard"))?.into_u8()?,
            )
        };
        let head = |prefix: &str, trace: Vec<f64>| -> Result<RetrainedHead> {
            Ok(RetrainedHead {
                weight: r.tensor(&format!("{prefix}weight"))?.into_f64()?,
                bias: r.tensor(&format!("{prefix}bias"))?.into_f64()?,
                dim: meta.dim,
                classes: meta.classes,
                trace,
            })
        };
        Ok(Self {
            cluster: meta.cluster,
            bank: KeyBank {
                positives: matrix_from(r.tensor("bank_positives")?)?,
                negatives: matrix_from(r.tensor("bank_negatives")?)?,
                k: meta.knn_k,
            },
            val_masks: masks("val")?,
            test_masks: masks("test")?,
            head: head("head_", meta.head_trace.clone())?,
            baseline_head: head("baseline_head_", meta.baseline_head_trace.clone())?,
            metrics: meta.metrics,
        })
    }
}
