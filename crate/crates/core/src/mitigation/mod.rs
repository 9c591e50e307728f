//! Shortcut mitigation: a balanced key bank from the selected cluster's
//! prototypes, KNN flagging of patch tokens, token removal after the
//! positional embedding, head retraining on the ablated CLS embeddings,
//! and group metrics.

mod bank;
mod head;
mod metrics;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use bank::{build_key_bank, flag_patches, AblationMask, Flagger, KeyBank};
pub use head::{retrain_head, HeadHyper, RetrainedHead};
pub use metrics::{evaluate_groups, GroupAccuracy, GroupMetrics, GROUP_NAMES};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::Matrix;
use crate::rng::stage_rng;
use crate::synth::SampleMeta;
use crate::vit::ViTModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblatedOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub cls_embedding: Vec<f64>,
    pub surviving_positions: Vec<usize>,
}

/// Embeds every patch, drops the flagged ones and classifies the rest.
pub fn ablate_and_classify(model: &ViTModel, image: &Image, mask: &AblationMask) -> Result<AblatedOutput> {
    let tokens = model.embed_patches(image)?;
    if mask.flags.len() != tokens.len() {
        return Err(Error::invalid(format!(
            "mask has {} flags for {} tokens",
            mask.flags.len(),
            tokens.len()
        )));
    }
    let keep: Vec<bool> = mask.flags.iter().map(|f| !f).collect();
    let kept = tokens.retain(&keep);
    let out = model.forward_tokens(&kept)?;
    Ok(AblatedOutput {
        logits: out.logits,
        probs: out.probs,
        cls_embedding: out.cls_embedding,
        surviving_positions: kept.positions,
    })
}

/// Group-balanced subsample (seeded, `min` group size per group) used by
/// the annotation-aware comparator.
pub fn group_balanced_indices(samples: &[SampleMeta], seed: u64) -> Result<Vec<usize>> {
    let mut groups: [Vec<usize>; 4] = Default::default();
    for (i, s) in samples.iter().enumerate() {
        groups[s.group()].push(i);
    }
    let min = groups.iter().map(Vec::len).min().unwrap_or(0);
    if min == 0 {
        return Err(Error::invalid(
            "group-balanced retraining needs every group to be non-empty",
        ));
    }
    let mut rng = stage_rng(seed, "group-balance");
    let mut out = Vec::with_capacity(4 * min);
    for g in groups.iter_mut() {
        g.shuffle(&mut rng);
        out.extend_from_slice(&g[..min]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Retrains the head on a group-balanced subsample of unablated embeddings.
pub fn baseline_group_balanced_retrain(
    embeddings: &Matrix,
    samples: &[SampleMeta],
    init_weight: &[f64],
    init_bias: &[f64],
    hyper: &HeadHyper,
    seed: u64,
) -> Result<RetrainedHead> {
    if embeddings.rows() != samples.len() {
        return Err(Error::invalid("embeddings and samples differ in length"));
    }
    let idx = group_balanced_indices(samples, seed)?;
    let x = embeddings.select_rows(&idx);
    let y: Vec<u8> = idx.iter().map(|&i| samples[i].label).collect();
    retrain_head(&x, &y, init_weight, init_bias, hyper)
}
