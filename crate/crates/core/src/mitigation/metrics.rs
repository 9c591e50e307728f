use serde::{Deserialize, Serialize};

use super::bank::AblationMask;
use crate::error::{Error, Result};
use crate::synth::SampleMeta;

pub const GROUP_NAMES: [&str; 4] = ["y0_plain", "y0_shortcut", "y1_plain", "y1_shortcut"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub group: String,
    pub label: u8,
    pub shortcut: bool,
    pub correct: usize,
    pub total: usize,
    /// Percent; `None` for an empty group.
    pub accuracy: Option<f64>,
}

/// Accuracies in percent over the four (label, shortcut) groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub groups: Vec<GroupAccuracy>,
    /// Minimum over non-empty groups.
    pub wga: f64,
    /// Unweighted mean over non-empty groups.
    pub aga: f64,
    /// Plain accuracy over all samples.
    pub sample_accuracy: f64,
    /// Percent of shortcut-present images with at least one ablated token.
    pub sp_rate: Option<f64>,
    /// Same for shortcut-absent images.
    pub ns_rate: Option<f64>,
}

pub fn evaluate_groups(
    predictions: &[u8],
    samples: &[SampleMeta],
    masks: Option<&[AblationMask]>,
) -> Result<GroupMetrics> {
    if predictions.len() != samples.len() || samples.is_empty() {
        return Err(Error::invalid(
            "predictions and samples must be non-empty and equally long",
        ));
    }
    if let Some(m) = masks {
        if m.len() != samples.len() {
            return Err(Error::invalid("masks and samples differ in length"));
        }
    }
    let mut correct = [0usize; 4];
    let mut total = [0usize; 4];
    for (p, s) in predictions.iter().zip(samples) {
        let g = s.group();
        total[g] += 1;
        if *p == s.label {
            correct[g] += 1;
        }
    }
    let groups: Vec<GroupAccuracy> = (0..4)
        .map(|g| GroupAccuracy {
            group: GROUP_NAMES[g].to_string(),
            label: (g / 2) as u8,
            shortcut: g % 2 == 1,
            correct: correct[g],
            total: total[g],
            accuracy: (total[g] > 0).then(|| 100.0 * correct[g] as f64 / total[g] as f64),
        })
        .collect();
    let defined: Vec<f64> = groups.iter().filter_map(|g| g.accuracy).collect();
    for g in groups.iter().filter(|g| g.accuracy.is_none()) {
        log::warn!("group {} is empty and excluded from WGA/AGA", g.group);
    }
    let wga = defined.iter().cloned().fold(f64::INFINITY, f64::min);
    let aga = defined.iter().sum::<f64>() / defined.len() as f64;
    let sample_accuracy = 100.0 * correct.iter().sum::<usize>() as f64 / samples.len() as f64;

    let (sp_rate, ns_rate) = match masks {
        None => (None, None),
        Some(masks) => {
            let rate = |shortcut: bool| {
                let idx: Vec<usize> = (0..samples.len())
                    .filter(|&i| samples[i].shortcut == shortcut)
                    .collect();
                (!idx.is_empty())
                    .then(|| 100.0 * idx.iter().filter(|&&i| masks[i].any()).count() as f64 / idx.len() as f64)
            };
            (rate(true), rate(false))
        }
    };
    Ok(GroupMetrics {
        groups,
        wga,
        aga,
        sample_accuracy,
        sp_rate,
        ns_rate,
    })
}
