use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::ViTModel;
use crate::error::Result;
use crate::image::Image;
use crate::rng::stage_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Worst relative error per layer family.
    pub per_group: BTreeMap<String, f64>,
    pub checked: usize,
}

/// Absolute floor in the relative-error denominator, so parameters whose
/// true gradient is ~0 are judged on finite-difference round-off alone.
const DENOM_FLOOR: f64 = 1e-6;

/// Central finite difference of the loss with respect to one parameter.
pub fn finite_difference(model: &ViTModel, image: &Image, label: u8, index: usize, epsilon: f64) -> Result<f64> {
    let mut probe = model.clone();
    let base = probe.params()[index];
    probe.params_mut()[index] = base + epsilon;
    let plus = probe.loss(image, label, None)?;
    probe.params_mut()[index] = base - epsilon;
    let minus = probe.loss(image, label, None)?;
    Ok((plus - minus) / (2.0 * epsilon))
}

/// Compares the analytic gradient with central differences on at least
/// `samples` parameters, spread over every parameter tensor.
pub fn grad_check(
    model: &ViTModel,
    image: &Image,
    label: u8,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut grad = vec![0.0; model.params().len()];
    model.loss_and_grad(image, label, None, 1.0, &mut grad)?;

    let specs = &model.layout().specs;
    let per_spec = samples.div_ceil(specs.len()).max(1);
    let mut rng = stage_rng(seed, "grad-check");
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        per_group: BTreeMap::new(),
        checked: 0,
    };
    for spec in specs {
        let len = spec.len();
        for _ in 0..per_spec.min(len) {
            let index = spec.offset + rng.gen_range(0..len);
            let numeric = finite_difference(model, image, label, index, epsilon)?;
            let analytic = grad[index];
            let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(DENOM_FLOOR);
            let entry = report.per_group.entry(spec.group().to_string()).or_insert(0.0);
            *entry = entry.max(err);
            report.max_relative_error = report.max_relative_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}
