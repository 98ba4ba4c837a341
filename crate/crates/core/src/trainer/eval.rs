//! Model evaluation with noise-free prompts.

use rayon::prelude::*;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::geometry::binarize_mask;
use crate::metrics::{evaluate_dataset, MetricReport};
use crate::model::{forward_with_embedding, EmbeddingCache, ModelConfig, Parameters};
use crate::tensor::{Scalar, Tensor};

use super::ground_truth_boxes;

/// Evaluate a model over samples: for each sample and role, prompt with the
/// unperturbed ground-truth box, binarize the logits at zero, and score
/// against the ground truth. Per-sample work fans out across threads with an
/// ordered reduction, so the report is deterministic.
pub fn evaluate_model<S: Scalar>(
    params: &Parameters<S>,
    config: &ModelConfig,
    samples: &[Sample],
    roles: &[String],
    tau: f64,
    cache: Option<&EmbeddingCache<S>>,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Validation("evaluate_model: empty split".into()));
    }
    if roles.is_empty() {
        return Err(Error::Validation("evaluate_model: no roles".into()));
    }
    config.validate()?;

    let per_sample: Vec<Vec<(String, String, crate::geometry::Mask2D)>> = samples
        .par_iter()
        .map(|sample| {
            sample.validate()?;
            let role_vec: Vec<String> = roles.to_vec();
            let boxes = ground_truth_boxes(sample, &role_vec)?;
            let image: Tensor<S> = sample.image.cast();
            let embedding = match cache {
                Some(c) => c.get_or_compute(params, config, &image)?,
                None => crate::model::encode_image(params, config, &image)?,
            };
            let logits = forward_with_embedding(params, config, &embedding, &boxes)?;
            let mut rows = Vec::with_capacity(roles.len());
            for (i, role) in roles.iter().enumerate() {
                let mask = binarize_mask(&logits.channel(i), S::zero())?;
                rows.push((sample.case_id.clone(), role.clone(), mask));
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;

    let predictions: Vec<_> = per_sample.into_iter().flatten().collect();
    let references: Vec<_> = samples
        .iter()
        .flat_map(|s| {
            roles
                .iter()
                .map(|role| (s.case_id.clone(), role.clone(), s.masks[role].clone()))
        })
        .collect();
    evaluate_dataset(&predictions, &references, tau)
}
