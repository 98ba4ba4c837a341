//! Co-training and single-prompt fine-tuning loops.
//!
//! Per sample, ground-truth boxes for every role in scope are perturbed and
//! batched through the model; the training objective keeps only the worst
//! per-prompt loss (co-training) or the sole prompt's loss (single mode).
//! Batch elements are processed independently and reduced in a fixed order,
//! so runs are bit-reproducible regardless of thread count. Validation and
//! evaluation always use unperturbed boxes.

mod compare;
mod eval;

pub use compare::{compare_models, relative_improvement, ComparisonOutputs};
pub use eval::evaluate_model;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::autodiff::{NodeId, Tape};
use crate::data::{DatasetManifest, Sample, Split};
use crate::error::{Error, Result};
use crate::geometry::{mask_to_bbox, perturb_bbox, BBox, PerturbSpec};
use crate::losses::{training_loss_graph, LossBreakdown, LossMode};
use crate::model::{
    decode_masks_graph, encode_image_graph, prompt_tokens_graph, BoundParams, EmbeddingCache,
    ModelConfig, ParamGroup, Parameters,
};
use crate::rng::rng_for;
use crate::tensor::{Scalar, Tensor};

/// Which prompts a training arm sees.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrainMode {
    /// All roles of each sample, worst-prompt gradient.
    Cotrain,
    /// A single role's prompt per sample.
    Single(String),
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<TrainMode> {
        if s == "cotrain" {
            return Ok(TrainMode::Cotrain);
        }
        if let Some(role) = s.strip_prefix("single:") {
            if role.is_empty() {
                return Err(Error::parse("mode", "single: requires a role".to_string()));
            }
            return Ok(TrainMode::Single(role.to_string()));
        }
        Err(Error::parse(
            "mode",
            format!("unknown mode '{s}' (expected cotrain or single:<role>)"),
        ))
    }

    pub fn to_string(&self) -> String {
        match self {
            TrainMode::Cotrain => "cotrain".into(),
            TrainMode::Single(role) => format!("single:{role}"),
        }
    }

    fn loss_mode(&self) -> LossMode {
        match self {
            TrainMode::Cotrain => LossMode::CotrainMax,
            TrainMode::Single(_) => LossMode::Single,
        }
    }

    /// Roles this mode prompts, given a sample's available roles.
    fn roles_for(&self, sample: &Sample) -> Result<Vec<String>> {
        match self {
            TrainMode::Cotrain => Ok(sample.masks.keys().cloned().collect()),
            TrainMode::Single(role) => {
                if sample.masks.contains_key(role) {
                    Ok(vec![role.clone()])
                } else {
                    Err(Error::Validation(format!(
                        "sample {} has no '{role}' mask",
                        sample.case_id
                    )))
                }
            }
        }
    }
}

/// Training hyperparameters. Optimizer is Adam with the standard moment
/// corrections; no weight decay, no schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub perturb: PerturbSpec,
    pub freeze_encoder: bool,
    pub freeze_prompt_encoder: bool,
    pub freeze_decoder: bool,
    /// Run validation every this many epochs (the final epoch always runs).
    pub eval_every: usize,
    /// Where NaN-abort diagnostics are persisted.
    pub checkpoint_dir: Option<PathBuf>,
    pub embedding_cache: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Cotrain,
            epochs: 8,
            batch_size: 4,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            perturb: PerturbSpec::new().with("organ", 5).with("lesion", 2),
            freeze_encoder: true,
            freeze_prompt_encoder: false,
            freeze_decoder: false,
            eval_every: 1,
            checkpoint_dir: None,
            embedding_cache: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidConfig(
                "epochs, batch_size, and eval_every must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0,1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::InvalidConfig("adam_eps must be > 0".into()));
        }
        if self.freeze_decoder && self.freeze_prompt_encoder && self.freeze_encoder {
            return Err(Error::InvalidConfig("all parameter groups frozen".into()));
        }
        Ok(())
    }
}

/// Validation DSC per role; empty when the epoch ran no validation.
pub type ValDsc = BTreeMap<String, f64>;

/// Per-epoch training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_dsc: ValDsc,
}

/// Loop record: one entry per epoch run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub wall_time_secs: f64,
}

impl TrainRecord {
    /// CSV with the fixed header `epoch,train_loss,val_dsc_organ,
    /// val_dsc_lesion`; out-of-scope cells stay empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_dsc_organ,val_dsc_lesion\n");
        for (e, s) in self.epochs.iter().enumerate() {
            let cell = |role: &str| {
                s.val_dsc
                    .get(role)
                    .map(|v| format!("{v:.6}"))
                    .unwrap_or_default()
            };
            let _ = writeln!(
                out,
                "{e},{:.6},{},{}",
                s.train_loss,
                cell("organ"),
                cell("lesion")
            );
        }
        out
    }
}

struct Adam<S: Scalar> {
    m: BTreeMap<String, Tensor<S>>,
    v: BTreeMap<String, Tensor<S>>,
    step: u64,
}

impl<S: Scalar> Adam<S> {
    fn new() -> Self {
        Adam {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }

    /// One update over the (name, gradient) pairs, applied in sorted name
    /// order.
    fn apply(&mut self, params: &mut Parameters<S>, grads: &BTreeMap<String, Tensor<S>>, cfg: &TrainConfig) {
        self.step += 1;
        let lr = S::from_f64(cfg.learning_rate);
        let b1 = S::from_f64(cfg.beta1);
        let b2 = S::from_f64(cfg.beta2);
        let eps = S::from_f64(cfg.adam_eps);
        let c1 = S::one() - S::from_f64(cfg.beta1.powi(self.step as i32));
        let c2 = S::one() - S::from_f64(cfg.beta2.powi(self.step as i32));
        for (name, g) in grads {
            let p = params.tensor_mut(name).expect("gradient for unknown tensor");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = b1 * *mv + (S::one() - b1) * *gv;
                *vv = b2 * *vv + (S::one() - b2) * *gv * *gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Unperturbed ground-truth box per requested role.
pub fn ground_truth_boxes(sample: &Sample, roles: &[String]) -> Result<Vec<BBox>> {
    roles
        .iter()
        .map(|role| {
            let mask = sample.masks.get(role).ok_or_else(|| {
                Error::Validation(format!("sample {} has no '{role}' mask", sample.case_id))
            })?;
            mask_to_bbox(mask)
        })
        .collect()
}

/// Build one sample's loss subgraph: perturbed (or given) boxes through the
/// prompt encoder and decoder, then the gated objective. Returns the loss
/// node, the per-prompt logit channel nodes, and the loss breakdown.
pub fn sample_loss_graph<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams,
    config: &ModelConfig,
    embedding: NodeId,
    sample: &Sample,
    roles: &[String],
    boxes: &[BBox],
    mode: LossMode,
) -> Result<(NodeId, Vec<NodeId>, LossBreakdown<S>)> {
    let prompts = prompt_tokens_graph(tape, bound, config, boxes, config.image_size)?;
    let channels = decode_masks_graph(tape, bound, config, embedding, &prompts)?;
    let targets: Vec<_> = roles
        .iter()
        .map(|r| sample.masks[r].clone())
        .collect();
    let (loss, breakdown) = training_loss_graph(tape, &channels, &targets, mode)?;
    Ok((loss, channels, breakdown))
}

struct SampleGrads<S: Scalar> {
    loss: S,
    grads: BTreeMap<String, Tensor<S>>,
}

/// Forward + backward for one sample on its own tape.
fn sample_grads<S: Scalar>(
    params: &Parameters<S>,
    config: &ModelConfig,
    cache: Option<&EmbeddingCache<S>>,
    sample: &Sample,
    roles: &[String],
    boxes: &[BBox],
    mode: LossMode,
) -> Result<SampleGrads<S>> {
    let mut tape: Tape<S> = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let image: Tensor<S> = sample.image.cast();
    let embedding = match cache {
        Some(c) => {
            let emb = c.get_or_compute(params, config, &image)?;
            tape.constant(emb.tensor)
        }
        None => encode_image_graph(&mut tape, &bound, config, &image)?,
    };
    let (loss, _, _) = sample_loss_graph(&mut tape, &bound, config, embedding, sample, roles, boxes, mode)?;
    let loss_val = tape.value(loss).item();
    if !loss_val.is_finite() {
        return Err(Error::NanLoss(format!("sample {}", sample.case_id)));
    }
    let grad_table = tape.backward(loss)?;
    let mut grads = BTreeMap::new();
    for (name, id) in bound.iter() {
        if tape.requires_grad(id) {
            let g = grad_table.get_or_zeros(id, tape.value(id).shape());
            grads.insert(name.to_string(), g);
        }
    }
    Ok(SampleGrads {
        loss: loss_val,
        grads,
    })
}

/// Train from `params` and return the best-validation parameters plus the
/// record. With identical (seeds, config, data) the result is bit-identical
/// across runs and thread counts.
pub fn train<S: Scalar>(
    params: &Parameters<S>,
    config: &ModelConfig,
    train_cfg: &TrainConfig,
    samples: &[Sample],
    manifest: &DatasetManifest,
    cache: Option<&EmbeddingCache<S>>,
) -> Result<(Parameters<S>, TrainRecord)> {
    config.validate()?;
    train_cfg.validate()?;
    manifest.validate()?;
    let start = Instant::now();

    let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.case_id.as_str(), s)).collect();
    for (id, _) in &manifest.entries {
        let sample = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::Validation(format!("manifest case '{id}' has no sample")))?;
        sample.validate()?;
        if sample.height() != config.image_size || sample.width() != config.image_size {
            return Err(Error::shape(
                format!("sample {id}"),
                format!("{0}x{0}", config.image_size),
                format!("{}x{}", sample.height(), sample.width()),
            ));
        }
    }
    let train_ids = manifest.ids_for(Split::Train);
    if train_ids.is_empty() {
        return Err(Error::Validation("empty train split".into()));
    }
    let val_ids = manifest.ids_for(Split::Val);

    let mut model = params.clone();
    model.set_trainable(ParamGroup::Encoder, !train_cfg.freeze_encoder);
    model.set_trainable(ParamGroup::PromptEncoder, !train_cfg.freeze_prompt_encoder);
    model.set_trainable(ParamGroup::Decoder, !train_cfg.freeze_decoder);

    // the cache is only sound while the encoder is frozen
    let owned_cache;
    let cache = if train_cfg.embedding_cache && train_cfg.freeze_encoder {
        match cache {
            Some(c) => Some(c),
            None => {
                owned_cache = EmbeddingCache::new();
                Some(&owned_cache)
            }
        }
    } else {
        None
    };
    if let Some(c) = cache {
        // precompute every embedding once, in parallel
        let mut ids = train_ids.clone();
        ids.extend(&val_ids);
        ids.par_iter().try_for_each(|id| {
            let image: Tensor<S> = by_id[id].image.cast();
            c.get_or_compute(&model, config, &image).map(|_| ())
        })?;
    }

    let mode = train_cfg.mode.loss_mode();
    let mut adam = Adam::new();
    let mut record = Vec::with_capacity(train_cfg.epochs);
    let mut best: Option<(f64, usize, Parameters<S>)> = None;

    for epoch in 0..train_cfg.epochs {
        let mut order = train_ids.clone();
        order.shuffle(&mut rng_for(train_cfg.seed, "shuffle", epoch as u64));
        let mut perturb_rng = rng_for(train_cfg.seed, "perturb", epoch as u64);

        let mut epoch_loss = 0.0f64;
        for (batch_idx, batch) in order.chunks(train_cfg.batch_size).enumerate() {
            // boxes are drawn serially so the random stream is independent
            // of batch parallelism
            let mut work = Vec::with_capacity(batch.len());
            for id in batch {
                let sample = by_id[id];
                let roles = train_cfg.mode.roles_for(sample)?;
                let gt = ground_truth_boxes(sample, &roles)?;
                let mut boxes = Vec::with_capacity(gt.len());
                for (role, bbox) in roles.iter().zip(&gt) {
                    boxes.push(perturb_bbox(
                        bbox,
                        train_cfg.perturb.radius(role),
                        (sample.height(), sample.width()),
                        &mut perturb_rng,
                    )?);
                }
                work.push((sample, roles, boxes));
            }

            let results: Vec<Result<SampleGrads<S>>> = work
                .par_iter()
                .map(|(sample, roles, boxes)| {
                    sample_grads(&model, config, cache, sample, roles, boxes, mode)
                })
                .collect();

            let mut batch_grads: BTreeMap<String, Tensor<S>> = BTreeMap::new();
            let mut batch_loss = S::zero();
            let scale = S::from_f64(1.0 / batch.len() as f64);
            for (i, res) in results.into_iter().enumerate() {
                let sg = res.map_err(|e| match e {
                    Error::NanLoss(what) => {
                        let diag = format!(
                            "epoch={epoch} batch={batch_idx} cases={} offending={what}\n",
                            batch.join(",")
                        );
                        if let Some(dir) = &train_cfg.checkpoint_dir {
                            let _ = std::fs::create_dir_all(dir);
                            let _ = std::fs::write(dir.join("nan_batch.txt"), &diag);
                        }
                        Error::NanLoss(diag.trim_end().to_string())
                    }
                    other => other,
                })?;
                let _ = i;
                batch_loss += sg.loss;
                for (name, g) in sg.grads {
                    match batch_grads.get_mut(&name) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += *b;
                            }
                        }
                        None => {
                            batch_grads.insert(name, g);
                        }
                    }
                }
            }
            for g in batch_grads.values_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            batch_loss *= scale;
            epoch_loss += batch_loss.as_f64() * batch.len() as f64;

            adam.apply(&mut model, &batch_grads, train_cfg);
        }
        let train_loss = epoch_loss / train_ids.len() as f64;

        let run_val = !val_ids.is_empty()
            && ((epoch + 1) % train_cfg.eval_every == 0 || epoch + 1 == train_cfg.epochs);
        let mut val_dsc = ValDsc::new();
        if run_val {
            let val_samples: Vec<Sample> = val_ids.iter().map(|id| (*by_id[id]).clone()).collect();
            let roles = scope_roles(&train_cfg.mode, &val_samples)?;
            let report = evaluate_model(&model, config, &val_samples, &roles, 1.0, cache)?;
            for agg in &report.aggregates {
                val_dsc.insert(agg.role.clone(), agg.mean[1]);
            }
            let mean_dsc = val_dsc.values().sum::<f64>() / val_dsc.len() as f64;
            let improved = match &best {
                Some((best_dsc, _, _)) => mean_dsc > *best_dsc,
                None => true,
            };
            if improved {
                best = Some((mean_dsc, epoch, model.clone()));
            }
        }
        record.push(EpochStats {
            train_loss,
            val_dsc,
        });
    }

    let (best_epoch, best_params) = match best {
        Some((_, e, p)) => (e, p),
        None => (train_cfg.epochs - 1, model),
    };
    Ok((
        best_params,
        TrainRecord {
            epochs: record,
            best_epoch,
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Roles a mode evaluates over a set of samples (sorted union).
pub fn scope_roles(mode: &TrainMode, samples: &[Sample]) -> Result<Vec<String>> {
    match mode {
        TrainMode::Cotrain => {
            let mut roles: Vec<String> = samples
                .iter()
                .flat_map(|s| s.masks.keys().cloned())
                .collect();
            roles.sort();
            roles.dedup();
            Ok(roles)
        }
        TrainMode::Single(role) => Ok(vec![role.clone()]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SyntheticConfig};
    use crate::model::init_model;

    fn toy_dataset(count: usize, seed: u64) -> (Vec<Sample>, DatasetManifest) {
        let cfg = SyntheticConfig {
            count,
            seed,
            ..Default::default()
        };
        generate_dataset(&cfg).unwrap()
    }

    fn fast_cfg(mode: TrainMode, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            mode,
            epochs,
            batch_size: 4,
            learning_rate: 1e-3,
            seed,
            ..Default::default()
        }
    }

    /// Mean training objective over the train split with unperturbed boxes.
    fn objective_on_train(
        params: &Parameters<f32>,
        config: &ModelConfig,
        mode: &TrainMode,
        samples: &[Sample],
        manifest: &DatasetManifest,
    ) -> f64 {
        let by_id: BTreeMap<&str, &Sample> =
            samples.iter().map(|s| (s.case_id.as_str(), s)).collect();
        let mut total = 0.0;
        let ids = manifest.ids_for(Split::Train);
        for id in &ids {
            let sample = by_id[id];
            let roles = mode.roles_for(sample).unwrap();
            let boxes = ground_truth_boxes(sample, &roles).unwrap();
            let mut tape: Tape<f32> = Tape::new();
            let bound = BoundParams::bind_frozen(&mut tape, params);
            let image: Tensor<f32> = sample.image.clone();
            let emb = encode_image_graph(&mut tape, &bound, config, &image).unwrap();
            let (loss, _, _) = sample_loss_graph(
                &mut tape,
                &bound,
                config,
                emb,
                sample,
                &roles,
                &boxes,
                mode.clone().loss_mode_for_test(),
            )
            .unwrap();
            total += tape.value(loss).item() as f64;
        }
        total / ids.len() as f64
    }

    impl TrainMode {
        fn loss_mode_for_test(self) -> LossMode {
            self.loss_mode()
        }
    }

    #[test]
    fn one_epoch_reduces_training_loss() {
        let (samples, mut manifest) = toy_dataset(4, 11);
        // all four samples in train
        for e in &mut manifest.entries {
            e.1 = Split::Train;
        }
        let mcfg = ModelConfig::default();
        let params = init_model::<f32>(&mcfg, 1).unwrap();
        let tcfg = fast_cfg(TrainMode::Cotrain, 1, 5);
        let before = objective_on_train(&params, &mcfg, &tcfg.mode, &samples, &manifest);
        let (trained, record) = train(&params, &mcfg, &tcfg, &samples, &manifest, None).unwrap();
        let after = objective_on_train(&trained, &mcfg, &tcfg.mode, &samples, &manifest);
        assert!(
            after < before,
            "training objective did not decrease: {before} -> {after}"
        );
        assert_eq!(record.epochs.len(), 1);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let (samples, manifest) = toy_dataset(12, 3);
        let mcfg = ModelConfig::default();
        let params = init_model::<f32>(&mcfg, 2).unwrap();
        let tcfg = fast_cfg(TrainMode::Cotrain, 2, 7);
        let (p1, r1) = train(&params, &mcfg, &tcfg, &samples, &manifest, None).unwrap();
        let (p2, r2) = train(&params, &mcfg, &tcfg, &samples, &manifest, None).unwrap();
        for (name, t) in p1.tensors() {
            assert!(t.bit_eq(p2.get(name).unwrap()), "{name} differs");
        }
        assert_eq!(r1.epochs, r2.epochs);
        assert_eq!(r1.best_epoch, r2.best_epoch);
        assert_eq!(r1.to_csv(), r2.to_csv());
    }

    #[test]
    fn frozen_encoder_bits_never_change() {
        let (samples, manifest) = toy_dataset(8, 4);
        let mcfg = ModelConfig::default();
        let params = init_model::<f32>(&mcfg, 3).unwrap();
        let tcfg = fast_cfg(TrainMode::Cotrain, 2, 9);
        let (trained, _) = train(&params, &mcfg, &tcfg, &samples, &manifest, None).unwrap();
        for name in params.names_in(ParamGroup::Encoder) {
            assert!(
                params.get(name).unwrap().bit_eq(trained.get(name).unwrap()),
                "encoder tensor {name} changed"
            );
        }
        // trainable groups did change
        assert!(!params
            .get("decoder.mask_token")
            .unwrap()
            .bit_eq(trained.get("decoder.mask_token").unwrap()));
        assert!(!params
            .get("prompt_encoder.corner_embed")
            .unwrap()
            .bit_eq(trained.get("prompt_encoder.corner_embed").unwrap()));
    }

    #[test]
    fn single_mode_prompts_only_its_role() {
        let (samples, manifest) = toy_dataset(8, 5);
        let mcfg = ModelConfig::default();
        let params = init_model::<f32>(&mcfg, 3).unwrap();
        let tcfg = fast_cfg(TrainMode::Single("lesion".into()), 1, 9);
        let (_, record) = train(&params, &mcfg, &tcfg, &samples, &manifest, None).unwrap();
        let last = record.epochs.last().unwrap();
        assert!(last.val_dsc.contains_key("lesion"));
        assert!(!last.val_dsc.contains_key("organ"));
    }

    #[test]
    fn cotrain_step_gradient_is_gated_per_sample() {
        // instrument one sample graph exactly as the train loop builds it
        let (samples, _) = toy_dataset(2, 6);
        let mcfg = ModelConfig::default();
        let mut params = init_model::<f32>(&mcfg, 4).unwrap();
        params.set_trainable(ParamGroup::Encoder, false);
        let sample = &samples[0];
        let roles = TrainMode::Cotrain.roles_for(sample).unwrap();
        let boxes = ground_truth_boxes(sample, &roles).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params);
        let image: Tensor<f32> = sample.image.clone();
        let emb = encode_image_graph(&mut tape, &bound, &mcfg, &image).unwrap();
        let (loss, channels, breakdown) = sample_loss_graph(
            &mut tape,
            &bound,
            &mcfg,
            emb,
            sample,
            &roles,
            &boxes,
            LossMode::CotrainMax,
        )
        .unwrap();
        let grads = tape.backward(loss).unwrap();
        for (i, &ch) in channels.iter().enumerate() {
            let g = grads.get(ch);
            if i == breakdown.selected_index {
                assert!(g.is_some());
            } else {
                assert!(
                    g.is_none() || g.unwrap().data().iter().all(|&v| v == 0.0),
                    "non-selected channel {i} received gradient"
                );
            }
        }
    }

    #[test]
    fn shared_cache_matches_uncached_training() {
        let (samples, manifest) = toy_dataset(8, 7);
        let mcfg = ModelConfig::default();
        let params = init_model::<f32>(&mcfg, 5).unwrap();
        let tcfg = fast_cfg(TrainMode::Cotrain, 1, 2);
        let cache = EmbeddingCache::new();
        let (p1, _) = train(&params, &mcfg, &tcfg, &samples, &manifest, Some(&cache)).unwrap();
        let no_cache_cfg = TrainConfig {
            embedding_cache: false,
            ..tcfg
        };
        let (p2, _) = train(&params, &mcfg, &no_cache_cfg, &samples, &manifest, None).unwrap();
        for (name, t) in p1.tensors() {
            assert!(t.bit_eq(p2.get(name).unwrap()), "{name} differs");
        }
        assert!(!cache.is_empty());
    }

    #[test]
    fn empty_train_split_is_an_error() {
        let (samples, mut manifest) = toy_dataset(4, 8);
        for e in &mut manifest.entries {
            e.1 = Split::Test;
        }
        let mcfg = ModelConfig::default();
        let params = init_model::<f32>(&mcfg, 1).unwrap();
        let err = train(&params, &mcfg, &TrainConfig::default(), &samples, &manifest, None)
            .unwrap_err();
        assert!(matches!(err, Error::Validation(msg) if msg.contains("train split")));
    }

    #[test]
    fn checkpoint_round_trip_reproduces_metrics_exactly() {
        let (samples, manifest) = toy_dataset(8, 9);
        let mcfg = ModelConfig::default();
        let params = init_model::<f32>(&mcfg, 6).unwrap();
        let tcfg = fast_cfg(TrainMode::Cotrain, 1, 3);
        let (trained, _) = train(&params, &mcfg, &tcfg, &samples, &manifest, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        crate::model::save_checkpoint(&trained, &mcfg, &path).unwrap();
        let (loaded, loaded_cfg) = crate::model::load_checkpoint::<f32>(&path).unwrap();

        let val: Vec<Sample> = manifest
            .ids_for(Split::Val)
            .iter()
            .map(|id| samples.iter().find(|s| s.case_id == **id).unwrap().clone())
            .collect();
        let roles = vec!["lesion".to_string(), "organ".to_string()];
        let before = evaluate_model(&trained, &mcfg, &val, &roles, 1.0, None).unwrap();
        let after = evaluate_model(&loaded, &loaded_cfg, &val, &roles, 1.0, None).unwrap();
        assert_eq!(before.to_csv(), after.to_csv());
        assert_eq!(before, after);
    }

    #[test]
    fn nan_loss_aborts_with_diagnostic() {
        let (samples, manifest) = toy_dataset(6, 10);
        let mcfg = ModelConfig::default();
        let mut params = init_model::<f32>(&mcfg, 7).unwrap();
        params
            .tensor_mut("decoder.mask_token")
            .unwrap()
            .data_mut()[0] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        let tcfg = TrainConfig {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..fast_cfg(TrainMode::Cotrain, 1, 1)
        };
        let err = train(&params, &mcfg, &tcfg, &samples, &manifest, None).unwrap_err();
        match err {
            Error::NanLoss(msg) => {
                assert!(msg.contains("epoch=0"), "{msg}");
                let diag = std::fs::read_to_string(dir.path().join("nan_batch.txt")).unwrap();
                assert!(diag.contains("batch=0"));
                assert!(diag.contains("case_"));
            }
            other => panic!("expected NanLoss, got {other}"),
        }
    }

    #[test]
    fn record_csv_shape() {
        let rec = TrainRecord {
            epochs: vec![
                EpochStats {
                    train_loss: 1.25,
                    val_dsc: [("organ".to_string(), 0.5), ("lesion".to_string(), 0.25)]
                        .into_iter()
                        .collect(),
                },
                EpochStats {
                    train_loss: 0.75,
                    val_dsc: ValDsc::new(),
                },
            ],
            best_epoch: 0,
            wall_time_secs: 1.0,
        };
        let csv = rec.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,train_loss,val_dsc_organ,val_dsc_lesion");
        assert_eq!(lines[1], "0,1.250000,0.500000,0.250000");
        assert_eq!(lines[2], "1,0.750000,,");
    }
}
