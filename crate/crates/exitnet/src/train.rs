//! Training engine: joint global training of backbone + exits, and
//! frozen-backbone personalisation that updates only the exit heads.
//!
//! Personalisation never touches backbone or final-classifier parameters and
//! never backpropagates through backbone blocks, so the final exit keeps the
//! global model's behaviour bit-for-bit as a fail-safe.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layer::{backward_layer, Cache, GradientSet, LayerSpec};
use crate::loss::{per_exit_loss, supervised_loss_grad, PersonalisationConfig};
use crate::model::{ModelGraph, ModelTrace};
use crate::optim::{sgd_step_layer, SgdParams};
use crate::tensor::{argmax, Tensor};

/// Settings for offline training of the global multi-exit model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GlobalTrainConfig {
    /// Per-exit cross-entropy weights, `M+1` entries, final exit last.
    /// `None` picks the defaults: exit i weighted by its placement-FLOP
    /// fraction of the backbone, the final exit weighted 1.
    pub exit_weights: Option<Vec<f64>>,
    pub epochs: usize,
    pub lr: f32,
    /// Step learning-rate schedule: multiply by `lr_decay_factor` every
    /// `lr_decay_every` epochs (0 disables decay).
    pub lr_decay_every: usize,
    pub lr_decay_factor: f32,
    pub momentum: f32,
    pub batch_size: usize,
    /// Train only the exit heads, for pretrained backbones.
    pub freeze_backbone: bool,
    pub seed: u64,
}

impl Default for GlobalTrainConfig {
    fn default() -> Self {
        Self {
            exit_weights: None,
            epochs: 6,
            lr: 0.02,
            lr_decay_every: 4,
            lr_decay_factor: 0.25,
            momentum: 0.9,
            batch_size: 32,
            freeze_backbone: false,
            seed: 0,
        }
    }
}

impl GlobalTrainConfig {
    pub fn validate(&self, num_outputs: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1".to_string()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("learning rate must be > 0".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1".to_string()));
        }
        if let Some(w) = &self.exit_weights {
            if w.len() != num_outputs {
                return Err(Error::config(format!(
                    "expected {num_outputs} exit weights, got {}",
                    w.len()
                )));
            }
            if w.iter().any(|&v| v < 0.0) {
                return Err(Error::config(
                    "exit weights must be nonnegative".to_string(),
                ));
            }
            if w[num_outputs - 1] <= 0.0 {
                return Err(Error::config("final-exit weight must be > 0".to_string()));
            }
        }
        Ok(())
    }
}

/// One per-epoch, per-exit statistics row of a training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub exit_id: usize,
    pub mean_loss: f64,
    pub accuracy: Option<f64>,
}

/// Per-epoch, per-exit training statistics plus optional holdout statistics
/// computed after the final epoch.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
    /// Post-training per-exit (mean loss, accuracy) on a holdout set.
    pub holdout: Vec<(f64, Option<f64>)>,
}

impl TrainLog {
    /// CSV with columns `epoch,exit_id,mean_loss,accuracy`; accuracy is empty
    /// when no labels were available.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,exit_id,mean_loss,accuracy\n");
        for row in &self.rows {
            let acc = row.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{:.6},{}\n",
                row.epoch, row.exit_id, row.mean_loss, acc
            ));
        }
        out
    }
}

/// Which layers a training pass updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    /// Backbone blocks, exit heads and the final classifier.
    Full,
    /// Exit heads 1..=M only; no gradients flow into backbone blocks.
    HeadsOnly,
}

/// Gradient (or momentum) storage congruent with the trained subset of a
/// model's parameters. Backbone/final entries stay empty under
/// [`TrainScope::HeadsOnly`].
#[derive(Debug, Clone)]
struct ModelGrads {
    blocks: Vec<Vec<GradientSet>>,
    heads: Vec<Vec<GradientSet>>,
    final_head: Vec<GradientSet>,
}

impl ModelGrads {
    fn zeros(model: &ModelGraph, scope: TrainScope) -> Self {
        let zero_layers = |layers: &[LayerSpec]| {
            layers
                .iter()
                .map(GradientSet::zeros_like)
                .collect::<Vec<_>>()
        };
        let (blocks, final_head) = match scope {
            TrainScope::Full => (
                model
                    .blocks
                    .iter()
                    .map(|b| zero_layers(&b.layers))
                    .collect(),
                zero_layers(&model.final_head),
            ),
            TrainScope::HeadsOnly => (Vec::new(), Vec::new()),
        };
        Self {
            blocks,
            heads: model.exits.iter().map(|e| zero_layers(&e.layers)).collect(),
            final_head,
        }
    }

    fn add_assign(&mut self, other: &ModelGrads) {
        let add = |a: &mut Vec<Vec<GradientSet>>, b: &Vec<Vec<GradientSet>>| {
            for (la, lb) in a.iter_mut().zip(b) {
                for (ga, gb) in la.iter_mut().zip(lb) {
                    ga.add_assign(gb);
                }
            }
        };
        add(&mut self.blocks, &other.blocks);
        add(&mut self.heads, &other.heads);
        for (ga, gb) in self.final_head.iter_mut().zip(&other.final_head) {
            ga.add_assign(gb);
        }
    }

    fn scale(&mut self, factor: f32) {
        for layers in self.blocks.iter_mut().chain(self.heads.iter_mut()) {
            for g in layers {
                g.scale(factor);
            }
        }
        for g in &mut self.final_head {
            g.scale(factor);
        }
    }

    fn is_finite(&self) -> bool {
        self.blocks
            .iter()
            .chain(self.heads.iter())
            .flatten()
            .all(GradientSet::is_finite)
            && self.final_head.iter().all(GradientSet::is_finite)
    }
}

/// Backpropagates per-exit logit gradients through the traced forward pass.
/// `logit_grads[i]` feeds exit ordinal i+1; `None` contributes nothing.
fn backward_sample(
    model: &ModelGraph,
    trace: &ModelTrace,
    logit_grads: &[Option<Vec<f32>>],
    scope: TrainScope,
) -> Result<ModelGrads> {
    let mut grads = ModelGrads::zeros(model, scope);
    let final_ordinal = model.final_ordinal();

    let backprop_layers = |layers: &[LayerSpec],
                           caches: &[Cache],
                           logit_grad: Vec<f32>,
                           store: Option<&mut Vec<GradientSet>>|
     -> Result<Tensor> {
        let mut g = Tensor::new(vec![logit_grad.len()], logit_grad)?;
        let mut layer_grads: Vec<Option<GradientSet>> = vec![None; layers.len()];
        for idx in (0..layers.len()).rev() {
            let (g_in, g_params) = backward_layer(&layers[idx], &g, &caches[idx])?;
            layer_grads[idx] = Some(g_params);
            g = g_in;
        }
        if let Some(store) = store {
            for (slot, g_params) in store.iter_mut().zip(layer_grads) {
                slot.add_assign(&g_params.expect("grad computed"));
            }
        }
        Ok(g)
    };

    // Exit heads: gradients w.r.t. their placement features.
    let mut feature_grads: Vec<Option<Tensor>> = vec![None; model.exits.len()];
    for (i, exit) in model.exits.iter().enumerate() {
        if let Some(lg) = &logit_grads[i] {
            let g_feat = backprop_layers(
                &exit.layers,
                &trace.head_caches[i],
                lg.clone(),
                Some(&mut grads.heads[i]),
            )?;
            feature_grads[i] = Some(g_feat);
        }
    }

    // Final classifier.
    let mut final_feat_grad: Option<Tensor> = None;
    if let Some(lg) = &logit_grads[final_ordinal - 1] {
        let store = match scope {
            TrainScope::Full => Some(&mut grads.final_head),
            TrainScope::HeadsOnly => None,
        };
        let g = backprop_layers(&model.final_head, &trace.final_caches, lg.clone(), store)?;
        final_feat_grad = Some(g);
    }

    // Backbone walk, only when the backbone itself is trained.
    if scope == TrainScope::Full {
        let shapes = model.block_output_shapes()?;
        let mut running = Tensor::zeros(&shapes[model.blocks.len() - 1]);
        if let Some(g) = final_feat_grad {
            running.add_assign(&g);
        }
        for j in (0..model.blocks.len()).rev() {
            for (i, exit) in model.exits.iter().enumerate() {
                if exit.placement == j {
                    if let Some(g) = &feature_grads[i] {
                        running.add_assign(g);
                    }
                }
            }
            let layers = &model.blocks[j].layers;
            let caches = &trace.block_caches[j];
            let mut layer_grads: Vec<Option<GradientSet>> = vec![None; layers.len()];
            for idx in (0..layers.len()).rev() {
                let (g_in, g_params) = backward_layer(&layers[idx], &running, &caches[idx])?;
                layer_grads[idx] = Some(g_params);
                running = g_in;
            }
            for (slot, g_params) in grads.blocks[j].iter_mut().zip(layer_grads) {
                slot.add_assign(&g_params.expect("grad computed"));
            }
        }
    }

    Ok(grads)
}

/// Applies one SGD step over every trained layer, in canonical order.
fn apply_sgd(
    model: &mut ModelGraph,
    grads: &ModelGrads,
    velocity: &mut ModelGrads,
    opt: SgdParams,
) -> Result<()> {
    for (block, (g_layers, v_layers)) in model
        .blocks
        .iter_mut()
        .zip(grads.blocks.iter().zip(velocity.blocks.iter_mut()))
    {
        for (layer, (g, v)) in block.layers.iter_mut().zip(g_layers.iter().zip(v_layers)) {
            sgd_step_layer(layer, v, g, opt)?;
        }
    }
    for (exit, (g_layers, v_layers)) in model
        .exits
        .iter_mut()
        .zip(grads.heads.iter().zip(velocity.heads.iter_mut()))
    {
        for (layer, (g, v)) in exit.layers.iter_mut().zip(g_layers.iter().zip(v_layers)) {
            sgd_step_layer(layer, v, g, opt)?;
        }
    }
    for (layer, (g, v)) in model
        .final_head
        .iter_mut()
        .zip(grads.final_head.iter().zip(velocity.final_head.iter_mut()))
    {
        sgd_step_layer(layer, v, g, opt)?;
    }
    Ok(())
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    indices
}

/// Per-sample result inside a minibatch.
struct SampleOutcome {
    grads: ModelGrads,
    per_exit_loss: Vec<f64>,
    per_exit_correct: Vec<bool>,
}

/// Default global-training exit weights: placement-FLOP fraction per early
/// exit, 1.0 for the final classifier.
pub fn default_exit_weights(model: &ModelGraph) -> Result<Vec<f64>> {
    let block_flops = model.block_flops()?;
    let total: u64 = block_flops.iter().sum();
    let mut weights = Vec::with_capacity(model.num_outputs());
    for exit in &model.exits {
        let prefix: u64 = block_flops[..=exit.placement].iter().sum();
        weights.push(prefix as f64 / total as f64);
    }
    weights.push(1.0);
    Ok(weights)
}

/// Trains the multi-exit model on labelled generic data, minimising the
/// weighted sum of per-exit cross-entropies.
pub fn train_global(
    model: &mut ModelGraph,
    dataset: &Dataset,
    cfg: &GlobalTrainConfig,
) -> Result<TrainLog> {
    cfg.validate(model.num_outputs())?;
    if dataset.is_empty() {
        return Err(Error::data("training dataset is empty".to_string()));
    }
    let weights = match &cfg.exit_weights {
        Some(w) => w.clone(),
        None => default_exit_weights(model)?,
    };
    let scope = if cfg.freeze_backbone {
        TrainScope::HeadsOnly
    } else {
        TrainScope::Full
    };
    let num_outputs = model.num_outputs();
    let mut velocity = ModelGrads::zeros(model, scope);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let lr = if cfg.lr_decay_every > 0 {
            cfg.lr
                * cfg
                    .lr_decay_factor
                    .powi((epoch / cfg.lr_decay_every) as i32)
        } else {
            cfg.lr
        };
        let opt = SgdParams::new(lr, cfg.momentum)?;
        let order = shuffled_indices(dataset.len(), &mut rng);
        let mut loss_sums = vec![0.0f64; num_outputs];
        let mut correct = vec![0usize; num_outputs];

        for batch in order.chunks(cfg.batch_size) {
            let outcomes: Vec<Result<SampleOutcome>> = batch
                .par_iter()
                .map(|&idx| {
                    let input = dataset.image(idx);
                    let label = dataset.label(idx);
                    let trace = model.forward_traced(&input)?;
                    let mut logit_grads: Vec<Option<Vec<f32>>> = Vec::with_capacity(num_outputs);
                    let mut losses = Vec::with_capacity(num_outputs);
                    let mut corrects = Vec::with_capacity(num_outputs);
                    for (i, logits) in trace.logits.iter().enumerate() {
                        let (loss, mut grad) = supervised_loss_grad(logits, label)?;
                        losses.push(loss);
                        corrects.push(argmax(logits) == label);
                        if weights[i] > 0.0 {
                            let w = weights[i] as f32;
                            for g in &mut grad {
                                *g *= w;
                            }
                            logit_grads.push(Some(grad));
                        } else {
                            logit_grads.push(None);
                        }
                    }
                    let grads = backward_sample(model, &trace, &logit_grads, scope)?;
                    Ok(SampleOutcome {
                        grads,
                        per_exit_loss: losses,
                        per_exit_correct: corrects,
                    })
                })
                .collect();

            let mut batch_grads = ModelGrads::zeros(model, scope);
            for outcome in outcomes {
                let outcome = outcome?;
                batch_grads.add_assign(&outcome.grads);
                for i in 0..num_outputs {
                    loss_sums[i] += outcome.per_exit_loss[i];
                    correct[i] += outcome.per_exit_correct[i] as usize;
                }
            }
            batch_grads.scale(1.0 / batch.len() as f32);
            if !batch_grads.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient in epoch {epoch}"
                )));
            }
            apply_sgd(model, &batch_grads, &mut velocity, opt)?;
        }

        let n = dataset.len() as f64;
        for i in 0..num_outputs {
            if !loss_sums[i].is_finite() {
                return Err(Error::Training(format!("non-finite loss in epoch {epoch}")));
            }
            log.rows.push(TrainLogRow {
                epoch,
                exit_id: i + 1,
                mean_loss: loss_sums[i] / n,
                accuracy: Some(correct[i] as f64 / n),
            });
        }
    }
    Ok(log)
}

/// Personalises the exit heads on user data with the hybrid loss, keeping the
/// backbone and final classifier untouched (frozen-backbone training).
///
/// Gradients flow through exit-head layers only; the log records per-epoch,
/// per-exit mean loss (and accuracy when the mode uses labels). When a
/// calibration holdout is supplied, post-training per-exit statistics on it
/// land in `TrainLog::holdout`.
pub fn personalise_exits(
    model: &mut ModelGraph,
    user_train: &Dataset,
    calib_holdout: Option<&Dataset>,
    cfg: &PersonalisationConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if user_train.is_empty() {
        return Err(Error::data("personalisation dataset is empty".to_string()));
    }
    let num_exits = model.num_exits();
    let num_outputs = model.num_outputs();
    let mut velocity = ModelGrads::zeros(model, TrainScope::HeadsOnly);
    let opt = SgdParams::new(cfg.lr, cfg.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(user_train.len(), &mut rng);
        let mut loss_sums = vec![0.0f64; num_exits];
        let mut correct = vec![0usize; num_exits];

        for batch in order.chunks(cfg.batch_size) {
            let outcomes: Vec<Result<SampleOutcome>> = batch
                .par_iter()
                .map(|&idx| {
                    let input = user_train.image(idx);
                    let label = cfg.needs_labels().then(|| user_train.label(idx));
                    let trace = model.forward_traced(&input)?;
                    let teacher = &trace.logits[num_outputs - 1];
                    let mut logit_grads: Vec<Option<Vec<f32>>> = Vec::with_capacity(num_outputs);
                    let mut losses = Vec::with_capacity(num_exits);
                    let mut corrects = Vec::with_capacity(num_exits);
                    for student in &trace.logits[..num_exits] {
                        let (loss, grad) = per_exit_loss(student, teacher, label, cfg)?;
                        losses.push(loss);
                        corrects.push(argmax(student) == user_train.label(idx));
                        logit_grads.push(Some(grad));
                    }
                    // Final exit is the frozen teacher: no loss, no gradient.
                    logit_grads.push(None);
                    let grads =
                        backward_sample(model, &trace, &logit_grads, TrainScope::HeadsOnly)?;
                    Ok(SampleOutcome {
                        grads,
                        per_exit_loss: losses,
                        per_exit_correct: corrects,
                    })
                })
                .collect();

            let mut batch_grads = ModelGrads::zeros(model, TrainScope::HeadsOnly);
            for outcome in outcomes {
                let outcome = outcome?;
                batch_grads.add_assign(&outcome.grads);
                for i in 0..num_exits {
                    loss_sums[i] += outcome.per_exit_loss[i];
                    correct[i] += outcome.per_exit_correct[i] as usize;
                }
            }
            batch_grads.scale(1.0 / batch.len() as f32);
            if !batch_grads.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient in epoch {epoch}"
                )));
            }
            apply_sgd(model, &batch_grads, &mut velocity, opt)?;
        }

        let n = user_train.len() as f64;
        for i in 0..num_exits {
            if !loss_sums[i].is_finite() {
                return Err(Error::Training(format!("non-finite loss in epoch {epoch}")));
            }
            log.rows.push(TrainLogRow {
                epoch,
                exit_id: i + 1,
                mean_loss: loss_sums[i] / n,
                accuracy: cfg.needs_labels().then_some(correct[i] as f64 / n),
            });
        }
    }

    if let Some(calib) = calib_holdout {
        log.holdout = exit_losses_on(model, calib, cfg)?;
    }
    Ok(log)
}

/// Per-exit (mean personalisation loss, accuracy) on a dataset, without
/// touching any parameters.
pub fn exit_losses_on(
    model: &ModelGraph,
    dataset: &Dataset,
    cfg: &PersonalisationConfig,
) -> Result<Vec<(f64, Option<f64>)>> {
    if dataset.is_empty() {
        return Err(Error::data("empty evaluation dataset".to_string()));
    }
    let num_exits = model.num_exits();
    let per_sample: Vec<Result<(Vec<f64>, Vec<bool>)>> = (0..dataset.len())
        .into_par_iter()
        .map(|idx| {
            let trace = model.forward_all_exits(&dataset.image(idx))?;
            let teacher = trace.last().expect("final logits");
            let label = cfg.needs_labels().then(|| dataset.label(idx));
            let mut losses = Vec::with_capacity(num_exits);
            let mut corrects = Vec::with_capacity(num_exits);
            for student in &trace[..num_exits] {
                losses.push(per_exit_loss(student, teacher, label, cfg)?.0);
                corrects.push(argmax(student) == dataset.label(idx));
            }
            Ok((losses, corrects))
        })
        .collect();
    let mut sums = vec![0.0f64; num_exits];
    let mut correct = vec![0usize; num_exits];
    for entry in per_sample {
        let (losses, corrects) = entry?;
        for i in 0..num_exits {
            sums[i] += losses[i];
            correct[i] += corrects[i] as usize;
        }
    }
    let n = dataset.len() as f64;
    Ok((0..num_exits)
        .map(|i| {
            (
                sums[i] / n,
                cfg.needs_labels().then_some(correct[i] as f64 / n),
            )
        })
        .collect())
}

/// Per-exit top-1 accuracy against dataset labels, all M+1 exits.
pub fn evaluate_exits(model: &ModelGraph, dataset: &Dataset) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::data("empty evaluation dataset".to_string()));
    }
    let num_outputs = model.num_outputs();
    let counts: Vec<Result<Vec<bool>>> = (0..dataset.len())
        .into_par_iter()
        .map(|idx| {
            let outputs = model.forward_all_exits(&dataset.image(idx))?;
            Ok(outputs
                .iter()
                .map(|logits| argmax(logits) == dataset.label(idx))
                .collect())
        })
        .collect();
    let mut correct = vec![0usize; num_outputs];
    for entry in counts {
        for (i, c) in entry?.iter().enumerate() {
            correct[i] += *c as usize;
        }
    }
    Ok(correct
        .iter()
        .map(|&c| c as f64 / dataset.len() as f64)
        .collect())
}

/// Per-early-exit top-1 agreement with the final classifier.
pub fn exit_agreement(model: &ModelGraph, dataset: &Dataset) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::data("empty evaluation dataset".to_string()));
    }
    let num_exits = model.num_exits();
    let counts: Vec<Result<Vec<bool>>> = (0..dataset.len())
        .into_par_iter()
        .map(|idx| {
            let outputs = model.forward_all_exits(&dataset.image(idx))?;
            let teacher = argmax(outputs.last().expect("final logits"));
            Ok(outputs[..num_exits]
                .iter()
                .map(|logits| argmax(logits) == teacher)
                .collect())
        })
        .collect();
    let mut agree = vec![0usize; num_exits];
    for entry in counts {
        for (i, c) in entry?.iter().enumerate() {
            agree[i] += *c as usize;
        }
    }
    Ok(agree
        .iter()
        .map(|&c| c as f64 / dataset.len() as f64)
        .collect())
}

/// Analytic training-cost mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingMode {
    /// Full joint training: forward plus backward (2x forward) over every layer.
    Full,
    /// Frozen-backbone personalisation: full multi-exit forward (the final
    /// exit doubles as teacher) plus backward over exit-head layers only.
    ExitsOnly,
}

/// Analytic FLOP estimate for training over `n_samples` sample passes.
/// Backward work counts as twice the forward FLOPs of each trained layer.
pub fn training_flops(model: &ModelGraph, mode: TrainingMode, n_samples: u64) -> Result<u64> {
    let forward = model.full_forward_flops()?;
    let per_sample = match mode {
        TrainingMode::Full => forward + 2 * forward,
        TrainingMode::ExitsOnly => {
            let mut heads = 0u64;
            for ordinal in 1..=model.num_exits() {
                heads += model.head_flops(ordinal)?;
            }
            forward + 2 * heads
        }
    };
    Ok(per_sample * n_samples)
}
