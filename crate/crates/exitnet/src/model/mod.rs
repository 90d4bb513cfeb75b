//! Multi-exit model graph: a chain-CNN backbone with M attached exit heads
//! plus the backbone's own final classifier (exit ordinal M+1).
//!
//! Exit placement is FLOP-equidistant: exit i attaches after the block whose
//! cumulative FLOP count is nearest to i/(M+1) of the backbone total.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{
    count_layer_flops, count_layer_params, forward_layer, output_shape, Cache, LayerKind, LayerSpec,
};
use crate::tensor::Tensor;

/// One backbone stage; exits attach only at block boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneBlock {
    pub layers: Vec<LayerSpec>,
}

/// An early-exit classifier head attached after backbone block `placement`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitHead {
    pub placement: usize,
    pub layers: Vec<LayerSpec>,
}

/// Backbone blocks, M exit heads and the final classifier.
///
/// Exit ordinals are 1-based: ordinals `1..=M` are the early exits in
/// placement order, ordinal `M+1` is the final classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub blocks: Vec<BackboneBlock>,
    pub exits: Vec<ExitHead>,
    pub final_head: Vec<LayerSpec>,
}

/// Declarative backbone description; the default is the reference backbone
/// used by the experiment harness: eight 3x3 conv+ReLU blocks with widths
/// 16,16,32,32,64,64,128,128, max-pooling after blocks 2, 4 and 6, then
/// global average pooling and a dense classifier.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct BackboneSpec {
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub widths: Vec<usize>,
    /// 1-based block indices after which a 2x2/stride-2 max pool is inserted.
    pub pool_after: Vec<usize>,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            input_shape: [1, 28, 28],
            num_classes: 10,
            widths: vec![16, 16, 32, 32, 64, 64, 128, 128],
            pool_after: vec![2, 4, 6],
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::config(
                "backbone needs at least one block".to_string(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::config("need at least two classes".to_string()));
        }
        for &p in &self.pool_after {
            if p == 0 || p > self.widths.len() {
                return Err(Error::config(format!(
                    "pool_after index {p} out of range 1..={}",
                    self.widths.len()
                )));
            }
        }
        Ok(())
    }

    /// Builds the uninitialised backbone blocks and final classifier.
    pub fn build(&self) -> Result<(Vec<BackboneBlock>, Vec<LayerSpec>)> {
        self.validate()?;
        let mut blocks = Vec::with_capacity(self.widths.len());
        let mut c_in = self.input_shape[0];
        for (i, &width) in self.widths.iter().enumerate() {
            let mut layers = vec![
                LayerSpec::conv2d(3, 3, 1, 1, c_in, width, true),
                LayerSpec::relu(),
            ];
            if self.pool_after.contains(&(i + 1)) {
                layers.push(LayerSpec::maxpool(2, 2));
            }
            blocks.push(BackboneBlock { layers });
            c_in = width;
        }
        let final_head = vec![
            LayerSpec::globalavgpool(),
            LayerSpec::dense(c_in, self.num_classes, true),
        ];
        Ok((blocks, final_head))
    }
}

/// Chooses M placement block indices (0-based, "after block j") so that the
/// cumulative backbone FLOPs at each placement is nearest to i/(M+1) of the
/// total. Ties pick the earlier block; colliding exits are pushed one block
/// later. Exact integer arithmetic, so the result is invariant under uniform
/// rescaling of the per-block FLOP counts.
pub fn place_exits(block_flops: &[u64], m: usize) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::config("need at least one exit".to_string()));
    }
    if block_flops.len() < m {
        return Err(Error::config(format!(
            "backbone with {} blocks cannot host {m} distinct exits",
            block_flops.len()
        )));
    }
    let mut cum = Vec::with_capacity(block_flops.len());
    let mut acc: u128 = 0;
    for &f in block_flops {
        acc += f as u128;
        cum.push(acc);
    }
    let total = acc;
    let denom = (m + 1) as u128;
    let mut placements: Vec<usize> = Vec::with_capacity(m);
    for i in 1..=m {
        let target = i as u128 * total; // implicit denominator `denom`
        let mut best = 0usize;
        let mut best_dist = u128::MAX;
        for (j, &c) in cum.iter().enumerate() {
            let dist = (c * denom).abs_diff(target);
            if dist < best_dist {
                best_dist = dist;
                best = j;
            }
        }
        if let Some(&prev) = placements.last() {
            if best <= prev {
                best = prev + 1;
                if best >= block_flops.len() {
                    return Err(Error::config(format!(
                        "backbone too small to host {m} distinct exit placements"
                    )));
                }
            }
        }
        placements.push(best);
    }
    Ok(placements)
}

/// Builds an exit head for a `[C, H, W]` feature map: up to two 3x3/stride-2
/// conv+ReLU stages (a stage is skipped once H or W drops below 3), then
/// global average pooling and a dense projection to `k` classes. Parameters
/// are left uninitialised.
pub fn build_exit_head(feature_shape: &[usize], k: usize) -> Result<Vec<LayerSpec>> {
    let (c, mut h, mut w) = match feature_shape {
        [c, h, w] => (*c, *h, *w),
        _ => {
            return Err(Error::config(format!(
                "exit heads attach to [C, H, W] features, got {feature_shape:?}"
            )))
        }
    };
    let mut layers = Vec::new();
    for _ in 0..2 {
        if h >= 3 && w >= 3 {
            layers.push(LayerSpec::conv2d(3, 3, 2, 0, c, c, true));
            layers.push(LayerSpec::relu());
            h = (h - 3) / 2 + 1;
            w = (w - 3) / 2 + 1;
        }
    }
    layers.push(LayerSpec::globalavgpool());
    layers.push(LayerSpec::dense(c, k, true));
    Ok(layers)
}

/// Per-sample forward trace with activation records for every executed layer;
/// feeds the training backward passes.
#[derive(Debug)]
pub struct ModelTrace {
    pub block_caches: Vec<Vec<Cache>>,
    pub head_caches: Vec<Vec<Cache>>,
    pub final_caches: Vec<Cache>,
    /// Logit vectors in ordinal order; index `i` holds exit `i+1`.
    pub logits: Vec<Vec<f32>>,
}

impl ModelGraph {
    /// Builds a multi-exit model from a backbone spec with FLOP-equidistant
    /// placements and He-initialised parameters (deterministic in `seed`).
    pub fn build(spec: &BackboneSpec, num_exits: usize, seed: u64) -> Result<Self> {
        let (mut blocks, mut final_head) = spec.build()?;
        let mut model = ModelGraph {
            input_shape: spec.input_shape,
            num_classes: spec.num_classes,
            blocks: Vec::new(),
            exits: Vec::new(),
            final_head: Vec::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in &mut blocks {
            for layer in &mut block.layers {
                layer.init_params(&mut rng);
            }
        }
        for layer in &mut final_head {
            layer.init_params(&mut rng);
        }
        model.blocks = blocks;
        model.final_head = final_head;

        let placements = place_exits(&model.block_flops()?, num_exits)?;
        let shapes = model.block_output_shapes()?;
        for &p in &placements {
            let mut layers = build_exit_head(&shapes[p], spec.num_classes)?;
            for layer in &mut layers {
                layer.init_params(&mut rng);
            }
            model.exits.push(ExitHead {
                placement: p,
                layers,
            });
        }
        model.validate()?;
        Ok(model)
    }

    /// Number of early exits (M).
    pub fn num_exits(&self) -> usize {
        self.exits.len()
    }

    /// Number of output locations (M+1).
    pub fn num_outputs(&self) -> usize {
        self.exits.len() + 1
    }

    /// Ordinal of the final classifier (M+1).
    pub fn final_ordinal(&self) -> usize {
        self.exits.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.exits.is_empty() {
            return Err(Error::config(
                "model must carry at least one early exit".to_string(),
            ));
        }
        let mut prev: Option<usize> = None;
        for exit in &self.exits {
            if exit.placement >= self.blocks.len() {
                return Err(Error::config(format!(
                    "exit placement {} out of range for {} blocks",
                    exit.placement,
                    self.blocks.len()
                )));
            }
            if let Some(p) = prev {
                if exit.placement <= p {
                    return Err(Error::config(
                        "exit placements must be strictly increasing".to_string(),
                    ));
                }
            }
            prev = Some(exit.placement);
            match exit.layers.last().map(|l| &l.kind) {
                Some(&LayerKind::Dense { n_out, .. }) if n_out == self.num_classes => {}
                _ => {
                    return Err(Error::config(format!(
                        "every exit head must end in dense(-> {})",
                        self.num_classes
                    )))
                }
            }
        }
        match self.final_head.last().map(|l| &l.kind) {
            Some(&LayerKind::Dense { n_out, .. }) if n_out == self.num_classes => Ok(()),
            _ => Err(Error::config(format!(
                "final classifier must end in dense(-> {})",
                self.num_classes
            ))),
        }
    }

    /// Feature shape after each backbone block.
    pub fn block_output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.to_vec();
        let mut out = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            for layer in &block.layers {
                shape = output_shape(&layer.kind, &shape)?;
            }
            out.push(shape.clone());
        }
        Ok(out)
    }

    /// Forward FLOPs of each backbone block at the model's input shape.
    pub fn block_flops(&self) -> Result<Vec<u64>> {
        let mut shape = self.input_shape.to_vec();
        let mut out = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let mut total = 0u64;
            for layer in &block.layers {
                total += count_layer_flops(&layer.kind, &shape)?;
                shape = output_shape(&layer.kind, &shape)?;
            }
            out.push(total);
        }
        Ok(out)
    }

    fn layers_flops(layers: &[LayerSpec], mut shape: Vec<usize>) -> Result<u64> {
        let mut total = 0u64;
        for layer in layers {
            total += count_layer_flops(&layer.kind, &shape)?;
            shape = output_shape(&layer.kind, &shape)?;
        }
        Ok(total)
    }

    /// Forward FLOPs of one head. Ordinals `1..=M` are exit heads, `M+1` the
    /// final classifier.
    pub fn head_flops(&self, ordinal: usize) -> Result<u64> {
        let shapes = self.block_output_shapes()?;
        if ordinal == self.final_ordinal() {
            let shape = shapes
                .last()
                .cloned()
                .unwrap_or_else(|| self.input_shape.to_vec());
            Self::layers_flops(&self.final_head, shape)
        } else {
            let exit = self.exit_by_ordinal(ordinal)?;
            Self::layers_flops(&exit.layers, shapes[exit.placement].clone())
        }
    }

    /// FLOPs of the direct path to one exit: the backbone prefix up to its
    /// placement plus that head alone.
    pub fn flops_to_exit(&self, ordinal: usize) -> Result<u64> {
        let block_flops = self.block_flops()?;
        let upto = if ordinal == self.final_ordinal() {
            self.blocks.len()
        } else {
            self.exit_by_ordinal(ordinal)?.placement + 1
        };
        Ok(block_flops[..upto].iter().sum::<u64>() + self.head_flops(ordinal)?)
    }

    /// Forward FLOPs of a full multi-exit pass (all blocks plus every head).
    pub fn full_forward_flops(&self) -> Result<u64> {
        let mut total: u64 = self.block_flops()?.iter().sum();
        for ordinal in 1..=self.final_ordinal() {
            total += self.head_flops(ordinal)?;
        }
        Ok(total)
    }

    /// FLOPs actually executed when inference stops at `ordinal` under a
    /// policy that evaluates the selected exits in ascending order: the
    /// backbone prefix, every selected head tried on the way (the taken one
    /// included) and, for the final ordinal, the final classifier.
    pub fn policy_prefix_flops(&self, selected: &[usize], ordinal: usize) -> Result<u64> {
        let block_flops = self.block_flops()?;
        let mut total = 0u64;
        if ordinal == self.final_ordinal() {
            total += block_flops.iter().sum::<u64>();
            for &s in selected {
                total += self.head_flops(s)?;
            }
            total += self.head_flops(ordinal)?;
        } else {
            let placement = self.exit_by_ordinal(ordinal)?.placement;
            total += block_flops[..=placement].iter().sum::<u64>();
            for &s in selected {
                if s <= ordinal {
                    total += self.head_flops(s)?;
                }
            }
        }
        Ok(total)
    }

    pub fn exit_by_ordinal(&self, ordinal: usize) -> Result<&ExitHead> {
        if ordinal == 0 || ordinal > self.exits.len() {
            return Err(Error::config(format!(
                "exit ordinal {ordinal} out of range 1..={}",
                self.exits.len()
            )));
        }
        Ok(&self.exits[ordinal - 1])
    }

    pub fn backbone_params(&self) -> u64 {
        let blocks: u64 = self
            .blocks
            .iter()
            .flat_map(|b| &b.layers)
            .map(|l| count_layer_params(&l.kind))
            .sum();
        let final_head: u64 = self
            .final_head
            .iter()
            .map(|l| count_layer_params(&l.kind))
            .sum();
        blocks + final_head
    }

    pub fn head_params(&self, ordinal: usize) -> Result<u64> {
        let layers = if ordinal == self.final_ordinal() {
            &self.final_head
        } else {
            &self.exit_by_ordinal(ordinal)?.layers
        };
        Ok(layers.iter().map(|l| count_layer_params(&l.kind)).sum())
    }

    /// Parameters on the direct path to one exit (backbone prefix + head).
    pub fn params_to_exit(&self, ordinal: usize) -> Result<u64> {
        let upto = if ordinal == self.final_ordinal() {
            self.blocks.len()
        } else {
            self.exit_by_ordinal(ordinal)?.placement + 1
        };
        let prefix: u64 = self.blocks[..upto]
            .iter()
            .flat_map(|b| &b.layers)
            .map(|l| count_layer_params(&l.kind))
            .sum();
        Ok(prefix + self.head_params(ordinal)?)
    }

    fn forward_layers(layers: &[LayerSpec], input: &Tensor) -> Result<(Tensor, Vec<Cache>)> {
        let mut caches = Vec::with_capacity(layers.len());
        let mut x = input.clone();
        for layer in layers {
            let (out, cache) = forward_layer(layer, &x)?;
            caches.push(cache);
            x = out;
        }
        Ok((x, caches))
    }

    /// Runs the backbone once and every head on the shared features.
    /// Returns M+1 logit vectors in ordinal order.
    pub fn forward_all_exits(&self, input: &Tensor) -> Result<Vec<Vec<f32>>> {
        Ok(self.forward_traced(input)?.logits)
    }

    /// As [`forward_all_exits`](Self::forward_all_exits), keeping activation
    /// records for training.
    pub fn forward_traced(&self, input: &Tensor) -> Result<ModelTrace> {
        if input.shape() != self.input_shape {
            return Err(Error::config(format!(
                "input shape {:?} does not match model input {:?}",
                input.shape(),
                self.input_shape
            )));
        }
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        let mut head_caches: Vec<Vec<Cache>> = Vec::with_capacity(self.exits.len());
        let mut logits: Vec<Vec<f32>> = Vec::with_capacity(self.num_outputs());
        let mut x = input.clone();
        let mut next_exit = 0;
        for (j, block) in self.blocks.iter().enumerate() {
            let (out, caches) = Self::forward_layers(&block.layers, &x)?;
            block_caches.push(caches);
            x = out;
            while next_exit < self.exits.len() && self.exits[next_exit].placement == j {
                let (head_out, caches) = Self::forward_layers(&self.exits[next_exit].layers, &x)?;
                head_caches.push(caches);
                logits.push(head_out.into_data());
                next_exit += 1;
            }
        }
        let (final_out, final_caches) = Self::forward_layers(&self.final_head, &x)?;
        logits.push(final_out.into_data());
        Ok(ModelTrace {
            block_caches,
            head_caches,
            final_caches,
            logits,
        })
    }

    /// Computes only the prefix needed for one exit and returns its logits.
    /// Agrees exactly with the corresponding element of
    /// [`forward_all_exits`](Self::forward_all_exits).
    pub fn forward_to_exit(&self, input: &Tensor, ordinal: usize) -> Result<Vec<f32>> {
        if input.shape() != self.input_shape {
            return Err(Error::config(format!(
                "input shape {:?} does not match model input {:?}",
                input.shape(),
                self.input_shape
            )));
        }
        if ordinal == 0 || ordinal > self.final_ordinal() {
            return Err(Error::config(format!(
                "exit ordinal {ordinal} out of range 1..={}",
                self.final_ordinal()
            )));
        }
        let upto = if ordinal == self.final_ordinal() {
            self.blocks.len()
        } else {
            self.exit_by_ordinal(ordinal)?.placement + 1
        };
        let mut x = input.clone();
        for block in &self.blocks[..upto] {
            for layer in &block.layers {
                let (out, _) = forward_layer(layer, &x)?;
                x = out;
            }
        }
        let layers = if ordinal == self.final_ordinal() {
            &self.final_head
        } else {
            &self.exit_by_ordinal(ordinal)?.layers
        };
        let (out, _) = Self::forward_layers(layers, &x)?;
        Ok(out.into_data())
    }

    /// Visits every parameter tensor in canonical declaration order:
    /// backbone blocks, exit heads by ordinal, final classifier.
    pub fn visit_params<'a>(&'a self, mut f: impl FnMut(&'a Tensor)) {
        let layer_params = |layers: &'a [LayerSpec], f: &mut dyn FnMut(&'a Tensor)| {
            for layer in layers {
                if let Some(w) = &layer.weight {
                    f(w);
                }
                if let Some(b) = &layer.bias {
                    f(b);
                }
            }
        };
        for block in &self.blocks {
            layer_params(&block.layers, &mut f);
        }
        for exit in &self.exits {
            layer_params(&exit.layers, &mut f);
        }
        layer_params(&self.final_head, &mut f);
    }

    /// FNV-1a checksum over backbone + final classifier parameter bytes.
    /// Personalisation must leave this value untouched.
    pub fn frozen_checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |t: &Tensor| {
            for v in t.data() {
                for byte in v.to_le_bytes() {
                    hash ^= byte as u64;
                    hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        };
        for block in &self.blocks {
            for layer in &block.layers {
                if let Some(w) = &layer.weight {
                    eat(w);
                }
                if let Some(b) = &layer.bias {
                    eat(b);
                }
            }
        }
        for layer in &self.final_head {
            if let Some(w) = &layer.weight {
                eat(w);
            }
            if let Some(b) = &layer.bias {
                eat(b);
            }
        }
        hash
    }

    /// Re-randomises all parameters (test helper for perturbation studies).
    pub fn reinit(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in &mut self.blocks {
            for layer in &mut block.layers {
                layer.init_params(&mut rng);
            }
        }
        for layer in &mut self.final_head {
            layer.init_params(&mut rng);
        }
        for exit in &mut self.exits {
            for layer in &mut exit.layers {
                layer.init_params(&mut rng);
            }
        }
    }

    /// Adds `delta` to every parameter of one exit head (test helper for
    /// dataflow-isolation checks).
    pub fn perturb_exit_head(&mut self, ordinal: usize, delta: f32) -> Result<()> {
        if ordinal == 0 || ordinal > self.exits.len() {
            return Err(Error::config(format!(
                "no exit head with ordinal {ordinal}"
            )));
        }
        let head = &mut self.exits[ordinal - 1];
        for layer in &mut head.layers {
            if let Some(w) = &mut layer.weight {
                for v in w.data_mut() {
                    *v += delta;
                }
            }
            if let Some(b) = &mut layer.bias {
                for v in b.data_mut() {
                    *v += delta;
                }
            }
        }
        Ok(())
    }
}
