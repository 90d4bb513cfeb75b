//! Confidence-thresholded early-exit inference.
//!
//! Selected exits are evaluated in ascending order; the first whose top-1
//! softmax (T = 1) strictly exceeds `thr_conf` answers. If none is confident
//! the final classifier answers as a fail-safe, so out-of-distribution inputs
//! keep the global model's behaviour. With `thr_conf = 1` every sample falls
//! through to the fail-safe (finite logits never reach confidence 1); with
//! `thr_conf = 0` the first selected exit always answers.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layer::forward_layer;
use crate::model::ModelGraph;
use crate::tensor::{argmax, softmax, Tensor};

/// Which exits inference may take, and how confident an exit must be.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitPolicy {
    /// Strictly increasing early-exit ordinals (subset of 1..=M). May be
    /// empty, in which case the model behaves as the plain backbone.
    pub selected_exits: Vec<usize>,
    /// Confidence threshold in [0, 1]; strict `>` comparison.
    pub thr_conf: f32,
}

impl ExitPolicy {
    pub fn new(selected_exits: Vec<usize>, thr_conf: f32) -> Result<Self> {
        let policy = Self {
            selected_exits,
            thr_conf,
        };
        policy.check_well_formed()?;
        Ok(policy)
    }

    /// Policy over every early exit of a model.
    pub fn all_exits(model: &ModelGraph, thr_conf: f32) -> Result<Self> {
        Self::new((1..=model.num_exits()).collect(), thr_conf)
    }

    fn check_well_formed(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.thr_conf) {
            return Err(Error::config(format!(
                "thr_conf must be in [0, 1], got {}",
                self.thr_conf
            )));
        }
        if self.selected_exits.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "selected exits must be strictly increasing".to_string(),
            ));
        }
        if self.selected_exits.first().is_some_and(|&e| e == 0) {
            return Err(Error::config("exit ordinals start at 1".to_string()));
        }
        Ok(())
    }

    pub fn validate(&self, model: &ModelGraph) -> Result<()> {
        self.check_well_formed()?;
        if let Some(&last) = self.selected_exits.last() {
            if last > model.num_exits() {
                return Err(Error::config(format!(
                    "policy selects exit {last} but the model has {} early exits",
                    model.num_exits()
                )));
            }
        }
        Ok(())
    }
}

/// How per-sample latency is measured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LatencyModel {
    /// Wall-clock around the executed forward prefix.
    WallClock,
    /// Deterministic latency proportional to executed FLOPs; reproducible
    /// across runs, mirrors the linear FLOPs-to-time behaviour of small CPUs.
    FlopProportional { ns_per_flop: f64 },
}

impl Default for LatencyModel {
    fn default() -> Self {
        // Roughly a 2 GFLOP/s device.
        LatencyModel::FlopProportional { ns_per_flop: 0.5 }
    }
}

/// Outcome of a single early-exit inference.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub predicted: usize,
    /// Ordinal of the exit that answered (M+1 = final classifier).
    pub exit_taken: usize,
    /// Top-1 softmax value of the answering exit.
    pub confidence: f32,
    /// FLOPs actually executed: backbone prefix plus every selected head
    /// tried on the way (final classifier included when it answers).
    pub flops: u64,
    pub latency_us: f64,
}

/// Batch-level aggregate statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSummary {
    /// Fraction of samples answered per ordinal (length M+1, sums to 1).
    pub exit_rates: Vec<f64>,
    pub mean_flops: f64,
    pub mean_latency_us: f64,
    /// Fraction correct against dataset labels.
    pub accuracy: f64,
}

/// Runs one input through the early-exit policy.
pub fn infer(
    model: &ModelGraph,
    input: &Tensor,
    policy: &ExitPolicy,
    latency: LatencyModel,
) -> Result<InferenceResult> {
    policy.validate(model)?;
    let start = Instant::now();
    let mut x = input.clone();
    let mut selected = policy.selected_exits.iter().copied().peekable();
    let mut outcome: Option<(usize, usize, f32)> = None;

    'blocks: for (j, block) in model.blocks.iter().enumerate() {
        for layer in &block.layers {
            let (out, _) = forward_layer(layer, &x)?;
            x = out;
        }
        while let Some(&ordinal) = selected.peek() {
            let exit = model.exit_by_ordinal(ordinal)?;
            if exit.placement != j {
                break;
            }
            selected.next();
            let mut h = x.clone();
            for layer in &exit.layers {
                let (out, _) = forward_layer(layer, &h)?;
                h = out;
            }
            let probs = softmax(h.data(), 1.0)?;
            let predicted = argmax(&probs);
            let confidence = probs[predicted];
            if confidence > policy.thr_conf {
                outcome = Some((predicted, ordinal, confidence));
                break 'blocks;
            }
        }
    }

    let (predicted, exit_taken, confidence) = match outcome {
        Some(o) => o,
        None => {
            for layer in &model.final_head {
                let (out, _) = forward_layer(layer, &x)?;
                x = out;
            }
            let probs = softmax(x.data(), 1.0)?;
            let predicted = argmax(&probs);
            (predicted, model.final_ordinal(), probs[predicted])
        }
    };

    let flops = model.policy_prefix_flops(&policy.selected_exits, exit_taken)?;
    let latency_us = match latency {
        LatencyModel::WallClock => start.elapsed().as_secs_f64() * 1e6,
        LatencyModel::FlopProportional { ns_per_flop } => flops as f64 * ns_per_flop / 1000.0,
    };
    Ok(InferenceResult {
        predicted,
        exit_taken,
        confidence,
        flops,
        latency_us,
    })
}

/// Runs the policy over a whole dataset and aggregates exit rates, mean
/// FLOPs, mean latency and accuracy.
pub fn infer_batch(
    model: &ModelGraph,
    dataset: &Dataset,
    policy: &ExitPolicy,
    latency: LatencyModel,
) -> Result<(Vec<InferenceResult>, BatchSummary)> {
    if dataset.is_empty() {
        return Err(Error::data("empty inference batch".to_string()));
    }
    policy.validate(model)?;
    let results: Vec<Result<InferenceResult>> = (0..dataset.len())
        .into_par_iter()
        .map(|i| infer(model, &dataset.image(i), policy, latency))
        .collect();
    let results: Vec<InferenceResult> = results.into_iter().collect::<Result<_>>()?;
    let summary = summarise(model, &results, &dataset.labels);
    Ok((results, summary))
}

/// Recomputes the aggregate statistics from individual results.
pub fn summarise(
    model: &ModelGraph,
    results: &[InferenceResult],
    labels: &[usize],
) -> BatchSummary {
    let n = results.len() as f64;
    let mut exit_counts = vec![0usize; model.num_outputs()];
    let mut flops_total: u128 = 0;
    let mut latency_total = 0.0f64;
    let mut correct = 0usize;
    for (i, r) in results.iter().enumerate() {
        exit_counts[r.exit_taken - 1] += 1;
        flops_total += r.flops as u128;
        latency_total += r.latency_us;
        if labels.get(i).is_some_and(|&l| l == r.predicted) {
            correct += 1;
        }
    }
    BatchSummary {
        exit_rates: exit_counts.iter().map(|&c| c as f64 / n).collect(),
        mean_flops: flops_total as f64 / n,
        mean_latency_us: latency_total / n,
        accuracy: correct as f64 / n,
    }
}

/// CSV export: `sample_id,exit_taken,confidence,predicted,correct,flops,latency_us`.
/// The `correct` column stays empty when no labels are supplied.
pub fn results_to_csv(results: &[InferenceResult], labels: Option<&[usize]>) -> String {
    let mut out =
        String::from("sample_id,exit_taken,confidence,predicted,correct,flops,latency_us\n");
    for (i, r) in results.iter().enumerate() {
        let correct = match labels {
            Some(ls) => ((ls[i] == r.predicted) as u8).to_string(),
            None => String::new(),
        };
        out.push_str(&format!(
            "{},{},{:.6},{},{},{},{:.3}\n",
            i, r.exit_taken, r.confidence, r.predicted, correct, r.flops, r.latency_us
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_blobs, BlobParams};
    use crate::model::BackboneSpec;

    fn model() -> ModelGraph {
        let spec = BackboneSpec {
            input_shape: [1, 12, 12],
            num_classes: 4,
            widths: vec![4, 8, 8, 16],
            pool_after: vec![2],
        };
        ModelGraph::build(&spec, 2, 33).unwrap()
    }

    fn data(n: usize) -> Dataset {
        let params = BlobParams {
            height: 12,
            width: 12,
            sigma_along: 2.2,
            sigma_perp: 0.9,
            jitter: 1.0,
            noise_std: 0.15,
            distractor_amp: 0.3,
            ..BlobParams::default()
        };
        gen_blobs(4, n, &params, 51).unwrap()
    }

    #[test]
    fn threshold_zero_takes_first_selected_exit() {
        let m = model();
        let ds = data(16);
        let policy = ExitPolicy::all_exits(&m, 0.0).unwrap();
        for i in 0..ds.len() {
            let r = infer(&m, &ds.image(i), &policy, LatencyModel::default()).unwrap();
            assert_eq!(r.exit_taken, 1);
            assert!(r.confidence > 0.0);
        }
    }

    #[test]
    fn threshold_one_always_fails_safe() {
        let m = model();
        let ds = data(16);
        let policy = ExitPolicy::all_exits(&m, 1.0).unwrap();
        for i in 0..ds.len() {
            let r = infer(&m, &ds.image(i), &policy, LatencyModel::default()).unwrap();
            assert_eq!(r.exit_taken, m.final_ordinal());
        }
    }

    #[test]
    fn empty_policy_matches_plain_backbone() {
        let m = model();
        let ds = data(8);
        let policy = ExitPolicy::new(vec![], 0.0).unwrap();
        for i in 0..ds.len() {
            let input = ds.image(i);
            let r = infer(&m, &input, &policy, LatencyModel::default()).unwrap();
            let plain = m.forward_to_exit(&input, m.final_ordinal()).unwrap();
            assert_eq!(r.exit_taken, m.final_ordinal());
            assert_eq!(r.predicted, argmax(&plain));
            // No exit-head work at all: backbone plus final classifier only.
            let expected = m.policy_prefix_flops(&[], m.final_ordinal()).unwrap();
            assert_eq!(r.flops, expected);
        }
    }

    #[test]
    fn exit_ordinal_monotone_in_threshold() {
        let m = model();
        let ds = data(24);
        let grid: Vec<f32> = (0..=20).map(|i| i as f32 / 20.0).collect();
        for i in 0..ds.len() {
            let input = ds.image(i);
            let mut prev = 0usize;
            for &thr in &grid {
                let policy = ExitPolicy::all_exits(&m, thr).unwrap();
                let r = infer(&m, &input, &policy, LatencyModel::default()).unwrap();
                assert!(
                    r.exit_taken >= prev,
                    "sample {i}: exit {} after {} at thr {thr}",
                    r.exit_taken,
                    prev
                );
                prev = r.exit_taken;
            }
        }
    }

    #[test]
    fn flops_match_analytic_prefix_counts() {
        let m = model();
        let ds = data(12);
        let policy = ExitPolicy::new(vec![2], 0.6).unwrap();
        // Independent accounting: blocks up to the taken exit plus heads tried.
        let block_flops = m.block_flops().unwrap();
        for i in 0..ds.len() {
            let r = infer(&m, &ds.image(i), &policy, LatencyModel::default()).unwrap();
            let expected = if r.exit_taken == m.final_ordinal() {
                block_flops.iter().sum::<u64>()
                    + m.head_flops(2).unwrap()
                    + m.head_flops(m.final_ordinal()).unwrap()
            } else {
                let placement = m.exit_by_ordinal(2).unwrap().placement;
                block_flops[..=placement].iter().sum::<u64>() + m.head_flops(2).unwrap()
            };
            assert_eq!(r.flops, expected);
        }
    }

    #[test]
    fn batch_summary_consistency() {
        let m = model();
        let ds = data(32);
        let policy = ExitPolicy::all_exits(&m, 0.5).unwrap();
        let (results, summary) = infer_batch(&m, &ds, &policy, LatencyModel::default()).unwrap();
        assert_eq!(results.len(), ds.len());
        let rate_sum: f64 = summary.exit_rates.iter().sum();
        assert!((rate_sum - 1.0).abs() < 1e-12);
        // Recomputing the summary from the individual results matches exactly.
        let again = summarise(&m, &results, &ds.labels);
        assert_eq!(summary, again);
        // Synthetic latency is FLOP-proportional.
        for r in &results {
            assert!((r.latency_us - r.flops as f64 * 0.5 / 1000.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mean_flops_monotone_in_threshold() {
        let m = model();
        let ds = data(32);
        let mut prev = f64::NEG_INFINITY;
        for thr in [0.0f32, 0.3, 0.6, 0.9, 1.0] {
            let policy = ExitPolicy::all_exits(&m, thr).unwrap();
            let (_, summary) = infer_batch(&m, &ds, &policy, LatencyModel::default()).unwrap();
            assert!(
                summary.mean_flops >= prev,
                "mean flops not monotone at thr {thr}"
            );
            prev = summary.mean_flops;
        }
    }

    #[test]
    fn csv_export_shape() {
        let m = model();
        let ds = data(4);
        let policy = ExitPolicy::all_exits(&m, 0.5).unwrap();
        let (results, _) = infer_batch(&m, &ds, &policy, LatencyModel::default()).unwrap();
        let csv = results_to_csv(&results, Some(&ds.labels));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].starts_with("sample_id,exit_taken,confidence"));
        assert_eq!(lines[1].split(',').count(), 7);
    }

    #[test]
    fn malformed_policies_rejected() {
        let m = model();
        assert!(ExitPolicy::new(vec![2, 1], 0.5).is_err());
        assert!(ExitPolicy::new(vec![1, 1], 0.5).is_err());
        assert!(ExitPolicy::new(vec![0], 0.5).is_err());
        assert!(ExitPolicy::new(vec![1], 1.5).is_err());
        let policy = ExitPolicy::new(vec![1, 2, 3], 0.5).unwrap();
        assert!(policy.validate(&m).is_err()); // model has only 2 exits
    }
}
