//! Profiler and confidence calibration.
//!
//! One forward pass over a calibration set records per-sample, per-exit
//! confidences and correctness; every per-threshold statistic is then derived
//! from the stored records without re-running the model. Calibration performs
//! a Pareto-front analysis over the threshold grid and picks the smallest
//! threshold that keeps accuracy within a drop tolerance of the final
//! classifier, then prunes exits that contribute too little.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::infer::LatencyModel;
use crate::layer::forward_layer;
use crate::model::ModelGraph;
use crate::tensor::{argmax, softmax};

/// What counts as ground truth while profiling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReferenceMode {
    /// Dataset labels.
    HardLabels,
    /// The final classifier's prediction (for label-free devices).
    FinalExitAsTruth,
}

/// Cost/quality statistics of one exit's direct path.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitProfile {
    pub ordinal: usize,
    /// FLOPs of the backbone prefix plus this head alone.
    pub flops: u64,
    /// Parameters on the same direct path.
    pub params: u64,
    pub accuracy: f64,
    pub mean_confidence: f64,
    pub mean_latency_us: f64,
}

/// Early-exit statistics at one confidence threshold (all exits active).
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdProfile {
    pub threshold: f32,
    pub accuracy: f64,
    pub mean_flops: f64,
    pub mean_latency_us: f64,
    /// Fraction of samples answering at each ordinal; sums to 1.
    pub exit_rates: Vec<f64>,
}

/// Everything the calibrator and orchestrator need to know about a model on
/// a calibration set.
#[derive(Debug, Clone)]
pub struct ProfileReport {
    pub reference_mode: ReferenceMode,
    /// Ascending, deduplicated grid.
    pub threshold_grid: Vec<f32>,
    pub per_exit: Vec<ExitProfile>,
    pub per_threshold: Vec<ThresholdProfile>,
    /// Model forward passes spent building this report (one per sample).
    pub forward_passes: usize,
    sample_conf: Vec<Vec<f32>>,
    sample_correct: Vec<Vec<bool>>,
    sample_prefix_us: Vec<Vec<f64>>,
    sample_head_us: Vec<Vec<f64>>,
    prefix_flops: Vec<u64>,
    head_flops: Vec<u64>,
}

/// Aggregate behaviour of a (subset, threshold) policy replayed over the
/// stored per-sample records.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStats {
    pub accuracy: f64,
    pub mean_flops: f64,
    pub mean_latency_us: f64,
    pub exit_rates: Vec<f64>,
    /// Accuracy among the samples each exit captures; `None` when it
    /// captures none.
    pub conditional_accuracy: Vec<Option<f64>>,
}

/// Calibration outcome: the operating threshold, the surviving exits and the
/// expected behaviour at that point.
#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub thr_conf: f32,
    pub selected_exits: Vec<usize>,
    pub expected_accuracy: f64,
    pub expected_latency_us: f64,
    pub reference_accuracy: f64,
    /// Non-dominated (latency_us, accuracy, threshold) triples, by latency.
    pub pareto: Vec<(f64, f64, f32)>,
}

/// Calibration knobs. `tolerance` and `max_accuracy_gap` are absolute
/// accuracy drops (0.01 = one accuracy point).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationParams {
    pub tolerance: f64,
    pub min_exit_rate: f64,
    pub max_accuracy_gap: f64,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        Self {
            tolerance: 0.01,
            min_exit_rate: 0.05,
            max_accuracy_gap: 0.02,
        }
    }
}

/// The default `{0.00, 0.05, ..., 1.00}` threshold grid.
pub fn default_threshold_grid() -> Vec<f32> {
    (0..=20).map(|i| i as f32 / 20.0).collect()
}

/// Profiles a model over a calibration set in a single forward pass per
/// sample, deriving per-exit and per-threshold statistics.
pub fn profile(
    model: &ModelGraph,
    calib: &Dataset,
    threshold_grid: &[f32],
    reference_mode: ReferenceMode,
    latency: LatencyModel,
) -> Result<ProfileReport> {
    if calib.is_empty() {
        return Err(Error::data("calibration set is empty".to_string()));
    }
    let grid = normalise_grid(threshold_grid)?;
    let num_outputs = model.num_outputs();

    // Direct-path cost tables.
    let block_flops = model.block_flops()?;
    let mut prefix_flops = Vec::with_capacity(num_outputs);
    let mut head_flops = Vec::with_capacity(num_outputs);
    for ordinal in 1..=num_outputs {
        let upto = if ordinal == num_outputs {
            model.blocks.len()
        } else {
            model.exit_by_ordinal(ordinal)?.placement + 1
        };
        prefix_flops.push(block_flops[..upto].iter().sum());
        head_flops.push(model.head_flops(ordinal)?);
    }

    struct SampleRecord {
        conf: Vec<f32>,
        correct: Vec<bool>,
        prefix_us: Vec<f64>,
        head_us: Vec<f64>,
    }

    // One timed walk per sample, computing every exit's output.
    let records: Vec<Result<SampleRecord>> = (0..calib.len())
        .into_par_iter()
        .map(|idx| {
            let input = calib.image(idx);
            let mut x = input;
            let mut block_us = Vec::with_capacity(model.blocks.len());
            let mut head_logits: Vec<Vec<f32>> = Vec::with_capacity(num_outputs);
            let mut head_us = vec![0.0f64; num_outputs];
            let mut next_exit = 0;
            for (j, block) in model.blocks.iter().enumerate() {
                let t0 = Instant::now();
                for layer in &block.layers {
                    let (out, _) = forward_layer(layer, &x)?;
                    x = out;
                }
                block_us.push(t0.elapsed().as_secs_f64() * 1e6);
                while next_exit < model.exits.len() && model.exits[next_exit].placement == j {
                    let t0 = Instant::now();
                    let mut h = x.clone();
                    for layer in &model.exits[next_exit].layers {
                        let (out, _) = forward_layer(layer, &h)?;
                        h = out;
                    }
                    head_us[next_exit] = t0.elapsed().as_secs_f64() * 1e6;
                    head_logits.push(h.into_data());
                    next_exit += 1;
                }
            }
            let t0 = Instant::now();
            for layer in &model.final_head {
                let (out, _) = forward_layer(layer, &x)?;
                x = out;
            }
            head_us[num_outputs - 1] = t0.elapsed().as_secs_f64() * 1e6;
            head_logits.push(x.into_data());

            let mut conf = Vec::with_capacity(num_outputs);
            let mut predicted = Vec::with_capacity(num_outputs);
            for logits in &head_logits {
                let probs = softmax(logits, 1.0)?;
                let top = argmax(&probs);
                predicted.push(top);
                conf.push(probs[top]);
            }
            let reference = match reference_mode {
                ReferenceMode::HardLabels => calib.label(idx),
                ReferenceMode::FinalExitAsTruth => predicted[num_outputs - 1],
            };
            let correct = predicted.iter().map(|&p| p == reference).collect();

            // Per-ordinal prefix latency (blocks up to the placement).
            let mut prefix_us = Vec::with_capacity(num_outputs);
            for ordinal in 1..=num_outputs {
                let upto = if ordinal == num_outputs {
                    model.blocks.len()
                } else {
                    model.exits[ordinal - 1].placement + 1
                };
                prefix_us.push(block_us[..upto].iter().sum());
            }
            let (prefix_us, head_us) = match latency {
                LatencyModel::WallClock => (prefix_us, head_us),
                LatencyModel::FlopProportional { ns_per_flop } => (
                    prefix_flops
                        .iter()
                        .map(|&f| f as f64 * ns_per_flop / 1000.0)
                        .collect(),
                    head_flops
                        .iter()
                        .map(|&f| f as f64 * ns_per_flop / 1000.0)
                        .collect(),
                ),
            };
            Ok(SampleRecord {
                conf,
                correct,
                prefix_us,
                head_us,
            })
        })
        .collect();

    let mut sample_conf = Vec::with_capacity(calib.len());
    let mut sample_correct = Vec::with_capacity(calib.len());
    let mut sample_prefix_us = Vec::with_capacity(calib.len());
    let mut sample_head_us = Vec::with_capacity(calib.len());
    for record in records {
        let r = record?;
        sample_conf.push(r.conf);
        sample_correct.push(r.correct);
        sample_prefix_us.push(r.prefix_us);
        sample_head_us.push(r.head_us);
    }

    let mut params = Vec::with_capacity(num_outputs);
    for ordinal in 1..=num_outputs {
        params.push(model.params_to_exit(ordinal)?);
    }

    Ok(ProfileReport::assemble(
        reference_mode,
        grid,
        prefix_flops,
        head_flops,
        params,
        sample_conf,
        sample_correct,
        sample_prefix_us,
        sample_head_us,
        calib.len(),
    ))
}

impl ProfileReport {
    /// Builds a report from raw per-sample records; also the constructor for
    /// synthetic reports in tests. `forward_passes` counts real model passes.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        reference_mode: ReferenceMode,
        threshold_grid: Vec<f32>,
        prefix_flops: Vec<u64>,
        head_flops: Vec<u64>,
        params: Vec<u64>,
        sample_conf: Vec<Vec<f32>>,
        sample_correct: Vec<Vec<bool>>,
        sample_prefix_us: Vec<Vec<f64>>,
        sample_head_us: Vec<Vec<f64>>,
        forward_passes: usize,
    ) -> Self {
        let num_outputs = prefix_flops.len();
        let n = sample_conf.len() as f64;
        let mut report = Self {
            reference_mode,
            threshold_grid,
            per_exit: Vec::new(),
            per_threshold: Vec::new(),
            forward_passes,
            sample_conf,
            sample_correct,
            sample_prefix_us,
            sample_head_us,
            prefix_flops,
            head_flops,
        };

        for i in 0..num_outputs {
            let mut correct = 0usize;
            let mut conf_sum = 0.0f64;
            let mut lat_sum = 0.0f64;
            for s in 0..report.sample_conf.len() {
                correct += report.sample_correct[s][i] as usize;
                conf_sum += report.sample_conf[s][i] as f64;
                lat_sum += report.sample_prefix_us[s][i] + report.sample_head_us[s][i];
            }
            report.per_exit.push(ExitProfile {
                ordinal: i + 1,
                flops: report.prefix_flops[i] + report.head_flops[i],
                params: params[i],
                accuracy: correct as f64 / n,
                mean_confidence: conf_sum / n,
                mean_latency_us: lat_sum / n,
            });
        }

        let all_exits: Vec<usize> = (1..num_outputs).collect();
        let grid = report.threshold_grid.clone();
        for &thr in &grid {
            let stats = report.simulate(&all_exits, thr);
            report.per_threshold.push(ThresholdProfile {
                threshold: thr,
                accuracy: stats.accuracy,
                mean_flops: stats.mean_flops,
                mean_latency_us: stats.mean_latency_us,
                exit_rates: stats.exit_rates,
            });
        }
        report
    }

    pub fn num_outputs(&self) -> usize {
        self.prefix_flops.len()
    }

    pub fn num_samples(&self) -> usize {
        self.sample_conf.len()
    }

    pub fn final_accuracy(&self) -> f64 {
        self.per_exit.last().expect("final exit").accuracy
    }

    /// Replays a (subset, threshold) policy over the stored records, exactly
    /// mirroring the inference engine's exit rule.
    pub fn simulate(&self, selected_exits: &[usize], thr: f32) -> PolicyStats {
        let num_outputs = self.num_outputs();
        let final_ordinal = num_outputs;
        let n = self.sample_conf.len();
        let mut exit_counts = vec![0usize; num_outputs];
        let mut exit_correct = vec![0usize; num_outputs];
        let mut flops_sum: u128 = 0;
        let mut lat_sum = 0.0f64;
        let mut correct_sum = 0usize;

        // Policy-aware cost per taken ordinal: backbone prefix plus every
        // selected head tried on the way.
        let mut policy_flops = vec![0u64; num_outputs];
        for &ordinal in selected_exits.iter().chain(std::iter::once(&final_ordinal)) {
            let mut f = self.prefix_flops[ordinal - 1];
            for &s in selected_exits {
                if s <= ordinal {
                    f += self.head_flops[s - 1];
                }
            }
            if ordinal == final_ordinal {
                f += self.head_flops[final_ordinal - 1];
            }
            policy_flops[ordinal - 1] = f;
        }

        for s in 0..n {
            let conf = &self.sample_conf[s];
            let mut taken = final_ordinal;
            for &ordinal in selected_exits {
                if conf[ordinal - 1] > thr {
                    taken = ordinal;
                    break;
                }
            }
            exit_counts[taken - 1] += 1;
            let correct = self.sample_correct[s][taken - 1];
            exit_correct[taken - 1] += correct as usize;
            correct_sum += correct as usize;
            flops_sum += policy_flops[taken - 1] as u128;

            let mut lat = self.sample_prefix_us[s][taken - 1];
            for &sel in selected_exits {
                if sel <= taken {
                    lat += self.sample_head_us[s][sel - 1];
                }
            }
            if taken == final_ordinal {
                lat += self.sample_head_us[s][final_ordinal - 1];
            }
            lat_sum += lat;
        }

        PolicyStats {
            accuracy: correct_sum as f64 / n as f64,
            mean_flops: flops_sum as f64 / n as f64,
            mean_latency_us: lat_sum / n as f64,
            exit_rates: exit_counts.iter().map(|&c| c as f64 / n as f64).collect(),
            conditional_accuracy: exit_counts
                .iter()
                .zip(&exit_correct)
                .map(|(&c, &k)| (c > 0).then(|| k as f64 / c as f64))
                .collect(),
        }
    }

    /// CSV: `exit_id,flops,params,accuracy,mean_confidence,mean_latency_us`.
    pub fn per_exit_csv(&self) -> String {
        let mut out =
            String::from("exit_id,flops,params,accuracy,mean_confidence,mean_latency_us\n");
        for e in &self.per_exit {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.3}\n",
                e.ordinal, e.flops, e.params, e.accuracy, e.mean_confidence, e.mean_latency_us
            ));
        }
        out
    }

    /// CSV: `threshold,accuracy,mean_flops,mean_latency_us,rate_exit_1,...`.
    pub fn per_threshold_csv(&self) -> String {
        let mut out = String::from("threshold,accuracy,mean_flops,mean_latency_us");
        for i in 1..=self.num_outputs() {
            out.push_str(&format!(",rate_exit_{i}"));
        }
        out.push('\n');
        for t in &self.per_threshold {
            out.push_str(&format!(
                "{:.2},{:.6},{:.1},{:.3}",
                t.threshold, t.accuracy, t.mean_flops, t.mean_latency_us
            ));
            for r in &t.exit_rates {
                out.push_str(&format!(",{r:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

fn normalise_grid(grid: &[f32]) -> Result<Vec<f32>> {
    if grid.is_empty() {
        return Err(Error::config("threshold grid is empty".to_string()));
    }
    if grid.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        return Err(Error::config("thresholds must lie in [0, 1]".to_string()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite thresholds"));
    grid.dedup();
    Ok(grid)
}

/// Indices of the non-dominated points in (latency, accuracy) space, sorted
/// by latency. A point survives iff no other point has latency <= and
/// accuracy >= with at least one strict; exact duplicates keep their first
/// occurrence in input order.
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<usize> {
    if points.is_empty() {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .0
            .partial_cmp(&points[b].0)
            .expect("finite latency")
            .then(
                points[b]
                    .1
                    .partial_cmp(&points[a].1)
                    .expect("finite accuracy"),
            )
            .then(a.cmp(&b))
    });
    let mut front = Vec::new();
    let mut best_acc = f64::NEG_INFINITY;
    let mut last_kept: Option<(f64, f64)> = None;
    for &idx in &order {
        let (lat, acc) = points[idx];
        if last_kept == Some((lat, acc)) {
            continue; // exact duplicate of a kept point
        }
        if acc > best_acc {
            front.push(idx);
            best_acc = acc;
            last_kept = Some((lat, acc));
        }
    }
    front
}

/// Picks the smallest grid threshold whose overall accuracy stays within
/// `tolerance` of the final classifier; falls back to 1.0 (pure fail-safe)
/// when none qualifies. Afterwards prunes exits at the chosen threshold and
/// reports the expected operating point of the surviving policy.
pub fn calibrate_threshold(
    report: &ProfileReport,
    params: &CalibrationParams,
) -> Result<CalibrationResult> {
    if params.tolerance < 0.0 {
        return Err(Error::config("tolerance must be nonnegative".to_string()));
    }
    let reference_accuracy = report.final_accuracy();
    let bar = reference_accuracy - params.tolerance;
    let thr_conf = report
        .per_threshold
        .iter()
        .find(|t| t.accuracy >= bar)
        .map(|t| t.threshold)
        .unwrap_or(1.0);

    let selected_exits = prune_exits(
        report,
        thr_conf,
        params.min_exit_rate,
        params.max_accuracy_gap,
    );
    let stats = report.simulate(&selected_exits, thr_conf);

    let points: Vec<(f64, f64)> = report
        .per_threshold
        .iter()
        .map(|t| (t.mean_latency_us, t.accuracy))
        .collect();
    let pareto = pareto_front(&points)
        .into_iter()
        .map(|i| {
            let t = &report.per_threshold[i];
            (t.mean_latency_us, t.accuracy, t.threshold)
        })
        .collect();

    Ok(CalibrationResult {
        thr_conf,
        selected_exits,
        expected_accuracy: stats.accuracy,
        expected_latency_us: stats.mean_latency_us,
        reference_accuracy,
        pareto,
    })
}

/// Drops early exits that contribute too little at the chosen threshold:
/// exits capturing no samples, exits below `min_exit_rate`, and exits whose
/// conditional accuracy falls more than `max_accuracy_gap` below the final
/// classifier's accuracy. The final classifier itself is never pruned.
pub fn prune_exits(
    report: &ProfileReport,
    thr_conf: f32,
    min_exit_rate: f64,
    max_accuracy_gap: f64,
) -> Vec<usize> {
    let all_exits: Vec<usize> = (1..report.num_outputs()).collect();
    let stats = report.simulate(&all_exits, thr_conf);
    let final_accuracy = report.final_accuracy();
    all_exits
        .into_iter()
        .filter(|&ordinal| {
            let rate = stats.exit_rates[ordinal - 1];
            if rate == 0.0 || rate < min_exit_rate {
                return false;
            }
            match stats.conditional_accuracy[ordinal - 1] {
                Some(acc) => acc >= final_accuracy - max_accuracy_gap,
                None => false,
            }
        })
        .collect()
}

impl CalibrationResult {
    /// Key-value summary consumed by the orchestrator.
    pub fn summary_kv(&self) -> String {
        let exits: Vec<String> = self.selected_exits.iter().map(|e| e.to_string()).collect();
        format!(
            "thr_conf {}\nselected_exits {}\nexpected_accuracy {:.6}\nexpected_latency_us {:.3}\nreference_accuracy {:.6}\n",
            self.thr_conf,
            exits.join(","),
            self.expected_accuracy,
            self.expected_latency_us,
            self.reference_accuracy
        )
    }

    /// CSV of the Pareto set: `latency_us,accuracy,threshold`.
    pub fn pareto_csv(&self) -> String {
        let mut out = String::from("latency_us,accuracy,threshold\n");
        for (lat, acc, thr) in &self.pareto {
            out.push_str(&format!("{lat:.3},{acc:.6},{thr:.2}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Synthetic report: three exits plus final, controllable confidence and
    /// correctness per sample.
    fn synthetic_report(
        conf: Vec<Vec<f32>>,
        correct: Vec<Vec<bool>>,
        grid: Vec<f32>,
    ) -> ProfileReport {
        let num_outputs = conf[0].len();
        let prefix_flops: Vec<u64> = (1..=num_outputs as u64).map(|i| i * 100).collect();
        let head_flops: Vec<u64> = vec![10; num_outputs];
        let params: Vec<u64> = (1..=num_outputs as u64).map(|i| i * 50).collect();
        let n = conf.len();
        let prefix_us: Vec<Vec<f64>> = (0..n)
            .map(|_| prefix_flops.iter().map(|&f| f as f64).collect())
            .collect();
        let head_us: Vec<Vec<f64>> = (0..n)
            .map(|_| head_flops.iter().map(|&f| f as f64).collect())
            .collect();
        ProfileReport::assemble(
            ReferenceMode::HardLabels,
            grid,
            prefix_flops,
            head_flops,
            params,
            conf,
            correct,
            prefix_us,
            head_us,
            n,
        )
    }

    #[test]
    fn pareto_front_hand_case() {
        // {(10, 0.70), (20, 0.65), (30, 0.80)} -> keep (10, 0.70), (30, 0.80)
        let points = vec![(10.0, 0.70), (20.0, 0.65), (30.0, 0.80)];
        assert_eq!(pareto_front(&points), vec![0, 2]);
    }

    #[test]
    fn pareto_front_single_and_duplicates() {
        assert_eq!(pareto_front(&[(5.0, 0.5)]), vec![0]);
        // Duplicates keep the first occurrence in input order.
        let points = vec![(5.0, 0.5), (5.0, 0.5), (4.0, 0.4)];
        assert_eq!(pareto_front(&points), vec![2, 0]);
    }

    #[test]
    fn pareto_front_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let n = rng.gen_range(1..40);
            let points: Vec<(f64, f64)> = (0..n)
                .map(|_| {
                    (
                        rng.gen_range(0.0..100.0f64).round(),
                        (rng.gen_range(0.0..1.0f64) * 20.0).round() / 20.0,
                    )
                })
                .collect();
            // O(n^2) dominance oracle with the same duplicate rule.
            let mut expected: Vec<usize> = (0..n)
                .filter(|&i| {
                    let (li, ai) = points[i];
                    let dominated = (0..n).any(|j| {
                        let (lj, aj) = points[j];
                        j != i && lj <= li && aj >= ai && (lj < li || aj > ai)
                    });
                    let duplicate_earlier = (0..i).any(|j| points[j] == points[i]);
                    !dominated && !duplicate_earlier
                })
                .collect();
            expected.sort_by(|&a, &b| {
                points[a]
                    .0
                    .partial_cmp(&points[b].0)
                    .unwrap()
                    .then(a.cmp(&b))
            });
            assert_eq!(pareto_front(&points), expected, "points {points:?}");
        }
    }

    #[test]
    fn all_correct_exits_profile_perfectly() {
        let conf = vec![vec![0.9, 0.9, 0.9]; 8];
        let correct = vec![vec![true, true, true]; 8];
        let report = synthetic_report(conf, correct, default_threshold_grid());
        for e in &report.per_exit {
            assert_eq!(e.accuracy, 1.0);
        }
    }

    #[test]
    fn calibrate_picks_smallest_qualifying_threshold() {
        // Exit 1 is confident (0.85) and correct on 3 of 4 samples; the
        // final exit is always correct. With a generous tolerance the
        // smallest threshold qualifies.
        let conf = vec![
            vec![0.85, 0.99],
            vec![0.85, 0.99],
            vec![0.85, 0.99],
            vec![0.40, 0.99],
        ];
        let correct = vec![
            vec![true, true],
            vec![true, true],
            vec![false, true],
            vec![false, true],
        ];
        let report = synthetic_report(conf, correct, vec![0.0, 0.5, 0.9, 1.0]);
        let generous = calibrate_threshold(
            &report,
            &CalibrationParams {
                tolerance: 1.0,
                min_exit_rate: 0.0,
                max_accuracy_gap: 1.0,
            },
        )
        .unwrap();
        assert_eq!(generous.thr_conf, 0.0);

        // Tolerance 0: thresholds 0.0 and 0.5 lose the third sample at exit
        // 1 (conf 0.85 > thr but wrong); 0.9 routes everything to the final
        // exit and qualifies.
        let strict = calibrate_threshold(
            &report,
            &CalibrationParams {
                tolerance: 0.0,
                min_exit_rate: 0.0,
                max_accuracy_gap: 1.0,
            },
        )
        .unwrap();
        assert_eq!(strict.thr_conf, 0.9);
    }

    #[test]
    fn calibrate_perfect_early_exit_above_point_eight() {
        // Exit 1 matches the final exit exactly on every sample it captures
        // above confidence 0.8, so tolerance 0 admits a threshold <= 0.8.
        let mut conf = Vec::new();
        let mut correct = Vec::new();
        for i in 0..10 {
            if i % 2 == 0 {
                conf.push(vec![0.93, 0.99]);
                correct.push(vec![true, true]);
            } else {
                conf.push(vec![0.55, 0.99]);
                correct.push(vec![false, true]);
            }
        }
        let report = synthetic_report(conf, correct, default_threshold_grid());
        let result = calibrate_threshold(
            &report,
            &CalibrationParams {
                tolerance: 0.0,
                min_exit_rate: 0.0,
                max_accuracy_gap: 1.0,
            },
        )
        .unwrap();
        assert!(result.thr_conf <= 0.8, "chose {}", result.thr_conf);
    }

    #[test]
    fn calibrate_falls_back_to_failsafe() {
        // Exit 1 is always confident and always wrong: no threshold except
        // 1.0 keeps accuracy, so calibration returns thr = 1.
        let conf = vec![vec![0.99, 0.99]; 6];
        let correct = vec![vec![false, true]; 6];
        let report = synthetic_report(conf, correct, vec![0.0, 0.5, 1.0]);
        let result = calibrate_threshold(&report, &CalibrationParams::default()).unwrap();
        assert_eq!(result.thr_conf, 1.0);
        assert_eq!(result.expected_accuracy, 1.0);
    }

    #[test]
    fn pruning_rules() {
        // At thr 0.9: exit 1 captures nothing -> pruned. Exit 2 captures the
        // even samples with conditional accuracy 0.5 vs final 1.0 -> pruned.
        // Exit 3 captures the odd samples perfectly -> kept.
        let mut conf = Vec::new();
        let mut correct = Vec::new();
        for i in 0..8 {
            if i % 2 == 0 {
                conf.push(vec![0.5, 0.95, 0.99, 0.99]);
                correct.push(vec![true, i % 4 == 0, true, true]);
            } else {
                conf.push(vec![0.5, 0.5, 0.95, 0.99]);
                correct.push(vec![true, false, true, true]);
            }
        }
        let report = synthetic_report(conf, correct, vec![0.0, 0.9, 1.0]);
        let kept = prune_exits(&report, 0.9, 0.05, 0.02);
        assert_eq!(kept, vec![3]);
        // With no-op limits only the zero-rate exit is dropped.
        let kept = prune_exits(&report, 0.9, 0.0, 1.0);
        assert_eq!(kept, vec![2, 3]);
    }

    #[test]
    fn pruning_never_touches_final_classifier() {
        let conf = vec![vec![0.1, 0.1, 0.1]; 4];
        let correct = vec![vec![false, false, true]; 4];
        let report = synthetic_report(conf, correct, vec![0.5]);
        let kept = prune_exits(&report, 0.5, 0.5, 0.0);
        // Every early exit pruned; the final ordinal is not in the early-exit
        // set by construction and the policy still works.
        assert!(kept.is_empty());
        let stats = report.simulate(&kept, 0.5);
        assert_eq!(stats.exit_rates[2], 1.0);
        assert_eq!(stats.accuracy, 1.0);
    }

    #[test]
    fn chosen_point_lies_on_pareto_front() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = 24;
            let num_outputs = 4;
            let conf: Vec<Vec<f32>> = (0..n)
                .map(|_| (0..num_outputs).map(|_| rng.gen_range(0.2..1.0)).collect())
                .collect();
            let correct: Vec<Vec<bool>> = (0..n)
                .map(|_| {
                    (0..num_outputs)
                        .map(|e| rng.gen::<f64>() < 0.5 + 0.15 * e as f64)
                        .collect()
                })
                .collect();
            let report = synthetic_report(conf, correct, default_threshold_grid());
            let result = calibrate_threshold(
                &report,
                &CalibrationParams {
                    tolerance: 0.05,
                    min_exit_rate: 0.0,
                    max_accuracy_gap: 1.0,
                },
            )
            .unwrap();
            if result.thr_conf < 1.0 {
                assert!(
                    result.pareto.iter().any(|&(_, _, t)| t == result.thr_conf),
                    "threshold {} not on front {:?}",
                    result.thr_conf,
                    result.pareto
                );
            }
        }
    }
}
