//! Three-phase runtime orchestrator: inference, exploration and
//! personalisation scheduling.
//!
//! Every arriving sample is classified under the active early-exit policy.
//! With probability `p_expl` the step also computes the final classifier and
//! the per-exit losses against it ("exploration"), updating a per-exit EWMA.
//! When an exit's EWMA stays above its post-calibration baseline by a factor
//! of `1 + drift_factor` for `drift_window` consecutive exploration
//! evaluations, the orchestrator raises the confidence threshold and
//! schedules a personalisation round for the next time the device is plugged
//! in. All randomness flows from the construction seed, so a fixed event
//! script replays bit-identically.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::infer::{infer, ExitPolicy, InferenceResult, LatencyModel};
use crate::layer::forward_layer;
use crate::loss::{per_exit_loss, PersonalisationConfig};
use crate::model::ModelGraph;
use crate::tensor::{argmax, softmax, Tensor};

/// EWMA smoothing factor for per-exit exploration losses.
pub const EWMA_SMOOTHING: f64 = 0.1;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchestratorConfig {
    /// Probability that a sample triggers an exploration evaluation.
    pub p_expl: f64,
    /// Operating threshold installed at calibration time.
    pub thr_conf_active: f32,
    /// Threshold adopted when drift is detected; never below the active one.
    pub thr_conf_raised: f32,
    /// Relative loss increase treated as drift.
    pub drift_factor: f64,
    /// Consecutive high evaluations required before drift fires.
    pub drift_window: usize,
    /// Personalise once this many new samples have been buffered.
    pub min_new_samples: usize,
    /// Personalise once the active threshold deviates this far from the
    /// calibrated one.
    pub deviation_limit: f32,
    pub seed: u64,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            p_expl: 0.1,
            thr_conf_active: 0.5,
            thr_conf_raised: 0.9,
            drift_factor: 0.2,
            drift_window: 20,
            min_new_samples: 256,
            deviation_limit: 0.2,
            seed: 0,
        }
    }
}

impl OrchestratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_expl) {
            return Err(Error::config("p_expl must be in [0, 1]".to_string()));
        }
        if self.thr_conf_raised < self.thr_conf_active {
            return Err(Error::config(
                "thr_conf_raised must be >= thr_conf_active".to_string(),
            ));
        }
        if !(self.drift_factor > 0.0) {
            return Err(Error::config("drift_factor must be > 0".to_string()));
        }
        if self.drift_window == 0 {
            return Err(Error::config("drift_window must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Operating phase of the state machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Inference,
    /// The next arriving sample will run an exploration evaluation.
    ExplorationArmed,
    /// Drift or data volume triggered a pending personalisation round.
    PersonalisationScheduled,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Inference => "inference",
            Phase::ExplorationArmed => "exploration-armed",
            Phase::PersonalisationScheduled => "personalisation-scheduled",
        }
    }
}

/// External events driving the orchestrator.
#[derive(Debug, Clone)]
pub enum Event {
    SampleArrived { input: Tensor, label: Option<usize> },
    DevicePluggedIn,
    TimerTick,
}

impl Event {
    pub fn name(&self) -> &'static str {
        match self {
            Event::SampleArrived { .. } => "sample_arrived",
            Event::DevicePluggedIn => "device_plugged_in",
            Event::TimerTick => "timer_tick",
        }
    }
}

/// Actions the orchestrator asks its driver to perform.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    RaiseThreshold(f32),
    SchedulePersonalisation,
    RunPersonalisation,
    RunProfile,
    RunCalibration,
}

impl Action {
    pub fn name(&self) -> String {
        match self {
            Action::RaiseThreshold(t) => format!("raise_threshold({t})"),
            Action::SchedulePersonalisation => "schedule_personalisation".to_string(),
            Action::RunPersonalisation => "run_personalisation".to_string(),
            Action::RunProfile => "run_profile".to_string(),
            Action::RunCalibration => "run_calibration".to_string(),
        }
    }
}

/// What one `step` did.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub actions: Vec<Action>,
    pub inference: Option<InferenceResult>,
    pub explored: bool,
    pub drift_detected: bool,
    /// FLOPs spent on top of plain policy inference by the exploration pass.
    pub exploration_extra_flops: u64,
}

/// Mutable orchestrator state; one logical owner, events strictly in order.
#[derive(Debug, Clone)]
pub struct OrchestratorState {
    pub phase: Phase,
    pub policy: ExitPolicy,
    pub thr_calibrated: f32,
    /// Per-selected-exit loss baselines recorded at the last calibration.
    baselines: Vec<f64>,
    ewma: Vec<f64>,
    drift_counters: Vec<usize>,
    pub new_samples: usize,
    buffered: Vec<(Tensor, Option<usize>)>,
    rng: ChaCha8Rng,
    next_explores: bool,
    loss_cfg: PersonalisationConfig,
    latency: LatencyModel,
}

impl OrchestratorState {
    /// Sets up the state machine after an initial calibration.
    /// `baselines[i]` belongs to `policy.selected_exits[i]`.
    pub fn new(
        cfg: &OrchestratorConfig,
        policy: ExitPolicy,
        baselines: Vec<f64>,
        loss_cfg: PersonalisationConfig,
        latency: LatencyModel,
    ) -> Result<Self> {
        cfg.validate()?;
        if baselines.len() != policy.selected_exits.len() {
            return Err(Error::config(format!(
                "{} baselines for {} selected exits",
                baselines.len(),
                policy.selected_exits.len()
            )));
        }
        let thr_calibrated = policy.thr_conf;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let next_explores = rng.gen::<f64>() < cfg.p_expl;
        let n = baselines.len();
        Ok(Self {
            phase: if next_explores {
                Phase::ExplorationArmed
            } else {
                Phase::Inference
            },
            policy,
            thr_calibrated,
            ewma: baselines.clone(),
            baselines,
            drift_counters: vec![0; n],
            new_samples: 0,
            buffered: Vec::new(),
            rng,
            next_explores,
            loss_cfg,
            latency,
        })
    }

    pub fn ewma(&self) -> &[f64] {
        &self.ewma
    }

    pub fn baselines(&self) -> &[f64] {
        &self.baselines
    }

    /// Drains the samples buffered since the last personalisation round.
    pub fn take_buffered(&mut self) -> Vec<(Tensor, Option<usize>)> {
        std::mem::take(&mut self.buffered)
    }

    /// Installs the results of a personalisation + profile + calibration
    /// cycle: new policy, fresh baselines, counters reset. The EWMA restarts
    /// at the baselines, so drift detection is false on the calibration set
    /// itself.
    pub fn complete_cycle(&mut self, policy: ExitPolicy, baselines: Vec<f64>) -> Result<()> {
        if baselines.len() != policy.selected_exits.len() {
            return Err(Error::config(format!(
                "{} baselines for {} selected exits",
                baselines.len(),
                policy.selected_exits.len()
            )));
        }
        self.thr_calibrated = policy.thr_conf;
        self.policy = policy;
        self.ewma = baselines.clone();
        self.baselines = baselines;
        self.drift_counters = vec![0; self.ewma.len()];
        self.new_samples = 0;
        self.buffered.clear();
        self.phase = if self.next_explores {
            Phase::ExplorationArmed
        } else {
            Phase::Inference
        };
        Ok(())
    }

    /// Processes one event against the model.
    pub fn step(
        &mut self,
        model: &ModelGraph,
        cfg: &OrchestratorConfig,
        event: Event,
    ) -> Result<StepOutcome> {
        match event {
            Event::SampleArrived { input, label } => self.on_sample(model, cfg, input, label),
            Event::DevicePluggedIn => {
                let mut actions = Vec::new();
                if self.phase == Phase::PersonalisationScheduled || should_personalise(self, cfg) {
                    actions.push(Action::RunPersonalisation);
                    actions.push(Action::RunProfile);
                    actions.push(Action::RunCalibration);
                }
                Ok(StepOutcome {
                    actions,
                    inference: None,
                    explored: false,
                    drift_detected: false,
                    exploration_extra_flops: 0,
                })
            }
            Event::TimerTick => {
                let mut actions = Vec::new();
                if self.phase != Phase::PersonalisationScheduled && should_personalise(self, cfg) {
                    self.phase = Phase::PersonalisationScheduled;
                    actions.push(Action::SchedulePersonalisation);
                }
                Ok(StepOutcome {
                    actions,
                    inference: None,
                    explored: false,
                    drift_detected: false,
                    exploration_extra_flops: 0,
                })
            }
        }
    }

    fn on_sample(
        &mut self,
        model: &ModelGraph,
        cfg: &OrchestratorConfig,
        input: Tensor,
        label: Option<usize>,
    ) -> Result<StepOutcome> {
        let explored = self.next_explores;
        let mut actions = Vec::new();
        let mut drift_detected = false;
        let mut exploration_extra_flops = 0u64;

        let inference = if explored {
            let (result, losses, extra) = self.explore(model, &input, label)?;
            exploration_extra_flops = extra;

            for (i, loss) in losses.iter().enumerate() {
                self.ewma[i] = (1.0 - EWMA_SMOOTHING) * self.ewma[i] + EWMA_SMOOTHING * loss;
            }
            let drift = detect_drift(
                &self.ewma,
                &self.baselines,
                cfg.drift_factor,
                cfg.drift_window,
                &mut self.drift_counters,
            );
            if drift && self.phase != Phase::PersonalisationScheduled {
                drift_detected = true;
                let raised = cfg.thr_conf_raised.max(cfg.thr_conf_active);
                if raised > self.policy.thr_conf {
                    self.policy.thr_conf = raised;
                }
                actions.push(Action::RaiseThreshold(self.policy.thr_conf));
                actions.push(Action::SchedulePersonalisation);
                self.phase = Phase::PersonalisationScheduled;
            }
            result
        } else {
            infer(model, &input, &self.policy, self.latency)?
        };

        self.buffered.push((input, label));
        self.new_samples += 1;

        self.next_explores = self.rng.gen::<f64>() < cfg.p_expl;
        if self.phase != Phase::PersonalisationScheduled {
            self.phase = if self.next_explores {
                Phase::ExplorationArmed
            } else {
                Phase::Inference
            };
        }

        Ok(StepOutcome {
            actions,
            inference: Some(inference),
            explored,
            drift_detected,
            exploration_extra_flops,
        })
    }

    /// Combined inference + exploration pass: one walk through all blocks,
    /// every selected head and the final classifier. The inference result is
    /// identical to what the plain policy walk would produce; the extra cost
    /// beyond that prefix is returned separately.
    fn explore(
        &mut self,
        model: &ModelGraph,
        input: &Tensor,
        label: Option<usize>,
    ) -> Result<(InferenceResult, Vec<f64>, u64)> {
        let selected = &self.policy.selected_exits;
        let mut x = input.clone();
        let mut head_logits: Vec<Option<Vec<f32>>> = vec![None; model.num_exits()];
        for (j, block) in model.blocks.iter().enumerate() {
            for layer in &block.layers {
                let (out, _) = forward_layer(layer, &x)?;
                x = out;
            }
            for &ordinal in selected {
                let exit = model.exit_by_ordinal(ordinal)?;
                if exit.placement == j {
                    let mut h = x.clone();
                    for layer in &exit.layers {
                        let (out, _) = forward_layer(layer, &h)?;
                        h = out;
                    }
                    head_logits[ordinal - 1] = Some(h.into_data());
                }
            }
        }
        for layer in &model.final_head {
            let (out, _) = forward_layer(layer, &x)?;
            x = out;
        }
        let final_logits = x.into_data();

        // Replay the policy decision from the computed confidences.
        let mut taken: Option<(usize, usize, f32)> = None;
        for &ordinal in selected {
            let logits = head_logits[ordinal - 1]
                .as_ref()
                .expect("selected head computed");
            let probs = softmax(logits, 1.0)?;
            let top = argmax(&probs);
            if probs[top] > self.policy.thr_conf {
                taken = Some((top, ordinal, probs[top]));
                break;
            }
        }
        let (predicted, exit_taken, confidence) = match taken {
            Some(t) => t,
            None => {
                let probs = softmax(&final_logits, 1.0)?;
                let top = argmax(&probs);
                (top, model.final_ordinal(), probs[top])
            }
        };
        let prefix_flops = model.policy_prefix_flops(selected, exit_taken)?;
        let latency_us = match self.latency {
            LatencyModel::WallClock => 0.0,
            LatencyModel::FlopProportional { ns_per_flop } => {
                prefix_flops as f64 * ns_per_flop / 1000.0
            }
        };

        // Exploration loss per selected exit, teacher = final classifier.
        // Supervised-mode exploration degrades to self-distillation when the
        // sample carries no label.
        let loss_cfg = if self.loss_cfg.needs_labels() && label.is_none() {
            PersonalisationConfig {
                alpha: 0.0,
                beta: if self.loss_cfg.beta > 0.0 {
                    self.loss_cfg.beta
                } else {
                    1.0
                },
                gamma: 0.0,
                ..self.loss_cfg
            }
        } else {
            self.loss_cfg
        };
        let mut losses = Vec::with_capacity(selected.len());
        for &ordinal in selected {
            let logits = head_logits[ordinal - 1]
                .as_ref()
                .expect("selected head computed");
            let y = loss_cfg
                .needs_labels()
                .then(|| label.expect("label present"));
            losses.push(per_exit_loss(logits, &final_logits, y, &loss_cfg)?.0);
        }

        // Full pass cost: every block, every selected head, final head.
        let mut full: u64 =
            model.block_flops()?.iter().sum::<u64>() + model.head_flops(model.final_ordinal())?;
        for &s in selected {
            full += model.head_flops(s)?;
        }

        Ok((
            InferenceResult {
                predicted,
                exit_taken,
                confidence,
                flops: prefix_flops,
                latency_us,
            },
            losses,
            full - prefix_flops,
        ))
    }
}

/// Drift check: an exit drifts once its EWMA loss exceeds
/// `baseline * (1 + delta)` for `window` consecutive evaluations.
/// `counters` carries the consecutive-high counts across calls and is
/// updated in place; returns true on the `window`-th consecutive call.
pub fn detect_drift(
    ewma: &[f64],
    baseline: &[f64],
    delta: f64,
    window: usize,
    counters: &mut [usize],
) -> bool {
    let mut fired = false;
    for i in 0..ewma.len() {
        if ewma[i] > baseline[i] * (1.0 + delta) {
            counters[i] += 1;
            if counters[i] >= window {
                fired = true;
            }
        } else {
            counters[i] = 0;
        }
    }
    fired
}

/// Personalisation trigger: enough new data, or the active threshold has
/// moved too far from the calibrated one.
pub fn should_personalise(state: &OrchestratorState, cfg: &OrchestratorConfig) -> bool {
    state.new_samples >= cfg.min_new_samples
        || (state.policy.thr_conf - state.thr_calibrated).abs() > cfg.deviation_limit
}

/// Per-exit loss baselines on a calibration set: mean plus three standard
/// deviations of the per-sample exploration loss. The slack keeps the EWMA
/// of heavy-tailed per-sample losses from tripping the multiplicative drift
/// margin on in-distribution data.
pub fn exploration_baselines(
    model: &ModelGraph,
    calib: &Dataset,
    selected_exits: &[usize],
    loss_cfg: &PersonalisationConfig,
) -> Result<Vec<f64>> {
    if calib.is_empty() {
        return Err(Error::data("empty calibration set".to_string()));
    }
    let mut sums = vec![0.0f64; selected_exits.len()];
    let mut sq_sums = vec![0.0f64; selected_exits.len()];
    for idx in 0..calib.len() {
        let outputs = model.forward_all_exits(&calib.image(idx))?;
        let teacher = outputs.last().expect("final logits");
        let y = loss_cfg.needs_labels().then(|| calib.label(idx));
        for (i, &ordinal) in selected_exits.iter().enumerate() {
            let loss = per_exit_loss(&outputs[ordinal - 1], teacher, y, loss_cfg)?.0;
            sums[i] += loss;
            sq_sums[i] += loss * loss;
        }
    }
    let n = calib.len() as f64;
    Ok(sums
        .iter()
        .zip(&sq_sums)
        .map(|(&s, &sq)| {
            let mean = s / n;
            let var = (sq / n - mean * mean).max(0.0);
            mean + 3.0 * var.sqrt()
        })
        .collect())
}

/// One row of the orchestrator event log
/// (`step,event,phase,actions,active_thr,drift,new_samples`).
pub fn event_log_row(
    step: usize,
    event_name: &str,
    state: &OrchestratorState,
    outcome: &StepOutcome,
) -> String {
    let actions: Vec<String> = outcome.actions.iter().map(Action::name).collect();
    format!(
        "{},{},{},{},{:.4},{},{}\n",
        step,
        event_name,
        state.phase.name(),
        if actions.is_empty() {
            "-".to_string()
        } else {
            actions.join(";")
        },
        state.policy.thr_conf,
        outcome.drift_detected as u8,
        state.new_samples
    )
}

pub const EVENT_LOG_HEADER: &str = "step,event,phase,actions,active_thr,drift,new_samples\n";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_blobs, BlobParams};
    use crate::model::BackboneSpec;

    fn model() -> ModelGraph {
        let spec = BackboneSpec {
            input_shape: [1, 10, 10],
            num_classes: 3,
            widths: vec![4, 6, 8],
            pool_after: vec![1],
        };
        ModelGraph::build(&spec, 2, 19).unwrap()
    }

    fn data(n: usize, seed: u64) -> Dataset {
        let params = BlobParams {
            height: 10,
            width: 10,
            sigma_along: 2.0,
            sigma_perp: 0.9,
            jitter: 1.0,
            noise_std: 0.1,
            distractor_amp: 0.0,
            ..BlobParams::default()
        };
        gen_blobs(3, n, &params, seed).unwrap()
    }

    fn state(cfg: &OrchestratorConfig, m: &ModelGraph) -> OrchestratorState {
        let policy = ExitPolicy::all_exits(m, cfg.thr_conf_active).unwrap();
        OrchestratorState::new(
            cfg,
            policy,
            vec![1.0, 1.0],
            PersonalisationConfig::self_distillation(),
            LatencyModel::default(),
        )
        .unwrap()
    }

    #[test]
    fn detect_drift_scripted_sequences() {
        let baseline = [1.0, 2.0];
        let delta = 0.2;
        let w = 3;
        // Equal to baseline: never fires, counter stays reset.
        let mut counters = [5usize, 0];
        assert!(!detect_drift(
            &[1.0, 2.0],
            &baseline,
            delta,
            w,
            &mut counters
        ));
        assert_eq!(counters, [0, 0]);

        // 1% above the margin for W consecutive calls: fires on the W-th.
        let high = [1.0 * 1.2 * 1.01, 2.0];
        let mut counters = [0usize, 0];
        for call in 1..=w {
            let fired = detect_drift(&high, &baseline, delta, w, &mut counters);
            assert_eq!(fired, call == w, "call {call}");
        }

        // W-1 high then one low: false, counter reset.
        let mut counters = [0usize, 0];
        for _ in 0..w - 1 {
            assert!(!detect_drift(&high, &baseline, delta, w, &mut counters));
        }
        assert!(!detect_drift(
            &[1.0, 2.0],
            &baseline,
            delta,
            w,
            &mut counters
        ));
        assert_eq!(counters[0], 0);
    }

    #[test]
    fn should_personalise_disjunction() {
        let m = model();
        let cfg = OrchestratorConfig {
            min_new_samples: 10,
            deviation_limit: 0.2,
            ..OrchestratorConfig::default()
        };
        let mut s = state(&cfg, &m);
        assert!(!should_personalise(&s, &cfg));
        s.new_samples = 10; // boundary inclusive
        assert!(should_personalise(&s, &cfg));
        s.new_samples = 0;
        s.policy.thr_conf = s.thr_calibrated + 0.4; // 2x the limit
        assert!(should_personalise(&s, &cfg));
    }

    #[test]
    fn p_expl_zero_never_explores() {
        let m = model();
        let ds = data(50, 1);
        let cfg = OrchestratorConfig {
            p_expl: 0.0,
            ..OrchestratorConfig::default()
        };
        let mut s = state(&cfg, &m);
        for i in 0..ds.len() {
            let outcome = s
                .step(
                    &m,
                    &cfg,
                    Event::SampleArrived {
                        input: ds.image(i),
                        label: Some(ds.label(i)),
                    },
                )
                .unwrap();
            assert!(!outcome.explored);
            assert_eq!(outcome.exploration_extra_flops, 0);
        }
    }

    #[test]
    fn p_expl_one_explores_every_sample_with_full_cost() {
        let m = model();
        let ds = data(20, 2);
        let cfg = OrchestratorConfig {
            p_expl: 1.0,
            ..OrchestratorConfig::default()
        };
        let mut s = state(&cfg, &m);
        let full_model_flops: u64 =
            m.block_flops().unwrap().iter().sum::<u64>() + m.head_flops(m.final_ordinal()).unwrap();
        let selected_heads: u64 = (1..=m.num_exits()).map(|o| m.head_flops(o).unwrap()).sum();
        for i in 0..ds.len() {
            let outcome = s
                .step(
                    &m,
                    &cfg,
                    Event::SampleArrived {
                        input: ds.image(i),
                        label: Some(ds.label(i)),
                    },
                )
                .unwrap();
            assert!(outcome.explored);
            let r = outcome.inference.unwrap();
            // Total work = inference prefix + exploration extra
            //            = full-model flops + selected-exit head flops.
            assert_eq!(
                r.flops + outcome.exploration_extra_flops,
                full_model_flops + selected_heads
            );
        }
    }

    #[test]
    fn exploration_inference_matches_plain_inference() {
        let m = model();
        let ds = data(30, 3);
        let cfg_explore = OrchestratorConfig {
            p_expl: 1.0,
            ..OrchestratorConfig::default()
        };
        let cfg_plain = OrchestratorConfig {
            p_expl: 0.0,
            ..OrchestratorConfig::default()
        };
        let mut a = state(&cfg_explore, &m);
        let mut b = state(&cfg_plain, &m);
        for i in 0..ds.len() {
            let ev = Event::SampleArrived {
                input: ds.image(i),
                label: Some(ds.label(i)),
            };
            let ra = a
                .step(&m, &cfg_explore, ev.clone())
                .unwrap()
                .inference
                .unwrap();
            let rb = b.step(&m, &cfg_plain, ev).unwrap().inference.unwrap();
            assert_eq!(ra, rb, "sample {i}");
        }
    }

    #[test]
    fn drift_raises_threshold_and_schedules_personalisation() {
        let m = model();
        let ds = data(200, 4);
        let cfg = OrchestratorConfig {
            p_expl: 1.0,
            drift_window: 5,
            thr_conf_active: 0.5,
            thr_conf_raised: 0.9,
            min_new_samples: 100_000,
            ..OrchestratorConfig::default()
        };
        let policy = ExitPolicy::all_exits(&m, cfg.thr_conf_active).unwrap();
        // Absurdly low baselines: every exploration evaluation counts as
        // high, so drift must fire on the drift_window-th sample.
        let mut s = OrchestratorState::new(
            &cfg,
            policy,
            vec![1e-9, 1e-9],
            PersonalisationConfig::self_distillation(),
            LatencyModel::default(),
        )
        .unwrap();
        let mut drift_step = None;
        for i in 0..ds.len() {
            let outcome = s
                .step(
                    &m,
                    &cfg,
                    Event::SampleArrived {
                        input: ds.image(i),
                        label: None,
                    },
                )
                .unwrap();
            if outcome.drift_detected {
                drift_step = Some(i);
                assert!(outcome
                    .actions
                    .iter()
                    .any(|a| matches!(a, Action::RaiseThreshold(_))));
                assert!(outcome.actions.contains(&Action::SchedulePersonalisation));
                break;
            }
        }
        assert_eq!(drift_step, Some(cfg.drift_window - 1));
        assert_eq!(s.phase, Phase::PersonalisationScheduled);
        assert!((s.policy.thr_conf - 0.9).abs() < 1e-6);

        // Device plug-in now emits the personalisation pipeline.
        let outcome = s.step(&m, &cfg, Event::DevicePluggedIn).unwrap();
        assert_eq!(
            outcome.actions,
            vec![
                Action::RunPersonalisation,
                Action::RunProfile,
                Action::RunCalibration
            ]
        );

        // Completing the cycle resets everything.
        let new_policy = ExitPolicy::all_exits(&m, 0.55).unwrap();
        s.complete_cycle(new_policy, vec![0.5, 0.5]).unwrap();
        assert_eq!(s.new_samples, 0);
        assert_eq!(s.ewma(), &[0.5, 0.5]);
        assert_ne!(s.phase, Phase::PersonalisationScheduled);
    }

    #[test]
    fn raise_never_lowers_active_threshold() {
        let m = model();
        let cfg = OrchestratorConfig {
            p_expl: 1.0,
            drift_window: 1,
            thr_conf_active: 0.95,
            thr_conf_raised: 0.95,
            ..OrchestratorConfig::default()
        };
        let policy = ExitPolicy::all_exits(&m, 0.97).unwrap(); // already above raised
        let mut s = OrchestratorState::new(
            &cfg,
            policy,
            vec![1e-9, 1e-9],
            PersonalisationConfig::self_distillation(),
            LatencyModel::default(),
        )
        .unwrap();
        let ds = data(5, 9);
        let outcome = s
            .step(
                &m,
                &cfg,
                Event::SampleArrived {
                    input: ds.image(0),
                    label: None,
                },
            )
            .unwrap();
        assert!(outcome.drift_detected);
        assert!(s.policy.thr_conf >= 0.97);
    }

    #[test]
    fn timer_tick_schedules_on_sufficient_data() {
        let m = model();
        let cfg = OrchestratorConfig {
            p_expl: 0.0,
            min_new_samples: 3,
            ..OrchestratorConfig::default()
        };
        let mut s = state(&cfg, &m);
        let ds = data(5, 5);
        assert!(s
            .step(&m, &cfg, Event::TimerTick)
            .unwrap()
            .actions
            .is_empty());
        for i in 0..3 {
            s.step(
                &m,
                &cfg,
                Event::SampleArrived {
                    input: ds.image(i),
                    label: Some(ds.label(i)),
                },
            )
            .unwrap();
        }
        let outcome = s.step(&m, &cfg, Event::TimerTick).unwrap();
        assert_eq!(outcome.actions, vec![Action::SchedulePersonalisation]);
        assert_eq!(s.phase, Phase::PersonalisationScheduled);
        assert_eq!(s.take_buffered().len(), 3);
    }

    #[test]
    fn event_scripts_replay_bit_identically() {
        let m = model();
        let ds = data(100, 6);
        let cfg = OrchestratorConfig {
            p_expl: 0.3,
            ..OrchestratorConfig::default()
        };
        let run = || {
            let mut s = state(&cfg, &m);
            let mut trail = Vec::new();
            for i in 0..ds.len() {
                let ev = if i % 17 == 0 {
                    Event::TimerTick
                } else {
                    Event::SampleArrived {
                        input: ds.image(i),
                        label: Some(ds.label(i)),
                    }
                };
                let name = ev.name();
                let outcome = s.step(&m, &cfg, ev).unwrap();
                trail.push(event_log_row(i, name, &s, &outcome));
            }
            trail.join("")
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn exploration_rate_converges_to_p_expl() {
        let m = model();
        let ds = data(64, 7);
        let p = 0.1;
        let n = 10_000usize;
        let cfg = OrchestratorConfig {
            p_expl: p,
            min_new_samples: usize::MAX,
            ..OrchestratorConfig::default()
        };
        let mut s = state(&cfg, &m);
        let mut activations = 0usize;
        let mut extra_flops = 0u64;
        let mut expected_extra = 0u64;
        for i in 0..n {
            let outcome = s
                .step(
                    &m,
                    &cfg,
                    Event::SampleArrived {
                        input: ds.image(i % ds.len()),
                        label: None,
                    },
                )
                .unwrap();
            if outcome.explored {
                activations += 1;
                let r = outcome.inference.as_ref().unwrap();
                // Extra work = full pass beyond the exit actually taken.
                let full: u64 = m.block_flops().unwrap().iter().sum::<u64>()
                    + (1..=m.num_exits())
                        .map(|o| m.head_flops(o).unwrap())
                        .sum::<u64>()
                    + m.head_flops(m.final_ordinal()).unwrap();
                expected_extra += full - r.flops;
            }
            extra_flops += outcome.exploration_extra_flops;
        }
        assert_eq!(extra_flops, expected_extra);
        // Binomial 3-sigma band around p.
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let rate = activations as f64 / n as f64;
        assert!(
            (rate - p).abs() < 3.0 * sigma,
            "rate {rate} outside 3 sigma of {p}"
        );
    }
}
