//! Exit-head training losses and the hybrid personalisation objective.
//!
//! Per exit i (the final classifier, ordinal M+1, acts as teacher and is
//! never trained):
//!
//! ```text
//! L_i = alpha * [gamma == 0] * CE(softmax(z_i), y)
//!     + beta  * T^2 * KL(softmax(z_f / T) || softmax(z_i / T))
//!     + gamma * [alpha == 0] * CE(softmax(z_i), argmax(z_f))
//! ```
//!
//! The supervised and self-supervised terms are mutually exclusive;
//! configurations with both `alpha > 0` and `gamma > 0` are rejected at
//! construction rather than silently zeroed. The total personalisation loss
//! is the unweighted sum of `L_i` over the M early exits. The teacher
//! distribution is treated as a constant in all gradients, and losses are
//! accumulated in f64.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax, log_softmax, softmax};

/// Hyperparameters of the hybrid personalisation loss plus the SGD settings
/// used by the personalisation loop.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct PersonalisationConfig {
    /// Supervised (hard-label) weight.
    pub alpha: f64,
    /// Self-distillation weight.
    pub beta: f64,
    /// Self-supervision weight (teacher top-1 as pseudo-label).
    pub gamma: f64,
    /// Distillation temperature.
    pub temperature: f32,
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    /// Seed for the per-epoch data shuffle.
    pub seed: u64,
}

impl Default for PersonalisationConfig {
    fn default() -> Self {
        // 10 epochs at lr 0.01 for exit fine-tuning; T = 4, momentum 0.9,
        // batch 32.
        Self {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
            temperature: 4.0,
            epochs: 10,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl PersonalisationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::config(
                "loss weights must be nonnegative".to_string(),
            ));
        }
        if self.alpha > 0.0 && self.gamma > 0.0 {
            return Err(Error::config(
                "supervised (alpha) and self-supervised (gamma) terms are mutually \
                 exclusive; set one of them to zero"
                    .to_string(),
            ));
        }
        if self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0 {
            return Err(Error::config("all loss weights are zero".to_string()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1".to_string()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("learning rate must be > 0".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1".to_string()));
        }
        Ok(())
    }

    /// Hard-label supervised mode (alpha only).
    pub fn hard_labels() -> Self {
        Self::default()
    }

    /// Label-free self-distillation mode (beta only).
    pub fn self_distillation() -> Self {
        Self {
            alpha: 0.0,
            beta: 1.0,
            gamma: 0.0,
            ..Self::default()
        }
    }

    /// Label-free self-supervision mode (gamma only).
    pub fn self_supervision() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            gamma: 1.0,
            ..Self::default()
        }
    }

    pub fn needs_labels(&self) -> bool {
        self.alpha > 0.0
    }
}

/// Cross-entropy against a hard label: `-log softmax(logits)[y]`.
pub fn supervised_loss(logits: &[f32], y: usize) -> Result<f64> {
    if y >= logits.len() {
        return Err(Error::config(format!(
            "label {y} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(-log_softmax(logits, 1.0)?[y])
}

/// Supervised loss and its gradient w.r.t. the logits: `softmax - onehot`.
pub fn supervised_loss_grad(logits: &[f32], y: usize) -> Result<(f64, Vec<f32>)> {
    let loss = supervised_loss(logits, y)?;
    let mut grad = softmax(logits, 1.0)?;
    grad[y] -= 1.0;
    Ok((loss, grad))
}

/// Temperature-smoothed distillation loss:
/// `T^2 * KL(softmax(teacher/T) || softmax(student/T))`.
///
/// The T^2 factor keeps gradient magnitudes O(1) as T grows.
pub fn distill_loss(student: &[f32], teacher: &[f32], temperature: f32) -> Result<f64> {
    check_same_len(student, teacher)?;
    let p = softmax(teacher, temperature)?;
    let log_p = log_softmax(teacher, temperature)?;
    let log_q = log_softmax(student, temperature)?;
    let t2 = (temperature as f64) * (temperature as f64);
    let mut kl = 0.0f64;
    for i in 0..p.len() {
        let pi = p[i] as f64;
        if pi > 0.0 {
            kl += pi * (log_p[i] - log_q[i]);
        }
    }
    // KL of a distribution against itself can come out at -1e-17 in floating
    // point; clamp so callers can rely on nonnegativity.
    Ok((t2 * kl).max(0.0))
}

/// Distillation loss and gradient w.r.t. the student logits:
/// `T * (softmax(student/T) - softmax(teacher/T))`, teacher held constant.
pub fn distill_loss_grad(
    student: &[f32],
    teacher: &[f32],
    temperature: f32,
) -> Result<(f64, Vec<f32>)> {
    let loss = distill_loss(student, teacher, temperature)?;
    let q = softmax(student, temperature)?;
    let p = softmax(teacher, temperature)?;
    let grad = q
        .iter()
        .zip(&p)
        .map(|(qi, pi)| temperature * (qi - pi))
        .collect();
    Ok((loss, grad))
}

/// Self-supervised loss: cross-entropy against the teacher's top-1 class
/// (ties resolve to the lowest class index).
pub fn self_superv_loss(student: &[f32], teacher: &[f32]) -> Result<f64> {
    check_same_len(student, teacher)?;
    supervised_loss(student, argmax(teacher))
}

pub fn self_superv_loss_grad(student: &[f32], teacher: &[f32]) -> Result<(f64, Vec<f32>)> {
    check_same_len(student, teacher)?;
    supervised_loss_grad(student, argmax(teacher))
}

fn check_same_len(student: &[f32], teacher: &[f32]) -> Result<()> {
    if student.len() != teacher.len() {
        return Err(Error::config(format!(
            "student ({}) and teacher ({}) logit lengths differ",
            student.len(),
            teacher.len()
        )));
    }
    Ok(())
}

/// Per-exit personalisation losses and their unweighted sum.
///
/// `exit_logits` holds all M+1 outputs in ordinal order; the last entry is
/// the teacher and contributes no loss of its own. A label is required
/// whenever `cfg.alpha > 0`.
pub fn personalisation_loss(
    exit_logits: &[Vec<f32>],
    y: Option<usize>,
    cfg: &PersonalisationConfig,
) -> Result<(Vec<f64>, f64)> {
    cfg.validate()?;
    if exit_logits.len() < 2 {
        return Err(Error::config(
            "need at least one early exit plus the final classifier".to_string(),
        ));
    }
    let (students, teacher) = exit_logits.split_at(exit_logits.len() - 1);
    let teacher = &teacher[0];
    let mut per_exit = Vec::with_capacity(students.len());
    for student in students {
        per_exit.push(per_exit_loss(student, teacher, y, cfg)?.0);
    }
    let total = per_exit.iter().sum();
    Ok((per_exit, total))
}

/// Loss and logit-gradient of a single early exit under the hybrid objective.
pub fn per_exit_loss(
    student: &[f32],
    teacher: &[f32],
    y: Option<usize>,
    cfg: &PersonalisationConfig,
) -> Result<(f64, Vec<f32>)> {
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f32; student.len()];
    let supervised_gate = cfg.alpha > 0.0 && cfg.gamma == 0.0;
    let self_superv_gate = cfg.gamma > 0.0 && cfg.alpha == 0.0;

    if supervised_gate {
        let y = y.ok_or_else(|| {
            Error::config("supervised personalisation (alpha > 0) requires labels".to_string())
        })?;
        let (l, g) = supervised_loss_grad(student, y)?;
        loss += cfg.alpha * l;
        let a = cfg.alpha as f32;
        for (acc, gi) in grad.iter_mut().zip(&g) {
            *acc += a * gi;
        }
    }
    if cfg.beta > 0.0 {
        let (l, g) = distill_loss_grad(student, teacher, cfg.temperature)?;
        loss += cfg.beta * l;
        let b = cfg.beta as f32;
        for (acc, gi) in grad.iter_mut().zip(&g) {
            *acc += b * gi;
        }
    }
    if self_superv_gate {
        let (l, g) = self_superv_loss_grad(student, teacher)?;
        loss += cfg.gamma * l;
        let c = cfg.gamma as f32;
        for (acc, gi) in grad.iter_mut().zip(&g) {
            *acc += c * gi;
        }
    }
    Ok((loss, grad))
}
