//! Discrepancy-aware multi-teacher decoupled distillation.
//!
//! The softened KL between a teacher and the student splits into a
//! target-class part (TCKD, a binary KL over "target vs. rest") and a
//! non-target part (NCKD, a KL over the classes other than the target,
//! renormalized). Each teacher contributes to both parts with its own weight:
//! `g_k` for NCKD grows with the class-distribution distance between the
//! teacher's client and the student's client, `h_k` for TCKD shrinks with it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::ClassDistribution;
use crate::error::{arg, non_negative, positive, Error, Result};
use crate::model::{
    check_batch_targets, cross_entropy_with_grad, log_sum_exp, Gradients, Logits, ModelParams,
};

/// Additive smoothing applied to class distributions before KL or JS.
pub const DISCREPANCY_SMOOTHING: f64 = 1e-6;

/// Distance between two class distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    L1,
    L2,
    KL,
    JS,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::L1, Metric::L2, Metric::JS, Metric::KL];
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Metric::L1 => "L1",
            Metric::L2 => "L2",
            Metric::KL => "KL",
            Metric::JS => "JS",
        };
        f.write_str(s)
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "L1" => Ok(Metric::L1),
            "L2" => Ok(Metric::L2),
            "KL" => Ok(Metric::KL),
            "JS" => Ok(Metric::JS),
            other => arg(format!(
                "unknown metric `{other}` (expected L1, L2, KL or JS)"
            )),
        }
    }
}

/// Distillation hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdConfig {
    /// Softmax temperature.
    pub tau: f64,
    /// NCKD coefficient.
    pub gamma: f64,
    /// TCKD coefficient.
    pub beta: f64,
    pub metric: Metric,
    /// Smoothing constant in the TCKD weights.
    pub epsilon: f64,
    /// Multiply both KD losses by `tau^2`.
    pub tau_squared: bool,
    /// Use discrepancy-based NCKD weights; uniform otherwise.
    pub use_g: bool,
    /// Use discrepancy-based TCKD weights; uniform otherwise.
    pub use_h: bool,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            tau: 4.0,
            gamma: 1.0,
            beta: 3.0,
            metric: Metric::KL,
            epsilon: 1e-4,
            tau_squared: true,
            use_g: true,
            use_h: true,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !positive(self.tau) {
            return arg("tau must be positive");
        }
        if !positive(self.epsilon) {
            return arg("epsilon must be positive");
        }
        if !non_negative(self.gamma) || !non_negative(self.beta) {
            return arg("gamma and beta must be non-negative");
        }
        Ok(())
    }

    fn loss_scale(&self) -> f64 {
        if self.tau_squared {
            self.tau * self.tau
        } else {
            1.0
        }
    }
}

fn smoothed(p: &[f64]) -> Vec<f64> {
    let norm = 1.0 + DISCREPANCY_SMOOTHING * p.len() as f64;
    p.iter()
        .map(|v| (v + DISCREPANCY_SMOOTHING) / norm)
        .collect()
}

fn kl_dense(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .filter(|(x, _)| **x > 0.0)
        .map(|(x, y)| x * (x / y).ln())
        .sum::<f64>()
        .max(0.0)
}

fn discrepancy_raw(a: &[f64], b: &[f64], metric: Metric) -> f64 {
    match metric {
        Metric::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        Metric::L2 => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
        Metric::KL => kl_dense(&smoothed(a), &smoothed(b)),
        Metric::JS => {
            let (a, b) = (smoothed(a), smoothed(b));
            let m: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            0.5 * kl_dense(&a, &m) + 0.5 * kl_dense(&b, &m)
        }
    }
}

/// `d(a, b)` under the chosen metric. KL and JS are evaluated on copies
/// smoothed by [`DISCREPANCY_SMOOTHING`] and renormalized.
pub fn discrepancy(a: &ClassDistribution, b: &ClassDistribution, metric: Metric) -> Result<f64> {
    if a.len() != b.len() {
        return arg(format!(
            "distribution lengths differ: {} vs {}",
            a.len(),
            b.len()
        ));
    }
    if a.empty || b.empty {
        return arg("discrepancy of an empty-dataset distribution is undefined");
    }
    Ok(discrepancy_raw(&a.proportions, &b.proportions, metric))
}

/// Discrepancy on bare proportion vectors (no empty flag).
pub(crate) fn discrepancy_slices(a: &[f64], b: &[f64], metric: Metric) -> f64 {
    discrepancy_raw(a, b, metric)
}

/// `g_k = d_k / Σ d_j` and `h_k = (1/(d_k+ε)) / Σ 1/(d_j+ε)` from
/// precomputed distances. All-zero distances give uniform `g`.
pub fn weights_from_distances(distances: &[f64], epsilon: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if distances.is_empty() {
        return arg("at least one teacher required");
    }
    if !positive(epsilon) {
        return arg("epsilon must be positive");
    }
    if distances.iter().any(|d| !non_negative(*d)) {
        return arg("distances must be finite and non-negative");
    }
    let k = distances.len() as f64;
    let total: f64 = distances.iter().sum();
    let g = if total > 0.0 {
        distances.iter().map(|d| d / total).collect()
    } else {
        vec![1.0 / k; distances.len()]
    };
    let inv: Vec<f64> = distances.iter().map(|d| 1.0 / (d + epsilon)).collect();
    let inv_total: f64 = inv.iter().sum();
    let h = inv.iter().map(|v| v / inv_total).collect();
    Ok((g, h))
}

/// Per-teacher `(g, h)` weights against the student's class distribution.
pub fn teacher_weights(
    teacher_dists: &[ClassDistribution],
    student_dist: &ClassDistribution,
    metric: Metric,
    epsilon: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if teacher_dists.is_empty() {
        return arg("at least one teacher required");
    }
    let d = teacher_dists
        .iter()
        .map(|t| discrepancy(t, student_dist, metric))
        .collect::<Result<Vec<_>>>()?;
    weights_from_distances(&d, epsilon)
}

/// Frozen teacher models with their clients' class distributions and the
/// weights currently in force.
#[derive(Debug, Clone, Default)]
pub struct TeacherEnsemble {
    pub teachers: Vec<ModelParams>,
    pub dists: Vec<ClassDistribution>,
    /// Client index each teacher was trained on.
    pub clients: Vec<usize>,
    pub g: Vec<f64>,
    pub h: Vec<f64>,
}

impl TeacherEnsemble {
    /// Builds an ensemble with uniform weights.
    pub fn new(
        teachers: Vec<ModelParams>,
        dists: Vec<ClassDistribution>,
        clients: Vec<usize>,
    ) -> Result<Self> {
        if teachers.len() != dists.len() || teachers.len() != clients.len() {
            return arg("one distribution and client id per teacher required");
        }
        let k = teachers.len();
        let w = vec![1.0 / k as f64; k];
        Ok(Self {
            teachers,
            dists,
            clients,
            g: w.clone(),
            h: w,
        })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    /// Recomputes `g` and `h` for a new student client. Disabled weight
    /// families fall back to uniform.
    pub fn reweight(&mut self, student_dist: &ClassDistribution, cfg: &KdConfig) -> Result<()> {
        if self.is_empty() {
            return Ok(());
        }
        let (g, h) = teacher_weights(&self.dists, student_dist, cfg.metric, cfg.epsilon)?;
        let uniform = vec![1.0 / self.len() as f64; self.len()];
        self.g = if cfg.use_g { g } else { uniform.clone() };
        self.h = if cfg.use_h { h } else { uniform };
        Ok(())
    }
}

/// Log-probabilities of the renormalized non-target softmax, with the target
/// slot set to `-inf`.
fn non_target_log_probs(z: &[f64], target: usize, tau: f64, out: &mut [f64]) {
    let m = z
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != target)
        .fold(f64::NEG_INFINITY, |a, (_, &b)| a.max(b))
        / tau;
    let s: f64 = z
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != target)
        .map(|(_, &v)| (v / tau - m).exp())
        .sum();
    let lse = m + s.ln();
    for (c, o) in out.iter_mut().enumerate() {
        *o = if c == target {
            f64::NEG_INFINITY
        } else {
            z[c] / tau - lse
        };
    }
}

/// `(ln p_t, ln (1 - p_t))` of the temperature softmax, computed without
/// forming `1 - p_t`.
fn binary_log_probs(z: &[f64], target: usize, tau: f64) -> (f64, f64) {
    let all = log_sum_exp(z, tau);
    let m = z
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != target)
        .fold(f64::NEG_INFINITY, |a, (_, &b)| a.max(b))
        / tau;
    let rest = m + z
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != target)
        .map(|(_, &v)| (v / tau - m).exp())
        .sum::<f64>()
        .ln();
    (z[target] / tau - all, rest - all)
}

#[inline]
fn xlogx_ratio(p: f64, log_p: f64, log_q: f64) -> f64 {
    if p > 0.0 {
        p * (log_p - log_q)
    } else {
        0.0
    }
}

/// Unscaled non-target KL `Σ_{c≠t} p̃T_c ln(p̃T_c / p̃S_c)` for one sample.
pub fn nckd_term(teacher: &[f64], student: &[f64], target: usize, tau: f64) -> f64 {
    let c = teacher.len();
    let mut lt = vec![0.0; c];
    let mut ls = vec![0.0; c];
    non_target_log_probs(teacher, target, tau, &mut lt);
    non_target_log_probs(student, target, tau, &mut ls);
    (0..c)
        .filter(|&k| k != target)
        .map(|k| xlogx_ratio(lt[k].exp(), lt[k], ls[k]))
        .sum::<f64>()
        .max(0.0)
}

/// Unscaled binary KL between `(p_t, 1-p_t)` of teacher and student.
pub fn tckd_term(teacher: &[f64], student: &[f64], target: usize, tau: f64) -> f64 {
    let (tt, tn) = binary_log_probs(teacher, target, tau);
    let (st, sn) = binary_log_probs(student, target, tau);
    (xlogx_ratio(tt.exp(), tt, st) + xlogx_ratio(tn.exp(), tn, sn)).max(0.0)
}

/// Mass `1 - p_t` the temperature softmax puts on non-target classes.
pub fn non_target_mass(z: &[f64], target: usize, tau: f64) -> f64 {
    binary_log_probs(z, target, tau).1.exp()
}

/// Classic softened KL `KL(softmax(zT/τ) ‖ softmax(zS/τ))` over all classes.
pub fn softened_kl(teacher: &[f64], student: &[f64], tau: f64) -> f64 {
    let lt = log_sum_exp(teacher, tau);
    let ls = log_sum_exp(student, tau);
    teacher
        .iter()
        .zip(student)
        .map(|(&a, &b)| {
            let la = a / tau - lt;
            xlogx_ratio(la.exp(), la, b / tau - ls)
        })
        .sum()
}

fn check_kd_inputs(
    student: &Logits,
    teachers: &[Logits],
    targets: &[usize],
    weights: &[f64],
    tau: f64,
) -> Result<()> {
    check_batch_targets(student, targets)?;
    if !positive(tau) {
        return arg("temperature must be positive");
    }
    if teachers.len() != weights.len() {
        return arg("one weight per teacher required");
    }
    if teachers
        .iter()
        .any(|t| t.num_classes != student.num_classes || t.batch_size() != student.batch_size())
    {
        return arg("teacher logits must match the student batch shape");
    }
    Ok(())
}

/// NCKD loss and, optionally, its gradient with respect to the student logits.
fn nckd_impl(
    student: &Logits,
    teachers: &[Logits],
    targets: &[usize],
    g: &[f64],
    tau: f64,
    scale: f64,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let c = student.num_classes;
    let n = targets.len() as f64;
    let mut ls = vec![0.0; c];
    let mut lt = vec![0.0; c];
    let mut mix = vec![0.0; c];
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let zs = student.row(i);
        non_target_log_probs(zs, t, tau, &mut ls);
        mix.iter_mut().for_each(|v| *v = 0.0);
        let mut weight_sum = 0.0;
        let mut sample = 0.0;
        for (teacher, &w) in teachers.iter().zip(g) {
            non_target_log_probs(teacher.row(i), t, tau, &mut lt);
            let mut kl = 0.0;
            for k in (0..c).filter(|&k| k != t) {
                let p = lt[k].exp();
                kl += xlogx_ratio(p, lt[k], ls[k]);
                mix[k] += w * p;
            }
            sample += w * kl.max(0.0);
            weight_sum += w;
        }
        total += sample;
        if let Some(gr) = grad.as_deref_mut() {
            let row = &mut gr[i * c..(i + 1) * c];
            for k in (0..c).filter(|&k| k != t) {
                row[k] += scale / tau * (weight_sum * ls[k].exp() - mix[k]) / n;
            }
        }
    }
    scale * total / n
}

/// TCKD loss and, optionally, its gradient with respect to the student logits.
fn tckd_impl(
    student: &Logits,
    teachers: &[Logits],
    targets: &[usize],
    h: &[f64],
    tau: f64,
    scale: f64,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let c = student.num_classes;
    let n = targets.len() as f64;
    let mut ls = vec![0.0; c];
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let zs = student.row(i);
        let (st, sn) = binary_log_probs(zs, t, tau);
        let ps_t = st.exp();
        let mut sample = 0.0;
        // Σ_k h_k (p_t^S - p_t^{T_k})
        let mut pull = 0.0;
        for (teacher, &w) in teachers.iter().zip(h) {
            let (tt, tn) = binary_log_probs(teacher.row(i), t, tau);
            sample += w * (xlogx_ratio(tt.exp(), tt, st) + xlogx_ratio(tn.exp(), tn, sn)).max(0.0);
            pull += w * (ps_t - tt.exp());
        }
        total += sample;
        if let Some(gr) = grad.as_deref_mut() {
            non_target_log_probs(zs, t, tau, &mut ls);
            let row = &mut gr[i * c..(i + 1) * c];
            let coef = scale / tau * pull / n;
            for k in 0..c {
                row[k] += if k == t { coef } else { -coef * ls[k].exp() };
            }
        }
    }
    scale * total / n
}

/// Weighted multi-teacher NCKD, averaged over the batch and scaled by `tau^2`.
pub fn nckd_loss(
    student: &Logits,
    teachers: &[Logits],
    targets: &[usize],
    g: &[f64],
    tau: f64,
) -> Result<f64> {
    check_kd_inputs(student, teachers, targets, g, tau)?;
    Ok(nckd_impl(
        student,
        teachers,
        targets,
        g,
        tau,
        tau * tau,
        None,
    ))
}

/// Weighted multi-teacher TCKD, averaged over the batch and scaled by `tau^2`.
pub fn tckd_loss(
    student: &Logits,
    teachers: &[Logits],
    targets: &[usize],
    h: &[f64],
    tau: f64,
) -> Result<f64> {
    check_kd_inputs(student, teachers, targets, h, tau)?;
    Ok(tckd_impl(
        student,
        teachers,
        targets,
        h,
        tau,
        tau * tau,
        None,
    ))
}

/// Value and parameter gradient of `CE + γ·NCKD + β·TCKD` on one batch.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub ce: f64,
    pub nckd: f64,
    pub tckd: f64,
    pub grads: Gradients,
}

/// Total distillation objective for a batch. Teacher logits come from forward
/// passes of the frozen ensemble members; only the student gets gradients.
/// With no teachers, or `γ = β = 0`, this is exactly cross-entropy.
pub fn total_loss(
    params: &ModelParams,
    features: &[f64],
    labels: &[usize],
    ensemble: Option<&TeacherEnsemble>,
    cfg: &KdConfig,
) -> Result<LossOutput> {
    let trace = params.forward_trace(features)?;
    let logits = trace.logits(params.num_classes());
    let (ce, mut d_logits) = cross_entropy_with_grad(&logits, labels)?;
    let mut out = LossOutput {
        loss: ce,
        ce,
        nckd: 0.0,
        tckd: 0.0,
        grads: params.zeros_like(),
    };

    let active = ensemble.filter(|e| !e.is_empty() && (cfg.gamma > 0.0 || cfg.beta > 0.0));
    if let Some(ens) = active {
        cfg.validate()?;
        if ens.g.len() != ens.len() || ens.h.len() != ens.len() {
            return arg("ensemble weights do not match teacher count");
        }
        let teacher_logits = ens
            .teachers
            .iter()
            .map(|t| t.forward(features))
            .collect::<Result<Vec<_>>>()?;
        check_kd_inputs(&logits, &teacher_logits, labels, &ens.g, cfg.tau)?;
        let scale = cfg.loss_scale();
        if cfg.gamma > 0.0 {
            let mut g = vec![0.0; d_logits.len()];
            out.nckd = nckd_impl(
                &logits,
                &teacher_logits,
                labels,
                &ens.g,
                cfg.tau,
                scale,
                Some(&mut g),
            );
            for (d, v) in d_logits.iter_mut().zip(&g) {
                *d += cfg.gamma * v;
            }
            out.loss += cfg.gamma * out.nckd;
        }
        if cfg.beta > 0.0 {
            let mut g = vec![0.0; d_logits.len()];
            out.tckd = tckd_impl(
                &logits,
                &teacher_logits,
                labels,
                &ens.h,
                cfg.tau,
                scale,
                Some(&mut g),
            );
            for (d, v) in d_logits.iter_mut().zip(&g) {
                *d += cfg.beta * v;
            }
            out.loss += cfg.beta * out.tckd;
        }
    }
    out.grads = params.backward(&trace, &d_logits)?;
    Ok(out)
}
