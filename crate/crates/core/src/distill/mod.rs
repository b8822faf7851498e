//! Teacher-student distillation: projections with temperature and
//! centering, the self / intra-slide / inter-slide cross-entropy losses,
//! their analytic gradients, momentum SGD, and the EMA teacher update.
//!
//! Every target (the other view, a prototype, or a matched prototype from a
//! neighbor slide) goes through the teacher head with centering and the
//! teacher temperature and is treated as a constant. Only the student
//! receives gradients.

mod checkpoint;
mod network;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CheckpointError,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use network::{
    Activation, EncoderParams, HeadParams, Linear, Mlp, MlpTrace, ModelConfig, Network,
};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DistillError {
    #[error("parameter shapes do not match")]
    ShapeMismatch,
    #[error("inter-slide loss needs at least one target")]
    NoTargets,
    #[error("invalid distillation setting: {0}")]
    Config(&'static str),
}

/// Head that turns a prototype into a distillation target. Either way the
/// target uses centering and the teacher temperature and is a constant.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeHead {
    #[default]
    Teacher,
    Student,
}

impl PrototypeHead {
    pub fn code(self) -> u32 {
        match self {
            PrototypeHead::Teacher => 0,
            PrototypeHead::Student => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(PrototypeHead::Teacher),
            1 => Some(PrototypeHead::Student),
            _ => None,
        }
    }
}

/// Temperatures and momenta of the teacher-student pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub tau_student: f64,
    pub tau_teacher: f64,
    pub ema_momentum: f64,
    pub center_momentum: f64,
    pub prototype_head: PrototypeHead,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau_student: 0.1,
            tau_teacher: 0.04,
            ema_momentum: 0.996,
            center_momentum: 0.9,
            prototype_head: PrototypeHead::Teacher,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if !(self.tau_student > 0.0 && self.tau_teacher > 0.0) {
            return Err(DistillError::Config("temperatures must be positive"));
        }
        if self.tau_teacher >= self.tau_student {
            return Err(DistillError::Config(
                "tau_teacher must be below tau_student",
            ));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) || !(0.0..=1.0).contains(&self.center_momentum)
        {
            return Err(DistillError::Config("momenta must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillState {
    pub student: Network,
    pub teacher: Network,
    pub center: Vec<f64>,
    pub tau_student: f64,
    pub tau_teacher: f64,
    pub ema_momentum: f64,
    pub center_momentum: f64,
    pub prototype_head: PrototypeHead,
}

impl DistillState {
    /// Random student, teacher as an exact copy, zero center.
    pub fn new<R: Rng + ?Sized>(
        model: &ModelConfig,
        cfg: &DistillConfig,
        rng: &mut R,
    ) -> Result<Self, DistillError> {
        cfg.validate()?;
        let student = Network::random(model, rng);
        Ok(DistillState {
            teacher: student.clone(),
            center: vec![0.0; model.proj_dim],
            student,
            tau_student: cfg.tau_student,
            tau_teacher: cfg.tau_teacher,
            ema_momentum: cfg.ema_momentum,
            center_momentum: cfg.center_momentum,
            prototype_head: cfg.prototype_head,
        })
    }

    pub fn proj_dim(&self) -> usize {
        self.center.len()
    }

    /// Teacher distribution for an embedding: softmax((head(z) - center) / tau_t).
    pub fn project_teacher(&self, z: &[f64]) -> Vec<f64> {
        self.teacher_distribution(&self.teacher.head.forward(z))
    }

    /// Student distribution for an embedding: softmax(head(z) / tau_s).
    pub fn project_student(&self, z: &[f64]) -> Vec<f64> {
        softmax(&self.student.head.forward(z), None, self.tau_student)
    }

    /// Natural log of [`project_student`](Self::project_student), computed
    /// without underflow.
    pub fn project_student_log(&self, z: &[f64]) -> Vec<f64> {
        log_softmax(&self.student.head.forward(z), None, self.tau_student)
    }

    /// Distillation target for a prototype embedding.
    pub fn project_prototype(&self, c: &[f64]) -> Vec<f64> {
        match self.prototype_head {
            PrototypeHead::Teacher => self.project_teacher(c),
            PrototypeHead::Student => self.teacher_distribution(&self.student.head.forward(c)),
        }
    }

    pub fn teacher_distribution(&self, logits: &[f64]) -> Vec<f64> {
        softmax(logits, Some(&self.center), self.tau_teacher)
    }

    pub fn teacher_embed(&self, x: &[f64]) -> Vec<f64> {
        self.teacher.embed(x)
    }

    pub fn student_embed(&self, x: &[f64]) -> Vec<f64> {
        self.student.embed(x)
    }
}

/// Numerically stable `softmax((logits - shift) / tau)`.
pub fn softmax(logits: &[f64], shift: Option<&[f64]>, tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = match shift {
        Some(c) => logits.iter().zip(c).map(|(l, c)| (l - c) / tau).collect(),
        None => logits.iter().map(|l| l / tau).collect(),
    };
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `ln softmax((logits - shift) / tau)`.
pub fn log_softmax(logits: &[f64], shift: Option<&[f64]>, tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = match shift {
        Some(c) => logits.iter().zip(c).map(|(l, c)| (l - c) / tau).collect(),
        None => logits.iter().map(|l| l / tau).collect(),
    };
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = scaled.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scaled.into_iter().map(|s| s - max - log_sum).collect()
}

/// `H(p, q)` given `ln q`; finite even where `q` underflows.
pub fn cross_entropy_log(p: &[f64], log_q: &[f64]) -> f64 {
    -p.iter()
        .zip(log_q)
        .map(|(a, b)| if *a == 0.0 { 0.0 } else { a * b })
        .sum::<f64>()
}

/// `H(p, q) = -sum_i p_i ln q_i`.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    -p.iter()
        .zip(q)
        .map(|(a, b)| if *a == 0.0 { 0.0 } else { a * b.ln() })
        .sum::<f64>()
}

pub fn entropy(p: &[f64]) -> f64 {
    cross_entropy(p, p)
}

/// Symmetrized self-distillation loss of one region's two views.
pub fn loss_self(state: &DistillState, view1: &[f64], view2: &[f64]) -> f64 {
    let t1 = state.project_teacher(&state.teacher_embed(view1));
    let t2 = state.project_teacher(&state.teacher_embed(view2));
    let s1 = state.project_student_log(&state.student_embed(view1));
    let s2 = state.project_student_log(&state.student_embed(view2));
    0.5 * (cross_entropy_log(&t1, &s2) + cross_entropy_log(&t2, &s1))
}

/// Distillation from the teacher projection of `prototype`, averaged over
/// the student views.
pub fn loss_intra(state: &DistillState, prototype: &[f64], views: &[&[f64]]) -> f64 {
    let target = state.project_prototype(prototype);
    let sum: f64 = views
        .iter()
        .map(|v| cross_entropy_log(&target, &state.project_student_log(&state.student_embed(v))))
        .sum();
    sum / views.len() as f64
}

/// Mean distillation from the teacher projections of the matched
/// prototypes of the K neighbor slides, averaged over the student views.
pub fn loss_inter(
    state: &DistillState,
    targets: &[&[f64]],
    views: &[&[f64]],
) -> Result<f64, DistillError> {
    if targets.is_empty() {
        return Err(DistillError::NoTargets);
    }
    let projected: Vec<Vec<f64>> = targets.iter().map(|c| state.project_prototype(c)).collect();
    let sum: f64 = views
        .iter()
        .map(|v| {
            let s = state.project_student_log(&state.student_embed(v));
            let inner: f64 = projected.iter().map(|t| cross_entropy_log(t, &s)).sum();
            inner / targets.len() as f64
        })
        .sum();
    Ok(sum / views.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha1: 1.0,
            alpha2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), DistillError> {
        if self.alpha1.is_finite()
            && self.alpha2.is_finite()
            && self.alpha1 >= 0.0
            && self.alpha2 >= 0.0
        {
            Ok(())
        } else {
            Err(DistillError::Config("loss weights must be finite and >= 0"))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub self_distill: f64,
    pub intra: f64,
    pub inter: f64,
}

pub fn loss_total(weights: LossWeights, c: LossComponents) -> f64 {
    c.self_distill + weights.alpha1 * c.intra + weights.alpha2 * c.inter
}

/// One region of a minibatch with its distillation targets.
#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub view1: Vec<f64>,
    pub view2: Vec<f64>,
    pub intra_target: Option<&'a [f64]>,
    pub inter_targets: Vec<&'a [f64]>,
}

/// Minibatch losses. Each component is averaged over the items where it is
/// active; a component with no active item contributes 0.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchLosses {
    pub components: LossComponents,
    pub total: f64,
    pub intra_items: usize,
    pub inter_items: usize,
}

/// Minibatch objective composed from the public per-region losses.
pub fn batch_loss(
    state: &DistillState,
    weights: LossWeights,
    batch: &[BatchItem<'_>],
) -> BatchLosses {
    let mut out = BatchLosses::default();
    let (mut self_sum, mut intra_sum, mut inter_sum) = (0.0, 0.0, 0.0);
    for item in batch {
        let views: [&[f64]; 2] = [&item.view1, &item.view2];
        self_sum += loss_self(state, &item.view1, &item.view2);
        if let Some(c) = item.intra_target {
            intra_sum += loss_intra(state, c, &views);
            out.intra_items += 1;
        }
        if !item.inter_targets.is_empty() {
            inter_sum += loss_inter(state, &item.inter_targets, &views).expect("non-empty");
            out.inter_items += 1;
        }
    }
    out.components = LossComponents {
        self_distill: self_sum / batch.len() as f64,
        intra: mean_or_zero(intra_sum, out.intra_items),
        inter: mean_or_zero(inter_sum, out.inter_items),
    };
    out.total = loss_total(weights, out.components);
    out
}

fn mean_or_zero(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Analytic student gradients for one minibatch.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub grads: Network,
    pub losses: BatchLosses,
    /// Raw teacher head outputs for both views of every item, item-major.
    pub teacher_logits: Vec<Vec<f64>>,
}

struct ItemPass {
    grads: Network,
    self_loss: f64,
    intra_loss: Option<f64>,
    inter_loss: Option<f64>,
    teacher_logits: [Vec<f64>; 2],
}

/// Exact gradients of the minibatch objective with respect to every
/// student parameter. Items are processed in parallel; partial gradients
/// are summed in item order so the result does not depend on the thread
/// count.
pub fn gradients(
    state: &DistillState,
    weights: LossWeights,
    batch: &[BatchItem<'_>],
) -> StepOutput {
    assert!(!batch.is_empty(), "minibatch must be non-empty");
    let n = batch.len() as f64;
    let intra_items = batch.iter().filter(|b| b.intra_target.is_some()).count();
    let inter_items = batch.iter().filter(|b| !b.inter_targets.is_empty()).count();
    let w_self = 0.5 / n;
    let w_intra = if intra_items > 0 {
        weights.alpha1 * 0.5 / intra_items as f64
    } else {
        0.0
    };
    let w_inter = if inter_items > 0 {
        weights.alpha2 * 0.5 / inter_items as f64
    } else {
        0.0
    };

    let passes: Vec<ItemPass> = batch
        .par_iter()
        .map(|item| item_pass(state, item, w_self, w_intra, w_inter))
        .collect();

    let mut grads = state.student.zeros_like();
    let mut teacher_logits = Vec::with_capacity(2 * batch.len());
    let (mut self_sum, mut intra_sum, mut inter_sum) = (0.0, 0.0, 0.0);
    for pass in passes {
        grads.accumulate(&pass.grads);
        self_sum += pass.self_loss;
        intra_sum += pass.intra_loss.unwrap_or(0.0);
        inter_sum += pass.inter_loss.unwrap_or(0.0);
        let [a, b] = pass.teacher_logits;
        teacher_logits.push(a);
        teacher_logits.push(b);
    }
    let components = LossComponents {
        self_distill: self_sum / n,
        intra: mean_or_zero(intra_sum, intra_items),
        inter: mean_or_zero(inter_sum, inter_items),
    };
    StepOutput {
        grads,
        losses: BatchLosses {
            components,
            total: loss_total(weights, components),
            intra_items,
            inter_items,
        },
        teacher_logits,
    }
}

fn item_pass(
    state: &DistillState,
    item: &BatchItem<'_>,
    w_self: f64,
    w_intra: f64,
    w_inter: f64,
) -> ItemPass {
    let views: [&[f64]; 2] = [&item.view1, &item.view2];
    let teacher_logits = views.map(|v| state.teacher.head.forward(&state.teacher_embed(v)));
    let teacher_probs = [
        state.teacher_distribution(&teacher_logits[0]),
        state.teacher_distribution(&teacher_logits[1]),
    ];
    let intra_target = item.intra_target.map(|c| state.project_prototype(c));
    let inter_targets: Vec<Vec<f64>> = item
        .inter_targets
        .iter()
        .map(|c| state.project_prototype(c))
        .collect();
    let k = inter_targets.len() as f64;

    let mut grads = state.student.zeros_like();
    let mut self_terms = [0.0; 2];
    let mut intra_terms = [0.0; 2];
    let mut inter_terms = [0.0; 2];
    for a in 0..2 {
        let enc_trace = state.student.encoder.forward_traced(views[a]);
        let head_trace = state.student.head.forward_traced(&enc_trace.output);
        let log_s = log_softmax(&head_trace.output, None, state.tau_student);
        let s: Vec<f64> = log_s.iter().map(|v| v.exp()).collect();

        // dH(t, softmax(l / tau)) / dl = (softmax - t) / tau, so every term
        // contributes weight * (s - target) / tau.
        let mut weight_total = 0.0;
        let mut target_mix = vec![0.0; s.len()];
        let mut add = |w: f64, t: &[f64]| {
            weight_total += w;
            target_mix.iter_mut().zip(t).for_each(|(m, v)| *m += w * v);
        };

        let cross = &teacher_probs[1 - a];
        self_terms[a] = cross_entropy_log(cross, &log_s);
        add(w_self, cross);
        if let Some(t) = &intra_target {
            intra_terms[a] = cross_entropy_log(t, &log_s);
            add(w_intra, t);
        }
        if !inter_targets.is_empty() {
            let sum: f64 = inter_targets
                .iter()
                .map(|t| cross_entropy_log(t, &log_s))
                .sum();
            inter_terms[a] = sum / k;
            for t in &inter_targets {
                add(w_inter / k, t);
            }
        }
        let dlogits: Vec<f64> = s
            .iter()
            .zip(&target_mix)
            .map(|(p, m)| (weight_total * p - m) / state.tau_student)
            .collect();
        let dz = state
            .student
            .head
            .backward(&head_trace, &dlogits, &mut grads.head);
        state
            .student
            .encoder
            .backward(&enc_trace, &dz, &mut grads.encoder);
    }
    // Same association as loss_self / loss_intra / loss_inter.
    ItemPass {
        grads,
        self_loss: 0.5 * (self_terms[1] + self_terms[0]),
        intra_loss: intra_target.map(|_| (intra_terms[0] + intra_terms[1]) / 2.0),
        inter_loss: (!inter_targets.is_empty()).then(|| (inter_terms[0] + inter_terms[1]) / 2.0),
        teacher_logits,
    }
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut Network, max_norm: f64) -> f64 {
    let norm = grads
        .tensors()
        .flat_map(|t| t.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads
            .tensors_mut()
            .for_each(|t| t.iter_mut().for_each(|g| *g *= scale));
    }
    norm
}

/// Classical momentum SGD: `v <- mu * v + g`, `p <- p - lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: Network,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, like: &Network) -> Result<Self, DistillError> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(DistillError::Config(
                "learning rate must be finite and >= 0",
            ));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(DistillError::Config("momentum must lie in [0, 1)"));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: like.zeros_like(),
        })
    }

    pub fn step(&mut self, params: &mut Network, grads: &Network) -> Result<(), DistillError> {
        if !params.same_shape(grads) || !params.same_shape(&self.velocity) {
            return Err(DistillError::ShapeMismatch);
        }
        let (lr, mu) = (self.lr, self.momentum);
        for ((p, g), v) in params
            .tensors_mut()
            .zip(grads.tensors())
            .zip(self.velocity.tensors_mut())
        {
            for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

/// `teacher <- m * teacher + (1 - m) * student` on every parameter.
/// Entries where teacher and student already agree are left untouched, so
/// an unchanged student keeps an identical teacher bit-for-bit.
pub fn ema_update(state: &mut DistillState, momentum: f64) {
    let DistillState {
        student, teacher, ..
    } = state;
    for (t, s) in teacher.tensors_mut().zip(student.tensors()) {
        for (t, s) in t.iter_mut().zip(s) {
            if *t != *s {
                *t = momentum * *t + (1.0 - momentum) * s;
            }
        }
    }
}

/// `center <- c_m * center + (1 - c_m) * mean(batch logits)`.
pub fn update_center(state: &mut DistillState, batch_logits: &[Vec<f64>]) {
    assert!(
        !batch_logits.is_empty(),
        "center update needs a non-empty batch"
    );
    let mut mean = vec![0.0; state.center.len()];
    for row in batch_logits {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    let n = batch_logits.len() as f64;
    let cm = state.center_momentum;
    for (c, m) in state.center.iter_mut().zip(&mean) {
        *c = cm * *c + (1.0 - cm) * (m / n);
    }
}
