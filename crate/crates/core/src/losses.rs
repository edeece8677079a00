//! Supervision and distillation losses, and the teacher/student batch
//! objectives built from them.
//!
//! Every per-instance loss returns its value together with the gradient with
//! respect to the logits it reads. The batch objectives forward every
//! instance, combine the per-head logit gradients and backpropagate them into
//! the network's gradient buffer.
//!
//! Losses are summed over instances, never averaged.

use thiserror::Error;

use crate::data::Instance;
use crate::model::{ForwardCache, ModelOutput, MultitaskNet, OutputGrads, Task, AU_DIM, EXPR_DIM, VA_BLOCK, VA_DIM};
use crate::numerics::{
    self, bce, binary_entropy, ccc_with_grad, ce, entropy, sigmoid_clamped, softmax_t_into, BinGrid, NumericsError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("batch has {0} valence-arousal instances; the CCC term needs at least 2")]
    TooFewVaInstances(usize),
    #[error("batch subsets have unequal sizes {0:?}")]
    UnequalSubsets([usize; 3]),
    #[error("batch needs at least 2 instances per task, got {0}")]
    BatchTooSmall(usize),
    #[error("instance {id} is labelled for {found:?} but was placed in the {expected:?} subset")]
    WrongSubset { id: u64, expected: Task, found: Task },
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("non-finite loss value in {0:?} term")]
    NonFinite(Task),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Ground truth for exactly one task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskLabel {
    /// Presence of each of the 8 action units.
    Au([bool; AU_DIM]),
    /// Expression class index in `0..7`.
    Expr(usize),
    /// Valence and arousal, each in `[-1, 1]`.
    Va { valence: f64, arousal: f64 },
}

impl TaskLabel {
    pub fn task(&self) -> Task {
        match self {
            TaskLabel::Au(_) => Task::Au,
            TaskLabel::Expr(_) => Task::Expr,
            TaskLabel::Va { .. } => Task::Va,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        match *self {
            TaskLabel::Au(_) => Ok(()),
            TaskLabel::Expr(k) if k < EXPR_DIM => Ok(()),
            TaskLabel::Expr(k) => Err(LossError::InvalidLabel(format!(
                "expression class {k} not in 0..{EXPR_DIM}"
            ))),
            TaskLabel::Va { valence, arousal } => {
                for (name, v) in [("valence", valence), ("arousal", arousal)] {
                    if !(-1.0..=1.0).contains(&v) {
                        return Err(LossError::InvalidLabel(format!("{name} {v} outside [-1, 1]")));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn au_targets(bits: &[bool; AU_DIM]) -> [f64; AU_DIM] {
        bits.map(|b| if b { 1.0 } else { 0.0 })
    }
}

/// Which instances supply the teacher targets for the unlabelled tasks in
/// the student objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CrossTaskSource {
    /// Each instance is distilled on the two tasks it has no label for.
    #[default]
    SameInstance,
    /// Instance `n` of task `i` pulls in the teacher output for instance `n`
    /// of every other task `j`, evaluated on head `j`.
    PairedInstance,
    /// No cross-task distillation; diagnostic only.
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub temperature: f64,
    /// weight of the ground-truth term on the labelled task
    pub lambda: f64,
    pub cross_task: CrossTaskSource,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 1.5,
            lambda: 0.6,
            cross_task: CrossTaskSource::SameInstance,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(NumericsError::NonPositiveTemperature(self.temperature).into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(LossError::InvalidLabel(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// A loss value and its gradient with respect to the logits it read.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// BCE between the AU bits and the sigmoid of the logits.
pub fn loss_au(y: &[bool; AU_DIM], logits: &[f64]) -> LossGrad {
    assert_eq!(logits.len(), AU_DIM, "loss_au: expected {AU_DIM} logits");
    let targets = TaskLabel::au_targets(y);
    let probs: Vec<f64> = logits.iter().map(|&l| sigmoid_clamped(l)).collect();
    LossGrad {
        value: bce(&targets, &probs),
        grad: probs.iter().zip(&targets).map(|(p, t)| p - t).collect(),
    }
}

/// Categorical cross entropy against the standard softmax.
pub fn loss_expr(y: usize, logits: &[f64]) -> LossGrad {
    assert_eq!(logits.len(), EXPR_DIM, "loss_expr: expected {EXPR_DIM} logits");
    assert!(y < EXPR_DIM, "loss_expr: class {y} out of range");
    onehot_ce(y, logits)
}

fn onehot_ce(y: usize, logits: &[f64]) -> LossGrad {
    let mut p = vec![0.0; logits.len()];
    softmax_t_into(logits, 1.0, &mut p);
    let value = -p[y].max(numerics::PROB_EPS).ln();
    p[y] -= 1.0;
    LossGrad { value, grad: p }
}

/// Bin-classification part of the VA loss: one cross entropy per block
/// against the one-hot bin of the ground-truth value.
pub fn loss_va_class(valence: f64, arousal: f64, va_logits: &[f64], grid: &BinGrid) -> Result<LossGrad, LossError> {
    assert_eq!(va_logits.len(), VA_DIM, "loss_va_class: expected {VA_DIM} logits");
    let vb = grid.to_bin(valence)?;
    let ab = grid.to_bin(arousal)?;
    let v = onehot_ce(vb, &va_logits[..VA_BLOCK]);
    let a = onehot_ce(ab, &va_logits[VA_BLOCK..]);
    let mut grad = v.grad;
    grad.extend_from_slice(&a.grad);
    Ok(LossGrad {
        value: v.value + a.value,
        grad,
    })
}

/// VA supervision over all VA instances of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct VaBatchLoss {
    /// classification loss plus the instance's 1/B share of the CCC term
    pub per_instance: Vec<f64>,
    /// gradient of the summed loss with respect to each instance's VA logits
    pub grads: Vec<[f64; VA_DIM]>,
    /// batch CCC for valence and arousal
    pub ccc: [f64; 2],
    /// summed classification loss
    pub class_total: f64,
    /// `sum_i (1 - CCC_i)`
    pub ccc_term: f64,
}

impl VaBatchLoss {
    pub fn total(&self) -> f64 {
        self.class_total + self.ccc_term
    }
}

/// Combined classification and CCC loss for the VA instances of a batch.
///
/// The continuous prediction of each block is the bin-center expectation
/// under the standard softmax; CCC couples all instances, so every
/// instance's gradient depends on the whole batch.
pub fn loss_va(labels: &[(f64, f64)], va_logits: &[&[f64]], grid: &BinGrid) -> Result<VaBatchLoss, LossError> {
    assert_eq!(labels.len(), va_logits.len(), "loss_va: label/logit count mismatch");
    let b = labels.len();
    if b < 2 {
        return Err(LossError::TooFewVaInstances(b));
    }
    let centers = grid.centers();
    let mut per_instance = Vec::with_capacity(b);
    let mut grads = Vec::with_capacity(b);
    // softmax of each block, kept for the expectation gradient
    let mut probs = Vec::with_capacity(b);
    let mut preds = [vec![0.0; b], vec![0.0; b]];
    let mut class_total = 0.0;
    for (n, (&(v, a), logits)) in labels.iter().zip(va_logits).enumerate() {
        let c = loss_va_class(v, a, logits, grid)?;
        class_total += c.value;
        per_instance.push(c.value);
        let mut g = [0.0; VA_DIM];
        g.copy_from_slice(&c.grad);
        grads.push(g);
        let mut p = [0.0; VA_DIM];
        for blk in 0..2 {
            let r = blk * VA_BLOCK..(blk + 1) * VA_BLOCK;
            softmax_t_into(&logits[r.clone()], 1.0, &mut p[r.clone()]);
            preds[blk][n] = numerics::dot(centers, &p[r]);
        }
        probs.push(p);
    }
    let truths = [
        labels.iter().map(|l| l.0).collect::<Vec<_>>(),
        labels.iter().map(|l| l.1).collect::<Vec<_>>(),
    ];
    let mut ccc = [0.0; 2];
    let mut ccc_term = 0.0;
    for blk in 0..2 {
        let (value, dccc) = ccc_with_grad(&truths[blk], &preds[blk])?;
        ccc[blk] = value;
        ccc_term += 1.0 - value;
        for n in 0..b {
            // d(1 - CCC)/d logit_d = -dCCC/dt * p_d (c_d - t)
            let r = blk * VA_BLOCK..(blk + 1) * VA_BLOCK;
            let scale = -dccc[n];
            let t = preds[blk][n];
            for (d, k) in r.enumerate() {
                grads[n][k] += scale * probs[n][k] * (centers[d] - t);
            }
        }
    }
    let share = ccc_term / b as f64;
    for v in &mut per_instance {
        *v += share;
    }
    Ok(VaBatchLoss {
        per_instance,
        grads,
        ccc,
        class_total,
        ccc_term,
    })
}

/// BCE between teacher and student AU probabilities.
pub fn distill_au(teacher_logits: &[f64], student_logits: &[f64]) -> LossGrad {
    assert_eq!(teacher_logits.len(), AU_DIM, "distill_au: teacher width");
    assert_eq!(student_logits.len(), AU_DIM, "distill_au: student width");
    let t: Vec<f64> = teacher_logits.iter().map(|&l| sigmoid_clamped(l)).collect();
    let s: Vec<f64> = student_logits.iter().map(|&l| sigmoid_clamped(l)).collect();
    LossGrad {
        value: bce(&t, &s),
        grad: s.iter().zip(&t).map(|(s, t)| s - t).collect(),
    }
}

/// The BCE floor of [`distill_au`]: total binary entropy of the teacher.
pub fn distill_au_floor(teacher_logits: &[f64]) -> f64 {
    let t: Vec<f64> = teacher_logits.iter().map(|&l| sigmoid_clamped(l)).collect();
    binary_entropy(&t)
}

fn soft_ce(teacher: &[f64], student: &[f64], temperature: f64, grad: &mut [f64]) -> f64 {
    let mut pt = vec![0.0; teacher.len()];
    let mut ps = vec![0.0; student.len()];
    softmax_t_into(teacher, temperature, &mut pt);
    softmax_t_into(student, temperature, &mut ps);
    for ((g, s), t) in grad.iter_mut().zip(&ps).zip(&pt) {
        *g = (s - t) / temperature;
    }
    ce(&pt, &ps)
}

fn soft_entropy(teacher: &[f64], temperature: f64) -> f64 {
    let mut pt = vec![0.0; teacher.len()];
    softmax_t_into(teacher, temperature, &mut pt);
    entropy(&pt)
}

fn check_temperature(temperature: f64) -> Result<(), LossError> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(NumericsError::NonPositiveTemperature(temperature).into())
    }
}

/// Cross entropy between the temperature-softened teacher and student
/// expression distributions. The gradient carries the `1/T` factor and no
/// `T^2` compensation.
pub fn distill_expr(teacher_logits: &[f64], student_logits: &[f64], temperature: f64) -> Result<LossGrad, LossError> {
    assert_eq!(teacher_logits.len(), EXPR_DIM, "distill_expr: teacher width");
    assert_eq!(student_logits.len(), EXPR_DIM, "distill_expr: student width");
    check_temperature(temperature)?;
    let mut grad = vec![0.0; EXPR_DIM];
    let value = soft_ce(teacher_logits, student_logits, temperature, &mut grad);
    Ok(LossGrad { value, grad })
}

/// Entropy floor of [`distill_expr`].
pub fn distill_expr_floor(teacher_logits: &[f64], temperature: f64) -> f64 {
    soft_entropy(teacher_logits, temperature)
}

/// [`distill_expr`] applied separately to the valence and arousal blocks.
pub fn distill_va(teacher_logits: &[f64], student_logits: &[f64], temperature: f64) -> Result<LossGrad, LossError> {
    assert_eq!(teacher_logits.len(), VA_DIM, "distill_va: teacher width");
    assert_eq!(student_logits.len(), VA_DIM, "distill_va: student width");
    check_temperature(temperature)?;
    let mut grad = vec![0.0; VA_DIM];
    let (gv, ga) = grad.split_at_mut(VA_BLOCK);
    let value = soft_ce(
        &teacher_logits[..VA_BLOCK],
        &student_logits[..VA_BLOCK],
        temperature,
        gv,
    ) + soft_ce(
        &teacher_logits[VA_BLOCK..],
        &student_logits[VA_BLOCK..],
        temperature,
        ga,
    );
    Ok(LossGrad { value, grad })
}

/// Entropy floor of [`distill_va`].
pub fn distill_va_floor(teacher_logits: &[f64], temperature: f64) -> f64 {
    soft_entropy(&teacher_logits[..VA_BLOCK], temperature) + soft_entropy(&teacher_logits[VA_BLOCK..], temperature)
}

/// Distillation loss for one head, dispatching on the task.
pub fn distill(
    task: Task,
    teacher_logits: &[f64],
    student_logits: &[f64],
    temperature: f64,
) -> Result<LossGrad, LossError> {
    match task {
        Task::Au => Ok(distill_au(teacher_logits, student_logits)),
        Task::Expr => distill_expr(teacher_logits, student_logits, temperature),
        Task::Va => distill_va(teacher_logits, student_logits, temperature),
    }
}

/// One batch: `N` instances for each of the three tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    subsets: [Vec<Instance>; 3],
}

impl Batch {
    /// Builds a batch with the same number `N >= 2` of instances per task.
    pub fn new(au: Vec<Instance>, expr: Vec<Instance>, va: Vec<Instance>) -> Result<Self, LossError> {
        let sizes = [au.len(), expr.len(), va.len()];
        if sizes[0] != sizes[1] || sizes[1] != sizes[2] {
            return Err(LossError::UnequalSubsets(sizes));
        }
        if sizes[0] < 2 {
            return Err(LossError::BatchTooSmall(sizes[0]));
        }
        Self::partial(au, expr, va)
    }

    /// Builds a batch without the equal-cardinality requirement. Used for
    /// diagnostics; the VA subset must still be empty or hold at least two
    /// instances.
    pub fn partial(au: Vec<Instance>, expr: Vec<Instance>, va: Vec<Instance>) -> Result<Self, LossError> {
        let subsets = [au, expr, va];
        for task in Task::ALL {
            for inst in &subsets[task.index()] {
                if inst.task() != task {
                    return Err(LossError::WrongSubset {
                        id: inst.id,
                        expected: task,
                        found: inst.task(),
                    });
                }
                inst.label.validate()?;
            }
        }
        if subsets[2].len() == 1 {
            return Err(LossError::TooFewVaInstances(1));
        }
        Ok(Self { subsets })
    }

    pub fn subset(&self, task: Task) -> &[Instance] {
        &self.subsets[task.index()]
    }

    /// Instances per task when the batch is balanced.
    pub fn per_task(&self) -> usize {
        self.subsets[0].len()
    }

    pub fn len(&self) -> usize {
        self.subsets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Instance> {
        self.subsets.iter().flatten()
    }
}

/// Value of a batch objective, split into its parts.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    /// summed supervision losses excluding the CCC term (unweighted)
    pub supervision: f64,
    /// `sum_i (1 - CCC_i)` over the VA subset (unweighted)
    pub ccc_term: f64,
    /// same-task distillation, unweighted
    pub distill_same: f64,
    /// distillation on the unlabelled tasks
    pub distill_cross: f64,
}

struct Forwarded {
    output: ModelOutput,
    cache: ForwardCache,
    grads: OutputGrads,
}

fn forward_all(net: &MultitaskNet, batch: &Batch) -> Vec<Forwarded> {
    batch
        .iter()
        .map(|inst| {
            let (output, cache) = net.forward_cached(&inst.features);
            Forwarded {
                output,
                cache,
                grads: OutputGrads::zeros(),
            }
        })
        .collect()
}

/// Ground-truth losses for every instance, weighted by `weight`, added into
/// the per-instance logit gradients. Returns (supervision, ccc_term).
fn supervise(batch: &Batch, fwd: &mut [Forwarded], weight: f64, grid: &BinGrid) -> Result<(f64, f64), LossError> {
    let mut supervision = 0.0;
    let mut va_labels = Vec::new();
    let mut va_rows = Vec::new();
    for (row, inst) in batch.iter().enumerate() {
        let f = &mut fwd[row];
        match inst.label {
            TaskLabel::Au(bits) => {
                let l = loss_au(&bits, &f.output.au_logits);
                supervision += l.value;
                axpy(weight, &l.grad, &mut f.grads.au_logits);
            }
            TaskLabel::Expr(k) => {
                let l = loss_expr(k, &f.output.expr_logits);
                supervision += l.value;
                axpy(weight, &l.grad, &mut f.grads.expr_logits);
            }
            TaskLabel::Va { valence, arousal } => {
                va_labels.push((valence, arousal));
                va_rows.push(row);
            }
        }
    }
    let mut ccc_term = 0.0;
    if !va_rows.is_empty() {
        let logits: Vec<&[f64]> = va_rows.iter().map(|&r| &fwd[r].output.va_logits[..]).collect();
        let va = loss_va(&va_labels, &logits, grid)?;
        supervision += va.class_total;
        ccc_term = va.ccc_term;
        for (g, &r) in va.grads.iter().zip(&va_rows) {
            axpy(weight, g, &mut fwd[r].grads.va_logits);
        }
    }
    if !supervision.is_finite() || !ccc_term.is_finite() {
        return Err(LossError::NonFinite(Task::Va));
    }
    Ok((supervision, ccc_term))
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

/// Teacher objective: each instance contributes only the supervision loss
/// of its own task, read from that task's head.
///
/// Overwrites the gradient buffer of `net` with the gradient of the total.
pub fn teacher_batch_loss(batch: &Batch, net: &mut MultitaskNet) -> Result<BatchLoss, LossError> {
    let grid = BinGrid::default();
    let mut fwd = forward_all(net, batch);
    let (supervision, ccc_term) = supervise(batch, &mut fwd, 1.0, &grid)?;
    net.zero_grads();
    for f in &fwd {
        net.backward(&f.cache, &f.grads);
    }
    Ok(BatchLoss {
        total: supervision + ccc_term,
        supervision,
        ccc_term,
        ..BatchLoss::default()
    })
}

/// Student objective: weighted ground truth and same-task distillation on
/// the labelled task, plus distillation from the frozen teacher on the
/// unlabelled tasks.
///
/// Overwrites the gradient buffer of `student`; `teacher` is only read.
pub fn student_batch_loss(
    batch: &Batch,
    teacher: &MultitaskNet,
    student: &mut MultitaskNet,
    cfg: &DistillConfig,
) -> Result<BatchLoss, LossError> {
    cfg.validate()?;
    let grid = BinGrid::default();
    let lambda = cfg.lambda;
    let temp = cfg.temperature;
    let mut fwd = forward_all(student, batch);
    let teacher_out: Vec<ModelOutput> = batch.iter().map(|i| teacher.forward(&i.features)).collect();

    let (supervision, ccc_term) = supervise(batch, &mut fwd, lambda, &grid)?;
    let mut distill_same = 0.0;
    let mut distill_cross = 0.0;

    // row index of instance n of each task, for the paired reading
    let offsets = {
        let mut o = [0usize; 3];
        let mut acc = 0;
        for t in Task::ALL {
            o[t.index()] = acc;
            acc += batch.subset(t).len();
        }
        o
    };

    for (row, inst) in batch.iter().enumerate() {
        let own = inst.task();
        let d = distill(own, teacher_out[row].head(own), fwd[row].output.head(own), temp)?;
        distill_same += d.value;
        axpy(1.0 - lambda, &d.grad, fwd[row].grads.head_mut(own));

        for other in Task::ALL.into_iter().filter(|&t| t != own) {
            let target_row = match cfg.cross_task {
                CrossTaskSource::Disabled => continue,
                CrossTaskSource::SameInstance => row,
                CrossTaskSource::PairedInstance => {
                    let n = row - offsets[own.index()];
                    if n >= batch.subset(other).len() {
                        continue;
                    }
                    offsets[other.index()] + n
                }
            };
            let d = distill(
                other,
                teacher_out[target_row].head(other),
                fwd[target_row].output.head(other),
                temp,
            )?;
            distill_cross += d.value;
            axpy(1.0, &d.grad, fwd[target_row].grads.head_mut(other));
        }
    }
    if !(distill_same + distill_cross).is_finite() {
        return Err(LossError::NonFinite(Task::Expr));
    }

    student.zero_grads();
    for f in &fwd {
        student.backward(&f.cache, &f.grads);
    }
    Ok(BatchLoss {
        total: lambda * (supervision + ccc_term) + (1.0 - lambda) * distill_same + distill_cross,
        supervision,
        ccc_term,
        distill_same,
        distill_cross,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetConfig;
    use crate::numerics::{grad_check, GRAD_CHECK_STEP};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
    }

    #[test]
    fn loss_au_examples() {
        let mut y = [false; 8];
        y[0] = true;
        let l = loss_au(&y, &[0.0; 8]);
        assert_abs_diff_eq!(l.value, 8.0 * LN_2, epsilon = 1e-9);
        assert_eq!(l.grad[0], -0.5);
        assert!(l.grad[1..].iter().all(|&g| g == 0.5));
        let logits: Vec<f64> = y.iter().map(|&b| if b { 60.0 } else { -60.0 }).collect();
        assert!(loss_au(&y, &logits).value < 1e-9);
    }

    #[test]
    fn loss_expr_examples() {
        for y in 0..7 {
            assert_abs_diff_eq!(loss_expr(y, &[0.0; 7]).value, 7f64.ln(), epsilon = 1e-9);
        }
        let mut logits = [-50.0; 7];
        logits[3] = 50.0;
        assert!(loss_expr(3, &logits).value < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let l = loss_expr(rng.gen_range(0..7), &rand_vec(&mut rng, 7, 4.0));
            assert!(l.grad.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn loss_va_class_examples() {
        let g = BinGrid::default();
        let l = loss_va_class(0.3, -0.7, &[0.0; 40], &g).unwrap();
        assert_abs_diff_eq!(l.value, 2.0 * 20f64.ln(), epsilon = 1e-9);

        let mut logits = [-50.0; 40];
        logits[g.to_bin(0.3).unwrap()] = 50.0;
        logits[20 + g.to_bin(-0.7).unwrap()] = 50.0;
        assert!(loss_va_class(0.3, -0.7, &logits, &g).unwrap().value < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = rand_vec(&mut rng, 40, 3.0);
        let mut other = base.clone();
        for v in &mut other[20..] {
            *v += 1.7;
        }
        other[25] -= 4.0;
        let a = loss_va_class(0.1, 0.1, &base, &g).unwrap();
        let b = loss_va_class(0.1, 0.1, &other, &g).unwrap();
        assert_eq!(a.grad[..20], b.grad[..20]);

        assert!(loss_va_class(1.2, 0.0, &base, &g).is_err());
    }

    #[test]
    fn loss_va_ccc_allocation() {
        let g = BinGrid::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels: Vec<(f64, f64)> = (0..5)
            .map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let logits: Vec<Vec<f64>> = (0..5).map(|_| rand_vec(&mut rng, 40, 2.0)).collect();
        let refs: Vec<&[f64]> = logits.iter().map(|v| v.as_slice()).collect();
        let va = loss_va(&labels, &refs, &g).unwrap();
        let sum: f64 = va.per_instance.iter().sum();
        assert_abs_diff_eq!(sum, va.class_total + va.ccc_term, epsilon = 1e-12);
        let class: f64 = labels
            .iter()
            .zip(&refs)
            .map(|(&(v, a), l)| loss_va_class(v, a, l, &g).unwrap().value)
            .sum();
        assert_abs_diff_eq!(va.class_total, class, epsilon = 1e-12);

        assert_eq!(
            loss_va(&labels[..1], &refs[..1], &g).unwrap_err(),
            LossError::TooFewVaInstances(1)
        );
    }

    #[test]
    fn loss_va_perfect_continuous_prediction() {
        // one-hot-saturated logits make each prediction a bin center; use
        // those centers as ground truth so CCC = 1.
        let g = BinGrid::default();
        let bins = [(2usize, 17usize), (9, 4), (15, 11)];
        let labels: Vec<(f64, f64)> = bins.iter().map(|&(v, a)| (g.centers()[v], g.centers()[a])).collect();
        let logits: Vec<Vec<f64>> = bins
            .iter()
            .map(|&(v, a)| {
                let mut l = vec![-40.0; 40];
                l[v] = 40.0;
                l[20 + a] = 40.0;
                l
            })
            .collect();
        let refs: Vec<&[f64]> = logits.iter().map(|v| v.as_slice()).collect();
        let va = loss_va(&labels, &refs, &g).unwrap();
        assert!(va.ccc_term.abs() < 1e-12);
        assert_abs_diff_eq!(va.total(), va.class_total, epsilon = 1e-12);
    }

    #[test]
    fn loss_va_gradient_matches_finite_differences() {
        let g = BinGrid::default();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
            let labels: Vec<(f64, f64)> = (0..4)
                .map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let flat = rand_vec(&mut rng, 160, 2.0);
            let eval = |x: &[f64]| {
                let refs: Vec<&[f64]> = x.chunks(40).collect();
                loss_va(&labels, &refs, &g).unwrap()
            };
            let va = eval(&flat);
            let analytic: Vec<f64> = va.grads.iter().flatten().copied().collect();
            let r = grad_check(|x| eval(x).total(), &flat, &analytic, GRAD_CHECK_STEP).unwrap();
            assert!(r.max_rel_error < 1e-5, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn distill_au_examples() {
        assert_abs_diff_eq!(distill_au(&[0.0; 8], &[0.0; 8]).value, 8.0 * LN_2, epsilon = 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = rand_vec(&mut rng, 8, 3.0);
        let l = distill_au(&t, &t);
        assert!(l.grad.iter().all(|&g| g == 0.0));
        assert_abs_diff_eq!(l.value, distill_au_floor(&t), epsilon = 1e-12);
        let s = rand_vec(&mut rng, 8, 3.0);
        assert!(distill_au(&t, &s).value >= distill_au_floor(&t));
        assert!(distill_au(&t, &s).grad.iter().all(|&g| g != 0.0));
    }

    #[test]
    fn distill_expr_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = rand_vec(&mut rng, 7, 3.0);
        let l = distill_expr(&t, &t, 1.5).unwrap();
        assert!(l.grad.iter().all(|&g| g == 0.0));
        assert_abs_diff_eq!(l.value, distill_expr_floor(&t, 1.5), epsilon = 1e-12);
        assert_abs_diff_eq!(
            distill_expr(&[0.4; 7], &[-1.0; 7], 1.5).unwrap().value,
            7f64.ln(),
            epsilon = 1e-9
        );
        for _ in 0..10 {
            let s = rand_vec(&mut rng, 7, 3.0);
            let temp = rng.gen_range(0.2..5.0);
            let l = distill_expr(&t, &s, temp).unwrap();
            assert!(l.grad.iter().sum::<f64>().abs() < 1e-12);
            assert!(l.value >= distill_expr_floor(&t, temp) - 1e-12);
        }
        assert!(distill_expr(&t, &t, 0.0).is_err());
    }

    #[test]
    fn distill_va_examples() {
        assert_abs_diff_eq!(
            distill_va(&[0.0; 40], &[0.0; 40], 1.5).unwrap().value,
            2.0 * 20f64.ln(),
            epsilon = 1e-9
        );
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = rand_vec(&mut rng, 40, 3.0);
        let l = distill_va(&t, &t, 1.5).unwrap();
        assert!(l.grad.iter().all(|&g| g == 0.0));
        assert_abs_diff_eq!(l.value, distill_va_floor(&t, 1.5), epsilon = 1e-12);

        let s = rand_vec(&mut rng, 40, 3.0);
        let mut t2 = t.clone();
        let mut s2 = s.clone();
        for k in 20..40 {
            t2[k] += rng.gen_range(-1.0..1.0);
            s2[k] += rng.gen_range(-1.0..1.0);
        }
        let a = distill_va(&t, &s, 1.5).unwrap();
        let b = distill_va(&t2, &s2, 1.5).unwrap();
        assert_eq!(a.grad[..20], b.grad[..20]);
    }

    #[test]
    fn per_instance_gradients_match_finite_differences() {
        let g = BinGrid::default();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(20 + seed);
            let bits: [bool; 8] = std::array::from_fn(|_| rng.gen_bool(0.4));
            let x = rand_vec(&mut rng, 8, 3.0);
            let r = grad_check(
                |z| loss_au(&bits, z).value,
                &x,
                &loss_au(&bits, &x).grad,
                GRAD_CHECK_STEP,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-5);

            let k = rng.gen_range(0..7);
            let x = rand_vec(&mut rng, 7, 3.0);
            let r = grad_check(|z| loss_expr(k, z).value, &x, &loss_expr(k, &x).grad, GRAD_CHECK_STEP).unwrap();
            assert!(r.max_rel_error < 1e-5);

            let (v, a) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let x = rand_vec(&mut rng, 40, 3.0);
            let an = loss_va_class(v, a, &x, &g).unwrap().grad;
            let r = grad_check(|z| loss_va_class(v, a, z, &g).unwrap().value, &x, &an, GRAD_CHECK_STEP).unwrap();
            assert!(r.max_rel_error < 1e-5);

            let t = rand_vec(&mut rng, 8, 3.0);
            let x = rand_vec(&mut rng, 8, 3.0);
            let r = grad_check(
                |z| distill_au(&t, z).value,
                &x,
                &distill_au(&t, &x).grad,
                GRAD_CHECK_STEP,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-5);

            let t = rand_vec(&mut rng, 7, 3.0);
            let x = rand_vec(&mut rng, 7, 3.0);
            let an = distill_expr(&t, &x, 1.5).unwrap().grad;
            let r = grad_check(|z| distill_expr(&t, z, 1.5).unwrap().value, &x, &an, GRAD_CHECK_STEP).unwrap();
            assert!(r.max_rel_error < 1e-5);

            let t = rand_vec(&mut rng, 40, 3.0);
            let x = rand_vec(&mut rng, 40, 3.0);
            let an = distill_va(&t, &x, 1.5).unwrap().grad;
            let r = grad_check(|z| distill_va(&t, z, 1.5).unwrap().value, &x, &an, GRAD_CHECK_STEP).unwrap();
            assert!(r.max_rel_error < 1e-5);
        }
    }

    fn inst(id: u64, features: Vec<f64>, label: TaskLabel) -> Instance {
        Instance {
            id,
            features,
            label,
            source: "test".into(),
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Batch {
        let mut id = 0;
        let mut next = |rng: &mut ChaCha8Rng, label: TaskLabel| {
            id += 1;
            inst(id, rand_vec(rng, dim, 1.5), label)
        };
        let au = (0..n)
            .map(|_| {
                let bits = std::array::from_fn(|_| rng.gen_bool(0.4));
                next(rng, TaskLabel::Au(bits))
            })
            .collect();
        let expr = (0..n)
            .map(|_| {
                let k = rng.gen_range(0..7);
                next(rng, TaskLabel::Expr(k))
            })
            .collect();
        let va = (0..n)
            .map(|_| {
                let (valence, arousal) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                next(rng, TaskLabel::Va { valence, arousal })
            })
            .collect();
        Batch::new(au, expr, va).unwrap()
    }

    fn small_net(seed: u64) -> MultitaskNet {
        let mut net = MultitaskNet::new(NetConfig {
            input_dim: 5,
            hidden_dims: vec![6],
            seed,
            ..NetConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for p in net.params_mut() {
            *p += rng.gen_range(-0.2..0.2);
        }
        net
    }

    #[test]
    fn batch_construction_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = random_batch(&mut rng, 2, 3);
        let au = b.subset(Task::Au).to_vec();
        let expr = b.subset(Task::Expr).to_vec();
        let va = b.subset(Task::Va).to_vec();
        assert_eq!(
            Batch::new(au.clone(), expr[..1].to_vec(), va.clone()).unwrap_err(),
            LossError::UnequalSubsets([2, 1, 2])
        );
        assert!(matches!(
            Batch::new(expr.clone(), au.clone(), va.clone()),
            Err(LossError::WrongSubset { .. })
        ));
        assert_eq!(
            Batch::partial(vec![], vec![], va[..1].to_vec()).unwrap_err(),
            LossError::TooFewVaInstances(1)
        );
        assert_eq!(
            Batch::new(au[..1].to_vec(), expr[..1].to_vec(), va[..1].to_vec()).unwrap_err(),
            LossError::BatchTooSmall(1)
        );
    }

    #[test]
    fn teacher_loss_single_expression_instance() {
        let mut net = small_net(1);
        let x = vec![0.3, -0.2, 0.9, 0.1, -0.5];
        let batch = Batch::partial(vec![], vec![inst(1, x.clone(), TaskLabel::Expr(4))], vec![]).unwrap();
        let l = teacher_batch_loss(&batch, &mut net).unwrap();
        let expected = loss_expr(4, &net.forward(&x).expr_logits).value;
        assert_eq!(l.total, expected);
        assert_eq!(l.ccc_term, 0.0);
    }

    #[test]
    fn teacher_head_isolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = random_batch(&mut rng, 3, 5);
        let mut net = small_net(2);
        for task in Task::ALL {
            let only: [Vec<Instance>; 3] = std::array::from_fn(|i| {
                if i == task.index() {
                    batch.subset(task).to_vec()
                } else {
                    vec![]
                }
            });
            let [a, e, v] = only;
            let b = Batch::partial(a, e, v).unwrap();
            teacher_batch_loss(&b, &mut net).unwrap();
            for other in Task::ALL {
                let g = net.head_grads(other);
                if other == task {
                    assert!(g.iter().any(|&v| v != 0.0));
                } else {
                    assert!(g.iter().all(|&v| v == 0.0), "{task:?} leaked into {other:?}");
                }
            }
        }
    }

    fn check_batch_gradient(mut eval: impl FnMut(&mut MultitaskNet) -> f64, net: &mut MultitaskNet) -> f64 {
        eval(net);
        let analytic = net.grads().to_vec();
        let x0 = net.params().to_vec();
        let mut probe = net.clone();
        grad_check(
            |p| {
                probe.params_mut().copy_from_slice(p);
                eval(&mut probe)
            },
            &x0,
            &analytic,
            GRAD_CHECK_STEP,
        )
        .unwrap()
        .max_rel_error
    }

    #[test]
    fn teacher_and_student_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(30 + seed);
            let batch = random_batch(&mut rng, 2, 5);
            let mut net = small_net(seed);
            let err = check_batch_gradient(|n| teacher_batch_loss(&batch, n).unwrap().total, &mut net);
            assert!(err < 1e-5, "teacher seed {seed}: {err}");

            let teacher = small_net(100 + seed);
            let mut student = small_net(200 + seed);
            for cross_task in [CrossTaskSource::SameInstance, CrossTaskSource::PairedInstance] {
                let cfg = DistillConfig {
                    cross_task,
                    ..DistillConfig::default()
                };
                let err = check_batch_gradient(
                    |n| student_batch_loss(&batch, &teacher, n, &cfg).unwrap().total,
                    &mut student,
                );
                assert!(err < 1e-5, "student seed {seed} {cross_task:?}: {err}");
            }
        }
    }

    #[test]
    fn student_gradient_reaches_every_head_from_one_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = random_batch(&mut rng, 2, 5);
        let teacher = small_net(3);
        let mut student = small_net(4);
        for task in Task::ALL {
            let one = batch.subset(task)[..1].to_vec();
            let b = match task {
                Task::Au => Batch::partial(one, vec![], vec![]),
                Task::Expr => Batch::partial(vec![], one, vec![]),
                Task::Va => Batch::partial(vec![], vec![], batch.subset(task).to_vec()),
            }
            .unwrap();
            student_batch_loss(&b, &teacher, &mut student, &DistillConfig::default()).unwrap();
            for head in Task::ALL {
                assert!(
                    student.head_grads(head).iter().any(|&v| v != 0.0),
                    "{task:?} -> {head:?}"
                );
            }
        }
    }

    #[test]
    fn student_equal_to_teacher_leaves_only_supervision() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let batch = random_batch(&mut rng, 3, 5);
        let teacher = small_net(5);
        let mut student = teacher.clone();
        let cfg = DistillConfig::default();
        student_batch_loss(&batch, &teacher, &mut student, &cfg).unwrap();
        let student_grads = student.grads().to_vec();
        let mut sup = teacher.clone();
        teacher_batch_loss(&batch, &mut sup).unwrap();
        for (s, t) in student_grads.iter().zip(sup.grads()) {
            assert!((s - cfg.lambda * t).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_one_removes_same_task_distillation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let batch = random_batch(&mut rng, 2, 5);
        let teacher = small_net(6);
        let mut student = small_net(7);
        let cfg = DistillConfig {
            lambda: 1.0,
            ..DistillConfig::default()
        };
        let l = student_batch_loss(&batch, &teacher, &mut student, &cfg).unwrap();
        assert!(l.distill_same > 0.0);
        assert_abs_diff_eq!(l.total, l.supervision + l.ccc_term + l.distill_cross, epsilon = 1e-12);

        // with cross-task distillation off too, student == teacher objective
        let cfg = DistillConfig {
            lambda: 1.0,
            cross_task: CrossTaskSource::Disabled,
            ..DistillConfig::default()
        };
        let l = student_batch_loss(&batch, &teacher, &mut student, &cfg).unwrap();
        let g = student.grads().to_vec();
        let t = teacher_batch_loss(&batch, &mut student).unwrap();
        assert_eq!(l.total, t.total);
        assert_eq!(g, student.grads());
    }

    #[test]
    fn duplicating_instances_doubles_classification_terms_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let batch = random_batch(&mut rng, 3, 5);
        let mut net = small_net(8);
        let once = teacher_batch_loss(&batch, &mut net).unwrap();
        let twice = |t: Task| {
            let mut v = batch.subset(t).to_vec();
            v.extend_from_slice(batch.subset(t));
            v
        };
        let doubled = Batch::new(twice(Task::Au), twice(Task::Expr), twice(Task::Va)).unwrap();
        let two = teacher_batch_loss(&doubled, &mut net).unwrap();
        assert_abs_diff_eq!(two.supervision, 2.0 * once.supervision, epsilon = 1e-10);
        assert_abs_diff_eq!(two.ccc_term, once.ccc_term, epsilon = 1e-12);
    }
}
