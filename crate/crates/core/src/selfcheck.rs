//! Finite-difference gradient checks of every loss composed with the
//! network forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Instance;
use crate::losses::{
    distill_au, distill_expr, distill_va, loss_au, loss_expr, loss_va, loss_va_class, student_batch_loss,
    teacher_batch_loss, Batch, CrossTaskSource, DistillConfig, LossError, LossGrad, TaskLabel,
};
use crate::model::{ModelOutput, MultitaskNet, NetConfig, Task, AU_DIM, EXPR_DIM};
use crate::numerics::{grad_check, BinGrid, NumericsError, GRAD_CHECK_STEP};

/// Relative-error threshold for every check.
pub const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    /// worst case over all configurations
    pub max_rel_error: f64,
    pub configs: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SelfCheckError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("need at least one configuration")]
    NoConfigs,
}

const INPUT_DIM: usize = 5;

fn small_net(seed: u64) -> MultitaskNet {
    MultitaskNet::new(NetConfig {
        input_dim: INPUT_DIM,
        hidden_dims: vec![7, 6],
        seed,
        ..NetConfig::default()
    })
    .expect("static config is valid")
}

fn features(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..INPUT_DIM).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

fn random_label(rng: &mut ChaCha8Rng, task: Task) -> TaskLabel {
    match task {
        Task::Au => TaskLabel::Au(std::array::from_fn(|_| rng.gen_bool(0.5))),
        Task::Expr => TaskLabel::Expr(rng.gen_range(0..EXPR_DIM)),
        Task::Va => TaskLabel::Va {
            valence: rng.gen_range(-1.0..1.0),
            arousal: rng.gen_range(-1.0..1.0),
        },
    }
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> Batch {
    let mut id = 0;
    let mut subset = |rng: &mut ChaCha8Rng, task: Task| -> Vec<Instance> {
        (0..n)
            .map(|_| {
                id += 1;
                Instance {
                    id,
                    features: features(rng),
                    label: random_label(rng, task),
                    source: "selfcheck".into(),
                }
            })
            .collect()
    };
    let au = subset(rng, Task::Au);
    let expr = subset(rng, Task::Expr);
    let va = subset(rng, Task::Va);
    Batch::new(au, expr, va).expect("n >= 2")
}

/// FD check of `eval` with respect to the parameters of `net`; `eval` must
/// leave the analytic gradient in the net's buffer.
fn check_params<F>(net: &MultitaskNet, mut eval: F) -> Result<f64, SelfCheckError>
where
    F: FnMut(&mut MultitaskNet) -> Result<f64, SelfCheckError>,
{
    let mut work = net.clone();
    eval(&mut work)?;
    let analytic = work.grads().to_vec();
    let x0 = work.params().to_vec();
    let mut failure = None;
    let report = grad_check(
        |p| {
            work.params_mut().copy_from_slice(p);
            match eval(&mut work) {
                Ok(v) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &x0,
        &analytic,
        GRAD_CHECK_STEP,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(report?.max_rel_error)
}

/// Loss of one instance read from one head, back-propagated into the net.
fn per_instance<L>(net: &mut MultitaskNet, x: &[f64], task: Task, loss: L) -> Result<f64, SelfCheckError>
where
    L: Fn(&ModelOutput) -> Result<LossGrad, SelfCheckError>,
{
    let (out, cache) = net.forward_cached(x);
    let lg = loss(&out)?;
    let mut grads = ModelOutput::zeros();
    grads.head_mut(task).copy_from_slice(&lg.grad);
    net.zero_grads();
    net.backward(&cache, &grads);
    Ok(lg.value)
}

/// `None` asks for a redraw: some input sits too close to a ReLU kink for
/// central differences to be meaningful.
type Check = fn(&mut ChaCha8Rng, u64) -> Result<Option<f64>, SelfCheckError>;

/// Minimum distance of every trunk pre-activation from zero, in units of
/// the finite-difference step.
const KINK_MARGIN: f64 = 100.0 * GRAD_CHECK_STEP;

fn smooth<'a>(net: &MultitaskNet, inputs: impl IntoIterator<Item = &'a [f64]>) -> bool {
    inputs.into_iter().all(|x| net.relu_margin(x) >= KINK_MARGIN)
}

fn check_loss_au(rng: &mut ChaCha8Rng, seed: u64) -> Result<Option<f64>, SelfCheckError> {
    let net = small_net(seed);
    let x = features(rng);
    let y: [bool; AU_DIM] = std::array::from_fn(|_| rng.gen_bool(0.5));
    if !smooth(&net, [x.as_slice()]) {
        return Ok(None);
    }
    check_params(&net, |n| {
        per_instance(n, &x, Task::Au, |o| Ok(loss_au(&y, &o.au_logits)))
    })
    .map(Some)
}

fn check_loss_expr(rng: &mut ChaCha8Rng, seed: u64) -> Result<Option<f64>, SelfCheckError> {
    let net = small_net(seed);
    let x = features(rng);
    let k = rng.gen_range(0..EXPR_DIM);
    if !smooth(&net, [x.as_slice()]) {
        return Ok(None);
    }
    check_params(&net, |n| {
        per_instance(n, &x, Task::Expr, |o| Ok(loss_expr(k, &o.expr_logits)))
    })
    .map(Some)
}

fn check_loss_va_class(rng: &mut ChaCha8Rng, seed: u64) -> Result<Option<f64>, SelfCheckError> {
    let net = small_net(seed);
    let x = features(rng);
    let (v, a) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let grid = BinGrid::default();
    if !smooth(&net, [x.as_slice()]) {
        return Ok(None);
    }
    check_params(&net, |n| {
        per_instance(n, &x, Task::Va, |o| Ok(loss_va_class(v, a, &o.va_logits, &grid)?))
    })
    .map(Some)
}

fn check_loss_va(rng: &mut ChaCha8Rng, seed: u64) -> Result<Option<f64>, SelfCheckError> {
    let net = small_net(seed);
    let xs: Vec<Vec<f64>> = (0..4).map(|_| features(rng)).collect();
    let labels: Vec<(f64, f64)> = (0..4)
        .map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    let grid = BinGrid::default();
    if !smooth(&net, xs.iter().map(Vec::as_slice)) {
        return Ok(None);
    }
    check_params(&net, |n| {
        let fwd: Vec<_> = xs.iter().map(|x| n.forward_cached(x)).collect();
        let logits: Vec<&[f64]> = fwd.iter().map(|(o, _)| o.va_logits.as_slice()).collect();
        let va = loss_va(&labels, &logits, &grid)?;
        n.zero_grads();
        for ((_, cache), g) in fwd.iter().zip(&va.grads) {
            let mut grads = ModelOutput::zeros();
            grads.va_logits = *g;
            n.backward(cache, &grads);
        }
        Ok(va.total())
    })
    .map(Some)
}

fn check_distill_au(rng: &mut ChaCha8Rng, seed: u64) -> Result<Option<f64>, SelfCheckError> {
    let net = small_net(seed);
    let teacher = small_net(seed + 1000).forward(&features(rng));
    let x = features(rng);
    if !smooth(&net, [x.as_slice()]) {
        return Ok(None);
    }
    check_params(&net, |n| {
        per_instance(n, &x, Task::Au, |o| Ok(distill_au(&teacher.au_logits, &o.au_logits)))
    })
    .map(Some)
}

fn check_distill_expr(rng: &mut ChaCha8Rng, seed: u64) -> Result<Option<f64>, SelfCheckError> {
    let net = small_net(seed);
    let teacher = small_net(seed + 1000).forward(&features(rng));
    let x = features(rng);
    let temp = rng.gen_range(1.0..3.0);
    if !smooth(&net, [x.as_slice()]) {
        return Ok(None);
    }
    check_params(&net, |n| {
        per_instance(n, &x, Task::Expr, |o| {
            Ok(distill_expr(&teacher.expr_logits, &o.expr_logits, temp)?)
        })
    })
    .map(Some)
}

fn check_distill_va(rng: &mut ChaCha8Rng, seed: u64) -> Result<Option<f64>, SelfCheckError> {
    let net = small_net(seed);
    let teacher = small_net(seed + 1000).forward(&features(rng));
    let x = features(rng);
    let temp = rng.gen_range(1.0..3.0);
    if !smooth(&net, [x.as_slice()]) {
        return Ok(None);
    }
    check_params(&net, |n| {
        per_instance(n, &x, Task::Va, |o| {
            Ok(distill_va(&teacher.va_logits, &o.va_logits, temp)?)
        })
    })
    .map(Some)
}

fn check_teacher_batch(rng: &mut ChaCha8Rng, seed: u64) -> Result<Option<f64>, SelfCheckError> {
    let net = small_net(seed);
    let batch = random_batch(rng, 2);
    if !smooth(&net, batch.iter().map(|i| i.features.as_slice())) {
        return Ok(None);
    }
    check_params(&net, |n| Ok(teacher_batch_loss(&batch, n)?.total)).map(Some)
}

fn check_student_batch(rng: &mut ChaCha8Rng, seed: u64) -> Result<Option<f64>, SelfCheckError> {
    let net = small_net(seed);
    let teacher = small_net(seed + 1000);
    let batch = random_batch(rng, 2);
    if !smooth(&net, batch.iter().map(|i| i.features.as_slice())) {
        return Ok(None);
    }
    let mut worst: f64 = 0.0;
    for cross_task in [CrossTaskSource::SameInstance, CrossTaskSource::PairedInstance] {
        let cfg = DistillConfig {
            cross_task,
            temperature: rng.gen_range(1.0..3.0),
            ..DistillConfig::default()
        };
        worst = worst.max(check_params(&net, |n| {
            Ok(student_batch_loss(&batch, &teacher, n, &cfg)?.total)
        })?);
    }
    Ok(Some(worst))
}

pub const CHECK_NAMES: [&str; 9] = [
    "loss_au",
    "loss_expr",
    "loss_va_class",
    "loss_va",
    "distill_au",
    "distill_expr",
    "distill_va",
    "teacher_batch_loss",
    "student_batch_loss",
];

const CHECKS: [Check; 9] = [
    check_loss_au,
    check_loss_expr,
    check_loss_va_class,
    check_loss_va,
    check_distill_au,
    check_distill_expr,
    check_distill_va,
    check_teacher_batch,
    check_student_batch,
];

/// Runs every check over `configs` seeded random (net, input) draws.
pub fn gradient_suite(configs: usize, seed: u64) -> Result<Vec<CheckResult>, SelfCheckError> {
    if configs == 0 {
        return Err(SelfCheckError::NoConfigs);
    }
    CHECK_NAMES
        .iter()
        .zip(CHECKS)
        .enumerate()
        .map(|(i, (&name, check))| {
            let mut worst: f64 = 0.0;
            for c in 0..configs {
                let s = seed.wrapping_add((i * 1000 + c) as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mut net_seed = s;
                let err = loop {
                    if let Some(e) = check(&mut rng, net_seed)? {
                        break e;
                    }
                    net_seed = net_seed.wrapping_add(1 << 32);
                };
                // NaN must not pass
                worst = if err.is_nan() { f64::NAN } else { worst.max(err) };
            }
            Ok(CheckResult {
                name,
                max_rel_error: worst,
                configs,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let results = gradient_suite(5, 0).unwrap();
        assert_eq!(results.len(), 9);
        for r in &results {
            assert!(r.passed(), "{r:?}");
            assert_eq!(r.configs, 5);
        }
    }

    #[test]
    fn zero_configs_rejected() {
        assert!(matches!(gradient_suite(0, 0), Err(SelfCheckError::NoConfigs)));
    }

    #[test]
    fn nan_error_does_not_pass() {
        let r = CheckResult {
            name: "x",
            max_rel_error: f64::NAN,
            configs: 1,
        };
        assert!(!r.passed());
    }
}
