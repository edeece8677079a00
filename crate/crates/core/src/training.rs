//! Adam, step-decay schedule, the teacher and student procedures and
//! cohort orchestration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{debug, error, info};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::balance::{balance_task, BalanceConfig, BalanceError, BalanceReport};
use crate::data::{DataError, EpochSampler, Instance, PoolExhaustion, TaskDatasets};
use crate::eval::{evaluate_model, EvalError, MetricSet};
use crate::losses::{student_batch_loss, teacher_batch_loss, Batch, BatchLoss, DistillConfig, LossError};
use crate::model::{ModelError, MultitaskNet, NetConfig, Task};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}; instance ids {ids:?}")]
    NonFiniteLoss { epoch: usize, batch: usize, ids: Vec<u64> },
    #[error("non-finite gradient at parameter {index} (optimizer step {step})")]
    NonFiniteGradient { step: u64, index: usize },
    #[error("parameter/gradient/state length mismatch: {params} vs {grads} vs {state}")]
    ShapeMismatch { params: usize, grads: usize, state: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Balance(#[from] BalanceError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("malformed {path} line {line}: {msg}")]
    Record { path: String, line: usize, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
}

impl AdamState {
    pub fn new(num_params: usize, base_lr: f64) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            base_lr,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// One bias-corrected Adam update. A non-finite gradient aborts the step
    /// before anything is modified.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<(), TrainError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(TrainError::ShapeMismatch {
                params: params.len(),
                grads: grads.len(),
                state: self.m.len(),
            });
        }
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate must be > 0, got {lr}"
            )));
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                step: self.t + 1,
                index,
            });
        }
        self.t += 1;
        let exp = i32::try_from(self.t).unwrap_or(i32::MAX);
        let bc1 = 1.0 - self.beta1.powi(exp);
        let bc2 = 1.0 - self.beta2.powi(exp);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Piecewise-constant step decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            decay_factor: 10.0,
            decay_every: 3,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(TrainError::InvalidConfig(format!(
                "base_lr must be > 0, got {}",
                self.base_lr
            )));
        }
        if !(self.decay_factor >= 1.0) || !self.decay_factor.is_finite() {
            return Err(TrainError::InvalidConfig(format!(
                "decay_factor must be >= 1, got {}",
                self.decay_factor
            )));
        }
        if self.decay_every == 0 {
            return Err(TrainError::InvalidConfig("decay_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = i32::try_from(epoch / self.decay_every).unwrap_or(i32::MAX);
        // a single division keeps 1e-4 / 10^k exact where possible
        self.base_lr / self.decay_factor.powi(k)
    }
}

/// Everything that controls a teacher + students run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    pub num_students: usize,
    pub distill: DistillConfig,
    /// instances per task in every batch
    pub batch_n: usize,
    pub schedule: Schedule,
    /// architecture; its `seed` is replaced by the run seeds
    pub net: NetConfig,
    pub pool_mode: PoolExhaustion,
    /// teacher initialization and teacher sampling
    pub seed: u64,
    /// explicit student seeds; derived from `seed` when empty
    pub student_seeds: Vec<u64>,
    pub parallel_students: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            teacher_epochs: 8,
            student_epochs: 3,
            num_students: 5,
            distill: DistillConfig::default(),
            batch_n: 16,
            schedule: Schedule::default(),
            net: NetConfig::default(),
            pool_mode: PoolExhaustion::default(),
            seed: 0,
            student_seeds: Vec::new(),
            parallel_students: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.num_students == 0 {
            return Err(TrainError::InvalidConfig("num_students must be >= 1".into()));
        }
        if !self.student_seeds.is_empty() && self.student_seeds.len() != self.num_students {
            return Err(TrainError::InvalidConfig(format!(
                "{} student seeds given for {} students",
                self.student_seeds.len(),
                self.num_students
            )));
        }
        if self.batch_n < 2 {
            return Err(TrainError::InvalidConfig("batch_n must be >= 2".into()));
        }
        self.schedule.validate()?;
        self.distill.validate()?;
        self.net.validate()?;
        Ok(())
    }

    pub fn student_seed(&self, k: usize) -> u64 {
        self.student_seeds
            .get(k)
            .copied()
            .unwrap_or_else(|| derive_seed(self.seed, STUDENT_STREAM + k as u64))
    }

    pub fn all_student_seeds(&self) -> Vec<u64> {
        (0..self.num_students).map(|k| self.student_seed(k)).collect()
    }
}

const TEACHER_SAMPLER_STREAM: u64 = 0x7EAC;
const STUDENT_SAMPLER_STREAM: u64 = 0x57D0;
const STUDENT_STREAM: u64 = 0x1000;

/// splitmix64 of `seed ^ stream`, used to fan one seed out to independent
/// RNG streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = (seed ^ stream.rotate_left(32)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Plan-expanded training pools plus optional held-out sets.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub pools: [Vec<Instance>; 3],
    pub val: Option<TaskDatasets>,
}

impl TrainingData {
    /// Pools taken as they are, without rebalancing.
    pub fn unbalanced(train: &TaskDatasets, val: Option<TaskDatasets>) -> Self {
        Self {
            pools: Task::ALL.map(|t| train[t.index()].instances().to_vec()),
            val,
        }
    }

    /// Balances every task and expands the sampling plans into pools.
    pub fn balanced(
        train: &TaskDatasets,
        val: Option<TaskDatasets>,
        cfg: &BalanceConfig,
    ) -> Result<(Self, Vec<BalanceReport>), TrainError> {
        let mut reports = Vec::with_capacity(3);
        let mut pools: [Vec<Instance>; 3] = Default::default();
        for t in Task::ALL {
            let d = &train[t.index()];
            let (plan, report) = balance_task(d, t, cfg)?;
            pools[t.index()] = plan.expand(d.instances());
            reports.push(report);
        }
        Ok((Self { pools, val }, reports))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub metrics: Option<MetricSet>,
}

/// Per-epoch training trace.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

pub const HISTORY_HEADER: &str =
    "epoch,mean_loss,lr,au_f1_macro,au_acc,au_composite,expr_f1_macro,expr_acc,expr_composite,ccc_valence,ccc_arousal";

impl History {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn lr_trace(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.lr).collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mean_loss).collect()
    }

    /// `(epoch, mean_loss, lr)` rows for the loss-curve report.
    pub fn curve(&self) -> Vec<(usize, f64, f64)> {
        self.records.iter().map(|r| (r.epoch, r.mean_loss, r.lr)).collect()
    }

    pub fn final_metrics(&self) -> Option<MetricSet> {
        self.records.last().and_then(|r| r.metrics)
    }

    /// Full-precision CSV record; metric cells are empty when no held-out
    /// set was evaluated.
    pub fn to_record(&self) -> String {
        let mut s = format!("{HISTORY_HEADER}\n");
        for r in &self.records {
            let _ = write!(s, "{},{:?},{:?}", r.epoch, r.mean_loss, r.lr);
            match r.metrics {
                Some(m) => {
                    for v in [
                        m.au_f1_macro,
                        m.au_acc,
                        m.au_composite,
                        m.expr_f1_macro,
                        m.expr_acc,
                        m.expr_composite,
                        m.ccc_valence,
                        m.ccc_arousal,
                    ] {
                        let _ = write!(s, ",{v:?}");
                    }
                }
                None => s.push_str(",,,,,,,,"),
            }
            s.push('\n');
        }
        s
    }

    pub fn from_record(text: &str, path: &str) -> Result<Self, TrainError> {
        let err = |line: usize, msg: String| TrainError::Record {
            path: path.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines();
        if lines.next() != Some(HISTORY_HEADER) {
            return Err(err(1, "unexpected header".into()));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 11 {
                return Err(err(i + 2, format!("expected 11 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err(i + 2, format!("bad number {s:?}")));
            let epoch = f[0].parse().map_err(|_| err(i + 2, format!("bad epoch {:?}", f[0])))?;
            let metrics = if f[3..].iter().all(|s| s.is_empty()) {
                None
            } else {
                let v = f[3..].iter().map(|s| num(s)).collect::<Result<Vec<_>, _>>()?;
                Some(MetricSet {
                    au_f1_macro: v[0],
                    au_acc: v[1],
                    au_composite: v[2],
                    expr_f1_macro: v[3],
                    expr_acc: v[4],
                    expr_composite: v[5],
                    ccc_valence: v[6],
                    ccc_arousal: v[7],
                })
            };
            records.push(EpochRecord {
                epoch,
                mean_loss: num(f[1])?,
                lr: num(f[2])?,
                metrics,
            });
        }
        Ok(Self { records })
    }
}

/// The shared epoch loop. `objective` fills the net's gradient buffer and
/// returns the batch loss.
fn fit<F>(
    net: &mut MultitaskNet,
    data: &TrainingData,
    sampler_seed: u64,
    epochs: usize,
    run: &RunConfig,
    mut objective: F,
) -> Result<History, TrainError>
where
    F: FnMut(&Batch, &mut MultitaskNet) -> Result<BatchLoss, TrainError>,
{
    let mut history = History::default();
    if epochs == 0 {
        return Ok(history);
    }
    let mut sampler = EpochSampler::new(data.pools.clone(), run.batch_n, sampler_seed, run.pool_mode)?;
    let mut adam = AdamState::new(net.num_params(), run.schedule.base_lr);
    for epoch in 0..epochs {
        let lr = run.schedule.lr_at(epoch);
        let mut total = 0.0;
        let mut batches = 0usize;
        while let Some(batch) = sampler.next_batch() {
            let loss = objective(&batch, net)?;
            if !loss.total.is_finite() {
                let ids: Vec<u64> = batch.iter().map(|i| i.id).collect();
                error!("non-finite loss {loss:?} at epoch {epoch} batch {batches}");
                for inst in batch.iter() {
                    error!(
                        "  id={} task={} features={:?}",
                        inst.id,
                        inst.task().tag(),
                        inst.features
                    );
                }
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batches,
                    ids,
                });
            }
            let (params, grads) = net.params_and_grads_mut();
            adam.step(params, grads, lr)?;
            total += loss.total;
            batches += 1;
        }
        sampler.start_next_epoch();
        let metrics = match &data.val {
            Some(val) => Some(evaluate_model(net, val)?),
            None => None,
        };
        let mean_loss = total / batches.max(1) as f64;
        debug!("epoch {epoch}: lr={lr:e} mean_loss={mean_loss:.6} batches={batches}");
        history.records.push(EpochRecord {
            epoch,
            mean_loss,
            lr,
            metrics,
        });
    }
    Ok(history)
}

/// Teacher procedure: supervision on each instance's own task only.
pub fn train_teacher(
    data: &TrainingData,
    mut net: MultitaskNet,
    run: &RunConfig,
) -> Result<(MultitaskNet, History), TrainError> {
    run.validate()?;
    let seed = derive_seed(run.seed, TEACHER_SAMPLER_STREAM);
    let history = fit(&mut net, data, seed, run.teacher_epochs, run, |b, n| {
        Ok(teacher_batch_loss(b, n)?)
    })?;
    Ok((net, history))
}

/// Student procedure against a frozen teacher. The student is initialized
/// from `student_seed` with the teacher's architecture, and the learning-rate
/// schedule starts again from its base rate.
pub fn train_student(
    data: &TrainingData,
    teacher: &MultitaskNet,
    student_seed: u64,
    run: &RunConfig,
) -> Result<(MultitaskNet, History), TrainError> {
    run.validate()?;
    let mut student = MultitaskNet::new(NetConfig {
        seed: student_seed,
        ..teacher.config().clone()
    })?;
    let seed = derive_seed(student_seed, STUDENT_SAMPLER_STREAM);
    let history = fit(&mut student, data, seed, run.student_epochs, run, |b, s| {
        Ok(student_batch_loss(b, teacher, s, &run.distill)?)
    })?;
    Ok((student, history))
}

/// Hex SHA-256 of a net's checkpoint bytes.
pub fn param_hash(net: &MultitaskNet) -> String {
    hex_sha256(&net.to_bytes())
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

#[derive(Debug, Clone)]
pub struct StudentRun {
    pub seed: u64,
    pub net: MultitaskNet,
    pub history: History,
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub teacher: MultitaskNet,
    pub teacher_history: History,
    pub students: Vec<StudentRun>,
}

/// Trains the teacher once, then every student against it.
pub fn train_cohort(data: &TrainingData, run: &RunConfig) -> Result<Cohort, TrainError> {
    run.validate()?;
    let net = MultitaskNet::new(NetConfig {
        seed: run.seed,
        ..run.net.clone()
    })?;
    info!("training teacher (seed {}, {} epochs)", run.seed, run.teacher_epochs);
    let (teacher, teacher_history) = train_teacher(data, net, run)?;
    let seeds = run.all_student_seeds();
    info!("training {} students, seeds {:?}", seeds.len(), seeds);
    let students = train_students(data, &teacher, &seeds, run)?;
    Ok(Cohort {
        teacher,
        teacher_history,
        students,
    })
}

/// Trains one student per seed; results are in seed order either way.
pub fn train_students(
    data: &TrainingData,
    teacher: &MultitaskNet,
    seeds: &[u64],
    run: &RunConfig,
) -> Result<Vec<StudentRun>, TrainError> {
    let one =
        |seed: u64| train_student(data, teacher, seed, run).map(|(net, history)| StudentRun { seed, net, history });
    if run.parallel_students {
        std::thread::scope(|s| {
            let handles: Vec<_> = seeds.iter().map(|&seed| s.spawn(move || one(seed))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("student thread panicked"))
                .collect()
        })
    } else {
        seeds.iter().map(|&seed| one(seed)).collect()
    }
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const MANIFEST_HEADER: &str = "#role\tfile\tseed\tsha256";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// `teacher` or `student<k>`
    pub role: String,
    pub file: String,
    pub seed: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("{MANIFEST_HEADER}\n");
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", e.role, e.file, e.seed, e.sha256);
        }
        s
    }

    pub fn parse(text: &str, path: &str) -> Result<Self, TrainError> {
        let err = |line: usize, msg: String| TrainError::Record {
            path: path.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(err(1, "unexpected header".into()));
        }
        let entries = lines
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(i, l)| {
                let f: Vec<&str> = l.split('\t').collect();
                if f.len() != 4 {
                    return Err(err(i + 2, format!("expected 4 fields, got {}", f.len())));
                }
                Ok(ManifestEntry {
                    role: f[0].into(),
                    file: f[1].into(),
                    seed: f[2].parse().map_err(|_| err(i + 2, format!("bad seed {:?}", f[2])))?,
                    sha256: f[3].into(),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn students(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.role.starts_with("student"))
    }

    pub fn teacher(&self) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.role == "teacher")
    }
}

pub fn history_file(role: &str) -> String {
    format!("history_{role}.csv")
}

/// Writes `<role>.mtnet`, `history_<role>.csv` and the manifest.
pub fn write_cohort(cohort: &Cohort, run: &RunConfig, dir: &Path) -> Result<(Manifest, Vec<PathBuf>), TrainError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = Manifest::default();
    let mut written = Vec::new();
    let mut put = |role: String, seed: u64, net: &MultitaskNet, history: &History| -> Result<(), TrainError> {
        let file = format!("{role}.mtnet");
        let bytes = net.to_bytes();
        let p = dir.join(&file);
        std::fs::write(&p, &bytes).map_err(io_err(&p))?;
        written.push(p);
        let h = dir.join(history_file(&role));
        std::fs::write(&h, history.to_record()).map_err(io_err(&h))?;
        written.push(h);
        manifest.entries.push(ManifestEntry {
            role,
            file,
            seed,
            sha256: hex_sha256(&bytes),
        });
        Ok(())
    };
    put("teacher".into(), run.seed, &cohort.teacher, &cohort.teacher_history)?;
    for (k, s) in cohort.students.iter().enumerate() {
        put(format!("student{k}"), s.seed, &s.net, &s.history)?;
    }
    let m = dir.join(MANIFEST_FILE);
    std::fs::write(&m, manifest.to_text()).map_err(io_err(&m))?;
    written.push(m);
    Ok((manifest, written))
}
