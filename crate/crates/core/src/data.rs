//! Datasets, the `.mtd` text format, the synthetic multitask generator and
//! the task-stratified epoch sampler.
//!
//! File layout, one instance per line after a header, fields separated by
//! tabs (shown here as spaces):
//!
//! ```text
//! #mtd version=1 input_dim=32
//! 17  AU  synth  01000010  0.125,-0.5,...
//! 18  EXPR  synth  3  ...
//! 19  VA  synth  -0.250000,0.731000  ...
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::losses::{Batch, LossError, TaskLabel};
use crate::model::{Task, AU_DIM, EXPR_DIM};

pub const DATASET_VERSION: u32 = 1;
pub const DATASET_EXTENSION: &str = "mtd";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("dataset version {found} not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Batch(#[from] LossError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Task {
    pub fn tag(self) -> &'static str {
        match self {
            Task::Au => "AU",
            Task::Expr => "EXPR",
            Task::Va => "VA",
        }
    }

    /// Lower-case short name used in file names and CLI flags.
    pub fn short_name(self) -> &'static str {
        match self {
            Task::Au => "au",
            Task::Expr => "expr",
            Task::Va => "va",
        }
    }

    pub fn from_tag(s: &str) -> Option<Task> {
        match s {
            "AU" | "au" => Some(Task::Au),
            "EXPR" | "expr" => Some(Task::Expr),
            "VA" | "va" => Some(Task::Va),
            _ => None,
        }
    }
}

/// One example with features and the label of a single task.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: TaskLabel,
    /// Where the instance came from, e.g. the dataset it was merged from.
    pub source: String,
}

impl Instance {
    pub fn task(&self) -> Task {
        self.label.task()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    input_dim: usize,
    instances: Vec<Instance>,
}

impl Dataset {
    pub fn new(input_dim: usize, instances: Vec<Instance>) -> Result<Self, DataError> {
        for inst in &instances {
            if inst.features.len() != input_dim {
                return Err(DataError::Schema(format!(
                    "instance {} has {} features, dataset has {input_dim}",
                    inst.id,
                    inst.features.len()
                )));
            }
            if inst.features.iter().any(|v| !v.is_finite()) {
                return Err(DataError::Schema(format!(
                    "instance {} has non-finite features",
                    inst.id
                )));
            }
            inst.label.validate()?;
        }
        Ok(Self { input_dim, instances })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn into_instances(self) -> Vec<Instance> {
        self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// The single task all instances belong to, if there is one.
    pub fn task(&self) -> Option<Task> {
        let first = self.instances.first()?.task();
        self.instances.iter().all(|i| i.task() == first).then_some(first)
    }

    pub fn filter_task(&self, task: Task) -> Dataset {
        Dataset {
            input_dim: self.input_dim,
            instances: self.instances.iter().filter(|i| i.task() == task).cloned().collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("#mtd version={DATASET_VERSION} input_dim={}\n", self.input_dim);
        for inst in &self.instances {
            let _ = write!(out, "{}\t{}\t{}\t", inst.id, inst.task().tag(), inst.source);
            match inst.label {
                TaskLabel::Au(bits) => {
                    for b in bits {
                        out.push(if b { '1' } else { '0' });
                    }
                }
                TaskLabel::Expr(k) => {
                    let _ = write!(out, "{k}");
                }
                TaskLabel::Va { valence, arousal } => {
                    let _ = write!(out, "{valence:.6},{arousal:.6}");
                }
            }
            out.push('\t');
            for (i, v) in inst.features.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DataError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(DataError::Malformed {
            line: 1,
            msg: "empty file".into(),
        })?;
        let input_dim = parse_header(header)?;
        let mut instances = Vec::new();
        for (idx, line) in lines {
            if line.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let inst = parse_instance(line, input_dim).map_err(|msg| DataError::Malformed { line: lineno, msg })?;
            instances.push(inst);
        }
        Dataset::new(input_dim, instances)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        for inst in &self.instances {
            if inst.source.is_empty() || inst.source.contains(['\t', '\n', '\r']) {
                return Err(DataError::Schema(format!(
                    "instance {} has an unwritable source tag {:?}",
                    inst.id, inst.source
                )));
            }
        }
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text)
    }
}

fn parse_header(header: &str) -> Result<usize, DataError> {
    let bad = |msg: &str| DataError::Malformed {
        line: 1,
        msg: msg.to_string(),
    };
    let mut parts = header.split_whitespace();
    if parts.next() != Some("#mtd") {
        return Err(bad("missing #mtd header"));
    }
    let mut version = None;
    let mut input_dim = None;
    for kv in parts {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| bad("header fields must be key=value"))?;
        match k {
            "version" => version = Some(v.parse::<u32>().map_err(|_| bad("bad version"))?),
            "input_dim" => input_dim = Some(v.parse::<usize>().map_err(|_| bad("bad input_dim"))?),
            _ => {}
        }
    }
    let version = version.ok_or_else(|| bad("header lacks version"))?;
    if version != DATASET_VERSION {
        return Err(DataError::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    input_dim.ok_or_else(|| bad("header lacks input_dim"))
}

fn parse_instance(line: &str, input_dim: usize) -> Result<Instance, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 5 {
        return Err(format!("expected 5 tab-separated fields, found {}", fields.len()));
    }
    let id = fields[0]
        .parse::<u64>()
        .map_err(|_| format!("bad id {:?}", fields[0]))?;
    let task = Task::from_tag(fields[1]).ok_or_else(|| format!("unknown task {:?}", fields[1]))?;
    let source = fields[2].to_string();
    if source.is_empty() {
        return Err("empty source tag".into());
    }
    let label = match task {
        Task::Au => {
            let s = fields[3];
            if s.len() != AU_DIM || !s.bytes().all(|b| b == b'0' || b == b'1') {
                return Err(format!("AU label must be {AU_DIM} bits, got {s:?}"));
            }
            let mut bits = [false; AU_DIM];
            for (b, c) in bits.iter_mut().zip(s.bytes()) {
                *b = c == b'1';
            }
            TaskLabel::Au(bits)
        }
        Task::Expr => {
            let k = fields[3]
                .parse::<usize>()
                .map_err(|_| format!("bad expression class {:?}", fields[3]))?;
            if k >= EXPR_DIM {
                return Err(format!("expression class {k} out of range"));
            }
            TaskLabel::Expr(k)
        }
        Task::Va => {
            let (v, a) = fields[3]
                .split_once(',')
                .ok_or_else(|| format!("VA label must be v,a; got {:?}", fields[3]))?;
            let parse = |s: &str| -> Result<f64, String> {
                let x = s.parse::<f64>().map_err(|_| format!("bad VA value {s:?}"))?;
                if !(-1.0..=1.0).contains(&x) {
                    return Err(format!("VA value {s} outside [-1, 1]"));
                }
                Ok(x)
            };
            TaskLabel::Va {
                valence: parse(v)?,
                arousal: parse(a)?,
            }
        }
    };
    let features = fields[4]
        .split(',')
        .map(|s| s.parse::<f64>().map_err(|_| format!("bad feature {s:?}")))
        .collect::<Result<Vec<_>, _>>()?;
    if features.len() != input_dim {
        return Err(format!("expected {input_dim} features, found {}", features.len()));
    }
    Ok(Instance {
        id,
        features,
        label,
        source,
    })
}

/// Parameters of the synthetic multitask data generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub latent_dim: usize,
    pub input_dim: usize,
    /// instances per task (AU, EXPR, VA)
    pub counts: [usize; 3],
    /// shift of the latent mean toward the first expression class
    pub imbalance_skew: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            latent_dim: 4,
            input_dim: 32,
            counts: [2000, 2000, 2000],
            imbalance_skew: 0.0,
            noise_sigma: 0.5,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.latent_dim < 2 {
            return Err(DataError::InvalidSpec("latent_dim must be >= 2".into()));
        }
        if self.input_dim == 0 {
            return Err(DataError::InvalidSpec("input_dim must be >= 1".into()));
        }
        if self.counts.iter().any(|&c| c < 4) {
            return Err(DataError::InvalidSpec(format!(
                "every task needs at least 4 instances, got {:?}",
                self.counts
            )));
        }
        if !(self.noise_sigma >= 0.0) || !(self.imbalance_skew >= 0.0) {
            return Err(DataError::InvalidSpec(
                "noise_sigma and imbalance_skew must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// AU thresholds along each hyperplane normal; later AUs are rarer.
const AU_THRESHOLDS: [f64; AU_DIM] = [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75];
/// Gain inside the valence/arousal tanh.
const VA_GAIN: f64 = 0.9;

/// The fixed random "world" shared by every sample drawn from one spec.
#[derive(Debug, Clone)]
pub struct Generator {
    spec: GenSpec,
    /// input_dim x latent_dim, row-major
    mixing: Vec<f64>,
    au_normals: Vec<Vec<f64>>,
    expr_dirs: Vec<Vec<f64>>,
    va_dirs: [Vec<f64>; 2],
    skew_dir: Vec<f64>,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| std_normal(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Box-Muller standard normal.
fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl Generator {
    pub fn new(spec: GenSpec) -> Result<Self, DataError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let l = spec.latent_dim;
        let scale = 1.0 / (l as f64).sqrt();
        let mixing = (0..spec.input_dim * l).map(|_| std_normal(&mut rng) * scale).collect();
        let au_normals = (0..AU_DIM).map(|_| unit_vector(&mut rng, l)).collect();
        // expression classes are angular sectors of a random latent plane,
        // equally likely when the latent mean is zero
        let e1 = unit_vector(&mut rng, l);
        let mut e2 = unit_vector(&mut rng, l);
        let proj: f64 = e1.iter().zip(&e2).map(|(a, b)| a * b).sum();
        for (b, a) in e2.iter_mut().zip(&e1) {
            *b -= proj * a;
        }
        let n2 = e2.iter().map(|x| x * x).sum::<f64>().sqrt();
        for b in &mut e2 {
            *b /= n2;
        }
        let expr_dirs = (0..EXPR_DIM)
            .map(|c| {
                let ang = 2.0 * std::f64::consts::PI * c as f64 / EXPR_DIM as f64;
                e1.iter().zip(&e2).map(|(a, b)| ang.cos() * a + ang.sin() * b).collect()
            })
            .collect();
        let va_dirs = [unit_vector(&mut rng, l), unit_vector(&mut rng, l)];
        Ok(Self {
            spec,
            mixing,
            au_normals,
            expr_dirs,
            va_dirs,
            skew_dir: e1,
        })
    }

    pub fn spec(&self) -> &GenSpec {
        &self.spec
    }

    fn latent(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.skew_dir
            .iter()
            .map(|&m| std_normal(rng) + self.spec.imbalance_skew * m)
            .collect()
    }

    fn features(&self, z: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let l = self.spec.latent_dim;
        (0..self.spec.input_dim)
            .map(|i| {
                let row = &self.mixing[i * l..(i + 1) * l];
                let clean: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum();
                if self.spec.noise_sigma > 0.0 {
                    clean + self.spec.noise_sigma * std_normal(rng)
                } else {
                    clean
                }
            })
            .collect()
    }

    /// The full label set the generator knows for a latent point; only one
    /// entry is kept per instance.
    pub fn label(&self, task: Task, z: &[f64]) -> TaskLabel {
        let dot = |v: &[f64]| v.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
        match task {
            Task::Au => TaskLabel::Au(std::array::from_fn(|k| dot(&self.au_normals[k]) > AU_THRESHOLDS[k])),
            Task::Expr => {
                let scores: Vec<f64> = self.expr_dirs.iter().map(|d| dot(d)).collect();
                TaskLabel::Expr(crate::numerics::argmax(&scores))
            }
            Task::Va => TaskLabel::Va {
                valence: (VA_GAIN * dot(&self.va_dirs[0])).tanh(),
                arousal: (VA_GAIN * dot(&self.va_dirs[1])).tanh(),
            },
        }
    }

    /// Draws `count` instances labelled for `task`. `stream` selects an
    /// independent sample stream over the same world.
    pub fn sample(&self, task: Task, count: usize, stream: u64, source: &str, first_id: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(1 + stream * 3 + task.index() as u64);
        let instances = (0..count)
            .map(|n| {
                let z = self.latent(&mut rng);
                let features = self.features(&z, &mut rng);
                Instance {
                    id: first_id + n as u64,
                    features,
                    label: self.label(task, &z),
                    source: source.to_string(),
                }
            })
            .collect();
        Dataset {
            input_dim: self.spec.input_dim,
            instances,
        }
    }
}

/// Per-task datasets, indexed by [`Task::index`].
pub type TaskDatasets = [Dataset; 3];

/// Draws `spec.counts` instances per task, each labelled for its task only.
pub fn generate(spec: &GenSpec) -> Result<TaskDatasets, DataError> {
    let g = Generator::new(spec.clone())?;
    Ok(draw(&g, &spec.counts, 0, "synth", 0))
}

/// Training sets of `spec.counts` plus held-out sets of `val_counts` from
/// the same world.
pub fn generate_with_holdout(
    spec: &GenSpec,
    val_counts: [usize; 3],
) -> Result<(TaskDatasets, TaskDatasets), DataError> {
    let g = Generator::new(spec.clone())?;
    let train = draw(&g, &spec.counts, 0, "synth", 0);
    let offset = spec.counts.iter().sum::<usize>() as u64;
    let val = draw(&g, &val_counts, 1, "synth-val", offset);
    Ok((train, val))
}

fn draw(g: &Generator, counts: &[usize; 3], stream: u64, source: &str, first_id: u64) -> TaskDatasets {
    let mut id = first_id;
    Task::ALL.map(|t| {
        let d = g.sample(t, counts[t.index()], stream, source, id);
        id += counts[t.index()] as u64;
        d
    })
}

/// What to do when the task pools have different sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolExhaustion {
    /// The epoch ends when the smallest pool runs out.
    #[default]
    StopAtSmallest,
    /// Smaller pools are reshuffled and reused until the largest runs out.
    CycleSmaller,
}

/// Yields batches of `n` instances per task, without replacement within an
/// epoch, in a seeded order that is reshuffled every epoch.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    pools: [Vec<Instance>; 3],
    per_task: usize,
    mode: PoolExhaustion,
    rng: ChaCha8Rng,
    order: [Vec<usize>; 3],
    cursor: [usize; 3],
    /// batches handed out in the current epoch
    batches: usize,
    epoch: usize,
}

impl EpochSampler {
    pub fn new(pools: [Vec<Instance>; 3], per_task: usize, seed: u64, mode: PoolExhaustion) -> Result<Self, DataError> {
        if per_task < 2 {
            return Err(DataError::InvalidSpec(format!(
                "batch needs at least 2 instances per task, got {per_task}"
            )));
        }
        for t in Task::ALL {
            let pool = &pools[t.index()];
            if pool.len() < per_task {
                return Err(DataError::InvalidSpec(format!(
                    "{} pool has {} instances, fewer than one batch of {per_task}",
                    t.tag(),
                    pool.len()
                )));
            }
            if let Some(bad) = pool.iter().find(|i| i.task() != t) {
                return Err(DataError::Schema(format!(
                    "instance {} in the {} pool is labelled {}",
                    bad.id,
                    t.tag(),
                    bad.task().tag()
                )));
            }
        }
        let mut s = Self {
            pools,
            per_task,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Default::default(),
            cursor: [0; 3],
            batches: 0,
            epoch: 0,
        };
        s.shuffle_all();
        Ok(s)
    }

    fn shuffle_all(&mut self) {
        for t in 0..3 {
            self.reshuffle(t);
        }
    }

    fn reshuffle(&mut self, t: usize) {
        let mut order: Vec<usize> = (0..self.pools[t].len()).collect();
        order.shuffle(&mut self.rng);
        self.order[t] = order;
        self.cursor[t] = 0;
    }

    pub fn per_task(&self) -> usize {
        self.per_task
    }

    /// Number of epochs completed via [`EpochSampler::start_next_epoch`].
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        let sizes = self.pools.iter().map(Vec::len);
        match self.mode {
            PoolExhaustion::StopAtSmallest => sizes.min().unwrap() / self.per_task,
            PoolExhaustion::CycleSmaller => sizes.max().unwrap() / self.per_task,
        }
    }

    /// Pool order of the current epoch for one task.
    pub fn permutation(&self, task: Task) -> &[usize] {
        &self.order[task.index()]
    }

    pub fn pool(&self, task: Task) -> &[Instance] {
        &self.pools[task.index()]
    }

    /// The next batch, or `None` at the end of the epoch.
    pub fn next_batch(&mut self) -> Option<Batch> {
        if self.batches >= self.batches_per_epoch() {
            return None;
        }
        let mut subsets: [Vec<Instance>; 3] = Default::default();
        for t in 0..3 {
            if self.cursor[t] + self.per_task > self.order[t].len() {
                // only reachable for smaller pools in cycle mode
                self.reshuffle(t);
            }
            let idx = &self.order[t][self.cursor[t]..self.cursor[t] + self.per_task];
            subsets[t] = idx.iter().map(|&i| self.pools[t][i].clone()).collect();
            self.cursor[t] += self.per_task;
        }
        self.batches += 1;
        let [au, expr, va] = subsets;
        Some(Batch::new(au, expr, va).expect("pools validated at construction"))
    }

    /// Reshuffles every pool and resets the batch counter.
    pub fn start_next_epoch(&mut self) {
        self.shuffle_all();
        self.batches = 0;
        self.epoch += 1;
    }
}
