//! Imbalance measurement and resampling plans.
//!
//! A [`SamplingPlan`] assigns each instance of a dataset a replication count;
//! expanding the plan yields the pool the epoch sampler draws from. All plans
//! are deterministic given the dataset and seed.

use std::fmt::Write as _;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{Dataset, Instance};
use crate::losses::TaskLabel;
use crate::model::{Task, AU_DIM, EXPR_DIM};
use crate::numerics::{BinGrid, NumericsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BalanceError {
    #[error("no label has a positive count")]
    NoPositiveLabels,
    #[error("empty dataset")]
    Empty,
    #[error("class {0} has no instances")]
    MissingClass(usize),
    #[error("dataset does not hold {expected} instances only")]
    WrongTask { expected: &'static str },
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("stride must be >= 1")]
    ZeroStride,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Positive counts per label over `total` instances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelCounts {
    pub counts: Vec<usize>,
    pub total: usize,
}

impl LabelCounts {
    pub fn from_labelsets<L: AsRef<[bool]>>(labelsets: &[L], num_labels: usize) -> Self {
        let mut counts = vec![0; num_labels];
        for ls in labelsets {
            for (c, &b) in counts.iter_mut().zip(ls.as_ref()) {
                *c += b as usize;
            }
        }
        Self {
            counts,
            total: labelsets.len(),
        }
    }

    pub fn from_classes(classes: &[usize], num_classes: usize) -> Self {
        let mut counts = vec![0; num_classes];
        for &c in classes {
            counts[c] += 1;
        }
        Self {
            counts,
            total: classes.len(),
        }
    }

    /// Labels with no positive instance.
    pub fn zero_labels(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|&l| self.counts[l] == 0).collect()
    }
}

/// Per-label imbalance ratio `max_count / count(label)`; `None` for labels
/// with no positives, which are left out of [`mean_ir`].
pub fn irlbl(counts: &LabelCounts) -> Result<Vec<Option<f64>>, BalanceError> {
    let max = counts.counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Err(BalanceError::NoPositiveLabels);
    }
    Ok(counts
        .counts
        .iter()
        .map(|&c| (c > 0).then(|| max as f64 / c as f64))
        .collect())
}

/// Mean of the defined IRLbl values.
pub fn mean_ir(counts: &LabelCounts) -> Result<f64, BalanceError> {
    let ratios = irlbl(counts)?;
    let defined: Vec<f64> = ratios.into_iter().flatten().collect();
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Replication count per instance index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingPlan {
    counts: Vec<usize>,
}

impl SamplingPlan {
    pub fn identity(n: usize) -> Self {
        Self { counts: vec![1; n] }
    }

    pub fn from_counts(counts: Vec<usize>) -> Self {
        Self { counts }
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// `(instance index, replication count)` pairs.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.counts.iter().copied().enumerate()
    }

    pub fn epoch_size(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Clones every instance as many times as the plan says, in index order.
    pub fn expand(&self, instances: &[Instance]) -> Vec<Instance> {
        assert_eq!(instances.len(), self.counts.len(), "plan/dataset size mismatch");
        let mut out = Vec::with_capacity(self.epoch_size());
        for (inst, &c) in instances.iter().zip(&self.counts) {
            for _ in 0..c {
                out.push(inst.clone());
            }
        }
        out
    }
}

/// Imbalance before and after a resampling plan.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceReport {
    pub task: Task,
    pub labels: Vec<String>,
    pub before: LabelCounts,
    pub after: LabelCounts,
    pub irlbl_before: Vec<Option<f64>>,
    pub irlbl_after: Vec<Option<f64>>,
    pub mean_ir_before: f64,
    pub mean_ir_after: f64,
}

impl BalanceReport {
    fn new(task: Task, labels: Vec<String>, before: LabelCounts, after: LabelCounts) -> Result<Self, BalanceError> {
        Ok(Self {
            task,
            irlbl_before: irlbl(&before)?,
            irlbl_after: irlbl(&after)?,
            mean_ir_before: mean_ir(&before)?,
            mean_ir_after: mean_ir(&after)?,
            labels,
            before,
            after,
        })
    }

    /// Aligned table for terminals and logs.
    pub fn to_table(&self) -> String {
        let fmt_ir = |r: Option<f64>| r.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        let mut s = format!(
            "{:<10} {:>10} {:>10} {:>12} {:>12}\n",
            "label", "before", "after", "irlbl_before", "irlbl_after"
        );
        for (i, name) in self.labels.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:<10} {:>10} {:>10} {:>12} {:>12}",
                name,
                self.before.counts[i],
                self.after.counts[i],
                fmt_ir(self.irlbl_before[i]),
                fmt_ir(self.irlbl_after[i]),
            );
        }
        let _ = writeln!(
            s,
            "instances {} -> {}; MeanIR {:.4} -> {:.4}",
            self.before.total, self.after.total, self.mean_ir_before, self.mean_ir_after
        );
        s
    }

    /// Tab-separated record file: a header line, one row per label and a
    /// final `#mean_ir` line.
    pub fn to_record(&self) -> String {
        let fmt_ir = |r: Option<f64>| r.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
        let mut s = format!(
            "#balance task={}\nlabel\tbefore\tafter\tirlbl_before\tirlbl_after\n",
            self.task.tag()
        );
        for (i, name) in self.labels.iter().enumerate() {
            let _ = writeln!(
                s,
                "{name}\t{}\t{}\t{}\t{}",
                self.before.counts[i],
                self.after.counts[i],
                fmt_ir(self.irlbl_before[i]),
                fmt_ir(self.irlbl_after[i])
            );
        }
        let _ = writeln!(
            s,
            "#mean_ir\t{:.6}\t{:.6}\t{}\t{}",
            self.mean_ir_before, self.mean_ir_after, self.before.total, self.after.total
        );
        s
    }

    /// `label,before,after` histogram.
    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("label,before,after\n");
        for (i, name) in self.labels.iter().enumerate() {
            let _ = writeln!(s, "{name},{},{}", self.before.counts[i], self.after.counts[i]);
        }
        s
    }
}

fn au_labelsets(data: &Dataset) -> Result<Vec<[bool; AU_DIM]>, BalanceError> {
    data.instances()
        .iter()
        .map(|i| match i.label {
            TaskLabel::Au(bits) => Ok(bits),
            _ => Err(BalanceError::WrongTask { expected: "AU" }),
        })
        .collect()
}

fn expr_classes(data: &Dataset) -> Result<Vec<usize>, BalanceError> {
    data.instances()
        .iter()
        .map(|i| match i.label {
            TaskLabel::Expr(k) => Ok(k),
            _ => Err(BalanceError::WrongTask { expected: "EXPR" }),
        })
        .collect()
}

fn va_values(data: &Dataset) -> Result<Vec<(f64, f64)>, BalanceError> {
    data.instances()
        .iter()
        .map(|i| match i.label {
            TaskLabel::Va { valence, arousal } => Ok((valence, arousal)),
            _ => Err(BalanceError::WrongTask { expected: "VA" }),
        })
        .collect()
}

/// Multilabel random oversampling.
///
/// Each round recomputes IRLbl and MeanIR, then clones one random instance
/// carrying each minority label (IRLbl > MeanIR). Stops once the clones
/// reach `oversample_pct` percent of the original size or no minority label
/// remains. Instances are never removed.
pub fn ml_ros<L: AsRef<[bool]>>(
    labelsets: &[L],
    num_labels: usize,
    oversample_pct: f64,
    seed: u64,
) -> Result<(SamplingPlan, LabelCounts, LabelCounts), BalanceError> {
    if labelsets.is_empty() {
        return Err(BalanceError::Empty);
    }
    let before = LabelCounts::from_labelsets(labelsets, num_labels);
    for l in before.zero_labels() {
        warn!("label {l} has no positive instances; excluded from MeanIR and never cloned");
    }
    let budget = (labelsets.len() as f64 * oversample_pct.max(0.0) / 100.0).floor() as usize;
    let bags: Vec<Vec<usize>> = (0..num_labels)
        .map(|l| (0..labelsets.len()).filter(|&i| labelsets[i].as_ref()[l]).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = vec![1usize; labelsets.len()];
    let mut counts = before.clone();
    let mut clones = 0;
    'rounds: while clones < budget {
        let ratios = irlbl(&counts)?;
        let mir = mean_ir(&counts)?;
        let minority: Vec<usize> = (0..num_labels)
            .filter(|&l| ratios[l].is_some_and(|r| r > mir))
            .collect();
        if minority.is_empty() {
            break;
        }
        for l in minority {
            if clones == budget {
                break 'rounds;
            }
            let bag = &bags[l];
            let pick = bag[rng.gen_range(0..bag.len())];
            plan[pick] += 1;
            counts.total += 1;
            for (c, &b) in counts.counts.iter_mut().zip(labelsets[pick].as_ref()) {
                *c += b as usize;
            }
            clones += 1;
        }
    }
    Ok((SamplingPlan { counts: plan }, before, counts))
}

/// [`ml_ros`] over an AU dataset, with its report.
pub fn ml_ros_dataset(
    data: &Dataset,
    oversample_pct: f64,
    seed: u64,
) -> Result<(SamplingPlan, BalanceReport), BalanceError> {
    let sets = au_labelsets(data)?;
    let (plan, before, after) = ml_ros(&sets, AU_DIM, oversample_pct, seed)?;
    let labels = (0..AU_DIM).map(|k| format!("au{k}")).collect();
    Ok((plan, BalanceReport::new(Task::Au, labels, before, after)?))
}

/// Rounds `targets` to integers summing to `total`: floors first, then one
/// extra unit to the largest fractional parts. Ties break in a seeded
/// random order.
fn largest_remainder(targets: &[f64], total: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.shuffle(rng);
    order.sort_by(|&a, &b| {
        let fa = targets[a] - targets[a].floor();
        let fb = targets[b] - targets[b].floor();
        fb.total_cmp(&fa)
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// Spreads each group's planned count uniformly over its members.
fn spread_within_groups(groups: &[Vec<usize>], group_counts: &[usize], n: usize, rng: &mut ChaCha8Rng) -> SamplingPlan {
    let mut plan = vec![0usize; n];
    for (members, &count) in groups.iter().zip(group_counts) {
        if members.is_empty() {
            continue;
        }
        let q = count / members.len();
        let r = count % members.len();
        let mut shuffled = members.clone();
        shuffled.shuffle(rng);
        for (j, &i) in shuffled.iter().enumerate() {
            plan[i] = q + usize::from(j < r);
        }
    }
    SamplingPlan { counts: plan }
}

/// Plans an epoch of `epoch_size` draws in which every class is equally
/// likely and instances within a class are uniform. Planned per-class
/// counts differ by at most one.
pub fn class_resample(
    classes: &[usize],
    num_classes: usize,
    epoch_size: usize,
    seed: u64,
) -> Result<SamplingPlan, BalanceError> {
    let mut groups = vec![Vec::new(); num_classes];
    for (i, &c) in classes.iter().enumerate() {
        groups[c].push(i);
    }
    if let Some(missing) = groups.iter().position(Vec::is_empty) {
        return Err(BalanceError::MissingClass(missing));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets = vec![epoch_size as f64 / num_classes as f64; num_classes];
    let per_class = largest_remainder(&targets, epoch_size, &mut rng);
    Ok(spread_within_groups(&groups, &per_class, classes.len(), &mut rng))
}

/// [`class_resample`] over an expression dataset; `epoch_size` defaults to
/// the dataset size.
pub fn class_resample_dataset(
    data: &Dataset,
    epoch_size: Option<usize>,
    seed: u64,
) -> Result<(SamplingPlan, BalanceReport), BalanceError> {
    let classes = expr_classes(data)?;
    let epoch = epoch_size.unwrap_or(classes.len());
    let plan = class_resample(&classes, EXPR_DIM, epoch, seed)?;
    let before = LabelCounts::from_classes(&classes, EXPR_DIM);
    let after = planned_class_counts(&classes, EXPR_DIM, &plan);
    let labels = (0..EXPR_DIM).map(|k| format!("expr{k}")).collect();
    Ok((plan, BalanceReport::new(Task::Expr, labels, before, after)?))
}

fn planned_class_counts(classes: &[usize], num_classes: usize, plan: &SamplingPlan) -> LabelCounts {
    let mut counts = vec![0; num_classes];
    for (&c, &r) in classes.iter().zip(plan.counts()) {
        counts[c] += r;
    }
    LabelCounts {
        counts,
        total: plan.epoch_size(),
    }
}

/// How valence/arousal bins define resampling categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VaBinning {
    /// One category per occupied (valence bin, arousal bin) cell.
    #[default]
    Joint,
    /// Half the epoch balances valence bins, half balances arousal bins.
    Marginal,
}

/// Resamples VA instances toward equal probability per occupied bin
/// category. Empty cells get nothing.
pub fn va_bin_resample(
    values: &[(f64, f64)],
    grid: &BinGrid,
    epoch_size: usize,
    mode: VaBinning,
    seed: u64,
) -> Result<SamplingPlan, BalanceError> {
    if values.is_empty() {
        return Err(BalanceError::Empty);
    }
    let bins: Vec<(usize, usize)> = values
        .iter()
        .map(|&(v, a)| Ok((grid.to_bin(v)?, grid.to_bin(a)?)))
        .collect::<Result<_, NumericsError>>()?;
    let nb = grid.num_bins();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        VaBinning::Joint => {
            let mut cells: Vec<Vec<usize>> = vec![Vec::new(); nb * nb];
            for (i, &(v, a)) in bins.iter().enumerate() {
                cells[v * nb + a].push(i);
            }
            let occupied: Vec<Vec<usize>> = cells.into_iter().filter(|c| !c.is_empty()).collect();
            let targets = vec![epoch_size as f64 / occupied.len() as f64; occupied.len()];
            let per_cell = largest_remainder(&targets, epoch_size, &mut rng);
            Ok(spread_within_groups(&occupied, &per_cell, values.len(), &mut rng))
        }
        VaBinning::Marginal => {
            let mut vcount = vec![0usize; nb];
            let mut acount = vec![0usize; nb];
            for &(v, a) in &bins {
                vcount[v] += 1;
                acount[a] += 1;
            }
            let vocc = vcount.iter().filter(|&&c| c > 0).count() as f64;
            let aocc = acount.iter().filter(|&&c| c > 0).count() as f64;
            let e = epoch_size as f64;
            let targets: Vec<f64> = bins
                .iter()
                .map(|&(v, a)| 0.5 * e / (vocc * vcount[v] as f64) + 0.5 * e / (aocc * acount[a] as f64))
                .collect();
            Ok(SamplingPlan {
                counts: largest_remainder(&targets, epoch_size, &mut rng),
            })
        }
    }
}

/// [`va_bin_resample`] over a VA dataset. The report histograms the joint
/// cells that are occupied before resampling.
pub fn va_bin_resample_dataset(
    data: &Dataset,
    grid: &BinGrid,
    epoch_size: Option<usize>,
    mode: VaBinning,
    seed: u64,
) -> Result<(SamplingPlan, BalanceReport), BalanceError> {
    let values = va_values(data)?;
    let epoch = epoch_size.unwrap_or(values.len());
    let plan = va_bin_resample(&values, grid, epoch, mode, seed)?;
    let nb = grid.num_bins();
    let cells: Vec<usize> = values
        .iter()
        .map(|&(v, a)| Ok(grid.to_bin(v)? * nb + grid.to_bin(a)?))
        .collect::<Result<_, NumericsError>>()?;
    let mut occupied: Vec<usize> = cells.clone();
    occupied.sort_unstable();
    occupied.dedup();
    let compact: Vec<usize> = cells.iter().map(|c| occupied.binary_search(c).unwrap()).collect();
    let before = LabelCounts::from_classes(&compact, occupied.len());
    let after = planned_class_counts(&compact, occupied.len(), &plan);
    let labels = occupied
        .iter()
        .map(|c| format!("v{:02}a{:02}", c / nb, c % nb))
        .collect();
    Ok((plan, BalanceReport::new(Task::Va, labels, before, after)?))
}

/// Keeps every `keep_every`-th instance of `primary` (starting with the
/// first) and appends all of `external`. Sources are kept per instance.
pub fn merge_downsample(primary: &Dataset, external: &Dataset, keep_every: usize) -> Result<Dataset, BalanceError> {
    if keep_every == 0 {
        return Err(BalanceError::ZeroStride);
    }
    if primary.input_dim() != external.input_dim() {
        return Err(BalanceError::Schema(format!(
            "input_dim {} vs {}",
            primary.input_dim(),
            external.input_dim()
        )));
    }
    match (primary.task(), external.task()) {
        (Some(a), Some(b)) if a != b => {
            return Err(BalanceError::Schema(format!(
                "cannot merge {} with {}",
                a.tag(),
                b.tag()
            )))
        }
        _ if (!primary.is_empty() && primary.task().is_none())
            || (!external.is_empty() && external.task().is_none()) =>
        {
            return Err(BalanceError::Schema("mixed-task dataset".into()))
        }
        _ => {}
    }
    let instances: Vec<Instance> = primary
        .instances()
        .iter()
        .step_by(keep_every)
        .chain(external.instances())
        .cloned()
        .collect();
    Dataset::new(primary.input_dim(), instances).map_err(|e| BalanceError::Schema(e.to_string()))
}

/// Balancing knobs for the three tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceConfig {
    pub oversample_pct: f64,
    /// `None` keeps the dataset size
    pub epoch_size: Option<usize>,
    pub va_binning: VaBinning,
    pub seed: u64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self {
            oversample_pct: 25.0,
            epoch_size: None,
            va_binning: VaBinning::Joint,
            seed: 0,
        }
    }
}

/// Runs the task-appropriate balancing procedure.
pub fn balance_task(
    data: &Dataset,
    task: Task,
    cfg: &BalanceConfig,
) -> Result<(SamplingPlan, BalanceReport), BalanceError> {
    match task {
        Task::Au => ml_ros_dataset(data, cfg.oversample_pct, cfg.seed),
        Task::Expr => class_resample_dataset(data, cfg.epoch_size, cfg.seed),
        Task::Va => va_bin_resample_dataset(data, &BinGrid::default(), cfg.epoch_size, cfg.va_binning, cfg.seed),
    }
}
