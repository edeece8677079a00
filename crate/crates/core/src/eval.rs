//! Prediction decoding, task metrics, student ensembling and report files.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::data::{Dataset, TaskDatasets};
use crate::losses::TaskLabel;
use crate::model::{ModelOutput, MultitaskNet, Task, AU_DIM, EXPR_DIM, VA_BLOCK};
use crate::numerics::{self, argmax, sigmoid_clamped, softmax_t_into, BinGrid};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty evaluation set for {0:?}")]
    EmptySet(Task),
    #[error("ensemble needs at least one member")]
    EmptyEnsemble,
    #[error("{0}")]
    Numerics(#[from] numerics::NumericsError),
    #[error("malformed record {path} line {line}: {msg}")]
    Record { path: String, line: usize, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Decoded outputs of one model (or an ensemble) for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub au_probs: [f64; AU_DIM],
    pub au_binary: [bool; AU_DIM],
    pub expr_probs: [f64; EXPR_DIM],
    pub expr_class: usize,
    pub valence: f64,
    pub arousal: f64,
}

impl Prediction {
    /// Thresholds and argmax applied to averaged or raw probabilities.
    fn from_parts(au_probs: [f64; AU_DIM], expr_probs: [f64; EXPR_DIM], valence: f64, arousal: f64) -> Self {
        Self {
            au_binary: au_probs.map(|p| p > 0.5),
            expr_class: argmax(&expr_probs),
            au_probs,
            expr_probs,
            valence,
            arousal,
        }
    }
}

/// Sigmoid + 0.5 threshold for AUs, softmax + argmax for the expression,
/// bin-center expectation for valence and arousal.
pub fn decode(output: &ModelOutput) -> Prediction {
    let grid = BinGrid::default();
    let au_probs = output.au_logits.map(sigmoid_clamped);
    let mut expr_probs = [0.0; EXPR_DIM];
    softmax_t_into(&output.expr_logits, 1.0, &mut expr_probs);
    let mut block = [0.0; VA_BLOCK];
    softmax_t_into(output.valence_logits(), 1.0, &mut block);
    let valence = grid.expectation(&block);
    softmax_t_into(output.arousal_logits(), 1.0, &mut block);
    let arousal = grid.expectation(&block);
    Prediction::from_parts(au_probs, expr_probs, valence, arousal)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EnsembleMethod {
    /// Average AU probabilities, expression probabilities and continuous
    /// VA values, then threshold/argmax.
    #[default]
    Mean,
    /// Per-AU majority and expression plurality over member decisions
    /// (ties go to negative / lowest class); VA is still averaged.
    MajorityVote,
}

/// Combines the outputs of several students for one input.
pub fn ensemble(outputs: &[ModelOutput], method: EnsembleMethod) -> Result<Prediction, EvalError> {
    if outputs.is_empty() {
        return Err(EvalError::EmptyEnsemble);
    }
    let members: Vec<Prediction> = outputs.iter().map(decode).collect();
    let k = members.len() as f64;
    let mut au = [0.0; AU_DIM];
    let mut expr = [0.0; EXPR_DIM];
    let (mut v, mut a) = (0.0, 0.0);
    for m in &members {
        for (s, p) in au.iter_mut().zip(&m.au_probs) {
            *s += p;
        }
        for (s, p) in expr.iter_mut().zip(&m.expr_probs) {
            *s += p;
        }
        v += m.valence;
        a += m.arousal;
    }
    let mean = Prediction::from_parts(au.map(|s| s / k), expr.map(|s| s / k), v / k, a / k);
    Ok(match method {
        EnsembleMethod::Mean => mean,
        EnsembleMethod::MajorityVote => {
            let mut votes = [0usize; EXPR_DIM];
            let mut au_votes = [0usize; AU_DIM];
            for m in &members {
                votes[m.expr_class] += 1;
                for (c, &b) in au_votes.iter_mut().zip(&m.au_binary) {
                    *c += b as usize;
                }
            }
            let expr_class = (0..EXPR_DIM).fold(0, |best, c| if votes[c] > votes[best] { c } else { best });
            Prediction {
                au_binary: au_votes.map(|c| 2 * c > members.len()),
                expr_class,
                ..mean
            }
        }
    })
}

/// Unweighted mean over classes of `2TP / (2TP + FP + FN)`; a class with a
/// zero denominator (never present, never predicted) scores 0.
pub fn macro_f1<P: AsRef<[bool]>, T: AsRef<[bool]>>(preds: &[P], truths: &[T], num_classes: usize) -> f64 {
    assert_eq!(preds.len(), truths.len(), "macro_f1: length mismatch");
    let per_class = per_class_f1(preds, truths, num_classes);
    per_class.iter().sum::<f64>() / num_classes as f64
}

pub fn per_class_f1<P: AsRef<[bool]>, T: AsRef<[bool]>>(preds: &[P], truths: &[T], num_classes: usize) -> Vec<f64> {
    (0..num_classes)
        .map(|c| {
            let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
            for (p, t) in preds.iter().zip(truths) {
                match (p.as_ref()[c], t.as_ref()[c]) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    _ => {}
                }
            }
            let den = 2 * tp + fp + fneg;
            if den == 0 {
                0.0
            } else {
                2.0 * tp as f64 / den as f64
            }
        })
        .collect()
}

/// AU composite weight of F1 (accuracy takes the rest).
pub const AU_F1_WEIGHT: f64 = 0.5;
/// Expression composite weight of F1.
pub const EXPR_F1_WEIGHT: f64 = 0.67;
/// Expression composite weight of accuracy.
pub const EXPR_ACC_WEIGHT: f64 = 0.33;

pub fn au_composite(f1: f64, acc: f64) -> f64 {
    AU_F1_WEIGHT * f1 + (1.0 - AU_F1_WEIGHT) * acc
}

pub fn expr_composite(f1: f64, acc: f64) -> f64 {
    EXPR_F1_WEIGHT * f1 + EXPR_ACC_WEIGHT * acc
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricSet {
    pub au_f1_macro: f64,
    pub au_acc: f64,
    pub au_composite: f64,
    pub expr_f1_macro: f64,
    pub expr_acc: f64,
    pub expr_composite: f64,
    pub ccc_valence: f64,
    pub ccc_arousal: f64,
}

impl MetricSet {
    /// One score per task: AU composite, expression composite and the mean
    /// of the two CCCs.
    pub fn task_scores(&self) -> [f64; 3] {
        [
            self.au_composite,
            self.expr_composite,
            0.5 * (self.ccc_valence + self.ccc_arousal),
        ]
    }

    /// The four reported metrics.
    pub fn reported(&self) -> [f64; 4] {
        [
            self.au_composite,
            self.expr_composite,
            self.ccc_valence,
            self.ccc_arousal,
        ]
    }
}

/// AU metrics: macro F1 over the 8 AUs, element-wise accuracy over all
/// (instance, AU) pairs. Returns (f1, acc, composite).
pub fn au_metrics(preds: &[[bool; AU_DIM]], truths: &[[bool; AU_DIM]]) -> Result<(f64, f64, f64), EvalError> {
    if preds.is_empty() {
        return Err(EvalError::EmptySet(Task::Au));
    }
    let f1 = macro_f1(preds, truths, AU_DIM);
    let correct: usize = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| p.iter().zip(t).filter(|(a, b)| a == b).count())
        .sum();
    let acc = correct as f64 / (preds.len() * AU_DIM) as f64;
    Ok((f1, acc, au_composite(f1, acc)))
}

/// Expression metrics: macro F1 over 7 classes and instance accuracy.
pub fn expr_metrics(preds: &[usize], truths: &[usize]) -> Result<(f64, f64, f64), EvalError> {
    if preds.is_empty() {
        return Err(EvalError::EmptySet(Task::Expr));
    }
    let onehot = |k: &usize| -> [bool; EXPR_DIM] { std::array::from_fn(|c| c == *k) };
    let p: Vec<_> = preds.iter().map(onehot).collect();
    let t: Vec<_> = truths.iter().map(onehot).collect();
    let f1 = macro_f1(&p, &t, EXPR_DIM);
    let acc = preds.iter().zip(truths).filter(|(a, b)| a == b).count() as f64 / preds.len() as f64;
    Ok((f1, acc, expr_composite(f1, acc)))
}

/// Scores a predictor on the held-out set of each task.
pub fn evaluate_with<F>(predict: F, val: &TaskDatasets) -> Result<MetricSet, EvalError>
where
    F: Fn(&[f64]) -> Result<Prediction, EvalError>,
{
    let preds = |d: &Dataset| -> Result<Vec<Prediction>, EvalError> {
        d.instances().iter().map(|i| predict(&i.features)).collect()
    };
    let mut m = MetricSet::default();

    let au = &val[Task::Au.index()];
    let p = preds(au)?;
    let truths: Vec<[bool; AU_DIM]> = au
        .instances()
        .iter()
        .filter_map(|i| match i.label {
            TaskLabel::Au(b) => Some(b),
            _ => None,
        })
        .collect();
    let decisions: Vec<[bool; AU_DIM]> = p.iter().map(|p| p.au_binary).collect();
    (m.au_f1_macro, m.au_acc, m.au_composite) = au_metrics(&decisions, &truths)?;

    let ex = &val[Task::Expr.index()];
    let p = preds(ex)?;
    let truths: Vec<usize> = ex
        .instances()
        .iter()
        .filter_map(|i| match i.label {
            TaskLabel::Expr(k) => Some(k),
            _ => None,
        })
        .collect();
    let classes: Vec<usize> = p.iter().map(|p| p.expr_class).collect();
    (m.expr_f1_macro, m.expr_acc, m.expr_composite) = expr_metrics(&classes, &truths)?;

    let va = &val[Task::Va.index()];
    if va.is_empty() {
        return Err(EvalError::EmptySet(Task::Va));
    }
    let p = preds(va)?;
    let (tv, ta): (Vec<f64>, Vec<f64>) = va
        .instances()
        .iter()
        .filter_map(|i| match i.label {
            TaskLabel::Va { valence, arousal } => Some((valence, arousal)),
            _ => None,
        })
        .unzip();
    let pv: Vec<f64> = p.iter().map(|p| p.valence).collect();
    let pa: Vec<f64> = p.iter().map(|p| p.arousal).collect();
    m.ccc_valence = numerics::ccc(&tv, &pv)?;
    m.ccc_arousal = numerics::ccc(&ta, &pa)?;
    Ok(m)
}

pub fn evaluate_model(net: &MultitaskNet, val: &TaskDatasets) -> Result<MetricSet, EvalError> {
    evaluate_with(|x| Ok(decode(&net.forward(x))), val)
}

pub fn evaluate_ensemble(
    nets: &[MultitaskNet],
    val: &TaskDatasets,
    method: EnsembleMethod,
) -> Result<MetricSet, EvalError> {
    if nets.is_empty() {
        return Err(EvalError::EmptyEnsemble);
    }
    evaluate_with(
        |x| {
            let outs: Vec<ModelOutput> = nets.iter().map(|n| n.forward(x)).collect();
            ensemble(&outs, method)
        },
        val,
    )
}

/// Header of the summary table.
pub const REPORT_HEADER: &str = "model,au_composite,expr_composite,ccc_valence,ccc_arousal";
/// Header of the loss-curve files.
pub const CURVES_HEADER: &str = "epoch,mean_loss,lr";
/// Header of the metrics record written next to checkpoints.
pub const METRICS_HEADER: &str =
    "model,au_f1_macro,au_acc,au_composite,expr_f1_macro,expr_acc,expr_composite,ccc_valence,ccc_arousal";

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub au_composite: f64,
    pub expr_composite: f64,
    pub ccc_valence: f64,
    pub ccc_arousal: f64,
}

impl ReportRow {
    pub fn from_metrics(model: impl Into<String>, m: &MetricSet) -> Self {
        Self {
            model: model.into(),
            au_composite: m.au_composite,
            expr_composite: m.expr_composite,
            ccc_valence: m.ccc_valence,
            ccc_arousal: m.ccc_arousal,
        }
    }

    /// Four-decimal CSV line.
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.4},{:.4},{:.4},{:.4}",
            self.model, self.au_composite, self.expr_composite, self.ccc_valence, self.ccc_arousal
        )
    }
}

/// Full-precision metrics record, one row per model.
pub fn metrics_record(rows: &[(String, MetricSet)]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for (name, m) in rows {
        let _ = writeln!(
            s,
            "{name},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            m.au_f1_macro,
            m.au_acc,
            m.au_composite,
            m.expr_f1_macro,
            m.expr_acc,
            m.expr_composite,
            m.ccc_valence,
            m.ccc_arousal
        );
    }
    s
}

pub fn parse_metrics_record(text: &str, path: &str) -> Result<Vec<(String, MetricSet)>, EvalError> {
    let err = |line: usize, msg: String| EvalError::Record {
        path: path.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(err(1, "unexpected header".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(err(i + 2, format!("expected 9 fields, got {}", f.len())));
            }
            let v = f[1..]
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| err(i + 2, format!("bad number {s:?}"))))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((
                f[0].to_string(),
                MetricSet {
                    au_f1_macro: v[0],
                    au_acc: v[1],
                    au_composite: v[2],
                    expr_f1_macro: v[3],
                    expr_acc: v[4],
                    expr_composite: v[5],
                    ccc_valence: v[6],
                    ccc_arousal: v[7],
                },
            ))
        })
        .collect()
}

/// Parses rows in the summary-table schema, e.g. previously reported
/// reference rows that are carried through verbatim.
pub fn parse_report_rows(text: &str, path: &str) -> Result<Vec<ReportRow>, EvalError> {
    let err = |line: usize, msg: String| EvalError::Record {
        path: path.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(err(1, "unexpected header".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(err(i + 2, format!("expected 5 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err(i + 2, format!("bad number {s:?}")));
            Ok(ReportRow {
                model: f[0].to_string(),
                au_composite: num(f[1])?,
                expr_composite: num(f[2])?,
                ccc_valence: num(f[3])?,
                ccc_arousal: num(f[4])?,
            })
        })
        .collect()
}

pub fn report_table_csv(rows: &[ReportRow]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Aligned text rendering of the summary table.
pub fn report_table_text(rows: &[ReportRow]) -> String {
    let width = rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
    let mut s = format!(
        "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}\n",
        "model", "AU", "EXPR", "Valence", "Arousal"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}",
            r.model, r.au_composite, r.expr_composite, r.ccc_valence, r.ccc_arousal
        );
    }
    s
}

/// `(epoch, mean_loss, lr)` per epoch.
pub type Curve = Vec<(usize, f64, f64)>;

/// Everything `write_report` puts on disk.
#[derive(Debug, Clone, Default)]
pub struct ReportInputs {
    pub rows: Vec<ReportRow>,
    /// (model name, `epoch,mean_loss,lr` rows)
    pub curves: Vec<(String, Curve)>,
    /// (task short name, `label,before,after` CSV)
    pub balance: Vec<(String, String)>,
}

/// Writes `report.csv`, `report.txt`, `curves_<model>.csv` and
/// `balance_<task>.csv` into `out_dir`. Returns the written paths.
pub fn write_report(inputs: &ReportInputs, out_dir: &Path) -> Result<Vec<std::path::PathBuf>, EvalError> {
    if inputs.rows.is_empty() {
        return Err(EvalError::Record {
            path: out_dir.display().to_string(),
            line: 0,
            msg: "no evaluated models".into(),
        });
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<(), EvalError> {
        let p = out_dir.join(name);
        std::fs::write(&p, body).map_err(io_err(&p))?;
        written.push(p);
        Ok(())
    };
    put("report.csv".into(), report_table_csv(&inputs.rows))?;
    put("report.txt".into(), report_table_text(&inputs.rows))?;
    for (model, curve) in &inputs.curves {
        let mut s = format!("{CURVES_HEADER}\n");
        for (epoch, loss, lr) in curve {
            let _ = writeln!(s, "{epoch},{loss:.6},{lr:e}");
        }
        put(format!("curves_{model}.csv"), s)?;
    }
    for (task, csv) in &inputs.balance {
        put(format!("balance_{task}.csv"), csv.clone())?;
    }
    Ok(written)
}
