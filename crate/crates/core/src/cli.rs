//! Command-line front end: argument parsing, config resolution and
//! dispatch to the library.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::balance::balance_task;
use crate::config::{parse_cross_task, parse_ensemble, ConfigError, PipelineConfig, SEED_ENV};
use crate::data::{generate_with_holdout, Dataset, TaskDatasets};
use crate::eval::{
    evaluate_ensemble, evaluate_model, metrics_record, parse_metrics_record, parse_report_rows, write_report,
    MetricSet, ReportInputs, ReportRow,
};
use crate::model::{MultitaskNet, Task};
use crate::selfcheck::{gradient_suite, GRAD_TOLERANCE};
use crate::training::{
    history_file, param_hash, train_cohort, train_student, train_teacher, write_cohort, History, Manifest, TrainError,
    TrainingData, MANIFEST_FILE,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.cfg";

#[derive(Debug, Parser)]
#[command(
    name = "mtdistill",
    version,
    about = "Multitask teacher/student distillation with incomplete labels"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct Common {
    /// `key = value` config file; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// global seed (falls back to the config file, then MTDISTILL_SEED, then 0)
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic per-task training and held-out sets
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// training instances per task, e.g. 2000,2000,2000
        #[arg(long)]
        counts: Option<String>,
        #[arg(long)]
        val_counts: Option<String>,
        #[arg(long)]
        skew: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Rebalance the training sets and write the expanded pools
    Balance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        oversample_pct: Option<f64>,
        /// joint or marginal
        #[arg(long)]
        va_binning: Option<String>,
        #[arg(long)]
        epoch_size: Option<usize>,
    },
    /// Train a teacher on ground truth only
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train one student against a frozen teacher
    TrainStudent {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        teacher_ckpt: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        /// same, paired or off
        #[arg(long)]
        cross_task: Option<String>,
        /// checkpoint name inside --out
        #[arg(long, default_value = "student0")]
        name: String,
    },
    /// Train a teacher and its students, evaluate and write a report
    TrainCohort {
        #[command(flatten)]
        common: Common,
        /// dataset directory; generated from the config when absent
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        num_students: Option<usize>,
        #[arg(long)]
        parallel_students: bool,
    },
    /// Evaluate the ensemble of several checkpoints
    Ensemble {
        #[arg(long = "ckpt", required = true)]
        ckpts: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// mean or vote
        #[arg(long, default_value = "mean")]
        method: String,
    },
    /// Evaluate each checkpoint on its own
    Eval {
        #[arg(long = "ckpt", required = true)]
        ckpts: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild report files from a run directory
    Report {
        #[arg(long)]
        in_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// extra rows in the report schema, carried through verbatim
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Finite-difference check of every loss gradient
    Selfcheck {
        #[arg(long, default_value_t = 5)]
        configs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_n: Option<usize>,
}

/// Failure classes that map to exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime failure: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

/// Config file, then `MTDISTILL_SEED` when the file sets no seed, then
/// flag overrides.
fn resolve(common: &Common, overrides: &[(&str, Option<String>)]) -> Result<PipelineConfig, CliError> {
    let text = match &common.config {
        Some(p) => {
            std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?
        }
        None => String::new(),
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    let mut cfg = PipelineConfig::parse(&text, env_seed.as_deref())?;
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    for (k, v) in overrides {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    cfg.validate()?;
    info!("resolved configuration:\n{}", cfg.to_text());
    info!("seeds: global={} students={:?}", cfg.seed, cfg.run.all_student_seeds());
    Ok(cfg)
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn create_dir(p: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(p).map_err(|e| runtime(format!("cannot create {}: {e}", p.display())))
}

fn write_file(p: &Path, body: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(p, body).map_err(|e| runtime(format!("cannot write {}: {e}", p.display())))
}

pub fn dataset_path(dir: &Path, prefix: &str, task: Task) -> PathBuf {
    dir.join(format!("{prefix}_{}.mtd", task.short_name()))
}

pub fn write_datasets(dir: &Path, prefix: &str, sets: &TaskDatasets) -> Result<(), CliError> {
    for t in Task::ALL {
        sets[t.index()].save(dataset_path(dir, prefix, t)).map_err(runtime)?;
    }
    Ok(())
}

/// Loads `<prefix>_{au,expr,va}.mtd`, or `None` when none exist.
pub fn read_datasets(dir: &Path, prefix: &str) -> Result<Option<TaskDatasets>, CliError> {
    let paths = Task::ALL.map(|t| dataset_path(dir, prefix, t));
    let present = paths.iter().filter(|p| p.exists()).count();
    if present == 0 {
        return Ok(None);
    }
    if present < 3 {
        return Err(runtime(format!(
            "incomplete {prefix} sets in {}: need au, expr and va",
            dir.display()
        )));
    }
    let mut out = Vec::with_capacity(3);
    for (t, p) in Task::ALL.iter().zip(&paths) {
        let d = Dataset::load(p).map_err(runtime)?;
        if d.task().is_some_and(|dt| dt != *t) || d.instances().iter().any(|i| i.task() != *t) {
            return Err(runtime(format!("{} holds instances of another task", p.display())));
        }
        out.push(d);
    }
    Ok(Some(out.try_into().expect("three datasets")))
}

/// Training pools (balanced `pool_*` files when present) and held-out sets.
fn load_training(dir: &Path) -> Result<TrainingData, CliError> {
    let val = read_datasets(dir, "val")?;
    if let Some(pools) = read_datasets(dir, "pool")? {
        return Ok(TrainingData::unbalanced(&pools, val));
    }
    let train =
        read_datasets(dir, "train")?.ok_or_else(|| runtime(format!("no training sets in {}", dir.display())))?;
    warn!("no balanced pools in {}; training on the raw sets", dir.display());
    Ok(TrainingData::unbalanced(&train, val))
}

fn load_val(dir: &Path) -> Result<TaskDatasets, CliError> {
    read_datasets(dir, "val")?.ok_or_else(|| runtime(format!("no held-out sets (val_*.mtd) in {}", dir.display())))
}

fn load_ckpts(paths: &[PathBuf]) -> Result<Vec<(String, MultitaskNet)>, CliError> {
    paths
        .iter()
        .map(|p| {
            let net = MultitaskNet::load(p).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".into());
            Ok((name, net))
        })
        .collect()
}

fn check_input_dim(net: &MultitaskNet, sets: &TaskDatasets) -> Result<(), CliError> {
    match sets.iter().find(|d| d.input_dim() != net.input_dim()) {
        Some(d) => Err(CliError::Usage(format!(
            "checkpoint expects {} features, data has {}",
            net.input_dim(),
            d.input_dim()
        ))),
        None => Ok(()),
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData {
            common,
            out,
            counts,
            val_counts,
            skew,
            noise,
        } => {
            let cfg = resolve(
                &common,
                &[
                    ("gen.counts", counts),
                    ("gen.val_counts", val_counts),
                    ("gen.imbalance_skew", s(&skew)),
                    ("gen.noise_sigma", s(&noise)),
                ],
            )?;
            let (train, val) = generate_with_holdout(&cfg.gen, cfg.val_counts).map_err(runtime)?;
            create_dir(&out)?;
            write_datasets(&out, "train", &train)?;
            write_datasets(&out, "val", &val)?;
            write_file(&out.join(CONFIG_FILE), cfg.to_text())?;
            info!("wrote datasets to {}", out.display());
            Ok(())
        }
        Command::Balance {
            common,
            data_dir,
            out,
            oversample_pct,
            va_binning,
            epoch_size,
        } => {
            let cfg = resolve(
                &common,
                &[
                    ("balance.oversample_pct", s(&oversample_pct)),
                    ("balance.va_binning", va_binning),
                    ("balance.epoch_size", s(&epoch_size)),
                ],
            )?;
            let train = read_datasets(&data_dir, "train")?
                .ok_or_else(|| runtime(format!("no training sets in {}", data_dir.display())))?;
            create_dir(&out)?;
            for t in Task::ALL {
                let d = &train[t.index()];
                let (plan, report) = balance_task(d, t, &cfg.balance).map_err(runtime)?;
                let pool = Dataset::new(d.input_dim(), plan.expand(d.instances())).map_err(runtime)?;
                pool.save(dataset_path(&out, "pool", t)).map_err(runtime)?;
                write_file(&out.join(format!("balance_{}.tsv", t.short_name())), report.to_record())?;
                write_file(
                    &out.join(format!("balance_{}.csv", t.short_name())),
                    report.histogram_csv(),
                )?;
                println!("{}", report.to_table());
            }
            write_file(&out.join(CONFIG_FILE), cfg.to_text())?;
            Ok(())
        }
        Command::TrainTeacher { common, train } => {
            let cfg = resolve(
                &common,
                &[
                    ("train.teacher_epochs", s(&train.epochs)),
                    ("train.lr", s(&train.lr)),
                    ("train.batch_n", s(&train.batch_n)),
                ],
            )?;
            let data = load_training(&train.data_dir)?;
            let input_dim = data.pools[0].first().map_or(cfg.gen.input_dim, |i| i.features.len());
            let net =
                MultitaskNet::new(cfg.net_config(input_dim, cfg.seed)).map_err(|e| CliError::Usage(e.to_string()))?;
            let mut run = cfg.run.clone();
            run.net = net.config().clone();
            let (teacher, history) = train_teacher(&data, net, &run)?;
            create_dir(&train.out)?;
            teacher.save(train.out.join("teacher.mtnet")).map_err(runtime)?;
            write_file(&train.out.join(history_file("teacher")), history.to_record())?;
            write_file(&train.out.join(CONFIG_FILE), cfg.to_text())?;
            println!("teacher {}", param_hash(&teacher));
            Ok(())
        }
        Command::TrainStudent {
            common,
            train,
            teacher_ckpt,
            lambda,
            temperature,
            cross_task,
            name,
        } => {
            if let Some(c) = &cross_task {
                parse_cross_task(c).ok_or_else(|| CliError::Usage(format!("unknown --cross-task {c:?}")))?;
            }
            let cfg = resolve(
                &common,
                &[
                    ("train.student_epochs", s(&train.epochs)),
                    ("train.lr", s(&train.lr)),
                    ("train.batch_n", s(&train.batch_n)),
                    ("distill.lambda", s(&lambda)),
                    ("distill.temperature", s(&temperature)),
                    ("distill.cross_task", cross_task),
                ],
            )?;
            let teacher =
                MultitaskNet::load(&teacher_ckpt).map_err(|e| runtime(format!("{}: {e}", teacher_ckpt.display())))?;
            let data = load_training(&train.data_dir)?;
            let (student, history) = train_student(&data, &teacher, cfg.seed, &cfg.run)?;
            create_dir(&train.out)?;
            student.save(train.out.join(format!("{name}.mtnet"))).map_err(runtime)?;
            write_file(&train.out.join(history_file(&name)), history.to_record())?;
            write_file(&train.out.join(CONFIG_FILE), cfg.to_text())?;
            println!("{name} {}", param_hash(&student));
            Ok(())
        }
        Command::TrainCohort {
            common,
            data_dir,
            out_dir,
            num_students,
            parallel_students,
        } => {
            let mut cfg = resolve(
                &common,
                &[
                    ("train.num_students", s(&num_students)),
                    ("data_dir", data_dir.as_ref().map(|p| p.display().to_string())),
                ],
            )?;
            if parallel_students {
                cfg.run.parallel_students = true;
            }
            print_rows(&run_cohort(&cfg, &out_dir)?);
            Ok(())
        }
        Command::Ensemble {
            ckpts,
            data,
            out,
            method,
        } => {
            let method =
                parse_ensemble(&method).ok_or_else(|| CliError::Usage(format!("unknown --method {method:?}")))?;
            let nets: Vec<MultitaskNet> = load_ckpts(&ckpts)?.into_iter().map(|(_, n)| n).collect();
            let val = load_val(&data)?;
            for n in &nets {
                check_input_dim(n, &val)?;
            }
            let m = evaluate_ensemble(&nets, &val, method).map_err(runtime)?;
            write_metrics_and_report(&out, &[("ensemble".to_string(), m)], &[])
        }
        Command::Eval { ckpts, data, out } => {
            let nets = load_ckpts(&ckpts)?;
            let val = load_val(&data)?;
            let mut rows = Vec::new();
            for (name, n) in &nets {
                check_input_dim(n, &val)?;
                rows.push((name.clone(), evaluate_model(n, &val).map_err(runtime)?));
            }
            write_metrics_and_report(&out, &rows, &[])
        }
        Command::Report { in_dir, out, reference } => {
            print_rows(&report_from_dir(&in_dir, &out, reference.as_deref())?);
            Ok(())
        }
        Command::Selfcheck { configs, seed } => {
            let results = gradient_suite(configs, seed).map_err(runtime)?;
            let mut ok = true;
            for r in &results {
                let status = if r.passed() { "PASS" } else { "FAIL" };
                ok &= r.passed();
                println!(
                    "{status} {:<20} max rel error {:.3e} over {} configs (tolerance {GRAD_TOLERANCE:e})",
                    r.name, r.max_rel_error, r.configs
                );
            }
            if ok {
                Ok(())
            } else {
                Err(runtime("gradient check failed"))
            }
        }
    }
}

fn write_metrics_and_report(
    out: &Path,
    rows: &[(String, MetricSet)],
    curves: &[(String, History)],
) -> Result<(), CliError> {
    create_dir(out)?;
    write_file(&out.join(METRICS_FILE), metrics_record(rows))?;
    let inputs = ReportInputs {
        rows: rows
            .iter()
            .map(|(n, m)| ReportRow::from_metrics(n.clone(), m))
            .collect(),
        curves: curves.iter().map(|(n, h)| (n.clone(), h.curve())).collect(),
        balance: Vec::new(),
    };
    write_report(&inputs, out).map_err(runtime)?;
    print_rows(&inputs.rows);
    Ok(())
}

fn print_rows(rows: &[ReportRow]) {
    print!("{}", crate::eval::report_table_text(rows));
}

/// Full pipeline into `out_dir`: data (loaded or generated), balancing,
/// teacher, students, evaluation, checkpoints, manifest and report. Returns
/// the report rows.
pub fn run_cohort(cfg: &PipelineConfig, out_dir: &Path) -> Result<Vec<ReportRow>, CliError> {
    create_dir(out_dir)?;
    write_file(&out_dir.join(CONFIG_FILE), cfg.to_text())?;
    let (train, val) = match &cfg.data_dir {
        Some(dir) => {
            let train = read_datasets(dir, "train")?
                .ok_or_else(|| runtime(format!("no training sets in {}", dir.display())))?;
            (train, load_val(dir)?)
        }
        None => generate_with_holdout(&cfg.gen, cfg.val_counts).map_err(runtime)?,
    };
    let (data, balance) = if cfg.balance_enabled {
        let (d, reports) = TrainingData::balanced(&train, Some(val.clone()), &cfg.balance)?;
        (d, reports)
    } else {
        (TrainingData::unbalanced(&train, Some(val.clone())), Vec::new())
    };
    for r in &balance {
        let t = r.task.short_name();
        write_file(&out_dir.join(format!("balance_{t}.tsv")), r.to_record())?;
        write_file(&out_dir.join(format!("balance_{t}.csv")), r.histogram_csv())?;
    }
    let mut run = cfg.run.clone();
    run.net.input_dim = train[0].input_dim();
    let cohort = train_cohort(&data, &run)?;
    let (manifest, _) = write_cohort(&cohort, &run, out_dir)?;
    for e in &manifest.entries {
        info!("{} {} {}", e.role, e.file, e.sha256);
    }

    let mut rows = vec![(
        "teacher".to_string(),
        evaluate_model(&cohort.teacher, &val).map_err(runtime)?,
    )];
    for (k, s) in cohort.students.iter().enumerate() {
        rows.push((format!("student{k}"), evaluate_model(&s.net, &val).map_err(runtime)?));
    }
    let nets: Vec<MultitaskNet> = cohort.students.iter().map(|s| s.net.clone()).collect();
    rows.push((
        "ensemble".to_string(),
        evaluate_ensemble(&nets, &val, cfg.ensemble).map_err(runtime)?,
    ));
    write_file(&out_dir.join(METRICS_FILE), metrics_record(&rows))?;
    report_from_dir(out_dir, out_dir, None)
}

/// Report files from the stored metrics, histories and balance histograms
/// of a run directory.
pub fn report_from_dir(in_dir: &Path, out: &Path, reference: Option<&Path>) -> Result<Vec<ReportRow>, CliError> {
    let metrics_path = in_dir.join(METRICS_FILE);
    let text =
        std::fs::read_to_string(&metrics_path).map_err(|e| runtime(format!("{}: {e}", metrics_path.display())))?;
    let metrics = parse_metrics_record(&text, &metrics_path.display().to_string()).map_err(runtime)?;
    let mut rows: Vec<ReportRow> = metrics
        .iter()
        .map(|(n, m)| ReportRow::from_metrics(n.clone(), m))
        .collect();
    if let Some(r) = reference {
        let text = std::fs::read_to_string(r).map_err(|e| runtime(format!("{}: {e}", r.display())))?;
        rows.extend(parse_report_rows(&text, &r.display().to_string()).map_err(runtime)?);
    }
    let mut curves = Vec::new();
    let manifest_path = in_dir.join(MANIFEST_FILE);
    let roles: Vec<String> = if manifest_path.exists() {
        Manifest::load(&manifest_path)?
            .entries
            .into_iter()
            .map(|e| e.role)
            .collect()
    } else {
        metrics.iter().map(|(n, _)| n.clone()).collect()
    };
    for role in roles {
        let p = in_dir.join(history_file(&role));
        if p.exists() {
            let text = std::fs::read_to_string(&p).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
            let h = History::from_record(&text, &p.display().to_string())?;
            curves.push((role, h.curve()));
        }
    }
    let mut balance = Vec::new();
    for t in Task::ALL {
        let p = in_dir.join(format!("balance_{}.csv", t.short_name()));
        if p.exists() {
            let text = std::fs::read_to_string(&p).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
            balance.push((t.short_name().to_string(), text));
        }
    }
    let inputs = ReportInputs { rows, curves, balance };
    write_report(&inputs, out).map_err(runtime)?;
    Ok(inputs.rows)
}
