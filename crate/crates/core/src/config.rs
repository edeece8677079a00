//! Pipeline configuration as line-oriented `key = value` text.

use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::balance::{BalanceConfig, VaBinning};
use crate::data::{GenSpec, PoolExhaustion};
use crate::eval::EnsembleMethod;
use crate::losses::{CrossTaskSource, DistillConfig};
use crate::model::NetConfig;
use crate::training::{RunConfig, Schedule};

/// Environment variable consulted when no seed is configured.
pub const SEED_ENV: &str = "MTDISTILL_SEED";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value:?} ({expected})")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Every knob of the pipeline. Seeds for generation, balancing and training
/// all follow `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub gen: GenSpec,
    pub val_counts: [usize; 3],
    pub balance_enabled: bool,
    pub balance: BalanceConfig,
    pub run: RunConfig,
    pub ensemble: EnsembleMethod,
    /// existing dataset directory; `None` generates data from `gen`
    pub data_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            gen: GenSpec::default(),
            val_counts: [500; 3],
            balance_enabled: true,
            balance: BalanceConfig::default(),
            run: RunConfig::default(),
            ensemble: EnsembleMethod::default(),
            data_dir: None,
        }
    }
}

fn bad(key: &str, value: &str, expected: &'static str) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str, expected: &'static str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| bad(key, v, expected))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, v, "true or false")),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str, expected: &'static str) -> Result<Vec<T>, ConfigError> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(key, s.trim(), expected)).collect()
}

fn parse_triple(key: &str, v: &str) -> Result<[usize; 3], ConfigError> {
    let l: Vec<usize> = parse_list(key, v, "three counts a,b,c")?;
    l.try_into().map_err(|_| bad(key, v, "three counts a,b,c"))
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn parse_cross_task(v: &str) -> Option<CrossTaskSource> {
    match v {
        "same" => Some(CrossTaskSource::SameInstance),
        "paired" => Some(CrossTaskSource::PairedInstance),
        "off" => Some(CrossTaskSource::Disabled),
        _ => None,
    }
}

fn cross_task_name(c: CrossTaskSource) -> &'static str {
    match c {
        CrossTaskSource::SameInstance => "same",
        CrossTaskSource::PairedInstance => "paired",
        CrossTaskSource::Disabled => "off",
    }
}

pub fn parse_va_binning(v: &str) -> Option<VaBinning> {
    match v {
        "joint" => Some(VaBinning::Joint),
        "marginal" => Some(VaBinning::Marginal),
        _ => None,
    }
}

pub fn parse_pool_mode(v: &str) -> Option<PoolExhaustion> {
    match v {
        "stop" => Some(PoolExhaustion::StopAtSmallest),
        "cycle" => Some(PoolExhaustion::CycleSmaller),
        _ => None,
    }
}

pub fn parse_ensemble(v: &str) -> Option<EnsembleMethod> {
    match v {
        "mean" => Some(EnsembleMethod::Mean),
        "vote" => Some(EnsembleMethod::MajorityVote),
        _ => None,
    }
}

impl PipelineConfig {
    /// Keeps every derived seed and the network input width in step with
    /// the top-level values.
    pub fn sync(&mut self) {
        self.gen.seed = self.seed;
        self.balance.seed = self.seed;
        self.run.seed = self.seed;
        self.run.net.input_dim = self.gen.input_dim;
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.sync();
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let k = key;
        match k {
            "seed" => self.seed = parse_num(k, v, "unsigned integer")?,
            "data_dir" => self.data_dir = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "gen.latent_dim" => self.gen.latent_dim = parse_num(k, v, "count")?,
            "gen.input_dim" => self.gen.input_dim = parse_num(k, v, "count")?,
            "gen.counts" => self.gen.counts = parse_triple(k, v)?,
            "gen.val_counts" => self.val_counts = parse_triple(k, v)?,
            "gen.imbalance_skew" => self.gen.imbalance_skew = parse_num(k, v, "number")?,
            "gen.noise_sigma" => self.gen.noise_sigma = parse_num(k, v, "number")?,
            "balance.enabled" => self.balance_enabled = parse_bool(k, v)?,
            "balance.oversample_pct" => self.balance.oversample_pct = parse_num(k, v, "number")?,
            "balance.epoch_size" => {
                self.balance.epoch_size = if v == "auto" {
                    None
                } else {
                    Some(parse_num(k, v, "count or auto")?)
                }
            }
            "balance.va_binning" => {
                self.balance.va_binning = parse_va_binning(v).ok_or_else(|| bad(k, v, "joint or marginal"))?
            }
            "train.teacher_epochs" => self.run.teacher_epochs = parse_num(k, v, "count")?,
            "train.student_epochs" => self.run.student_epochs = parse_num(k, v, "count")?,
            "train.num_students" => self.run.num_students = parse_num(k, v, "count")?,
            "train.student_seeds" => self.run.student_seeds = parse_list(k, v, "comma-separated seeds")?,
            "train.batch_n" => self.run.batch_n = parse_num(k, v, "count")?,
            "train.lr" => self.run.schedule.base_lr = parse_num(k, v, "number")?,
            "train.decay_factor" => self.run.schedule.decay_factor = parse_num(k, v, "number")?,
            "train.decay_every" => self.run.schedule.decay_every = parse_num(k, v, "count")?,
            "train.hidden_dims" => self.run.net.hidden_dims = parse_list(k, v, "comma-separated widths")?,
            "train.pool_mode" => self.run.pool_mode = parse_pool_mode(v).ok_or_else(|| bad(k, v, "stop or cycle"))?,
            "train.parallel_students" => self.run.parallel_students = parse_bool(k, v)?,
            "distill.lambda" => self.run.distill.lambda = parse_num(k, v, "number")?,
            "distill.temperature" => self.run.distill.temperature = parse_num(k, v, "number")?,
            "distill.cross_task" => {
                self.run.distill.cross_task = parse_cross_task(v).ok_or_else(|| bad(k, v, "same, paired or off"))?
            }
            "eval.ensemble" => self.ensemble = parse_ensemble(v).ok_or_else(|| bad(k, v, "mean or vote"))?,
            _ => return Err(ConfigError::UnknownKey(k.to_string())),
        }
        self.sync();
        Ok(())
    }

    /// Parses config text on top of the defaults. A missing `seed` falls
    /// back to `env_seed`.
    pub fn parse(text: &str, env_seed: Option<&str>) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen_seed = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected `key = value`, got {raw:?}"),
            })?;
            let k = k.trim();
            seen_seed |= k == "seed";
            cfg.set(k, v.trim())?;
        }
        if !seen_seed {
            if let Some(s) = env_seed {
                cfg.set("seed", s.trim())?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.gen.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.run.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.val_counts.iter().any(|&c| c < 2) {
            return Err(ConfigError::Invalid(
                "every held-out set needs at least 2 instances".into(),
            ));
        }
        if !(self.balance.oversample_pct >= 0.0) {
            return Err(ConfigError::Invalid("balance.oversample_pct must be >= 0".into()));
        }
        Ok(())
    }

    /// The fully resolved configuration; parsing it back gives `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv(
            "data_dir",
            self.data_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        kv("gen.latent_dim", self.gen.latent_dim.to_string());
        kv("gen.input_dim", self.gen.input_dim.to_string());
        kv("gen.counts", join(&self.gen.counts));
        kv("gen.val_counts", join(&self.val_counts));
        kv("gen.imbalance_skew", format!("{:?}", self.gen.imbalance_skew));
        kv("gen.noise_sigma", format!("{:?}", self.gen.noise_sigma));
        kv("balance.enabled", self.balance_enabled.to_string());
        kv("balance.oversample_pct", format!("{:?}", self.balance.oversample_pct));
        kv(
            "balance.epoch_size",
            self.balance.epoch_size.map_or_else(|| "auto".into(), |n| n.to_string()),
        );
        kv(
            "balance.va_binning",
            match self.balance.va_binning {
                VaBinning::Joint => "joint",
                VaBinning::Marginal => "marginal",
            }
            .into(),
        );
        let r = &self.run;
        kv("train.teacher_epochs", r.teacher_epochs.to_string());
        kv("train.student_epochs", r.student_epochs.to_string());
        kv("train.num_students", r.num_students.to_string());
        // the derived seeds are written out so the file is fully explicit
        kv("train.student_seeds", join(&r.all_student_seeds()));
        kv("train.batch_n", r.batch_n.to_string());
        kv("train.lr", format!("{:?}", r.schedule.base_lr));
        kv("train.decay_factor", format!("{:?}", r.schedule.decay_factor));
        kv("train.decay_every", r.schedule.decay_every.to_string());
        kv("train.hidden_dims", join(&r.net.hidden_dims));
        kv(
            "train.pool_mode",
            match r.pool_mode {
                PoolExhaustion::StopAtSmallest => "stop",
                PoolExhaustion::CycleSmaller => "cycle",
            }
            .into(),
        );
        kv("train.parallel_students", r.parallel_students.to_string());
        kv("distill.lambda", format!("{:?}", r.distill.lambda));
        kv("distill.temperature", format!("{:?}", r.distill.temperature));
        kv("distill.cross_task", cross_task_name(r.distill.cross_task).into());
        kv(
            "eval.ensemble",
            match self.ensemble {
                EnsembleMethod::Mean => "mean",
                EnsembleMethod::MajorityVote => "vote",
            }
            .into(),
        );
        s
    }

    /// Architecture with the configured widths and the given input size.
    pub fn net_config(&self, input_dim: usize, seed: u64) -> NetConfig {
        NetConfig {
            input_dim,
            seed,
            ..self.run.net.clone()
        }
    }
}

/// Defaults used when a schedule is built from a single learning rate.
pub fn schedule_with_lr(lr: f64) -> Schedule {
    Schedule {
        base_lr: lr,
        ..Schedule::default()
    }
}

/// Distillation defaults with optional overrides.
pub fn distill_with(lambda: Option<f64>, temperature: Option<f64>) -> DistillConfig {
    let d = DistillConfig::default();
    DistillConfig {
        lambda: lambda.unwrap_or(d.lambda),
        temperature: temperature.unwrap_or(d.temperature),
        ..d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_text();
        let back = PipelineConfig::parse(&text, None).unwrap();
        // student seeds are materialized on output
        assert_eq!(back.run.student_seeds, cfg.run.all_student_seeds());
        assert_eq!(back.to_text(), text);
        assert!(text.contains("distill.lambda = 0.6\n"));
        assert!(text.contains("distill.temperature = 1.5\n"));
        assert!(text.contains("train.teacher_epochs = 8\n"));
        assert!(text.contains("train.student_epochs = 3\n"));
        assert!(text.contains("train.lr = 0.0001\n"));
    }

    #[test]
    fn overrides_and_comments() {
        let text = "# run\nseed = 7\ngen.counts = 10, 12, 14  # small\n\ndistill.cross_task = paired\ntrain.hidden_dims = 16\n";
        let cfg = PipelineConfig::parse(text, Some("99")).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.gen.seed, 7);
        assert_eq!(cfg.run.seed, 7);
        assert_eq!(cfg.gen.counts, [10, 12, 14]);
        assert_eq!(cfg.run.distill.cross_task, CrossTaskSource::PairedInstance);
        assert_eq!(cfg.run.net.hidden_dims, vec![16]);
    }

    #[test]
    fn env_seed_fallback() {
        let cfg = PipelineConfig::parse("train.num_students = 2\n", Some("42")).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.balance.seed, 42);
        assert_eq!(PipelineConfig::parse("", None).unwrap().seed, 0);
        assert!(PipelineConfig::parse("", Some("x")).is_err());
    }

    #[test]
    fn errors() {
        assert!(matches!(
            PipelineConfig::parse("nonsense\n", None),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            PipelineConfig::parse("foo = 1\n", None),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            PipelineConfig::parse("distill.cross_task = both\n", None),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            PipelineConfig::parse("gen.counts = 1,2\n", None),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            PipelineConfig::parse("train.num_students = 0\n", None),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            PipelineConfig::parse("distill.lambda = 1.5\n", None),
            Err(ConfigError::Invalid(_))
        ));
    }
}
