//! Flat `key = value` experiment configuration.
//!
//! `n` and `m` accept comma-separated lists; the file expands to the
//! Cartesian product of both, one [`ExperimentConfig`] per pair.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bounds::ConstantVariant;
use crate::infotheory::MiEstimator;
use crate::metalearn::{AdaptConfig, MamlConfig, Schedule, SgldConfig, DEFAULT_COVARIANCE_SAMPLES};
use crate::tasks::{TaskMode, DEFAULT_STD};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },

    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },

    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },

    #[error("key `{key}`: {msg}")]
    Value { key: String, msg: String },

    #[error("{0}")]
    Invalid(String),

    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Every reportable quantity, in CSV row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BoundName {
    SqrtDeltaMi,
    SqrtDeltaCmi,
    SqrtQuadMi,
    SqrtQuadCmi,
    KlQuadMi,
    KlQuadCmi,
    FastRate,
    FastRateQuadCmi,
    VarianceFastRate,
    InterpolatingRisk,
    SgldTrajectory,
    MamlTrajectory,
}

impl BoundName {
    pub const ALL: [BoundName; 12] = [
        BoundName::SqrtDeltaMi,
        BoundName::SqrtDeltaCmi,
        BoundName::SqrtQuadMi,
        BoundName::SqrtQuadCmi,
        BoundName::KlQuadMi,
        BoundName::KlQuadCmi,
        BoundName::FastRate,
        BoundName::FastRateQuadCmi,
        BoundName::VarianceFastRate,
        BoundName::InterpolatingRisk,
        BoundName::SgldTrajectory,
        BoundName::MamlTrajectory,
    ];

    pub const DEFAULT: [BoundName; 5] = [
        BoundName::SqrtDeltaMi,
        BoundName::KlQuadMi,
        BoundName::FastRate,
        BoundName::VarianceFastRate,
        BoundName::InterpolatingRisk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BoundName::SqrtDeltaMi => "sqrt_delta_mi",
            BoundName::SqrtDeltaCmi => "sqrt_delta_cmi",
            BoundName::SqrtQuadMi => "sqrt_quad_mi",
            BoundName::SqrtQuadCmi => "sqrt_quad_cmi",
            BoundName::KlQuadMi => "kl_quad_mi",
            BoundName::KlQuadCmi => "kl_quad_cmi",
            BoundName::FastRate => "fast_rate",
            BoundName::FastRateQuadCmi => "fast_rate_quad_cmi",
            BoundName::VarianceFastRate => "variance_fast_rate",
            BoundName::InterpolatingRisk => "interpolating_risk",
            BoundName::SgldTrajectory => "sgld_trajectory",
            BoundName::MamlTrajectory => "maml_trajectory",
        }
    }
}

impl FromStr for BoundName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BoundName::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| format!("unknown bound `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvSpec {
    Gaussian {
        classes: usize,
        dim: usize,
        std: f64,
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        center: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainerKind {
    JointSgld,
    NoisyMaml,
}

impl TrainerKind {
    pub fn name(self) -> &'static str {
        match self {
            TrainerKind::JointSgld => "joint-sgld",
            TrainerKind::NoisyMaml => "noisy-maml",
        }
    }
}

impl FromStr for TrainerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "joint-sgld" => Ok(TrainerKind::JointSgld),
            "noisy-maml" => Ok(TrainerKind::NoisyMaml),
            other => Err(format!("unknown trainer `{other}`")),
        }
    }
}

/// One fully specified experiment: a single `(n, m)` point.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub task_mode: TaskMode,
    pub n: usize,
    pub m: usize,
    pub t1: usize,
    pub t2: usize,
    pub trainer: TrainerKind,
    /// Outer-loop settings; batch sizes are already clamped to `n` and `m`.
    pub sgld: SgldConfig,
    pub inner_step: Schedule,
    /// In-task training split for MAML; `None` means `m / 2`.
    pub m_tr: Option<usize>,
    pub hidden: usize,
    pub layers: usize,
    pub adapt: AdaptConfig,
    pub bounds: Vec<BoundName>,
    pub estimator: MiEstimator,
    pub variant: ConstantVariant,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// Defaults for a Gaussian environment at one `(n, m)` point.
    pub fn gaussian(n: usize, m: usize) -> Self {
        let sgld = SgldConfig::default();
        Self {
            env: EnvSpec::Gaussian {
                classes: 16,
                dim: 8,
                std: DEFAULT_STD,
                seed: 0,
            },
            task_mode: TaskMode::ClassPair,
            n,
            m,
            t1: 5,
            t2: 10,
            trainer: TrainerKind::JointSgld,
            sgld: SgldConfig {
                task_batch: sgld.task_batch.min(n),
                sample_batch: sgld.sample_batch.min(m),
                ..sgld
            },
            inner_step: Schedule::Constant(0.1),
            m_tr: None,
            hidden: 32,
            layers: 4,
            adapt: AdaptConfig::default(),
            bounds: BoundName::DEFAULT.to_vec(),
            estimator: MiEstimator::PlugIn,
            variant: ConstantVariant::Proof,
            seed: 0,
            out_dir: PathBuf::from("results"),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if self.n == 0 || self.m == 0 || self.t1 == 0 || self.t2 == 0 {
            return bad("n, m, t1 and t2 must all be at least 1".into());
        }
        if self.hidden == 0 || self.layers == 0 {
            return bad("hidden width and layer count must be positive".into());
        }
        if self.trainer == TrainerKind::NoisyMaml {
            let m_tr = self.maml_split();
            if self.m < 2 || m_tr == 0 || m_tr >= self.m {
                return bad(format!("MAML split m_tr = {m_tr} must lie in 1..{}", self.m));
            }
        }
        if self.sgld.record_trajectory && self.sgld.covariance_samples < 2 {
            return bad("covariance_samples must be at least 2".into());
        }
        Ok(())
    }

    pub fn maml_split(&self) -> usize {
        self.m_tr.unwrap_or(self.m / 2)
    }

    pub fn maml(&self) -> MamlConfig {
        MamlConfig {
            outer: self.sgld.clone(),
            inner_step: self.inner_step.clone(),
            m_tr: self.maml_split(),
        }
    }

    /// Stable textual form; the basis of [`config_hash`](Self::config_hash).
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        match &self.env {
            EnvSpec::Gaussian { classes, dim, std, seed } => {
                let _ = writeln!(s, "env=gaussian\nclasses={classes}\ndim={dim}\nstd={std:?}\nenv_seed={seed}");
            }
            EnvSpec::Idx { images, labels, center } => {
                let _ = writeln!(
                    s,
                    "env=idx\nidx_images={}\nidx_labels={}\nidx_center={center}",
                    images.display(),
                    labels.display()
                );
            }
        }
        let bounds: Vec<&str> = self.bounds.iter().map(|b| b.name()).collect();
        let _ = writeln!(
            s,
            "task_mode={}\nn={}\nm={}\nt1={}\nt2={}\ntrainer={}",
            self.task_mode.name(),
            self.n,
            self.m,
            self.t1,
            self.t2,
            self.trainer.name()
        );
        let _ = writeln!(
            s,
            "iterations={}\nstep_size={:?}\nnoise={:?}\ntask_batch={}\nsample_batch={}\nrecord_trajectory={}\ncovariance_samples={}",
            self.sgld.iterations,
            self.sgld.step_size,
            self.sgld.noise,
            self.sgld.task_batch,
            self.sgld.sample_batch,
            self.sgld.record_trajectory,
            self.sgld.covariance_samples
        );
        let _ = writeln!(
            s,
            "inner_step={:?}\nm_tr={:?}\nhidden={}\nlayers={}",
            self.inner_step, self.m_tr, self.hidden, self.layers
        );
        let _ = writeln!(
            s,
            "adapt_steps={}\nadapt_step_size={:?}\nadapt_noise={:?}\nadapt_batch={:?}",
            self.adapt.steps, self.adapt.step_size, self.adapt.noise, self.adapt.batch
        );
        let _ = writeln!(
            s,
            "bounds={}\nestimator={}\nconstant_variant={:?}\nseed={}",
            bounds.join(","),
            self.estimator.name(),
            self.variant,
            self.seed
        );
        s
    }

    /// First 16 hex digits of the SHA-256 of [`canonical`](Self::canonical).
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

const KEYS: &[&str] = &[
    "env",
    "classes",
    "dim",
    "std",
    "env_seed",
    "idx_images",
    "idx_labels",
    "idx_center",
    "task_mode",
    "n",
    "m",
    "t1",
    "t2",
    "trainer",
    "iterations",
    "step_size",
    "noise",
    "task_batch",
    "sample_batch",
    "record_trajectory",
    "covariance_samples",
    "inner_step",
    "m_tr",
    "hidden",
    "layers",
    "adapt_steps",
    "adapt_step_size",
    "adapt_noise",
    "adapt_batch",
    "bounds",
    "estimator",
    "constant_variant",
    "seed",
    "out",
];

fn parse_entries(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(ConfigError::Syntax {
                line,
                msg: format!("expected `key = value`, found `{content}`"),
            });
        };
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey {
                line,
                key: key.to_string(),
            });
        }
        if map.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(ConfigError::DuplicateKey {
                line,
                key: key.to_string(),
            });
        }
    }
    Ok(map)
}

struct Entries(BTreeMap<String, String>);

impl Entries {
    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e: T::Err| ConfigError::Value {
                key: key.into(),
                msg: e.to_string(),
            }),
        }
    }

    fn list<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse().map_err(|e: T::Err| ConfigError::Value {
                        key: key.into(),
                        msg: e.to_string(),
                    })
                })
                .collect(),
        }
    }

    fn path(&self, key: &str) -> Result<PathBuf, ConfigError> {
        self.0.get(key).map(PathBuf::from).ok_or_else(|| ConfigError::Value {
            key: key.into(),
            msg: "required for env = idx".into(),
        })
    }
}

/// Parses a configuration file body into one config per `(n, m)` pair.
pub fn parse_config(text: &str) -> Result<Vec<ExperimentConfig>, ConfigError> {
    let e = Entries(parse_entries(text)?);
    let base = ExperimentConfig::gaussian(1, 1);
    let env = match e.get::<String>("env", "gaussian".into())?.as_str() {
        "gaussian" => EnvSpec::Gaussian {
            classes: e.get("classes", 16)?,
            dim: e.get("dim", 8)?,
            std: e.get("std", DEFAULT_STD)?,
            seed: e.get("env_seed", 0)?,
        },
        "idx" => EnvSpec::Idx {
            images: e.path("idx_images")?,
            labels: e.path("idx_labels")?,
            center: e.get("idx_center", false)?,
        },
        other => {
            return Err(ConfigError::Value {
                key: "env".into(),
                msg: format!("unknown environment `{other}`"),
            })
        }
    };
    let ns: Vec<usize> = e.list("n", vec![2])?;
    let ms: Vec<usize> = e.list("m", vec![10])?;
    if ns.is_empty() || ms.is_empty() {
        return Err(ConfigError::Invalid("n and m lists must be non-empty".into()));
    }
    let default_sgld = SgldConfig::default();
    let task_batch = e.get("task_batch", default_sgld.task_batch)?;
    let sample_batch = e.get("sample_batch", default_sgld.sample_batch)?;
    let adapt_batch: usize = e.get("adapt_batch", 0)?;
    let template = ExperimentConfig {
        env,
        task_mode: e.get("task_mode", TaskMode::ClassPair)?,
        t1: e.get("t1", base.t1)?,
        t2: e.get("t2", base.t2)?,
        trainer: e.get("trainer", TrainerKind::JointSgld)?,
        sgld: SgldConfig {
            iterations: e.get("iterations", default_sgld.iterations)?,
            step_size: e.get("step_size", default_sgld.step_size)?,
            noise: e.get("noise", default_sgld.noise)?,
            task_batch,
            sample_batch,
            record_trajectory: e.get("record_trajectory", false)?,
            covariance_samples: e.get("covariance_samples", DEFAULT_COVARIANCE_SAMPLES)?,
        },
        inner_step: e.get("inner_step", base.inner_step.clone())?,
        m_tr: match e.get::<usize>("m_tr", 0)? {
            0 => None,
            v => Some(v),
        },
        hidden: e.get("hidden", base.hidden)?,
        layers: e.get("layers", base.layers)?,
        adapt: AdaptConfig {
            steps: e.get("adapt_steps", base.adapt.steps)?,
            step_size: e.get("adapt_step_size", base.adapt.step_size)?,
            noise: e.get("adapt_noise", base.adapt.noise)?,
            batch: (adapt_batch > 0).then_some(adapt_batch),
        },
        bounds: e.list("bounds", base.bounds.clone())?,
        estimator: e.get("estimator", MiEstimator::PlugIn)?,
        variant: match e.get::<String>("constant_variant", "proof".into())?.as_str() {
            "proof" => ConstantVariant::Proof,
            "statement" => ConstantVariant::Statement,
            other => {
                return Err(ConfigError::Value {
                    key: "constant_variant".into(),
                    msg: format!("expected `proof` or `statement`, found `{other}`"),
                })
            }
        },
        seed: e.get("seed", 0)?,
        out_dir: e.get("out", base.out_dir.clone())?,
        ..base
    };
    let mut out = Vec::with_capacity(ns.len() * ms.len());
    for &n in &ns {
        for &m in &ms {
            let mut cfg = template.clone();
            cfg.n = n;
            cfg.m = m;
            cfg.sgld.task_batch = task_batch.min(n).max(1);
            cfg.sgld.sample_batch = sample_batch.min(m).max(1);
            cfg.validate()?;
            out.push(cfg);
        }
    }
    Ok(out)
}

pub fn load_config(path: &Path) -> Result<Vec<ExperimentConfig>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}
