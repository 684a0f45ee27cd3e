//! Noisy iterative meta-learners: joint SGLD over meta and task parameters,
//! and noisy first-order MAML with an in-task train/test split.

use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bounds::{sample_covariance, GradientTrajectory, StepSamples, TrajectoryMode, TrajectoryStep};
use crate::model::{ModelError, MlpParams};
use crate::tasks::LabeledExample;

/// Stacked parameter dimension above which gradient resamples are not kept.
pub const MAX_TRAJECTORY_DIM: usize = 512;

/// Default number of gradient resamples per step.
pub const DEFAULT_COVARIANCE_SAMPLES: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parameters diverged at step {step}")]
    Divergence { step: usize },

    #[error("meta-training set has {got} tasks, expected at least {needed}")]
    TooFewTasks { needed: usize, got: usize },

    #[error("task {task} has {got} samples, expected {needed}")]
    TooFewSamples { task: usize, needed: usize, got: usize },

    #[error("covariance needs at least 2 resamples, got {0}")]
    TooFewResamples(usize),

    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Step-size or noise schedule indexed by 1-based step `t`.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    Constant(f64),
    /// `initial / (1 + decay * (t - 1))`.
    InverseDecay { initial: f64, decay: f64 },
}

impl Schedule {
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            Schedule::Constant(v) => v,
            Schedule::InverseDecay { initial, decay } => initial / (1.0 + decay * (t.max(1) - 1) as f64),
        }
    }

    fn is_nonnegative(&self) -> bool {
        match *self {
            Schedule::Constant(v) => v >= 0.0,
            Schedule::InverseDecay { initial, decay } => initial >= 0.0 && decay >= 0.0,
        }
    }
}

impl FromStr for Schedule {
    type Err = String;

    /// `0.1` or `0.1/0.01` (initial value and inverse decay rate).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("bad schedule `{s}`: {e}"));
        match s.split_once('/') {
            None => Ok(Schedule::Constant(parse(s)?)),
            Some((a, b)) => Ok(Schedule::InverseDecay {
                initial: parse(a)?,
                decay: parse(b)?,
            }),
        }
    }
}

/// Outer-loop settings shared by both trainers.
#[derive(Debug, Clone, PartialEq)]
pub struct SgldConfig {
    pub iterations: usize,
    pub step_size: Schedule,
    pub noise: Schedule,
    pub task_batch: usize,
    pub sample_batch: usize,
    /// Keep per-step gradient resamples when the stacked dimension allows.
    pub record_trajectory: bool,
    pub covariance_samples: usize,
}

impl Default for SgldConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            step_size: Schedule::Constant(0.1),
            noise: Schedule::Constant(1e-3),
            task_batch: 2,
            sample_batch: 10,
            record_trajectory: false,
            covariance_samples: DEFAULT_COVARIANCE_SAMPLES,
        }
    }
}

impl SgldConfig {
    fn validate(&self, n: usize, m: usize) -> Result<(), TrainError> {
        if self.task_batch == 0 || self.task_batch > n {
            return Err(TrainError::Config(format!(
                "task batch {} must lie in 1..={n}",
                self.task_batch
            )));
        }
        if self.sample_batch == 0 || self.sample_batch > m {
            return Err(TrainError::Config(format!(
                "sample batch {} must lie in 1..={m}",
                self.sample_batch
            )));
        }
        if !self.step_size.is_nonnegative() || !self.noise.is_nonnegative() {
            return Err(TrainError::Config("schedules must be non-negative".into()));
        }
        if self.record_trajectory && self.covariance_samples < 2 {
            return Err(TrainError::TooFewResamples(self.covariance_samples));
        }
        Ok(())
    }
}

/// Noisy first-order MAML: inner step `beta`, per-task split `m_tr + m_te = m`.
#[derive(Debug, Clone, PartialEq)]
pub struct MamlConfig {
    pub outer: SgldConfig,
    pub inner_step: Schedule,
    pub m_tr: usize,
}

/// Task-specific adaptation used to fill loss tables.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub steps: usize,
    pub step_size: f64,
    pub noise: f64,
    /// `None` uses every training sample each step.
    pub batch: Option<usize>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            step_size: 0.1,
            noise: 1e-3,
            batch: None,
        }
    }
}

/// Result of joint SGLD: meta-parameters, task parameters and trajectory.
#[derive(Debug, Clone)]
pub struct JointOutput {
    pub meta: MlpParams,
    pub tasks: Vec<MlpParams>,
    pub trajectory: GradientTrajectory,
}

/// Result of noisy MAML.
#[derive(Debug, Clone)]
pub struct MamlOutput {
    pub meta: MlpParams,
    pub trajectory: GradientTrajectory,
}

fn check_data(data: &[Vec<LabeledExample>], m: usize) -> Result<(), TrainError> {
    if data.is_empty() {
        return Err(TrainError::TooFewTasks { needed: 1, got: 0 });
    }
    for (task, d) in data.iter().enumerate() {
        if d.len() < m {
            return Err(TrainError::TooFewSamples {
                task,
                needed: m,
                got: d.len(),
            });
        }
    }
    Ok(())
}

/// Sorted uniform subset of `0..len` of the given size.
fn subset<R: Rng + ?Sized>(rng: &mut R, len: usize, amount: usize) -> Vec<usize> {
    let mut v = sample_indices(rng, len, amount).into_vec();
    v.sort_unstable();
    v
}

fn batch_grad(params: &MlpParams, data: &[LabeledExample], idx: &[usize]) -> Result<MlpParams, ModelError> {
    Ok(params.loss_and_grad(idx.iter().map(|&k| &data[k]))?.1)
}

/// Unbiased covariance of `samples` draws from a gradient sampler.
pub fn estimate_step_covariance<F>(samples: usize, mut draw: F) -> Result<DMatrix<f64>, TrainError>
where
    F: FnMut() -> Result<Vec<f64>, TrainError>,
{
    if samples < 2 {
        return Err(TrainError::TooFewResamples(samples));
    }
    let draws = (0..samples).map(|_| draw()).collect::<Result<Vec<_>, _>>()?;
    Ok(sample_covariance(&draws))
}

/// Joint SGLD on `n` meta-training tasks with `m` samples each.
///
/// `W_i` starts at `U`; tasks outside the step's batch keep their parameters.
/// Gradient resamples use a stream split off `rng` once, so recording them
/// does not change the trained parameters.
pub fn joint_sgld_train<R: Rng + ?Sized>(
    init: &MlpParams,
    data: &[Vec<LabeledExample>],
    cfg: &SgldConfig,
    rng: &mut R,
) -> Result<JointOutput, TrainError> {
    let n = data.len();
    let m = data.first().map_or(0, Vec::len);
    check_data(data, m)?;
    cfg.validate(n, m)?;
    let d = init.num_params();
    let mut cov_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut meta = init.clone();
    let mut tasks = vec![init.clone(); n];
    let mut trajectory = GradientTrajectory::new(TrajectoryMode::Joint, d);

    for t in 1..=cfg.iterations {
        let eta = cfg.step_size.at(t);
        let sigma = cfg.noise.at(t);
        let batch = subset(rng, n, cfg.task_batch);
        let mut grads = Vec::with_capacity(batch.len());
        for &i in &batch {
            let idx = subset(rng, m, cfg.sample_batch);
            grads.push(batch_grad(&tasks[i], &data[i], &idx)?);
        }

        let keep = cfg.record_trajectory && (batch.len() + 1) * d <= MAX_TRAJECTORY_DIM;
        let samples = if keep {
            let mut stacked = Vec::with_capacity(cfg.covariance_samples);
            for _ in 0..cfg.covariance_samples {
                let mut per_task = Vec::with_capacity(batch.len());
                for &i in &batch {
                    let idx = subset(&mut cov_rng, m, cfg.sample_batch);
                    per_task.push(batch_grad(&tasks[i], &data[i], &idx)?.to_flat());
                }
                // Update directions are negative gradients.
                let mut row: Vec<f64> = (0..d)
                    .map(|k| -per_task.iter().map(|g| g[k]).sum::<f64>() / batch.len() as f64)
                    .collect();
                row.extend(per_task.iter().flatten().map(|g| -g));
                stacked.push(row);
            }
            Some(StepSamples::Joint { stacked })
        } else {
            None
        };

        let mut meta_grad = meta.zeros_like();
        for g in &grads {
            meta_grad.add_scaled(g, 1.0 / batch.len() as f64);
        }
        meta.add_scaled(&meta_grad, -eta);
        meta.add_noise(sigma, rng);
        for (&i, g) in batch.iter().zip(&grads) {
            tasks[i].add_scaled(g, -eta);
            tasks[i].add_noise(sigma, rng);
        }
        if !meta.is_finite() || batch.iter().any(|&i| !tasks[i].is_finite()) {
            return Err(TrainError::Divergence { step: t });
        }
        trajectory.steps.push(TrajectoryStep {
            eta,
            sigma,
            beta: None,
            tasks: batch,
            samples,
        });
    }
    Ok(JointOutput {
        meta,
        tasks,
        trajectory,
    })
}

/// Noisy first-order MAML. Each task's first `m_tr` samples feed the inner
/// step, the remaining `m - m_tr` the outer step.
pub fn maml_noisy_train<R: Rng + ?Sized>(
    init: &MlpParams,
    data: &[Vec<LabeledExample>],
    cfg: &MamlConfig,
    rng: &mut R,
) -> Result<MamlOutput, TrainError> {
    let n = data.len();
    let m = data.first().map_or(0, Vec::len);
    check_data(data, m)?;
    if cfg.m_tr == 0 || cfg.m_tr >= m {
        return Err(TrainError::Config(format!("m_tr = {} must lie in 1..{m}", cfg.m_tr)));
    }
    let m_te = m - cfg.m_tr;
    cfg.outer.validate(n, m)?;
    if !cfg.inner_step.is_nonnegative() {
        return Err(TrainError::Config("inner step must be non-negative".into()));
    }
    let b_tr = cfg.outer.sample_batch.min(cfg.m_tr);
    let b_te = cfg.outer.sample_batch.min(m_te);
    let d = init.num_params();
    let mut cov_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut meta = init.clone();
    let mut trajectory = GradientTrajectory::new(TrajectoryMode::Maml, d);

    let train_grad = |p: &MlpParams, i: usize, idx: &[usize]| batch_grad(p, &data[i][..cfg.m_tr], idx);
    let test_grad = |p: &MlpParams, i: usize, idx: &[usize]| batch_grad(p, &data[i][cfg.m_tr..], idx);

    for t in 1..=cfg.outer.iterations {
        let eta = cfg.outer.step_size.at(t);
        let beta = cfg.inner_step.at(t);
        let sigma = cfg.outer.noise.at(t);
        let batch = subset(rng, n, cfg.outer.task_batch);

        let mut adapted = Vec::with_capacity(batch.len());
        for &i in &batch {
            let idx = subset(rng, cfg.m_tr, b_tr);
            let mut w = meta.clone();
            w.add_scaled(&train_grad(&meta, i, &idx)?, -beta);
            w.add_noise(sigma, rng);
            adapted.push(w);
        }
        let mut outer = meta.zeros_like();
        for (&i, w) in batch.iter().zip(&adapted) {
            let idx = subset(rng, m_te, b_te);
            outer.add_scaled(&test_grad(w, i, &idx)?, 1.0 / batch.len() as f64);
        }

        let keep = cfg.outer.record_trajectory && batch.len() * d <= MAX_TRAJECTORY_DIM;
        let samples = if keep {
            let b = cfg.outer.covariance_samples;
            let mut inner_rows = Vec::with_capacity(b);
            let mut outer_rows = Vec::with_capacity(b);
            for _ in 0..b {
                let mut row = Vec::with_capacity(batch.len() * d);
                for &i in &batch {
                    let idx = subset(&mut cov_rng, cfg.m_tr, b_tr);
                    row.extend(train_grad(&meta, i, &idx)?.values().map(|g| -g));
                }
                inner_rows.push(row);
                let mut mean = vec![0.0; d];
                for (&i, w) in batch.iter().zip(&adapted) {
                    let idx = subset(&mut cov_rng, m_te, b_te);
                    for (acc, g) in mean.iter_mut().zip(test_grad(w, i, &idx)?.values()) {
                        *acc -= g / batch.len() as f64;
                    }
                }
                outer_rows.push(mean);
            }
            Some(StepSamples::Maml {
                inner: inner_rows,
                outer: outer_rows,
            })
        } else {
            None
        };

        meta.add_scaled(&outer, -eta);
        meta.add_noise(sigma, rng);
        if !meta.is_finite() {
            return Err(TrainError::Divergence { step: t });
        }
        trajectory.steps.push(TrajectoryStep {
            eta,
            sigma,
            beta: Some(beta),
            tasks: batch,
            samples,
        });
    }
    Ok(MamlOutput { meta, trajectory })
}

/// `k` noisy gradient steps from the meta-parameters on one task's samples.
pub fn adapt_task<R: Rng + ?Sized>(
    meta: &MlpParams,
    train: &[LabeledExample],
    cfg: &AdaptConfig,
    rng: &mut R,
) -> Result<MlpParams, TrainError> {
    if train.is_empty() {
        return Err(TrainError::Model(ModelError::EmptyBatch));
    }
    let batch = cfg.batch.unwrap_or(train.len()).clamp(1, train.len());
    let all: Vec<usize> = (0..train.len()).collect();
    let mut w = meta.clone();
    for step in 1..=cfg.steps {
        let g = if batch == train.len() {
            batch_grad(&w, train, &all)?
        } else {
            batch_grad(&w, train, &subset(rng, train.len(), batch))?
        };
        w.add_scaled(&g, -cfg.step_size);
        w.add_noise(cfg.noise, rng);
        if !w.is_finite() {
            return Err(TrainError::Divergence { step });
        }
    }
    Ok(w)
}
