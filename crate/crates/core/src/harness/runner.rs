//! The `t1 x t2` protocol: one supersample per `t1` index, one membership
//! draw and training run per `(t1, t2)` pair.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bounds::{BoundReport, GradientTrajectory};
use crate::metalearn::{adapt_task, joint_sgld_train, maml_noisy_train};
use crate::model::{zero_one_loss, MlpParams};
use crate::supersample::{build_supersample, draw_memberships, fill_loss_table, select_partitions, LossTable, SuperSample};
use crate::tasks::{class_tasks_from_dataset, load_idx, make_gaussian_env, TaskEnvironment};

use super::aggregate::{evaluate_bounds, EvalSettings};
use super::config::{EnvSpec, ExperimentConfig, TrainerKind};
use super::HarnessError;

const SUPERSAMPLE_TAG: u64 = 0x5355_5045_5253_4d50;
const ADAPT_TAG: u64 = 0x4144_4150_5400_0000;

/// SplitMix64 finaliser; a bijection on `u64`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of run `(a, b)` under `master`. For indices below `2^32` distinct
/// pairs map to distinct seeds.
pub fn mix64(master: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(master) ^ ((a << 32) | (b & 0xFFFF_FFFF)))
}

pub fn supersample_seed(master: u64, t1: usize) -> u64 {
    mix64(master ^ SUPERSAMPLE_TAG, t1 as u64, 0)
}

pub fn run_seed(master: u64, t1: usize, t2: usize) -> u64 {
    mix64(master, t1 as u64, t2 as u64)
}

/// Outcome of one `(t1, t2)` run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub t1_index: usize,
    pub t2_index: usize,
    pub table: Option<LossTable>,
    pub empirical_risk: f64,
    pub test_risk: f64,
    pub trajectory: Option<GradientTrajectory>,
    pub failure: Option<String>,
}

impl RunRecord {
    fn failed(t1_index: usize, t2_index: usize, reason: String) -> Self {
        Self {
            t1_index,
            t2_index,
            table: None,
            empirical_risk: f64::NAN,
            test_risk: f64::NAN,
            trajectory: None,
            failure: Some(reason),
        }
    }
}

/// Everything one experiment produced.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub records: Vec<RunRecord>,
    pub report: BoundReport,
}

impl ExperimentResult {
    pub fn tables(&self) -> Vec<&LossTable> {
        self.records.iter().filter_map(|r| r.table.as_ref()).collect()
    }
}

pub fn build_environment(cfg: &ExperimentConfig) -> Result<Box<dyn TaskEnvironment>, HarnessError> {
    match &cfg.env {
        EnvSpec::Gaussian { classes, dim, std, seed } => {
            Ok(Box::new(make_gaussian_env(*classes, *dim, *std, *seed)?.with_mode(cfg.task_mode)))
        }
        EnvSpec::Idx { images, labels, center } => {
            let images = load_idx(images)?;
            let labels = load_idx(labels)?;
            Ok(Box::new(class_tasks_from_dataset(&images, &labels, cfg.task_mode, *center)?))
        }
    }
}

fn execute_run(cfg: &ExperimentConfig, ss: &SuperSample, t1: usize, t2: usize) -> Result<RunRecord, HarnessError> {
    let seed = run_seed(cfg.seed, t1, t2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks = draw_memberships(cfg.n, cfg.m, &mut rng);
    let parts = select_partitions(ss, &masks)?;
    let train = ss.gather(&parts.meta_train);
    let input = train[0][0].features.len();
    let init = MlpParams::standard(input, cfg.hidden, cfg.layers, 2, &mut rng)?;
    let (meta, trajectory) = match cfg.trainer {
        TrainerKind::JointSgld => {
            let out = joint_sgld_train(&init, &train, &cfg.sgld, &mut rng)?;
            (out.meta, out.trajectory)
        }
        TrainerKind::NoisyMaml => {
            let out = maml_noisy_train(&init, &train, &cfg.maml(), &mut rng)?;
            (out.meta, out.trajectory)
        }
    };
    let adapt_master = seed ^ ADAPT_TAG;
    let table = fill_loss_table(
        &meta,
        |u: &MlpParams, data: &[crate::tasks::LabeledExample], i, a| {
            let mut r = ChaCha8Rng::seed_from_u64(mix64(adapt_master, i as u64, a as u64));
            adapt_task(u, data, &cfg.adapt, &mut r)
        },
        ss,
        &masks,
        |w, ex| zero_one_loss(w, ex).unwrap_or(f64::NAN),
        (t1 * cfg.t2 + t2, t1, t2),
    )?;
    let keep = trajectory.has_samples() && !trajectory.steps.is_empty();
    Ok(RunRecord {
        t1_index: t1,
        t2_index: t2,
        empirical_risk: table.empirical_risk(),
        test_risk: table.test_risk(),
        table: Some(table),
        trajectory: keep.then_some(trajectory),
        failure: None,
    })
}

/// Runs every `(t1, t2)` pair and evaluates the selected bounds.
///
/// Results are independent of `jobs`: every run owns a seed derived from its
/// indices and records are aggregated in index order.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentResult, HarnessError> {
    cfg.validate()?;
    let env = build_environment(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    let records = pool.install(|| -> Result<Vec<RunRecord>, HarnessError> {
        let supersamples = (0..cfg.t1)
            .into_par_iter()
            .map(|t1| {
                let mut rng = ChaCha8Rng::seed_from_u64(supersample_seed(cfg.seed, t1));
                build_supersample(env.as_ref(), cfg.n, cfg.m, &mut rng)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let pairs: Vec<(usize, usize)> = (0..cfg.t1).flat_map(|a| (0..cfg.t2).map(move |b| (a, b))).collect();
        Ok(pairs
            .into_par_iter()
            .map(|(t1, t2)| {
                execute_run(cfg, &supersamples[t1], t1, t2).unwrap_or_else(|e| {
                    log::warn!("run ({t1}, {t2}) failed: {e}");
                    RunRecord::failed(t1, t2, e.to_string())
                })
            })
            .collect())
    })?;
    let report = report_from_records(cfg, &records)?;
    Ok(ExperimentResult {
        config: cfg.clone(),
        records,
        report,
    })
}

/// Aggregates run records into a report with run metadata attached.
pub fn report_from_records(cfg: &ExperimentConfig, records: &[RunRecord]) -> Result<BoundReport, HarnessError> {
    // Index order makes every float reduction independent of record order.
    let mut ok: Vec<&RunRecord> = records.iter().filter(|r| r.table.is_some()).collect();
    ok.sort_by_key(|r| (r.t1_index, r.t2_index));
    let failures = records.len() - ok.len();
    if ok.is_empty() {
        return Err(HarnessError::AllRunsFailed {
            failures,
            first: records.iter().find_map(|r| r.failure.clone()).unwrap_or_default(),
        });
    }
    let tables: Vec<&LossTable> = ok.iter().filter_map(|r| r.table.as_ref()).collect();
    let trajectories: Vec<Option<&GradientTrajectory>> = ok.iter().map(|r| r.trajectory.as_ref()).collect();
    let settings = EvalSettings {
        bounds: cfg.bounds.clone(),
        estimator: cfg.estimator,
        variant: cfg.variant,
    };
    let m_te = cfg.m.saturating_sub(cfg.maml_split()).max(1);
    let mut report = evaluate_bounds(&tables, &trajectories, &settings, failures, m_te)?;
    report.metadata = metadata(cfg);
    Ok(report)
}

fn metadata(cfg: &ExperimentConfig) -> Vec<(String, String)> {
    let mut meta = vec![
        ("config_hash".to_string(), cfg.config_hash()),
        ("trainer".to_string(), cfg.trainer.name().to_string()),
        ("task_mode".to_string(), cfg.task_mode.name().to_string()),
        ("estimator".to_string(), cfg.estimator.name().to_string()),
        ("constant_variant".to_string(), format!("{:?}", cfg.variant).to_lowercase()),
        ("t1".to_string(), cfg.t1.to_string()),
        ("t2".to_string(), cfg.t2.to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
    ];
    if let EnvSpec::Idx { center, .. } = &cfg.env {
        meta.push(("centered".to_string(), center.to_string()));
    }
    meta
}
