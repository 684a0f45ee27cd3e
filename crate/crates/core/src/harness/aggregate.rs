//! Pools loss tables across runs into per-cell joints and evaluates bounds.
//!
//! Unconditional estimates pool every run; conditional estimates group runs
//! by supersample (`t1_index`) and average the per-group values.

use std::f64::consts::LN_2;

use crate::bounds::{
    fast_rate_constants, gamma_variance, interpolating_risk, kl_inversion_bound, maml_trajectory_bound, min_term,
    sgld_trajectory_bound, sqrt_mi_bound, variance_c1_min, BoundEntry, BoundError, BoundReport, BoundRole,
    ConstantVariant, GradientTrajectory, MiCellEstimates, MiKind,
};
use crate::infotheory::{conditional_plugin_mi, estimate_mi, DiscreteJoint, GroupedJoint, MiEstimator};
use crate::supersample::LossTable;

use super::config::BoundName;
use super::HarnessError;

/// Grid resolution for the free constants `C2` and `gamma`.
const C2_GRID: usize = 400;
const GAMMA_GRID: usize = 99;

/// Hashable symbol for a loss value; `-0.0` and `0.0` coincide.
pub fn loss_symbol(x: f64) -> u64 {
    if x == 0.0 {
        0
    } else {
        x.to_bits()
    }
}

fn check_shapes(tables: &[&LossTable]) -> Result<(usize, usize), HarnessError> {
    let first = tables.first().ok_or(HarnessError::NoTables)?;
    let (n, m) = (first.n, first.m);
    if let Some(t) = tables.iter().find(|t| t.n != n || t.m != m) {
        return Err(HarnessError::Bound(BoundError::ShapeMismatch(n, m, t.n, t.m)));
    }
    Ok((n, m))
}

fn per_cell<X, Y, F>(
    tables: &[&LossTable],
    conditional: bool,
    estimator: MiEstimator,
    extract: F,
) -> Result<Vec<f64>, HarnessError>
where
    X: Ord + Clone,
    Y: Ord + Clone,
    F: Fn(&LossTable, usize, usize) -> (X, Y),
{
    let (n, m) = check_shapes(tables)?;
    let mut values = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            let value = if conditional {
                let grouped = GroupedJoint::from_observations(tables.iter().map(|t| {
                    let (x, y) = extract(t, i, j);
                    (t.t1_index, x, y)
                }));
                conditional_plugin_mi(&grouped, estimator)?.0
            } else {
                let joint = DiscreteJoint::from_pairs(tables.iter().map(|t| extract(t, i, j)));
                estimate_mi(&joint, estimator)?
            };
            // Bias-corrected estimators may dip below zero.
            values.push(value.max(0.0));
        }
    }
    Ok(values)
}

/// Per-cell information estimates of one kind from a set of runs.
pub fn cell_estimates(
    tables: &[&LossTable],
    kind: MiKind,
    estimator: MiEstimator,
) -> Result<MiCellEstimates, HarnessError> {
    let (n, m) = check_shapes(tables)?;
    let values = match kind {
        MiKind::DeltaMi | MiKind::DeltaCmi => per_cell(tables, kind == MiKind::DeltaCmi, estimator, |t, i, j| {
            (loss_symbol(t.pair(i, j).delta), t.masks.s[j])
        })?,
        MiKind::PairMi => per_cell(tables, false, estimator, |t, i, j| {
            let p = t.pair(i, j);
            ((loss_symbol(p.plus), loss_symbol(p.minus)), t.masks.s[j])
        })?,
        MiKind::SingleMi => per_cell(tables, false, estimator, |t, i, j| {
            (loss_symbol(t.pair(i, j).plus), t.masks.s[j])
        })?,
        MiKind::QuadMi | MiKind::QuadCmi => per_cell(tables, kind == MiKind::QuadCmi, estimator, |t, i, j| {
            (
                t.quad(i, j).values().map(loss_symbol),
                (t.masks.s_tilde[i], t.masks.s[j]),
            )
        })?,
    };
    Ok(MiCellEstimates::new(n, m, values, kind)?)
}

/// Mean over runs of the per-run gap, with its standard error over runs.
pub fn empirical_gap(tables: &[&LossTable]) -> Result<(f64, f64), HarnessError> {
    if tables.is_empty() {
        return Err(HarnessError::NoTables);
    }
    let gaps: Vec<f64> = tables.iter().map(|t| t.gap()).collect();
    Ok(mean_and_se(&gaps))
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let k = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / k;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

/// Settings that shape bound evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub bounds: Vec<BoundName>,
    pub estimator: MiEstimator,
    pub variant: ConstantVariant,
}

/// Lazily computed cell tables shared between bounds.
struct CellCache<'a> {
    tables: &'a [&'a LossTable],
    estimator: MiEstimator,
    cached: Vec<(MiKind, MiCellEstimates)>,
}

impl<'a> CellCache<'a> {
    fn get(&mut self, kind: MiKind) -> Result<MiCellEstimates, HarnessError> {
        if let Some((_, c)) = self.cached.iter().find(|(k, _)| *k == kind) {
            return Ok(c.clone());
        }
        let cells = cell_estimates(self.tables, kind, self.estimator)?;
        self.cached.push((kind, cells.clone()));
        Ok(cells)
    }
}

/// Best `(value, c1, c2)` of `weight(c2) * load + info / c2` over a `C2` grid,
/// with `weight(c2)` the smallest admissible `C1`. A zero load takes the
/// `C2 -> limit` value `info / limit`.
fn optimise_c2<F>(load: f64, info: f64, limit: f64, weight: F) -> Result<(f64, f64, f64), BoundError>
where
    F: Fn(f64) -> Result<f64, BoundError>,
{
    if load == 0.0 {
        return Ok((info / limit, 0.0, limit));
    }
    let mut best = (f64::INFINITY, f64::NAN, f64::NAN);
    for k in 1..=C2_GRID {
        let c2 = limit * k as f64 / (C2_GRID + 1) as f64;
        let c1 = weight(c2)?;
        let v = c1 * load + info / c2;
        if v < best.0 {
            best = (v, c1, c2);
        }
    }
    Ok(best)
}

fn entry(name: BoundName, value: f64, role: BoundRole, estimator: &str, components: Vec<(&str, f64)>) -> BoundEntry {
    BoundEntry {
        name: name.name().to_string(),
        value,
        role,
        estimator: estimator.to_string(),
        components: components.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
    }
}

/// Evaluates the selected bounds over successful runs.
///
/// `trajectories` holds one entry per table (same order) when available.
pub fn evaluate_bounds(
    tables: &[&LossTable],
    trajectories: &[Option<&GradientTrajectory>],
    settings: &EvalSettings,
    failures: usize,
    maml_m_te: usize,
) -> Result<BoundReport, HarnessError> {
    let (n, m) = check_shapes(tables)?;
    let runs = tables.len() as f64;
    let r_hat = tables.iter().map(|t| t.empirical_risk()).sum::<f64>() / runs;
    let test_risk = tables.iter().map(|t| t.test_risk()).sum::<f64>() / runs;
    let (gap, gap_se) = empirical_gap(tables)?;
    let mut cache = CellCache {
        tables,
        estimator: settings.estimator,
        cached: Vec::new(),
    };
    let half = 0.5 * LN_2;

    let mut selected = settings.bounds.clone();
    selected.sort();
    selected.dedup();
    let mut entries = Vec::new();
    for name in selected {
        match name {
            BoundName::SqrtDeltaMi | BoundName::SqrtDeltaCmi | BoundName::SqrtQuadMi | BoundName::SqrtQuadCmi => {
                let kind = match name {
                    BoundName::SqrtDeltaMi => MiKind::DeltaMi,
                    BoundName::SqrtDeltaCmi => MiKind::DeltaCmi,
                    BoundName::SqrtQuadMi => MiKind::QuadMi,
                    _ => MiKind::QuadCmi,
                };
                let cells = cache.get(kind)?;
                let v = sqrt_mi_bound(&cells, 2.0)?;
                entries.push(entry(name, v, BoundRole::GapBound, kind.name(), vec![("mean_mi", cells.mean())]));
            }
            BoundName::KlQuadMi | BoundName::KlQuadCmi => {
                let kind = if name == BoundName::KlQuadMi {
                    MiKind::QuadMi
                } else {
                    MiKind::QuadCmi
                };
                let cells = cache.get(kind)?;
                let (risk, gap_upper) = kl_inversion_bound(r_hat, &cells)?;
                entries.push(entry(
                    name,
                    gap_upper.max(0.0),
                    BoundRole::GapBound,
                    kind.name(),
                    vec![("mean_mi", cells.mean()), ("risk_upper", risk), ("r_hat", r_hat)],
                ));
            }
            BoundName::FastRate => {
                let info = min_term(&cache.get(MiKind::PairMi)?, &cache.get(MiKind::SingleMi)?)?;
                let (v, c1, c2) = optimise_c2(r_hat, info, half, |c2| fast_rate_constants(c2, settings.variant))?;
                entries.push(entry(
                    name,
                    v.max(0.0),
                    BoundRole::GapBound,
                    "pair_mi+single_mi",
                    vec![("min_term", info), ("r_hat", r_hat), ("c1", c1), ("c2", c2)],
                ));
            }
            BoundName::FastRateQuadCmi => {
                let info = cache.get(MiKind::QuadCmi)?.mean();
                let (v, c1, c2) = optimise_c2(r_hat, info, LN_2, |c2| {
                    fast_rate_constants(c2, ConstantVariant::Hypothesis)
                })?;
                entries.push(entry(
                    name,
                    v.max(0.0),
                    BoundRole::GapBound,
                    MiKind::QuadCmi.name(),
                    vec![("mean_mi", info), ("r_hat", r_hat), ("c1", c1), ("c2", c2)],
                ));
            }
            BoundName::VarianceFastRate => {
                let info = min_term(&cache.get(MiKind::PairMi)?, &cache.get(MiKind::SingleMi)?)?;
                let mut best: Option<(f64, f64, f64, f64, f64)> = None;
                for k in 1..=GAMMA_GRID {
                    let gamma = k as f64 / (GAMMA_GRID + 1) as f64;
                    let var = gamma_variance(tables.iter().copied(), gamma)?.value;
                    let (v, c1, c2) = optimise_c2(var, info, half, |c2| variance_c1_min(c2, gamma, settings.variant))?;
                    if best.is_none_or(|b| v < b.0) {
                        best = Some((v, gamma, var, c1, c2));
                    }
                }
                let (v, gamma, var, c1, c2) = best.expect("non-empty gamma grid");
                entries.push(entry(
                    name,
                    v.max(0.0),
                    BoundRole::GapBound,
                    "pair_mi+single_mi",
                    vec![("min_term", info), ("gamma", gamma), ("variance", var), ("c1", c1), ("c2", c2)],
                ));
            }
            BoundName::InterpolatingRisk => {
                // Exact only in the interpolating regime.
                if r_hat == 0.0 {
                    let cells = cache.get(MiKind::DeltaMi)?;
                    let v = interpolating_risk(&cells)?;
                    entries.push(entry(
                        name,
                        v,
                        BoundRole::RiskEstimate,
                        MiKind::DeltaMi.name(),
                        vec![("mean_mi", cells.mean())],
                    ));
                }
            }
            BoundName::SgldTrajectory | BoundName::MamlTrajectory => {
                if trajectories.len() != tables.len() || trajectories.iter().any(|t| t.is_none_or(|t| !t.has_samples())) {
                    continue;
                }
                let mut total = 0.0;
                for traj in trajectories.iter().flatten() {
                    total += if name == BoundName::SgldTrajectory {
                        sgld_trajectory_bound(traj, n, m)?
                    } else {
                        maml_trajectory_bound(traj, n, maml_m_te)?
                    };
                }
                entries.push(entry(
                    name,
                    total / runs,
                    BoundRole::GapBound,
                    "gradient-covariance",
                    vec![("runs", runs)],
                ));
            }
        }
    }
    Ok(BoundReport {
        entries,
        empirical_risk: r_hat,
        test_risk,
        gap,
        gap_std_err: gap_se,
        runs: tables.len(),
        failures,
        metadata: Vec::new(),
    })
}
