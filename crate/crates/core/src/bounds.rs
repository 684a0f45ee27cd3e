//! Generalization-bound formulas evaluated from estimated information terms,
//! loss tables and recorded gradient trajectories.

use std::f64::consts::LN_2;
use std::fmt;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::infotheory::{invert_kl_risk, InfoError};
use crate::supersample::LossTable;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundError {
    #[error("negative MI value {value} at cell ({i}, {j})")]
    NegativeCell { i: usize, j: usize, value: f64 },

    #[error("cell tables disagree in shape: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),

    #[error("C2 = {c2} violates {constraint}")]
    C2OutOfRange { c2: f64, constraint: &'static str },

    #[error("C1 = {c1} below the admissible minimum {min} for C2 = {c2}")]
    C1TooSmall { c1: f64, min: f64, c2: f64 },

    #[error("gamma = {0} must lie in (0, 1)")]
    GammaOutOfRange(f64),

    #[error("no loss tables supplied")]
    NoRuns,

    #[error("matrix is not positive definite (pivot {pivot} = {value})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("matrix is not square: {0}x{1}")]
    NotSquare(usize, usize),

    #[error("trajectory step {step} carries no gradient samples")]
    MissingSamples { step: usize },

    #[error("trajectory step {step}: {what}")]
    BadStep { step: usize, what: String },

    #[error(transparent)]
    Info(#[from] InfoError),
}

/// Which information quantity a cell table holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiKind {
    /// `I(delta; S_j)`, unconditional.
    DeltaMi,
    /// `I(delta; S_j | supersample)`.
    DeltaCmi,
    /// `I((l+, l-); S_j)`.
    PairMi,
    /// `I(l+; S_j)`.
    SingleMi,
    /// `I(L^i_j; S~_i, S_j)`.
    QuadMi,
    /// `I(L^i_j; S~_i, S_j | supersample)`.
    QuadCmi,
}

impl MiKind {
    pub fn name(self) -> &'static str {
        match self {
            MiKind::DeltaMi => "delta_mi",
            MiKind::DeltaCmi => "delta_cmi",
            MiKind::PairMi => "pair_mi",
            MiKind::SingleMi => "single_mi",
            MiKind::QuadMi => "quad_mi",
            MiKind::QuadCmi => "quad_cmi",
        }
    }

    /// Entropy of the conditioning membership variables.
    pub fn cap(self) -> f64 {
        match self {
            MiKind::QuadMi | MiKind::QuadCmi => 2.0 * LN_2,
            _ => LN_2,
        }
    }
}

/// Per-cell information estimates in nats, row-major `n x m`.
#[derive(Debug, Clone, PartialEq)]
pub struct MiCellEstimates {
    pub n: usize,
    pub m: usize,
    pub values: Vec<f64>,
    pub kind: MiKind,
}

impl MiCellEstimates {
    pub fn new(n: usize, m: usize, values: Vec<f64>, kind: MiKind) -> Result<Self, BoundError> {
        assert_eq!(values.len(), n * m, "cell count must be n*m");
        let cells = Self { n, m, values, kind };
        cells.validate()?;
        Ok(cells)
    }

    pub fn filled(n: usize, m: usize, value: f64, kind: MiKind) -> Result<Self, BoundError> {
        Self::new(n, m, vec![value; n * m], kind)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.m + j]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    fn validate(&self) -> Result<(), BoundError> {
        for (k, &v) in self.values.iter().enumerate() {
            if !(v >= 0.0) {
                return Err(BoundError::NegativeCell {
                    i: k / self.m,
                    j: k % self.m,
                    value: v,
                });
            }
        }
        Ok(())
    }

    fn same_shape(&self, other: &Self) -> Result<(), BoundError> {
        if self.n != other.n || self.m != other.m {
            return Err(BoundError::ShapeMismatch(self.n, self.m, other.n, other.m));
        }
        Ok(())
    }
}

/// Constants shared by the bound family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundParams {
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
    pub gamma: f64,
    pub zeta: usize,
    pub xi: usize,
}

impl Default for BoundParams {
    fn default() -> Self {
        let c2 = 0.3;
        Self {
            sigma: 0.5,
            c1: fast_rate_constants(c2, ConstantVariant::Proof).expect("valid default"),
            c2,
            gamma: 0.5,
            zeta: 1,
            xi: 1,
        }
    }
}

/// `(1/nm) sum sqrt(scale * I_ij)`.
pub fn sqrt_mi_bound(cells: &MiCellEstimates, scale: f64) -> Result<f64, BoundError> {
    cells.validate()?;
    let total: f64 = cells.values.iter().map(|&v| (scale * v).sqrt()).sum();
    Ok(total / cells.values.len() as f64)
}

/// Sub-gaussian subset bound `sqrt(2 sigma^2 I / (zeta xi))` for one
/// caller-supplied MI aggregate. For losses in `[0, 1]` use `sigma = 1/2`.
pub fn subgaussian_subset_bound(mi: f64, sigma: f64, zeta: usize, xi: usize) -> Result<f64, BoundError> {
    if !(mi >= 0.0) {
        return Err(BoundError::NegativeCell { i: 0, j: 0, value: mi });
    }
    Ok((2.0 * sigma * sigma * mi / (zeta * xi) as f64).sqrt())
}

/// Solves `d(p_hat || (p_hat + R)/2) <= mean(cells)` for the largest `R`.
/// Returns `(risk_upper, gap_upper)`.
pub fn kl_inversion_bound(p_hat: f64, cells: &MiCellEstimates) -> Result<(f64, f64), BoundError> {
    cells.validate()?;
    let risk = invert_kl_risk(p_hat, cells.mean())?;
    Ok((risk, risk - p_hat))
}

/// Which admissibility condition ties `C1` to `C2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConstantVariant {
    /// Paired-loss fast-rate condition as it falls out of the derivation:
    /// `C1 >= -log(2 - e^{2 C2}) / (2 C2) - 1`, `0 < C2 < log 2 / 2`.
    #[default]
    Proof,
    /// Looser published form of the paired condition, with `e^{C2}`.
    Statement,
    /// Hypothesis-based fast-rate condition:
    /// `C1 >= -log(2 - e^{C2}) / C2 - 1`, `0 < C2 < log 2`.
    Hypothesis,
}

impl ConstantVariant {
    fn c2_limit(self) -> (f64, &'static str) {
        match self {
            ConstantVariant::Proof | ConstantVariant::Statement => (0.5 * LN_2, "0 < C2 < log(2)/2"),
            ConstantVariant::Hypothesis => (LN_2, "0 < C2 < log(2)"),
        }
    }
}

/// Smallest admissible `C1` for a given `C2`.
pub fn fast_rate_constants(c2: f64, variant: ConstantVariant) -> Result<f64, BoundError> {
    let (limit, constraint) = variant.c2_limit();
    if !(c2 > 0.0 && c2 < limit) {
        return Err(BoundError::C2OutOfRange { c2, constraint });
    }
    Ok(match variant {
        ConstantVariant::Proof => -(2.0 - (2.0 * c2).exp()).ln() / (2.0 * c2) - 1.0,
        ConstantVariant::Statement => -(2.0 - c2.exp()).ln() / (2.0 * c2) - 1.0,
        ConstantVariant::Hypothesis => -(2.0 - c2.exp()).ln() / c2 - 1.0,
    })
}

fn check_c1(c1: f64, min: f64, c2: f64) -> Result<(), BoundError> {
    // Allow round-off when callers pass the minimum itself.
    if c1 < min - 1e-12 * min.abs().max(1.0) {
        return Err(BoundError::C1TooSmall { c1, min, c2 });
    }
    Ok(())
}

/// `(1/nm) sum min{pair_ij, 2 single_ij}`.
pub fn min_term(pair: &MiCellEstimates, single: &MiCellEstimates) -> Result<f64, BoundError> {
    pair.validate()?;
    single.validate()?;
    pair.same_shape(single)?;
    let total: f64 = pair
        .values
        .iter()
        .zip(&single.values)
        .map(|(&p, &s)| p.min(2.0 * s))
        .sum();
    Ok(total / pair.values.len() as f64)
}

/// `C1 R_hat + (1/nm) sum min{pair, 2 single} / C2`, with `C1` checked
/// against the chosen admissibility condition.
pub fn fast_rate_bound(
    r_hat: f64,
    params: &BoundParams,
    pair: &MiCellEstimates,
    single: &MiCellEstimates,
    variant: ConstantVariant,
) -> Result<f64, BoundError> {
    let min = fast_rate_constants(params.c2, variant)?;
    check_c1(params.c1, min, params.c2)?;
    Ok(params.c1 * r_hat + min_term(pair, single)? / params.c2)
}

/// Interpolating form: population risk `<= (1/nm) sum 2 min{..} / log 2`.
pub fn fast_rate_interpolating(pair: &MiCellEstimates, single: &MiCellEstimates) -> Result<f64, BoundError> {
    Ok(2.0 * min_term(pair, single)? / LN_2)
}

/// Hypothesis-based fast-rate combinator: `C1 R_hat + mean(I) / C2`.
pub fn fast_rate_hypothesis_bound(r_hat: f64, c1: f64, c2: f64, cells: &MiCellEstimates) -> Result<f64, BoundError> {
    let min = fast_rate_constants(c2, ConstantVariant::Hypothesis)?;
    check_c1(c1, min, c2)?;
    cells.validate()?;
    Ok(c1 * r_hat + cells.mean() / c2)
}

/// Interpolating hypothesis-based form: `mean(I) / log 2`.
pub fn fast_rate_hypothesis_interpolating(cells: &MiCellEstimates) -> Result<f64, BoundError> {
    cells.validate()?;
    Ok(cells.mean() / LN_2)
}

/// Gamma-variance of the meta-training losses and its ingredients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaVariance {
    pub value: f64,
    /// Mean over runs of the per-run empirical risk.
    pub r_hat: f64,
    /// Mean over runs of the squared per-run empirical risk.
    pub mean_sq_risk: f64,
}

/// Mean over runs of `(1/nm) sum (l_train_ij - (1 + gamma) R_run)^2`.
pub fn gamma_variance<'a, I>(tables: I, gamma: f64) -> Result<GammaVariance, BoundError>
where
    I: IntoIterator<Item = &'a LossTable>,
{
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(BoundError::GammaOutOfRange(gamma));
    }
    let (mut v, mut r, mut r2, mut runs) = (0.0, 0.0, 0.0, 0usize);
    for t in tables {
        let risk = t.empirical_risk();
        let centre = (1.0 + gamma) * risk;
        let mut acc = 0.0;
        for i in 0..t.n {
            for j in 0..t.m {
                acc += (t.train_loss(i, j) - centre).powi(2);
            }
        }
        v += acc / (t.n * t.m) as f64;
        r += risk;
        r2 += risk * risk;
        runs += 1;
    }
    if runs == 0 {
        return Err(BoundError::NoRuns);
    }
    let k = runs as f64;
    Ok(GammaVariance {
        value: v / k,
        r_hat: r / k,
        mean_sq_risk: r2 / k,
    })
}

/// Smallest admissible `C1` for the variance bound.
pub fn variance_c1_min(c2: f64, gamma: f64, variant: ConstantVariant) -> Result<f64, BoundError> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(BoundError::GammaOutOfRange(gamma));
    }
    let base = fast_rate_constants(c2, variant)?;
    // -log(2 - e^{k C2}) / (2 C2 g^2) - 1/g^2 = (base + 1)/g^2 - 1/g^2
    Ok(base / (gamma * gamma))
}

/// `C1 V(gamma) + (1/nm) sum min{pair, 2 single} / C2`.
pub fn variance_fast_rate_bound(
    variance: f64,
    params: &BoundParams,
    pair: &MiCellEstimates,
    single: &MiCellEstimates,
    variant: ConstantVariant,
) -> Result<f64, BoundError> {
    let min = variance_c1_min(params.c2, params.gamma, variant)?;
    check_c1(params.c1, min, params.c2)?;
    Ok(params.c1 * variance + min_term(pair, single)? / params.c2)
}

/// Population risk in the interpolating regime: `(1/nm) sum I(delta; S) / log 2`.
pub fn interpolating_risk(delta_cells: &MiCellEstimates) -> Result<f64, BoundError> {
    delta_cells.validate()?;
    Ok(delta_cells.mean() / LN_2)
}

/// Log-determinant of a symmetric positive-definite matrix via Cholesky.
pub fn logdet_psd(matrix: &DMatrix<f64>) -> Result<f64, BoundError> {
    let (rows, cols) = matrix.shape();
    if rows != cols {
        return Err(BoundError::NotSquare(rows, cols));
    }
    let d = rows;
    let mut l = vec![0.0f64; d * d];
    let mut logdet = 0.0;
    for j in 0..d {
        let mut diag = matrix[(j, j)];
        for k in 0..j {
            diag -= l[j * d + k] * l[j * d + k];
        }
        if !(diag > 0.0) {
            return Err(BoundError::NotPositiveDefinite { pivot: j, value: diag });
        }
        let ljj = diag.sqrt();
        l[j * d + j] = ljj;
        logdet += 2.0 * ljj.ln();
        for i in (j + 1)..d {
            let mut s = matrix[(i, j)];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = s / ljj;
        }
    }
    Ok(logdet)
}

/// Unbiased sample covariance of equally sized vectors.
pub fn sample_covariance(samples: &[Vec<f64>]) -> DMatrix<f64> {
    let b = samples.len();
    let d = samples.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= b as f64);
    let centred = DMatrix::from_fn(d, b, |r, c| samples[c][r] - mean[r]);
    let denom = (b.saturating_sub(1)).max(1) as f64;
    let mut cov = &centred * centred.transpose() / denom;
    // Exact symmetry for downstream factorisation.
    for r in 0..d {
        for c in 0..r {
            let avg = 0.5 * (cov[(r, c)] + cov[(c, r)]);
            cov[(r, c)] = avg;
            cov[(c, r)] = avg;
        }
    }
    cov
}

/// `log det(ratio * cov + I)`.
fn shifted_logdet(samples: &[Vec<f64>], ratio: f64) -> Result<f64, BoundError> {
    let cov = sample_covariance(samples);
    let d = cov.nrows();
    let shifted = cov * ratio + DMatrix::identity(d, d);
    logdet_psd(&shifted)
}

/// Monte-Carlo gradient resamples recorded at one training step.
#[derive(Debug, Clone, PartialEq)]
pub enum StepSamples {
    /// Stacked `(G_U, G_W_i for i in I_t)`, dimension `(|I_t| + 1) d`.
    Joint { stacked: Vec<Vec<f64>> },
    /// Inner-loop stacked training gradients (`|I_t| d`) and the outer
    /// batch-mean test gradient (`d`).
    Maml {
        inner: Vec<Vec<f64>>,
        outer: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub eta: f64,
    pub sigma: f64,
    pub beta: Option<f64>,
    pub tasks: Vec<usize>,
    pub samples: Option<StepSamples>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryMode {
    Joint,
    Maml,
}

/// Step sizes, noise scales and gradient resamples of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTrajectory {
    pub mode: TrajectoryMode,
    /// Parameter dimension `d` of one model.
    pub param_dim: usize,
    pub steps: Vec<TrajectoryStep>,
}

impl GradientTrajectory {
    pub fn new(mode: TrajectoryMode, param_dim: usize) -> Self {
        Self {
            mode,
            param_dim,
            steps: Vec::new(),
        }
    }

    pub fn has_samples(&self) -> bool {
        self.steps.iter().all(|s| s.samples.is_some())
    }

    /// The same trajectory with every noise scale multiplied by `factor`.
    pub fn with_noise_scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.steps.iter_mut().for_each(|s| s.sigma *= factor);
        out
    }
}

fn check_block(step: usize, samples: &[Vec<f64>], dim: usize) -> Result<(), BoundError> {
    if samples.len() < 2 {
        return Err(BoundError::BadStep {
            step,
            what: format!("need at least 2 gradient samples, have {}", samples.len()),
        });
    }
    if let Some(bad) = samples.iter().find(|s| s.len() != dim) {
        return Err(BoundError::BadStep {
            step,
            what: format!("block dimension {} does not match expected {}", bad.len(), dim),
        });
    }
    if samples.iter().flatten().any(|v| !v.is_finite()) {
        return Err(BoundError::BadStep {
            step,
            what: "non-finite gradient sample".into(),
        });
    }
    Ok(())
}

fn noise_ratio(step: usize, rate: f64, sigma: f64) -> Result<f64, BoundError> {
    if !(sigma > 0.0) {
        return Err(BoundError::BadStep {
            step,
            what: format!("noise scale must be positive, got {sigma}"),
        });
    }
    Ok(rate * rate / (sigma * sigma))
}

/// `(1/sqrt(nm)) sqrt(sum_t 1/2 log det(eta_t^2/sigma_t^2 Cov_t + I))`.
pub fn sgld_trajectory_bound(traj: &GradientTrajectory, n: usize, m: usize) -> Result<f64, BoundError> {
    let mut total = 0.0;
    for (t, step) in traj.steps.iter().enumerate() {
        let Some(samples) = &step.samples else {
            return Err(BoundError::MissingSamples { step: t });
        };
        let StepSamples::Joint { stacked } = samples else {
            return Err(BoundError::BadStep {
                step: t,
                what: "expected joint-mode samples".into(),
            });
        };
        check_block(t, stacked, (step.tasks.len() + 1) * traj.param_dim)?;
        let ratio = noise_ratio(t, step.eta, step.sigma)?;
        total += 0.5 * shifted_logdet(stacked, ratio)?;
    }
    Ok((total.max(0.0) / (n * m) as f64).sqrt())
}

/// `(1/sqrt(n m_te)) sqrt(sum_t [log det(beta^2/sigma^2 Cov_tr + I) + log det(eta^2/sigma^2 Cov_te + I)])`.
pub fn maml_trajectory_bound(traj: &GradientTrajectory, n: usize, m_te: usize) -> Result<f64, BoundError> {
    let mut total = 0.0;
    for (t, step) in traj.steps.iter().enumerate() {
        let Some(samples) = &step.samples else {
            return Err(BoundError::MissingSamples { step: t });
        };
        let StepSamples::Maml { inner, outer } = samples else {
            return Err(BoundError::BadStep {
                step: t,
                what: "expected MAML-mode samples".into(),
            });
        };
        let beta = step.beta.ok_or_else(|| BoundError::BadStep {
            step: t,
            what: "missing inner step size".into(),
        })?;
        check_block(t, inner, step.tasks.len() * traj.param_dim)?;
        check_block(t, outer, traj.param_dim)?;
        total += shifted_logdet(inner, noise_ratio(t, beta, step.sigma)?)?;
        total += shifted_logdet(outer, noise_ratio(t, step.eta, step.sigma)?)?;
    }
    Ok((total.max(0.0) / (n * m_te) as f64).sqrt())
}

/// Whether a reported quantity upper-bounds the gap or estimates a risk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundRole {
    /// Upper bound on the meta-generalization gap.
    GapBound,
    /// Upper bound on the population risk (interpolating forms).
    RiskBound,
    /// Point estimate of the population risk (exact only when interpolating).
    RiskEstimate,
}

impl BoundRole {
    pub fn name(self) -> &'static str {
        match self {
            BoundRole::GapBound => "gap-bound",
            BoundRole::RiskBound => "risk-bound",
            BoundRole::RiskEstimate => "risk-estimate",
        }
    }
}

/// One evaluated bound with the ingredients that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundEntry {
    pub name: String,
    pub value: f64,
    pub role: BoundRole,
    /// Estimator kinds backing this value, e.g. `pair_mi+single_mi`.
    pub estimator: String,
    /// Named components (MI sums, constants, variance, ...).
    pub components: Vec<(String, f64)>,
}

/// Bounds of one experiment next to the measured gap.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub entries: Vec<BoundEntry>,
    pub empirical_risk: f64,
    pub test_risk: f64,
    pub gap: f64,
    pub gap_std_err: f64,
    pub runs: usize,
    pub failures: usize,
    /// Free-form metadata (`key`, `value`) recorded with the report.
    pub metadata: Vec<(String, String)>,
}

impl BoundReport {
    pub fn get(&self, name: &str) -> Option<&BoundEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

impl fmt::Display for BoundReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "runs={} failures={} R_hat={:.6} test={:.6} gap={:.6} (se {:.6})",
            self.runs, self.failures, self.empirical_risk, self.test_risk, self.gap, self.gap_std_err
        )?;
        for e in &self.entries {
            writeln!(f, "  {:<28} {:>12.6}  [{}; {}]", e.name, e.value, e.role.name(), e.estimator)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supersample::{LossQuad, MembershipVectors};
    use approx::assert_abs_diff_eq;

    fn cells(n: usize, m: usize, values: Vec<f64>, kind: MiKind) -> MiCellEstimates {
        MiCellEstimates::new(n, m, values, kind).unwrap()
    }

    #[test]
    fn sqrt_bound_examples() {
        let zero = MiCellEstimates::filled(2, 3, 0.0, MiKind::DeltaMi).unwrap();
        assert_eq!(sqrt_mi_bound(&zero, 2.0).unwrap(), 0.0);
        let one = cells(1, 1, vec![0.5], MiKind::DeltaMi);
        assert_abs_diff_eq!(sqrt_mi_bound(&one, 2.0).unwrap(), 1.0, epsilon = 1e-15);
        let two = cells(2, 1, vec![0.02, 0.08], MiKind::DeltaMi);
        assert_abs_diff_eq!(sqrt_mi_bound(&two, 2.0).unwrap(), 0.3, epsilon = 1e-15);
        assert!(matches!(
            MiCellEstimates::new(1, 2, vec![0.1, -0.1], MiKind::DeltaMi),
            Err(BoundError::NegativeCell { i: 0, j: 1, .. })
        ));
    }

    #[test]
    fn subgaussian_combinator() {
        // Bounded losses: sigma = 1/2 gives sqrt(I / (2 zeta xi)).
        assert_abs_diff_eq!(
            subgaussian_subset_bound(0.5, 0.5, 1, 1).unwrap(),
            0.5,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            subgaussian_subset_bound(0.8, 1.0, 2, 4).unwrap(),
            (2.0f64 * 0.8 / 8.0).sqrt(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn kl_inversion_examples() {
        let zero = MiCellEstimates::filled(2, 2, 0.0, MiKind::QuadMi).unwrap();
        let (r, g) = kl_inversion_bound(0.2, &zero).unwrap();
        assert_abs_diff_eq!(r, 0.2, epsilon = 1e-9);
        assert_abs_diff_eq!(g, 0.0, epsilon = 1e-9);
        let full = MiCellEstimates::filled(1, 1, LN_2, MiKind::QuadMi).unwrap();
        assert_eq!(kl_inversion_bound(0.0, &full).unwrap().0, 1.0);
        // d(0 || R/2) = -log(1 - R/2) >= R/2, so R <= 2c.
        for c in [0.01, 0.05, 0.2, 0.3] {
            let cs = MiCellEstimates::filled(1, 1, c, MiKind::QuadMi).unwrap();
            let (r, _) = kl_inversion_bound(0.0, &cs).unwrap();
            assert!(r <= 2.0 * c + 1e-12);
        }
    }

    #[test]
    fn kl_gap_is_nondecreasing_in_budget() {
        for p in [0.0, 0.05, 0.3] {
            let mut prev = 0.0;
            for k in 0..200 {
                let c = k as f64 * 0.005;
                let cs = MiCellEstimates::filled(1, 1, c, MiKind::QuadMi).unwrap();
                let (_, g) = kl_inversion_bound(p, &cs).unwrap();
                assert!(g >= prev - 1e-10);
                prev = g;
            }
        }
    }

    #[test]
    fn fast_rate_constant_values() {
        let direct_proof = -(2.0 - 0.6f64.exp()).ln() / 0.6 - 1.0;
        let proof = fast_rate_constants(0.3, ConstantVariant::Proof).unwrap();
        assert_abs_diff_eq!(proof, direct_proof, epsilon = 1e-15);
        assert_abs_diff_eq!(proof, 1.8777, epsilon = 1e-4);
        let statement = fast_rate_constants(0.3, ConstantVariant::Statement).unwrap();
        assert_abs_diff_eq!(statement, -0.2824, epsilon = 1e-4);
        let near = fast_rate_constants(0.5 * LN_2 - 1e-12, ConstantVariant::Proof).unwrap();
        assert!(near > 10.0);
        assert!(fast_rate_constants(0.5 * LN_2, ConstantVariant::Proof).is_err());
        assert!(fast_rate_constants(0.0, ConstantVariant::Proof).is_err());
        assert!(fast_rate_constants(0.5, ConstantVariant::Hypothesis).is_ok());
        assert!(fast_rate_constants(LN_2, ConstantVariant::Hypothesis).is_err());
    }

    #[test]
    fn fast_rate_examples() {
        let z = MiCellEstimates::filled(2, 2, 0.0, MiKind::PairMi).unwrap();
        let params = BoundParams::default();
        assert_eq!(
            fast_rate_bound(0.0, &params, &z, &z, ConstantVariant::Proof).unwrap(),
            0.0
        );
        let pair = MiCellEstimates::filled(2, 2, 0.1, MiKind::PairMi).unwrap();
        let single = MiCellEstimates::filled(2, 2, 0.3, MiKind::SingleMi).unwrap();
        let v = fast_rate_bound(0.0, &params, &pair, &single, ConstantVariant::Proof).unwrap();
        assert_abs_diff_eq!(v, 0.1 / 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(
            fast_rate_interpolating(&pair, &single).unwrap(),
            0.28854,
            epsilon = 1e-5
        );
        let too_small = BoundParams { c1: 1.0, ..params };
        assert!(matches!(
            fast_rate_bound(0.1, &too_small, &pair, &single, ConstantVariant::Proof),
            Err(BoundError::C1TooSmall { .. })
        ));
        // The statement constant admits C1 = 1 at C2 = 0.3.
        assert!(fast_rate_bound(0.1, &too_small, &pair, &single, ConstantVariant::Statement).is_ok());
    }

    #[test]
    fn min_term_takes_the_smaller_information() {
        let pair = cells(1, 2, vec![0.4, 0.1], MiKind::PairMi);
        let single = cells(1, 2, vec![0.1, 0.3], MiKind::SingleMi);
        assert_abs_diff_eq!(min_term(&pair, &single).unwrap(), (0.2 + 0.1) / 2.0, epsilon = 1e-15);
        let other = cells(2, 1, vec![0.1, 0.3], MiKind::SingleMi);
        assert!(matches!(min_term(&pair, &other), Err(BoundError::ShapeMismatch(..))));
    }

    #[test]
    fn hypothesis_combinator() {
        let c = MiCellEstimates::filled(1, 2, 0.2, MiKind::QuadCmi).unwrap();
        let c1 = fast_rate_constants(0.5, ConstantVariant::Hypothesis).unwrap();
        let v = fast_rate_hypothesis_bound(0.1, c1, 0.5, &c).unwrap();
        assert_abs_diff_eq!(v, c1 * 0.1 + 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(fast_rate_hypothesis_interpolating(&c).unwrap(), 0.2 / LN_2, epsilon = 1e-15);
    }

    fn table(train: &[f64], n: usize, m: usize) -> LossTable {
        // All-zero masks: the training loss lives in l00.
        LossTable {
            run_id: 0,
            t1_index: 0,
            t2_index: 0,
            n,
            m,
            quads: train.iter().map(|&l| LossQuad::new(l, 0.0, 0.0, 0.0)).collect(),
            masks: MembershipVectors::new(vec![0; n], vec![0; m]),
        }
    }

    #[test]
    fn gamma_variance_examples() {
        let zero = table(&[0.0; 4], 2, 2);
        assert_eq!(gamma_variance([&zero], 0.5).unwrap().value, 0.0);
        let one = table(&[1.0], 1, 1);
        assert_abs_diff_eq!(gamma_variance([&one], 0.3).unwrap().value, 0.09, epsilon = 1e-15);
        assert!(matches!(
            gamma_variance(std::iter::empty(), 0.5),
            Err(BoundError::NoRuns)
        ));
        assert!(gamma_variance([&one], 1.0).is_err());
    }

    #[test]
    fn gamma_variance_binary_identity() {
        let runs = [
            table(&[1.0, 0.0, 0.0, 1.0, 1.0, 0.0], 2, 3),
            table(&[0.0; 6], 2, 3),
            table(&[1.0, 1.0, 1.0, 0.0, 1.0, 1.0], 2, 3),
        ];
        for gamma in [0.1, 0.5, 0.9] {
            let gv = gamma_variance(&runs, gamma).unwrap();
            let identity = gv.r_hat - (1.0 - gamma * gamma) * gv.mean_sq_risk;
            assert_abs_diff_eq!(gv.value, identity, epsilon = 1e-12);
        }
    }

    #[test]
    fn variance_bound_examples() {
        let z = MiCellEstimates::filled(1, 1, 0.0, MiKind::PairMi).unwrap();
        let min = variance_c1_min(0.3, 0.5, ConstantVariant::Proof).unwrap();
        let params = BoundParams {
            c1: min,
            c2: 0.3,
            gamma: 0.5,
            ..BoundParams::default()
        };
        assert_eq!(
            variance_fast_rate_bound(0.0, &params, &z, &z, ConstantVariant::Proof).unwrap(),
            0.0
        );
        let pair = MiCellEstimates::filled(1, 1, 0.1, MiKind::PairMi).unwrap();
        let single = MiCellEstimates::filled(1, 1, 0.2, MiKind::SingleMi).unwrap();
        // Interpolating runs have zero variance: same MI term as the fast-rate bound.
        let fr = BoundParams {
            c1: fast_rate_constants(0.3, ConstantVariant::Proof).unwrap(),
            ..params
        };
        assert_abs_diff_eq!(
            variance_fast_rate_bound(0.0, &params, &pair, &single, ConstantVariant::Proof).unwrap(),
            fast_rate_bound(0.0, &fr, &pair, &single, ConstantVariant::Proof).unwrap(),
            epsilon = 1e-15
        );
        // V = 0.04, C1 = 2, min-term 0.1, C2 = 0.3; gamma close to 1 so C1 = 2 is admissible.
        let statement = BoundParams {
            c1: 2.0,
            c2: 0.3,
            gamma: 0.99,
            ..params
        };
        let v = variance_fast_rate_bound(0.04, &statement, &pair, &single, ConstantVariant::Proof).unwrap();
        assert_abs_diff_eq!(v, 0.08 + 0.1 / 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.41333, epsilon = 1e-5);
        let bad = BoundParams { c1: 1.0, ..params };
        assert!(variance_fast_rate_bound(0.04, &bad, &pair, &single, ConstantVariant::Proof).is_err());
    }

    #[test]
    fn interpolating_risk_examples() {
        let z = MiCellEstimates::filled(2, 2, 0.0, MiKind::DeltaMi).unwrap();
        assert_eq!(interpolating_risk(&z).unwrap(), 0.0);
        let quarter = MiCellEstimates::filled(1, 1, 0.25 * LN_2, MiKind::DeltaMi).unwrap();
        assert_abs_diff_eq!(interpolating_risk(&quarter).unwrap(), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn logdet_examples() {
        assert_eq!(logdet_psd(&DMatrix::identity(4, 4)).unwrap(), 0.0);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 3.0]));
        assert_abs_diff_eq!(logdet_psd(&d).unwrap(), 6.0f64.ln(), epsilon = 1e-15);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            logdet_psd(&singular),
            Err(BoundError::NotPositiveDefinite { pivot: 1, .. })
        ));
        assert!(matches!(
            logdet_psd(&DMatrix::zeros(2, 3)),
            Err(BoundError::NotSquare(2, 3))
        ));
    }

    /// Samples whose covariance is exactly `c * I` in `dim` dimensions.
    fn isotropic_samples(dim: usize, c: f64) -> Vec<Vec<f64>> {
        // +/- e_k pairs: mean zero, covariance 2 e_k e_k^T / (2d - 1) per pair.
        let b = 2 * dim;
        let scale = (c * (b as f64 - 1.0) / 2.0).sqrt();
        let mut out = Vec::new();
        for k in 0..dim {
            for s in [1.0, -1.0] {
                let mut v = vec![0.0; dim];
                v[k] = s * scale;
                out.push(v);
            }
        }
        out
    }

    fn joint_step(eta: f64, sigma: f64, tasks: usize, stacked: Vec<Vec<f64>>) -> TrajectoryStep {
        TrajectoryStep {
            eta,
            sigma,
            beta: None,
            tasks: (0..tasks).collect(),
            samples: Some(StepSamples::Joint { stacked }),
        }
    }

    #[test]
    fn sgld_bound_examples() {
        let mut traj = GradientTrajectory::new(TrajectoryMode::Joint, 1);
        traj.steps.push(joint_step(0.1, 0.1, 1, vec![vec![0.3, 0.3]; 5]));
        assert_eq!(sgld_trajectory_bound(&traj, 1, 1).unwrap(), 0.0);

        // eta^2 / sigma^2 * Cov = I in two dimensions.
        let mut traj = GradientTrajectory::new(TrajectoryMode::Joint, 1);
        traj.steps.push(joint_step(0.5, 0.25, 1, isotropic_samples(2, 0.25)));
        let v = sgld_trajectory_bound(&traj, 1, 1).unwrap();
        assert_abs_diff_eq!(v, (2.0 * 0.5 * LN_2).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.832555, epsilon = 1e-6);

        // A deterministic step leaves the value unchanged.
        traj.steps.push(joint_step(0.5, 0.25, 1, vec![vec![1.0, 2.0]; 3]));
        assert_abs_diff_eq!(sgld_trajectory_bound(&traj, 1, 1).unwrap(), v, epsilon = 1e-12);

        let mut prev = f64::INFINITY;
        for f in [1.0, 2.0, 4.0] {
            let b = sgld_trajectory_bound(&traj.with_noise_scaled(f), 1, 1).unwrap();
            assert!(b <= prev);
            prev = b;
        }
    }

    #[test]
    fn sgld_bound_errors() {
        let mut traj = GradientTrajectory::new(TrajectoryMode::Joint, 2);
        traj.steps.push(TrajectoryStep {
            eta: 0.1,
            sigma: 0.1,
            beta: None,
            tasks: vec![0],
            samples: None,
        });
        assert!(matches!(
            sgld_trajectory_bound(&traj, 1, 1),
            Err(BoundError::MissingSamples { step: 0 })
        ));
        traj.steps[0].samples = Some(StepSamples::Joint {
            stacked: vec![vec![0.0; 3]; 4],
        });
        assert!(matches!(
            sgld_trajectory_bound(&traj, 1, 1),
            Err(BoundError::BadStep { step: 0, .. })
        ));
    }

    #[test]
    fn maml_bound_examples() {
        let step = |inner: Vec<Vec<f64>>, outer: Vec<Vec<f64>>| TrajectoryStep {
            eta: 0.5,
            sigma: 0.25,
            beta: Some(0.5),
            tasks: vec![0, 1],
            samples: Some(StepSamples::Maml { inner, outer }),
        };
        let mut traj = GradientTrajectory::new(TrajectoryMode::Maml, 1);
        traj.steps.push(step(vec![vec![0.0, 0.0]; 3], vec![vec![0.0]; 3]));
        assert_eq!(maml_trajectory_bound(&traj, 1, 1).unwrap(), 0.0);

        let mut traj = GradientTrajectory::new(TrajectoryMode::Maml, 1);
        traj.steps.push(step(isotropic_samples(2, 0.25), isotropic_samples(1, 0.25)));
        let v = maml_trajectory_bound(&traj, 1, 1).unwrap();
        assert_abs_diff_eq!(v, (3.0 * LN_2).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(v, 1.442027, epsilon = 1e-6);
        let mut prev = v;
        for m_te in 2..6 {
            let b = maml_trajectory_bound(&traj, 1, m_te).unwrap();
            assert!(b < prev);
            assert_abs_diff_eq!(b, v / (m_te as f64).sqrt(), epsilon = 1e-12);
            prev = b;
        }

        let mut bad = traj.clone();
        bad.steps[0].samples = Some(StepSamples::Maml {
            inner: isotropic_samples(3, 0.25),
            outer: isotropic_samples(1, 0.25),
        });
        assert!(matches!(maml_trajectory_bound(&bad, 1, 1), Err(BoundError::BadStep { .. })));
    }

    #[test]
    fn sample_covariance_is_symmetric_psd() {
        let samples: Vec<Vec<f64>> = (0..10)
            .map(|k| vec![k as f64, (k * k) as f64 * 0.1, (k as f64).sin()])
            .collect();
        let cov = sample_covariance(&samples);
        assert_eq!(cov, cov.transpose());
        let eig = nalgebra::SymmetricEigen::new(cov);
        assert!(eig.eigenvalues.iter().all(|&e| e >= -1e-10));
    }
}
