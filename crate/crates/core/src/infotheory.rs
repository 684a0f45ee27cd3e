//! Discrete information measures over empirical counts.
//!
//! Everything here is in nats. Mutual information is estimated by the plug-in
//! (maximum-likelihood) rule from a table of co-occurrence counts; an optional
//! Miller–Madow correction is available but off by default.

use std::collections::BTreeMap;

use thiserror::Error;

/// Errors raised by the discrete estimators.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum InfoError {
    #[error("joint distribution has zero total count")]
    EmptyJoint,

    #[error("grouped joint has no groups")]
    NoGroups,

    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error("divergence budget {0} must be finite and non-negative")]
    InvalidBudget(f64),
}

/// Which estimator turns counts into an MI value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MiEstimator {
    #[default]
    PlugIn,
    MillerMadow,
}

impl MiEstimator {
    pub fn name(self) -> &'static str {
        match self {
            MiEstimator::PlugIn => "plugin",
            MiEstimator::MillerMadow => "miller-madow",
        }
    }
}

impl std::str::FromStr for MiEstimator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plugin" | "plug-in" => Ok(MiEstimator::PlugIn),
            "miller-madow" => Ok(MiEstimator::MillerMadow),
            other => Err(format!("unknown estimator `{other}`")),
        }
    }
}

/// Empirical joint law of a pair `(X, Y)` over finite supports.
///
/// Only symbols that were actually observed appear in the supports.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint<X, Y> {
    support_x: Vec<X>,
    support_y: Vec<Y>,
    /// Row-major `|X| x |Y|` count table.
    counts: Vec<u64>,
}

impl<X: Ord + Clone, Y: Ord + Clone> DiscreteJoint<X, Y> {
    /// Builds a joint from observed pairs.
    pub fn from_pairs<I>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (X, Y)>,
    {
        let mut tally: BTreeMap<(X, Y), u64> = BTreeMap::new();
        for pair in pairs {
            *tally.entry(pair).or_insert(0) += 1;
        }
        Self::from_tally(tally)
    }

    /// Builds a joint from `(x, y, count)` triples; zero counts are dropped.
    pub fn from_counts<I>(cells: I) -> Self
    where
        I: IntoIterator<Item = (X, Y, u64)>,
    {
        let mut tally: BTreeMap<(X, Y), u64> = BTreeMap::new();
        for (x, y, c) in cells {
            if c > 0 {
                *tally.entry((x, y)).or_insert(0) += c;
            }
        }
        Self::from_tally(tally)
    }

    fn from_tally(tally: BTreeMap<(X, Y), u64>) -> Self {
        let mut support_x: Vec<X> = tally.keys().map(|(x, _)| x.clone()).collect();
        support_x.dedup();
        let mut support_y: Vec<Y> = tally.keys().map(|(_, y)| y.clone()).collect();
        support_y.sort();
        support_y.dedup();
        let cols = support_y.len();
        let mut counts = vec![0u64; support_x.len() * cols];
        for ((x, y), c) in tally {
            let r = support_x.binary_search(&x).expect("x in support");
            let k = support_y.binary_search(&y).expect("y in support");
            counts[r * cols + k] = c;
        }
        Self {
            support_x,
            support_y,
            counts,
        }
    }

    pub fn support_x(&self) -> &[X] {
        &self.support_x
    }

    pub fn support_y(&self) -> &[Y] {
        &self.support_y
    }

    pub fn count(&self, x: &X, y: &Y) -> u64 {
        match (
            self.support_x.binary_search(x),
            self.support_y.binary_search(y),
        ) {
            (Ok(r), Ok(k)) => self.counts[r * self.support_y.len() + k],
            _ => 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_counts(&self) -> Vec<u64> {
        let cols = self.support_y.len();
        self.counts.chunks(cols.max(1)).map(|r| r.iter().sum()).collect()
    }

    pub fn col_counts(&self) -> Vec<u64> {
        let cols = self.support_y.len();
        let mut out = vec![0u64; cols];
        for row in self.counts.chunks(cols.max(1)) {
            for (o, c) in out.iter_mut().zip(row) {
                *o += c;
            }
        }
        out
    }

    /// Pushes `X` through a deterministic map, merging cells that collide.
    pub fn map_x<Z, F>(&self, f: F) -> DiscreteJoint<Z, Y>
    where
        Z: Ord + Clone,
        F: Fn(&X) -> Z,
    {
        let cols = self.support_y.len();
        DiscreteJoint::from_counts(self.support_x.iter().enumerate().flat_map(|(r, x)| {
            let z = f(x);
            self.support_y
                .iter()
                .enumerate()
                .map(move |(k, y)| (z.clone(), y.clone(), self.counts[r * cols + k]))
        }))
    }

    /// Swaps the roles of `X` and `Y`.
    pub fn transpose(&self) -> DiscreteJoint<Y, X> {
        let cols = self.support_y.len();
        DiscreteJoint::from_counts(self.support_x.iter().enumerate().flat_map(|(r, x)| {
            self.support_y
                .iter()
                .enumerate()
                .map(move |(k, y)| (y.clone(), x.clone(), self.counts[r * cols + k]))
        }))
    }

    fn check(&self) -> Result<f64, InfoError> {
        let total = self.total();
        if total == 0 {
            return Err(InfoError::EmptyJoint);
        }
        Ok(total as f64)
    }

    pub fn entropy_x(&self) -> Result<f64, InfoError> {
        let total = self.check()?;
        Ok(entropy_of_counts(&self.row_counts(), total))
    }

    pub fn entropy_y(&self) -> Result<f64, InfoError> {
        let total = self.check()?;
        Ok(entropy_of_counts(&self.col_counts(), total))
    }

    pub fn joint_entropy(&self) -> Result<f64, InfoError> {
        let total = self.check()?;
        Ok(entropy_of_counts(&self.counts, total))
    }
}

fn entropy_of_counts(counts: &[u64], total: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Plug-in MI computed as `D(P_XY || P_X P_Y)`.
pub fn plugin_mi<X: Ord + Clone, Y: Ord + Clone>(
    joint: &DiscreteJoint<X, Y>,
) -> Result<f64, InfoError> {
    let total = joint.check()?;
    let rows = joint.row_counts();
    let cols = joint.col_counts();
    let width = cols.len();
    let mut mi = 0.0;
    for (r, &rc) in rows.iter().enumerate() {
        for (k, &cc) in cols.iter().enumerate() {
            let c = joint.counts[r * width + k];
            if c == 0 {
                continue;
            }
            // p(x,y) / (p(x) p(y)) = c * N / (rc * cc)
            let ratio = (c as f64 * total) / (rc as f64 * cc as f64);
            mi += (c as f64 / total) * ratio.ln();
        }
    }
    // Round-off can leave a tiny negative value for independent tables.
    Ok(mi.max(0.0))
}

/// Plug-in MI computed as `H(X) + H(Y) - H(X,Y)`.
pub fn entropy_form_mi<X: Ord + Clone, Y: Ord + Clone>(
    joint: &DiscreteJoint<X, Y>,
) -> Result<f64, InfoError> {
    let hx = joint.entropy_x()?;
    let hy = joint.entropy_y()?;
    let hxy = joint.joint_entropy()?;
    Ok((hx + hy - hxy).max(0.0))
}

/// MI under the selected estimator.
pub fn estimate_mi<X: Ord + Clone, Y: Ord + Clone>(
    joint: &DiscreteJoint<X, Y>,
    estimator: MiEstimator,
) -> Result<f64, InfoError> {
    let mi = plugin_mi(joint)?;
    match estimator {
        MiEstimator::PlugIn => Ok(mi),
        MiEstimator::MillerMadow => {
            // Each entropy gains (K - 1) / 2N; the MI correction is the signed sum.
            let n = joint.total() as f64;
            let kx = joint.support_x.len() as f64;
            let ky = joint.support_y.len() as f64;
            let kxy = joint.counts.iter().filter(|&&c| c > 0).count() as f64;
            let correction = ((kx - 1.0) + (ky - 1.0) - (kxy - 1.0)) / (2.0 * n);
            Ok((mi + correction).max(0.0))
        }
    }
}

/// Joints keyed by a conditioning value (one group per supersample).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedJoint<K, X, Y> {
    pub groups: BTreeMap<K, DiscreteJoint<X, Y>>,
}

impl<K: Ord, X: Ord + Clone, Y: Ord + Clone> GroupedJoint<K, X, Y> {
    pub fn new() -> Self {
        Self {
            groups: BTreeMap::new(),
        }
    }

    /// Builds groups from `(key, x, y)` observations.
    pub fn from_observations<I>(obs: I) -> Self
    where
        K: Clone,
        I: IntoIterator<Item = (K, X, Y)>,
    {
        let mut buckets: BTreeMap<K, Vec<(X, Y)>> = BTreeMap::new();
        for (k, x, y) in obs {
            buckets.entry(k).or_default().push((x, y));
        }
        Self {
            groups: buckets
                .into_iter()
                .map(|(k, pairs)| (k, DiscreteJoint::from_pairs(pairs)))
                .collect(),
        }
    }
}

impl<K: Ord, X: Ord + Clone, Y: Ord + Clone> Default for GroupedJoint<K, X, Y> {
    fn default() -> Self {
        Self::new()
    }
}

/// Disintegrated MI averaged (unweighted) over groups.
///
/// Returns the mean together with the per-group values in key order.
pub fn conditional_plugin_mi<K: Ord, X: Ord + Clone, Y: Ord + Clone>(
    grouped: &GroupedJoint<K, X, Y>,
    estimator: MiEstimator,
) -> Result<(f64, Vec<f64>), InfoError> {
    if grouped.groups.is_empty() {
        return Err(InfoError::NoGroups);
    }
    let per_group = grouped
        .groups
        .values()
        .map(|j| estimate_mi(j, estimator))
        .collect::<Result<Vec<_>, _>>()?;
    let mean = per_group.iter().sum::<f64>() / per_group.len() as f64;
    Ok((mean, per_group))
}

fn xlogy_ratio(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * (x / y).ln()
    }
}

/// Binary relative entropy `d(p || q)`; infinite when `q` sits on a boundary
/// that `p` does not share.
pub fn binary_kl(p: f64, q: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&q));
    if (q == 0.0 && p > 0.0) || (q == 1.0 && p < 1.0) {
        return f64::INFINITY;
    }
    xlogy_ratio(p, q) + xlogy_ratio(1.0 - p, 1.0 - q)
}

/// Relaxed binary relative entropy `gamma * p - log(1 - q + q e^gamma)`.
/// Its supremum over `gamma` is `binary_kl(p, q)`.
pub fn d_gamma(p: f64, q: f64, gamma: f64) -> f64 {
    gamma * p - (1.0 - q + q * gamma.exp()).ln()
}

const INVERSION_TOL: f64 = 1e-10;

/// Largest `r` in `[p_hat, 1]` with `d(p_hat || (p_hat + r) / 2) <= c`.
pub fn invert_kl_risk(p_hat: f64, c: f64) -> Result<f64, InfoError> {
    if !(0.0..=1.0).contains(&p_hat) {
        return Err(InfoError::InvalidProbability(p_hat));
    }
    if !(c >= 0.0) || !c.is_finite() {
        return Err(InfoError::InvalidBudget(c));
    }
    // A zero budget pins the midpoint to p_hat.
    if c == 0.0 {
        return Ok(p_hat);
    }
    let div = |r: f64| binary_kl(p_hat, 0.5 * (p_hat + r));
    if div(1.0) <= c {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (p_hat, 1.0);
    while hi - lo > INVERSION_TOL {
        let mid = 0.5 * (lo + hi);
        if div(mid) <= c {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Interaction information `2 I(A;S) - I((A,B);S)` for a joint over
/// `((A, B), S)`. Negative values indicate synergy between `A` and `B`.
pub fn interaction_information<A, B, S>(joint: &DiscreteJoint<(A, B), S>) -> Result<f64, InfoError>
where
    A: Ord + Clone,
    B: Ord + Clone,
    S: Ord + Clone,
{
    let pair = plugin_mi(joint)?;
    let first = plugin_mi(&joint.map_x(|(a, _)| a.clone()))?;
    Ok(2.0 * first - pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::LN_2;

    fn bits(pairs: &[(u8, u8, u64)]) -> DiscreteJoint<u8, u8> {
        DiscreteJoint::from_counts(pairs.iter().copied())
    }

    #[test]
    fn independent_bits_have_zero_mi() {
        let j = bits(&[(0, 0, 25), (0, 1, 25), (1, 0, 25), (1, 1, 25)]);
        assert_abs_diff_eq!(plugin_mi(&j).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn copied_bit_has_log2() {
        let j = bits(&[(0, 0, 7), (1, 1, 7)]);
        assert_abs_diff_eq!(plugin_mi(&j).unwrap(), LN_2, epsilon = 1e-15);
    }

    #[test]
    fn binary_symmetric_channel() {
        // Oracle: direct sum over the four atoms of p(x,y) log p(x,y)/(p(x)p(y)).
        let flip = 0.1f64;
        let mut oracle = 0.0;
        for x in 0..2 {
            for y in 0..2 {
                let p: f64 = 0.5 * if x == y { 1.0 - flip } else { flip };
                oracle += p * (p / 0.25).ln();
            }
        }
        assert_abs_diff_eq!(oracle, 0.368064, epsilon = 1e-6);
        let j = bits(&[(0, 0, 45), (0, 1, 5), (1, 0, 5), (1, 1, 45)]);
        assert_abs_diff_eq!(plugin_mi(&j).unwrap(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn empty_joint_is_an_error() {
        let j: DiscreteJoint<u8, u8> = DiscreteJoint::from_pairs(std::iter::empty());
        assert_eq!(plugin_mi(&j), Err(InfoError::EmptyJoint));
    }

    #[test]
    fn zero_counts_leave_the_support() {
        let j = bits(&[(0, 0, 3), (1, 0, 0), (0, 1, 2)]);
        assert_eq!(j.support_x(), &[0]);
        assert_eq!(j.total(), 5);
    }

    #[test]
    fn grouped_mean() {
        let mut g = GroupedJoint::new();
        g.groups.insert(0usize, bits(&[(0, 0, 4), (1, 1, 4)]));
        g.groups.insert(1usize, bits(&[(0, 0, 2), (0, 1, 2), (1, 0, 2), (1, 1, 2)]));
        let (mean, per) = conditional_plugin_mi(&g, MiEstimator::PlugIn).unwrap();
        assert_eq!(per.len(), 2);
        assert_abs_diff_eq!(mean, 0.346574, epsilon = 1e-6);

        let mut single = GroupedJoint::new();
        let j = bits(&[(0, 0, 4), (1, 1, 1), (1, 0, 2)]);
        single.groups.insert(7usize, j.clone());
        let (m1, _) = conditional_plugin_mi(&single, MiEstimator::PlugIn).unwrap();
        assert_eq!(m1, plugin_mi(&j).unwrap());

        let constant_x = bits(&[(1, 0, 3), (1, 1, 9)]);
        assert_eq!(plugin_mi(&constant_x).unwrap(), 0.0);

        let empty: GroupedJoint<usize, u8, u8> = GroupedJoint::new();
        assert!(conditional_plugin_mi(&empty, MiEstimator::PlugIn).is_err());
    }

    #[test]
    fn binary_kl_values() {
        for p in [0.0, 0.2, 0.5, 1.0] {
            assert_abs_diff_eq!(binary_kl(p, p), 0.0, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(binary_kl(0.0, 0.5), LN_2, epsilon = 1e-15);
        let direct = 0.1 * (0.1f64 / 0.3).ln() + 0.9 * (0.9f64 / 0.7).ln();
        assert_abs_diff_eq!(binary_kl(0.1, 0.3), direct, epsilon = 1e-15);
        assert_abs_diff_eq!(binary_kl(0.1, 0.3), 0.116322, epsilon = 1e-6);
        assert!(binary_kl(0.3, 0.0).is_infinite());
        assert!(binary_kl(0.3, 1.0).is_infinite());
        assert_eq!(binary_kl(0.0, 0.0), 0.0);
        assert_eq!(binary_kl(1.0, 1.0), 0.0);
    }

    #[test]
    fn d_gamma_values() {
        assert_eq!(d_gamma(0.3, 0.7, 0.0), 0.0);
        assert_abs_diff_eq!(d_gamma(0.1, 0.3, 1.0), -0.315735, epsilon = 1e-6);
        // Grid search over gamma approaches the binary KL from below.
        let best = (0..=20_000)
            .map(|k| d_gamma(0.1, 0.3, -10.0 + k as f64 * 1e-3))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(best <= binary_kl(0.1, 0.3) + 1e-15);
        assert_abs_diff_eq!(best, binary_kl(0.1, 0.3), epsilon = 1e-5);
    }

    #[test]
    fn inversion_closed_forms() {
        assert_abs_diff_eq!(invert_kl_risk(0.3, 0.0).unwrap(), 0.3, epsilon = 1e-9);
        assert_eq!(invert_kl_risk(0.0, LN_2).unwrap(), 1.0);
        let expected = 2.0 * (1.0 - (-0.1f64).exp());
        assert_abs_diff_eq!(expected, 0.190325, epsilon = 1e-6);
        assert_abs_diff_eq!(invert_kl_risk(0.0, 0.1).unwrap(), expected, epsilon = 1e-9);
        assert!(invert_kl_risk(0.2, -1.0).is_err());
        assert!(invert_kl_risk(1.5, 0.1).is_err());
    }

    #[test]
    fn interaction_information_cases() {
        // Independent triple.
        let mut obs = Vec::new();
        for a in 0..2u8 {
            for b in 0..2u8 {
                for s in 0..2u8 {
                    obs.push(((a, b), s));
                }
            }
        }
        let j = DiscreteJoint::from_pairs(obs.clone());
        assert_abs_diff_eq!(interaction_information(&j).unwrap(), 0.0, epsilon = 1e-15);

        // B duplicates A: 2I(A;S) - I((A,A);S) = I(A;S).
        let dup = DiscreteJoint::from_counts(vec![
            ((0u8, 0u8), 0u8, 6u64),
            ((1, 1), 0, 2),
            ((0, 0), 1, 1),
            ((1, 1), 1, 7),
        ]);
        let single = plugin_mi(&dup.map_x(|(a, _)| *a)).unwrap();
        assert!(single > 0.0);
        assert_abs_diff_eq!(interaction_information(&dup).unwrap(), single, epsilon = 1e-15);

        // S = A xor B with A, B uniform: each alone says nothing, together everything.
        let xor = DiscreteJoint::from_pairs(
            (0..2u8).flat_map(|a| (0..2u8).map(move |b| ((a, b), a ^ b))),
        );
        assert_abs_diff_eq!(interaction_information(&xor).unwrap(), -LN_2, epsilon = 1e-15);
    }

    #[test]
    fn miller_madow_adds_nonnegative_correction_for_independent_table() {
        let j = bits(&[(0, 0, 10), (0, 1, 10), (1, 0, 10), (1, 1, 10)]);
        let mm = estimate_mi(&j, MiEstimator::MillerMadow).unwrap();
        // (1 + 1 - 3) / 80 < 0, so it clamps at the plug-in value of zero.
        assert_eq!(mm, 0.0);
        let sparse = bits(&[(0, 0, 10), (1, 1, 10)]);
        let plug = plugin_mi(&sparse).unwrap();
        let mm = estimate_mi(&sparse, MiEstimator::MillerMadow).unwrap();
        assert_abs_diff_eq!(mm, plug + 1.0 / 40.0, epsilon = 1e-15);
    }
}
