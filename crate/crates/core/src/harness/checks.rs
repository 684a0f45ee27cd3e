//! Self-checks exposed through the `gradcheck` and `oracle` subcommands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::infotheory::{binary_kl, entropy_form_mi, invert_kl_risk, plugin_mi, DiscreteJoint, InfoError};
use crate::model::{grad_check, Activation, MlpParams, ModelError};
use crate::tasks::LabeledExample;

/// Largest relative gradient error over `nets` random 4-layer networks with
/// widths up to 32 and batches up to 8.
pub fn gradcheck_suite(nets: usize, seed: u64) -> Result<f64, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..nets {
        let sizes: Vec<usize> = (0..5).map(|_| rng.random_range(1..=32)).collect();
        let outputs = sizes[4].max(2);
        let sizes = [sizes[0], sizes[1], sizes[2], sizes[3], outputs];
        let mut params = MlpParams::init(&sizes, Activation::Relu, &mut rng)?;
        // Non-zero biases keep pre-activations off the ReLU kink almost surely.
        params.add_noise(0.1, &mut rng);
        let batch: Vec<LabeledExample> = (0..rng.random_range(1..=8))
            .map(|_| LabeledExample {
                features: (0..sizes[0]).map(|_| rng.random_range(-1.0..1.0)).collect(),
                label: rng.random_range(0..outputs),
            })
            .collect();
        worst = worst.max(grad_check(&params, &batch, 1e-5)?);
    }
    Ok(worst)
}

/// Random joint over supports up to `6 x 4` with at least one observation.
pub fn random_joint<R: Rng>(rng: &mut R) -> DiscreteJoint<usize, usize> {
    let kx = rng.random_range(1..=6);
    let ky = rng.random_range(1..=4);
    let mut cells = Vec::new();
    for x in 0..kx {
        for y in 0..ky {
            cells.push((x, y, rng.random_range(0..20u64)));
        }
    }
    if cells.iter().all(|c| c.2 == 0) {
        cells[0].2 = 1;
    }
    DiscreteJoint::from_counts(cells)
}

/// Outcome of the MI and KL-inversion oracles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSummary {
    pub joints: usize,
    /// Largest `|KL form - entropy form|`.
    pub max_form_diff: f64,
    /// Joints whose MI left `[0, min(H(X), H(Y))]`.
    pub range_violations: usize,
    pub inversions: usize,
    /// Largest `|invert(p, d(p || (p+q)/2)) - q|`.
    pub max_inversion_err: f64,
}

pub fn oracle_suite(joints: usize, inversions: usize, seed: u64) -> Result<OracleSummary, InfoError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_form_diff: f64 = 0.0;
    let mut range_violations = 0;
    for _ in 0..joints {
        let j = random_joint(&mut rng);
        let kl = plugin_mi(&j)?;
        let ent = entropy_form_mi(&j)?;
        max_form_diff = max_form_diff.max((kl - ent).abs());
        let cap = j.entropy_x()?.min(j.entropy_y()?);
        if !(kl >= 0.0 && kl <= cap + 1e-12) {
            range_violations += 1;
        }
    }
    let mut max_inversion_err: f64 = 0.0;
    for _ in 0..inversions {
        let a: f64 = rng.random();
        let b: f64 = rng.random();
        let (p, q) = if a < b { (a, b) } else { (b, a) };
        let c = binary_kl(p, 0.5 * (p + q));
        max_inversion_err = max_inversion_err.max((invert_kl_risk(p, c)? - q).abs());
    }
    Ok(OracleSummary {
        joints,
        max_form_diff,
        range_violations,
        inversions,
        max_inversion_err,
    })
}
