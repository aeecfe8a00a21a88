#![allow(dead_code)]

use misscal_core::calib::{CalibratorParams, LogitVector, Parametrization};
use misscal_core::fit::PairedLogitSample;
use misscal_core::rng::seeded;
use rand::Rng;
use rand_distr::StandardNormal;

pub const KINDS: [Parametrization; 3] = [
    Parametrization::Dense,
    Parametrization::Diagonal,
    Parametrization::Temperature,
];

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Ablated logits are a noisy, shrunk copy of the clean ones, so the clean
/// argmax is learnable but not perfectly.
pub fn noisy_pairs(m: usize, count: usize, seed: u64) -> Vec<PairedLogitSample> {
    let mut rng = seeded(seed);
    (0..count)
        .map(|_| {
            let clean: Vec<f64> = (0..m).map(|_| 2.0 * normal(&mut rng)).collect();
            let ablated: Vec<f64> = clean.iter().map(|c| 0.5 * c + normal(&mut rng)).collect();
            PairedLogitSample::new(
                LogitVector::new(clean).unwrap(),
                LogitVector::new(ablated).unwrap(),
                0.5,
            )
            .unwrap()
        })
        .collect()
}

pub fn random_params(m: usize, kind: Parametrization, rng: &mut impl Rng) -> CalibratorParams {
    let weights: Vec<f64> = match kind {
        Parametrization::Temperature => vec![rng.random_range(0.2..3.0)],
        _ => (0..kind.weight_len(m)).map(|_| normal(rng)).collect(),
    };
    let bias = match kind {
        Parametrization::Temperature => vec![0.0; m],
        _ => (0..m).map(|_| normal(rng)).collect(),
    };
    CalibratorParams::new(m, kind, weights, bias).unwrap()
}

/// Rebuilds parameters from a free vector laid out like `to_free`.
pub fn from_free(m: usize, kind: Parametrization, theta: &[f64]) -> CalibratorParams {
    let wl = kind.weight_len(m);
    let bias = match kind {
        Parametrization::Temperature => vec![0.0; m],
        _ => theta[wl..wl + m].to_vec(),
    };
    CalibratorParams::new(m, kind, theta[..wl].to_vec(), bias).unwrap()
}
