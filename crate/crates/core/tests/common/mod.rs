#![allow(dead_code)]

pub mod gradcheck;

use fedpt::nn::{ModelWeights, Tensor};
use fedpt::seed::rng_from;
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = rng_from(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Relative error with a small absolute floor so that entries that are
/// zero in both gradients do not divide by zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

/// Max relative error between `grad` and central differences of `f` at `x`.
pub fn check_slice(x: &[f64], grad: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), grad.len());
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + FD_STEP;
        let up = f(&probe);
        probe[i] = orig - FD_STEP;
        let down = f(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(grad[i], numeric));
    }
    worst
}

pub fn check_tensor(x: &Tensor, grad: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> f64 {
    let shape = x.shape().to_vec();
    check_slice(x.data(), grad.data(), |v| {
        f(&Tensor::new(shape.clone(), v.to_vec()).unwrap())
    })
}

pub fn check_weights(w: &ModelWeights, grad: &ModelWeights, mut f: impl FnMut(&ModelWeights) -> f64) -> f64 {
    let flat = w.flatten();
    let mut probe = w.clone();
    check_slice(&flat, &grad.flatten(), |v| {
        for (dst, &src) in probe.values_mut().zip(v) {
            *dst = src;
        }
        f(&probe)
    })
}

/// A few dozen 8×8 toy images, fast enough for protocol tests.
pub fn tiny_toy(seed: u64) -> fedpt::data::TrainTest {
    let spec = fedpt::data::ToyDatasetSpec {
        classes: 3,
        train_per_class: 20,
        test_per_class: 8,
        side: 8,
        n_iters: 200,
        ..Default::default()
    };
    fedpt::data::make_toy_dataset(&spec, seed).unwrap()
}
