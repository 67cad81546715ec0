//! Central finite-difference gradient checking.
//!
//! Runs in `f64`: the step is `h = 1e-4` and the comparison uses the
//! relative error `|g_a - g_n| / max(1, |g_a|, |g_n|)`. Builders are called
//! repeatedly, so they must be pure functions of the input tensors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{no_grad, Tensor};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_relative_error: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} max_rel_err={:>12.3e}  {}",
            self.op_name,
            self.max_relative_error,
            if self.passed { "ok" } else { "FAIL" }
        )
    }
}

/// Checks the analytic gradient of `builder` against central finite
/// differences on uniform random inputs in `[-1, 1)`.
pub fn grad_check(
    op_name: &str,
    builder: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    input_shapes: &[&[usize]],
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    grad_check_sampled(op_name, builder, input_shapes, tolerance, seed, |rng, shape| {
        Tensor::rand_uniform(shape, -1.0, 1.0, rng).expect("valid shape")
    })
}

/// As `grad_check`, with a caller-chosen input sampler (used to keep inputs
/// away from kinks of relu/min/max).
pub fn grad_check_sampled(
    op_name: &str,
    builder: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    input_shapes: &[&[usize]],
    tolerance: f64,
    seed: u64,
    sample: impl Fn(&mut ChaCha8Rng, &[usize]) -> Tensor<f64>,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> =
        input_shapes.iter().map(|s| sample(&mut rng, s).with_requires_grad()).collect();

    let loss = builder(&inputs)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> =
        inputs.iter().map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()])).collect();

    let mut max_rel = 0.0f64;
    for (idx, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            input.data_mut()[j] = orig + FD_STEP;
            let up = no_grad(|| builder(&inputs))?.item();
            input.data_mut()[j] = orig - FD_STEP;
            let down = no_grad(|| builder(&inputs))?.item();
            input.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let ga = analytic[idx][j];
            let rel = (ga - numeric).abs() / 1.0f64.max(ga.abs()).max(numeric.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(GradCheckReport { op_name: op_name.to_string(), max_relative_error: max_rel, passed: max_rel < tolerance })
}

/// Uniform samples of magnitude in `[margin, 1)` with random sign; keeps
/// kinked ops (relu, elementwise min, extrema) away from their corners.
pub fn sample_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let mag = Tensor::<f64>::rand_uniform(shape, margin, 1.0, rng).expect("valid shape");
    let sign = Tensor::<f64>::rand_uniform(shape, 0.0, 1.0, rng).expect("valid shape");
    let data: Vec<f64> = mag
        .data()
        .iter()
        .zip(sign.data().iter())
        .map(|(&m, &s)| if s < 0.5 { -m } else { m })
        .collect();
    Tensor::from_vec(data, shape).expect("same shape")
}

/// Strictly positive samples in `[lo, hi)` for ln/sqrt/div denominators.
pub fn sample_positive(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, rng).expect("valid shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact_to_rounding() {
        let r = grad_check(
            "linear_map",
            |xs| Ok(xs[0].mul_scalar(3.0).add_scalar(1.0).sum_all()),
            &[&[4]],
            1e-10,
            0,
        )
        .unwrap();
        assert!(r.passed, "max rel err {}", r.max_relative_error);
    }

    #[test]
    fn relu_away_from_kink_passes() {
        let r = grad_check_sampled(
            "relu",
            |xs| Ok(xs[0].relu().sum_all()),
            &[&[16]],
            1e-4,
            1,
            |rng, s| sample_away_from_zero(rng, s, 0.1),
        )
        .unwrap();
        assert!(r.passed, "max rel err {}", r.max_relative_error);
    }

    #[test]
    fn sigmoid_chain_passes() {
        let r = grad_check(
            "sigmoid_chain",
            |xs| Ok(xs[0].sigmoid().mul(&xs[0].sigmoid())?.mean_all()),
            &[&[8]],
            1e-4,
            2,
        )
        .unwrap();
        assert!(r.passed, "max rel err {}", r.max_relative_error);
    }

    #[test]
    fn wrong_backward_rule_is_caught() {
        let r = grad_check(
            "broken_square",
            |xs| Ok(xs[0].custom_unary("broken_square", |x| x * x, |x, _| x).sum_all()),
            &[&[6]],
            1e-4,
            3,
        )
        .unwrap();
        assert!(!r.passed, "broken rule must fail the check");
    }
}
