//! Finite-difference gradient checking.
//!
//! Every differentiable building block in this crate is exercised against
//! central differences at 64-bit through the [`DifferentiableOp`] contract.

use crate::error::{KanetError, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A pure op with an explicit backward pass. All trainable parameters are
/// passed as inputs so the checker can perturb them uniformly.
pub trait DifferentiableOp {
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor>;

    /// Gradients of `sum(output * upstream)` with respect to every input,
    /// shaped identically to the inputs.
    fn backward(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>>;
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOpts {
    pub perturbation: f64,
    pub seed: u64,
    /// Coordinate budget; above it a seeded random subsample is checked.
    pub max_coords: usize,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        Self {
            perturbation: 1e-5,
            seed: 0,
            max_coords: 10_000,
        }
    }
}

/// Compares the analytic backward pass against central finite differences and
/// returns the worst relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check(op: &dyn DifferentiableOp, inputs: &[Tensor], opts: GradCheckOpts) -> Result<f64> {
    if opts.perturbation <= 0.0 {
        return Err(KanetError::Domain("perturbation must be > 0".into()));
    }
    for t in inputs {
        t.ensure_finite("grad_check input")?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let out = op.forward(inputs)?;
    let upstream = Tensor::randn(out.shape(), &mut rng);
    let analytic = op.backward(inputs, &upstream)?;
    if analytic.len() != inputs.len() {
        return Err(KanetError::GradCheck(format!(
            "backward returned {} gradients for {} inputs",
            analytic.len(),
            inputs.len()
        )));
    }
    for (g, x) in analytic.iter().zip(inputs) {
        if g.shape() != x.shape() {
            return Err(KanetError::GradCheck(format!(
                "gradient shape {:?} does not match input shape {:?}",
                g.shape(),
                x.shape()
            )));
        }
    }

    let total: usize = inputs.iter().map(|t| t.numel()).sum();
    let mut coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.numel()).map(move |ci| (ti, ci)))
        .collect();
    if total > opts.max_coords {
        coords.shuffle(&mut rng);
        coords.truncate(opts.max_coords);
    }

    let eps = opts.perturbation;
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, ci) in coords {
        let orig = work[ti].data()[ci];
        work[ti].data_mut()[ci] = orig + eps;
        let lp = weighted_sum(&op.forward(&work)?, &upstream);
        work[ti].data_mut()[ci] = orig - eps;
        let lm = weighted_sum(&op.forward(&work)?, &upstream);
        work[ti].data_mut()[ci] = orig;
        let numeric = (lp - lm) / (2.0 * eps);
        let analytic_v = analytic[ti].data()[ci];
        if !numeric.is_finite() || !analytic_v.is_finite() {
            return Err(KanetError::GradCheck(format!(
                "non-finite gradient at input {ti} coordinate {ci}: analytic={analytic_v}, numeric={numeric}"
            )));
        }
        let rel = (analytic_v - numeric).abs() / analytic_v.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn weighted_sum(out: &Tensor, w: &Tensor) -> f64 {
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Matmul as a checkable op over inputs `[a, b]`.
pub struct MatmulOp;

impl DifferentiableOp for MatmulOp {
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        crate::tensor::matmul(&inputs[0], &inputs[1])
    }

    fn backward(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        // dA = dY B^T, dB = A^T dY
        let da = crate::tensor::matmul(upstream, &b.transpose2()?)?;
        let db = crate::tensor::matmul(&a.transpose2()?, upstream)?;
        Ok(vec![da, db])
    }
}

/// Elementwise SiLU over a single input.
pub struct SiluOp;

impl DifferentiableOp for SiluOp {
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        crate::tensor::silu(&inputs[0])
    }

    fn backward(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![crate::tensor::silu_backward(&inputs[0], upstream)?])
    }
}

/// Train-mode batch norm over inputs `[x, gamma, beta]` (fresh running stats,
/// so the statistics path is purely the batch one).
pub struct BatchNormOp {
    pub channels: usize,
}

impl DifferentiableOp for BatchNormOp {
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let mut bn = crate::norm::BatchNorm::new(self.channels);
        bn.gamma = inputs[1].clone();
        bn.beta = inputs[2].clone();
        Ok(bn.forward_train(&inputs[0])?.0)
    }

    fn backward(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let mut bn = crate::norm::BatchNorm::new(self.channels);
        bn.gamma = inputs[1].clone();
        bn.beta = inputs[2].clone();
        let (_, cache) = bn.forward_train(&inputs[0])?;
        let (dx, dgamma, dbeta) = bn.backward(&cache, upstream)?;
        Ok(vec![dx, dgamma, dbeta])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn matmul_gradients_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::randn(&[5, 4], &mut rng);
        let b = Tensor::randn(&[4, 3], &mut rng);
        let err = grad_check(&MatmulOp, &[a, b], GradCheckOpts::default()).unwrap();
        assert!(err < 1e-6, "err={err}");
    }

    #[test]
    fn silu_gradients_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn(&[100], &mut rng);
        let err = grad_check(&SiluOp, &[x], GradCheckOpts::default()).unwrap();
        assert!(err < 1e-7, "err={err}");
    }

    #[test]
    fn batch_norm_gradients_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::randn(&[4, 3, 5], &mut rng);
        let gamma = Tensor::randn(&[3], &mut rng);
        let beta = Tensor::randn(&[3], &mut rng);
        let err = grad_check(&BatchNormOp { channels: 3 }, &[x, gamma, beta], GradCheckOpts::default())
            .unwrap();
        assert!(err < 1e-5, "err={err}");
    }

    /// Negative control: a deliberately wrong backward must be caught.
    struct BrokenSilu;
    impl DifferentiableOp for BrokenSilu {
        fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
            crate::tensor::silu(&inputs[0])
        }
        fn backward(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
            // wrong: pretends the derivative is sigmoid alone
            Ok(vec![Tensor::from_fn(inputs[0].shape(), |i| {
                upstream.data()[i] * crate::tensor::sigmoid(inputs[0].data()[i]) * 0.5
            })])
        }
    }

    #[test]
    fn wrong_backward_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = Tensor::randn(&[50], &mut rng);
        let err = grad_check(&BrokenSilu, &[x], GradCheckOpts::default()).unwrap();
        assert!(err > 1e-2, "err={err}");
    }

    #[test]
    fn subsampling_is_seeded_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let a = Tensor::randn(&[120, 50], &mut rng);
        let b = Tensor::randn(&[50, 2], &mut rng);
        let opts = GradCheckOpts {
            max_coords: 64,
            ..Default::default()
        };
        let e1 = grad_check(&MatmulOp, &[a.clone(), b.clone()], opts).unwrap();
        let e2 = grad_check(&MatmulOp, &[a, b], opts).unwrap();
        assert_eq!(e1, e2);
    }
}
