//! Finite-difference gradient oracle shared by unit, integration and
//! acceptance tests. It only evaluates forward passes, so it is independent
//! of every backward rule it checks.

use crate::error::Result;
use crate::rng::{rng_from_seed, standard_normal};
use crate::tensor::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    Tensor::from_fn(shape.to_vec(), |_| standard_normal(&mut rng))
}

/// Largest relative error, over all inputs, between the tape gradient of
/// `Σ R ⊙ f(inputs)` (fixed random `R`) and central finite differences.
///
/// The error for one input is `‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖, 1e-8)`.
pub fn gradient_error<F>(inputs: &[Tensor], seed: u64, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let weights = random_tensor(out.shape(), seed ^ 0x5eed);
    let loss = out.weighted_sum(&weights)?;
    let grads = tape.backward(&loss)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok(out
            .value()
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum())
    };

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape().to_vec()));
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = analytic
            .norm()
            .max(numeric.iter().map(|v| v * v).sum::<f64>().sqrt())
            .max(1e-8);
        worst = worst.max(diff / scale);
    }
    Ok(worst)
}

/// Panics unless [`gradient_error`] is below [`FD_TOLERANCE`].
pub fn check_gradients<F>(inputs: &[Tensor], seed: u64, f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let err = gradient_error(inputs, seed, f).expect("forward pass failed");
    assert!(err < FD_TOLERANCE, "relative gradient error {err:.3e}");
}
