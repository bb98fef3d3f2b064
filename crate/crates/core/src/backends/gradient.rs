use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, Latent};

/// A scalar objective over a latent array.
pub trait Objective {
    fn value(&self, x: &Latent) -> Result<f64>;

    /// Value and exact gradient. Objectives built on non-differentiable
    /// backends return [`Error::NotDifferentiable`].
    fn value_and_grad(&self, x: &Latent) -> Result<(f64, Latent)>;
}

impl<F> Objective for F
where
    F: Fn(&Latent) -> Result<(f64, Latent)>,
{
    fn value(&self, x: &Latent) -> Result<f64> {
        Ok(self(x)?.0)
    }

    fn value_and_grad(&self, x: &Latent) -> Result<(f64, Latent)> {
        self(x)
    }
}

/// Central-difference settings. Steps are relative: `h_i = rel_step·max(1, |x_i|)`.
#[derive(Debug, Clone, PartialEq)]
pub enum FiniteDifference {
    Coordinate {
        rel_step: f64,
    },
    /// Averaged Rademacher-direction estimates; `probes` objective pairs per call.
    RandomProbes {
        rel_step: f64,
        probes: usize,
        seed: u64,
    },
}

impl Default for FiniteDifference {
    fn default() -> Self {
        FiniteDifference::Coordinate { rel_step: 1e-4 }
    }
}

/// How guided steps obtain `∇ objective`.
#[derive(Debug, Clone, PartialEq)]
pub enum GradientMode {
    /// Exact vector-Jacobian products; fails on non-differentiable backends.
    Analytic,
    /// Always use finite differences.
    FiniteDifference(FiniteDifference),
    /// Analytic when available, finite differences otherwise.
    Auto(FiniteDifference),
}

impl Default for GradientMode {
    fn default() -> Self {
        GradientMode::Auto(FiniteDifference::default())
    }
}

/// Value and gradient of `objective` at `x`, with a numeric guard on the result.
pub fn gradient_of(objective: &dyn Objective, x: &Latent, mode: &GradientMode) -> Result<(f64, Latent)> {
    let (value, grad) = match mode {
        GradientMode::Analytic => objective.value_and_grad(x)?,
        GradientMode::FiniteDifference(fd) => {
            let value = objective.value(x)?;
            (
                value,
                finite_difference_gradient(&|z: &Latent| objective.value(z), x, fd)?,
            )
        }
        GradientMode::Auto(fd) => match objective.value_and_grad(x) {
            Err(Error::NotDifferentiable(_)) => {
                let value = objective.value(x)?;
                (
                    value,
                    finite_difference_gradient(&|z: &Latent| objective.value(z), x, fd)?,
                )
            }
            other => other?,
        },
    };
    tensor::ensure_finite_scalar(value, "objective")?;
    tensor::same_shape(x, &grad)?;
    tensor::ensure_finite(&grad, "gradient")?;
    Ok((value, grad))
}

/// Central finite-difference gradient of a scalar function.
pub fn finite_difference_gradient(
    f: &dyn Fn(&Latent) -> Result<f64>,
    x: &Latent,
    fd: &FiniteDifference,
) -> Result<Latent> {
    let mut grad = tensor::zeros_like(x);
    match *fd {
        FiniteDifference::Coordinate { rel_step } => {
            let shape = x.raw_dim();
            let base: Vec<f64> = x.iter().copied().collect();
            let mut probe = base.clone();
            let mut out = vec![0.0; base.len()];
            for i in 0..base.len() {
                let h = rel_step * base[i].abs().max(1.0);
                probe[i] = base[i] + h;
                let up = guard(f(&Latent::from_shape_vec(shape.clone(), probe.clone()).unwrap())?)?;
                probe[i] = base[i] - h;
                let down = guard(f(&Latent::from_shape_vec(shape.clone(), probe.clone()).unwrap())?)?;
                probe[i] = base[i];
                out[i] = (up - down) / (2.0 * h);
            }
            grad = Latent::from_shape_vec(shape, out).expect("shape preserved");
        }
        FiniteDifference::RandomProbes { rel_step, probes, seed } => {
            if probes == 0 {
                return Err(Error::InvalidInput("random-probe count must be positive".into()));
            }
            let scale = x.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
            let h = rel_step * scale;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..probes {
                let dir = x.mapv(|_| if rng.random::<bool>() { 1.0 } else { -1.0 });
                let up = guard(f(&(x + &(&dir * h)))?)?;
                let down = guard(f(&(x - &(&dir * h)))?)?;
                grad = grad + dir * ((up - down) / (2.0 * h * probes as f64));
            }
        }
    }
    Ok(grad)
}

fn guard(v: f64) -> Result<f64> {
    tensor::ensure_finite_scalar(v, "objective")
}
