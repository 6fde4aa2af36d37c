//! Closed-form kernels of the linear and non-linear noising processes.
//!
//! All variances are isotropic scalars. Step index `i` refers to the pair
//! `(t − τ, t) = ((i−1)B/N, iB/N)`.

use crate::error::{Error, Result};
use crate::math::schedule::Schedule;

/// Isotropic Gaussian `N(mean, variance·I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub variance: f64,
}

/// Reverse-step coefficients for step `i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    /// σ_t
    pub sigma_t: f64,
    /// σ_{t−τ}
    pub sigma_prev: f64,
    /// σ²_{t−τ} / σ²_t, weight of `z_t` in the posterior mean.
    pub coef_z: f64,
    /// σ²_{t|t−τ} / σ²_t, weight of the clean point.
    pub coef_x: f64,
    /// σ²_{t|t−τ} σ²_{t−τ} / σ²_t
    pub posterior_variance: f64,
}

impl StepCoefficients {
    pub fn new(schedule: &Schedule, i: usize) -> Result<Self> {
        let step = step_variance(schedule, i)?;
        let sigma_t = schedule.sigma(i);
        let sigma_prev = schedule.sigma(i - 1);
        if sigma_t <= 0.0 {
            return Err(Error::InvalidArgument(format!("sigma_t is zero at step {i}")));
        }
        let var_t = sigma_t * sigma_t;
        let var_prev = sigma_prev * sigma_prev;
        Ok(StepCoefficients {
            sigma_t,
            sigma_prev,
            coef_z: var_prev / var_t,
            coef_x: step / var_t,
            posterior_variance: step * var_prev / var_t,
        })
    }
}

/// `σ²_{iB/N} − σ²_{(i−1)B/N}`.
pub fn step_variance(schedule: &Schedule, i: usize) -> Result<f64> {
    schedule.check_step(i)?;
    let (prev, cur) = (schedule.sigma(i - 1), schedule.sigma(i));
    Ok(cur * cur - prev * prev)
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        Err(Error::DimensionMismatch { what, expected, got })
    } else {
        Ok(())
    }
}

/// Posterior `q(z_{t−τ} | z_t, x)` of the linear process.
pub fn linear_posterior(z_t: &[f64], x: &[f64], schedule: &Schedule, i: usize) -> Result<GaussianPosterior> {
    check_dim("clean point", z_t.len(), x.len())?;
    let c = StepCoefficients::new(schedule, i)?;
    let mean = z_t.iter().zip(x).map(|(&z, &x)| c.coef_z * z + c.coef_x * x).collect();
    Ok(GaussianPosterior {
        mean,
        variance: c.posterior_variance,
    })
}

/// Posterior of the non-linear process whose mean follows the encoder.
///
/// `x` is the clean point at time `t` in latent coordinates; for the
/// encoder-driven process that is `f(x, t)` (which makes the mean exact), and
/// for the linear process it is the data point itself. The shift
/// `f_prev − f_cur` carries the encoder's evolution over one step.
pub fn nonlinear_posterior(
    z_t: &[f64],
    x: &[f64],
    f_prev: &[f64],
    f_cur: &[f64],
    schedule: &Schedule,
    i: usize,
) -> Result<GaussianPosterior> {
    check_dim("clean point", z_t.len(), x.len())?;
    check_dim("previous encoder mean", z_t.len(), f_prev.len())?;
    check_dim("current encoder mean", z_t.len(), f_cur.len())?;
    let mut post = linear_posterior(z_t, x, schedule, i)?;
    for ((m, &fp), &fc) in post.mean.iter_mut().zip(f_prev).zip(f_cur) {
        *m += fp - fc;
    }
    Ok(post)
}

/// `mean + sigma·noise`.
pub fn forward_marginal_sample(mean: &[f64], sigma: f64, noise: &[f64]) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be non-negative, got {sigma}")));
    }
    check_dim("noise", mean.len(), noise.len())?;
    Ok(mean.iter().zip(noise).map(|(&m, &e)| m + sigma * e).collect())
}

/// Model mean with the clean point predicted from noise,
/// `x̂ = z_t − σ_t ε̂`, plus the encoder-difference prediction `Δ̂`.
pub fn model_mean_nonlinear(z_t: &[f64], eps_hat: &[f64], delta_hat: &[f64], schedule: &Schedule, i: usize) -> Result<Vec<f64>> {
    check_dim("eps_hat", z_t.len(), eps_hat.len())?;
    check_dim("delta_hat", z_t.len(), delta_hat.len())?;
    let c = StepCoefficients::new(schedule, i)?;
    Ok(z_t
        .iter()
        .zip(eps_hat)
        .zip(delta_hat)
        .map(|((&z, &e), &d)| {
            let x_hat = z - c.sigma_t * e;
            c.coef_z * z + c.coef_x * x_hat + d
        })
        .collect())
}
