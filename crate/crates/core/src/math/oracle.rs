//! Brute-force posterior oracles.
//!
//! These only use the forward densities of the noising process and never the
//! closed-form posterior, so they can check the kernels independently. They
//! are 1-D and meant for tests.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::math::schedule::Schedule;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Moments of `z_{t−τ} | z_t` when `x` is uniform over `prior_points`,
/// `z_{t−τ} ~ N(x, σ²_{t−τ})` and `z_t ~ N(z_{t−τ}, σ²_t − σ²_{t−τ})`,
/// integrated on a fine grid.
pub fn grid_bayes_oracle(schedule: &Schedule, i: usize, prior_points: &[f64], z_t: f64) -> Result<Moments> {
    if prior_points.is_empty() {
        return Err(Error::InvalidArgument("empty prior support".into()));
    }
    schedule.check_step(i)?;
    let sp = schedule.sigma(i - 1);
    let st = schedule.sigma(i);
    let step = st * st - sp * sp;
    if st <= 0.0 {
        return Err(Error::InvalidArgument("sigma_t is zero".into()));
    }
    if step == 0.0 {
        return Ok(Moments { mean: z_t, variance: 0.0 });
    }
    if sp == 0.0 {
        // z_{t−τ} sits exactly on a prior point: discrete posterior.
        let logw: Vec<f64> = prior_points.iter().map(|&x| -(z_t - x).powi(2) / (2.0 * step)).collect();
        let lz = log_sum_exp(&logw);
        let w: Vec<f64> = logw.iter().map(|l| (l - lz).exp()).collect();
        let mean: f64 = w.iter().zip(prior_points).map(|(w, x)| w * x).sum();
        let variance: f64 = w.iter().zip(prior_points).map(|(w, x)| w * (x - mean).powi(2)).sum();
        return Ok(Moments { mean, variance });
    }

    let ss = step.sqrt();
    let lo_p = prior_points.iter().cloned().fold(f64::INFINITY, f64::min) - 12.0 * sp;
    let hi_p = prior_points.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 12.0 * sp;
    let lo = lo_p.max(z_t - 12.0 * ss);
    let hi = hi_p.min(z_t + 12.0 * ss);
    if lo >= hi {
        return Err(Error::InvalidArgument("z_t is unreachable under the prior".into()));
    }
    let h_max = sp.min(ss) / 40.0;
    let n = (((hi - lo) / h_max).ceil() as usize).max(4000);
    let h = (hi - lo) / n as f64;

    let mut logp = Vec::with_capacity(n + 1);
    let mut comp = vec![0.0; prior_points.len()];
    for k in 0..=n {
        let u = lo + h * k as f64;
        for (c, &x) in comp.iter_mut().zip(prior_points) {
            *c = -(u - x).powi(2) / (2.0 * sp * sp);
        }
        logp.push(log_sum_exp(&comp) - (z_t - u).powi(2) / (2.0 * step));
    }
    let m = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut w0, mut w1, mut w2) = (0.0, 0.0, 0.0);
    for (k, lp) in logp.iter().enumerate() {
        let trap = if k == 0 || k == n { 0.5 } else { 1.0 };
        let u = lo + h * k as f64;
        let p = trap * (lp - m).exp();
        w0 += p;
        w1 += p * u;
        w2 += p * u * u;
    }
    let mean = w1 / w0;
    Ok(Moments {
        mean,
        variance: (w2 / w0 - mean * mean).max(0.0),
    })
}

/// Monte-Carlo estimate with its standard errors.
#[derive(Debug, Clone, Copy)]
pub struct McMoments {
    pub mean: f64,
    pub variance: f64,
    pub mean_se: f64,
    pub variance_se: f64,
    pub accepted: usize,
}

/// Moments of `z_{t−τ} | z_t` for the encoder-driven process, by ancestral
/// sampling and conditioning on a narrow bin around `z_t`:
/// `z_{t−τ} = f_prev + σ_{t−τ} ε`,
/// `z_t = z_{t−τ} + (f_cur − f_prev) + σ_{t|t−τ} ε'`.
pub fn monte_carlo_nonlinear_oracle(
    schedule: &Schedule,
    i: usize,
    f_prev: f64,
    f_cur: f64,
    z_t: f64,
    n_draws: usize,
    bin_half_width: f64,
    rng: &mut impl Rng,
) -> Result<McMoments> {
    schedule.check_step(i)?;
    let sp = schedule.sigma(i - 1);
    let st = schedule.sigma(i);
    let ss = (st * st - sp * sp).sqrt();
    let (mut n, mut s1, mut s2) = (0usize, 0.0, 0.0);
    let mut kept = Vec::new();
    for _ in 0..n_draws {
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let prev = f_prev + sp * e1;
        let cur = prev + (f_cur - f_prev) + ss * e2;
        if (cur - z_t).abs() < bin_half_width {
            n += 1;
            s1 += prev;
            kept.push(prev);
        }
    }
    if n < 30 {
        return Err(Error::InvalidArgument(format!("only {n} draws landed in the bin")));
    }
    let nf = n as f64;
    let mean = s1 / nf;
    for v in &kept {
        s2 += (v - mean).powi(2);
    }
    let variance = s2 / (nf - 1.0);
    let m4 = kept.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / nf;
    Ok(McMoments {
        mean,
        variance,
        mean_se: (variance / nf).sqrt(),
        variance_se: ((m4 - variance * variance).max(0.0) / nf).sqrt(),
        accepted: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::schedule::ShapeTag;

    #[test]
    fn empty_prior_is_an_error() {
        let s = Schedule::linear(4, 1.0, 1.0).unwrap();
        assert!(grid_bayes_oracle(&s, 2, &[], 0.0).is_err());
    }

    #[test]
    fn symmetric_prior_gives_zero_mean() {
        let s = Schedule::linear(10, 1.0, 1.0).unwrap();
        let m = grid_bayes_oracle(&s, 7, &[-1.3, 1.3], 0.0).unwrap();
        assert!(m.mean.abs() < 1e-12);
    }

    #[test]
    fn zero_previous_sigma_is_discrete() {
        let s = Schedule::new(2, 1.0, vec![0.0, 0.0, 1.0], ShapeTag::Learned).unwrap();
        let m = grid_bayes_oracle(&s, 2, &[0.5], 3.0).unwrap();
        assert_eq!(m.mean, 0.5);
        assert_eq!(m.variance, 0.0);
    }
}
