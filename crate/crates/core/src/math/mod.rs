//! Closed-form kernels for the linear and encoder-driven (non-linear)
//! noising processes, the shared noise schedule, and brute-force oracles.

pub mod kernels;
pub mod oracle;
pub mod schedule;

pub use kernels::{
    forward_marginal_sample, linear_posterior, model_mean_nonlinear, nonlinear_posterior, step_variance, GaussianPosterior,
    StepCoefficients,
};
pub use schedule::{Schedule, ShapeTag};
