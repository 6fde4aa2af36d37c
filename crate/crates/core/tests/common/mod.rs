//! Central finite-difference gradient checks shared by the gradient tests
//! and the acceptance suite. Each check returns the worst relative error.

#![allow(dead_code)]

use betaspec::diffusion::{self, DenoiserModel, DiffusionBatch, DiffusionConfig, EncodingTable};
use betaspec::nn::{Activation, Architecture, ConditionedNetwork, Param, Tensor};
use betaspec::rng;
use betaspec::vae::{self, VaeBatch, VaeConfig, VaeModel};
use betaspec::Schedule;
use rand::Rng;

pub const H: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(1e-6))
}

/// Loss `Σ w ⊙ y` with fixed random weights, so `∂L/∂y = w`.
fn weighted_output(net: &ConditionedNetwork, x: &Tensor, t: &[f64], w: &[f64]) -> f64 {
    let y = net.forward(x, t).unwrap();
    y.values().iter().zip(w).map(|(a, b)| a * b).sum()
}

/// Small architectures covering every layer type and activation.
pub fn architectures() -> Vec<(&'static str, Architecture)> {
    let arch = |norm_groups, activation, hidden: Vec<usize>| Architecture {
        input_dim: 5,
        hidden,
        output_dim: 3,
        embed_dim: 6,
        norm_groups,
        activation,
        horizon: 1.0,
    };
    vec![
        ("dense silu", arch(0, Activation::Silu, vec![8, 6])),
        ("group norm silu", arch(2, Activation::Silu, vec![8, 6])),
        ("group norm sigmoid", arch(1, Activation::Sigmoid, vec![4])),
        ("tanh", arch(3, Activation::Tanh, vec![6, 9, 3])),
        ("output layer only", arch(0, Activation::Silu, vec![])),
    ]
}

/// Parameter and input gradients of a conditioned network.
pub fn check_network(arch: &Architecture, seed: u64) -> f64 {
    let mut r = rng::stream(seed, 1, 2);
    let batch = 4;
    let mut net = ConditionedNetwork::new(arch.clone(), seed, "g").unwrap();
    // Non-trivial norm gains and biases.
    for p in net.params_mut() {
        for v in p.tensor.values_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    let x = Tensor::matrix(
        batch,
        arch.input_dim,
        (0..batch * arch.input_dim).map(|_| r.random_range(-1.5..1.5)).collect(),
    )
    .unwrap();
    let t: Vec<f64> = (0..batch).map(|_| r.random_range(0.0..arch.horizon)).collect();
    let w: Vec<f64> = (0..batch * arch.output_dim).map(|_| r.random_range(-1.0..1.0)).collect();

    let (_, tape) = net.forward_recorded(&x, &t).unwrap();
    let gout = Tensor::matrix(batch, arch.output_dim, w.clone()).unwrap();
    let dx = net.backward(&tape, &gout, true).unwrap().unwrap();

    let mut worst = 0.0f64;
    for pi in 0..net.params().len() {
        let n = net.params()[pi].tensor.len();
        let analytic = net.params()[pi].tensor.grad().unwrap().to_vec();
        let probes: Vec<usize> = (0..n.min(5)).map(|_| r.random_range(0..n)).collect();
        for k in probes {
            let orig = net.params()[pi].tensor.values()[k];
            net.params_mut()[pi].tensor.values_mut()[k] = orig + H;
            let lp = weighted_output(&net, &x, &t, &w);
            net.params_mut()[pi].tensor.values_mut()[k] = orig - H;
            let lm = weighted_output(&net, &x, &t, &w);
            net.params_mut()[pi].tensor.values_mut()[k] = orig;
            worst = worst.max(rel_err(analytic[k], (lp - lm) / (2.0 * H)));
        }
    }
    for k in 0..x.len() {
        let mut xp = x.clone();
        xp.values_mut()[k] += H;
        let mut xm = x.clone();
        xm.values_mut()[k] -= H;
        let numeric = (weighted_output(&net, &xp, &t, &w) - weighted_output(&net, &xm, &t, &w)) / (2.0 * H);
        worst = worst.max(rel_err(dx.values()[k], numeric));
    }
    worst
}

fn vae_params_mut(m: &mut VaeModel) -> Vec<&mut Param> {
    let mut out: Vec<_> = m.encoder.params_mut().iter_mut().collect();
    out.extend(m.decoder.params_mut().iter_mut());
    out.push(&mut m.log_sigma);
    out.push(&mut m.log_s);
    out
}

/// The β-weighted VAE objective plus the schedule penalties, including the
/// σ and s tables.
pub fn check_vae_objective(seed: u64) -> f64 {
    let cfg = VaeConfig {
        latent_dim: 3,
        data_dim: 7,
        grid_size: 5,
        hidden: vec![6],
        embed_dim: 4,
        batch_size: 4,
        obs_scale: 0.7,
        anchor_weight: 0.3,
        ..VaeConfig::default()
    };
    let mut model = VaeModel::new(cfg).unwrap();
    let mut r = rng::stream(seed, 0, 0);
    for p in vae_params_mut(&mut model) {
        for v in p.tensor.values_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    // Force one decreasing step so the monotonicity penalty is active.
    model.log_sigma.tensor.values_mut()[3] = model.log_sigma.tensor.values()[2] - 0.4;
    let batch = VaeBatch {
        x: Tensor::matrix(4, 7, (0..28).map(|_| r.random_range(0.0..1.0)).collect()).unwrap(),
        betas: vec![0.0, 0.33, 0.58, 1.0],
        noise: Tensor::matrix(4, 3, (0..12).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap(),
    };
    let objective = |m: &VaeModel| {
        let mut m = m.clone();
        let (l, _) = vae::batch_loss_and_grad(&mut m, &batch).unwrap();
        l + vae::schedule_penalty(&mut m)
    };

    let mut analytic = model.clone();
    analytic.zero_grad();
    vae::batch_loss_and_grad(&mut analytic, &batch).unwrap();
    vae::schedule_penalty(&mut analytic);
    let grads: Vec<Vec<f64>> = vae_params_mut(&mut analytic)
        .iter()
        .map(|p| p.tensor.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.tensor.len()]))
        .collect();

    let mut worst = 0.0f64;
    for (pi, grad) in grads.iter().enumerate() {
        let len = grad.len();
        let probes: Vec<usize> = if len <= 8 {
            (0..len).collect()
        } else {
            (0..5).map(|_| r.random_range(0..len)).collect()
        };
        for k in probes {
            let mut plus = model.clone();
            vae_params_mut(&mut plus)[pi].tensor.values_mut()[k] += H;
            let mut minus = model.clone();
            vae_params_mut(&mut minus)[pi].tensor.values_mut()[k] -= H;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(grad[k], numeric));
        }
    }
    worst
}

/// The ε + Δ diffusion loss over a batch of an analytic encoder table.
pub fn check_diffusion_objective(seed: u64) -> f64 {
    let cfg = DiffusionConfig {
        hidden: vec![7, 5],
        embed_dim: 4,
        eps_weight: 1.7,
        delta_weight: 2.5,
        data_scale: 0.8,
        ..DiffusionConfig::default()
    };
    let schedule = Schedule::sched2(6, 1.0, 1.0, 1.2).unwrap();
    let mut model = DenoiserModel::new(cfg, schedule.clone(), 3).unwrap();
    let mut r = rng::stream(seed, 0, 0);
    for p in model.net.params_mut() {
        for v in p.tensor.values_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    let items: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
    let table = EncodingTable::from_fn(&items, 3, &schedule, |x, t| x.iter().map(|v| (1.0 - t) * v + t * t).collect()).unwrap();
    let batch = DiffusionBatch {
        items: vec![0, 3, 2, 1, 3],
        steps: vec![1, 6, 3, 4, 2],
        noise: (0..15).map(|_| r.random_range(-2.0..2.0)).collect(),
    };
    let objective = |m: &DenoiserModel| {
        let mut m = m.clone();
        diffusion::batch_loss_and_grad(&mut m, &table, &batch).unwrap().0
    };

    let mut analytic = model.clone();
    analytic.net.zero_grad();
    diffusion::batch_loss_and_grad(&mut analytic, &table, &batch).unwrap();
    let mut worst = 0.0f64;
    for pi in 0..model.net.params().len() {
        let grad = analytic.net.params()[pi].tensor.grad().unwrap().to_vec();
        let probes: Vec<usize> = (0..grad.len().min(6)).map(|_| r.random_range(0..grad.len())).collect();
        for k in probes {
            let mut plus = model.clone();
            plus.net.params_mut()[pi].tensor.values_mut()[k] += H;
            let mut minus = model.clone();
            minus.net.params_mut()[pi].tensor.values_mut()[k] -= H;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(grad[k], numeric));
        }
    }
    worst
}
