//! Latent diffusion whose forward mean follows the β-conditioned encoder.
//!
//! With `t ≡ β` on the shared grid, the forward process is
//! `z_t = f(x, t) + σ_t ε`. The denoiser has two heads on one trunk: `ε̂`
//! predicts the injected noise and `Δ̂` predicts the one-step encoder
//! difference `f(x, t − τ) − f(x, t)`.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::kernels::StepCoefficients;
use crate::math::schedule::{fmt_f64, Schedule};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{Activation, Adam, AdamConfig, Architecture, ConditionedNetwork, Param, Tensor};
use crate::rng;
use crate::vae::VaeModel;

const TRAIN_TAG: u64 = 0xD1FF_0000;
const SAMPLE_TAG: u64 = 0x5A3F_0000;
const DENOISE_TAG: u64 = 0xDE0E_0000;
const SHARPEN_TAG: u64 = 0x5A4B_0000;

/// How the reverse step turns `(ε̂, Δ̂)` into `z_{t−τ}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepRule {
    /// `μ_t = z_t − σ_t ε̂`, `z_{t−τ} = μ_t ⊕ Δ̂ + σ_{t−τ} ξ`.
    Renoise,
    /// Gaussian posterior mean and variance with `x̂ = z_t − σ_t ε̂`.
    Posterior,
}

/// Sign used to apply `Δ̂` in the reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaSign {
    /// `+Δ̂`, matching the training target `f(x, t−τ) − f(x, t)`.
    Add,
    /// `−Δ̂`.
    Subtract,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerOptions {
    pub step_rule: StepRule,
    pub delta_sign: DeltaSign,
    /// Mean and standard deviation of the initial `z_B` draw.
    pub prior_mean: f64,
    pub prior_std: f64,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        SamplerOptions {
            step_rule: StepRule::Renoise,
            delta_sign: DeltaSign::Add,
            prior_mean: 0.0,
            prior_std: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub steps: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub norm_groups: usize,
    pub activation: Activation,
    pub adam: AdamConfig,
    /// Constant loss weight `w(t)` of the noise term.
    pub eps_weight: f64,
    pub delta_weight: f64,
    /// Network input is `z / sqrt(data_scale² + σ_t²)`.
    pub data_scale: f64,
    pub sampler: SamplerOptions,
    pub log_every: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            seed: 0,
            batch_size: 128,
            steps: 8000,
            hidden: vec![256, 256, 256],
            embed_dim: 32,
            norm_groups: 0,
            activation: Activation::Silu,
            adam: AdamConfig::default(),
            eps_weight: 1.0,
            delta_weight: 1.0,
            data_scale: 1.0,
            sampler: SamplerOptions::default(),
            log_every: 200,
        }
    }
}

/// Encoder means `f(x_j, t_i)` of a fixed item set on every grid time.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingTable {
    n_items: usize,
    dim: usize,
    n_steps: usize,
    /// one slice when the encoder does not depend on time
    time_constant: bool,
    values: Vec<f64>,
}

impl EncodingTable {
    /// Means of row-major `images` under the VAE encoder at every grid β.
    pub fn from_vae(vae: &VaeModel, images: &[f64]) -> Result<Self> {
        let n_steps = vae.grid_size();
        let mut values = Vec::new();
        for i in 0..=n_steps {
            values.extend(vae.encode_many(images, vae.grid_beta(i))?);
        }
        let dim = vae.latent_dim();
        Ok(EncodingTable {
            n_items: images.len() / vae.data_dim(),
            dim,
            n_steps,
            time_constant: false,
            values,
        })
    }

    /// `f(x, t) = x` for row-major points `items`.
    pub fn constant(items: Vec<f64>, dim: usize, n_steps: usize) -> Result<Self> {
        if dim == 0 || items.is_empty() || !items.len().is_multiple_of(dim) {
            return Err(Error::InvalidArgument("items do not form rows".into()));
        }
        Ok(EncodingTable {
            n_items: items.len() / dim,
            dim,
            n_steps,
            time_constant: true,
            values: items,
        })
    }

    /// Tabulate an analytic encoder `f(point, t)` on `schedule`'s grid.
    pub fn from_fn(items: &[f64], dim: usize, schedule: &Schedule, f: impl Fn(&[f64], f64) -> Vec<f64>) -> Result<Self> {
        if dim == 0 || items.is_empty() || !items.len().is_multiple_of(dim) {
            return Err(Error::InvalidArgument("items do not form rows".into()));
        }
        let n_steps = schedule.n_steps();
        let mut values = Vec::with_capacity((n_steps + 1) * items.len());
        for i in 0..=n_steps {
            let t = schedule.time(i);
            for x in items.chunks(dim) {
                let m = f(x, t);
                if m.len() != dim {
                    return Err(Error::DimensionMismatch {
                        what: "encoder output",
                        expected: dim,
                        got: m.len(),
                    });
                }
                values.extend(m);
            }
        }
        Ok(EncodingTable {
            n_items: items.len() / dim,
            dim,
            n_steps,
            time_constant: false,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.n_items
    }

    pub fn is_empty(&self) -> bool {
        self.n_items == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// `f(x_item, t_i)`.
    pub fn mean(&self, item: usize, i: usize) -> &[f64] {
        let slice = if self.time_constant { 0 } else { i };
        let off = (slice * self.n_items + item) * self.dim;
        &self.values[off..off + self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub config: DiffusionConfig,
    pub net: ConditionedNetwork,
    pub schedule: Schedule,
    dim: usize,
}

/// Head outputs for a batch, both `n × d` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub eps: Vec<f64>,
    pub delta: Vec<f64>,
}

impl DenoiserModel {
    pub fn new(config: DiffusionConfig, schedule: Schedule, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("latent dimension must be positive".into()));
        }
        if !(config.data_scale > 0.0 && config.eps_weight > 0.0) {
            return Err(Error::InvalidArgument("data_scale and eps_weight must be positive".into()));
        }
        let arch = Architecture {
            input_dim: dim,
            hidden: config.hidden.clone(),
            output_dim: 2 * dim,
            embed_dim: config.embed_dim,
            norm_groups: config.norm_groups,
            activation: config.activation,
            horizon: schedule.horizon(),
        };
        let net = ConditionedNetwork::new(arch, config.seed, "diff")?;
        Ok(DenoiserModel {
            config,
            net,
            schedule,
            dim,
        })
    }

    pub fn from_checkpoint(config: DiffusionConfig, schedule: Schedule, dim: usize, ckpt: &Checkpoint) -> Result<Self> {
        let mut m = DenoiserModel::new(config, schedule, dim)?;
        m.net.load_params(&ckpt.with_prefix("diff"))?;
        Ok(m)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.net.params().iter().collect()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Set the output weights and bias of the `Δ̂` head to zero, so it
    /// predicts exactly zero everywhere.
    pub fn zero_delta_head(&mut self) {
        let d = self.dim;
        for p in self.net.params_mut() {
            if p.name == "diff.out.weight" {
                for row in p.tensor.values_mut().chunks_mut(2 * d) {
                    row[d..].iter_mut().for_each(|v| *v = 0.0);
                }
            } else if p.name == "diff.out.bias" {
                p.tensor.values_mut()[d..].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn input_scale(&self, i: usize) -> f64 {
        let s = self.schedule.sigma(i);
        1.0 / (self.config.data_scale.powi(2) + s * s).sqrt()
    }

    fn prepare(&self, z: &[f64], steps: &[usize]) -> Result<(Tensor, Vec<f64>)> {
        let d = self.dim;
        if z.len() != steps.len() * d {
            return Err(Error::DimensionMismatch {
                what: "latent batch",
                expected: steps.len() * d,
                got: z.len(),
            });
        }
        let mut input = z.to_vec();
        for (row, &i) in input.chunks_mut(d).zip(steps) {
            self.schedule.check_step(i)?;
            let c = self.input_scale(i);
            row.iter_mut().for_each(|v| *v *= c);
        }
        let times = steps.iter().map(|&i| self.schedule.time(i)).collect();
        Ok((Tensor::matrix(steps.len(), d, input)?, times))
    }

    fn split(&self, out: &[f64]) -> Heads {
        let d = self.dim;
        let tau = self.schedule.tau();
        let mut eps = Vec::with_capacity(out.len() / 2);
        let mut delta = Vec::with_capacity(out.len() / 2);
        for row in out.chunks(2 * d) {
            eps.extend_from_slice(&row[..d]);
            delta.extend(row[d..].iter().map(|v| tau * v));
        }
        Heads { eps, delta }
    }

    /// `(ε̂, Δ̂)` for a batch of latents, one grid step index per row.
    pub fn heads(&self, z: &[f64], steps: &[usize]) -> Result<Heads> {
        let (x, t) = self.prepare(z, steps)?;
        let out = self.net.forward(&x, &t)?;
        Ok(self.split(out.values()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionLossBreakdown {
    pub total: f64,
    pub eps_term: f64,
    pub delta_term: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Loss for one example given the encoder means at steps `i − 1` and `i`.
pub fn diffusion_loss_from_means(
    denoiser: &DenoiserModel,
    f_prev: &[f64],
    f_cur: &[f64],
    i: usize,
    noise: &[f64],
) -> Result<DiffusionLossBreakdown> {
    denoiser.schedule.check_step(i)?;
    let d = denoiser.dim;
    for (what, v) in [("previous mean", f_prev), ("current mean", f_cur), ("noise", noise)] {
        if v.len() != d {
            return Err(Error::DimensionMismatch {
                what,
                expected: d,
                got: v.len(),
            });
        }
    }
    let sigma = denoiser.schedule.sigma(i);
    let z: Vec<f64> = f_cur.iter().zip(noise).map(|(f, e)| f + sigma * e).collect();
    let h = denoiser.heads(&z, &[i])?;
    let target: Vec<f64> = f_prev.iter().zip(f_cur).map(|(p, c)| p - c).collect();
    let eps_term = sq_dist(&h.eps, noise) / denoiser.config.eps_weight;
    let delta_term = sq_dist(&target, &h.delta);
    Ok(DiffusionLossBreakdown {
        total: eps_term + denoiser.config.delta_weight * delta_term,
        eps_term,
        delta_term,
    })
}

/// Loss for image `x` at step `i` under a frozen VAE encoder.
pub fn diffusion_loss(denoiser: &DenoiserModel, vae: &VaeModel, x: &[f64], i: usize, noise: &[f64]) -> Result<DiffusionLossBreakdown> {
    if i == 0 {
        return Err(Error::StepOutOfRange {
            index: 0,
            n_steps: denoiser.schedule.n_steps(),
        });
    }
    denoiser.schedule.check_step(i)?;
    let f_prev = vae.encode(x, denoiser.schedule.time(i - 1))?;
    let f_cur = vae.encode(x, denoiser.schedule.time(i))?;
    diffusion_loss_from_means(denoiser, &f_prev, &f_cur, i, noise)
}

/// A training minibatch: items, steps and noise.
#[derive(Debug, Clone)]
pub struct DiffusionBatch {
    pub items: Vec<usize>,
    pub steps: Vec<usize>,
    pub noise: Vec<f64>,
}

/// Mean loss over a batch; gradients of the mean are accumulated into the
/// denoiser's parameters.
pub fn batch_loss_and_grad(
    denoiser: &mut DenoiserModel,
    table: &EncodingTable,
    batch: &DiffusionBatch,
) -> Result<(f64, Vec<DiffusionLossBreakdown>)> {
    let d = denoiser.dim;
    let n = batch.items.len();
    if table.dim() != d || batch.steps.len() != n || batch.noise.len() != n * d {
        return Err(Error::InvalidArgument("batch does not match the denoiser".into()));
    }
    let mut z = Vec::with_capacity(n * d);
    let mut target = Vec::with_capacity(n * d);
    for ((&item, &i), e) in batch.items.iter().zip(&batch.steps).zip(batch.noise.chunks(d)) {
        denoiser.schedule.check_step(i)?;
        let sigma = denoiser.schedule.sigma(i);
        let (fp, fc) = (table.mean(item, i - 1), table.mean(item, i));
        z.extend(fc.iter().zip(e).map(|(f, e)| f + sigma * e));
        target.extend(fp.iter().zip(fc).map(|(p, c)| p - c));
    }
    let (x, t) = denoiser.prepare(&z, &batch.steps)?;
    let (out, tape) = denoiser.net.forward_recorded(&x, &t)?;
    let h = denoiser.split(out.values());

    let (w, lam, tau) = (denoiser.config.eps_weight, denoiser.config.delta_weight, denoiser.schedule.tau());
    let nf = n as f64;
    let mut grad = vec![0.0; n * 2 * d];
    let mut rows = Vec::with_capacity(n);
    let mut total = 0.0;
    for r in 0..n {
        let (e, eh) = (&batch.noise[r * d..(r + 1) * d], &h.eps[r * d..(r + 1) * d]);
        let (tg, dh) = (&target[r * d..(r + 1) * d], &h.delta[r * d..(r + 1) * d]);
        let eps_term = sq_dist(eh, e) / w;
        let delta_term = sq_dist(tg, dh);
        let loss = eps_term + lam * delta_term;
        total += loss;
        rows.push(DiffusionLossBreakdown {
            total: loss,
            eps_term,
            delta_term,
        });
        let g = &mut grad[r * 2 * d..(r + 1) * 2 * d];
        for k in 0..d {
            g[k] = 2.0 * (eh[k] - e[k]) / (w * nf);
            g[d + k] = 2.0 * lam * (dh[k] - tg[k]) * tau / nf;
        }
    }
    denoiser.net.backward(&tape, &Tensor::matrix(n, 2 * d, grad)?, false)?;
    Ok((total / nf, rows))
}

fn draw_batch(denoiser: &DenoiserModel, table: &EncodingTable, step: usize) -> DiffusionBatch {
    let cfg = &denoiser.config;
    let (n, d) = (cfg.batch_size, denoiser.dim);
    let mut batch = DiffusionBatch {
        items: Vec::with_capacity(n),
        steps: Vec::with_capacity(n),
        noise: vec![0.0; n * d],
    };
    for (r, chunk) in batch.noise.chunks_mut(d).enumerate() {
        let mut g = rng::stream(cfg.seed ^ TRAIN_TAG, step as u64, r as u64);
        batch.items.push(g.random_range(0..table.len()));
        batch.steps.push(g.random_range(1..=denoiser.schedule.n_steps()));
        rng::fill_normal(&mut g, chunk);
    }
    batch
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiffusionTrainLog {
    pub losses: Vec<f64>,
    pub eps_terms: Vec<f64>,
    pub delta_terms: Vec<f64>,
}

impl DiffusionTrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,eps_term,delta_term\n");
        for (k, ((l, e), dl)) in self.losses.iter().zip(&self.eps_terms).zip(&self.delta_terms).enumerate() {
            let _ = writeln!(s, "{},{:.6e},{:.6e},{:.6e}", k + 1, l, e, dl);
        }
        s
    }

    /// Means of consecutive windows of `width` steps.
    pub fn smoothed(values: &[f64], width: usize) -> Vec<f64> {
        values
            .chunks(width.max(1))
            .filter(|c| c.len() == width.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// Minimize the expected loss over items of `table`, `i ~ U{1..N}` and
/// Gaussian noise. The VAE (or analytic encoder) behind `table` is frozen.
pub fn train_diffusion(denoiser: &mut DenoiserModel, table: &EncodingTable) -> Result<DiffusionTrainLog> {
    if table.is_empty() {
        return Err(Error::InvalidArgument("empty encoding table".into()));
    }
    if table.n_steps() != denoiser.schedule.n_steps() {
        return Err(Error::InvalidArgument(format!(
            "encoding table has {} steps, schedule has {}",
            table.n_steps(),
            denoiser.schedule.n_steps()
        )));
    }
    denoiser.schedule.validate_for_sampling()?;
    let mut adam = Adam::new(denoiser.config.adam);
    let mut log = DiffusionTrainLog::default();
    let mut last_good = denoiser.net.clone();
    for step in 0..denoiser.config.steps {
        adam.config.learning_rate = Adam::scheduled_rate(&denoiser.config.adam, step, denoiser.config.steps);
        let batch = draw_batch(denoiser, table, step);
        denoiser.net.zero_grad();
        let (loss, rows) = batch_loss_and_grad(denoiser, table, &batch)?;
        let diverged = |reason: String| Error::Diverged { step, reason };
        if !loss.is_finite() {
            denoiser.net = last_good;
            return Err(diverged(format!("loss is {loss}")));
        }
        let mut params: Vec<&mut Param> = denoiser.net.params_mut().iter_mut().collect();
        if let Err(e) = adam.step(&mut params) {
            denoiser.net = last_good;
            return Err(diverged(e.to_string()));
        }
        let nf = rows.len() as f64;
        log.losses.push(loss);
        log.eps_terms.push(rows.iter().map(|r| r.eps_term).sum::<f64>() / nf);
        log.delta_terms.push(rows.iter().map(|r| r.delta_term).sum::<f64>() / nf);
        if (step + 1) % denoiser.config.log_every == 0 {
            last_good = denoiser.net.clone();
            log::debug!("diffusion step {} loss {loss:.4}", step + 1);
        }
    }
    Ok(log)
}

/// Result of a reverse chain run.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// final latents, `n × d`
    pub latents: Vec<f64>,
    /// every intermediate state `z_N … z_0` of every chain when tracing
    pub trace: Option<Vec<Vec<f64>>>,
    pub denoiser_evals: usize,
    pub noise_draws: usize,
}

impl SampleOutput {
    /// `trace v1` text of chain `chain`.
    pub fn trace_text(&self, chain: usize, dim: usize) -> Option<String> {
        let trace = self.trace.as_ref()?;
        let mut s = format!("trace v1 chain={chain} dim={dim} states={}\n", trace.len());
        for state in trace {
            let row: Vec<String> = state[chain * dim..(chain + 1) * dim].iter().map(|v| fmt_f64(*v)).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        Some(s)
    }
}

/// Mean of the reverse step given head outputs; `delta` is `None` for the
/// linear reference sampler.
fn reverse_mean(z: f64, eps: f64, delta: Option<f64>, c: &StepCoefficients, opts: &SamplerOptions) -> f64 {
    let base = match opts.step_rule {
        StepRule::Renoise => z - c.sigma_t * eps,
        StepRule::Posterior => c.coef_z * z + c.coef_x * (z - c.sigma_t * eps),
    };
    match (delta, opts.delta_sign) {
        (None, _) => base,
        (Some(dv), DeltaSign::Add) => base + dv,
        (Some(dv), DeltaSign::Subtract) => base - dv,
    }
}

fn step_noise_scale(c: &StepCoefficients, opts: &SamplerOptions) -> f64 {
    match opts.step_rule {
        StepRule::Renoise => c.sigma_prev,
        StepRule::Posterior => c.posterior_variance.sqrt(),
    }
}

/// Run the reverse chain from step `i_start` down to 1 for `n` chains whose
/// random streams are `rngs`. `use_delta = false` gives the linear sampler.
fn run_chain(
    denoiser: &DenoiserModel,
    mut z: Vec<f64>,
    i_start: usize,
    rngs: &mut [rand_chacha::ChaCha8Rng],
    opts: &SamplerOptions,
    use_delta: bool,
    trace: bool,
) -> Result<SampleOutput> {
    let d = denoiser.dim;
    let n = rngs.len();
    let mut states = trace.then(|| vec![z.clone()]);
    let mut evals = 0;
    let mut draws = 0;
    let mut fresh = vec![0.0; d];
    for i in (1..=i_start).rev() {
        let c = StepCoefficients::new(&denoiser.schedule, i)?;
        let h = denoiser.heads(&z, &vec![i; n])?;
        evals += 1;
        let scale = step_noise_scale(&c, opts);
        for (r, g) in rngs.iter_mut().enumerate() {
            rng::fill_normal(g, &mut fresh);
            for k in 0..d {
                let idx = r * d + k;
                let delta = use_delta.then(|| h.delta[idx]);
                z[idx] = reverse_mean(z[idx], h.eps[idx], delta, &c, opts) + scale * fresh[k];
            }
        }
        draws += 1;
        if let Some(s) = states.as_mut() {
            s.push(z.clone());
        }
    }
    Ok(SampleOutput {
        latents: z,
        trace: states,
        denoiser_evals: evals,
        noise_draws: draws,
    })
}

fn initial_chains(denoiser: &DenoiserModel, n: usize, seed: u64, opts: &SamplerOptions) -> (Vec<f64>, Vec<rand_chacha::ChaCha8Rng>) {
    let d = denoiser.dim;
    let mut rngs: Vec<_> = (0..n).map(|c| rng::stream(seed ^ SAMPLE_TAG, c as u64, 0)).collect();
    let mut z = vec![0.0; n * d];
    for (row, g) in z.chunks_mut(d).zip(rngs.iter_mut()) {
        rng::fill_normal(g, row);
        row.iter_mut().for_each(|v| *v = opts.prior_mean + opts.prior_std * *v);
    }
    (z, rngs)
}

/// Ancestral sampling of `n` latents at `t = 0` using both heads.
pub fn sample_latents(denoiser: &DenoiserModel, n: usize, seed: u64, opts: &SamplerOptions, trace: bool) -> Result<SampleOutput> {
    denoiser.schedule.validate_for_sampling()?;
    let (z, mut rngs) = initial_chains(denoiser, n, seed, opts);
    let mut out = run_chain(denoiser, z, denoiser.schedule.n_steps(), &mut rngs, opts, true, trace)?;
    out.noise_draws += 1;
    Ok(out)
}

/// Sample latents and decode them at `β = 0`.
pub fn sample(denoiser: &DenoiserModel, vae: &VaeModel, n: usize, seed: u64) -> Result<Vec<f64>> {
    if vae.latent_dim() != denoiser.dim {
        return Err(Error::DimensionMismatch {
            what: "VAE latent",
            expected: denoiser.dim,
            got: vae.latent_dim(),
        });
    }
    let out = sample_latents(denoiser, n, seed, &denoiser.config.sampler, false)?;
    vae.decode_many(&out.latents, 0.0)
}

/// Linear ancestral sampler that ignores the `Δ̂` head, sharing the random
/// streams of [`sample_latents`].
pub fn linear_ddpm_reference(denoiser: &DenoiserModel, n: usize, seed: u64, opts: &SamplerOptions, trace: bool) -> Result<SampleOutput> {
    denoiser.schedule.validate_for_sampling()?;
    let (z, mut rngs) = initial_chains(denoiser, n, seed, opts);
    let mut out = run_chain(denoiser, z, denoiser.schedule.n_steps(), &mut rngs, opts, false, trace)?;
    out.noise_draws += 1;
    Ok(out)
}

/// Run the reverse chain from grid step `i_start` for row-major latents
/// `z_beta`; row `r` uses the stream `(seed, r)`.
pub fn denoise_from(denoiser: &DenoiserModel, z_beta: &[f64], i_start: usize, seed: u64) -> Result<Vec<f64>> {
    let d = denoiser.dim;
    if !z_beta.len().is_multiple_of(d) {
        return Err(Error::DimensionMismatch {
            what: "latent batch",
            expected: d,
            got: z_beta.len() % d,
        });
    }
    if i_start > denoiser.schedule.n_steps() {
        return Err(Error::StepOutOfRange {
            index: i_start,
            n_steps: denoiser.schedule.n_steps(),
        });
    }
    if i_start == 0 {
        return Ok(z_beta.to_vec());
    }
    let n = z_beta.len() / d;
    let mut rngs: Vec<_> = (0..n).map(|r| rng::stream(seed ^ DENOISE_TAG, r as u64, 0)).collect();
    let out = run_chain(denoiser, z_beta.to_vec(), i_start, &mut rngs, &denoiser.config.sampler, true, false)?;
    Ok(out.latents)
}

/// Reconstructions of one image batch through the two routes compared by
/// the sharpening check, with their mean per-image squared errors.
#[derive(Debug, Clone, PartialEq)]
pub struct Sharpening {
    /// `decode(f(x, β), β)`
    pub direct: Vec<f64>,
    /// `decode(denoise_from(f(x, β) + σ_β ε), 0)`
    pub denoised: Vec<f64>,
    pub direct_mse: f64,
    pub denoised_mse: f64,
}

pub fn sharpening(vae: &VaeModel, denoiser: &DenoiserModel, images: &[f64], i_beta: usize, seed: u64) -> Result<Sharpening> {
    denoiser.schedule.check_step(i_beta)?;
    let (dd, d) = (vae.data_dim(), vae.latent_dim());
    if images.is_empty() || !images.len().is_multiple_of(dd) {
        return Err(Error::InvalidArgument("images do not form rows".into()));
    }
    let beta = denoiser.schedule.time(i_beta);
    let f = vae.encode_many(images, beta)?;
    let direct = vae.decode_many(&f, beta)?;
    let sigma = denoiser.schedule.sigma(i_beta);
    let mut z = f;
    let mut noise = vec![0.0; d];
    for (r, row) in z.chunks_mut(d).enumerate() {
        rng::fill_normal(&mut rng::stream(seed ^ SHARPEN_TAG, r as u64, 0), &mut noise);
        row.iter_mut().zip(&noise).for_each(|(v, e)| *v += sigma * e);
    }
    let denoised = vae.decode_many(&denoise_from(denoiser, &z, i_beta, seed)?, 0.0)?;
    let n = (images.len() / dd) as f64;
    let mse = |g: &[f64]| g.iter().zip(images).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    Ok(Sharpening {
        direct_mse: mse(&direct),
        denoised_mse: mse(&denoised),
        direct,
        denoised,
    })
}

/// Warn when the learned marginal at `β = B` is far from the `N(0, I)`
/// start of the sampler.
pub fn prior_mismatch_warning(vae: &VaeModel, images: &[f64]) -> Result<Option<String>> {
    let b = vae.horizon();
    let f = vae.encode_many(images, b)?;
    let d = vae.latent_dim();
    let n = (f.len() / d).max(1);
    let mean_norm = f.chunks(d).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / n as f64;
    let sigma = vae.sigma_at(b);
    if mean_norm >= 0.25 || (sigma - 1.0).abs() >= 0.25 {
        Ok(Some(format!(
            "learned marginal at beta=B is inconsistent with N(0, I): mean |f| = {mean_norm:.3}, sigma_B = {sigma:.3}"
        )))
    } else {
        Ok(None)
    }
}
