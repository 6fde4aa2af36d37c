//! β-conditioned VAE trained across a continuum of β values.
//!
//! For every β in `[0, B]` the per-example objective is
//!
//! ```text
//! L_β(x) = (B − β) · NLL(x | g(z_β, β), s_β²) + β · KL(N(f(x, β), σ_β² I) ‖ N(0, I))
//! ```
//!
//! with `z_β = f(x, β) + σ_β ε`. The latent scale σ_β and the observation
//! scale s_β are per-grid-point tables in log space, linearly interpolated
//! between grid points. The learned σ table doubles as the diffusion schedule.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math::schedule::{grid_position, Schedule, ShapeTag};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{Activation, Adam, AdamConfig, Architecture, ConditionedNetwork, Param, Tensor};
use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const STREAM_TAG: u64 = 0x7AE0_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaPrior {
    /// β ~ U[0, B]
    Uniform,
    /// β uniform over the grid points `i·B/N`.
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub data_dim: usize,
    pub horizon: f64,
    pub grid_size: usize,
    pub beta_prior: BetaPrior,
    pub seed: u64,
    pub batch_size: usize,
    pub steps: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub norm_groups: usize,
    pub activation: Activation,
    pub adam: AdamConfig,
    /// Initial (or fixed) value of every entry of the s_β table.
    pub obs_scale: f64,
    pub learn_obs_scale: bool,
    pub monotone_weight: f64,
    /// Weight of `(σ_N − 1)²`; zero disables the anchor.
    pub anchor_weight: f64,
    pub log_every: usize,
    pub log_buckets: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent_dim: 10,
            data_dim: 1024,
            horizon: 1.0,
            grid_size: 100,
            beta_prior: BetaPrior::Uniform,
            seed: 0,
            batch_size: 64,
            steps: 6000,
            hidden: vec![256, 128],
            embed_dim: 32,
            norm_groups: 0,
            activation: Activation::Silu,
            adam: AdamConfig::default(),
            obs_scale: 0.1,
            learn_obs_scale: true,
            monotone_weight: 10.0,
            anchor_weight: 0.1,
            log_every: 200,
            log_buckets: 10,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.grid_size < 2 {
            return bad(format!("grid_size must be at least 2, got {}", self.grid_size));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.latent_dim == 0 || self.latent_dim >= self.data_dim {
            return bad(format!(
                "latent_dim {} must be positive and below data_dim {}",
                self.latent_dim, self.data_dim
            ));
        }
        if self.batch_size == 0 || self.log_every == 0 || self.log_buckets == 0 {
            return bad("batch_size, log_every and log_buckets must be positive".into());
        }
        if !(self.obs_scale > 0.0) {
            return bad(format!("obs_scale must be positive, got {}", self.obs_scale));
        }
        Ok(())
    }

    fn encoder_arch(&self) -> Architecture {
        Architecture {
            input_dim: self.data_dim,
            hidden: self.hidden.clone(),
            output_dim: self.latent_dim,
            embed_dim: self.embed_dim,
            norm_groups: self.norm_groups,
            activation: self.activation,
            horizon: self.horizon,
        }
    }

    fn decoder_arch(&self) -> Architecture {
        Architecture {
            input_dim: self.latent_dim,
            hidden: self.hidden.iter().rev().copied().collect(),
            output_dim: self.data_dim,
            embed_dim: self.embed_dim,
            norm_groups: self.norm_groups,
            activation: self.activation,
            horizon: self.horizon,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub config: VaeConfig,
    pub encoder: ConditionedNetwork,
    pub decoder: ConditionedNetwork,
    pub log_sigma: Param,
    pub log_s: Param,
}

/// Value of a log-space table at β and the derivative weights with respect
/// to its two neighbouring entries.
struct TableLookup {
    value: f64,
    lo: usize,
    d_lo: f64,
    d_hi: f64,
}

fn lookup(table: &[f64], beta: f64, horizon: f64) -> TableLookup {
    let n = table.len() - 1;
    let (lo, w) = grid_position(beta, horizon, n);
    if lo == n {
        let v = table[n].exp();
        return TableLookup {
            value: v,
            lo,
            d_lo: v,
            d_hi: 0.0,
        };
    }
    let (a, b) = (table[lo].exp(), table[lo + 1].exp());
    TableLookup {
        value: (1.0 - w) * a + w * b,
        lo,
        d_lo: (1.0 - w) * a,
        d_hi: w * b,
    }
}

fn add_table_grad(grad: &mut [f64], l: &TableLookup, g: f64) {
    grad[l.lo] += g * l.d_lo;
    if l.d_hi != 0.0 {
        grad[l.lo + 1] += g * l.d_hi;
    }
}

impl VaeModel {
    pub fn new(config: VaeConfig) -> Result<Self> {
        config.validate()?;
        let encoder = ConditionedNetwork::new(config.encoder_arch(), config.seed, "vae.enc")?;
        let decoder = ConditionedNetwork::new(config.decoder_arch(), config.seed, "vae.dec")?;
        let n = config.grid_size;
        let sig: Vec<f64> = (0..=n).map(|i| (i as f64 / n as f64).max(1e-3).ln()).collect();
        let log_sigma = Param::new("vae.log_sigma", Tensor::new(vec![n + 1], sig)?);
        let log_s = Param::new("vae.log_s", Tensor::new(vec![n + 1], vec![config.obs_scale.ln(); n + 1])?);
        Ok(VaeModel {
            config,
            encoder,
            decoder,
            log_sigma,
            log_s,
        })
    }

    pub fn from_checkpoint(config: VaeConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut model = VaeModel::new(config)?;
        model.encoder.load_params(&ckpt.with_prefix("vae.enc"))?;
        model.decoder.load_params(&ckpt.with_prefix("vae.dec"))?;
        for table in [&mut model.log_sigma, &mut model.log_s] {
            let src = ckpt
                .get(&table.name)
                .ok_or_else(|| Error::Parse(format!("checkpoint lacks `{}`", table.name)))?;
            if src.tensor.shape() != table.tensor.shape() {
                return Err(Error::ShapeMismatch {
                    expected: table.tensor.shape().to_vec(),
                    got: src.tensor.shape().to_vec(),
                });
            }
            table.tensor.values_mut().copy_from_slice(src.tensor.values());
        }
        Ok(model)
    }

    pub fn all_params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.encoder.params().iter().collect();
        out.extend(self.decoder.params());
        out.push(&self.log_sigma);
        out.push(&self.log_s);
        out
    }

    fn trainable_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.encoder.params_mut().iter_mut().collect();
        out.extend(self.decoder.params_mut().iter_mut());
        out.push(&mut self.log_sigma);
        if self.config.learn_obs_scale {
            out.push(&mut self.log_s);
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        self.decoder.zero_grad();
        self.log_sigma.tensor.zero_grad();
        self.log_s.tensor.zero_grad();
    }

    pub fn horizon(&self) -> f64 {
        self.config.horizon
    }

    pub fn grid_size(&self) -> usize {
        self.config.grid_size
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    /// β of grid point `i`.
    pub fn grid_beta(&self, i: usize) -> f64 {
        if i == self.config.grid_size {
            self.config.horizon
        } else {
            self.config.horizon * i as f64 / self.config.grid_size as f64
        }
    }

    pub fn check_beta(&self, beta: f64) -> Result<()> {
        if !(0.0..=self.config.horizon).contains(&beta) {
            return Err(Error::InvalidArgument(format!("beta {beta} outside [0, {}]", self.config.horizon)));
        }
        Ok(())
    }

    pub fn sigma_at(&self, beta: f64) -> f64 {
        lookup(self.log_sigma.tensor.values(), beta, self.config.horizon).value
    }

    pub fn obs_scale_at(&self, beta: f64) -> f64 {
        lookup(self.log_s.tensor.values(), beta, self.config.horizon).value
    }

    pub fn sigma_table(&self) -> Vec<f64> {
        self.log_sigma.tensor.values().iter().map(|v| v.exp()).collect()
    }

    /// Learned σ table as a diffusion schedule. Small decreases that the soft
    /// monotonicity penalty leaves behind are removed by a running maximum.
    pub fn schedule(&self) -> Result<Schedule> {
        let mut sig = self.sigma_table();
        for i in 1..sig.len() {
            sig[i] = sig[i].max(sig[i - 1]);
        }
        Schedule::new(self.config.grid_size, self.config.horizon, sig, ShapeTag::Learned)
    }

    pub fn encode_batch(&self, x: &Tensor, betas: &[f64]) -> Result<Tensor> {
        for &b in betas {
            self.check_beta(b)?;
        }
        self.encoder.forward(x, betas)
    }

    pub fn decode_batch(&self, z: &Tensor, betas: &[f64]) -> Result<Tensor> {
        for &b in betas {
            self.check_beta(b)?;
        }
        self.decoder.forward(z, betas)
    }

    pub fn encode(&self, x: &[f64], beta: f64) -> Result<Vec<f64>> {
        let t = Tensor::matrix(1, x.len(), x.to_vec())?;
        Ok(self.encode_batch(&t, &[beta])?.into_values())
    }

    pub fn decode(&self, z: &[f64], beta: f64) -> Result<Vec<f64>> {
        if z.len() != self.config.latent_dim {
            return Err(Error::DimensionMismatch {
                what: "latent",
                expected: self.config.latent_dim,
                got: z.len(),
            });
        }
        let t = Tensor::matrix(1, z.len(), z.to_vec())?;
        Ok(self.decode_batch(&t, &[beta])?.into_values())
    }

    /// Encoder means of many row-major items at one β.
    pub fn encode_many(&self, rows: &[f64], beta: f64) -> Result<Vec<f64>> {
        self.map_rows(rows, self.config.data_dim, |chunk, n| {
            self.encode_batch(&Tensor::matrix(n, self.config.data_dim, chunk.to_vec())?, &vec![beta; n])
        })
    }

    /// Decoder means of many row-major latents at one β.
    pub fn decode_many(&self, rows: &[f64], beta: f64) -> Result<Vec<f64>> {
        self.map_rows(rows, self.config.latent_dim, |chunk, n| {
            self.decode_batch(&Tensor::matrix(n, self.config.latent_dim, chunk.to_vec())?, &vec![beta; n])
        })
    }

    fn map_rows(&self, rows: &[f64], width: usize, f: impl Fn(&[f64], usize) -> Result<Tensor>) -> Result<Vec<f64>> {
        if !rows.len().is_multiple_of(width) {
            return Err(Error::DimensionMismatch {
                what: "row-major buffer",
                expected: width,
                got: rows.len() % width,
            });
        }
        let mut out = Vec::new();
        for chunk in rows.chunks(256 * width) {
            out.extend(f(chunk, chunk.len() / width)?.into_values());
        }
        Ok(out)
    }

    /// `z_β = f(x, β) + σ_β · noise`.
    pub fn reparameterized_sample(&self, x: &[f64], beta: f64, noise: &[f64]) -> Result<Vec<f64>> {
        if noise.len() != self.config.latent_dim {
            return Err(Error::DimensionMismatch {
                what: "noise",
                expected: self.config.latent_dim,
                got: noise.len(),
            });
        }
        let f = self.encode(x, beta)?;
        let s = self.sigma_at(beta);
        Ok(f.iter().zip(noise).map(|(f, e)| f + s * e).collect())
    }
}

/// `KL(N(f, σ² I) ‖ N(0, I))` in closed form.
pub fn gaussian_kl(f: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let d = f.len() as f64;
    let s2 = sigma * sigma;
    let norm2: f64 = f.iter().map(|v| v * v).sum();
    Ok(0.5 * (norm2 + d * s2 - d - d * s2.ln()))
}

/// `−log N(x | g, s² I)`.
pub fn gaussian_nll(x: &[f64], g: &[f64], s: f64) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum();
    0.5 * d * (LN_2PI + 2.0 * s.ln()) + sq / (2.0 * s * s)
}

/// Terms of the β objective for one example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// negative log-likelihood of the reconstruction
    pub recon: f64,
    pub kl: f64,
    /// `B − β`
    pub recon_weight: f64,
    /// `β`
    pub kl_weight: f64,
    /// `‖x − g‖²`
    pub squared_error: f64,
}

pub fn loss_beta(model: &VaeModel, x: &[f64], beta: f64, noise: &[f64]) -> Result<LossBreakdown> {
    model.check_beta(beta)?;
    if x.len() != model.data_dim() {
        return Err(Error::DimensionMismatch {
            what: "image",
            expected: model.data_dim(),
            got: x.len(),
        });
    }
    let f = model.encode(x, beta)?;
    let z = model.reparameterized_sample(x, beta, noise)?;
    let g = model.decode(&z, beta)?;
    let s = model.obs_scale_at(beta);
    let recon = gaussian_nll(x, &g, s);
    let kl = gaussian_kl(&f, model.sigma_at(beta))?;
    let (rw, kw) = (model.horizon() - beta, beta);
    Ok(LossBreakdown {
        total: rw * recon + kw * kl,
        recon,
        kl,
        recon_weight: rw,
        kl_weight: kw,
        squared_error: x.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum(),
    })
}

/// A minibatch: images, one β per row, and one noise vector per row.
#[derive(Debug, Clone)]
pub struct VaeBatch {
    pub x: Tensor,
    pub betas: Vec<f64>,
    pub noise: Tensor,
}

/// Mean objective over a batch and the per-row breakdowns; gradients of the
/// mean are accumulated into the model's parameters.
pub fn batch_loss_and_grad(model: &mut VaeModel, batch: &VaeBatch) -> Result<(f64, Vec<LossBreakdown>)> {
    let n = batch.betas.len();
    let (dd, ld) = (model.data_dim(), model.latent_dim());
    if batch.x.shape() != [n, dd] || batch.noise.shape() != [n, ld] {
        return Err(Error::ShapeMismatch {
            expected: vec![n, dd, n, ld],
            got: [batch.x.shape(), batch.noise.shape()].concat(),
        });
    }
    for &b in &batch.betas {
        model.check_beta(b)?;
    }
    let horizon = model.horizon();
    let sig_table = model.log_sigma.tensor.values().to_vec();
    let s_table = model.log_s.tensor.values().to_vec();
    let sig: Vec<TableLookup> = batch.betas.iter().map(|&b| lookup(&sig_table, b, horizon)).collect();
    let obs: Vec<TableLookup> = batch.betas.iter().map(|&b| lookup(&s_table, b, horizon)).collect();

    let (f, enc_tape) = model.encoder.forward_recorded(&batch.x, &batch.betas)?;
    let mut z = f.clone();
    for (r, row) in z.values_mut().chunks_mut(ld).enumerate() {
        for (v, e) in row.iter_mut().zip(batch.noise.row(r)) {
            *v += sig[r].value * e;
        }
    }
    let (g, dec_tape) = model.decoder.forward_recorded(&z, &batch.betas)?;

    let nf = n as f64;
    let mut dg = Tensor::zeros(&[n, dd]);
    let mut rows = Vec::with_capacity(n);
    let mut total = 0.0;
    let mut ds_grad = vec![0.0; s_table.len()];
    for r in 0..n {
        let beta = batch.betas[r];
        let (rw, kw) = (horizon - beta, beta);
        let s = obs[r].value;
        let (x, gr) = (batch.x.row(r), g.row(r));
        let sq: f64 = x.iter().zip(gr).map(|(a, b)| (a - b) * (a - b)).sum();
        let recon = 0.5 * dd as f64 * (LN_2PI + 2.0 * s.ln()) + sq / (2.0 * s * s);
        let kl = gaussian_kl(f.row(r), sig[r].value)?;
        let loss = rw * recon + kw * kl;
        total += loss;
        rows.push(LossBreakdown {
            total: loss,
            recon,
            kl,
            recon_weight: rw,
            kl_weight: kw,
            squared_error: sq,
        });
        let c = rw / (s * s * nf);
        for ((d, a), b) in dg.values_mut()[r * dd..(r + 1) * dd].iter_mut().zip(x).zip(gr) {
            *d = c * (b - a);
        }
        let dl_ds = rw * (dd as f64 / s - sq / (s * s * s)) / nf;
        add_table_grad(&mut ds_grad, &obs[r], dl_ds);
    }
    let dz = model.decoder.backward(&dec_tape, &dg, true)?.expect("input gradient requested");

    let mut df = dz.clone();
    let mut dsig_grad = vec![0.0; sig_table.len()];
    for r in 0..n {
        let kw = batch.betas[r] / nf;
        let sigma = sig[r].value;
        let mut dsigma = 0.0;
        for ((d, &fv), (&dzv, &e)) in df.values_mut()[r * ld..(r + 1) * ld]
            .iter_mut()
            .zip(f.row(r))
            .zip(dz.row(r).iter().zip(batch.noise.row(r)))
        {
            *d += kw * fv;
            dsigma += dzv * e;
        }
        dsigma += kw * ld as f64 * (sigma - 1.0 / sigma);
        add_table_grad(&mut dsig_grad, &sig[r], dsigma);
    }
    model.encoder.backward(&enc_tape, &df, false)?;
    for (acc, v) in model.log_sigma.tensor.grad_mut().iter_mut().zip(&dsig_grad) {
        *acc += v;
    }
    for (acc, v) in model.log_s.tensor.grad_mut().iter_mut().zip(&ds_grad) {
        *acc += v;
    }
    Ok((total / nf, rows))
}

/// Monotonicity and terminal-anchor penalties on the σ table; gradients are
/// accumulated into it.
pub fn schedule_penalty(model: &mut VaeModel) -> f64 {
    let (lambda, anchor) = (model.config.monotone_weight, model.config.anchor_weight);
    let logs = model.log_sigma.tensor.values().to_vec();
    let sig: Vec<f64> = logs.iter().map(|v| v.exp()).collect();
    let grad = model.log_sigma.tensor.grad_mut();
    let mut total = 0.0;
    for i in 1..sig.len() {
        let drop = sig[i - 1] - sig[i];
        if drop > 0.0 {
            total += lambda * drop * drop;
            grad[i - 1] += 2.0 * lambda * drop * sig[i - 1];
            grad[i] -= 2.0 * lambda * drop * sig[i];
        }
    }
    if anchor > 0.0 {
        let n = sig.len() - 1;
        let off = sig[n] - 1.0;
        total += anchor * off * off;
        grad[n] += 2.0 * anchor * off * sig[n];
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeLogRow {
    pub step: usize,
    pub bucket: usize,
    /// mean squared reconstruction error per image
    pub recon: f64,
    pub kl: f64,
    pub count: usize,
    pub sigma_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VaeTrainLog {
    pub rows: Vec<VaeLogRow>,
    /// mean objective of every step
    pub losses: Vec<f64>,
}

impl VaeTrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,beta_bucket,recon,kl,sigma_hash\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.6e},{:.6e},{}", r.step, r.bucket, r.recon, r.kl, r.sigma_hash);
        }
        s
    }
}

fn sigma_hash(model: &VaeModel) -> String {
    let mut h = Sha256::new();
    for v in model.log_sigma.tensor.values() {
        h.update(v.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Draw the minibatch of step `step`. Each row has its own random stream, so
/// the batch does not depend on assembly order.
pub fn draw_batch(model: &VaeModel, data: &Dataset, indices: &[usize], step: usize) -> Result<VaeBatch> {
    let cfg = &model.config;
    let (n, dd, ld) = (cfg.batch_size, cfg.data_dim, cfg.latent_dim);
    let mut x = Vec::with_capacity(n * dd);
    let mut betas = Vec::with_capacity(n);
    let mut noise = vec![0.0; n * ld];
    for (r, chunk) in noise.chunks_mut(ld).enumerate() {
        let mut g = rng::stream(cfg.seed ^ STREAM_TAG, step as u64, r as u64);
        let item = indices[g.random_range(0..indices.len())];
        x.extend_from_slice(data.image(item));
        let beta = match cfg.beta_prior {
            BetaPrior::Uniform => g.random_range(0.0..=cfg.horizon),
            BetaPrior::Grid => model.grid_beta(g.random_range(0..=cfg.grid_size)),
        };
        betas.push(beta);
        rng::fill_normal(&mut g, chunk);
    }
    Ok(VaeBatch {
        x: Tensor::matrix(n, dd, x)?,
        betas,
        noise: Tensor::matrix(n, ld, noise)?,
    })
}

/// Run `config.steps` optimizer steps on the items `indices` of `data`.
///
/// On a non-finite loss or gradient the model is restored to the last logged
/// state and [`Error::Diverged`] is returned.
pub fn train_vae(model: &mut VaeModel, data: &Dataset, indices: &[usize]) -> Result<VaeTrainLog> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if data.dim() != model.data_dim() {
        return Err(Error::DimensionMismatch {
            what: "dataset image size",
            expected: model.data_dim(),
            got: data.dim(),
        });
    }
    let cfg = model.config.clone();
    let mut adam = Adam::new(cfg.adam);
    let mut log = VaeTrainLog::default();
    let mut last_good = model.clone();
    let buckets = cfg.log_buckets;
    let mut acc = vec![(0.0, 0.0, 0usize); buckets];

    for step in 0..cfg.steps {
        adam.config.learning_rate = Adam::scheduled_rate(&cfg.adam, step, cfg.steps);
        let batch = draw_batch(model, data, indices, step)?;
        model.zero_grad();
        let (loss, rows) = batch_loss_and_grad(model, &batch)?;
        let penalty = schedule_penalty(model);
        let total = loss + penalty;
        if !total.is_finite() {
            *model = last_good;
            return Err(Error::Diverged {
                step,
                reason: format!("objective is {total}"),
            });
        }
        if let Err(e) = adam.step(&mut model.trainable_mut()) {
            *model = last_good;
            return Err(Error::Diverged {
                step,
                reason: e.to_string(),
            });
        }
        log.losses.push(total);
        for (row, &beta) in rows.iter().zip(&batch.betas) {
            let b = ((beta / cfg.horizon * buckets as f64) as usize).min(buckets - 1);
            acc[b].0 += row.squared_error;
            acc[b].1 += row.kl;
            acc[b].2 += 1;
        }
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            let hash = sigma_hash(model);
            for (b, a) in acc.iter_mut().enumerate() {
                if a.2 > 0 {
                    log.rows.push(VaeLogRow {
                        step: step + 1,
                        bucket: b,
                        recon: a.0 / a.2 as f64,
                        kl: a.1 / a.2 as f64,
                        count: a.2,
                        sigma_hash: hash.clone(),
                    });
                }
                *a = (0.0, 0.0, 0);
            }
            last_good = model.clone();
            log::debug!("vae step {} loss {total:.4}", step + 1);
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> VaeModel {
        VaeModel::new(VaeConfig {
            latent_dim: 2,
            data_dim: 6,
            grid_size: 4,
            hidden: vec![5],
            embed_dim: 4,
            batch_size: 3,
            ..VaeConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(gaussian_kl(&[0.0; 7], 1.0).unwrap(), 0.0);
        assert!((gaussian_kl(&[1.0, 0.0], 1.0).unwrap() - 0.5).abs() < 1e-15);
        let e = std::f64::consts::E;
        assert!((gaussian_kl(&[0.0], e.sqrt()).unwrap() - 0.5 * (e - 2.0)).abs() < 1e-12);
        assert!(gaussian_kl(&[0.0], 0.0).is_err());
    }

    #[test]
    fn tables_start_at_documented_values() {
        let m = tiny();
        let sig = m.sigma_table();
        assert!((sig[0] - 1e-3).abs() < 1e-15);
        assert!((sig[2] - 0.5).abs() < 1e-12);
        assert!((m.obs_scale_at(0.3) - 0.1).abs() < 1e-12);
        assert!((m.sigma_at(0.375) - 0.375).abs() < 1e-12);
    }

    #[test]
    fn endpoint_weights() {
        let m = tiny();
        let x = [0.2; 6];
        let noise = [0.3, -0.1];
        let l0 = loss_beta(&m, &x, 0.0, &noise).unwrap();
        assert_eq!((l0.recon_weight, l0.kl_weight), (1.0, 0.0));
        assert_eq!(l0.total, l0.recon);
        let l1 = loss_beta(&m, &x, 1.0, &noise).unwrap();
        assert_eq!((l1.recon_weight, l1.kl_weight), (0.0, 1.0));
        assert_eq!(l1.total, l1.kl);
        let lh = loss_beta(&m, &x, 0.5, &noise).unwrap();
        assert_eq!((lh.recon_weight, lh.kl_weight), (0.5, 0.5));
        assert!(loss_beta(&m, &x, 1.5, &noise).is_err());
    }

    #[test]
    fn zero_noise_gives_mean() {
        let m = tiny();
        let x = [0.1, 0.4, 0.0, 0.9, 0.3, 0.2];
        assert_eq!(m.reparameterized_sample(&x, 0.6, &[0.0, 0.0]).unwrap(), m.encode(&x, 0.6).unwrap());
        assert!(m.reparameterized_sample(&x, 0.6, &[0.0]).is_err());
    }

    #[test]
    fn batch_matches_single_example_loss() {
        let mut m = tiny();
        let x: Vec<f64> = (0..18).map(|v| (v as f64 * 0.37).sin().abs()).collect();
        let noise: Vec<f64> = (0..6).map(|v| (v as f64 * 1.3).cos()).collect();
        let betas = vec![0.0, 0.41, 1.0];
        let batch = VaeBatch {
            x: Tensor::matrix(3, 6, x.clone()).unwrap(),
            betas: betas.clone(),
            noise: Tensor::matrix(3, 2, noise.clone()).unwrap(),
        };
        let (mean, rows) = batch_loss_and_grad(&mut m, &batch).unwrap();
        let mut want = 0.0;
        for r in 0..3 {
            let l = loss_beta(&m, &x[r * 6..(r + 1) * 6], betas[r], &noise[r * 2..(r + 1) * 2]).unwrap();
            assert!((l.total - rows[r].total).abs() < 1e-9 * l.total.abs().max(1.0));
            want += l.total / 3.0;
        }
        assert!((mean - want).abs() < 1e-9 * want.abs().max(1.0));
    }

    #[test]
    fn schedule_is_monotone() {
        let mut m = tiny();
        m.log_sigma.tensor.values_mut()[3] = (0.1f64).ln();
        let s = m.schedule().unwrap();
        assert!(s.sigmas().windows(2).all(|w| w[1] >= w[0]));
        m.zero_grad();
        assert!(schedule_penalty(&mut m) > 0.0);
    }
}
