//! Time-conditioned multilayer network with explicit reverse-mode gradients.
//!
//! Each hidden block is
//!
//! ```text
//! h ← Dense(h)
//! h ← GroupNorm(h)            (optional)
//! h ← h + Proj(Sigmoid(temb))
//! h ← act(h)
//! ```
//!
//! followed by a linear output layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::embed::TimeEmbedding;
use crate::nn::tensor::{gemm, Param, Tensor};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Sigmoid,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Layer list of a [`ConditionedNetwork`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub embed_dim: usize,
    /// Groups of the per-block GroupNorm; 0 disables normalization.
    pub norm_groups: usize,
    pub activation: Activation,
    pub horizon: f64,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument("embed_dim must be positive and even".into()));
        }
        if self.norm_groups > 0 {
            if let Some(h) = self.hidden.iter().find(|&&h| h % self.norm_groups != 0) {
                return Err(Error::InvalidArgument(format!(
                    "hidden width {h} not divisible by {} norm groups",
                    self.norm_groups
                )));
            }
        }
        Ok(())
    }

    pub fn embedding(&self) -> TimeEmbedding {
        TimeEmbedding::new(self.embed_dim, self.horizon).expect("validated embed_dim")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BlockIdx {
    w: usize,
    b: usize,
    gamma: Option<usize>,
    beta: Option<usize>,
    tw: usize,
    tb: usize,
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Vec<f64>,
    /// normalized activations and per-(sample, group) inverse std
    norm: Option<(Vec<f64>, Vec<f64>)>,
    pre_act: Vec<f64>,
}

/// Activations recorded by [`ConditionedNetwork::forward_recorded`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    batch: usize,
    time_features: Vec<f64>,
    blocks: Vec<BlockCache>,
    last_hidden: Vec<f64>,
}

impl Tape {
    pub fn is_empty(&self) -> bool {
        self.batch == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedNetwork {
    arch: Architecture,
    params: Vec<Param>,
    blocks: Vec<BlockIdx>,
    out_w: usize,
    out_b: usize,
}

impl ConditionedNetwork {
    /// Fan-in scaled uniform weights, zero biases, unit norm gains; the draw
    /// for each parameter depends only on `(seed, prefix, name)`.
    pub fn new(arch: Architecture, seed: u64, prefix: &str) -> Result<Self> {
        arch.validate()?;
        let mut params = Vec::new();
        let mut blocks = Vec::new();
        let mut fan_in = arch.input_dim;

        let push = |params: &mut Vec<Param>, name: String, shape: &[usize], init: Init| -> usize {
            let mut t = Tensor::zeros(shape);
            match init {
                Init::Uniform(bound) => {
                    let mut r = rng::stream(seed, name_hash(&name), 0x1A17);
                    for v in t.values_mut() {
                        *v = r.random_range(-bound..bound);
                    }
                }
                Init::Ones => t.values_mut().iter_mut().for_each(|v| *v = 1.0),
                Init::Zeros => {}
            }
            params.push(Param::new(name, t));
            params.len() - 1
        };

        for (k, &width) in arch.hidden.iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = push(
                &mut params,
                format!("{prefix}.block{k}.dense.weight"),
                &[fan_in, width],
                Init::Uniform(bound),
            );
            let b = push(&mut params, format!("{prefix}.block{k}.dense.bias"), &[width], Init::Zeros);
            let (gamma, beta) = if arch.norm_groups > 0 {
                (
                    Some(push(&mut params, format!("{prefix}.block{k}.norm.gamma"), &[width], Init::Ones)),
                    Some(push(&mut params, format!("{prefix}.block{k}.norm.beta"), &[width], Init::Zeros)),
                )
            } else {
                (None, None)
            };
            let tbound = 1.0 / (arch.embed_dim as f64).sqrt();
            let tw = push(
                &mut params,
                format!("{prefix}.block{k}.time.weight"),
                &[arch.embed_dim, width],
                Init::Uniform(tbound),
            );
            let tb = push(&mut params, format!("{prefix}.block{k}.time.bias"), &[width], Init::Zeros);
            blocks.push(BlockIdx { w, b, gamma, beta, tw, tb });
            fan_in = width;
        }
        let bound = 1.0 / (fan_in as f64).sqrt();
        let out_w = push(
            &mut params,
            format!("{prefix}.out.weight"),
            &[fan_in, arch.output_dim],
            Init::Uniform(bound),
        );
        let out_b = push(&mut params, format!("{prefix}.out.bias"), &[arch.output_dim], Init::Zeros);
        Ok(ConditionedNetwork {
            arch,
            params,
            blocks,
            out_w,
            out_b,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Replace parameter values from a checkpoint; names and shapes must match.
    pub fn load_params(&mut self, loaded: &[Param]) -> Result<()> {
        if loaded.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, got {}",
                self.params.len(),
                loaded.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(loaded) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint tensor `{}` {:?} does not match `{}` {:?}",
                    src.name,
                    src.tensor.shape(),
                    dst.name,
                    dst.tensor.shape()
                )));
            }
            dst.tensor.values_mut().copy_from_slice(src.tensor.values());
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Inference pass. `t` holds one condition value per row of `x`.
    pub fn forward(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        self.run(x, t, None)
    }

    /// Forward pass that records what [`backward`](Self::backward) needs.
    pub fn forward_recorded(&self, x: &Tensor, t: &[f64]) -> Result<(Tensor, Tape)> {
        let mut tape = Tape::default();
        let out = self.run(x, t, Some(&mut tape))?;
        Ok((out, tape))
    }

    fn value(&self, idx: usize) -> &[f64] {
        self.params[idx].tensor.values()
    }

    fn time_features(&self, t: &[f64]) -> Vec<f64> {
        let emb = self.arch.embedding();
        let e = self.arch.embed_dim;
        let mut out = vec![0.0; t.len() * e];
        for (row, &tv) in out.chunks_mut(e).zip(t) {
            emb.embed_into(tv, row);
            row.iter_mut().for_each(|v| *v = sigmoid(*v));
        }
        out
    }

    fn run(&self, x: &Tensor, t: &[f64], tape: Option<&mut Tape>) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.arch.input_dim {
            return Err(Error::ShapeMismatch {
                expected: vec![x.shape().first().copied().unwrap_or(0), self.arch.input_dim],
                got: x.shape().to_vec(),
            });
        }
        let batch = x.rows();
        if t.len() != batch {
            return Err(Error::DimensionMismatch {
                what: "condition values",
                expected: batch,
                got: t.len(),
            });
        }
        let e = self.arch.embed_dim;
        let tf = self.time_features(t);
        let mut h = x.values().to_vec();
        let mut fan_in = self.arch.input_dim;
        let mut caches = Vec::with_capacity(self.blocks.len());

        for (blk, &width) in self.blocks.iter().zip(&self.arch.hidden) {
            let mut a = vec![0.0; batch * width];
            for row in a.chunks_mut(width) {
                row.copy_from_slice(self.value(blk.b));
            }
            gemm(batch, fan_in, width, 1.0, &h, false, self.value(blk.w), false, 1.0, &mut a);

            let norm = match (blk.gamma, blk.beta) {
                (Some(g), Some(b)) => Some(group_norm_forward(
                    &mut a,
                    batch,
                    width,
                    self.arch.norm_groups,
                    self.value(g),
                    self.value(b),
                )),
                _ => None,
            };

            for row in a.chunks_mut(width) {
                for (v, &bias) in row.iter_mut().zip(self.value(blk.tb)) {
                    *v += bias;
                }
            }
            gemm(batch, e, width, 1.0, &tf, false, self.value(blk.tw), false, 1.0, &mut a);

            let act = self.arch.activation;
            let out: Vec<f64> = a.iter().map(|&v| act.apply(v)).collect();
            if tape.is_some() {
                caches.push(BlockCache {
                    input: h,
                    norm,
                    pre_act: a,
                });
            }
            h = out;
            fan_in = width;
        }

        let od = self.arch.output_dim;
        let mut out = vec![0.0; batch * od];
        for row in out.chunks_mut(od) {
            row.copy_from_slice(self.value(self.out_b));
        }
        gemm(batch, fan_in, od, 1.0, &h, false, self.value(self.out_w), false, 1.0, &mut out);

        if let Some(tape) = tape {
            *tape = Tape {
                batch,
                time_features: tf,
                blocks: caches,
                last_hidden: h,
            };
        }
        Tensor::matrix(batch, od, out)
    }

    /// Accumulate parameter gradients for `grad_out = ∂L/∂output` into each
    /// parameter's gradient buffer. Returns `∂L/∂input` when requested.
    pub fn backward(&mut self, tape: &Tape, grad_out: &Tensor, want_input_grad: bool) -> Result<Option<Tensor>> {
        if tape.is_empty() {
            return Err(Error::NoForwardRecord);
        }
        let batch = tape.batch;
        let od = self.arch.output_dim;
        if grad_out.len() != batch * od {
            return Err(Error::ShapeMismatch {
                expected: vec![batch, od],
                got: grad_out.shape().to_vec(),
            });
        }
        let e = self.arch.embed_dim;
        let g = grad_out.values();
        let last_width = *self.arch.hidden.last().unwrap_or(&self.arch.input_dim);

        // output layer
        {
            let gw = self.params[self.out_w].tensor.grad_mut();
            gemm(last_width, batch, od, 1.0, &tape.last_hidden, true, g, false, 1.0, gw);
        }
        accumulate_bias(self.params[self.out_b].tensor.grad_mut(), g, od);
        let need_dh = !self.blocks.is_empty() || want_input_grad;
        let mut dh = vec![0.0; batch * last_width];
        if need_dh {
            gemm(
                batch,
                od,
                last_width,
                1.0,
                g,
                false,
                self.params[self.out_w].tensor.values(),
                true,
                0.0,
                &mut dh,
            );
        }

        let mut fan_ins: Vec<usize> = vec![self.arch.input_dim];
        fan_ins.extend(self.arch.hidden.iter().copied());

        for k in (0..self.blocks.len()).rev() {
            let blk = self.blocks[k];
            let width = self.arch.hidden[k];
            let fan_in = fan_ins[k];
            let cache = &tape.blocks[k];
            let act = self.arch.activation;
            let mut dn: Vec<f64> = dh.iter().zip(&cache.pre_act).map(|(&d, &x)| d * act.derivative(x)).collect();

            gemm(
                e,
                batch,
                width,
                1.0,
                &tape.time_features,
                true,
                &dn,
                false,
                1.0,
                self.params[blk.tw].tensor.grad_mut(),
            );
            accumulate_bias(self.params[blk.tb].tensor.grad_mut(), &dn, width);

            if let (Some(gi), Some(bi), Some((xhat, inv_std))) = (blk.gamma, blk.beta, cache.norm.as_ref()) {
                let gamma = self.params[gi].tensor.values().to_vec();
                let (dgamma, dbeta) = {
                    let mut dg = vec![0.0; width];
                    let mut db = vec![0.0; width];
                    for (drow, xrow) in dn.chunks(width).zip(xhat.chunks(width)) {
                        for c in 0..width {
                            dg[c] += drow[c] * xrow[c];
                            db[c] += drow[c];
                        }
                    }
                    (dg, db)
                };
                add_into(self.params[gi].tensor.grad_mut(), &dgamma);
                add_into(self.params[bi].tensor.grad_mut(), &dbeta);
                group_norm_backward(&mut dn, xhat, inv_std, &gamma, batch, width, self.arch.norm_groups);
            }

            gemm(
                fan_in,
                batch,
                width,
                1.0,
                &cache.input,
                true,
                &dn,
                false,
                1.0,
                self.params[blk.w].tensor.grad_mut(),
            );
            accumulate_bias(self.params[blk.b].tensor.grad_mut(), &dn, width);

            if k > 0 || want_input_grad {
                let mut next = vec![0.0; batch * fan_in];
                gemm(
                    batch,
                    width,
                    fan_in,
                    1.0,
                    &dn,
                    false,
                    self.params[blk.w].tensor.values(),
                    true,
                    0.0,
                    &mut next,
                );
                dh = next;
            }
        }

        if want_input_grad {
            Ok(Some(Tensor::matrix(batch, self.arch.input_dim, dh)?))
        } else {
            Ok(None)
        }
    }
}

enum Init {
    Uniform(f64),
    Ones,
    Zeros,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn accumulate_bias(grad: &mut [f64], g: &[f64], width: usize) {
    for row in g.chunks(width) {
        for (acc, &v) in grad.iter_mut().zip(row) {
            *acc += v;
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const NORM_EPS: f64 = 1e-5;

/// In-place GroupNorm over each row; returns (x̂, inverse std per group).
fn group_norm_forward(a: &mut [f64], batch: usize, width: usize, groups: usize, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let gs = width / groups;
    let mut xhat = vec![0.0; batch * width];
    let mut inv = vec![0.0; batch * groups];
    for r in 0..batch {
        for g in 0..groups {
            let lo = r * width + g * gs;
            let seg = &a[lo..lo + gs];
            let mean = seg.iter().sum::<f64>() / gs as f64;
            let var = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / gs as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv[r * groups + g] = is;
            for j in 0..gs {
                let c = g * gs + j;
                let xh = (a[lo + j] - mean) * is;
                xhat[lo + j] = xh;
                a[lo + j] = gamma[c] * xh + beta[c];
            }
        }
    }
    (xhat, inv)
}

/// Turns `dy` (in place) into `dx`.
fn group_norm_backward(d: &mut [f64], xhat: &[f64], inv: &[f64], gamma: &[f64], batch: usize, width: usize, groups: usize) {
    let gs = width / groups;
    let n = gs as f64;
    for r in 0..batch {
        for g in 0..groups {
            let lo = r * width + g * gs;
            let mut mean_dx = 0.0;
            let mut mean_dxx = 0.0;
            for j in 0..gs {
                let dxh = d[lo + j] * gamma[g * gs + j];
                mean_dx += dxh;
                mean_dxx += dxh * xhat[lo + j];
            }
            mean_dx /= n;
            mean_dxx /= n;
            let is = inv[r * groups + g];
            for j in 0..gs {
                let dxh = d[lo + j] * gamma[g * gs + j];
                d[lo + j] = is * (dxh - mean_dx - xhat[lo + j] * mean_dxx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(norm_groups: usize, activation: Activation) -> Architecture {
        Architecture {
            input_dim: 3,
            hidden: vec![4, 6],
            output_dim: 2,
            embed_dim: 4,
            norm_groups,
            activation,
            horizon: 1.0,
        }
    }

    fn input(batch: usize, dim: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, 0, 0);
        Tensor::matrix(batch, dim, (0..batch * dim).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_network_gives_zero_output() {
        let mut net = ConditionedNetwork::new(arch(0, Activation::Tanh), 1, "n").unwrap();
        for p in net.params_mut() {
            p.tensor.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let y = net.forward(&input(5, 3, 2), &[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        assert!(y.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let net = ConditionedNetwork::new(arch(2, Activation::Silu), 7, "n").unwrap();
        let x = input(4, 3, 3);
        let t = [0.0, 0.3, 0.6, 1.0];
        assert_eq!(net.forward(&x, &t).unwrap(), net.forward(&x, &t).unwrap());
        let net2 = ConditionedNetwork::new(arch(2, Activation::Silu), 7, "n").unwrap();
        assert_eq!(net, net2);
    }

    #[test]
    fn forward_finite_over_input_range() {
        let net = ConditionedNetwork::new(arch(2, Activation::Silu), 9, "n").unwrap();
        let mut xs = Vec::new();
        for i in 0..=20 {
            let v = -10.0 + i as f64;
            xs.extend([v, -v, 0.5 * v]);
        }
        let x = Tensor::matrix(21, 3, xs).unwrap();
        let t: Vec<f64> = (0..21).map(|i| i as f64 / 20.0).collect();
        let y = net.forward(&x, &t).unwrap();
        assert!(y.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn shape_errors() {
        let net = ConditionedNetwork::new(arch(0, Activation::Silu), 1, "n").unwrap();
        assert!(net.forward(&input(2, 4, 1), &[0.0, 0.0]).is_err());
        assert!(net.forward(&input(2, 3, 1), &[0.0]).is_err());
        assert!(ConditionedNetwork::new(
            Architecture {
                embed_dim: 3,
                ..arch(0, Activation::Silu)
            },
            1,
            "n"
        )
        .is_err());
        assert!(ConditionedNetwork::new(arch(4, Activation::Silu), 1, "n").is_err());
    }

    #[test]
    fn backward_requires_forward() {
        let mut net = ConditionedNetwork::new(arch(0, Activation::Silu), 1, "n").unwrap();
        let g = Tensor::zeros(&[2, 2]);
        assert!(matches!(net.backward(&Tape::default(), &g, false), Err(Error::NoForwardRecord)));
    }

    #[test]
    fn zero_loss_gradient_gives_zero_gradients() {
        let mut net = ConditionedNetwork::new(arch(2, Activation::Silu), 1, "n").unwrap();
        let (_, tape) = net.forward_recorded(&input(3, 3, 5), &[0.1, 0.5, 0.9]).unwrap();
        net.backward(&tape, &Tensor::zeros(&[3, 2]), false).unwrap();
        for p in net.params() {
            assert!(p.tensor.grad().unwrap().iter().all(|&g| g == 0.0), "{}", p.name);
        }
    }

    #[test]
    fn gradient_scales_linearly() {
        let x = input(3, 3, 5);
        let t = [0.1, 0.5, 0.9];
        let mut g1 = Vec::new();
        let mut g2 = Vec::new();
        for (scale, out) in [(1.0, &mut g1), (3.0, &mut g2)] {
            let mut net = ConditionedNetwork::new(arch(2, Activation::Silu), 1, "n").unwrap();
            let (y, tape) = net.forward_recorded(&x, &t).unwrap();
            let go = Tensor::matrix(3, 2, y.values().iter().map(|v| scale * v).collect()).unwrap();
            net.backward(&tape, &go, false).unwrap();
            for p in net.params() {
                out.extend_from_slice(p.tensor.grad().unwrap());
            }
        }
        for (a, b) in g1.iter().zip(&g2) {
            assert!((3.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}
