//! Latent-space exploration: principal directions, attribute manipulation
//! and spherical interpolation.

use std::fmt::Write as _;
use std::path::Path;

use crate::diffusion::{denoise_from, DenoiserModel};
use crate::error::{Error, Result};
use crate::math::schedule::fmt_f64;
use crate::nn::checkpoint::write_atomic;
use crate::vae::VaeModel;

/// Orthonormal directions ordered by decreasing explained variance.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionBasis {
    pub directions: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
}

impl DirectionBasis {
    pub fn dim(&self) -> usize {
        self.directions.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    /// Standard deviation of the data along direction `k`.
    pub fn std(&self, k: usize) -> f64 {
        self.explained_variance[k].sqrt()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("dirs v1 dim={} count={}\n", self.dim(), self.len());
        for (v, dir) in self.explained_variance.iter().zip(&self.directions) {
            let row: Vec<String> = std::iter::once(*v).chain(dir.iter().copied()).map(fmt_f64).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Parse(format!("dirs: {m}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file"))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("dirs") || fields.next() != Some("v1") {
            return Err(bad("missing 'dirs v1' header"));
        }
        let mut dim = None;
        let mut count = None;
        for f in fields {
            let (k, v) = f.split_once('=').ok_or_else(|| bad("malformed header field"))?;
            if k == "config" {
                continue;
            }
            let v: usize = v.parse().map_err(|_| bad("header value is not an integer"))?;
            match k {
                "dim" => dim = Some(v),
                "count" => count = Some(v),
                _ => return Err(bad(&format!("unknown header key {k}"))),
            }
        }
        let (dim, count) = (dim.ok_or_else(|| bad("missing dim"))?, count.ok_or_else(|| bad("missing count"))?);
        let mut basis = DirectionBasis {
            directions: Vec::with_capacity(count),
            explained_variance: Vec::with_capacity(count),
        };
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| bad("non-numeric entry")))
                .collect::<Result<_>>()?;
            if vals.len() != dim + 1 {
                return Err(bad("row length does not match dim"));
            }
            basis.explained_variance.push(vals[0]);
            basis.directions.push(vals[1..].to_vec());
        }
        if basis.len() != count {
            return Err(bad("row count does not match header"));
        }
        Ok(basis)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Eigen-decomposition of a symmetric `d × d` matrix by cyclic Jacobi
/// rotations. Returns eigenvalues and column eigenvectors (row-major `d × d`).
fn symmetric_eigen(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j].powi(2))
            .sum();
        if off.sqrt() <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k * d + p], a[k * d + q]);
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p * d + k], a[q * d + k]);
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[k * d + p], v[k * d + q]);
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..d).map(|i| a[i * d + i]).collect(), v)
}

/// Principal directions of the centered covariance of row-major `latents`.
/// Signs are fixed so the first nonzero coordinate is positive.
pub fn pca_directions(latents: &[f64], d: usize) -> Result<DirectionBasis> {
    if d == 0 || !latents.len().is_multiple_of(d) {
        return Err(Error::InvalidArgument("latent table does not form rows".into()));
    }
    let n = latents.len() / d;
    if n <= d {
        return Err(Error::InvalidArgument(format!("need more than {d} rows, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for row in latents.chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for row in latents.chunks(d) {
        for i in 0..d {
            let ci = row[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += ci * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= (n - 1) as f64;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let (vals, vecs) = symmetric_eigen(cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let top = vals[order[0]].max(0.0);
    let mut basis = DirectionBasis {
        directions: Vec::new(),
        explained_variance: Vec::new(),
    };
    for &k in &order {
        if vals[k] <= 1e-12 * top || top == 0.0 {
            continue;
        }
        let mut dir: Vec<f64> = (0..d).map(|i| vecs[i * d + k]).collect();
        if dir.iter().find(|v| v.abs() > 1e-12).is_some_and(|v| *v < 0.0) {
            dir.iter_mut().for_each(|v| *v = -*v);
        }
        basis.directions.push(dir);
        basis.explained_variance.push(vals[k]);
    }
    if basis.len() < d {
        log::warn!("latent covariance has rank {} < {d}; basis truncated", basis.len());
    }
    Ok(basis)
}

fn check_beta_step(vae: &VaeModel, denoiser: &DenoiserModel, i_beta: usize) -> Result<f64> {
    if vae.latent_dim() != denoiser.dim() {
        return Err(Error::DimensionMismatch {
            what: "VAE latent",
            expected: denoiser.dim(),
            got: vae.latent_dim(),
        });
    }
    denoiser.schedule.check_step(i_beta)?;
    Ok(denoiser.schedule.time(i_beta))
}

/// Encode at step `i_beta`, shift by `alpha · direction`, denoise to `β = 0`
/// and decode. A non-unit direction is normalized with a warning.
pub fn manipulate(
    vae: &VaeModel,
    denoiser: &DenoiserModel,
    x: &[f64],
    direction: &[f64],
    alpha: f64,
    i_beta: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let beta = check_beta_step(vae, denoiser, i_beta)?;
    if direction.len() != vae.latent_dim() {
        return Err(Error::DimensionMismatch {
            what: "direction",
            expected: vae.latent_dim(),
            got: direction.len(),
        });
    }
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::InvalidArgument("direction has zero or non-finite norm".into()));
    }
    if (norm - 1.0).abs() > 1e-8 {
        log::warn!("direction norm {norm:.6} is not 1; normalizing");
    }
    let mut z = vae.encode(x, beta)?;
    z.iter_mut().zip(direction).for_each(|(z, u)| *z += alpha * u / norm);
    let z0 = denoise_from(denoiser, &z, i_beta, seed)?;
    vae.decode(&z0, 0.0)
}

/// Spherical interpolation between `z1` and `z2`, linear when the angle
/// between them is below 1e-6.
pub fn slerp(z1: &[f64], z2: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if z1.len() != z2.len() {
        return Err(Error::DimensionMismatch {
            what: "slerp endpoint",
            expected: z1.len(),
            got: z2.len(),
        });
    }
    let n1 = z1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2 = z2.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::InvalidArgument("slerp of a zero vector".into()));
    }
    let cos = (z1.iter().zip(z2).map(|(a, b)| a * b).sum::<f64>() / (n1 * n2)).clamp(-1.0, 1.0);
    let omega = cos.acos();
    if omega < 1e-6 {
        return Ok(z1.iter().zip(z2).map(|(a, b)| (1.0 - alpha) * a + alpha * b).collect());
    }
    let s = omega.sin();
    let (w1, w2) = (((1.0 - alpha) * omega).sin() / s, (alpha * omega).sin() / s);
    Ok(z1.iter().zip(z2).map(|(a, b)| w1 * a + w2 * b).collect())
}

/// Encode both images at step `i_beta`, slerp the coordinates in `dims`
/// (as one sub-vector), keep `x1`'s other coordinates, denoise and decode.
#[allow(clippy::too_many_arguments)]
pub fn interpolate(
    vae: &VaeModel,
    denoiser: &DenoiserModel,
    x1: &[f64],
    x2: &[f64],
    alpha: f64,
    dims: &[usize],
    i_beta: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let beta = check_beta_step(vae, denoiser, i_beta)?;
    let d = vae.latent_dim();
    if let Some(&j) = dims.iter().find(|&&j| j >= d) {
        return Err(Error::InvalidArgument(format!("dimension {j} out of range for d = {d}")));
    }
    let z1 = vae.encode(x1, beta)?;
    let mut z = z1.clone();
    if dims.is_empty() {
        log::warn!("no dimensions selected; returning the reconstruction of x1");
    } else {
        let z2 = vae.encode(x2, beta)?;
        let a: Vec<f64> = dims.iter().map(|&j| z1[j]).collect();
        let b: Vec<f64> = dims.iter().map(|&j| z2[j]).collect();
        for (&j, v) in dims.iter().zip(slerp(&a, &b, alpha)?) {
            z[j] = v;
        }
    }
    let z0 = denoise_from(denoiser, &z, i_beta, seed)?;
    vae.decode(&z0, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_diagonalizes() {
        let a = vec![4.0, 1.0, 0.5, 1.0, 3.0, -0.2, 0.5, -0.2, 1.0];
        let (vals, v) = symmetric_eigen(a.clone(), 3);
        for k in 0..3 {
            for i in 0..3 {
                let av: f64 = (0..3).map(|j| a[i * 3 + j] * v[j * 3 + k]).sum();
                assert!((av - vals[k] * v[i * 3 + k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dirs_round_trip() {
        let b = DirectionBasis {
            directions: vec![vec![0.6, 0.8], vec![0.8, -0.6]],
            explained_variance: vec![2.5, 0.1],
        };
        assert_eq!(DirectionBasis::from_text(&b.to_text()).unwrap(), b);
        assert!(DirectionBasis::from_text("dirs v1 dim=2 count=3\n1 0 1\n").is_err());
    }
}
