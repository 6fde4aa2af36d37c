//! Disentanglement and information metrics.
//!
//! Mutual information uses a plug-in estimate on equal-frequency bins of the
//! code. Bins are assigned from the midrank of each group of tied values, so
//! tied codes always share a bin and reversing a code's order mirrors its bin
//! assignment.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::vae::{gaussian_kl, VaeModel};

pub const DEFAULT_BINS: usize = 20;
pub const DEFAULT_CAPTURE_THRESHOLD: f64 = 0.75;
/// Final penalty of the L1 path used by [`dci_disentanglement`], on
/// standardized codes.
pub const DCI_LAMBDA: f64 = 0.05;

/// Codes, factor labels and binary attributes of the same items.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationTable {
    n: usize,
    d: usize,
    codes: Vec<f64>,
    factors: Vec<Vec<usize>>,
    attributes: Vec<Vec<bool>>,
}

impl RepresentationTable {
    /// `codes` is `n × d` row-major; `factors` and `attributes` hold one row per item.
    pub fn new(codes: Vec<f64>, d: usize, factors: Vec<Vec<usize>>, attributes: Vec<Vec<bool>>) -> Result<Self> {
        if d == 0 || !codes.len().is_multiple_of(d) {
            return Err(Error::InvalidArgument(format!(
                "{} code values do not split into rows of {d}",
                codes.len()
            )));
        }
        let n = codes.len() / d;
        for (what, rows) in [("factor rows", factors.len()), ("attribute rows", attributes.len())] {
            if rows != n && rows != 0 {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: n,
                    got: rows,
                });
            }
        }
        let k = factors.first().map_or(0, Vec::len);
        if factors.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidArgument("ragged factor rows".into()));
        }
        let a = attributes.first().map_or(0, Vec::len);
        if attributes.iter().any(|r| r.len() != a) {
            return Err(Error::InvalidArgument("ragged attribute rows".into()));
        }
        Ok(RepresentationTable {
            n,
            d,
            codes,
            factors,
            attributes,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn code_dim(&self) -> usize {
        self.d
    }

    pub fn n_factors(&self) -> usize {
        self.factors.first().map_or(0, Vec::len)
    }

    pub fn n_attributes(&self) -> usize {
        self.attributes.first().map_or(0, Vec::len)
    }

    pub fn code_column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.codes[i * self.d + j]).collect()
    }

    pub fn factor_column(&self, k: usize) -> Vec<usize> {
        self.factors.iter().map(|r| r[k]).collect()
    }

    pub fn attribute_column(&self, a: usize) -> Vec<bool> {
        self.attributes.iter().map(|r| r[a]).collect()
    }
}

/// Equal-frequency bin of every value.
pub fn quantile_bins(values: &[f64], n_bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut bins = vec![0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let mid = 0.5 * (start + end - 1) as f64;
        let bin = (((mid + 0.5) * n_bins as f64 / n as f64) as usize).min(n_bins - 1);
        for &i in &order[start..end] {
            bins[i] = bin;
        }
        start = end;
    }
    bins
}

fn dense_labels<T: Ord + Copy>(labels: &[T]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    for &l in labels {
        let next = map.len();
        map.entry(l).or_insert(next);
    }
    (labels.iter().map(|l| map[l]).collect(), map.len())
}

/// Plug-in entropy (nats) of integer labels.
pub fn discrete_entropy(labels: &[usize]) -> f64 {
    let (dense, k) = dense_labels(labels);
    let mut counts = vec![0usize; k];
    for &l in &dense {
        counts[l] += 1;
    }
    let n = labels.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn plug_in_mi(a: &[usize], ka: usize, b: &[usize], kb: usize) -> f64 {
    let n = a.len() as f64;
    let mut joint = vec![0usize; ka * kb];
    let mut ma = vec![0usize; ka];
    let mut mb = vec![0usize; kb];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * kb + y] += 1;
        ma[x] += 1;
        mb[y] += 1;
    }
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let c = joint[x * kb + y];
            if c > 0 {
                mi += c as f64 / n * ((c as f64 * n) / (ma[x] as f64 * mb[y] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

/// MI (nats) between a binned code column and a factor column.
pub fn discrete_mutual_information(code: &[f64], factor: &[usize], n_bins: usize) -> Result<f64> {
    if n_bins < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {n_bins}")));
    }
    if code.len() != factor.len() {
        return Err(Error::DimensionMismatch {
            what: "factor column",
            expected: code.len(),
            got: factor.len(),
        });
    }
    let (f, kf) = dense_labels(factor);
    if kf < 2 {
        return Err(Error::InvalidArgument("factor column is constant".into()));
    }
    let bins = quantile_bins(code, n_bins);
    Ok(plug_in_mi(&bins, n_bins, &f, kf))
}

/// Code × factor MI matrix, row-major `d × K`.
pub fn mutual_information_matrix(table: &RepresentationTable, n_bins: usize) -> Result<Vec<f64>> {
    let (d, k) = (table.code_dim(), table.n_factors());
    let mut out = vec![0.0; d * k];
    let factors: Vec<Vec<usize>> = (0..k).map(|f| table.factor_column(f)).collect();
    for j in 0..d {
        let col = table.code_column(j);
        for (f, fc) in factors.iter().enumerate() {
            out[j * k + f] = discrete_mutual_information(&col, fc, n_bins)?;
        }
    }
    Ok(out)
}

/// Mutual information gap averaged over factors.
pub fn mig(table: &RepresentationTable, n_bins: usize) -> Result<f64> {
    let (d, k) = (table.code_dim(), table.n_factors());
    if d < 2 {
        return Err(Error::InvalidArgument(format!("MIG needs at least 2 codes, got {d}")));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("MIG needs at least one factor".into()));
    }
    let mi = mutual_information_matrix(table, n_bins)?;
    let mut total = 0.0;
    for f in 0..k {
        let mut col: Vec<f64> = (0..d).map(|j| mi[j * k + f]).collect();
        col.sort_by(|a, b| b.total_cmp(a));
        let h = discrete_entropy(&table.factor_column(f));
        total += (col[0] - col[1]) / h;
    }
    Ok((total / k as f64).clamp(0.0, 1.0))
}

fn standardize(col: &mut [f64]) -> bool {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var <= 1e-24 {
        col.iter_mut().for_each(|v| *v = 0.0);
        return false;
    }
    let sd = var.sqrt();
    col.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    true
}

/// Lasso `min (1/2n)‖y − Xw‖² + λ‖w‖₁` on standardized columns of `x`
/// (column-major, `d` columns of length `n`) and centered `y`, solved by
/// cyclic coordinate descent along a geometric path from `λ_max` to `lambda`.
fn lasso_path(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Vec<f64> {
    let n = y.len() as f64;
    let d = x.len();
    let corr: Vec<f64> = x.iter().map(|c| c.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n).collect();
    let lmax = corr.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let mut w = vec![0.0; d];
    if lmax <= lambda {
        return w;
    }
    let mut resid = y.to_vec();
    let steps = 10;
    for s in 0..=steps {
        let lam = lmax * (lambda / lmax).powf(s as f64 / steps as f64);
        for _ in 0..200 {
            let mut max_delta = 0.0f64;
            for j in 0..d {
                let col = &x[j];
                let rho = col.iter().zip(&resid).map(|(a, r)| a * r).sum::<f64>() / n + w[j];
                let new = soft_threshold(rho, lam);
                let delta = new - w[j];
                if delta != 0.0 {
                    for (r, a) in resid.iter_mut().zip(col) {
                        *r -= delta * a;
                    }
                    w[j] = new;
                    max_delta = max_delta.max(delta.abs());
                }
            }
            if max_delta < 1e-9 {
                break;
            }
        }
    }
    w
}

fn soft_threshold(v: f64, lam: f64) -> f64 {
    if v > lam {
        v - lam
    } else if v < -lam {
        v + lam
    } else {
        0.0
    }
}

/// Importance matrix `R[j, k]` (row-major `d × K`): absolute L1-linear
/// coefficient mass of code `j` over the one-hot classes of factor `k`.
pub fn dci_importance(table: &RepresentationTable, lambda: f64) -> Vec<f64> {
    let (d, k, n) = (table.code_dim(), table.n_factors(), table.len());
    let x: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let mut c = table.code_column(j);
            standardize(&mut c);
            c
        })
        .collect();
    let mut r = vec![0.0; d * k];
    for f in 0..k {
        let (labels, classes) = dense_labels(&table.factor_column(f));
        for c in 0..classes {
            let mut y: Vec<f64> = labels.iter().map(|&l| (l == c) as u8 as f64).collect();
            let mean = y.iter().sum::<f64>() / n as f64;
            y.iter_mut().for_each(|v| *v -= mean);
            for (j, w) in lasso_path(&x, &y, lambda).iter().enumerate() {
                r[j * k + f] += w.abs();
            }
        }
    }
    r
}

/// DCI disentanglement with entropy base `K`.
pub fn dci_disentanglement(table: &RepresentationTable) -> Result<f64> {
    let (d, k) = (table.code_dim(), table.n_factors());
    if k < 2 {
        return Err(Error::InvalidArgument(format!("DCI needs at least 2 factors, got {k}")));
    }
    let r = dci_importance(table, DCI_LAMBDA);
    let total: f64 = r.iter().sum();
    if total <= 0.0 {
        log::warn!("all-zero importance matrix; DCI disentanglement is 0");
        return Ok(0.0);
    }
    let mut score = 0.0;
    for j in 0..d {
        let row = &r[j * k..(j + 1) * k];
        let mass: f64 = row.iter().sum();
        if mass <= 0.0 {
            continue;
        }
        let h: f64 = row
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| {
                let p = v / mass;
                -p * p.ln() / (k as f64).ln()
            })
            .sum();
        score += mass / total * (1.0 - h);
    }
    Ok(score.clamp(0.0, 1.0))
}

/// 1-based ranks with tied values sharing the mean of their positions.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let mid = 0.5 * (start + end + 1) as f64;
        for &i in &order[start..end] {
            ranks[i] = mid;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(
            "spearman needs two equal-length series of length >= 2".into(),
        ));
    }
    let (ra, rb) = (midranks(a), midranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - mean) * (y - mean);
        saa += (x - mean) * (x - mean);
        sbb += (y - mean) * (y - mean);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Area under the ROC curve with midranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "labels",
            expected: scores.len(),
            got: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("AUROC needs both classes".into()));
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Total AUROC difference and the number of captured attributes.
///
/// Unlike the original protocol there is no attribute-correlation filter;
/// an attribute counts as captured when its best code reaches
/// `capture_threshold`.
pub fn tad(table: &RepresentationTable, capture_threshold: f64) -> Result<(f64, usize)> {
    let a = table.n_attributes();
    if a == 0 {
        return Err(Error::InvalidArgument("TAD needs at least one attribute".into()));
    }
    let cols: Vec<Vec<f64>> = (0..table.code_dim()).map(|j| table.code_column(j)).collect();
    let (mut score, mut captured) = (0.0, 0);
    for k in 0..a {
        let labels = table.attribute_column(k);
        let mut aucs = cols
            .iter()
            .map(|c| auroc(c, &labels).map(|v| v.max(1.0 - v)))
            .collect::<Result<Vec<_>>>()?;
        aucs.sort_by(|x, y| y.total_cmp(x));
        if aucs[0] >= capture_threshold {
            captured += 1;
            score += aucs[0] - aucs.get(1).copied().unwrap_or(0.5);
        }
    }
    Ok((score, captured))
}

/// Monte-Carlo terms of `E_x KL(q(z|x) ‖ p(z)) = I(z; x) + KL(q(z) ‖ p(z))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlDecomposition {
    /// closed-form mean KL over the sample
    pub mean_kl: f64,
    pub mutual_information: f64,
    pub marginal_kl: f64,
}

impl KlDecomposition {
    pub fn residual(&self) -> f64 {
        self.mean_kl - (self.mutual_information + self.marginal_kl)
    }
}

fn log_normal_iso(z: &[f64], mean: &[f64], sigma: f64) -> f64 {
    let d = z.len() as f64;
    let sq: f64 = z.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * d * (std::f64::consts::TAU * sigma * sigma).ln() - sq / (2.0 * sigma * sigma)
}

/// Decomposition from precomputed encoder means (`m × d`, row-major) and
/// the shared posterior scale. The aggregate posterior is the mixture of the
/// `m` posteriors; `n_mc` pairs `(x, z ~ q(z|x))` are drawn with `x` cycling
/// through the sample.
pub fn kl_decomposition_from_means(means: &[f64], d: usize, sigma: f64, n_mc: usize, seed: u64) -> Result<KlDecomposition> {
    if d == 0 || means.is_empty() || !means.len().is_multiple_of(d) {
        return Err(Error::InvalidArgument("encoder means do not form rows".into()));
    }
    let m = means.len() / d;
    let mean_kl = means.chunks(d).map(|f| gaussian_kl(f, sigma)).sum::<Result<f64>>()? / m as f64;
    let log_m = (m as f64).ln();
    let zeros = vec![0.0; d];
    let mut r = rng::stream(seed, 0x4B1D, 0);
    let (mut mi, mut mkl) = (0.0, 0.0);
    let mut z = vec![0.0; d];
    let mut logs = vec![0.0; m];
    for s in 0..n_mc {
        let own = &means[(s % m) * d..(s % m + 1) * d];
        for (zv, f) in z.iter_mut().zip(own) {
            *zv = f + sigma * r.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let log_cond = log_normal_iso(&z, own, sigma);
        for (l, f) in logs.iter_mut().zip(means.chunks(d)) {
            *l = log_normal_iso(&z, f, sigma);
        }
        let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_q = mx + logs.iter().map(|l| (l - mx).exp()).sum::<f64>().ln() - log_m;
        mi += log_cond - log_q;
        mkl += log_q - log_normal_iso(&z, &zeros, 1.0);
    }
    Ok(KlDecomposition {
        mean_kl,
        mutual_information: mi / n_mc as f64,
        marginal_kl: mkl / n_mc as f64,
    })
}

/// Decomposition for a trained VAE at `beta` over row-major `images`.
pub fn kl_decomposition_estimate(vae: &VaeModel, images: &[f64], beta: f64, n_mc: usize, seed: u64) -> Result<KlDecomposition> {
    if n_mc < 1000 {
        return Err(Error::InvalidArgument(format!("n_mc must be at least 1000, got {n_mc}")));
    }
    let means = vae.encode_many(images, beta)?;
    kl_decomposition_from_means(&means, vae.latent_dim(), vae.sigma_at(beta), n_mc, seed)
}

/// Mean per-pixel squared error of the noiseless round trip at `beta`.
pub fn recon_mse(vae: &VaeModel, images: &[f64], beta: f64) -> Result<f64> {
    let dd = vae.data_dim();
    if images.is_empty() || !images.len().is_multiple_of(dd) {
        return Err(Error::InvalidArgument("images do not form rows".into()));
    }
    let f = vae.encode_many(images, beta)?;
    let g = vae.decode_many(&f, beta)?;
    let sq: f64 = g.iter().zip(images).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / images.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub beta: f64,
    pub mig: f64,
    pub dci_disentanglement: f64,
    pub tad: f64,
    pub captured_attributes: usize,
    pub recon_mse: f64,
    pub kl_mean: f64,
    pub mi_xz_estimate: f64,
    pub kl_marginal_estimate: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSettings {
    pub bins: usize,
    pub capture_threshold: f64,
    pub n_mc: usize,
    pub seed: u64,
}

impl Default for MetricSettings {
    fn default() -> Self {
        MetricSettings {
            bins: DEFAULT_BINS,
            capture_threshold: DEFAULT_CAPTURE_THRESHOLD,
            n_mc: 2000,
            seed: 0,
        }
    }
}

/// Full report at `beta`. Disentanglement scores use encoder means of the
/// whole factor grid; reconstruction and the KL terms use `eval` images.
pub fn evaluate_beta(vae: &VaeModel, data: &Dataset, eval: &[usize], beta: f64, settings: &MetricSettings) -> Result<MetricsReport> {
    vae.check_beta(beta)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let codes = vae.encode_many(&data.images, beta)?;
    let attrs = data.attributes(&all).iter().map(|a| a.values().to_vec()).collect();
    let table = RepresentationTable::new(codes, vae.latent_dim(), data.factor_labels(&all), attrs)?;
    let (tad_score, captured) = tad(&table, settings.capture_threshold)?;
    let images: Vec<f64> = eval.iter().flat_map(|&i| data.image(i).iter().copied()).collect();
    let kd = kl_decomposition_estimate(vae, &images, beta, settings.n_mc, settings.seed)?;
    Ok(MetricsReport {
        beta,
        mig: mig(&table, settings.bins)?,
        dci_disentanglement: dci_disentanglement(&table)?,
        tad: tad_score,
        captured_attributes: captured,
        recon_mse: recon_mse(vae, &images, beta)?,
        kl_mean: kd.mean_kl,
        mi_xz_estimate: kd.mutual_information,
        kl_marginal_estimate: kd.marginal_kl,
    })
}
