//! Run-directory orchestration behind the `betaspec` command-line tool.
//!
//! A run directory holds the emitted `config.toml`, a `manifest.json` of
//! completed stages and every artifact. Each artifact carries the config
//! hash, and stages refuse to run against a directory created from a
//! different config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::data::{dataset_split, Dataset, FactorSpec};
use crate::diffusion::{
    prior_mismatch_warning, sample_latents, sharpening, train_diffusion, DenoiserModel, DiffusionConfig, EncodingTable,
};
use crate::error::{Error, Result};
use crate::latent::{interpolate, manipulate, pca_directions};
use crate::math::schedule::Schedule;
use crate::metrics::{evaluate_beta, spearman, MetricSettings, MetricsReport};
use crate::nn::checkpoint::{self, write_atomic};
use crate::vae::{train_vae, VaeConfig, VaeModel};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_PREREQUISITE: i32 = 2;

pub const STAGES: [&str; 10] = [
    "gen-data",
    "train-vae",
    "train-diff",
    "sample",
    "denoise",
    "evaluate",
    "sweep-beta",
    "manipulate",
    "interpolate",
    "report",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_fraction: f64,
    pub spec: FactorSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_fraction: 0.8,
            spec: FactorSpec::default(),
        }
    }
}

/// Everything a run depends on. `out_dir` is excluded from the hash so the
/// same config reproduces byte-identical artifacts in any directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of the train/eval split.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub code_version: String,
    pub data: DataSection,
    pub vae: VaeConfig,
    pub diffusion: DiffusionConfig,
    pub metrics: MetricSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DataSection::default();
        let vae = VaeConfig {
            data_dim: data.spec.data_dim(),
            steps: 30_000,
            obs_scale: 1.0,
            learn_obs_scale: false,
            ..VaeConfig::default()
        };
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("run"),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            data,
            vae,
            diffusion: DiffusionConfig {
                steps: 30_000,
                ..DiffusionConfig::default()
            },
            metrics: MetricSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.spec.validate()?;
        self.vae.validate()?;
        if self.vae.data_dim != self.data.spec.data_dim() {
            return Err(Error::InvalidArgument(format!(
                "vae.data_dim = {} but the dataset has {} values per image",
                self.vae.data_dim,
                self.data.spec.data_dim()
            )));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::InvalidArgument("data.train_fraction must lie in (0, 1)".into()));
        }
        if self.metrics.n_mc < 1000 || self.metrics.bins < 2 {
            return Err(Error::InvalidArgument("metrics need n_mc >= 1000 and bins >= 2".into()));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML, with
    /// `out_dir` blanked.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        hex::encode(digest)[..16].to_string()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub completed: bool,
    pub wall_seconds: f64,
    /// paths relative to the run directory
    pub artifacts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_hash: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

/// Exclusive lock on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock(PathBuf);

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

/// Worker threads for parallel stages: `BETASPEC_THREADS` if set, else the
/// available parallelism.
pub fn worker_count() -> usize {
    std::env::var("BETASPEC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Insert ` config=<hash>` at the end of the first line of a text or
/// header-prefixed binary container.
pub fn tag_header(bytes: &[u8], hash: &str) -> Vec<u8> {
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap_or(bytes.len());
    let mut out = Vec::with_capacity(bytes.len() + 24);
    out.extend_from_slice(&bytes[..nl]);
    out.extend_from_slice(format!(" config={hash}").as_bytes());
    out.extend_from_slice(&bytes[nl..]);
    out
}

/// Config hash from the first line of a tagged container, if present.
pub fn header_hash(bytes: &[u8]) -> Option<String> {
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap_or(bytes.len());
    let line = std::str::from_utf8(&bytes[..nl]).ok()?;
    line.split_whitespace().find_map(|f| f.strip_prefix("config=")).map(str::to_string)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn to_json_bytes(v: &Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("json serializes");
    s.push('\n');
    s.into_bytes()
}

/// Tiled binary PGM (one channel) or PPM (three channels) of `images`, each
/// `height × width × channels` in channel-last row-major order. Tiles are
/// separated by 2-pixel mid-gray gutters; missing tiles stay black.
pub fn encode_image_grid(
    images: &[f64],
    height: usize,
    width: usize,
    channels: usize,
    columns: usize,
    comment: Option<&str>,
) -> Result<Vec<u8>> {
    const GAP: usize = 2;
    let per = height * width * channels;
    if per == 0 || columns == 0 || !(channels == 1 || channels == 3) {
        return Err(Error::InvalidArgument(
            "image grid needs positive dimensions and 1 or 3 channels".into(),
        ));
    }
    if images.is_empty() || !images.len().is_multiple_of(per) {
        return Err(Error::InvalidArgument("images do not all have the stated shape".into()));
    }
    let n = images.len() / per;
    let cols = columns.min(n);
    let rows = n.div_ceil(cols);
    let canvas_h = rows * height + (rows - 1) * GAP;
    let canvas_w = cols * width + (cols - 1) * GAP;
    let mut pixels = vec![128u8; canvas_h * canvas_w * channels];
    for r in 0..rows {
        for c in 0..cols {
            for y in 0..height {
                let row_off = ((r * (height + GAP) + y) * canvas_w + c * (width + GAP)) * channels;
                let dst = &mut pixels[row_off..row_off + width * channels];
                let k = r * cols + c;
                if k < n {
                    let src = &images[k * per + y * width * channels..k * per + (y + 1) * width * channels];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                } else {
                    dst.fill(0);
                }
            }
        }
    }
    let magic = if channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n");
    if let Some(c) = comment {
        let _ = writeln!(out, "# {c}");
    }
    let _ = write!(out, "{canvas_w} {canvas_h}\n255\n");
    let mut bytes = out.into_bytes();
    bytes.extend_from_slice(&pixels);
    Ok(bytes)
}

#[allow(clippy::too_many_arguments)]
pub fn export_image_grid(
    images: &[f64],
    height: usize,
    width: usize,
    channels: usize,
    path: &Path,
    columns: usize,
    comment: Option<&str>,
) -> Result<()> {
    write_atomic(path, &encode_image_grid(images, height, width, channels, columns, comment)?)
}

/// A locked run directory with its config and manifest.
#[derive(Debug)]
pub struct Run {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub hash: String,
    pub manifest: RunManifest,
    stage: &'static str,
    _lock: RunLock,
}

/// One-line summary of a finished stage.
pub type StageOutcome = String;

impl Run {
    /// Open (creating if needed) the run directory of `config`.
    pub fn open(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let dir = config.out_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let lock = RunLock::acquire(&dir)?;
        let hash = config.hash();
        let manifest_path = dir.join("manifest.json");
        let manifest = if manifest_path.exists() {
            let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
            let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("manifest: {e}")))?;
            if m.config_hash != hash {
                return Err(Error::ConfigMismatch {
                    expected: m.config_hash,
                    got: hash,
                });
            }
            m
        } else {
            RunManifest {
                config_hash: hash.clone(),
                stages: BTreeMap::new(),
            }
        };
        let run = Run {
            dir,
            config,
            hash,
            manifest,
            stage: "",
            _lock: lock,
        };
        let cfg_text = format!("# config={}\n{}", run.hash, run.config.to_toml());
        write_atomic(&run.path("config.toml"), cfg_text.as_bytes())?;
        run.save_manifest()?;
        Ok(run)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn save_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write_atomic(&self.path("manifest.json"), text.as_bytes())
    }

    /// Error unless `stage` completed and all its artifacts exist.
    pub fn require(&self, stage: &str, needed_by: &str) -> Result<&StageRecord> {
        let missing = || Error::MissingPrerequisite(format!("`{needed_by}` needs `{stage}` to have run in {}", self.dir.display()));
        let rec = self.manifest.stages.get(stage).filter(|r| r.completed).ok_or_else(missing)?;
        if rec.artifacts.iter().any(|a| !self.path(a).exists()) {
            return Err(missing());
        }
        Ok(rec)
    }

    fn finish(&mut self, stage: &str, started: Instant, artifacts: Vec<String>, content_hash: Option<String>) -> Result<()> {
        let rec = self.manifest.stages.entry(stage.to_string()).or_default();
        rec.completed = true;
        rec.wall_seconds = started.elapsed().as_secs_f64();
        for a in artifacts {
            if !rec.artifacts.contains(&a) {
                rec.artifacts.push(a);
            }
        }
        if content_hash.is_some() {
            rec.content_hash = content_hash;
        }
        self.save_manifest()
    }

    fn write(&self, rel: &str, bytes: &[u8]) -> Result<String> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_atomic(&path, bytes)?;
        Ok(rel.to_string())
    }

    fn write_json(&self, rel: &str, mut value: Value) -> Result<String> {
        value["config_hash"] = json!(self.hash);
        self.write(rel, &to_json_bytes(&value))
    }

    fn write_csv(&self, rel: &str, csv: &str) -> Result<String> {
        self.write(rel, format!("# config={}\n{csv}", self.hash).as_bytes())
    }

    fn write_grid(&self, rel: &str, images: &[f64]) -> Result<String> {
        let columns = self.grid_columns(images);
        let spec = &self.config.data.spec;
        let bytes = encode_image_grid(
            images,
            spec.image_side,
            spec.image_side,
            spec.channels,
            columns,
            Some(&format!("config={}", self.hash)),
        )?;
        self.write(rel, &bytes)
    }

    fn grid_columns(&self, images: &[f64]) -> usize {
        let n = images.len() / self.config.data.spec.data_dim();
        (n as f64).sqrt().ceil().max(1.0) as usize
    }

    fn check_grid_index(&self, i: usize) -> Result<()> {
        if i > self.config.vae.grid_size {
            return Err(Error::StepOutOfRange {
                index: i,
                n_steps: self.config.vae.grid_size,
            });
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<Dataset> {
        self.require("gen-data", self.stage)?;
        Dataset::load(&self.path("data/dataset.fds"))
    }

    pub fn split(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        dataset_split(&self.config.data.spec, self.config.seed, self.config.data.train_fraction)
    }

    pub fn vae(&self) -> Result<VaeModel> {
        self.require("train-vae", self.stage)?;
        VaeModel::from_checkpoint(self.config.vae.clone(), &checkpoint::load(&self.path("vae/vae.ckpt"))?)
    }

    pub fn denoiser(&self, vae: &VaeModel) -> Result<DenoiserModel> {
        self.require("train-diff", self.stage)?;
        let ckpt = checkpoint::load(&self.path("diffusion/denoiser.ckpt"))?;
        DenoiserModel::from_checkpoint(self.config.diffusion.clone(), vae.schedule()?, vae.latent_dim(), &ckpt)
    }

    pub fn gen_data(&mut self) -> Result<StageOutcome> {
        self.stage = "gen-data";
        let t0 = Instant::now();
        let data = Dataset::generate(self.config.data.spec.clone())?;
        let bytes = tag_header(&data.to_bytes(), &self.hash);
        let digest = sha256_hex(&bytes);
        if let Some(rec) = self.manifest.stages.get("gen-data") {
            if rec.completed && rec.content_hash.as_deref() == Some(digest.as_str()) && rec.artifacts.iter().all(|a| self.path(a).exists())
            {
                return Ok(format!("gen-data: dataset {} unchanged, nothing to do", &digest[..16]));
            }
        }
        let (train, eval) = self.split()?;
        let artifacts = vec![
            self.write("data/dataset.fds", &bytes)?,
            self.write_csv("data/attributes.csv", &data.attributes_csv())?,
            self.write_json("data/split.json", json!({ "train": train, "eval": eval }))?,
        ];
        self.finish("gen-data", t0, artifacts, Some(digest.clone()))?;
        Ok(format!("gen-data: {} images, dataset {}", data.len(), &digest[..16]))
    }

    pub fn train_vae(&mut self) -> Result<StageOutcome> {
        self.stage = "train-vae";
        let data = self.dataset()?;
        let t0 = Instant::now();
        let (train, _) = self.split()?;
        let mut vae = VaeModel::new(self.config.vae.clone())?;
        let log = train_vae(&mut vae, &data, &train)?;
        let ckpt = checkpoint::encode(&vae.all_params(), Some(&self.hash));
        let artifacts = vec![
            self.write("vae/vae.ckpt", &ckpt)?,
            self.write("vae/schedule.txt", &tag_header(vae.schedule()?.to_text().as_bytes(), &self.hash))?,
            self.write_csv("vae/train_log.csv", &log.to_csv())?,
        ];
        self.finish("train-vae", t0, artifacts, Some(sha256_hex(&ckpt)))?;
        let last = log.losses.last().copied().unwrap_or(f64::NAN);
        Ok(format!("train-vae: {} steps, final loss {last:.4}", log.losses.len()))
    }

    pub fn train_diff(&mut self) -> Result<StageOutcome> {
        self.stage = "train-diff";
        let data = self.dataset()?;
        let vae = self.vae()?;
        let t0 = Instant::now();
        let (train, eval) = self.split()?;
        let eval_images: Vec<f64> = eval.iter().flat_map(|&i| data.image(i).iter().copied()).collect();
        if let Some(w) = prior_mismatch_warning(&vae, &eval_images)? {
            log::warn!("{w}");
        }
        let train_images: Vec<f64> = train.iter().flat_map(|&i| data.image(i).iter().copied()).collect();
        let table = EncodingTable::from_vae(&vae, &train_images)?;
        let mut den = DenoiserModel::new(self.config.diffusion.clone(), vae.schedule()?, vae.latent_dim())?;
        let log = train_diffusion(&mut den, &table)?;
        let ckpt = checkpoint::encode(&den.params(), Some(&self.hash));
        let artifacts = vec![
            self.write("diffusion/denoiser.ckpt", &ckpt)?,
            self.write_csv("diffusion/train_log.csv", &log.to_csv())?,
        ];
        self.finish("train-diff", t0, artifacts, Some(sha256_hex(&ckpt)))?;
        let last = log.losses.last().copied().unwrap_or(f64::NAN);
        Ok(format!("train-diff: {} steps, final loss {last:.4}", log.losses.len()))
    }

    pub fn sample(&mut self, n: usize, seed: u64, trace: bool) -> Result<StageOutcome> {
        self.stage = "sample";
        let vae = self.vae()?;
        let den = self.denoiser(&vae)?;
        if n == 0 {
            return Err(Error::InvalidArgument("--n must be positive".into()));
        }
        let t0 = Instant::now();
        let out = sample_latents(&den, n, seed, &den.config.sampler, trace)?;
        let images = vae.decode_many(&out.latents, 0.0)?;
        let mut artifacts = vec![self.write_grid(&format!("samples/sample_n{n}_seed{seed}.{}", self.image_ext()), &images)?];
        if let Some(text) = out.trace_text(0, den.dim()) {
            artifacts.push(self.write(
                &format!("samples/trace_n{n}_seed{seed}.txt"),
                &tag_header(text.as_bytes(), &self.hash),
            )?);
        }
        self.finish("sample", t0, artifacts.clone(), None)?;
        Ok(format!(
            "sample: {n} images with {} denoiser evaluations and {} noise draws -> {}",
            out.denoiser_evals, out.noise_draws, artifacts[0]
        ))
    }

    fn image_ext(&self) -> &'static str {
        if self.config.data.spec.channels == 1 {
            "pgm"
        } else {
            "ppm"
        }
    }

    fn eval_images(&self, data: &Dataset, n: usize) -> Result<Vec<f64>> {
        let (_, eval) = self.split()?;
        Ok(eval.iter().take(n).flat_map(|&i| data.image(i).iter().copied()).collect())
    }

    pub fn denoise(&mut self, i_beta: usize, n: usize, seed: u64) -> Result<StageOutcome> {
        self.stage = "denoise";
        let data = self.dataset()?;
        let vae = self.vae()?;
        let den = self.denoiser(&vae)?;
        self.check_grid_index(i_beta)?;
        let t0 = Instant::now();
        let images = self.eval_images(&data, n.max(1))?;
        let sh = sharpening(&vae, &den, &images, i_beta, seed)?;
        let mut grid = images.clone();
        grid.extend_from_slice(&sh.direct);
        grid.extend_from_slice(&sh.denoised);
        let rows = images.len() / data.dim();
        let spec = &self.config.data.spec;
        let bytes = encode_image_grid(
            &grid,
            spec.image_side,
            spec.image_side,
            spec.channels,
            rows,
            Some(&format!("config={}", self.hash)),
        )?;
        let stem = format!("denoise/denoise_i{i_beta:03}_seed{seed}");
        let artifacts = vec![
            self.write(&format!("{stem}.{}", self.image_ext()), &bytes)?,
            self.write_json(
                &format!("{stem}.json"),
                json!({
                    "grid_index": i_beta,
                    "beta": den.schedule.time(i_beta),
                    "images": rows,
                    "direct_mse": sh.direct_mse,
                    "denoised_mse": sh.denoised_mse,
                }),
            )?,
        ];
        self.finish("denoise", t0, artifacts, None)?;
        Ok(format!(
            "denoise: beta index {i_beta}, direct MSE {:.4}, denoised MSE {:.4} per image",
            sh.direct_mse, sh.denoised_mse
        ))
    }

    fn report_json(&self, i: usize, report: &MetricsReport) -> Value {
        let mut v = serde_json::to_value(report).expect("report serializes");
        v["grid_index"] = json!(i);
        v
    }

    pub fn evaluate(&mut self, i_beta: usize) -> Result<StageOutcome> {
        self.stage = "evaluate";
        let data = self.dataset()?;
        let vae = self.vae()?;
        self.check_grid_index(i_beta)?;
        let t0 = Instant::now();
        let (_, eval) = self.split()?;
        let report = evaluate_beta(&vae, &data, &eval, vae.grid_beta(i_beta), &self.config.metrics)?;
        let rel = self.write_json(&format!("metrics/beta_{i_beta:03}.json"), self.report_json(i_beta, &report))?;
        self.finish("evaluate", t0, vec![rel.clone()], None)?;
        Ok(format!(
            "evaluate: beta {:.3} MIG {:.4} DCI {:.4} TAD {:.4} -> {rel}",
            report.beta, report.mig, report.dci_disentanglement, report.tad
        ))
    }

    pub fn sweep_beta(&mut self, stride: usize) -> Result<StageOutcome> {
        self.stage = "sweep-beta";
        let data = self.dataset()?;
        let vae = self.vae()?;
        let t0 = Instant::now();
        let (_, eval) = self.split()?;
        let n = self.config.vae.grid_size;
        let mut grid: Vec<usize> = (0..=n).step_by(stride.max(1)).collect();
        if grid.last() != Some(&n) {
            grid.push(n);
        }
        let reports = parallel_map(&grid, worker_count(), |&i| {
            evaluate_beta(&vae, &data, &eval, vae.grid_beta(i), &self.config.metrics)
        })?;
        let mut artifacts = Vec::new();
        let mut csv = String::from(
            "grid_index,beta,mig,dci_disentanglement,tad,captured_attributes,recon_mse,kl_mean,mi_xz_estimate,kl_marginal_estimate\n",
        );
        for (&i, r) in grid.iter().zip(&reports) {
            artifacts.push(self.write_json(&format!("metrics/beta_{i:03}.json"), self.report_json(i, r))?);
            let _ = writeln!(
                csv,
                "{i},{},{},{},{},{},{},{},{},{}",
                r.beta,
                r.mig,
                r.dci_disentanglement,
                r.tad,
                r.captured_attributes,
                r.recon_mse,
                r.kl_mean,
                r.mi_xz_estimate,
                r.kl_marginal_estimate
            );
        }
        artifacts.push(self.write_csv("metrics/sweep.csv", &csv)?);
        self.finish("sweep-beta", t0, artifacts, None)?;
        let best = grid
            .iter()
            .zip(&reports)
            .max_by(|a, b| a.1.mig.total_cmp(&b.1.mig).then(b.0.cmp(a.0)))
            .map(|(i, r)| format!("best MIG {:.4} at grid index {i}", r.mig))
            .unwrap_or_default();
        Ok(format!("sweep-beta: {} grid points, {best}", grid.len()))
    }

    /// `alphas` are in units of the latent standard deviation along the
    /// chosen principal direction.
    #[allow(clippy::too_many_arguments)]
    pub fn manipulate(
        &mut self,
        image: usize,
        direction: usize,
        i_beta: usize,
        alphas: &[f64],
        seed: u64,
        vary_seed: bool,
    ) -> Result<StageOutcome> {
        self.stage = "manipulate";
        let data = self.dataset()?;
        let vae = self.vae()?;
        let den = self.denoiser(&vae)?;
        self.check_grid_index(i_beta)?;
        if image >= data.len() {
            return Err(Error::InvalidArgument(format!("image index {image} out of range")));
        }
        let t0 = Instant::now();
        let beta = vae.grid_beta(i_beta);
        let basis = pca_directions(&vae.encode_many(&data.images, beta)?, vae.latent_dim())?;
        if direction >= basis.len() {
            return Err(Error::InvalidArgument(format!(
                "direction {direction} out of range (basis has {})",
                basis.len()
            )));
        }
        let x = data.image(image);
        let mut grid = x.to_vec();
        for (k, a) in alphas.iter().enumerate() {
            let s = if vary_seed { seed.wrapping_add(k as u64) } else { seed };
            grid.extend(manipulate(
                &vae,
                &den,
                x,
                &basis.directions[direction],
                a * basis.std(direction),
                i_beta,
                s,
            )?);
        }
        let artifacts = vec![
            self.write(
                &format!("edits/dirs_i{i_beta:03}.txt"),
                &tag_header(basis.to_text().as_bytes(), &self.hash),
            )?,
            self.write_grid_row(
                &format!("edits/manipulate_img{image}_dir{direction}_i{i_beta:03}_seed{seed}"),
                &grid,
            )?,
        ];
        self.finish("manipulate", t0, artifacts.clone(), None)?;
        Ok(format!("manipulate: {} edits -> {}", alphas.len(), artifacts[1]))
    }

    fn write_grid_row(&self, stem: &str, images: &[f64]) -> Result<String> {
        let spec = &self.config.data.spec;
        let n = images.len() / spec.data_dim();
        let bytes = encode_image_grid(
            images,
            spec.image_side,
            spec.image_side,
            spec.channels,
            n,
            Some(&format!("config={}", self.hash)),
        )?;
        self.write(&format!("{stem}.{}", self.image_ext()), &bytes)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn interpolate(
        &mut self,
        image1: usize,
        image2: usize,
        dims: &[usize],
        i_beta: usize,
        points: usize,
        seed: u64,
    ) -> Result<StageOutcome> {
        self.stage = "interpolate";
        let data = self.dataset()?;
        let vae = self.vae()?;
        let den = self.denoiser(&vae)?;
        self.check_grid_index(i_beta)?;
        if image1 >= data.len() || image2 >= data.len() {
            return Err(Error::InvalidArgument("image index out of range".into()));
        }
        if points < 2 {
            return Err(Error::InvalidArgument("--points must be at least 2".into()));
        }
        let t0 = Instant::now();
        let (x1, x2) = (data.image(image1), data.image(image2));
        let mut grid = x1.to_vec();
        for k in 0..points {
            let alpha = k as f64 / (points - 1) as f64;
            grid.extend(interpolate(&vae, &den, x1, x2, alpha, dims, i_beta, seed)?);
        }
        grid.extend_from_slice(x2);
        let rel = self.write_grid_row(&format!("edits/interpolate_{image1}_{image2}_i{i_beta:03}_seed{seed}"), &grid)?;
        self.finish("interpolate", t0, vec![rel.clone()], None)?;
        Ok(format!("interpolate: {points} points -> {rel}"))
    }

    pub fn report(&mut self) -> Result<StageOutcome> {
        self.stage = "report";
        let t0 = Instant::now();
        let summary = aggregate_report(&self.dir)?;
        let rel = self.write("report.json", &to_json_bytes(&summary))?;
        self.finish("report", t0, vec![rel.clone()], None)?;
        Ok(format!(
            "report: {} metric reports -> {rel}",
            summary["reports"].as_array().map_or(0, Vec::len)
        ))
    }
}

/// Map `f` over `items` on up to `workers` threads, keeping input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let workers = workers.clamp(1, items.len().max(1));
    let chunk = items.len().div_ceil(workers).max(1);
    let results: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

const CURVE_KEYS: [&str; 8] = [
    "mig",
    "dci_disentanglement",
    "tad",
    "recon_mse",
    "kl_mean",
    "mi_xz_estimate",
    "kl_marginal_estimate",
    "captured_attributes",
];

fn verdict(ok: Option<bool>) -> &'static str {
    match ok {
        Some(true) => "pass",
        Some(false) => "fail",
        None => "unavailable",
    }
}

/// Summary of every metric report in `run_dir/metrics`: per-β curves over
/// the whole grid (null where a point was not evaluated), the best grid
/// point per disentanglement metric, the σ table and two diagnostics.
pub fn aggregate_report(run_dir: &Path) -> Result<Value> {
    let config = RunConfig::load(&run_dir.join("config.toml"))?;
    let hash = config.hash();
    let metrics_dir = run_dir.join("metrics");
    let mut files: Vec<PathBuf> = match std::fs::read_dir(&metrics_dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(_) => Vec::new(),
    };
    files.sort();
    if files.is_empty() {
        return Err(Error::MissingPrerequisite(format!(
            "`report` needs at least one metrics report in {}",
            metrics_dir.display()
        )));
    }
    let n = config.vae.grid_size;
    let mut by_index: BTreeMap<usize, Value> = BTreeMap::new();
    for f in &files {
        let text = std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", f.display())))?;
        let got = v["config_hash"].as_str().unwrap_or_default().to_string();
        if got != hash {
            return Err(Error::ConfigMismatch { expected: hash, got });
        }
        let i = v["grid_index"]
            .as_u64()
            .filter(|&i| i as usize <= n)
            .ok_or_else(|| Error::Parse(format!("{}: missing or invalid grid_index", f.display())))?;
        by_index.insert(i as usize, v);
    }

    let betas: Vec<f64> = (0..=n).map(|i| config.vae.horizon * i as f64 / n as f64).collect();
    let mut curves = serde_json::Map::new();
    curves.insert("beta".into(), json!(betas));
    for key in CURVE_KEYS {
        let curve: Vec<Value> = (0..=n).map(|i| by_index.get(&i).map_or(Value::Null, |v| v[key].clone())).collect();
        curves.insert(key.into(), Value::Array(curve));
    }
    let mut best = serde_json::Map::new();
    for key in ["mig", "dci_disentanglement", "tad"] {
        let arg = by_index
            .iter()
            .filter_map(|(&i, v)| v[key].as_f64().map(|x| (i, x)))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((i, x)) = arg {
            best.insert(key.into(), json!({ "grid_index": i, "beta": betas[i], "value": x }));
        }
    }

    let schedule = std::fs::read_to_string(run_dir.join("vae/schedule.txt"))
        .ok()
        .and_then(|t| Schedule::from_text(&t).ok());
    let sigma_ok = schedule
        .as_ref()
        .and_then(|s| spearman(s.sigmas(), &betas).ok())
        .map(|rho| rho > 0.9);
    let points: Vec<(usize, &Value)> = by_index.iter().map(|(&i, v)| (i, v)).collect();
    let info_ok = if points.len() >= 2 && points[0].0 == 0 && points.last().map(|p| p.0) == Some(n) {
        let recon: Vec<f64> = points.iter().filter_map(|(_, v)| v["recon_mse"].as_f64()).collect();
        let mi0 = points[0].1["mi_xz_estimate"].as_f64();
        let mi_b = points.last().and_then(|p| p.1["mi_xz_estimate"].as_f64());
        let recon_min_at_0 = recon.iter().all(|&r| r >= recon[0]);
        match (mi0, mi_b) {
            (Some(a), Some(b)) => Some(recon_min_at_0 && b < 0.1 * a),
            _ => None,
        }
    } else {
        None
    };

    Ok(json!({
        "config_hash": hash,
        "grid_size": n,
        "reports": by_index.values().collect::<Vec<_>>(),
        "curves": curves,
        "best": best,
        "sigma_table": schedule.as_ref().map(|s| s.sigmas().to_vec()),
        "diagnostics": {
            "sigma_increases_with_beta": verdict(sigma_ok),
            "information_decreases_with_beta": verdict(info_ok),
        },
    }))
}
