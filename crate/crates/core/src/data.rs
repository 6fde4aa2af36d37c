//! Procedural sprite dataset with known generative factors.
//!
//! Each image is one white shape on a black background. The five default
//! factors (shape, scale, orientation, horizontal and vertical position) form
//! a full Cartesian product, so factor labels are independent by construction.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::write_atomic;
use crate::rng;

const SUPERSAMPLE: usize = 4;
const SHAPE_NAMES: [&str; 3] = ["square", "ellipse", "triangle"];
const PALETTE: [[f64; 3]; 4] = [[1.0, 0.35, 0.3], [0.3, 0.9, 0.4], [0.35, 0.5, 1.0], [1.0, 0.9, 0.25]];

/// Names the renderer understands. `color` is only used when `channels == 3`.
pub const FACTOR_NAMES: [&str; 6] = ["shape", "scale", "orientation", "pos_x", "pos_y", "color"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Factor {
    pub name: String,
    pub cardinality: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub factors: Vec<Factor>,
    pub image_side: usize,
    pub channels: usize,
}

impl Default for FactorSpec {
    fn default() -> Self {
        let f = |name: &str, cardinality| Factor {
            name: name.into(),
            cardinality,
        };
        FactorSpec {
            factors: vec![f("shape", 3), f("scale", 4), f("orientation", 6), f("pos_x", 8), f("pos_y", 8)],
            image_side: 32,
            channels: 1,
        }
    }
}

/// Factor indices of one image, in the order of [`FactorSpec::factors`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FactorTuple(pub Vec<usize>);

/// Binary labels, each a function of a single factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttributeSet {
    pub is_square: bool,
    pub is_large: bool,
    pub is_left: bool,
    pub is_top: bool,
    pub is_upright: bool,
}

impl AttributeSet {
    pub const NAMES: [&'static str; 5] = ["is_square", "is_large", "is_left", "is_top", "is_upright"];

    pub fn values(&self) -> [bool; 5] {
        [self.is_square, self.is_large, self.is_left, self.is_top, self.is_upright]
    }
}

impl FactorSpec {
    /// Default spec plus a four-valued color factor rendered in RGB.
    pub fn colored() -> Self {
        let mut spec = FactorSpec::default();
        spec.factors.push(Factor {
            name: "color".into(),
            cardinality: PALETTE.len(),
        });
        spec.channels = 3;
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_side < 8 {
            return Err(Error::InvalidArgument(format!("image side {} is too small", self.image_side)));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidArgument(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        for f in &self.factors {
            if f.cardinality < 2 {
                return Err(Error::InvalidArgument(format!("factor `{}` needs at least 2 values", f.name)));
            }
            if !FACTOR_NAMES.contains(&f.name.as_str()) {
                return Err(Error::InvalidArgument(format!("unknown factor `{}`", f.name)));
            }
            if self.factors.iter().filter(|g| g.name == f.name).count() > 1 {
                return Err(Error::InvalidArgument(format!("duplicate factor `{}`", f.name)));
            }
        }
        for name in &FACTOR_NAMES[..5] {
            if self.position(name).is_none() {
                return Err(Error::InvalidArgument(format!("missing factor `{name}`")));
            }
        }
        if let Some(k) = self.position("shape") {
            if self.factors[k].cardinality > SHAPE_NAMES.len() {
                return Err(Error::InvalidArgument(format!("at most {} shapes", SHAPE_NAMES.len())));
            }
        }
        match (self.position("color"), self.channels) {
            (Some(k), 3) if self.factors[k].cardinality <= PALETTE.len() => Ok(()),
            (Some(_), 3) => Err(Error::InvalidArgument(format!("at most {} colors", PALETTE.len()))),
            (Some(_), _) => Err(Error::InvalidArgument("color factor needs 3 channels".into())),
            (None, 3) => Err(Error::InvalidArgument("3 channels need a color factor".into())),
            (None, _) => Ok(()),
        }
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.factors.iter().position(|f| f.name == name)
    }

    pub fn cardinality(&self, name: &str) -> Option<usize> {
        self.position(name).map(|k| self.factors[k].cardinality)
    }

    pub fn dataset_size(&self) -> usize {
        self.factors.iter().map(|f| f.cardinality).product()
    }

    pub fn data_dim(&self) -> usize {
        self.image_side * self.image_side * self.channels
    }

    pub fn check_tuple(&self, tuple: &FactorTuple) -> Result<()> {
        if tuple.0.len() != self.factors.len() {
            return Err(Error::DimensionMismatch {
                what: "factor tuple",
                expected: self.factors.len(),
                got: tuple.0.len(),
            });
        }
        for (f, &v) in self.factors.iter().zip(&tuple.0) {
            if v >= f.cardinality {
                return Err(Error::InvalidArgument(format!(
                    "factor `{}` index {v} out of range 0..{}",
                    f.name, f.cardinality
                )));
            }
        }
        Ok(())
    }

    /// Lexicographic position of a tuple; the last factor varies fastest.
    pub fn index_of(&self, tuple: &FactorTuple) -> usize {
        self.factors.iter().zip(&tuple.0).fold(0, |acc, (f, &v)| acc * f.cardinality + v)
    }

    pub fn tuple_at(&self, mut index: usize) -> FactorTuple {
        let mut out = vec![0; self.factors.len()];
        for (slot, f) in out.iter_mut().zip(&self.factors).rev() {
            *slot = index % f.cardinality;
            index /= f.cardinality;
        }
        FactorTuple(out)
    }

    /// All tuples in lexicographic order.
    pub fn tuples(&self) -> impl Iterator<Item = FactorTuple> + '_ {
        (0..self.dataset_size()).map(|i| self.tuple_at(i))
    }

    fn value(&self, tuple: &FactorTuple, name: &str) -> usize {
        self.position(name).map_or(0, |k| tuple.0[k])
    }

    pub fn header(&self) -> String {
        let factors: Vec<String> = self.factors.iter().map(|f| format!("{}:{}", f.name, f.cardinality)).collect();
        format!(
            "fds v1 side={} channels={} factors={}",
            self.image_side,
            self.channels,
            factors.join(",")
        )
    }

    pub fn parse_header(line: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("bad dataset header `{line}`"));
        let mut parts = line.split_whitespace();
        if parts.next() != Some("fds") || parts.next() != Some("v1") {
            return Err(bad());
        }
        let (mut side, mut channels, mut factors) = (None, None, None);
        for part in parts {
            let (key, value) = part.split_once('=').ok_or_else(bad)?;
            match key {
                "side" => side = Some(value.parse().map_err(|_| bad())?),
                "channels" => channels = Some(value.parse().map_err(|_| bad())?),
                "factors" => {
                    let mut list = Vec::new();
                    for item in value.split(',') {
                        let (name, card) = item.split_once(':').ok_or_else(bad)?;
                        list.push(Factor {
                            name: name.to_string(),
                            cardinality: card.parse().map_err(|_| bad())?,
                        });
                    }
                    factors = Some(list);
                }
                "config" => {}
                _ => return Err(bad()),
            }
        }
        let spec = FactorSpec {
            factors: factors.ok_or_else(bad)?,
            image_side: side.ok_or_else(bad)?,
            channels: channels.ok_or_else(bad)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Rasterize one tuple into `out` (channel-last, row-major, values in [0,1]).
pub fn render_into(spec: &FactorSpec, tuple: &FactorTuple, out: &mut [f64]) -> Result<()> {
    spec.check_tuple(tuple)?;
    if out.len() != spec.data_dim() {
        return Err(Error::DimensionMismatch {
            what: "image buffer",
            expected: spec.data_dim(),
            got: out.len(),
        });
    }
    let side = spec.image_side as f64;
    let unit = side / 32.0;
    let shape = spec.value(tuple, "shape");

    let n_scale = spec.cardinality("scale").unwrap_or(1);
    let frac = |v: usize, n: usize| if n > 1 { v as f64 / (n - 1) as f64 } else { 0.0 };
    let half = unit * (3.0 + 3.0 * frac(spec.value(tuple, "scale"), n_scale));

    let n_orient = spec.cardinality("orientation").unwrap_or(1);
    let angle = std::f64::consts::FRAC_PI_2 * spec.value(tuple, "orientation") as f64 / n_orient as f64;
    let (sin, cos) = angle.sin_cos();

    // Centers span [9, 23] on the 32-pixel grid, symmetric about the middle.
    let lo = 9.0 * unit;
    let span = side - 2.0 * lo;
    let cx = lo + span * frac(spec.value(tuple, "pos_x"), spec.cardinality("pos_x").unwrap_or(1));
    let cy = lo + span * frac(spec.value(tuple, "pos_y"), spec.cardinality("pos_y").unwrap_or(1));

    let inside = |px: f64, py: f64| -> bool {
        let (dx, dy) = (px - cx, py - cy);
        let u = cos * dx + sin * dy;
        let v = -sin * dx + cos * dy;
        match shape {
            0 => u.abs() <= half && v.abs() <= half,
            1 => (u / half).powi(2) + (v / (0.55 * half)).powi(2) <= 1.0,
            _ => {
                // Equilateral triangle with circumradius 1.2·half, apex up.
                let r = 1.2 * half;
                let s3 = 3f64.sqrt() / 2.0;
                v <= r / 2.0 && (s3 * u - 0.5 * v) <= r / 2.0 && (-s3 * u - 0.5 * v) <= r / 2.0
            }
        }
    };

    let color = match spec.position("color") {
        Some(k) => PALETTE[tuple.0[k]],
        None => [1.0; 3],
    };
    let sub = SUPERSAMPLE as f64;
    let norm = 1.0 / (sub * sub);
    for row in 0..spec.image_side {
        for col in 0..spec.image_side {
            let mut hits = 0usize;
            for a in 0..SUPERSAMPLE {
                for b in 0..SUPERSAMPLE {
                    let px = col as f64 + (b as f64 + 0.5) / sub;
                    let py = row as f64 + (a as f64 + 0.5) / sub;
                    hits += inside(px, py) as usize;
                }
            }
            let cover = hits as f64 * norm;
            let base = (row * spec.image_side + col) * spec.channels;
            for c in 0..spec.channels {
                out[base + c] = cover * if spec.channels == 1 { 1.0 } else { color[c] };
            }
        }
    }
    Ok(())
}

pub fn render(spec: &FactorSpec, tuple: &FactorTuple) -> Result<Vec<f64>> {
    let mut out = vec![0.0; spec.data_dim()];
    render_into(spec, tuple, &mut out)?;
    Ok(out)
}

pub fn derive_attributes(tuple: &FactorTuple, spec: &FactorSpec) -> AttributeSet {
    let lower_half = |name: &str| spec.value(tuple, name) < spec.cardinality(name).unwrap_or(2).div_ceil(2);
    AttributeSet {
        is_square: spec.value(tuple, "shape") == 0,
        is_large: !lower_half("scale"),
        is_left: lower_half("pos_x"),
        is_top: lower_half("pos_y"),
        is_upright: lower_half("orientation"),
    }
}

/// Seeded permutation split into `(train, eval)` index lists.
pub fn dataset_split(spec: &FactorSpec, seed: u64, train_fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = spec.dataset_size();
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} leaves an empty split of {n} items"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, 0x5EED_5B17, 0));
    let eval = order.split_off(n_train);
    Ok((order, eval))
}

/// The fully rendered dataset in lexicographic tuple order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: FactorSpec,
    pub images: Vec<f64>,
}

impl Dataset {
    pub fn generate(spec: FactorSpec) -> Result<Self> {
        spec.validate()?;
        let dim = spec.data_dim();
        let mut images = vec![0.0; dim * spec.dataset_size()];
        for (i, chunk) in images.chunks_mut(dim).enumerate() {
            render_into(&spec, &spec.tuple_at(i), chunk)?;
        }
        Ok(Dataset { spec, images })
    }

    pub fn len(&self) -> usize {
        self.spec.dataset_size()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.spec.data_dim()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.images[i * d..(i + 1) * d]
    }

    pub fn tuple(&self, i: usize) -> FactorTuple {
        self.spec.tuple_at(i)
    }

    /// Factor labels of the given items, one row per item.
    pub fn factor_labels(&self, indices: &[usize]) -> Vec<Vec<usize>> {
        indices.iter().map(|&i| self.tuple(i).0).collect()
    }

    pub fn attributes(&self, indices: &[usize]) -> Vec<AttributeSet> {
        indices.iter().map(|&i| derive_attributes(&self.tuple(i), &self.spec)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.images.len() * 4);
        out.extend_from_slice(self.spec.header().as_bytes());
        out.push(b'\n');
        for &v in &self.images {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Parse("dataset header missing".into()))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Parse("dataset header is not UTF-8".into()))?;
        let spec = FactorSpec::parse_header(header)?;
        let payload = &bytes[nl + 1..];
        let expected = spec.data_dim() * spec.dataset_size() * 4;
        if payload.len() != expected {
            return Err(Error::Parse(format!(
                "dataset payload has {} bytes, expected {expected}",
                payload.len()
            )));
        }
        let images = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Dataset { spec, images })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn attributes_csv(&self) -> String {
        let mut s = String::new();
        let names: Vec<&str> = self.spec.factors.iter().map(|f| f.name.as_str()).collect();
        let _ = writeln!(s, "index,{},{}", names.join(","), AttributeSet::NAMES.join(","));
        for i in 0..self.len() {
            let t = self.tuple(i);
            let a = derive_attributes(&t, &self.spec);
            let idx: Vec<String> = t.0.iter().map(|v| v.to_string()).collect();
            let flags: Vec<&str> = a.values().iter().map(|&b| if b { "1" } else { "0" }).collect();
            let _ = writeln!(s, "{i},{},{}", idx.join(","), flags.join(","));
        }
        s
    }

    pub fn save_attributes(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.attributes_csv().as_bytes())
    }
}
