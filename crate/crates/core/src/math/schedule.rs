//! Discretized noise schedules shared by the VAE (σ_β) and the diffusion
//! model (σ_t). Time and β live on the same grid `{ i·B/N }`.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeTag {
    Linear,
    Sched1,
    Sched2,
    Learned,
}

impl fmt::Display for ShapeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ShapeTag::Linear => "linear",
            ShapeTag::Sched1 => "sched1",
            ShapeTag::Sched2 => "sched2",
            ShapeTag::Learned => "learned",
        };
        f.write_str(s)
    }
}

impl FromStr for ShapeTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ShapeTag::Linear),
            "sched1" => Ok(ShapeTag::Sched1),
            "sched2" => Ok(ShapeTag::Sched2),
            "learned" => Ok(ShapeTag::Learned),
            other => Err(Error::Parse(format!("unknown schedule tag `{other}`"))),
        }
    }
}

/// Noise levels `σ_{iB/N}` for `i = 0..=N`.
///
/// Invariants, checked at construction: `N ≥ 1`, `B > 0`, every σ finite and
/// non-negative, non-decreasing in `i`, and `σ_N > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    n_steps: usize,
    horizon: f64,
    sigmas: Vec<f64>,
    tag: ShapeTag,
}

impl Schedule {
    pub fn new(n_steps: usize, horizon: f64, sigmas: Vec<f64>, tag: ShapeTag) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidSchedule("N must be positive".into()));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidSchedule(format!("horizon must be positive, got {horizon}")));
        }
        if sigmas.len() != n_steps + 1 {
            return Err(Error::InvalidSchedule(format!(
                "expected {} sigma values, got {}",
                n_steps + 1,
                sigmas.len()
            )));
        }
        for (i, &s) in sigmas.iter().enumerate() {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::InvalidSchedule(format!(
                    "sigma[{i}] = {s} is not a finite non-negative value"
                )));
            }
        }
        for i in 1..sigmas.len() {
            if sigmas[i] < sigmas[i - 1] {
                return Err(Error::InvalidSchedule(format!(
                    "sigma decreases at step {i}: {} -> {}",
                    sigmas[i - 1],
                    sigmas[i]
                )));
            }
        }
        if sigmas[n_steps] <= 0.0 {
            return Err(Error::InvalidSchedule("sigma_N must be positive".into()));
        }
        Ok(Schedule {
            n_steps,
            horizon,
            sigmas,
            tag,
        })
    }

    /// `σ(t) = σ_max · t/B`.
    pub fn linear(n_steps: usize, horizon: f64, sigma_max: f64) -> Result<Self> {
        let sigmas = (0..=n_steps).map(|i| sigma_max * i as f64 / n_steps as f64).collect();
        Schedule::new(n_steps, horizon, sigmas, ShapeTag::Linear)
    }

    /// Power-law shape `σ(t) = σ_max · (t/B)^p`.
    pub fn sched1(n_steps: usize, horizon: f64, sigma_max: f64, power: f64) -> Result<Self> {
        if !(power > 0.0) {
            return Err(Error::InvalidSchedule(format!("power must be positive, got {power}")));
        }
        let sigmas = (0..=n_steps).map(|i| sigma_max * (i as f64 / n_steps as f64).powf(power)).collect();
        Schedule::new(n_steps, horizon, sigmas, ShapeTag::Sched1)
    }

    /// Sinusoidal shape `σ(t) = σ_max · sin(π t / (2B))^p`.
    pub fn sched2(n_steps: usize, horizon: f64, sigma_max: f64, power: f64) -> Result<Self> {
        if !(power > 0.0) {
            return Err(Error::InvalidSchedule(format!("power must be positive, got {power}")));
        }
        let sigmas = (0..=n_steps)
            .map(|i| {
                let u = i as f64 / n_steps as f64;
                // sin(π/2) is not exactly 1.0 in floating point.
                let s = if i == n_steps { 1.0 } else { (FRAC_PI_2 * u).sin() };
                sigma_max * s.powf(power)
            })
            .collect();
        Schedule::new(n_steps, horizon, sigmas, ShapeTag::Sched2)
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn tag(&self) -> ShapeTag {
        self.tag
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// One grid step, `τ = B/N`.
    pub fn tau(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Time of grid index `i`.
    pub fn time(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.horizon
        } else {
            self.horizon * i as f64 / self.n_steps as f64
        }
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.sigmas[i]
    }

    /// Piecewise-linear σ at an arbitrary time in `[0, B]`.
    pub fn sigma_at(&self, t: f64) -> f64 {
        let (lo, w) = grid_position(t, self.horizon, self.n_steps);
        if w == 0.0 {
            self.sigmas[lo]
        } else {
            (1.0 - w) * self.sigmas[lo] + w * self.sigmas[lo + 1]
        }
    }

    pub(crate) fn check_step(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.n_steps {
            Err(Error::StepOutOfRange {
                index: i,
                n_steps: self.n_steps,
            })
        } else {
            Ok(())
        }
    }

    /// Extra conditions the reverse chain needs: σ_t > 0 for every `t ≥ τ`,
    /// and noise must keep growing after the first step.
    pub fn validate_for_sampling(&self) -> Result<()> {
        if let Some(i) = (1..=self.n_steps).find(|&i| self.sigmas[i] <= 0.0) {
            return Err(Error::InvalidSchedule(format!("sigma[{i}] must be positive for sampling")));
        }
        if self.n_steps > 1 && self.sigmas[self.n_steps] <= self.sigmas[1] {
            return Err(Error::InvalidSchedule(
                "degenerate schedule: no noise growth after the first step".into(),
            ));
        }
        Ok(())
    }

    /// Warnings for shapes that grow sub-linearly on `t < B/2`, i.e. fall below
    /// the chord from `(0, σ_0)` to `(B, σ_N)`. Such schedules are accepted.
    pub fn lint(&self) -> Vec<String> {
        let n = self.n_steps;
        let (s0, sn) = (self.sigmas[0], self.sigmas[n]);
        let below: Vec<usize> = (1..n)
            .filter(|&i| 2 * i < n)
            .filter(|&i| {
                let chord = s0 + (sn - s0) * i as f64 / n as f64;
                self.sigmas[i] < chord - 1e-12 * sn
            })
            .collect();
        if below.is_empty() {
            Vec::new()
        } else {
            vec![format!(
                "schedule grows sub-linearly for t < B/2 at {} of {} grid points; diffusion training may fail",
                below.len(),
                n.div_ceil(2) - 1
            )]
        }
    }

    /// Text container: header line then `N + 1` sigma values at 17 significant
    /// digits, one per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("schedule v1 N={} B={} tag={}\n", self.n_steps, fmt_f64(self.horizon), self.tag);
        for s in &self.sigmas {
            out.push_str(&fmt_f64(*s));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty schedule file".into()))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("schedule") || parts.next() != Some("v1") {
            return Err(Error::Parse(format!("bad schedule header `{header}`")));
        }
        let (mut n, mut b, mut tag) = (None, None, None);
        for kv in parts {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Parse(format!("bad header field `{kv}`")))?;
            match k {
                "N" => n = Some(v.parse::<usize>().map_err(|e| Error::Parse(e.to_string()))?),
                "B" => b = Some(v.parse::<f64>().map_err(|e| Error::Parse(e.to_string()))?),
                "tag" => tag = Some(v.parse::<ShapeTag>()?),
                "config" => {}
                _ => return Err(Error::Parse(format!("unknown header field `{k}`"))),
            }
        }
        let (n, b, tag) = match (n, b, tag) {
            (Some(n), Some(b), Some(t)) => (n, b, t),
            _ => return Err(Error::Parse("schedule header missing N, B or tag".into())),
        };
        let sigmas = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>().map_err(|e| Error::Parse(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Schedule::new(n, b, sigmas, tag)
    }
}

/// Lower grid index and interpolation weight of time `t` (clamped to `[0, B]`).
pub(crate) fn grid_position(t: f64, horizon: f64, n_steps: usize) -> (usize, f64) {
    let u = (t / horizon).clamp(0.0, 1.0) * n_steps as f64;
    let lo = (u.floor() as usize).min(n_steps);
    if lo == n_steps {
        (n_steps, 0.0)
    } else {
        (lo, u - lo as f64)
    }
}

/// 17 significant digits; parses back to the identical `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_malformed_schedules() {
        assert!(Schedule::new(2, 1.0, vec![0.0, 0.5], ShapeTag::Learned).is_err());
        assert!(Schedule::new(2, 1.0, vec![0.0, 0.6, 0.5], ShapeTag::Learned).is_err());
        assert!(Schedule::new(2, 1.0, vec![0.0, 0.0, 0.0], ShapeTag::Learned).is_err());
        assert!(Schedule::new(2, 1.0, vec![-0.1, 0.2, 0.5], ShapeTag::Learned).is_err());
        assert!(Schedule::new(2, 0.0, vec![0.0, 0.2, 0.5], ShapeTag::Learned).is_err());
        assert!(Schedule::new(2, 1.0, vec![0.0, f64::NAN, 0.5], ShapeTag::Learned).is_err());
    }

    #[test]
    fn degenerate_schedule_rejected_for_sampling() {
        let s = Schedule::new(4, 1.0, vec![0.0, 1.0, 1.0, 1.0, 1.0], ShapeTag::Learned).unwrap();
        assert!(s.validate_for_sampling().is_err());
        let s = Schedule::new(4, 1.0, vec![0.0, 0.0, 0.5, 0.7, 1.0], ShapeTag::Learned).unwrap();
        assert!(s.validate_for_sampling().is_err());
        Schedule::linear(4, 1.0, 1.0).unwrap().validate_for_sampling().unwrap();
    }

    #[test]
    fn shapes_hit_endpoints() {
        for s in [
            Schedule::linear(10, 1.0, 1.0).unwrap(),
            Schedule::sched1(10, 1.0, 1.0, 0.5).unwrap(),
            Schedule::sched2(10, 1.0, 1.0, 1.0).unwrap(),
        ] {
            assert_eq!(s.sigma(0), 0.0);
            assert_eq!(s.sigma(10), 1.0);
        }
    }

    #[test]
    fn lint_flags_sublinear_growth_only() {
        assert!(Schedule::linear(10, 1.0, 1.0).unwrap().lint().is_empty());
        assert!(Schedule::sched2(10, 1.0, 1.0, 1.0).unwrap().lint().is_empty());
        assert!(Schedule::sched1(10, 1.0, 1.0, 0.5).unwrap().lint().is_empty());
        assert_eq!(Schedule::sched1(10, 1.0, 1.0, 2.0).unwrap().lint().len(), 1);
    }

    #[test]
    fn sigma_at_interpolates() {
        let s = Schedule::linear(10, 2.0, 1.0).unwrap();
        assert!((s.sigma_at(0.3) - 0.15).abs() < 1e-15);
        assert_eq!(s.sigma_at(2.0), 1.0);
        assert_eq!(s.sigma_at(5.0), 1.0);
        assert_eq!(s.sigma_at(-1.0), 0.0);
    }

    #[test]
    fn text_round_trip_is_exact() {
        let s = Schedule::sched2(7, 0.3, 1.234567890123, 1.7).unwrap();
        let back = Schedule::from_text(&s.to_text()).unwrap();
        assert_eq!(s, back);
        assert!(s.to_text().starts_with("schedule v1 N=7 B="));
    }

    #[test]
    fn from_text_rejects_bad_header() {
        assert!(Schedule::from_text("sched v1 N=1 B=1 tag=linear\n0\n1\n").is_err());
        assert!(Schedule::from_text("schedule v1 N=1 B=1 tag=wobbly\n0\n1\n").is_err());
        assert!(Schedule::from_text("schedule v1 N=2 B=1 tag=linear\n0\n1\n").is_err());
    }
}
