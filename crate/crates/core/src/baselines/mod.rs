//! Classical interference mitigation: detection, zeroing, IMAT and ramp
//! filtering.

use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::rd_signal::{
    doppler_transform, generate_components, range_doppler, range_profiles, CMatrix, Frame,
    RadarConfig, RdMap, ScenarioConfig, Split,
};
use crate::{Error, Result};

/// Slack factor of the ramp filter's magnitude ceiling.
pub const RAMP_FILTER_SLACK: f64 = 2.0;

/// Detected interference samples, row-major `N x M` like the frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionMask {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl DetectionMask {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "mask has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![false; rows * cols] }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    fn check(&self, frame: &Frame) -> Result<()> {
        if frame.0.shape() != (self.rows, self.cols) {
            return Err(Error::Shape(format!(
                "mask is {}x{}, frame is {:?}",
                self.rows,
                self.cols,
                frame.0.shape()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// Probability that a sample's detector decision is correct.
    pub det_accuracy: f64,
    pub imat_iters: usize,
    /// First IMAT threshold as a fraction of the largest spectral magnitude.
    pub imat_init_fraction: f64,
    pub imat_decay: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            det_accuracy: 0.9,
            imat_iters: 10,
            imat_init_fraction: 0.9,
            imat_decay: 0.8,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.det_accuracy > 0.0 && self.det_accuracy <= 1.0) {
            return Err(Error::Config(format!(
                "detector accuracy must be in (0, 1], got {}",
                self.det_accuracy
            )));
        }
        if !(self.imat_decay > 0.0 && self.imat_decay < 1.0) {
            return Err(Error::Config(format!(
                "IMAT decay must be in (0, 1), got {}",
                self.imat_decay
            )));
        }
        if !(self.imat_init_fraction > 0.0 && self.imat_init_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "IMAT initial threshold fraction must be in (0, 1], got {}",
                self.imat_init_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Zeroing,
    Imat,
    RampFilter,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Zeroing => "zeroing",
            Self::Imat => "imat",
            Self::RampFilter => "rfmin",
        }
    }

    pub fn needs_mask(self) -> bool {
        !matches!(self, Self::RampFilter)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeroing" => Ok(Self::Zeroing),
            "imat" => Ok(Self::Imat),
            "rfmin" | "ramp_filter" => Ok(Self::RampFilter),
            _ => Err(Error::Config(format!("unknown baseline method {s:?}"))),
        }
    }
}

/// Simulated detector: each ground-truth decision flips independently with
/// probability `1 - accuracy`.
pub fn detect_interference<R: Rng + ?Sized>(
    frame: &Frame,
    gt_mask: &[bool],
    accuracy: f64,
    rng: &mut R,
) -> Result<DetectionMask> {
    if !(accuracy > 0.0 && accuracy <= 1.0) {
        return Err(Error::Config(format!(
            "detector accuracy must be in (0, 1], got {accuracy}"
        )));
    }
    let (rows, cols) = frame.0.shape();
    let mut mask = DetectionMask::new(rows, cols, gt_mask.to_vec())?;
    if accuracy < 1.0 {
        for b in &mut mask.data {
            if rng.random_bool(1.0 - accuracy) {
                *b = !*b;
            }
        }
    }
    Ok(mask)
}

/// Sets masked samples to zero.
pub fn zeroing(frame: &Frame, mask: &DetectionMask) -> Result<Frame> {
    mask.check(frame)?;
    let mut out = frame.clone();
    for (z, &m) in out.0.as_mut_slice().iter_mut().zip(&mask.data) {
        if m {
            *z = Complex64::new(0.0, 0.0);
        }
    }
    Ok(out)
}

/// Iterative reconstruction of masked samples by hard thresholding each
/// ramp's spectrum with a geometrically decaying threshold.
pub fn imat(frame: &Frame, mask: &DetectionMask, cfg: &BaselineConfig) -> Result<Frame> {
    cfg.validate()?;
    let mut out = zeroing(frame, mask)?;
    if cfg.imat_iters == 0 {
        return Ok(out);
    }
    let (n, m) = frame.0.shape();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let norm = 1.0 / n as f64;
    let mut spec = vec![Complex64::new(0.0, 0.0); n];
    for col in 0..m {
        let hit: Vec<usize> = (0..n).filter(|&r| mask.data[r * m + col]).collect();
        if hit.is_empty() {
            continue;
        }
        let mut ramp = out.0.column(col);
        let mut threshold = None;
        for _ in 0..cfg.imat_iters {
            spec.copy_from_slice(&ramp);
            fwd.process(&mut spec);
            let t = *threshold.get_or_insert_with(|| {
                cfg.imat_init_fraction * spec.iter().map(|z| z.norm()).fold(0.0, f64::max)
            });
            for z in spec.iter_mut() {
                if z.norm() < t {
                    *z = Complex64::new(0.0, 0.0);
                }
            }
            inv.process(&mut spec);
            for &r in &hit {
                ramp[r] = spec[r] * norm;
            }
            threshold = Some(t * cfg.imat_decay);
        }
        out.0.set_column(col, &ramp);
    }
    Ok(out)
}

/// Clips range-profile magnitudes per range bin to `c` times the magnitude of
/// the bin's median-energy ramp, keeping phases, then runs the Doppler
/// transform.
pub fn ramp_filter(frame: &Frame, radar: &RadarConfig) -> Result<RdMap> {
    let mut profiles = range_profiles(frame, radar)?;
    clip_profiles(&mut profiles, RAMP_FILTER_SLACK);
    doppler_transform(&profiles, radar)
}

fn clip_profiles(profiles: &mut CMatrix, slack: f64) {
    let (_, m) = profiles.shape();
    let mut mags = vec![0.0; m];
    for row in profiles.as_mut_slice().chunks_mut(m) {
        for (v, z) in mags.iter_mut().zip(row.iter()) {
            *v = z.norm();
        }
        let (_, median, _) = mags.select_nth_unstable_by(m / 2, f64::total_cmp);
        let ceiling = slack * *median;
        for z in row.iter_mut() {
            let mag = z.norm();
            if mag > ceiling {
                *z *= ceiling / mag;
            }
        }
    }
}

/// Applies `method` to one frame and returns the mitigated RD map.
pub fn mitigate(
    method: Method,
    frame: &Frame,
    mask: Option<&DetectionMask>,
    radar: &RadarConfig,
    cfg: &BaselineConfig,
) -> Result<RdMap> {
    let need = || Error::Config(format!("{} needs a detection mask", method.name()));
    match method {
        Method::Zeroing => range_doppler(&zeroing(frame, mask.ok_or_else(need)?)?, radar),
        Method::Imat => range_doppler(&imat(frame, mask.ok_or_else(need)?, cfg)?, radar),
        Method::RampFilter => ramp_filter(frame, radar),
    }
}

fn detector_rng(seed: u64, split: Split, idx: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.stream_id() << 40) | idx as u64);
    rng
}

/// Regenerates `count` frames of `split` and mitigates each one. The detector
/// of sample `i` draws from its own stream of `seed`.
pub fn run_baseline(
    method: Method,
    radar: &RadarConfig,
    scenario: &ScenarioConfig,
    split: Split,
    count: usize,
    cfg: &BaselineConfig,
    seed: u64,
) -> Result<Vec<RdMap>> {
    cfg.validate()?;
    (0..count)
        .map(|i| {
            let c = generate_components(radar, scenario, split, i)?;
            let frame = c.interfered_frame()?;
            let mask = if method.needs_mask() {
                let mut rng = detector_rng(seed, split, i);
                Some(detect_interference(&frame, &c.mask, cfg.det_accuracy, &mut rng)?)
            } else {
                None
            };
            mitigate(method, &frame, mask.as_ref(), radar, cfg)
        })
        .collect()
}
