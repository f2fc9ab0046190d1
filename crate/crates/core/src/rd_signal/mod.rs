//! FMCW/CS signal synthesis, range-Doppler processing and labeled datasets.
//!
//! An IF frame is an `N x M` complex matrix (fast time x slow time). It is the
//! sum of object sinusoids, chirp-burst interference and circular complex
//! white noise. The range-Doppler map is the separable 2-D DFT of the
//! (optionally windowed) frame with unitary normalization.

mod dataset;
mod processing;
mod synth;

use std::ops::{Index, IndexMut};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use dataset::{
    gen_dataset, generate_components, is_local_max, read_dataset, write_dataset, Dataset, DatasetMeta,
    LabeledSample, SampleComponents, SampleRecord, ScenarioConfig, Split,
    DATASET_FORMAT_VERSION,
};
pub use processing::{hann_window, range_doppler, range_profiles, doppler_transform};
pub use synth::{
    compose_frame, interference_mask, synth_interference, synth_noise, synth_noise_with,
    synth_object,
};

/// Window applied along each dimension before its DFT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    None,
    Hann,
}

/// Radar frame geometry and processing options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarConfig {
    /// Fast-time samples per ramp (N). Also the number of range bins.
    pub n_fast: usize,
    /// Ramps per frame (M). Also the number of Doppler bins.
    pub m_ramps: usize,
    /// Sampling period T_s in seconds.
    pub sample_period: f64,
    pub window: Window,
    pub rng_seed: u64,
}

impl Default for RadarConfig {
    fn default() -> Self {
        Self {
            n_fast: 96,
            m_ramps: 96,
            sample_period: 1e-7,
            window: Window::Hann,
            rng_seed: 0,
        }
    }
}

impl RadarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_fast < 8 || self.m_ramps < 8 {
            return Err(Error::Config(format!(
                "frame must be at least 8x8, got {}x{}",
                self.n_fast, self.m_ramps
            )));
        }
        if !(self.sample_period > 0.0 && self.sample_period.is_finite()) {
            return Err(Error::Config(format!(
                "sample period must be positive, got {}",
                self.sample_period
            )));
        }
        Ok(())
    }

    /// RD map height (range bins).
    pub fn rd_height(&self) -> usize {
        self.n_fast
    }

    /// RD map width (Doppler bins).
    pub fn rd_width(&self) -> usize {
        self.m_ramps
    }

    pub fn rd_cells(&self) -> usize {
        self.n_fast * self.m_ramps
    }

    /// Power gain of the configured window, averaged over the frame.
    pub fn window_power_gain(&self) -> f64 {
        match self.window {
            Window::None => 1.0,
            Window::Hann => {
                let mean_sq = |len: usize| {
                    hann_window(len).iter().map(|w| w * w).sum::<f64>() / len as f64
                };
                mean_sq(self.n_fast) * mean_sq(self.m_ramps)
            }
        }
    }

    /// Amplitude gain of an on-grid sinusoid's RD peak relative to its
    /// time-domain amplitude.
    pub fn peak_amplitude_gain(&self) -> f64 {
        let sum = |len: usize| match self.window {
            Window::None => len as f64,
            Window::Hann => hann_window(len).iter().sum::<f64>(),
        };
        sum(self.n_fast) * sum(self.m_ramps) / (self.rd_cells() as f64).sqrt()
    }
}

/// Dense row-major complex matrix. Row index is fast time / range, column
/// index is slow time / Doppler.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<Complex64> {
        self.data
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&z| f(z)).collect(),
        }
    }

    pub fn column(&self, c: usize) -> Vec<Complex64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[Complex64]) {
        for (r, v) in values.iter().enumerate() {
            self[(r, c)] = *v;
        }
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: Complex64) -> Self {
        self.map(|z| z * s)
    }
}

impl Index<(usize, usize)> for CMatrix {
    type Output = Complex64;

    fn index(&self, (r, c): (usize, usize)) -> &Complex64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for CMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut Complex64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Time-domain IF frame `s_IF[n, m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame(pub CMatrix);

impl Frame {
    pub fn zeros(cfg: &RadarConfig) -> Self {
        Frame(CMatrix::zeros(cfg.n_fast, cfg.m_ramps))
    }
}

/// Range-Doppler spectrum `S_RD[n, m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RdMap(pub CMatrix);

impl RdMap {
    pub fn power(&self) -> Vec<f64> {
        self.0.as_slice().iter().map(|z| z.norm_sqr()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.0
            .as_slice()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }
}

/// One reflecting object: a 2-D complex sinusoid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectParams {
    pub amplitude: f64,
    /// Fast-time frequency, cycles per sample.
    pub range_freq: f64,
    /// Slow-time frequency, cycles per ramp.
    pub doppler_freq: f64,
    pub phase: f64,
}

impl ObjectParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude > 0.0) {
            return Err(Error::Config(format!(
                "object amplitude must be positive, got {}",
                self.amplitude
            )));
        }
        if self.range_freq.abs() > 0.5 || self.doppler_freq.abs() > 0.5 {
            return Err(Error::Config(format!(
                "object frequencies must lie in [-0.5, 0.5], got ({}, {})",
                self.range_freq, self.doppler_freq
            )));
        }
        Ok(())
    }

    /// Object placed exactly on RD bin `(range_bin, doppler_bin)`.
    pub fn on_grid(
        cfg: &RadarConfig,
        range_bin: usize,
        doppler_bin: usize,
        amplitude: f64,
        phase: f64,
    ) -> Self {
        let signed = |bin: usize, len: usize| {
            let f = bin as f64 / len as f64;
            if f >= 0.5 {
                f - 1.0
            } else {
                f
            }
        };
        Self {
            amplitude,
            range_freq: signed(range_bin, cfg.n_fast),
            doppler_freq: signed(doppler_bin, cfg.m_ramps),
            phase,
        }
    }
}

/// One chirp burst of a single interferer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BurstParams {
    pub amplitude: f64,
    /// Time delay tau_k in seconds: the instant the burst sweeps through DC.
    pub delay: f64,
    /// Half-duration T_k in seconds.
    pub half_duration: f64,
    pub phase: f64,
    /// Slow-time index m_k of the affected ramp.
    pub ramp_index: usize,
    pub burst_start: usize,
    pub burst_len: usize,
}

impl BurstParams {
    pub fn validate(&self, cfg: &RadarConfig) -> Result<()> {
        if !(self.half_duration > 0.0) {
            return Err(Error::Config(format!(
                "burst half-duration must be positive, got {}",
                self.half_duration
            )));
        }
        if self.ramp_index >= cfg.m_ramps {
            return Err(Error::Config(format!(
                "burst ramp index {} outside [0, {})",
                self.ramp_index, cfg.m_ramps
            )));
        }
        if self.burst_start + self.burst_len > cfg.n_fast {
            return Err(Error::Config(format!(
                "burst support [{}, {}) exceeds the {} fast-time samples",
                self.burst_start,
                self.burst_start + self.burst_len,
                cfg.n_fast
            )));
        }
        Ok(())
    }

    /// Burst phase at fast-time index `n` (radians).
    pub fn phase_at(&self, n: f64, sample_period: f64) -> f64 {
        let lin = self.delay / (2.0 * self.half_duration);
        let quad = sample_period / (2.0 * self.half_duration);
        -2.0 * std::f64::consts::PI * lin * n + std::f64::consts::PI * quad * n * n + self.phase
    }

    /// Instantaneous frequency at fast-time index `n`, cycles per sample.
    pub fn inst_freq(&self, n: f64, sample_period: f64) -> f64 {
        (n * sample_period - self.delay) / (2.0 * self.half_duration)
    }

    /// Fast-time indices where the burst stays within +-0.5 cycles/sample,
    /// clipped to the frame. Returns `(start, len)`.
    pub fn alias_free_support(
        delay: f64,
        half_duration: f64,
        sample_period: f64,
        n_fast: usize,
    ) -> (usize, usize) {
        // Tolerance keeps exact sample boundaries inside the support.
        let lo = ((delay - half_duration) / sample_period - 1e-9).ceil().max(0.0);
        let hi = ((delay + half_duration) / sample_period + 1e-9)
            .floor()
            .min(n_fast as f64 - 1.0);
        if hi < lo {
            return (lo.min(n_fast as f64) as usize, 0);
        }
        (lo as usize, (hi - lo) as usize + 1)
    }
}

/// Placement of an interferer's bursts over the ramps of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BurstPattern {
    /// Distinct random ramps; every burst draws its own parameters.
    Scattered,
    /// A run of consecutive ramps. Bursts share amplitude, duration and
    /// phase, and the delay moves by a fixed drift per ramp.
    Coherent,
}

/// Sampling ranges for one interferer's bursts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterfererConfig {
    pub pattern: BurstPattern,
    /// Inclusive range for the burst count K.
    pub burst_count: (usize, usize),
    /// Burst amplitude range, in dB of interference-to-noise power per sample.
    pub inr_db: (f64, f64),
    /// Delay range as a fraction of the ramp duration `N * T_s`.
    pub delay_frac: (f64, f64),
    /// Per-ramp delay drift range as a fraction of the ramp duration
    /// (coherent pattern only).
    pub delay_drift_frac: (f64, f64),
    /// Half-duration range in samples (`T_k / T_s`).
    pub half_duration_samples: (f64, f64),
    pub phase: (f64, f64),
    /// Impulse response `h[n]`.
    pub filter_taps: Vec<f64>,
}

impl Default for InterfererConfig {
    fn default() -> Self {
        Self {
            pattern: BurstPattern::Coherent,
            burst_count: (20, 40),
            inr_db: (0.0, 15.0),
            delay_frac: (0.1, 0.9),
            delay_drift_frac: (0.0, 0.0),
            half_duration_samples: (6.0, 16.0),
            phase: (0.0, 2.0 * std::f64::consts::PI),
            filter_taps: vec![1.0],
        }
    }
}

impl InterfererConfig {
    pub fn validate(&self) -> Result<()> {
        let nonempty = |name: &str, lo: f64, hi: f64| {
            if lo <= hi && lo.is_finite() && hi.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("empty interval for {name}: [{lo}, {hi}]")))
            }
        };
        if self.burst_count.0 > self.burst_count.1 {
            return Err(Error::Config(format!(
                "empty burst count range {:?}",
                self.burst_count
            )));
        }
        nonempty("inr_db", self.inr_db.0, self.inr_db.1)?;
        nonempty("delay_frac", self.delay_frac.0, self.delay_frac.1)?;
        nonempty("delay_drift_frac", self.delay_drift_frac.0, self.delay_drift_frac.1)?;
        nonempty(
            "half_duration_samples",
            self.half_duration_samples.0,
            self.half_duration_samples.1,
        )?;
        if self.half_duration_samples.0 <= 0.0 {
            return Err(Error::Config("burst half-duration must be positive".into()));
        }
        nonempty("phase", self.phase.0, self.phase.1)?;
        if self.filter_taps.is_empty() {
            return Err(Error::Config("filter taps must be nonempty".into()));
        }
        Ok(())
    }
}
