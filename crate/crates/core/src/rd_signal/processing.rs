use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{CMatrix, Frame, RadarConfig, RdMap, Window};
use crate::{Error, Result};

/// Periodic (DFT-even) Hann window. An on-grid sinusoid windowed with it
/// occupies exactly three DFT bins.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos())
        .collect()
}

fn window_for(window: Window, len: usize) -> Vec<f64> {
    match window {
        Window::None => vec![1.0; len],
        Window::Hann => hann_window(len),
    }
}

fn plan(len: usize) -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_forward(len)
}

fn check_shape(frame: &CMatrix, cfg: &RadarConfig) -> Result<()> {
    if frame.shape() != (cfg.n_fast, cfg.m_ramps) {
        return Err(Error::Shape(format!(
            "frame is {:?}, config expects {}x{}",
            frame.shape(),
            cfg.n_fast,
            cfg.m_ramps
        )));
    }
    Ok(())
}

/// First DFT: window and transform each ramp over fast time, giving the range
/// profiles `S_R[n, m]`.
pub fn range_profiles(frame: &Frame, cfg: &RadarConfig) -> Result<CMatrix> {
    check_shape(&frame.0, cfg)?;
    let (n, m) = frame.0.shape();
    let w = window_for(cfg.window, n);
    let fft = plan(n);
    let norm = 1.0 / (n as f64).sqrt();
    let mut out = CMatrix::zeros(n, m);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for col in 0..m {
        for row in 0..n {
            buf[row] = frame.0[(row, col)] * w[row];
        }
        fft.process(&mut buf);
        for row in 0..n {
            out[(row, col)] = buf[row] * norm;
        }
    }
    Ok(out)
}

/// Second DFT: window and transform each range bin over slow time.
pub fn doppler_transform(profiles: &CMatrix, cfg: &RadarConfig) -> Result<RdMap> {
    check_shape(profiles, cfg)?;
    let (n, m) = profiles.shape();
    let w = window_for(cfg.window, m);
    let fft = plan(m);
    let norm = 1.0 / (m as f64).sqrt();
    let mut out = profiles.clone();
    for row in 0..n {
        let slice = &mut out.as_mut_slice()[row * m..(row + 1) * m];
        for (z, wi) in slice.iter_mut().zip(&w) {
            *z *= *wi;
        }
        fft.process(slice);
        for z in slice.iter_mut() {
            *z *= norm;
        }
    }
    Ok(RdMap(out))
}

/// Separable 2-D DFT (fast time, then slow time) with unitary scaling.
pub fn range_doppler(frame: &Frame, cfg: &RadarConfig) -> Result<RdMap> {
    doppler_transform(&range_profiles(frame, cfg)?, cfg)
}
