use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{BurstParams, CMatrix, Frame, ObjectParams, RadarConfig};
use crate::{Error, Result};

/// Object reflection `A * exp(j(2pi(f_r n + f_d m) + phi))`.
pub fn synth_object(cfg: &RadarConfig, obj: &ObjectParams) -> Frame {
    Frame(CMatrix::from_fn(cfg.n_fast, cfg.m_ramps, |n, m| {
        let arg = 2.0 * PI * (obj.range_freq * n as f64 + obj.doppler_freq * m as f64) + obj.phase;
        Complex64::from_polar(obj.amplitude, arg)
    }))
}

/// Chirp-burst interference. Each burst is a real cosine over its support on
/// ramp `m_k`, convolved causally with `taps` and truncated to the ramp.
pub fn synth_interference(
    cfg: &RadarConfig,
    bursts: &[BurstParams],
    taps: &[f64],
) -> Result<Frame> {
    if taps.is_empty() {
        return Err(Error::Config("filter taps must be nonempty".into()));
    }
    let mut out = CMatrix::zeros(cfg.n_fast, cfg.m_ramps);
    let mut raw = vec![0.0; cfg.n_fast];
    for burst in bursts {
        burst.validate(cfg)?;
        raw.iter_mut().for_each(|v| *v = 0.0);
        for n in burst.burst_start..burst.burst_start + burst.burst_len {
            raw[n] = burst.amplitude * burst.phase_at(n as f64, cfg.sample_period).cos();
        }
        let m = burst.ramp_index;
        for n in 0..cfg.n_fast {
            let mut acc = 0.0;
            for (t, h) in taps.iter().enumerate().take(n + 1) {
                acc += h * raw[n - t];
            }
            out[(n, m)] += Complex64::new(acc, 0.0);
        }
    }
    Ok(Frame(out))
}

/// Samples touched by any burst after filtering with a `taps_len`-tap
/// impulse response.
pub fn interference_mask(cfg: &RadarConfig, bursts: &[BurstParams], taps_len: usize) -> Vec<bool> {
    let mut mask = vec![false; cfg.rd_cells()];
    for b in bursts.iter().filter(|b| b.burst_len > 0) {
        let end = (b.burst_start + b.burst_len + taps_len.saturating_sub(1)).min(cfg.n_fast);
        for n in b.burst_start..end {
            mask[n * cfg.m_ramps + b.ramp_index] = true;
        }
    }
    mask
}

/// Circular complex white Gaussian noise with per-entry variance `power`,
/// seeded from `cfg.rng_seed`.
pub fn synth_noise(cfg: &RadarConfig, power: f64) -> Result<Frame> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    synth_noise_with(cfg, power, &mut rng)
}

/// As [`synth_noise`], drawing from a caller-owned stream.
pub fn synth_noise_with<R: Rng + ?Sized>(
    cfg: &RadarConfig,
    power: f64,
    rng: &mut R,
) -> Result<Frame> {
    if !(power >= 0.0) {
        return Err(Error::Config(format!("noise power must be >= 0, got {power}")));
    }
    let sigma = (power / 2.0).sqrt();
    Ok(Frame(CMatrix::from_fn(cfg.n_fast, cfg.m_ramps, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(sigma * re, sigma * im)
    })))
}

/// `objects + interference + noise`, elementwise.
pub fn compose_frame(objects: &Frame, interference: &Frame, noise: &Frame) -> Result<Frame> {
    Ok(Frame(objects.0.add(&interference.0)?.add(&noise.0)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rd_signal::Window;

    fn cfg(n: usize, m: usize) -> RadarConfig {
        RadarConfig {
            n_fast: n,
            m_ramps: m,
            sample_period: 1e-7,
            window: Window::None,
            rng_seed: 7,
        }
    }

    fn burst(cfg: &RadarConfig, ramp: usize, delay_samples: f64, half: f64) -> BurstParams {
        let ts = cfg.sample_period;
        let (burst_start, burst_len) =
            BurstParams::alias_free_support(delay_samples * ts, half * ts, ts, cfg.n_fast);
        BurstParams {
            amplitude: 3.0,
            delay: delay_samples * ts,
            half_duration: half * ts,
            phase: 0.4,
            ramp_index: ramp,
            burst_start,
            burst_len,
        }
    }

    #[test]
    fn zero_frequency_object_is_all_ones() {
        let c = cfg(8, 8);
        let obj = ObjectParams {
            amplitude: 1.0,
            range_freq: 0.0,
            doppler_freq: 0.0,
            phase: 0.0,
        };
        let f = synth_object(&c, &obj);
        for z in f.0.as_slice() {
            assert!((z - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn quarter_cycle_rotation() {
        let c = RadarConfig {
            n_fast: 8,
            ..cfg(8, 8)
        };
        let obj = ObjectParams {
            amplitude: 1.0,
            range_freq: 0.25,
            doppler_freq: 0.1,
            phase: 0.0,
        };
        let f = synth_object(&c, &obj);
        let expect = [
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 1.0),
            Complex64::new(-1.0, 0.0),
            Complex64::new(0.0, -1.0),
        ];
        for (n, e) in expect.iter().enumerate() {
            assert!((f.0[(n, 0)] - e).norm() < 1e-12, "n={n}");
        }
    }

    #[test]
    fn object_has_constant_modulus() {
        let c = cfg(16, 12);
        let obj = ObjectParams {
            amplitude: 2.5,
            range_freq: -0.31,
            doppler_freq: 0.17,
            phase: 1.3,
        };
        let f = synth_object(&c, &obj);
        assert!(f.0.as_slice().iter().all(|z| (z.norm() - 2.5).abs() < 1e-12));
    }

    #[test]
    fn empty_burst_list_gives_zero_frame() {
        let c = cfg(16, 16);
        let f = synth_interference(&c, &[], &[1.0]).unwrap();
        assert_eq!(f.0.energy(), 0.0);
    }

    #[test]
    fn single_burst_confined_to_its_ramp_and_support() {
        let c = cfg(64, 16);
        let b = burst(&c, 5, 30.0, 10.0);
        assert_eq!((b.burst_start, b.burst_len), (20, 21));
        let f = synth_interference(&c, &[b], &[1.0]).unwrap();
        for n in 0..c.n_fast {
            for m in 0..c.m_ramps {
                let inside = m == 5 && (20..41).contains(&n);
                if !inside {
                    assert_eq!(f.0[(n, m)], Complex64::new(0.0, 0.0), "({n},{m})");
                }
                assert_eq!(f.0[(n, m)].im, 0.0);
            }
        }
        assert!(f.0.column(5).iter().any(|z| z.re.abs() > 0.0));
    }

    #[test]
    fn burst_outside_frame_is_rejected() {
        let c = cfg(32, 8);
        let mut b = burst(&c, 1, 16.0, 4.0);
        b.burst_start = 30;
        b.burst_len = 5;
        assert!(synth_interference(&c, &[b], &[1.0]).is_err());
        let mut b = burst(&c, 1, 16.0, 4.0);
        b.ramp_index = 8;
        assert!(synth_interference(&c, &[b], &[1.0]).is_err());
    }

    #[test]
    fn phase_slope_matches_instantaneous_frequency() {
        // Finite difference of the generated phase against the analytic slope,
        // including the near-constant-frequency limit of a huge half-duration.
        let ts = 1e-7;
        for &(delay, half) in &[(30.0 * ts, 10.0 * ts), (5.0 * ts, 1e6 * ts)] {
            let b = BurstParams {
                amplitude: 1.0,
                delay,
                half_duration: half,
                phase: 0.3,
                ramp_index: 0,
                burst_start: 0,
                burst_len: 0,
            };
            for n in [3.0, 17.5, 40.0] {
                let h = 1e-4;
                let fd = (b.phase_at(n + h, ts) - b.phase_at(n - h, ts)) / (2.0 * h) / (2.0 * PI);
                let f = b.inst_freq(n, ts);
                assert!((fd - f).abs() < 1e-8, "fd {fd} vs analytic {f}");
            }
        }
        let nearly_constant = BurstParams {
            amplitude: 1.0,
            delay: 5.0 * ts,
            half_duration: 1e6 * ts,
            phase: 0.0,
            ramp_index: 0,
            burst_start: 0,
            burst_len: 0,
        };
        let f0 = nearly_constant.inst_freq(0.0, ts);
        let f1 = nearly_constant.inst_freq(100.0, ts);
        assert!((f0 + 5.0 / 2e6).abs() < 1e-15);
        assert!((f1 - f0).abs() < 1e-4);
    }

    #[test]
    fn filter_taps_extend_the_burst() {
        let c = cfg(64, 4);
        let b = burst(&c, 2, 30.0, 6.0);
        let taps = [0.5, 0.3, 0.2];
        let f = synth_interference(&c, &[b], &taps).unwrap();
        let mask = interference_mask(&c, &[b], taps.len());
        for n in 0..c.n_fast {
            for m in 0..c.m_ramps {
                if !mask[n * c.m_ramps + m] {
                    assert_eq!(f.0[(n, m)].norm(), 0.0);
                }
            }
        }
        // Filtered output equals direct convolution of the raw burst.
        let raw = synth_interference(&c, &[b], &[1.0]).unwrap();
        for n in 0..c.n_fast {
            let mut acc = 0.0;
            for (t, h) in taps.iter().enumerate() {
                if n >= t {
                    acc += h * raw.0[(n - t, 2)].re;
                }
            }
            assert!((f.0[(n, 2)].re - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_statistics_and_determinism() {
        let c = cfg(128, 128);
        assert_eq!(synth_noise(&c, 0.0).unwrap().0.energy(), 0.0);
        let a = synth_noise(&c, 1.0).unwrap();
        let mean_pow = a.0.energy() / c.rd_cells() as f64;
        assert!((0.95..=1.05).contains(&mean_pow), "mean power {mean_pow}");
        let b = synth_noise(&c, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(synth_noise(&c, -1.0).is_err());
    }

    #[test]
    fn compose_is_elementwise_sum() {
        let c = RadarConfig {
            rng_seed: 3,
            ..cfg(32, 16)
        };
        let o1 = synth_object(&c, &ObjectParams::on_grid(&c, 4, 3, 1.0, 0.2));
        let o2 = synth_object(&c, &ObjectParams::on_grid(&c, 20, 9, 0.3, 1.0));
        let objects = Frame(o1.0.add(&o2.0).unwrap());
        let intf = synth_interference(&c, &[burst(&c, 7, 16.0, 8.0)], &[1.0]).unwrap();
        let noise = synth_noise(&c, 0.5).unwrap();
        let f = compose_frame(&objects, &intf, &noise).unwrap();
        for i in 0..c.rd_cells() {
            let manual = o1.0.as_slice()[i]
                + o2.0.as_slice()[i]
                + intf.0.as_slice()[i]
                + noise.0.as_slice()[i];
            assert!((f.0.as_slice()[i] - manual).norm() < 1e-12);
        }
        let zero = Frame::zeros(&c);
        assert_eq!(compose_frame(&objects, &zero, &zero).unwrap(), objects);
        let swapped = compose_frame(&intf, &objects, &noise).unwrap();
        for (a, b) in f.0.as_slice().iter().zip(swapped.0.as_slice()) {
            assert!((a - b).norm() < 1e-12);
        }
        let wrong = Frame(CMatrix::zeros(8, 8));
        assert!(compose_frame(&objects, &wrong, &noise).is_err());
    }
}
