use num_complex::Complex64;
use proptest::prelude::*;
use qradar::eval::{match_and_score, Detection};
use qradar::quant::{grid_max_index, pack_weights, packed_len, unpack_weights};
use qradar::rd_signal::{hann_window, range_doppler, CMatrix, Frame, RadarConfig, Window};

/// Direct 2-D DFT with the same windows and unitary scaling.
fn naive_rd(x: &[Complex64], n: usize, m: usize, window: Window) -> Vec<Complex64> {
    let win = |len: usize| match window {
        Window::None => vec![1.0; len],
        Window::Hann => hann_window(len),
    };
    let (wn, wm) = (win(n), win(m));
    let tau = 2.0 * std::f64::consts::PI;
    let mut out = vec![Complex64::new(0.0, 0.0); n * m];
    for k in 0..n {
        for l in 0..m {
            let mut acc = Complex64::new(0.0, 0.0);
            for a in 0..n {
                for b in 0..m {
                    let phase = -tau * ((k * a) as f64 / n as f64 + (l * b) as f64 / m as f64);
                    acc += x[a * m + b] * wn[a] * wm[b] * Complex64::from_polar(1.0, phase);
                }
            }
            out[k * m + l] = acc / ((n * m) as f64).sqrt();
        }
    }
    out
}

fn complex_vec(len: usize) -> impl Strategy<Value = Vec<Complex64>> {
    prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0).prop_map(|(re, im)| Complex64::new(re, im)), len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn packed_weights_round_trip(k in 1u32..=8, step in 0.01f64..2.0, idx in prop::collection::vec(-127i64..=127, 0..40)) {
        let q = grid_max_index(k) as i64;
        let w: Vec<f64> = if k == 1 {
            idx.iter().map(|&i| if i >= 0 { step } else { -step }).collect()
        } else {
            idx.iter().map(|&i| i.clamp(-q, q) as f64 * step).collect()
        };
        let bytes = pack_weights(&w, k, step).unwrap();
        prop_assert_eq!(bytes.len(), packed_len(w.len(), k));
        prop_assert_eq!(unpack_weights(&bytes, w.len(), k, step).unwrap(), w);
    }

    #[test]
    fn off_grid_weights_are_rejected(k in 2u32..=8, step in 0.01f64..2.0, frac in 0.1f64..0.9) {
        prop_assert!(pack_weights(&[frac * step], k, step).is_err());
        let beyond = (grid_max_index(k) + 1.0) * step;
        prop_assert!(pack_weights(&[beyond], k, step).is_err());
    }

    #[test]
    fn range_doppler_matches_direct_dft(x in complex_vec(6 * 4), hann in any::<bool>()) {
        let window = if hann { Window::Hann } else { Window::None };
        let cfg = RadarConfig { n_fast: 6, m_ramps: 4, window, ..RadarConfig::default() };
        let frame = Frame(CMatrix::from_vec(6, 4, x.clone()).unwrap());
        let rd = range_doppler(&frame, &cfg).unwrap();
        for (a, b) in rd.0.as_slice().iter().zip(naive_rd(&x, 6, 4, window)) {
            prop_assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn rectangular_window_preserves_energy(x in complex_vec(8 * 8)) {
        let cfg = RadarConfig { n_fast: 8, m_ramps: 8, window: Window::None, ..RadarConfig::default() };
        let frame = Frame(CMatrix::from_vec(8, 8, x).unwrap());
        let rd = range_doppler(&frame, &cfg).unwrap();
        let e = frame.0.energy();
        prop_assert!((rd.0.energy() - e).abs() < 1e-9 * e.max(1.0));
    }

    #[test]
    fn scores_are_bounded_and_exact_on_ground_truth(
        gt in prop::collection::btree_set((0usize..16, 0usize..16), 0..6),
        extra in prop::collection::vec((0usize..16, 0usize..16), 0..6),
    ) {
        let gt: Vec<(usize, usize)> = gt.into_iter().collect();
        let det = |cells: &[(usize, usize)]| -> Vec<Detection> {
            cells.iter().map(|&(range, doppler)| Detection { range, doppler, power: 1.0 }).collect()
        };
        let exact = match_and_score(&det(&gt), &gt, 0, 16);
        prop_assert_eq!((exact.tp, exact.fp, exact.fn_), (gt.len(), 0, 0));
        prop_assert_eq!(exact.f1, 1.0);
        let mut noisy = gt.clone();
        noisy.extend(extra.iter().filter(|c| !gt.contains(c)));
        let s = match_and_score(&det(&noisy), &gt, 1, 16);
        prop_assert!((0.0..=1.0).contains(&s.precision));
        prop_assert!((0.0..=1.0).contains(&s.recall));
        prop_assert!((0.0..=1.0).contains(&s.f1));
        prop_assert_eq!(s.tp + s.fn_, gt.len());
        prop_assert_eq!(s.tp + s.fp, noisy.len());
        prop_assert_eq!(s.recall, 1.0);
    }
}
