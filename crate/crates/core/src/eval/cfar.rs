use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rd_signal::{is_local_max, range_doppler, synth_noise_with, RadarConfig, RdMap};
use crate::{Error, Result};

/// Default per-cell false-alarm probability on pure-noise maps.
pub const DEFAULT_PFA: f64 = 1e-5;

/// Two-dimensional cell-averaging CFAR. Doppler (columns) wraps around;
/// range (rows) windows are truncated at the map edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfarConfig {
    /// Guard cells per side along (range, Doppler).
    pub guard: (usize, usize),
    /// Training cells per side beyond the guard band.
    pub train: (usize, usize),
    /// Power threshold relative to the training-cell mean.
    pub scale: f64,
}

impl Default for CfarConfig {
    fn default() -> Self {
        let guard = (2, 2);
        let train = (8, 8);
        let k = window_cells(guard, train);
        Self {
            guard,
            train,
            scale: closed_form_scale(k, DEFAULT_PFA),
        }
    }
}

fn window_cells(guard: (usize, usize), train: (usize, usize)) -> usize {
    let outer = (2 * (guard.0 + train.0) + 1) * (2 * (guard.1 + train.1) + 1);
    let inner = (2 * guard.0 + 1) * (2 * guard.1 + 1);
    outer - inner
}

/// Scale giving per-cell false-alarm probability `pfa` for `k` independent
/// exponential training cells: `k (pfa^(-1/k) - 1)`.
pub fn closed_form_scale(k: usize, pfa: f64) -> f64 {
    k as f64 * (pfa.powf(-1.0 / k as f64) - 1.0)
}

impl CfarConfig {
    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if self.train.0 == 0 || self.train.1 == 0 {
            return Err(Error::Config("CFAR needs at least one training cell per side".into()));
        }
        if !(self.scale > 1.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("CFAR scale must exceed 1, got {}", self.scale)));
        }
        let span_r = 2 * (self.guard.0 + self.train.0) + 1;
        let span_d = 2 * (self.guard.1 + self.train.1) + 1;
        if span_r > rows || span_d > cols {
            return Err(Error::Config(format!(
                "CFAR window {span_r}x{span_d} larger than map {rows}x{cols}"
            )));
        }
        Ok(())
    }
}

/// One CFAR hit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub range: usize,
    pub doppler: usize,
    pub power: f64,
}

/// Summed-area table over a column-wrapped copy of `power`, padded by `pad`
/// columns on each side. Entry `(r, c)` holds the sum of rows `< r` and
/// padded columns `< c`.
struct Integral {
    table: Vec<f64>,
    width: usize,
    pad: usize,
}

impl Integral {
    fn new(power: &[f64], rows: usize, cols: usize, pad: usize) -> Self {
        let pw = cols + 2 * pad;
        let width = pw + 1;
        let mut table = vec![0.0; (rows + 1) * width];
        for r in 0..rows {
            let mut run = 0.0;
            for c in 0..pw {
                let src = (c as isize - pad as isize).rem_euclid(cols as isize) as usize;
                run += power[r * cols + src];
                table[(r + 1) * width + c + 1] = table[r * width + c + 1] + run;
            }
        }
        Self { table, width, pad }
    }

    /// Sum over rows `[r0, r1)` and original columns `[c0, c1)`, where the
    /// column bounds may extend up to `pad` beyond the map.
    fn rect(&self, r0: usize, r1: usize, c0: isize, c1: isize) -> f64 {
        let a = (c0 + self.pad as isize) as usize;
        let b = (c1 + self.pad as isize) as usize;
        let t = |r: usize, c: usize| self.table[r * self.width + c];
        t(r1, b) - t(r0, b) - t(r1, a) + t(r0, a)
    }
}

/// Detections on `|S|^2`: cells whose power exceeds `scale` times the mean of
/// their training cells and that are maxima of their 3x3 neighborhood.
pub fn cacfar(map: &RdMap, cfg: &CfarConfig) -> Result<Vec<Detection>> {
    let (rows, cols) = map.0.shape();
    cfg.validate(rows, cols)?;
    let power = map.power();
    let (gr, gd) = cfg.guard;
    let (tr, td) = (gr + cfg.train.0, gd + cfg.train.1);
    let integral = Integral::new(&power, rows, cols, td);
    let inner_w = (2 * gd + 1) as f64;
    let outer_w = (2 * td + 1) as f64;
    let mut out = Vec::new();
    for r in 0..rows {
        let (o0, o1) = (r.saturating_sub(tr), (r + tr + 1).min(rows));
        let (i0, i1) = (r.saturating_sub(gr), (r + gr + 1).min(rows));
        for c in 0..cols {
            let ci = c as isize;
            let outer = integral.rect(o0, o1, ci - td as isize, ci + td as isize + 1);
            let inner = integral.rect(i0, i1, ci - gd as isize, ci + gd as isize + 1);
            let count = (o1 - o0) as f64 * outer_w - (i1 - i0) as f64 * inner_w;
            let noise = (outer - inner).max(0.0) / count;
            let p = power[r * cols + c];
            if p > cfg.scale * noise && is_local_max(&power, rows, cols, r, c) {
                out.push(Detection {
                    range: r,
                    doppler: c,
                    power: p,
                });
            }
        }
    }
    Ok(out)
}

/// Fraction of cells whose power exceeds `scale` times their training mean,
/// without the local-maximum condition.
pub fn exceedance_rate(maps: &[RdMap], guard: (usize, usize), train: (usize, usize), scale: f64) -> Result<f64> {
    let probe = CfarConfig { guard, train, scale };
    let mut hits = 0usize;
    let mut cells = 0usize;
    for map in maps {
        let (rows, cols) = map.0.shape();
        probe.validate(rows, cols)?;
        let power = map.power();
        let integral = Integral::new(&power, rows, cols, guard.1 + train.1);
        let (tr, td) = (guard.0 + train.0, guard.1 + train.1);
        for r in 0..rows {
            let (o0, o1) = (r.saturating_sub(tr), (r + tr + 1).min(rows));
            let (i0, i1) = (r.saturating_sub(guard.0), (r + guard.0 + 1).min(rows));
            for c in 0..cols {
                let ci = c as isize;
                let outer = integral.rect(o0, o1, ci - td as isize, ci + td as isize + 1);
                let inner = integral.rect(i0, i1, ci - guard.1 as isize, ci + guard.1 as isize + 1);
                let count = ((o1 - o0) * (2 * td + 1) - (i1 - i0) * (2 * guard.1 + 1)) as f64;
                if power[r * cols + c] > scale * (outer - inner).max(0.0) / count {
                    hits += 1;
                }
            }
        }
        cells += rows * cols;
    }
    Ok(hits as f64 / cells.max(1) as f64)
}

/// Scale whose exceedance rate on `n_maps` pure-noise RD maps equals `pfa`,
/// found by bisection in the log domain.
pub fn calibrate_scale(
    radar: &RadarConfig,
    guard: (usize, usize),
    train: (usize, usize),
    pfa: f64,
    n_maps: usize,
    seed: u64,
) -> Result<f64> {
    if !(pfa > 0.0 && pfa < 1.0) {
        return Err(Error::Config(format!("false-alarm rate must be in (0, 1), got {pfa}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let maps = (0..n_maps.max(1))
        .map(|_| range_doppler(&synth_noise_with(radar, 1.0, &mut rng)?, radar))
        .collect::<Result<Vec<_>>>()?;
    let (mut lo, mut hi) = (1.0f64, 1e4f64);
    for _ in 0..60 {
        let mid = (lo * hi).sqrt();
        if exceedance_rate(&maps, guard, train, mid)? > pfa {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo * hi).sqrt())
}
