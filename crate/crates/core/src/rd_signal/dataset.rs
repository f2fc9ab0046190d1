use std::fs;
use std::io::Write as _;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    compose_frame, interference_mask, range_doppler, synth_interference, synth_noise_with,
    synth_object, BurstParams, BurstPattern, CMatrix, Frame, InterfererConfig, ObjectParams, RadarConfig,
    RdMap,
};
use crate::{Error, Result};

/// Version byte at offset 0 of every `sample_<idx>.bin`.
pub const DATASET_FORMAT_VERSION: u8 = 1;

const MAX_ATTEMPTS: usize = 200;

/// How objects, noise and interference are drawn for each sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Inclusive range for the number of objects.
    pub objects: (usize, usize),
    /// Range for the RD peak SNR of each object in dB; amplitudes are drawn
    /// log-uniformly by sampling this interval uniformly.
    pub object_snr_db: (f64, f64),
    /// Minimum Chebyshev distance between object bins.
    pub min_separation: usize,
    /// Per-sample noise power in the time domain.
    pub noise_power: f64,
    pub interference_enabled: bool,
    pub interferer: InterfererConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            objects: (1, 5),
            object_snr_db: (10.0, 40.0),
            min_separation: 4,
            noise_power: 1.0,
            interference_enabled: true,
            interferer: InterfererConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.objects.0 == 0 || self.objects.0 > self.objects.1 {
            return Err(Error::Config(format!(
                "object count range must be within [1, inf), got {:?}",
                self.objects
            )));
        }
        if !(self.object_snr_db.0 <= self.object_snr_db.1) {
            return Err(Error::Config(format!(
                "empty object SNR range {:?}",
                self.object_snr_db
            )));
        }
        if !(self.noise_power > 0.0) {
            return Err(Error::Config("noise power must be positive".into()));
        }
        self.interferer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn stream_id(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

/// Everything the simulator knows about one sample, before the RD transform.
#[derive(Debug, Clone)]
pub struct SampleComponents {
    pub objects: Vec<ObjectParams>,
    pub peaks: Vec<(usize, usize)>,
    pub bursts: Vec<BurstParams>,
    pub object_frame: Frame,
    pub interference_frame: Frame,
    pub noise_frame: Frame,
    /// Ground-truth time-domain interference mask, row-major `N x M`.
    pub mask: Vec<bool>,
}

impl SampleComponents {
    pub fn clean_frame(&self) -> Result<Frame> {
        Ok(Frame(self.object_frame.0.add(&self.noise_frame.0)?))
    }

    pub fn interfered_frame(&self) -> Result<Frame> {
        compose_frame(&self.object_frame, &self.interference_frame, &self.noise_frame)
    }
}

/// Interfered/clean RD pair with ground-truth object bins.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub interfered: RdMap,
    pub clean: RdMap,
    pub gt_peaks: Vec<(usize, usize)>,
    pub snr_clean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub split: Split,
    pub split_index: usize,
    pub snr_clean_db: f64,
    pub n_peaks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u8,
    pub radar: RadarConfig,
    pub scenario: ScenarioConfig,
    /// `(train, val, test)` sizes.
    pub split_sizes: (usize, usize, usize),
    pub samples: Vec<SampleRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[LabeledSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn sample_rng(seed: u64, split: Split, idx: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.stream_id() << 40) | idx as u64);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn chebyshev_wrapped(a: (usize, usize), b: (usize, usize), m: usize) -> usize {
    let dn = a.0.abs_diff(b.0);
    let dm = a.1.abs_diff(b.1);
    dn.max(dm.min(m - dm))
}

/// Whether `(n, m)` is a (non-strict) maximum of `mag` over its 3x3
/// neighborhood; Doppler wraps, range is clipped.
pub fn is_local_max(mag: &[f64], rows: usize, cols: usize, n: usize, m: usize) -> bool {
    let center = mag[n * cols + m];
    for dn in -1i64..=1 {
        let r = n as i64 + dn;
        if r < 0 || r >= rows as i64 {
            continue;
        }
        for dm in -1i64..=1 {
            if dn == 0 && dm == 0 {
                continue;
            }
            let c = (m as i64 + dm).rem_euclid(cols as i64) as usize;
            if mag[r as usize * cols + c] > center {
                return false;
            }
        }
    }
    true
}

fn sample_objects(
    cfg: &RadarConfig,
    scenario: &ScenarioConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<ObjectParams>, Vec<(usize, usize)>)> {
    let count = rng.random_range(scenario.objects.0..=scenario.objects.1);
    // Noise power per RD cell after windowing, and the sinusoid-to-peak gain.
    let cell_noise = scenario.noise_power * cfg.window_power_gain();
    let gain = cfg.peak_amplitude_gain();
    let mut peaks: Vec<(usize, usize)> = Vec::with_capacity(count);
    let mut objects = Vec::with_capacity(count);
    let margin = 2usize;
    for _ in 0..count {
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let bin = (
                rng.random_range(margin..cfg.n_fast - margin),
                rng.random_range(0..cfg.m_ramps),
            );
            if peaks
                .iter()
                .all(|&p| chebyshev_wrapped(p, bin, cfg.m_ramps) >= scenario.min_separation)
            {
                placed = Some(bin);
                break;
            }
        }
        let bin = placed.ok_or_else(|| {
            Error::Config("could not place objects with the requested separation".into())
        })?;
        let snr_db = uniform(rng, scenario.object_snr_db);
        let amplitude = (cell_noise * 10f64.powf(snr_db / 10.0)).sqrt() / gain;
        let phase = rng.random_range(0.0..2.0 * std::f64::consts::PI);
        objects.push(ObjectParams::on_grid(cfg, bin.0, bin.1, amplitude, phase));
        peaks.push(bin);
    }
    Ok((objects, peaks))
}

fn sample_bursts(
    cfg: &RadarConfig,
    icfg: &InterfererConfig,
    noise_power: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<BurstParams> {
    let count = rng.random_range(icfg.burst_count.0..=icfg.burst_count.1).min(cfg.m_ramps);
    let ts = cfg.sample_period;
    let ramp_time = cfg.n_fast as f64 * ts;
    // Cosine power is A^2 / 2.
    let amplitude_of = |inr_db: f64| (2.0 * noise_power * 10f64.powf(inr_db / 10.0)).sqrt();
    let burst = |amplitude, delay, half_duration, phase, ramp_index| {
        let (burst_start, burst_len) =
            BurstParams::alias_free_support(delay, half_duration, ts, cfg.n_fast);
        BurstParams {
            amplitude,
            delay,
            half_duration,
            phase,
            ramp_index,
            burst_start,
            burst_len,
        }
    };
    match icfg.pattern {
        BurstPattern::Scattered => {
            let mut ramps: Vec<usize> = (0..cfg.m_ramps).collect();
            (0..count)
                .map(|k| {
                    // Partial Fisher-Yates: distinct affected ramps.
                    let j = rng.random_range(k..ramps.len());
                    ramps.swap(k, j);
                    let amplitude = amplitude_of(uniform(rng, icfg.inr_db));
                    let delay = uniform(rng, icfg.delay_frac) * ramp_time;
                    let half_duration = uniform(rng, icfg.half_duration_samples) * ts;
                    let phase = uniform(rng, icfg.phase);
                    burst(amplitude, delay, half_duration, phase, ramps[k])
                })
                .collect()
        }
        BurstPattern::Coherent => {
            if count == 0 {
                return Vec::new();
            }
            let first = rng.random_range(0..=cfg.m_ramps - count);
            let amplitude = amplitude_of(uniform(rng, icfg.inr_db));
            let delay0 = uniform(rng, icfg.delay_frac);
            let drift = uniform(rng, icfg.delay_drift_frac);
            let half_duration = uniform(rng, icfg.half_duration_samples) * ts;
            let phase = uniform(rng, icfg.phase);
            (0..count)
                .map(|k| {
                    let delay = (delay0 + drift * k as f64).clamp(0.0, 1.0) * ramp_time;
                    burst(amplitude, delay, half_duration, phase, first + k)
                })
                .collect()
        }
    }
}

/// Deterministically regenerate the time-domain components of sample `idx`
/// of `split`.
pub fn generate_components(
    cfg: &RadarConfig,
    scenario: &ScenarioConfig,
    split: Split,
    idx: usize,
) -> Result<SampleComponents> {
    cfg.validate()?;
    scenario.validate()?;
    let mut rng = sample_rng(cfg.rng_seed, split, idx);
    for _ in 0..MAX_ATTEMPTS {
        let (objects, peaks) = sample_objects(cfg, scenario, &mut rng)?;
        let mut object_frame = Frame::zeros(cfg);
        for obj in &objects {
            let f = synth_object(cfg, obj);
            object_frame = Frame(object_frame.0.add(&f.0)?);
        }
        let noise_frame = synth_noise_with(cfg, scenario.noise_power, &mut rng)?;
        let bursts = if scenario.interference_enabled {
            sample_bursts(cfg, &scenario.interferer, scenario.noise_power, &mut rng)
        } else {
            Vec::new()
        };
        let interference_frame =
            synth_interference(cfg, &bursts, &scenario.interferer.filter_taps)?;
        let mask = interference_mask(cfg, &bursts, scenario.interferer.filter_taps.len());
        let components = SampleComponents {
            objects,
            peaks,
            bursts,
            object_frame,
            interference_frame,
            noise_frame,
            mask,
        };
        let clean = range_doppler(&components.clean_frame()?, cfg)?;
        let mag: Vec<f64> = clean.0.as_slice().iter().map(|z| z.norm()).collect();
        let all_local_max = components
            .peaks
            .iter()
            .all(|&(n, m)| is_local_max(&mag, cfg.n_fast, cfg.m_ramps, n, m));
        if all_local_max {
            return Ok(components);
        }
    }
    Err(Error::Config(
        "could not draw a sample whose object peaks are local maxima".into(),
    ))
}

fn round_to_f32(map: RdMap) -> RdMap {
    RdMap(map.0.map(|z| Complex64::new(z.re as f32 as f64, z.im as f32 as f64)))
}

fn labeled_from(
    cfg: &RadarConfig,
    scenario: &ScenarioConfig,
    c: &SampleComponents,
) -> Result<LabeledSample> {
    let clean = round_to_f32(range_doppler(&c.clean_frame()?, cfg)?);
    let interfered = if scenario.interference_enabled {
        round_to_f32(range_doppler(&c.interfered_frame()?, cfg)?)
    } else {
        clean.clone()
    };
    let cell_noise = scenario.noise_power * cfg.window_power_gain();
    let peak_power = c
        .peaks
        .iter()
        .map(|&(n, m)| clean.0[(n, m)].norm_sqr())
        .fold(0.0, f64::max);
    Ok(LabeledSample {
        interfered,
        clean,
        gt_peaks: c.peaks.clone(),
        snr_clean: 10.0 * (peak_power / cell_noise).log10(),
    })
}

/// Build `(train, val, test)` splits from disjoint RNG streams of
/// `cfg.rng_seed`. Maps are stored at f32 precision, matching the on-disk
/// format.
pub fn gen_dataset(
    cfg: &RadarConfig,
    scenario: &ScenarioConfig,
    split_sizes: (usize, usize, usize),
) -> Result<Dataset> {
    cfg.validate()?;
    scenario.validate()?;
    let (nt, nv, ne) = split_sizes;
    if nt == 0 || nv == 0 || ne == 0 {
        return Err(Error::Config(format!(
            "every split needs at least one sample, got {split_sizes:?}"
        )));
    }
    if cfg.n_fast > u16::MAX as usize || cfg.m_ramps > u16::MAX as usize {
        return Err(Error::Config("RD dimensions must fit in u16".into()));
    }
    let mut samples = Vec::new();
    let mut make = |split: Split, count: usize, offset: usize| -> Result<Vec<LabeledSample>> {
        (0..count)
            .map(|i| {
                let comps = generate_components(cfg, scenario, split, i)?;
                let s = labeled_from(cfg, scenario, &comps)?;
                samples.push(SampleRecord {
                    index: offset + i,
                    split,
                    split_index: i,
                    snr_clean_db: s.snr_clean,
                    n_peaks: s.gt_peaks.len(),
                });
                Ok(s)
            })
            .collect()
    };
    let train = make(Split::Train, nt, 0)?;
    let val = make(Split::Val, nv, nt)?;
    let test = make(Split::Test, ne, nt + nv)?;
    Ok(Dataset {
        meta: DatasetMeta {
            format_version: DATASET_FORMAT_VERSION,
            radar: cfg.clone(),
            scenario: scenario.clone(),
            split_sizes,
            samples,
            config_hash: None,
        },
        train,
        val,
        test,
    })
}

fn encode_sample(s: &LabeledSample) -> Vec<u8> {
    let cells = s.clean.0.as_slice().len();
    let mut buf = Vec::with_capacity(1 + cells * 16 + 2 + 4 * s.gt_peaks.len());
    buf.push(DATASET_FORMAT_VERSION);
    for map in [&s.interfered, &s.clean] {
        for z in map.0.as_slice() {
            buf.extend_from_slice(&(z.re as f32).to_le_bytes());
            buf.extend_from_slice(&(z.im as f32).to_le_bytes());
        }
    }
    buf.extend_from_slice(&(s.gt_peaks.len() as u16).to_le_bytes());
    for &(n, m) in &s.gt_peaks {
        buf.extend_from_slice(&(n as u16).to_le_bytes());
        buf.extend_from_slice(&(m as u16).to_le_bytes());
    }
    buf
}

fn decode_sample(path: &Path, bytes: &[u8], rows: usize, cols: usize) -> Result<(RdMap, RdMap, Vec<(usize, usize)>)> {
    let cells = rows * cols;
    let maps_end = 1 + cells * 16;
    if bytes.len() < maps_end + 2 {
        return Err(Error::format(path, "truncated sample file"));
    }
    if bytes[0] != DATASET_FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported sample format version {}", bytes[0]),
        ));
    }
    let f32_at = |off: usize| f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
    let read_map = |start: usize| -> Result<RdMap> {
        let data = (0..cells)
            .map(|i| Complex64::new(f32_at(start + 8 * i), f32_at(start + 8 * i + 4)))
            .collect();
        Ok(RdMap(CMatrix::from_vec(rows, cols, data)?))
    };
    let interfered = read_map(1)?;
    let clean = read_map(1 + cells * 8)?;
    let u16_at = |off: usize| u16::from_le_bytes([bytes[off], bytes[off + 1]]) as usize;
    let count = u16_at(maps_end);
    if bytes.len() != maps_end + 2 + 4 * count {
        return Err(Error::format(path, "peak table length mismatch"));
    }
    let peaks = (0..count)
        .map(|i| {
            let off = maps_end + 2 + 4 * i;
            (u16_at(off), u16_at(off + 2))
        })
        .collect::<Vec<_>>();
    if peaks.iter().any(|&(n, m)| n >= rows || m >= cols) {
        return Err(Error::format(path, "peak outside the RD map"));
    }
    Ok((interfered, clean, peaks))
}

/// Persist a dataset as `meta.json` plus one `sample_<idx>.bin` per sample.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta_path = dir.join("meta.json");
    let meta = serde_json::to_string_pretty(&ds.meta)?;
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    let all = ds.train.iter().chain(&ds.val).chain(&ds.test);
    for (idx, s) in all.enumerate() {
        let path = dir.join(format!("sample_{idx}.bin"));
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&encode_sample(s)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text)?;
    if meta.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::format(
            &meta_path,
            format!("unsupported dataset format version {}", meta.format_version),
        ));
    }
    let (rows, cols) = (meta.radar.n_fast, meta.radar.m_ramps);
    let mut ds = Dataset {
        meta: meta.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for rec in &meta.samples {
        let path = dir.join(format!("sample_{}.bin", rec.index));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (interfered, clean, gt_peaks) = decode_sample(&path, &bytes, rows, cols)?;
        let sample = LabeledSample {
            interfered,
            clean,
            gt_peaks,
            snr_clean: rec.snr_clean_db,
        };
        match rec.split {
            Split::Train => ds.train.push(sample),
            Split::Val => ds.val.push(sample),
            Split::Test => ds.test.push(sample),
        }
    }
    let sizes = (ds.train.len(), ds.val.len(), ds.test.len());
    if sizes != meta.split_sizes {
        return Err(Error::format(
            &meta_path,
            format!("manifest lists {sizes:?} samples, header says {:?}", meta.split_sizes),
        ));
    }
    Ok(ds)
}
