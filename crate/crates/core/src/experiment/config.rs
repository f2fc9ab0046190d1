use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{BaselineConfig, Method};
use crate::prob_weights::{DistAlpha, DistConfig, Extraction};
use crate::quant::{BitLossConfig, BitWidth, QatConfig, QuantMode, QuantSpec, QuantTarget, RangeMode};
use crate::rd_signal::{BurstPattern, InterfererConfig, RadarConfig, ScenarioConfig, Window};
use crate::tensor::{AdamConfig, ModelSpec, TrainConfig};
use crate::{Error, Result};

/// Every knob of an experiment in one flat, typed document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    // Dataset.
    pub data_seed: u64,
    pub n_fast: usize,
    pub m_ramps: usize,
    pub sample_period: f64,
    pub window: Window,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub min_separation: usize,
    pub noise_power: f64,
    pub interference: bool,
    pub burst_pattern: BurstPattern,
    pub bursts_min: usize,
    pub bursts_max: usize,
    pub inr_min_db: f64,
    pub inr_max_db: f64,
    pub delay_min: f64,
    pub delay_max: f64,
    pub drift_min: f64,
    pub drift_max: f64,
    pub half_duration_min: f64,
    pub half_duration_max: f64,
    pub filter_taps: Vec<f64>,

    // Model and real-valued training.
    pub arch: String,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Training patch side; 0 trains on whole maps.
    pub patch: usize,
    pub keep_best: bool,

    // Quantization-aware fine-tuning.
    /// `none`, `binary` or `int`.
    pub quant: String,
    /// Integer bit-width or `learned`.
    pub bits: String,
    /// `w`, `a` or `wa`.
    pub target: String,
    /// `none`, `stat` or `learned`.
    pub range: String,
    pub gamma0: f64,
    pub qat_epochs: usize,
    pub qat_lr: f64,

    // Ternary weight distributions.
    pub lambda: f64,
    pub dist_epochs: usize,
    pub dist_lr: f64,
    /// `stat` or `learned`.
    pub dist_alpha: String,
    /// `mp`, `s1` or `s<N>`.
    pub extract: String,
    pub uncertainty_draws: usize,
    pub uncertainty_samples: usize,

    // Detection and scoring.
    pub cfar_pfa: f64,
    pub cfar_guard: usize,
    pub cfar_train: usize,
    pub cfar_calibration_maps: usize,
    pub cfar_seed: u64,
    pub match_tol: usize,

    // Classical baselines.
    /// `zeroing`, `imat` or `rfmin`.
    pub method: String,
    pub det_accuracy: f64,
    pub imat_iters: usize,
    pub imat_init_fraction: f64,
    pub imat_decay: f64,
    pub baseline_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let radar = RadarConfig::default();
        let scen = ScenarioConfig::default();
        let intf = &scen.interferer;
        let train = TrainConfig::default();
        let base = BaselineConfig::default();
        Self {
            data_seed: 1,
            n_fast: radar.n_fast,
            m_ramps: radar.m_ramps,
            sample_period: radar.sample_period,
            window: radar.window,
            n_train: 200,
            n_val: 32,
            n_test: 32,
            objects_min: scen.objects.0,
            objects_max: scen.objects.1,
            snr_min_db: scen.object_snr_db.0,
            snr_max_db: scen.object_snr_db.1,
            min_separation: scen.min_separation,
            noise_power: scen.noise_power,
            interference: scen.interference_enabled,
            burst_pattern: intf.pattern,
            bursts_min: intf.burst_count.0,
            bursts_max: intf.burst_count.1,
            inr_min_db: intf.inr_db.0,
            inr_max_db: intf.inr_db.1,
            delay_min: intf.delay_frac.0,
            delay_max: intf.delay_frac.1,
            drift_min: intf.delay_drift_frac.0,
            drift_max: intf.delay_drift_frac.1,
            half_duration_min: intf.half_duration_samples.0,
            half_duration_max: intf.half_duration_samples.1,
            filter_taps: intf.filter_taps.clone(),
            arch: "L3-C16-B".into(),
            seeds: vec![0, 1, 2],
            epochs: train.epochs,
            batch_size: train.batch_size,
            lr: train.adam.lr,
            patch: train.patch.unwrap_or(0),
            keep_best: train.keep_best,
            quant: "int".into(),
            bits: "8".into(),
            target: "wa".into(),
            range: "stat".into(),
            gamma0: BitLossConfig::default().gamma0,
            qat_epochs: 3,
            qat_lr: 5e-4,
            lambda: 1e-9,
            dist_epochs: 8,
            dist_lr: 1e-2,
            dist_alpha: "stat".into(),
            extract: "mp".into(),
            uncertainty_draws: 100,
            uncertainty_samples: 8,
            cfar_pfa: crate::eval::DEFAULT_PFA,
            cfar_guard: 2,
            cfar_train: 8,
            cfar_calibration_maps: 100,
            cfar_seed: 7,
            match_tol: 1,
            method: "zeroing".into(),
            det_accuracy: base.det_accuracy,
            imat_iters: base.imat_iters,
            imat_init_fraction: base.imat_init_fraction,
            imat_decay: base.imat_decay,
            baseline_seed: 0,
        }
    }
}

/// Which training loop a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Real,
    Qat,
    Dist,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Self::Real),
            "qat" => Ok(Self::Qat),
            "dist" => Ok(Self::Dist),
            _ => Err(Error::Config(format!("unknown training mode {s:?}, expected real, qat or dist"))),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("plain data");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks every derived setting.
    pub fn validate(&self) -> Result<()> {
        self.radar().validate()?;
        self.scenario().validate()?;
        self.model_spec()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config("every split needs at least one sample".into()));
        }
        self.train_config(0).validate()?;
        self.baseline_config().validate()?;
        self.method()?;
        self.extraction()?;
        self.dist_config(0)?.validate()?;
        if self.quant != "none" {
            self.quant_spec()?.validate()?;
        }
        Ok(())
    }

    pub fn radar(&self) -> RadarConfig {
        RadarConfig {
            n_fast: self.n_fast,
            m_ramps: self.m_ramps,
            sample_period: self.sample_period,
            window: self.window,
            rng_seed: self.data_seed,
        }
    }

    pub fn scenario(&self) -> ScenarioConfig {
        ScenarioConfig {
            objects: (self.objects_min, self.objects_max),
            object_snr_db: (self.snr_min_db, self.snr_max_db),
            min_separation: self.min_separation,
            noise_power: self.noise_power,
            interference_enabled: self.interference,
            interferer: InterfererConfig {
                pattern: self.burst_pattern,
                burst_count: (self.bursts_min, self.bursts_max),
                inr_db: (self.inr_min_db, self.inr_max_db),
                delay_frac: (self.delay_min, self.delay_max),
                delay_drift_frac: (self.drift_min, self.drift_max),
                half_duration_samples: (self.half_duration_min, self.half_duration_max),
                phase: (0.0, 2.0 * std::f64::consts::PI),
                filter_taps: self.filter_taps.clone(),
            },
        }
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        (self.n_train, self.n_val, self.n_test)
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        self.arch.parse()
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            seed,
            patch: (self.patch > 0).then_some(self.patch),
            keep_best: self.keep_best,
        }
    }

    pub fn quant_spec(&self) -> Result<QuantSpec> {
        let target: QuantTarget = self.target.parse()?;
        let mode: QuantMode = match self.quant.as_str() {
            "none" => return Err(Error::Config("quantization is disabled (quant = \"none\")".into())),
            s => s.parse()?,
        };
        let spec = QuantSpec {
            target,
            mode,
            bits: self.bits.parse::<BitWidth>()?,
            range: self.range.parse::<RangeMode>()?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn qat_config(&self, seed: u64) -> Result<QatConfig> {
        let mut train = self.train_config(seed);
        train.epochs = self.qat_epochs;
        train.adam.lr = self.qat_lr;
        let mut cfg = QatConfig::new(self.quant_spec()?, train);
        cfg.bit_loss.gamma0 = self.gamma0;
        cfg.bit_loss.rd_cells = self.radar().rd_cells();
        Ok(cfg)
    }

    pub fn dist_config(&self, seed: u64) -> Result<DistConfig> {
        let mut train = self.train_config(seed);
        train.epochs = self.dist_epochs;
        train.adam.lr = self.dist_lr;
        let mut cfg = DistConfig::new(self.lambda, train);
        cfg.alpha = match self.dist_alpha.as_str() {
            "stat" | "statistics" => DistAlpha::Statistics,
            "learned" => DistAlpha::Learned,
            s => return Err(Error::Config(format!("unknown distribution range mode {s:?}"))),
        };
        Ok(cfg)
    }

    pub fn extraction(&self) -> Result<Extraction> {
        self.extract.parse()
    }

    pub fn method(&self) -> Result<Method> {
        self.method.parse()
    }

    pub fn baseline_config(&self) -> BaselineConfig {
        BaselineConfig {
            det_accuracy: self.det_accuracy,
            imat_iters: self.imat_iters,
            imat_init_fraction: self.imat_init_fraction,
            imat_decay: self.imat_decay,
        }
    }

    /// Directory name of a training run, e.g. `real`, `qat_wa8` or
    /// `dist_1e-9`.
    pub fn run_tag(&self, mode: TrainMode) -> Result<String> {
        Ok(match mode {
            TrainMode::Real => "real".into(),
            TrainMode::Qat => {
                let q = self.quant_spec()?;
                let target = match q.target {
                    QuantTarget::Weights => "w",
                    QuantTarget::Activations => "a",
                    QuantTarget::Both => "wa",
                };
                let range = match q.range {
                    RangeMode::Learned => "_lr",
                    _ => "",
                };
                format!("qat_{target}{}{range}", q.bits)
            }
            TrainMode::Dist => format!("dist_{:e}", self.lambda),
        })
    }
}
