//! Reproducible, file-backed experiment commands.
//!
//! Layout under the output directory:
//!
//! * `data/` holds the dataset (`meta.json` carries the config hash).
//! * `runs/<tag>/seed<k>/` holds `model.qrck` and `log.csv` of one training run.
//! * `eval/<label>/` holds `f1_per_sample.csv`, `memory.csv`, `mops.csv` and
//!   `summary.json`.
//! * `baseline/<method>/` holds the same F1 files for a classical method.

mod config;

pub use config::{ExperimentConfig, TrainMode};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{run_baseline, Method};
use crate::eval::{
    calibrate_scale, evaluate_maps, memory_report, ops_report, BitAssignment, CfarConfig, F1Report,
    MemoryReport, OpsReport, SeedSummary, KIB,
};
use crate::prob_weights::{
    is_distribution, predict_extracted, read_distribution, region_std, train_dist, uncertainty_map, write_distribution,
    DistModel, Extraction, UncertaintyMap,
};
use crate::quant::{is_quantized, read_quantized, train_qat, write_quantized, QuantizedModel};
use crate::rd_signal::{gen_dataset, read_dataset, write_dataset, Dataset, LabeledSample, RdMap, Split};
use crate::tensor::{
    predict_samples, read_checkpoint, train_real, write_checkpoint, ArrayData, ArrayEntry, Checkpoint, EpochLog,
    Model, ModelSpec,
};
use crate::{Error, Result};

const MODEL_FILE: &str = "model.qrck";
const PREDICT_BATCH: usize = 8;

/// A trained network of any kind, as read back from disk.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    Real(Model),
    Quantized(QuantizedModel),
    Distribution(DistModel),
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self> {
        let ck = read_checkpoint(path)?;
        if is_quantized(&ck) {
            Ok(Self::Quantized(read_quantized(path)?))
        } else if is_distribution(&ck) {
            Ok(Self::Distribution(read_distribution(path)?))
        } else {
            Ok(Self::Real(Model::from_checkpoint(&ck, path, None)?))
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        match self {
            Self::Real(m) => &m.spec,
            Self::Quantized(q) => &q.model.spec,
            Self::Distribution(d) => &d.base.spec,
        }
    }

    /// Storage precision used for memory accounting. Ternary weights take two
    /// bits.
    pub fn bit_assignment(&self) -> BitAssignment {
        match self {
            Self::Real(m) => BitAssignment::uniform(&m.spec, 32, 32),
            Self::Quantized(q) => q.bit_assignment(),
            Self::Distribution(d) => BitAssignment::uniform(&d.base.spec, 2, 32),
        }
    }

    /// Denoised maps of `samples`. `extraction` and `seed` only matter for
    /// distributions.
    pub fn predict(&self, samples: &[LabeledSample], extraction: Extraction, seed: u64) -> Result<Vec<RdMap>> {
        match self {
            Self::Real(m) => predict_samples(&mut |x| m.predict(x), samples, PREDICT_BATCH),
            Self::Quantized(q) => predict_samples(&mut |x| q.predict(x), samples, PREDICT_BATCH),
            Self::Distribution(d) => predict_extracted(d, extraction, samples, seed, PREDICT_BATCH),
        }
    }
}

/// What `evaluate` scores.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalTarget {
    Checkpoint(PathBuf),
    /// The clean maps themselves: the dataset's F1 ceiling.
    Clean,
    /// The unmitigated interfered maps.
    Interfered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub label: String,
    pub config_hash: String,
    pub samples: usize,
    pub mean_f1: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory: Option<MemoryReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ops: Option<OpsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub tag: String,
    pub config_hash: String,
    pub per_seed: Vec<f64>,
    pub f1: SeedSummary,
}

/// One finished training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: PathBuf,
    pub log: Vec<EpochLog>,
}

/// An experiment configuration bound to an output directory.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    hash: String,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// `epoch,train_mse,val_f1,gamma,avg_bits` with empty cells for missing
/// values.
pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut out = String::from("epoch,train_mse,val_f1,gamma,avg_bits\n");
    for row in log {
        let _ = writeln!(
            out,
            "{},{:.9},{},{},{}",
            row.epoch,
            row.train_mse,
            opt(row.val_f1),
            row.gamma.map(|g| format!("{g:e}")).unwrap_or_default(),
            opt(row.avg_bits)
        );
    }
    write_file(path, out.as_bytes())
}

/// Per-layer rows plus a `total` row, sizes in kB of 1024 bytes.
pub fn write_memory_csv(path: &Path, report: &MemoryReport) -> Result<()> {
    let mut out = String::from("item,params,weight_bits,weight_kb,activation_values,activation_bits,activation_kb,total_kb\n");
    for (l, layer) in report.layers.iter().enumerate() {
        let _ = writeln!(
            out,
            "l{l},{},{},{:.4},{},{},{:.4},",
            layer.weights,
            layer.weight_bits,
            layer.weight_bytes / KIB,
            layer.activations,
            layer.activation_bits,
            layer.activations as f64 * layer.activation_bits as f64 / 8.0 / KIB
        );
    }
    let _ = writeln!(
        out,
        "total,{},,{:.4},,,{:.4},{:.4}",
        report.params,
        report.weight_kb(),
        report.activation_kb(),
        report.total_kb()
    );
    write_file(path, out.as_bytes())
}

pub fn write_mops_csv(path: &Path, report: &OpsReport) -> Result<()> {
    let text = format!(
        "macs,activation_ops,mops\n{},{},{:.4}\n",
        report.macs, report.activation_ops, report.mops
    );
    write_file(path, text.as_bytes())
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        Ok(Self {
            cfg,
            out: out.into(),
            hash,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn run_dir(&self, tag: &str, seed: u64) -> PathBuf {
        self.out.join("runs").join(tag).join(format!("seed{seed}"))
    }

    pub fn checkpoint_path(&self, tag: &str, seed: u64) -> PathBuf {
        self.run_dir(tag, seed).join(MODEL_FILE)
    }

    fn meta(&self, mode: TrainMode, seed: u64) -> serde_json::Value {
        serde_json::json!({
            "config_hash": self.hash,
            "mode": mode,
            "seed": seed,
        })
    }

    /// Generates the dataset and writes it to `data/`.
    pub fn gen_data(&self) -> Result<Dataset> {
        let mut ds = gen_dataset(&self.cfg.radar(), &self.cfg.scenario(), self.cfg.split_sizes())?;
        ds.meta.config_hash = Some(self.hash.clone());
        let dir = self.data_dir();
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        write_dataset(&dir, &ds)?;
        Ok(ds)
    }

    /// Reads `data/` and checks that it was generated with this config's
    /// radar, scenario and split sizes.
    pub fn load_data(&self) -> Result<Dataset> {
        let dir = self.data_dir();
        if !dir.join("meta.json").exists() {
            return Err(Error::Config(format!(
                "no dataset in {}; run gen-data first",
                dir.display()
            )));
        }
        let ds = read_dataset(&dir)?;
        if ds.meta.radar != self.cfg.radar()
            || ds.meta.scenario != self.cfg.scenario()
            || ds.meta.split_sizes != self.cfg.split_sizes()
        {
            return Err(Error::Config(format!(
                "dataset in {} was generated with a different configuration",
                dir.display()
            )));
        }
        Ok(ds)
    }

    /// CA-CFAR with a scale calibrated on noise-only maps.
    pub fn cfar(&self) -> Result<CfarConfig> {
        let c = &self.cfg;
        let guard = (c.cfar_guard, c.cfar_guard);
        let train = (c.cfar_train, c.cfar_train);
        let scale = calibrate_scale(&c.radar(), guard, train, c.cfar_pfa, c.cfar_calibration_maps, c.cfar_seed)?;
        Ok(CfarConfig { guard, train, scale })
    }

    pub fn score(&self, maps: &[RdMap], samples: &[LabeledSample], cfar: &CfarConfig) -> Result<F1Report> {
        let gt: Vec<&[(usize, usize)]> = samples.iter().map(|s| s.gt_peaks.as_slice()).collect();
        evaluate_maps(maps, &gt, cfar, self.cfg.match_tol)
    }

    fn pretrained(&self, seed: u64) -> Result<Model> {
        let path = self.checkpoint_path("real", seed);
        if !path.exists() {
            return Err(Error::Config(format!(
                "no real-valued checkpoint at {}; train with mode real first",
                path.display()
            )));
        }
        let ck = read_checkpoint(&path)?;
        Model::from_checkpoint(&ck, &path, None)
    }

    /// Trains one seed and writes its checkpoint and log. Quantized and
    /// distribution runs fine-tune the real-valued run of the same seed.
    pub fn train(&self, mode: TrainMode, seed: u64, ds: &Dataset, cfar: &CfarConfig) -> Result<TrainRun> {
        let tag = self.cfg.run_tag(mode)?;
        let dir = self.run_dir(&tag, seed);
        let checkpoint = dir.join(MODEL_FILE);
        let val = &ds.val;
        let log = match mode {
            TrainMode::Real => {
                let mut model = Model::build(&self.cfg.model_spec()?, seed)?;
                model.zero_output_layer();
                let mut validate = |m: &Model| {
                    let maps = predict_samples(&mut |x| m.predict(x), val, PREDICT_BATCH)?;
                    Ok(Some(self.score(&maps, val, cfar)?.mean_f1))
                };
                let log = train_real(&mut model, &ds.train, &self.cfg.train_config(seed), &mut validate)?;
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                write_checkpoint(&checkpoint, &model.to_checkpoint(self.meta(mode, seed)))?;
                log
            }
            TrainMode::Qat => {
                let model = self.pretrained(seed)?;
                let mut validate = |q: &QuantizedModel| {
                    let maps = predict_samples(&mut |x| q.predict(x), val, PREDICT_BATCH)?;
                    Ok(Some(self.score(&maps, val, cfar)?.mean_f1))
                };
                let out = train_qat(&model, &ds.train, &self.cfg.qat_config(seed)?, &mut validate)?;
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                write_quantized(&checkpoint, &out.model, self.meta(mode, seed))?;
                out.log
            }
            TrainMode::Dist => {
                let model = self.pretrained(seed)?;
                let how = self.cfg.extraction()?;
                let mut validate = |d: &DistModel| {
                    let maps = predict_extracted(d, how, val, seed, PREDICT_BATCH)?;
                    Ok(Some(self.score(&maps, val, cfar)?.mean_f1))
                };
                let (dm, log) = train_dist(&model, &ds.train, &self.cfg.dist_config(seed)?, &mut validate)?;
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                write_distribution(&checkpoint, &dm, self.meta(mode, seed))?;
                log
            }
        };
        write_log_csv(&dir.join("log.csv"), &log)?;
        Ok(TrainRun { checkpoint, log })
    }

    /// Scores `target` on the test split and writes the report files to
    /// `dest`.
    pub fn evaluate(&self, target: &EvalTarget, ds: &Dataset, cfar: &CfarConfig, dest: &Path) -> Result<EvalSummary> {
        let test = &ds.test;
        let (label, maps, resources) = match target {
            EvalTarget::Clean => ("clean".to_string(), test.iter().map(|s| s.clean.clone()).collect(), None),
            EvalTarget::Interfered => (
                "interfered".to_string(),
                test.iter().map(|s| s.interfered.clone()).collect(),
                None,
            ),
            EvalTarget::Checkpoint(path) => {
                let model = LoadedModel::load(path)?;
                let maps = model.predict(test, self.cfg.extraction()?, self.cfg.baseline_seed)?;
                let cells = self.cfg.radar().rd_cells();
                let memory = memory_report(model.spec(), &model.bit_assignment(), cells)?;
                let ops = ops_report(model.spec(), cells)?;
                (path.display().to_string(), maps, Some((memory, ops)))
            }
        };
        let report = self.score(&maps, test, cfar)?;
        fs::create_dir_all(dest).map_err(|e| Error::io(dest, e))?;
        report.write_csv(&dest.join("f1_per_sample.csv"))?;
        if let Some((memory, ops)) = &resources {
            write_memory_csv(&dest.join("memory.csv"), memory)?;
            write_mops_csv(&dest.join("mops.csv"), ops)?;
        }
        let (memory, ops) = resources.unzip();
        let summary = EvalSummary {
            label,
            config_hash: self.hash.clone(),
            samples: report.scores.len(),
            mean_f1: report.mean_f1,
            mean_precision: report.mean_precision,
            mean_recall: report.mean_recall,
            memory,
            ops,
        };
        write_json(&dest.join("summary.json"), &summary)?;
        Ok(summary)
    }

    /// Evaluates the checkpoints of every configured seed of a run and writes
    /// `eval/<tag>/seed<k>/` plus a seed summary.
    pub fn evaluate_run(&self, tag: &str, ds: &Dataset, cfar: &CfarConfig) -> Result<RunSummary> {
        let dest = self.out.join("eval").join(tag);
        let per_seed = self
            .cfg
            .seeds
            .iter()
            .map(|&seed| {
                let path = self.checkpoint_path(tag, seed);
                if !path.exists() {
                    return Err(Error::Config(format!("no checkpoint at {}", path.display())));
                }
                let target = EvalTarget::Checkpoint(path);
                Ok(self.evaluate(&target, ds, cfar, &dest.join(format!("seed{seed}")))?.mean_f1)
            })
            .collect::<Result<Vec<_>>>()?;
        let summary = RunSummary {
            tag: tag.to_string(),
            config_hash: self.hash.clone(),
            f1: SeedSummary::new(&per_seed),
            per_seed,
        };
        write_json(&dest.join("summary.json"), &summary)?;
        Ok(summary)
    }

    /// Runs a classical method on the regenerated test frames and writes
    /// `baseline/<method>/`.
    pub fn baseline(&self, method: Method, ds: &Dataset, cfar: &CfarConfig) -> Result<EvalSummary> {
        let c = &self.cfg;
        let maps = run_baseline(
            method,
            &c.radar(),
            &c.scenario(),
            Split::Test,
            ds.test.len(),
            &c.baseline_config(),
            c.baseline_seed,
        )?;
        let report = self.score(&maps, &ds.test, cfar)?;
        let dest = self.out.join("baseline").join(method.name());
        fs::create_dir_all(&dest).map_err(|e| Error::io(&dest, e))?;
        report.write_csv(&dest.join("f1_per_sample.csv"))?;
        let summary = EvalSummary {
            label: method.name().to_string(),
            config_hash: self.hash.clone(),
            samples: report.scores.len(),
            mean_f1: report.mean_f1,
            mean_precision: report.mean_precision,
            mean_recall: report.mean_recall,
            memory: None,
            ops: None,
        };
        write_json(&dest.join("summary.json"), &summary)?;
        Ok(summary)
    }

    /// Uncertainty maps of the first test samples under a distribution
    /// checkpoint, written as a checkpoint-format file with `mean_db` and
    /// `std_db` arrays of shape `[samples, rows, cols]`, plus a per-sample
    /// CSV next to it.
    pub fn uncertainty(&self, checkpoint: &Path, ds: &Dataset, dest: &Path) -> Result<Vec<UncertaintyMap>> {
        let dm = match LoadedModel::load(checkpoint)? {
            LoadedModel::Distribution(dm) => dm,
            _ => {
                return Err(Error::Config(format!(
                    "{} is not a distribution checkpoint",
                    checkpoint.display()
                )))
            }
        };
        let n = self.cfg.uncertainty_samples.min(ds.test.len());
        let samples = &ds.test[..n];
        let maps = uncertainty_map(&dm, samples, self.cfg.uncertainty_draws, self.cfg.baseline_seed)?;
        write_uncertainty(dest, &maps, &self.hash)?;
        let mut csv = String::from("sample_id,mean_std_db,peak_std_db,interference_std_db\n");
        let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        for (i, (m, s)) in maps.iter().zip(samples).enumerate() {
            let mean = m.std_db.iter().sum::<f64>() / m.std_db.len() as f64;
            let (peak, intf) = region_std(m, s);
            let _ = writeln!(csv, "{i},{mean:.6},{},{}", cell(peak), cell(intf));
        }
        write_file(&dest.with_extension("csv"), csv.as_bytes())?;
        Ok(maps)
    }

    /// Memory report of the configured architecture at uniform precision.
    pub fn report_memory(&self, spec: &ModelSpec, weight_bits: u32, act_bits: u32) -> Result<(MemoryReport, OpsReport)> {
        let cells = self.cfg.radar().rd_cells();
        let bits = BitAssignment::uniform(spec, weight_bits, act_bits);
        Ok((memory_report(spec, &bits, cells)?, ops_report(spec, cells)?))
    }
}

/// Writes uncertainty grids as `f32` arrays `mean_db` and `std_db`.
pub fn write_uncertainty(path: &Path, maps: &[UncertaintyMap], config_hash: &str) -> Result<()> {
    let (rows, cols) = maps.first().map_or((0, 0), |m| (m.rows, m.cols));
    let stack = |f: fn(&UncertaintyMap) -> &Vec<f64>| ArrayData::F32(maps.iter().flat_map(|m| f(m).iter().copied()).collect());
    let ck = Checkpoint {
        meta: serde_json::json!({ "config_hash": config_hash, "kind": "uncertainty" }),
        arrays: vec![
            ArrayEntry {
                name: "mean_db".into(),
                shape: vec![maps.len(), rows, cols],
                data: stack(|m| &m.mean_db),
            },
            ArrayEntry {
                name: "std_db".into(),
                shape: vec![maps.len(), rows, cols],
                data: stack(|m| &m.std_db),
            },
        ],
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_checkpoint(path, &ck)
}
