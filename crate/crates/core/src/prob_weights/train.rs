use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::DistModel;
use crate::rd_signal::{LabeledSample, RdMap};
use crate::tensor::{
    batch_tensors, from_channels, predict_samples, run_epochs, AdamState, BestSnapshot, BnMode, EpochLog, ForwardOut,
    ParamVars, Patches, Tape, Tensor, TrainConfig, Var, BN_EPS,
};
use crate::{Error, Result};

/// Source of the per-layer ternary range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistAlpha {
    /// `max|W|` of the pretrained weights, kept fixed.
    Statistics,
    /// Trainable log-domain scalar initialized from the statistics.
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistConfig {
    /// Weight of the squared logit norm.
    pub lambda: f64,
    pub train: TrainConfig,
    pub p_bounds: (f64, f64),
    pub alpha: DistAlpha,
}

impl DistConfig {
    pub fn new(lambda: f64, train: TrainConfig) -> Self {
        Self {
            lambda,
            train,
            p_bounds: (0.05, 0.9),
            alpha: DistAlpha::Statistics,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        self.train.validate()
    }
}

/// Tape handles of a distribution model.
#[derive(Debug, Clone)]
pub struct DistVars {
    pub logits: Vec<Var>,
    pub log_alpha: Vec<Option<Var>>,
    pub base: ParamVars,
}

impl DistVars {
    pub fn register(tape: &mut Tape, dm: &DistModel, alpha: DistAlpha) -> Self {
        let logits = dm.layers.iter().map(|d| tape.param(d.logits.clone())).collect();
        let log_alpha = dm
            .layers
            .iter()
            .map(|d| (alpha == DistAlpha::Learned).then(|| tape.param(Tensor::scalar(d.alpha.ln()))))
            .collect();
        Self {
            logits,
            log_alpha,
            base: dm.base.register(tape),
        }
    }
}

fn normal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Sampled forward pass: per layer the activation moments are propagated
/// through the convolution and one activation is drawn with the local
/// reparameterization, followed by batch norm and ReLU on hidden layers.
pub fn dist_forward(
    tape: &mut Tape,
    dm: &DistModel,
    vars: &DistVars,
    x: Var,
    mode: BnMode,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardOut> {
    let (b, c, h, w) = tape.value(x).dims4()?;
    if c != 2 {
        return Err(Error::Shape(format!("model input needs 2 channels, got {c}")));
    }
    let n = dm.layers.len();
    let mut bn_stats = Vec::with_capacity(n);
    let mut y = x;
    for (l, dist) in dm.layers.iter().enumerate() {
        let (mean_w, var_w) = match vars.log_alpha[l] {
            None => (
                tape.ternary_mean(vars.logits[l], dist.alpha, dist.shape.clone())?,
                tape.ternary_var(vars.logits[l], dist.alpha, dist.shape.clone())?,
            ),
            Some(la) => {
                let m = tape.ternary_mean(vars.logits[l], 1.0, dist.shape.clone())?;
                let v = tape.ternary_var(vars.logits[l], 1.0, dist.shape.clone())?;
                let la2 = tape.scale(la, 2.0)?;
                (tape.scale_exp(m, la)?, tape.scale_exp(v, la2)?)
            }
        };
        let mu = tape.conv2d(y, mean_w, Some(vars.base.biases[l]))?;
        let y2 = tape.square(y)?;
        let var = tape.conv2d(y2, var_w, None)?;
        let eps = normal(tape.value(mu).len(), rng);
        y = tape.reparam(mu, var, eps)?;
        let mut stats = None;
        if let (Some(bn), Some((g, bt))) = (&dm.base.layers[l].bn, vars.base.bn[l]) {
            y = match mode {
                BnMode::Train => {
                    let (out, m, v) = tape.batch_norm_train(y, g, bt, BN_EPS)?;
                    stats = Some((m, v));
                    out
                }
                BnMode::Eval => tape.batch_norm_eval(y, g, bt, &bn.running_mean, &bn.running_var, BN_EPS)?,
            };
        }
        if l + 1 < n {
            y = tape.relu(y)?;
        }
        bn_stats.push(stats);
    }
    Ok(ForwardOut {
        output: y,
        bn_stats,
        bn_count: b * h * w,
    })
}

/// Single-sample estimate of the expected MSE plus `lambda` times the squared
/// norm of all logits. Returns the total loss, the MSE term and the forward
/// record.
pub fn expected_loss(
    tape: &mut Tape,
    dm: &DistModel,
    vars: &DistVars,
    x: &Tensor,
    y: &Tensor,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, Var, ForwardOut)> {
    let xv = tape.constant(x.clone());
    let out = dist_forward(tape, dm, vars, xv, BnMode::Train, rng)?;
    let mse = tape.mse(out.output, y)?;
    let mut reg: Option<Var> = None;
    for &lv in &vars.logits {
        let s = tape.sum_squares(lv)?;
        reg = Some(match reg {
            None => s,
            Some(r) => tape.add(r, s)?,
        });
    }
    let loss = match reg {
        Some(r) if lambda > 0.0 => {
            let r = tape.scale(r, lambda)?;
            tape.add(mse, r)?
        }
        _ => mse,
    };
    if !tape.value(loss).item().is_finite() {
        return Err(Error::NonFinite("expected loss".into()));
    }
    Ok((loss, mse, out))
}

/// Trains ternary weight distributions initialized from `pretrained`. The
/// biases and batch-norm parameters are trained alongside the logits.
pub fn train_dist(
    pretrained: &crate::tensor::Model,
    train: &[LabeledSample],
    cfg: &DistConfig,
    validate: &mut dyn FnMut(&DistModel) -> Result<Option<f64>>,
) -> Result<(DistModel, Vec<EpochLog>)> {
    cfg.validate()?;
    let patches = Patches::from_samples(train, cfg.train.patch)?;
    let dm = DistModel::from_pretrained(pretrained, cfg.p_bounds)?;
    let dist_params = |dm: &DistModel| -> Vec<Tensor> {
        let mut v: Vec<Tensor> = dm.layers.iter().map(|d| d.logits.clone()).collect();
        if cfg.alpha == DistAlpha::Learned {
            v.extend(dm.layers.iter().map(|d| Tensor::scalar(d.alpha.ln())));
        }
        v
    };
    let init = dist_params(&dm);
    let mut dist_adam = AdamState::new(cfg.train.adam, &init.iter().collect::<Vec<_>>());
    let mut base_adam = AdamState::new(cfg.train.adam, &dm.base.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    rng.set_stream(1);
    let cell = RefCell::new(dm);
    let mut log = Vec::with_capacity(cfg.train.epochs);
    let mut best: Option<BestSnapshot<DistModel>> = None;
    run_epochs(
        &patches,
        &cfg.train,
        &mut |x, y| {
            let mut dm = cell.borrow_mut();
            let mut tape = Tape::new();
            let vars = DistVars::register(&mut tape, &dm, cfg.alpha);
            let (loss, mse, out) = expected_loss(&mut tape, &dm, &vars, x, y, cfg.lambda, &mut rng)?;
            let mse_value = tape.value(mse).item();
            tape.backward(loss)?;
            let mut flat = dist_params(&dm);
            let mut dvars = vars.logits.clone();
            dvars.extend(vars.log_alpha.iter().flatten());
            let g: Vec<Option<&[f64]>> = dvars.iter().map(|&v| tape.grad(v)).collect();
            dist_adam.update(&mut flat.iter_mut().collect::<Vec<_>>(), &g)?;
            let g: Vec<Option<&[f64]>> = vars.base.all().iter().map(|&v| tape.grad(v)).collect();
            base_adam.update(&mut dm.base.params_mut(), &g)?;
            let n = dm.layers.len();
            for (l, t) in flat.into_iter().enumerate() {
                if l < n {
                    dm.layers[l].logits = t;
                } else {
                    dm.layers[l - n].alpha = t.item().exp();
                }
            }
            dm.base.update_bn(&out);
            Ok(mse_value)
        },
        &mut |epoch, train_mse| {
            let dm = cell.borrow();
            let val_f1 = validate(&dm)?;
            if cfg.train.keep_best {
                BestSnapshot::offer(&mut best, val_f1, epoch, &*dm);
            }
            log.push(EpochLog {
                epoch,
                train_mse,
                val_f1,
                gamma: None,
                avg_bits: None,
            });
            Ok(())
        },
    )?;
    let dm = match best {
        Some(b) => b.value,
        None => cell.into_inner(),
    };
    Ok((dm, log))
}

/// How deterministic weights are obtained from the distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extraction {
    MostProbable,
    /// One weight draw.
    Sample,
    /// Predictions of `S` independent draws, averaged.
    SampleAvg(usize),
}

impl std::str::FromStr for Extraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mp" => Ok(Self::MostProbable),
            "s1" => Ok(Self::Sample),
            _ => s
                .strip_prefix('s')
                .and_then(|n| n.parse().ok())
                .filter(|&n: &usize| n >= 1)
                .map(Self::SampleAvg)
                .ok_or_else(|| Error::Config(format!("unknown extraction {s:?}, expected mp, s1 or s<N>"))),
        }
    }
}

/// Denoised RD maps of `samples` under an extraction rule. Draws use a
/// generator seeded with `seed`.
pub fn predict_extracted(
    dm: &DistModel,
    how: Extraction,
    samples: &[LabeledSample],
    seed: u64,
    batch_size: usize,
) -> Result<Vec<RdMap>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let models = match how {
        Extraction::MostProbable => vec![dm.most_probable()?],
        Extraction::Sample => vec![dm.sample(&mut rng)?],
        Extraction::SampleAvg(0) => return Err(Error::Config("need at least one draw".into())),
        Extraction::SampleAvg(s) => (0..s).map(|_| dm.sample(&mut rng)).collect::<Result<_>>()?,
    };
    let k = models.len() as f64;
    predict_samples(
        &mut |x| {
            let mut acc: Option<Tensor> = None;
            for m in &models {
                let y = m.predict(x)?;
                acc = Some(match acc {
                    None => y,
                    Some(mut a) => {
                        a.data_mut().iter_mut().zip(y.data()).for_each(|(u, v)| *u += v);
                        a
                    }
                });
            }
            Ok(acc.expect("at least one model").map(|v| v / k))
        },
        samples,
        batch_size,
    )
}

/// Mean F1 of an extraction rule, scored by `score`.
pub fn evaluate_extraction(
    dm: &DistModel,
    how: Extraction,
    samples: &[LabeledSample],
    seed: u64,
    score: &mut dyn FnMut(&[RdMap]) -> Result<f64>,
) -> Result<f64> {
    score(&predict_extracted(dm, how, samples, seed, 8)?)
}

/// Per-cell mean and standard deviation of `20 log10(|y| + 1e-12)` over
/// sampled-weight predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyMap {
    pub rows: usize,
    pub cols: usize,
    pub mean_db: Vec<f64>,
    pub std_db: Vec<f64>,
}

pub const LOG_FLOOR: f64 = 1e-12;

/// Uncertainty maps of `samples` from `draws` weight samples shared by all
/// samples.
pub fn uncertainty_map(dm: &DistModel, samples: &[LabeledSample], draws: usize, seed: u64) -> Result<Vec<UncertaintyMap>> {
    if draws < 2 {
        return Err(Error::Config(format!("uncertainty needs at least 2 draws, got {draws}")));
    }
    let Some(first) = samples.first() else {
        return Ok(Vec::new());
    };
    let (rows, cols) = first.interfered.0.shape();
    let cells = rows * cols;
    let mut mean = vec![vec![0.0; cells]; samples.len()];
    let mut m2 = vec![vec![0.0; cells]; samples.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let refs: Vec<&LabeledSample> = samples.iter().collect();
    for d in 0..draws {
        let model = dm.sample(&mut rng)?;
        for (chunk_idx, chunk) in refs.chunks(8).enumerate() {
            let (x, _, scales) = batch_tensors(chunk)?;
            let y = model.predict(&x)?;
            for (s, &k) in scales.iter().enumerate() {
                let map = from_channels(&y, s, k)?;
                let i = chunk_idx * 8 + s;
                for (c, z) in map.0.as_slice().iter().enumerate() {
                    let db = 20.0 * (z.norm() + LOG_FLOOR).log10();
                    let delta = db - mean[i][c];
                    mean[i][c] += delta / (d + 1) as f64;
                    m2[i][c] += delta * (db - mean[i][c]);
                }
            }
        }
    }
    let n = draws as f64;
    Ok(mean
        .into_iter()
        .zip(m2)
        .map(|(mean_db, m2)| {
            let std_db = m2.iter().map(|q| (q / (n - 1.0)).max(0.0).sqrt()).collect();
            UncertaintyMap {
                rows,
                cols,
                mean_db,
                std_db,
            }
        })
        .collect())
}

/// Interference-marked cells have `|interfered - clean|^2` above this
/// multiple of the median clean cell power.
pub const INTERFERENCE_POWER_FACTOR: f64 = 10.0;

/// Cells of `sample` dominated by interference, row-major.
pub fn interference_cells(sample: &LabeledSample) -> Vec<bool> {
    let clean = sample.clean.0.as_slice();
    let mut power: Vec<f64> = clean.iter().map(|z| z.norm_sqr()).collect();
    if power.is_empty() {
        return Vec::new();
    }
    let mid = power.len() / 2;
    let median = *power.select_nth_unstable_by(mid, f64::total_cmp).1;
    sample
        .interfered
        .0
        .as_slice()
        .iter()
        .zip(clean)
        .map(|(a, b)| (a - b).norm_sqr() > INTERFERENCE_POWER_FACTOR * median)
        .collect()
}

/// Mean of `std_db` over the ground-truth peaks and over the
/// interference-marked cells; `None` where a set is empty.
pub fn region_std(map: &UncertaintyMap, sample: &LabeledSample) -> (Option<f64>, Option<f64>) {
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let peaks = sample.gt_peaks.iter().map(|&(r, c)| map.std_db[r * map.cols + c]).collect();
    let intf = interference_cells(sample)
        .iter()
        .zip(&map.std_db)
        .filter_map(|(&m, &s)| m.then_some(s))
        .collect();
    (mean(peaks), mean(intf))
}
