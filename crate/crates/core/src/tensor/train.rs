use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    forward_model, from_channels, normalize_pair, to_channels, AdamConfig, AdamState, BnMode,
    Model, PlainHooks, Tape, Tensor,
};
use crate::rd_signal::{LabeledSample, RdMap};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seeds the shuffling order.
    pub seed: u64,
    /// Side length of the square patches cut from each training map; `None`
    /// trains on whole maps.
    pub patch: Option<usize>,
    /// Keep the parameters of the epoch with the best validation score
    /// instead of the last epoch.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 8,
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            seed: 0,
            patch: Some(32),
            keep_best: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.adam.lr
            )));
        }
        if self.patch == Some(0) {
            return Err(Error::Config("patch size must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_f1: Option<f64>,
    pub gamma: Option<f64>,
    pub avg_bits: Option<f64>,
}

/// Normalized network input, target and per-sample scale factors.
pub fn batch_tensors(samples: &[&LabeledSample]) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let scales: Vec<f64> = samples.iter().map(|s| normalize_pair(s)).collect();
    let inputs: Vec<&RdMap> = samples.iter().map(|s| &s.interfered).collect();
    let targets: Vec<&RdMap> = samples.iter().map(|s| &s.clean).collect();
    Ok((
        to_channels(&inputs, &scales)?,
        to_channels(&targets, &scales)?,
        scales,
    ))
}

/// Start offsets of `tile`-long windows covering `0..len`; the last window
/// is shifted back to end at `len`.
fn tile_starts(len: usize, tile: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..len.saturating_sub(tile) + 1).step_by(tile).collect();
    if starts.last().map_or(true, |&s| s + tile < len) {
        starts.push(len - tile);
    }
    starts
}

/// Normalized `[2, h, w]` input/target pairs cut from training samples. Every
/// patch keeps the normalization of its whole map.
#[derive(Debug, Clone, PartialEq)]
pub struct Patches {
    pub height: usize,
    pub width: usize,
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
}

impl Patches {
    pub fn from_samples(samples: &[LabeledSample], patch: Option<usize>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::Config("empty training split".into()));
        };
        let (rows, cols) = first.clean.0.shape();
        let (ph, pw) = match patch {
            Some(p) if p > rows || p > cols => {
                return Err(Error::Config(format!(
                    "patch size {p} exceeds map size {rows}x{cols}"
                )))
            }
            Some(p) => (p, p),
            None => (rows, cols),
        };
        let mut out = Self {
            height: ph,
            width: pw,
            inputs: Vec::new(),
            targets: Vec::new(),
        };
        let cut = |map: &RdMap, k: f64, r0: usize, c0: usize| {
            let mut v = vec![0.0; 2 * ph * pw];
            for r in 0..ph {
                for c in 0..pw {
                    let z = map.0[(r0 + r, c0 + c)] * k;
                    v[r * pw + c] = z.re;
                    v[ph * pw + r * pw + c] = z.im;
                }
            }
            v
        };
        for s in samples {
            if s.clean.0.shape() != (rows, cols) || s.interfered.0.shape() != (rows, cols) {
                return Err(Error::Shape("training maps of different sizes".into()));
            }
            let k = normalize_pair(s);
            for &r0 in &tile_starts(rows, ph) {
                for &c0 in &tile_starts(cols, pw) {
                    out.inputs.push(cut(&s.interfered, k, r0, c0));
                    out.targets.push(cut(&s.clean, k, r0, c0));
                }
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Input and target tensors of the patches at `idx`.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let shape = vec![idx.len(), 2, self.height, self.width];
        let gather = |src: &[Vec<f64>]| idx.iter().flat_map(|&i| src[i].iter().copied()).collect();
        Ok((
            Tensor::new(shape.clone(), gather(&self.inputs))?,
            Tensor::new(shape, gather(&self.targets))?,
        ))
    }
}

/// Shuffled sample order of `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Shared minibatch loop. `step` runs one optimizer step on a batch and
/// returns its mean squared error; `end_epoch` receives the epoch index and
/// the mean training error of that epoch.
pub fn run_epochs(
    patches: &Patches,
    cfg: &TrainConfig,
    step: &mut dyn FnMut(&Tensor, &Tensor) -> Result<f64>,
    end_epoch: &mut dyn FnMut(usize, f64) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if patches.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    for epoch in 0..cfg.epochs {
        let order = epoch_order(patches.len(), cfg.seed, epoch);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = patches.batch(chunk)?;
            let mse = step(&x, &y)?;
            if !mse.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            total += mse * chunk.len() as f64;
        }
        end_epoch(epoch, total / patches.len() as f64)?;
    }
    Ok(())
}

/// Runs `predict` over `samples` in batches and maps outputs back to RD maps
/// in the original scale.
pub fn predict_samples(
    predict: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    samples: &[LabeledSample],
    batch_size: usize,
) -> Result<Vec<RdMap>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&LabeledSample> = chunk.iter().collect();
        let (x, _, scales) = batch_tensors(&refs)?;
        let y = predict(&x)?;
        if !y.is_finite() {
            return Err(Error::NonFinite("model prediction".into()));
        }
        for (s, &k) in scales.iter().enumerate() {
            out.push(from_channels(&y, s, k)?);
        }
    }
    Ok(out)
}

/// Tracks the best validation score seen so far together with a snapshot.
#[derive(Debug, Clone)]
pub struct BestSnapshot<T> {
    pub score: f64,
    pub epoch: usize,
    pub value: T,
}

impl<T: Clone> BestSnapshot<T> {
    pub fn offer(best: &mut Option<Self>, score: Option<f64>, epoch: usize, value: &T) {
        let Some(score) = score else { return };
        if best.as_ref().map_or(true, |b| score > b.score) {
            *best = Some(Self {
                score,
                epoch,
                value: value.clone(),
            });
        }
    }
}

/// Minibatch Adam on the MSE between prediction and clean target. After each
/// epoch `validate` is called (e.g. to compute a validation F1).
pub fn train_real(
    model: &mut Model,
    train: &[LabeledSample],
    cfg: &TrainConfig,
    validate: &mut dyn FnMut(&Model) -> Result<Option<f64>>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let patches = Patches::from_samples(train, cfg.patch)?;
    let mut adam = AdamState::new(cfg.adam, &model.params());
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<BestSnapshot<Model>> = None;
    let cell = std::cell::RefCell::new(model);
    run_epochs(
        &patches,
        cfg,
        &mut |x, y| {
            let mut model = cell.borrow_mut();
            let mut tape = Tape::new();
            let pv = model.register(&mut tape);
            let xv = tape.constant(x.clone());
            let out = forward_model(&mut tape, &model, &pv, xv, BnMode::Train, &mut PlainHooks)?;
            let loss = tape.mse(out.output, y)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Ok(lv);
            }
            tape.backward(loss)?;
            let grads: Vec<Option<&[f64]>> = pv.all().iter().map(|&v| tape.grad(v)).collect();
            adam.update(&mut model.params_mut(), &grads)?;
            model.update_bn(&out);
            Ok(lv)
        },
        &mut |epoch, train_mse| {
            let model = cell.borrow();
            let val_f1 = validate(&model)?;
            if cfg.keep_best {
                BestSnapshot::offer(&mut best, val_f1, epoch, &**model);
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
    if let Some(b) = best {
        **cell.borrow_mut() = b.value;
    }
    Ok(log)
}
