use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use super::{dynamic_range_statistics, grid_max_index, BitWidth, QuantMode, QuantSpec, QuantTarget, RangeMode};
use crate::eval::BitAssignment;
use crate::rd_signal::LabeledSample;
use crate::tensor::{
    forward_model, AdamConfig, AdamState, BestSnapshot, BnMode, EpochLog, LayerHooks, Model, ModelSpec, Patches,
    QuantStep, Tape, Tensor, TrainConfig, Var,
};
use crate::{Error, Result};

/// Log-domain step and range of one quantized tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerRange {
    pub log_step: f64,
    pub log_range: f64,
}

impl LayerRange {
    /// Step and range of a `k`-bit grid spanning `alpha`.
    pub fn from_grid(k: u32, alpha: f64) -> Self {
        let log_range = alpha.ln();
        Self {
            log_step: log_range - grid_max_index(k).ln(),
            log_range,
        }
    }

    pub fn step(&self) -> f64 {
        self.log_step.exp()
    }

    pub fn range(&self) -> f64 {
        self.log_range.exp()
    }

    /// Real-valued estimate `1 + log2(alpha / step + 1)`.
    pub fn bits_estimate(&self) -> f64 {
        1.0 + ((self.log_range - self.log_step).exp() + 1.0).log2()
    }

    /// `1 + ceil(log2(alpha / step + 1))`, clamped to `[2, 32]`.
    pub fn bits(&self) -> u32 {
        let k = 1.0 + ((self.log_range - self.log_step).exp() + 1.0).log2().ceil();
        k.clamp(2.0, 32.0) as u32
    }

    /// Keeps `step <= alpha` and the derived bit-width at most 32.
    pub fn project(&mut self) {
        let max_ratio = grid_max_index(32).ln();
        let d = (self.log_range - self.log_step).clamp(0.0, max_ratio);
        self.log_step = self.log_range - d;
    }
}

/// Trainable ranges of every weight layer and hidden activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedBitwidthParams {
    pub weights: Vec<LayerRange>,
    pub activations: Vec<LayerRange>,
}

impl LearnedBitwidthParams {
    fn flatten(&self) -> Vec<Tensor> {
        self.weights
            .iter()
            .chain(&self.activations)
            .flat_map(|r| [Tensor::scalar(r.log_step), Tensor::scalar(r.log_range)])
            .collect()
    }

    fn assign(&mut self, flat: &[Tensor]) {
        for (r, pair) in self.weights.iter_mut().chain(&mut self.activations).zip(flat.chunks(2)) {
            r.log_step = pair[0].item();
            r.log_range = pair[1].item();
            r.project();
        }
    }
}

/// Weighting of the average bit-width loss and its adaptive scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BitLossConfig {
    pub gamma0: f64,
    /// F1 drop below the best value that still counts as holding.
    pub tolerance: f64,
    pub factor: f64,
    /// `gamma` stays within `[gamma0 / max_ratio, gamma0 * max_ratio]`.
    pub max_ratio: f64,
    /// Cells of one RD map, used to count activations.
    pub rd_cells: usize,
}

impl Default for BitLossConfig {
    fn default() -> Self {
        Self {
            gamma0: 1e-4,
            tolerance: 0.002,
            factor: 2.0,
            max_ratio: 64.0,
            rd_cells: 9216,
        }
    }
}

impl BitLossConfig {
    /// Weights per layer and activations per hidden layer.
    pub fn counts(&self, spec: &ModelSpec) -> (Vec<f64>, Vec<f64>) {
        let w = (0..spec.layers()).map(|l| spec.layer_weight_count(l) as f64).collect();
        let a = spec.channels[..spec.layers() - 1]
            .iter()
            .map(|&c| (c * self.rd_cells) as f64)
            .collect();
        (w, a)
    }
}

/// Count-weighted mean of the real-valued bit estimates over the targeted
/// tensors.
pub fn avg_bitwidth_loss(
    params: &LearnedBitwidthParams,
    cfg: &BitLossConfig,
    spec: &ModelSpec,
    target: QuantTarget,
) -> Result<f64> {
    let (nw, na) = cfg.counts(spec);
    if params.weights.len() != nw.len() || params.activations.len() != na.len() {
        return Err(Error::Shape("learned ranges do not match the model".into()));
    }
    let mut terms = Vec::new();
    if target.weights() {
        terms.extend(params.weights.iter().zip(&nw));
    }
    if target.activations() {
        terms.extend(params.activations.iter().zip(&na));
    }
    let total: f64 = terms.iter().map(|t| t.1).sum();
    if !(total > 0.0) {
        return Err(Error::Config("bit-width average over zero elements".into()));
    }
    Ok(terms.iter().map(|(r, n)| r.bits_estimate() * *n).sum::<f64>() / total)
}

/// Next bit-loss scale after the newest validation F1 in `history`. The
/// scale grows by `factor` while F1 stays within `tolerance` of the best
/// earlier value and shrinks by `factor` otherwise.
pub fn adaptive_bit_scale(history: &[f64], prev: f64, cfg: &BitLossConfig) -> f64 {
    let Some((&current, earlier)) = history.split_last() else {
        return prev;
    };
    let best = earlier.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let next = if current >= best - cfg.tolerance {
        prev * cfg.factor
    } else {
        prev / cfg.factor
    };
    next.clamp(cfg.gamma0 / cfg.max_ratio, cfg.gamma0 * cfg.max_ratio)
}

/// Quantization state carried alongside the real auxiliary weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantState {
    pub spec: QuantSpec,
    pub learned: LearnedBitwidthParams,
    /// Running maximum of each hidden activation.
    pub act_max: Vec<f64>,
    pub act_momentum: f64,
}

impl QuantState {
    /// Learned ranges start at the weight statistics with `init_bits` (or the
    /// fixed bit-width); activation ranges start at 1 until calibrated.
    pub fn new(model: &Model, spec: QuantSpec, init_bits: u32) -> Result<Self> {
        spec.validate()?;
        let k = spec.fixed_bits().unwrap_or(init_bits).max(2);
        let weights = model
            .layers
            .iter()
            .map(|l| LayerRange::from_grid(k, dynamic_range_statistics(l.weight.data())))
            .collect();
        let hidden = model.layers.len() - 1;
        Ok(Self {
            spec,
            learned: LearnedBitwidthParams {
                weights,
                activations: vec![LayerRange::from_grid(k, 1.0); hidden],
            },
            act_max: vec![1.0; hidden],
            act_momentum: 0.9,
        })
    }

    fn init_bits(&self) -> u32 {
        self.spec
            .fixed_bits()
            .unwrap_or_else(|| self.learned.activations.first().map_or(8, |r| r.bits()))
            .max(2)
    }

    fn set_act_max(&mut self, observed: &[f64]) {
        let k = self.init_bits();
        for (l, &m) in observed.iter().enumerate() {
            let m = if m > 0.0 { m } else { 1.0 };
            self.act_max[l] = m;
            self.learned.activations[l] = LayerRange::from_grid(k, m);
        }
    }

    fn update_act_max(&mut self, observed: &[f64]) {
        let mu = self.act_momentum;
        for (a, &m) in self.act_max.iter_mut().zip(observed) {
            if m > 0.0 {
                *a = mu * *a + (1.0 - mu) * m;
            }
        }
    }
}

/// Tape handles of the learned log-step and log-range scalars.
#[derive(Debug, Clone)]
struct LearnedVars {
    weights: Vec<(Var, Var)>,
    activations: Vec<(Var, Var)>,
}

impl LearnedVars {
    fn register(tape: &mut Tape, p: &LearnedBitwidthParams) -> Self {
        let mut reg = |r: &LayerRange| (tape.param(Tensor::scalar(r.log_step)), tape.param(Tensor::scalar(r.log_range)));
        Self {
            weights: p.weights.iter().map(&mut reg).collect(),
            activations: p.activations.iter().map(&mut reg).collect(),
        }
    }

    fn all(&self) -> Vec<Var> {
        self.weights
            .iter()
            .chain(&self.activations)
            .flat_map(|&(s, r)| [s, r])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HookMode {
    Train,
    /// Quantized weights, plain ReLU, activation maxima recorded.
    Calibrate,
}

/// Substitutes quantized weights and activations during training.
pub struct QatHooks<'a> {
    state: &'a QuantState,
    vars: Option<&'a LearnedVars>,
    mode: HookMode,
    observed: Vec<f64>,
}

impl<'a> QatHooks<'a> {
    fn new(state: &'a QuantState, vars: Option<&'a LearnedVars>, mode: HookMode) -> Self {
        Self {
            state,
            vars,
            mode,
            observed: vec![0.0; state.act_max.len()],
        }
    }

    fn learned(&self, weights: bool, l: usize) -> Result<(Var, Var)> {
        let vars = self
            .vars
            .ok_or_else(|| Error::Config("learned range without initialized range parameters".into()))?;
        let v = if weights { &vars.weights } else { &vars.activations };
        v.get(l)
            .copied()
            .ok_or_else(|| Error::Config(format!("no learned range for layer {l}")))
    }

    fn steps(&self, weights: bool, l: usize, stat_alpha: f64) -> Result<(QuantStep, QuantStep)> {
        let spec = self.state.spec;
        match (spec.bits, spec.range) {
            (BitWidth::Fixed(k), RangeMode::Learned) => {
                let (_, r) = self.learned(weights, l)?;
                Ok((
                    QuantStep::Log {
                        var: r,
                        offset: -grid_max_index(k).ln(),
                    },
                    QuantStep::Log { var: r, offset: 0.0 },
                ))
            }
            (BitWidth::Fixed(k), range) => {
                let alpha = if range == RangeMode::None { 1.0 } else { stat_alpha };
                Ok((QuantStep::Const(alpha / grid_max_index(k)), QuantStep::Const(alpha)))
            }
            (BitWidth::Learned, _) => {
                let (s, r) = self.learned(weights, l)?;
                Ok((QuantStep::Log { var: s, offset: 0.0 }, QuantStep::Log { var: r, offset: 0.0 }))
            }
        }
    }
}

impl LayerHooks for QatHooks<'_> {
    fn weight(&mut self, tape: &mut Tape, l: usize, w: Var) -> Result<Var> {
        let spec = self.state.spec;
        if !spec.target.weights() {
            return Ok(w);
        }
        let alpha = dynamic_range_statistics(tape.value(w).data());
        match spec.mode {
            QuantMode::Binary => {
                let s = tape.sign(w)?;
                match spec.range {
                    RangeMode::None => Ok(s),
                    RangeMode::Statistics => tape.scale(s, alpha),
                    RangeMode::Learned => {
                        let (_, r) = self.learned(true, l)?;
                        tape.scale_exp(s, r)
                    }
                }
            }
            QuantMode::Integer => {
                let (step, range) = self.steps(true, l, alpha)?;
                tape.quantize(w, step, range)
            }
        }
    }

    fn activation(&mut self, tape: &mut Tape, l: usize, x: Var) -> Result<Var> {
        let spec = self.state.spec;
        if self.mode == HookMode::Calibrate || !spec.target.activations() {
            let y = tape.relu(x)?;
            self.observed[l] = tape.value(y).max_abs();
            return Ok(y);
        }
        match spec.mode {
            QuantMode::Binary => tape.sign(x),
            QuantMode::Integer => {
                let y = tape.relu(x)?;
                self.observed[l] = tape.value(y).max_abs();
                let (step, range) = self.steps(false, l, self.state.act_max[l])?;
                tape.quantize(y, step, range)
            }
        }
    }
}

/// Sets the activation ranges to the largest post-ReLU value seen over the
/// first `batches` minibatches.
pub fn calibrate_activation_ranges(
    model: &Model,
    state: &mut QuantState,
    patches: &Patches,
    batch_size: usize,
    batches: usize,
) -> Result<()> {
    let mut maxima = vec![0.0f64; state.act_max.len()];
    let idx: Vec<usize> = (0..patches.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)).take(batches.max(1)) {
        let (x, _) = patches.batch(chunk)?;
        let mut tape = Tape::new();
        let pv = model.register(&mut tape);
        let vars = LearnedVars::register(&mut tape, &state.learned);
        let xv = tape.constant(x);
        let mut hooks = QatHooks::new(state, Some(&vars), HookMode::Calibrate);
        forward_model(&mut tape, model, &pv, xv, BnMode::Train, &mut hooks)?;
        for (m, o) in maxima.iter_mut().zip(&hooks.observed) {
            *m = m.max(*o);
        }
    }
    state.set_act_max(&maxima);
    Ok(())
}

/// Frozen encoding of one layer's weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum WeightCode {
    Real,
    Binary { alpha: f64 },
    Integer { k: u32, step: f64 },
}

impl WeightCode {
    pub fn bits(&self) -> u32 {
        match self {
            Self::Real => 32,
            Self::Binary { .. } => 1,
            Self::Integer { k, .. } => *k,
        }
    }
}

/// Frozen nonlinearity of one hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ActCode {
    Relu,
    Sign,
    Integer { k: u32, step: f64, range: f64 },
}

impl ActCode {
    pub fn bits(&self) -> u32 {
        match self {
            Self::Relu => 32,
            Self::Sign => 1,
            Self::Integer { k, .. } => *k,
        }
    }
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

/// A model with weights on their grids and fixed activation quantizers.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub model: Model,
    pub quant: QuantSpec,
    pub weights: Vec<WeightCode>,
    pub acts: Vec<ActCode>,
}

struct FrozenHooks<'a>(&'a [ActCode]);

impl LayerHooks for FrozenHooks<'_> {
    fn activation(&mut self, tape: &mut Tape, l: usize, x: Var) -> Result<Var> {
        match self.0[l] {
            ActCode::Relu => tape.relu(x),
            ActCode::Sign => tape.sign(x),
            ActCode::Integer { step, range, .. } => {
                let y = tape.relu(x)?;
                tape.quantize(y, QuantStep::Const(step), QuantStep::Const(range))
            }
        }
    }
}

impl QuantizedModel {
    /// Snaps the auxiliary weights of `model` to the grids described by
    /// `state`. Steps, ranges and all remaining parameters are rounded to
    /// `f32` so the result survives a checkpoint round trip unchanged.
    pub fn freeze(model: &Model, state: &QuantState) -> Result<Self> {
        let spec = state.spec;
        let mut out = model.clone();
        for p in out.params_mut() {
            *p = p.map(f32_round);
        }
        for l in &mut out.layers {
            if let Some(bn) = l.bn.as_mut() {
                bn.running_mean.iter_mut().for_each(|v| *v = f32_round(*v));
                bn.running_var.iter_mut().for_each(|v| *v = f32_round(*v));
            }
        }
        let mut weights = Vec::with_capacity(model.layers.len());
        for (l, layer) in model.layers.iter().enumerate() {
            let w = layer.weight.data();
            let code = if !spec.target.weights() {
                WeightCode::Real
            } else {
                let stat = dynamic_range_statistics(w);
                match spec.mode {
                    QuantMode::Binary => {
                        let alpha = f32_round(match spec.range {
                            RangeMode::None => 1.0,
                            RangeMode::Statistics => stat,
                            RangeMode::Learned => state.learned.weights[l].range(),
                        });
                        out.layers[l].weight = layer.weight.map(|v| super::quantize_binary(v, alpha));
                        WeightCode::Binary { alpha }
                    }
                    QuantMode::Integer => {
                        let (k, step, alpha) = grid_of(spec, &state.learned.weights[l], stat);
                        let q = grid_max_index(k);
                        let step32 = f32_round(step);
                        out.layers[l].weight =
                            layer.weight.map(|v| (v.clamp(-alpha, alpha) / step).round().clamp(-q, q) * step32);
                        WeightCode::Integer { k, step: step32 }
                    }
                }
            };
            weights.push(code);
        }
        let acts = (0..state.act_max.len())
            .map(|l| {
                if !spec.target.activations() {
                    return ActCode::Relu;
                }
                match spec.mode {
                    QuantMode::Binary => ActCode::Sign,
                    QuantMode::Integer => {
                        let (k, step, range) = grid_of(spec, &state.learned.activations[l], state.act_max[l]);
                        ActCode::Integer {
                            k,
                            step: f32_round(step),
                            range: f32_round(range),
                        }
                    }
                }
            })
            .collect();
        Ok(Self {
            model: out,
            quant: spec,
            weights,
            acts,
        })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pv = self.model.register(&mut tape);
        let xv = tape.constant(x.clone());
        let out = forward_model(&mut tape, &self.model, &pv, xv, BnMode::Eval, &mut FrozenHooks(&self.acts))?;
        Ok(tape.value(out.output).clone())
    }

    pub fn weight_bits(&self) -> Vec<u32> {
        self.weights.iter().map(WeightCode::bits).collect()
    }

    pub fn act_bits(&self) -> Vec<u32> {
        self.acts.iter().map(ActCode::bits).collect()
    }

    pub fn bit_assignment(&self) -> BitAssignment {
        BitAssignment {
            weight_bits: self.weight_bits(),
            act_bits: self.act_bits(),
            quantized_weights: self.weights.iter().any(|w| *w != WeightCode::Real),
        }
    }
}

/// Bit-width, step and clipping range of an integer quantizer.
fn grid_of(spec: QuantSpec, learned: &LayerRange, stat: f64) -> (u32, f64, f64) {
    match (spec.bits, spec.range) {
        (BitWidth::Fixed(k), RangeMode::None) => (k, 1.0 / grid_max_index(k), 1.0),
        (BitWidth::Fixed(k), RangeMode::Statistics) => (k, stat / grid_max_index(k), stat),
        (BitWidth::Fixed(k), RangeMode::Learned) => (k, learned.range() / grid_max_index(k), learned.range()),
        (BitWidth::Learned, _) => (learned.bits(), learned.step(), learned.range()),
    }
}

/// Quantization-aware fine-tuning settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QatConfig {
    pub quant: QuantSpec,
    pub train: TrainConfig,
    pub bit_loss: BitLossConfig,
    /// Adam step size of the log-step and log-range parameters.
    pub log_lr: f64,
    /// Starting bit-width of learned-bit runs.
    pub init_bits: u32,
    pub calibration_batches: usize,
}

impl QatConfig {
    pub fn new(quant: QuantSpec, train: TrainConfig) -> Self {
        Self {
            quant,
            train,
            bit_loss: BitLossConfig::default(),
            log_lr: 5e-3,
            init_bits: 8,
            calibration_batches: 4,
        }
    }
}

/// Result of [`train_qat`].
#[derive(Debug, Clone)]
pub struct QatOutcome {
    pub model: QuantizedModel,
    pub log: Vec<EpochLog>,
    pub learned: LearnedBitwidthParams,
}

/// Fine-tunes the real auxiliary weights of `model` with quantized forward
/// passes. The loss is the MSE plus, for learned bit-widths, `gamma` times the
/// average bit-width. `validate` scores the frozen snapshot after each epoch.
pub fn train_qat(
    model: &Model,
    train: &[LabeledSample],
    cfg: &QatConfig,
    validate: &mut dyn FnMut(&QuantizedModel) -> Result<Option<f64>>,
) -> Result<QatOutcome> {
    cfg.quant.validate()?;
    cfg.train.validate()?;
    let patches = Patches::from_samples(train, cfg.train.patch)?;
    let mut state = QuantState::new(model, cfg.quant, cfg.init_bits)?;
    calibrate_activation_ranges(model, &mut state, &patches, cfg.train.batch_size, cfg.calibration_batches)?;
    let learned_bits = cfg.quant.bits == BitWidth::Learned;
    let uses_learned = cfg.quant.range == RangeMode::Learned;
    let (nw, na) = cfg.bit_loss.counts(&model.spec);

    struct Run {
        model: Model,
        state: QuantState,
        gamma: f64,
        history: Vec<f64>,
    }
    let run = RefCell::new(Run {
        model: model.clone(),
        state,
        gamma: cfg.bit_loss.gamma0,
        history: Vec::new(),
    });
    let mut adam = AdamState::new(cfg.train.adam, &model.params());
    let log_tensors = run.borrow().state.learned.flatten();
    let mut log_adam = AdamState::new(
        AdamConfig {
            lr: cfg.log_lr,
            ..cfg.train.adam
        },
        &log_tensors.iter().collect::<Vec<_>>(),
    );
    let mut log = Vec::with_capacity(cfg.train.epochs);
    let mut best: Option<BestSnapshot<QuantizedModel>> = None;
    let mut last: Option<QuantizedModel> = None;
    crate::tensor::run_epochs(
        &patches,
        &cfg.train,
        &mut |x, y| {
            let mut r = run.borrow_mut();
            let Run { model, state, gamma, .. } = &mut *r;
            let mut tape = Tape::new();
            let pv = model.register(&mut tape);
            let vars = uses_learned.then(|| LearnedVars::register(&mut tape, &state.learned));
            let xv = tape.constant(x.clone());
            let mut hooks = QatHooks::new(state, vars.as_ref(), HookMode::Train);
            let out = forward_model(&mut tape, model, &pv, xv, BnMode::Train, &mut hooks)?;
            let observed = std::mem::take(&mut hooks.observed);
            let mse = tape.mse(out.output, y)?;
            let mse_value = tape.value(mse).item();
            if !mse_value.is_finite() {
                return Ok(mse_value);
            }
            let loss = match (&vars, learned_bits) {
                (Some(v), true) => {
                    let mut terms = Vec::new();
                    if cfg.quant.target.weights() {
                        terms.extend(v.weights.iter().zip(&nw).map(|(&(s, r), &n)| (s, r, n)));
                    }
                    if cfg.quant.target.activations() {
                        terms.extend(v.activations.iter().zip(&na).map(|(&(s, r), &n)| (s, r, n)));
                    }
                    let bits = tape.bit_width_avg(&terms)?;
                    let scaled = tape.scale(bits, *gamma)?;
                    tape.add(mse, scaled)?
                }
                _ => mse,
            };
            tape.backward(loss)?;
            let grads: Vec<Option<&[f64]>> = pv.all().iter().map(|&v| tape.grad(v)).collect();
            adam.update(&mut model.params_mut(), &grads)?;
            if let Some(v) = &vars {
                let mut flat = state.learned.flatten();
                let g: Vec<Option<&[f64]>> = v.all().iter().map(|&v| tape.grad(v)).collect();
                log_adam.update(&mut flat.iter_mut().collect::<Vec<_>>(), &g)?;
                state.learned.assign(&flat);
            }
            model.update_bn(&out);
            state.update_act_max(&observed);
            Ok(mse_value)
        },
        &mut |epoch, train_mse| {
            let mut r = run.borrow_mut();
            let snapshot = QuantizedModel::freeze(&r.model, &r.state)?;
            let val_f1 = validate(&snapshot)?;
            let avg_bits = if learned_bits {
                Some(avg_bitwidth_loss(&r.state.learned, &cfg.bit_loss, &r.model.spec, cfg.quant.target)?)
            } else {
                None
            };
            let gamma = learned_bits.then_some(r.gamma);
            if let (Some(f1), true) = (val_f1, learned_bits) {
                r.history.push(f1);
                r.gamma = adaptive_bit_scale(&r.history, r.gamma, &cfg.bit_loss);
            }
            if cfg.train.keep_best {
                BestSnapshot::offer(&mut best, val_f1, epoch, &snapshot);
            }
            log.push(EpochLog {
                epoch,
                train_mse,
                val_f1,
                gamma,
                avg_bits,
            });
            last = Some(snapshot);
            Ok(())
        },
    )?;
    let r = run.into_inner();
    let model = match (best, last) {
        (Some(b), _) => b.value,
        (None, Some(l)) => l,
        (None, None) => QuantizedModel::freeze(&r.model, &r.state)?,
    };
    Ok(QatOutcome {
        model,
        log,
        learned: r.state.learned,
    })
}
