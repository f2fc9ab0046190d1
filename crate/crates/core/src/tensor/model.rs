use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Tape, Tensor, Var};
use crate::rd_signal::{CMatrix, LabeledSample, RdMap};
use crate::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Channel layout family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    /// Every hidden layer has the same width.
    A,
    /// Each hidden layer halves the width of the previous one.
    B,
}

/// Layered CNN description. `channels[l]` is the output width of layer `l`;
/// the input always has two channels (real and imaginary part).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub channels: Vec<usize>,
}

impl ModelSpec {
    /// `layers` convolutions starting at width `base`, ending with 2 outputs.
    pub fn new(arch: Arch, layers: usize, base: usize) -> Result<Self> {
        if layers < 2 {
            return Err(Error::Config(format!("need at least 2 layers, got {layers}")));
        }
        if base == 0 {
            return Err(Error::Config("channel count must be positive".into()));
        }
        let mut channels = Vec::with_capacity(layers);
        let mut c = base;
        for l in 0..layers - 1 {
            if l > 0 && arch == Arch::B {
                if c % 2 != 0 {
                    return Err(Error::Config(format!(
                        "L{layers}-C{base}-B: width {c} cannot be halved"
                    )));
                }
                c /= 2;
            }
            channels.push(c);
        }
        channels.push(2);
        Ok(Self { arch, channels })
    }

    /// Explicit widths, checked against the rules of `arch`.
    pub fn from_channels(arch: Arch, channels: Vec<usize>) -> Result<Self> {
        let spec = Self { arch, channels };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n < 2 {
            return Err(Error::Config(format!("need at least 2 layers, got {n}")));
        }
        if self.channels[n - 1] != 2 {
            return Err(Error::Config("last layer must have 2 output channels".into()));
        }
        let hidden = &self.channels[..n - 1];
        if hidden.contains(&0) {
            return Err(Error::Config("channel count must be positive".into()));
        }
        let ok = match self.arch {
            Arch::A => hidden.windows(2).all(|p| p[0] == p[1]),
            Arch::B => hidden.windows(2).all(|p| p[1] * 2 == p[0]),
        };
        if !ok {
            return Err(Error::Config(format!(
                "channels {:?} violate architecture {:?}",
                self.channels, self.arch
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.channels.len()
    }

    /// Input width of layer `l`.
    pub fn in_channels(&self, l: usize) -> usize {
        if l == 0 {
            2
        } else {
            self.channels[l - 1]
        }
    }

    /// Convolution weights of layer `l` (bias excluded).
    pub fn layer_weight_count(&self, l: usize) -> usize {
        9 * self.in_channels(l) * self.channels[l]
    }

    /// Total convolution weights, `sum_l 9 * C_{l-1} * C_l`.
    pub fn weight_count(&self) -> usize {
        (0..self.layers()).map(|l| self.layer_weight_count(l)).sum()
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let arch = match self.arch {
            Arch::A => 'A',
            Arch::B => 'B',
        };
        write!(f, "L{}-C{}-{}", self.layers(), self.channels[0], arch)
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    /// Parses names such as `L3-C16-B`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unparsable architecture '{s}', expected L<n>-C<n>-<A|B>"));
        let parts: Vec<&str> = s.split('-').collect();
        let [l, c, a] = parts[..] else {
            return Err(bad());
        };
        let num = |p: &str, prefix: char| -> Result<usize> {
            let digits = p.strip_prefix(prefix).ok_or_else(bad)?;
            if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.starts_with('0') {
                return Err(bad());
            }
            digits.parse().map_err(|_| bad())
        };
        let arch = match a {
            "A" => Arch::A,
            "B" => Arch::B,
            _ => return Err(bad()),
        };
        Self::new(arch, num(l, 'L')?, num(c, 'C')?)
    }
}

/// Batch-norm affine parameters and running statistics of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(c: usize) -> Self {
        Self {
            gamma: Tensor::filled(vec![c], 1.0),
            beta: Tensor::zeros(vec![c]),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        }
    }

    /// Momentum update with the biased batch variance of `n` values per
    /// channel, stored unbiased.
    pub fn update(&mut self, mean: &[f64], var: &[f64], n: usize) {
        let corr = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
        for c in 0..mean.len() {
            self.running_mean[c] = (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * mean[c];
            self.running_var[c] = (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * var[c] * corr;
        }
    }
}

/// Parameters of one convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `[c_out, c_in, 3, 3]`.
    pub weight: Tensor,
    pub bias: Tensor,
    /// Present on hidden layers only.
    pub bn: Option<BatchNorm>,
}

/// A CNN instance: spec plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<LayerParams>,
}

impl Model {
    /// He-uniform conv weights, zero biases, unit BN scale and zero shift.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = spec.layers();
        let layers = (0..n)
            .map(|l| {
                let (ci, co) = (spec.in_channels(l), spec.channels[l]);
                let bound = (6.0 / (9 * ci) as f64).sqrt();
                let w = (0..co * ci * 9).map(|_| rng.random_range(-bound..bound)).collect();
                LayerParams {
                    weight: Tensor::new(vec![co, ci, 3, 3], w).expect("consistent shape"),
                    bias: Tensor::zeros(vec![co]),
                    bn: (l + 1 < n).then(|| BatchNorm::new(co)),
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    /// Trainable tensors in declaration order: per layer weight, bias, then
    /// BN scale and shift where present.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
            if let Some(bn) = &l.bn {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Some(bn) = &mut l.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    /// Places every parameter on `tape` as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let mut pv = ParamVars::default();
        for l in &self.layers {
            pv.weights.push(tape.param(l.weight.clone()));
            pv.biases.push(tape.param(l.bias.clone()));
            pv.bn.push(l.bn.as_ref().map(|bn| (tape.param(bn.gamma.clone()), tape.param(bn.beta.clone()))));
        }
        pv
    }

    /// Sets the weights and bias of the linear output layer to zero.
    pub fn zero_output_layer(&mut self) {
        if let Some(last) = self.layers.last_mut() {
            last.weight.data_mut().fill(0.0);
            last.bias.data_mut().fill(0.0);
        }
    }

    /// Applies the batch statistics collected during a training forward pass.
    pub fn update_bn(&mut self, out: &ForwardOut) {
        for (layer, stats) in self.layers.iter_mut().zip(&out.bn_stats) {
            if let (Some(bn), Some((m, v))) = (layer.bn.as_mut(), stats) {
                bn.update(m, v, out.bn_count);
            }
        }
    }

    /// Eval-mode prediction without quantization.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pv = self.register(&mut tape);
        let xv = tape.constant(x.clone());
        let out = forward_model(&mut tape, self, &pv, xv, BnMode::Eval, &mut PlainHooks)?;
        Ok(tape.value(out.output).clone())
    }
}

/// Tape handles of a model's parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    pub bn: Vec<Option<(Var, Var)>>,
}

impl ParamVars {
    /// Same order as [`Model::params`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in 0..self.weights.len() {
            out.push(self.weights[l]);
            out.push(self.biases[l]);
            if let Some((g, b)) = self.bn[l] {
                out.push(g);
                out.push(b);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Result of [`forward_model`].
pub struct ForwardOut {
    pub output: Var,
    /// Batch mean and biased variance per hidden layer (train mode only).
    pub bn_stats: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    /// Values per channel that entered each batch statistic.
    pub bn_count: usize,
}

/// Per-layer substitution points used by quantization-aware training.
pub trait LayerHooks {
    /// Effective convolution weights of layer `l`.
    fn weight(&mut self, _tape: &mut Tape, _layer: usize, w: Var) -> Result<Var> {
        Ok(w)
    }

    /// Nonlinearity of hidden layer `l`, applied to the normalized output.
    fn activation(&mut self, tape: &mut Tape, _layer: usize, x: Var) -> Result<Var> {
        tape.relu(x)
    }
}

/// Real-valued weights and ReLU.
pub struct PlainHooks;

impl LayerHooks for PlainHooks {}

/// Conv, BN and activation for every hidden layer, then a linear conv.
pub fn forward_model(
    tape: &mut Tape,
    model: &Model,
    params: &ParamVars,
    x: Var,
    mode: BnMode,
    hooks: &mut dyn LayerHooks,
) -> Result<ForwardOut> {
    let (b, c, h, w) = tape.value(x).dims4()?;
    if c != 2 {
        return Err(Error::Shape(format!("model input needs 2 channels, got {c}")));
    }
    let n = model.layers.len();
    let mut bn_stats = Vec::with_capacity(n);
    let mut y = x;
    for (l, layer) in model.layers.iter().enumerate() {
        let wv = hooks.weight(tape, l, params.weights[l])?;
        y = tape.conv2d(y, wv, Some(params.biases[l]))?;
        let mut stats = None;
        if let (Some(bn), Some((g, bt))) = (&layer.bn, params.bn[l]) {
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
            y = hooks.activation(tape, l, y)?;
        }
        bn_stats.push(stats);
    }
    Ok(ForwardOut {
        output: y,
        bn_stats,
        bn_count: b * h * w,
    })
}

/// Stacks RD maps into `[b, 2, h, w]` with real and imaginary channels,
/// each map multiplied by its entry of `scales`.
pub fn to_channels(maps: &[&RdMap], scales: &[f64]) -> Result<Tensor> {
    if maps.len() != scales.len() {
        return Err(Error::Shape(format!("{} maps but {} scales", maps.len(), scales.len())));
    }
    let Some(first) = maps.first() else {
        return Err(Error::Shape("no maps to stack".into()));
    };
    let (h, w) = first.0.shape();
    let hw = h * w;
    let mut data = vec![0.0; maps.len() * 2 * hw];
    for (s, (map, &k)) in maps.iter().zip(scales).enumerate() {
        if map.0.shape() != (h, w) {
            return Err(Error::Shape("maps of different sizes in one batch".into()));
        }
        let base = s * 2 * hw;
        for (i, z) in map.0.as_slice().iter().enumerate() {
            data[base + i] = z.re * k;
            data[base + hw + i] = z.im * k;
        }
    }
    Tensor::new(vec![maps.len(), 2, h, w], data)
}

/// Sample `s` of a `[b, 2, h, w]` tensor as an RD map, divided by `scale`.
pub fn from_channels(t: &Tensor, s: usize, scale: f64) -> Result<RdMap> {
    let (b, c, h, w) = t.dims4()?;
    if c != 2 || s >= b {
        return Err(Error::Shape(format!("cannot take sample {s} of {:?}", t.shape())));
    }
    let hw = h * w;
    let d = &t.data()[s * 2 * hw..(s + 1) * 2 * hw];
    let data = (0..hw)
        .map(|i| Complex64::new(d[i] / scale, d[hw + i] / scale))
        .collect();
    Ok(RdMap(CMatrix::from_vec(h, w, data)?))
}

/// Multiple of the median magnitude that maps to 1 after normalization.
pub const NORM_MEDIAN_MULTIPLE: f64 = 10.0;

/// Normalization factor `1 / (NORM_MEDIAN_MULTIPLE * median|map|)`. Falls
/// back to `1 / max|map|` when the median is zero and to 1 for a zero map.
pub fn normalize_map(map: &RdMap) -> f64 {
    let mut mags: Vec<f64> = map.0.as_slice().iter().map(|z| z.norm()).collect();
    let mid = mags.len() / 2;
    let (_, median, _) = mags.select_nth_unstable_by(mid, f64::total_cmp);
    let median = *median;
    if median > 0.0 {
        1.0 / (NORM_MEDIAN_MULTIPLE * median)
    } else if map.max_abs() > 0.0 {
        1.0 / map.max_abs()
    } else {
        1.0
    }
}

/// Normalization factor of a sample, taken from its interfered map and
/// shared by input and target.
pub fn normalize_pair(sample: &LabeledSample) -> f64 {
    normalize_map(&sample.interfered)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_counts() {
        for (name, count) in [
            ("L3-C8-B", 504),
            ("L3-C8-A", 864),
            ("L3-C16-B", 1584),
            ("L3-C16-A", 2880),
            ("L7-C32-A", 47232),
            ("L7-C256-B", 397584),
            ("L7-C256-A", 2958336),
        ] {
            let spec: ModelSpec = name.parse().unwrap();
            assert_eq!(spec.weight_count(), count, "{name}");
            assert_eq!(spec.to_string(), name);
        }
        let spec: ModelSpec = "L3-C16-B".parse().unwrap();
        assert_eq!(spec.channels, vec![16, 8, 2]);
        let spec: ModelSpec = "L7-C32-A".parse().unwrap();
        assert_eq!((spec.layers(), spec.channels[0], spec.arch), (7, 32, Arch::A));
    }

    #[test]
    fn parser_rejects_bad_names() {
        for bad in ["", "L3-C16", "L1-C16-B", "L3-C0-A", "L3-C16-C", "l3-c16-b", "L03-C16-B", "L6-C12-B", "L3-C+1-A"] {
            assert!(bad.parse::<ModelSpec>().is_err(), "{bad}");
        }
        assert!(ModelSpec::from_channels(Arch::A, vec![4, 8, 2]).is_err());
        assert!(ModelSpec::from_channels(Arch::B, vec![8, 4, 3]).is_err());
        assert!(ModelSpec::from_channels(Arch::B, vec![8, 4, 2]).is_ok());
    }

    #[test]
    fn same_shape_and_zero_final_layer() {
        for name in ["L2-C4-A", "L3-C8-B", "L4-C4-A"] {
            let spec: ModelSpec = name.parse().unwrap();
            let mut m = Model::build(&spec, 1).unwrap();
            let x = Tensor::filled(vec![2, 2, 5, 7], 0.3);
            assert_eq!(m.predict(&x).unwrap().shape(), x.shape());
            m.zero_output_layer();
            assert!(m.predict(&x).unwrap().data().iter().all(|&v| v == 0.0));
        }
        let m = Model::build(&"L2-C4-A".parse().unwrap(), 1).unwrap();
        assert!(m.predict(&Tensor::zeros(vec![1, 3, 4, 4])).is_err());
    }

    #[test]
    fn bn_train_normalizes_and_eval_matches_formula() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 4).map(|i| ((i * 37) % 11) as f64 * 10.0 - 40.0).collect();
        let x = tape.constant(Tensor::new(vec![2, 3, 2, 2], data.clone()).unwrap());
        let g = tape.param(Tensor::filled(vec![3], 1.0));
        let b = tape.param(Tensor::zeros(vec![3]));
        let (y, _, _) = tape.batch_norm_train(x, g, b, BN_EPS).unwrap();
        let out = tape.value(y).data().to_vec();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|s| out[(s * 3 + c) * 4..][..4].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 8.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
        }
        let cst = tape.constant(Tensor::filled(vec![2, 3, 2, 2], 4.2));
        let shift = tape.param(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let (y, _, _) = tape.batch_norm_train(cst, g, shift, BN_EPS).unwrap();
        for (i, v) in tape.value(y).data().iter().enumerate() {
            assert_eq!(*v, [0.5, -1.0, 2.0][(i / 4) % 3]);
        }
        // Eval mode on a 2-element batch against the closed form.
        let xs = [1.5, -0.25];
        let x = tape.constant(Tensor::new(vec![2, 1, 1, 1], xs.to_vec()).unwrap());
        let g = tape.param(Tensor::new(vec![1], vec![1.7]).unwrap());
        let b = tape.param(Tensor::new(vec![1], vec![-0.3]).unwrap());
        let y = tape.batch_norm_eval(x, g, b, &[0.2], &[0.8], BN_EPS).unwrap();
        for (k, v) in tape.value(y).data().iter().enumerate() {
            let expect = (xs[k] - 0.2) / (0.8 + BN_EPS).sqrt() * 1.7 - 0.3;
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn running_stats_update() {
        let mut bn = BatchNorm::new(1);
        bn.update(&[2.0], &[3.0], 4);
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((bn.running_var[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-15);
    }

    #[test]
    fn channel_round_trip() {
        let map = RdMap(CMatrix::from_fn(3, 4, |r, c| Complex64::new(r as f64, -(c as f64))));
        let t = to_channels(&[&map, &map], &[2.0, 0.5]).unwrap();
        assert_eq!(t.shape(), &[2, 2, 3, 4]);
        assert_eq!(from_channels(&t, 0, 2.0).unwrap(), map);
        assert_eq!(from_channels(&t, 1, 0.5).unwrap(), map);
        assert!(from_channels(&t, 2, 1.0).is_err());
    }

    #[test]
    fn median_normalization() {
        // Magnitudes 1..=9 have median 5.
        let map = RdMap(CMatrix::from_fn(3, 3, |r, c| Complex64::new(0.0, (3 * r + c + 1) as f64)));
        assert!((normalize_map(&map) - 1.0 / (NORM_MEDIAN_MULTIPLE * 5.0)).abs() < 1e-15);
        let scaled = map.0.map(|z| z * 4.0);
        assert!((normalize_map(&RdMap(scaled)) * 4.0 - normalize_map(&map)).abs() < 1e-15);
        let mut sparse = CMatrix::zeros(3, 3);
        sparse[(1, 1)] = Complex64::new(-2.0, 0.0);
        assert_eq!(normalize_map(&RdMap(sparse)), 0.5);
        assert_eq!(normalize_map(&RdMap(CMatrix::zeros(2, 2))), 1.0);
    }
}
