//! Distributions over ternary weights `{-alpha, 0, +alpha}`: moment
//! propagation, sampled training, weight extraction and uncertainty maps.

mod ckpt;
mod train;

pub use ckpt::{is_distribution, read_distribution, write_distribution};

pub use train::{
    dist_forward, evaluate_extraction, expected_loss, interference_cells, predict_extracted, region_std, train_dist,
    uncertainty_map, DistAlpha, DistConfig, DistVars, Extraction, UncertaintyMap, INTERFERENCE_POWER_FACTOR,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{conv2d_forward, Model, Tensor};
use crate::{Error, Result};

/// Grid points of a ternary weight in units of `alpha`.
pub const TERNARY_LEVELS: [f64; 3] = [-1.0, 0.0, 1.0];

/// Logits over `{-alpha, 0, +alpha}` for every weight of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryDist {
    /// `[n_weights, 3]`.
    pub logits: Tensor,
    pub alpha: f64,
    /// Shape of the layer's weight tensor.
    pub shape: Vec<usize>,
}

fn softmax3(row: &[f64]) -> [f64; 3] {
    let m = row[0].max(row[1]).max(row[2]);
    let e = [(row[0] - m).exp(), (row[1] - m).exp(), (row[2] - m).exp()];
    let s = e[0] + e[1] + e[2];
    [e[0] / s, e[1] / s, e[2] / s]
}

impl TernaryDist {
    /// Probabilities proportional to `exp(-|w - g| / T)` with `T = alpha / 2`,
    /// clamped to `p_bounds` and renormalized; logits are their logarithms.
    pub fn init_from_pretrained(w: &Tensor, alpha: f64, p_bounds: (f64, f64)) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("ternary range must be positive, got {alpha}")));
        }
        let (lo, hi) = p_bounds;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("invalid probability bounds {p_bounds:?}")));
        }
        let t = alpha / 2.0;
        let logits = w
            .data()
            .iter()
            .flat_map(|&v| {
                let e = TERNARY_LEVELS.map(|g| (-(v - g * alpha).abs() / t).exp());
                let s: f64 = e.iter().sum();
                let p = e.map(|x| (x / s).clamp(lo, hi));
                let s: f64 = p.iter().sum();
                p.map(|x| (x / s).ln())
            })
            .collect();
        Ok(Self {
            logits: Tensor::new(vec![w.len(), 3], logits)?,
            alpha,
            shape: w.shape().to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.logits.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn probabilities(&self) -> Vec<[f64; 3]> {
        self.logits.data().chunks(3).map(softmax3).collect()
    }

    /// Per-weight mean `sum p_g g` and variance `sum p_g g^2 - mean^2`.
    pub fn weight_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let a = self.alpha;
        self.probabilities()
            .iter()
            .map(|p| {
                let e = a * (p[2] - p[0]);
                (e, (a * a * (p[0] + p[2]) - e * e).max(0.0))
            })
            .unzip()
    }

    /// Most probable grid point of every weight.
    pub fn most_probable(&self) -> Result<Tensor> {
        let data = self
            .logits
            .data()
            .chunks(3)
            .map(|r| {
                let k = (0..3).fold(0, |b, i| if r[i] > r[b] { i } else { b });
                TERNARY_LEVELS[k] * self.alpha
            })
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// One independent draw of every weight.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let data = self
            .probabilities()
            .iter()
            .map(|p| {
                let u: f64 = rng.random();
                let k = if u < p[0] {
                    0
                } else if u < p[0] + p[1] {
                    1
                } else {
                    2
                };
                TERNARY_LEVELS[k] * self.alpha
            })
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// Mean Shannon entropy (nats) of the per-weight distributions.
    pub fn mean_entropy(&self) -> f64 {
        let p = self.probabilities();
        let h: f64 = p
            .iter()
            .map(|r| -r.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>())
            .sum();
        h / p.len().max(1) as f64
    }
}

/// Per-activation mean and variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationMoments {
    pub shape: Vec<usize>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Moments of a convolution with independent random weights and a
/// deterministic input: `mean = conv(x, E[w]) + b`, `var = conv(x^2, V[w])`.
pub fn clt_forward(x: &Tensor, dist: &TernaryDist, bias: Option<&[f64]>) -> Result<ActivationMoments> {
    let dims = x.dims4()?;
    let c_out = *dist.shape.first().ok_or_else(|| Error::Shape("empty weight shape".into()))?;
    let (e, v) = dist.weight_moments();
    let mean = conv2d_forward(x.data(), dims, &e, bias, c_out)?;
    let sq: Vec<f64> = x.data().iter().map(|a| a * a).collect();
    let var = conv2d_forward(&sq, dims, &v, None, c_out)?;
    Ok(ActivationMoments {
        shape: vec![dims.0, c_out, dims.2, dims.3],
        mean,
        var,
    })
}

/// `mean + sqrt(var) * eps` with caller-supplied standard normal `eps`.
pub fn local_reparam(m: &ActivationMoments, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != m.mean.len() {
        return Err(Error::Shape(format!("{} noise values for {} activations", eps.len(), m.mean.len())));
    }
    if m.var.iter().any(|&v| v < 0.0) {
        return Err(Error::NonFinite("negative activation variance".into()));
    }
    Ok(m.mean.iter().zip(&m.var).zip(eps).map(|((mu, v), e)| mu + v.sqrt() * e).collect())
}

/// Ternary distributions for every layer plus the deterministic parameters
/// (biases and batch norm) they share.
#[derive(Debug, Clone, PartialEq)]
pub struct DistModel {
    pub base: Model,
    pub layers: Vec<TernaryDist>,
}

impl DistModel {
    /// Initializes from a pretrained model with `alpha = max|W|` per layer.
    pub fn from_pretrained(model: &Model, p_bounds: (f64, f64)) -> Result<Self> {
        let layers = model
            .layers
            .iter()
            .map(|l| TernaryDist::init_from_pretrained(&l.weight, crate::quant::dynamic_range_statistics(l.weight.data()), p_bounds))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            base: model.clone(),
            layers,
        })
    }

    /// Deterministic model with the given per-layer weights.
    pub fn with_weights(&self, weights: Vec<Tensor>) -> Result<Model> {
        let mut m = self.base.clone();
        if weights.len() != m.layers.len() {
            return Err(Error::Shape(format!("{} weight tensors for {} layers", weights.len(), m.layers.len())));
        }
        for (l, w) in m.layers.iter_mut().zip(weights) {
            if w.shape() != l.weight.shape() {
                return Err(Error::Shape(format!("weight shape {:?}", w.shape())));
            }
            l.weight = w;
        }
        Ok(m)
    }

    pub fn most_probable(&self) -> Result<Model> {
        self.with_weights(self.layers.iter().map(|d| d.most_probable()).collect::<Result<_>>()?)
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<Model> {
        self.with_weights(self.layers.iter().map(|d| d.sample(rng)).collect::<Result<_>>()?)
    }

    /// Weight-count-weighted mean entropy over all layers.
    pub fn mean_entropy(&self) -> f64 {
        let n: usize = self.layers.iter().map(|d| d.len()).sum();
        self.layers.iter().map(|d| d.mean_entropy() * d.len() as f64).sum::<f64>() / n.max(1) as f64
    }
}
