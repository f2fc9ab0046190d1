use super::conv::{conv2d_backward, conv2d_forward};
use super::Tensor;
use crate::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Step or range of a uniform quantizer: either a constant or
/// `exp(var + offset)` for a trainable log-domain scalar `var`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuantStep {
    Const(f64),
    Log { var: Var, offset: f64 },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Sign(Var),
    Quant {
        x: Var,
        step: QuantStep,
        range: QuantStep,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Square(Var),
    Scale(Var, f64),
    ScaleExp {
        x: Var,
        log_scale: Var,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    SumSquares(Var),
    TernaryMean {
        logits: Var,
        alpha: f64,
    },
    TernaryVar {
        logits: Var,
        alpha: f64,
    },
    Reparam {
        mu: Var,
        var: Var,
        eps: Vec<f64>,
    },
    BitWidthAvg {
        terms: Vec<(Var, Var, f64)>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Records a forward pass for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn round_half_away(v: f64) -> f64 {
    v.round()
}

fn softmax3(row: &[f64]) -> [f64; 3] {
    let m = row[0].max(row[1]).max(row[2]);
    let e = [(row[0] - m).exp(), (row[1] - m).exp(), (row[2] - m).exp()];
    let s = e[0] + e[1] + e[2];
    [e[0] / s, e[1] / s, e[2] / s]
}

const TERNARY_LEVELS: [f64; 3] = [-1.0, 0.0, 1.0];

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::Tape(format!("variable {} is not on this tape", v.0)))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa != sb {
            return Err(Error::Shape(format!("operands {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn quant_value(&self, q: QuantStep) -> Result<f64> {
        match q {
            QuantStep::Const(c) => Ok(c),
            QuantStep::Log { var, offset } => {
                let n = self.node(var)?;
                if n.value.len() != 1 {
                    return Err(Error::Shape("log-domain quantizer parameter must be scalar".into()));
                }
                Ok((n.value.item() + offset).exp())
            }
        }
    }

    /// Same-padded 3x3 convolution of `x: [b, c_in, h, w]` with
    /// `w: [c_out, c_in, 3, 3]` and optional bias `[c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let dims = self.node(x)?.value.dims4()?;
        let ws = self.node(w)?.value.shape().to_vec();
        if ws.len() != 4 || ws[1] != dims.1 || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::Shape(format!(
                "kernel {ws:?} incompatible with input channels {}",
                dims.1
            )));
        }
        let c_out = ws[0];
        if let Some(b) = b {
            if self.node(b)?.value.len() != c_out {
                return Err(Error::Shape(format!("bias must have {c_out} entries")));
            }
        }
        let out = conv2d_forward(
            self.nodes[x.0].value.data(),
            dims,
            self.nodes[w.0].value.data(),
            b.map(|b| self.nodes[b.0].value.data()),
            c_out,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        let value = Tensor::new(vec![dims.0, c_out, dims.2, dims.3], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b }, rg))
    }

    fn bn_checks(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (b, c, h, w) = self.node(x)?.value.dims4()?;
        if b == 0 {
            return Err(Error::Shape("batch norm on an empty batch".into()));
        }
        if self.node(gamma)?.value.len() != c || self.node(beta)?.value.len() != c {
            return Err(Error::Shape(format!("batch norm affine must have {c} entries")));
        }
        Ok((b, c, h * w))
    }

    /// Batch normalization with batch statistics. Returns the output together
    /// with the per-channel batch mean and biased variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (b, c, hw) = self.bn_checks(x, gamma, beta)?;
        let n = (b * hw) as f64;
        let xs = self.nodes[x.0].value.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for s in 0..b {
            for ch in 0..c {
                mean[ch] += xs[(s * c + ch) * hw..][..hw].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for s in 0..b {
            for ch in 0..c {
                var[ch] += xs[(s * c + ch) * hw..][..hw]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.nodes[gamma.0].value.data();
        let bt = self.nodes[beta.0].value.data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for s in 0..b {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    xhat[i] = (xs[i] - mean[ch]) * inv_std[ch];
                    out[i] = xhat[i] * g[ch] + bt[ch];
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let value = Tensor::new(self.nodes[x.0].value.shape().to_vec(), out)?;
        let op = Op::BatchNormTrain {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok((self.push(value, op, rg), mean, var))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (b, c, hw) = self.bn_checks(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Shape(format!("running statistics must have {c} entries")));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xs = self.nodes[x.0].value.data();
        let g = self.nodes[gamma.0].value.data();
        let bt = self.nodes[beta.0].value.data();
        let mut out = vec![0.0; xs.len()];
        for s in 0..b {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    out[i] = (xs[i] - mean[ch]) * inv_std[ch] * g[ch] + bt[ch];
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let value = Tensor::new(self.nodes[x.0].value.shape().to_vec(), out)?;
        let op = Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean: mean.to_vec(),
            inv_std,
        };
        Ok(self.push(value, op, rg))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.node(x)?.value.map(f);
        let rg = self.rg(&[x]);
        Ok(self.push(value, op, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    /// `+1` for `x >= 0`, else `-1`; backward uses the derivative of `tanh`.
    pub fn sign(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sign(x), |v| if v >= 0.0 { 1.0 } else { -1.0 })
    }

    /// Uniform quantizer `step * round(clip(x, -range, range) / step)` with
    /// round-half-away-from-zero. Backward passes `x` straight through inside
    /// the range; `step` and `range`, when trainable, receive their exact
    /// piecewise derivatives.
    pub fn quantize(&mut self, x: Var, step: QuantStep, range: QuantStep) -> Result<Var> {
        let d = self.quant_value(step)?;
        let a = self.quant_value(range)?;
        if !(d > 0.0 && a > 0.0 && d.is_finite() && a.is_finite()) {
            return Err(Error::NonFinite(format!("quantizer step {d} / range {a}")));
        }
        let mut inputs = vec![x];
        for q in [step, range] {
            if let QuantStep::Log { var, .. } = q {
                inputs.push(var);
            }
        }
        let value = self
            .node(x)?
            .value
            .map(|v| d * round_half_away(v.clamp(-a, a) / d));
        let rg = self.rg(&inputs);
        Ok(self.push(value, Op::Quant { x, step, range }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    /// `x * exp(s)` for a scalar `s`.
    pub fn scale_exp(&mut self, x: Var, log_scale: Var) -> Result<Var> {
        let s = &self.node(log_scale)?.value;
        if s.len() != 1 {
            return Err(Error::Shape("log scale must be scalar".into()));
        }
        let k = s.item().exp();
        let value = self.node(x)?.value.map(|v| v * k);
        let rg = self.rg(&[x, log_scale]);
        Ok(self.push(value, Op::ScaleExp { x, log_scale }, rg))
    }

    /// Mean of squared differences to a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = &self.node(pred)?.value;
        if p.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs target {:?}",
                p.shape(),
                target.shape()
            )));
        }
        if p.is_empty() {
            return Err(Error::Shape("MSE of empty tensors".into()));
        }
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / p.len() as f64;
        let rg = self.rg(&[pred]);
        let op = Op::Mse {
            pred,
            target: target.data().to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x)?.value.data().iter().map(|v| v * v).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::SumSquares(x), rg))
    }

    fn ternary_rows(&self, logits: Var) -> Result<&[f64]> {
        let t = &self.node(logits)?.value;
        if t.shape().len() != 2 || t.shape()[1] != 3 {
            return Err(Error::Shape(format!("logits must be [n, 3], got {:?}", t.shape())));
        }
        Ok(t.data())
    }

    /// Mean `alpha * (p(+1) - p(-1))` of a ternary distribution with logits
    /// `[n, 3]` over `{-alpha, 0, +alpha}`, reshaped to `shape`.
    pub fn ternary_mean(&mut self, logits: Var, alpha: f64, shape: Vec<usize>) -> Result<Var> {
        let data: Vec<f64> = self
            .ternary_rows(logits)?
            .chunks(3)
            .map(|r| {
                let p = softmax3(r);
                alpha * (p[2] - p[0])
            })
            .collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(value, Op::TernaryMean { logits, alpha }, rg))
    }

    /// Variance `alpha^2 (p(+1) + p(-1) - (p(+1) - p(-1))^2)`, reshaped to `shape`.
    pub fn ternary_var(&mut self, logits: Var, alpha: f64, shape: Vec<usize>) -> Result<Var> {
        let data: Vec<f64> = self
            .ternary_rows(logits)?
            .chunks(3)
            .map(|r| {
                let p = softmax3(r);
                let e = p[2] - p[0];
                (alpha * alpha * (p[0] + p[2] - e * e)).max(0.0)
            })
            .collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(value, Op::TernaryVar { logits, alpha }, rg))
    }

    /// `mu + sqrt(var) * eps` with caller-supplied standard normal `eps`.
    pub fn reparam(&mut self, mu: Var, var: Var, eps: Vec<f64>) -> Result<Var> {
        self.same_shape(mu, var)?;
        let (m, v) = (&self.nodes[mu.0].value, &self.nodes[var.0].value);
        if eps.len() != m.len() {
            return Err(Error::Shape(format!(
                "{} noise values for {} activations",
                eps.len(),
                m.len()
            )));
        }
        if v.data().iter().any(|&x| x < 0.0) {
            return Err(Error::NonFinite("negative activation variance".into()));
        }
        let data = m
            .data()
            .iter()
            .zip(v.data())
            .zip(&eps)
            .map(|((m, v), e)| m + v.sqrt() * e)
            .collect();
        let value = Tensor::new(m.shape().to_vec(), data)?;
        let rg = self.rg(&[mu, var]);
        Ok(self.push(value, Op::Reparam { mu, var, eps }, rg))
    }

    /// Count-weighted mean of `1 + log2(range/step + 1)` over
    /// `(log_step, log_range, count)` triples of scalar leaves.
    pub fn bit_width_avg(&mut self, terms: &[(Var, Var, f64)]) -> Result<Var> {
        let total: f64 = terms.iter().map(|t| t.2).sum();
        if !(total > 0.0) {
            return Err(Error::Config("bit-width average over zero elements".into()));
        }
        let mut acc = 0.0;
        let mut inputs = Vec::new();
        for &(s, r, n) in terms {
            let (ls, lr) = (self.node(s)?.value.item(), self.node(r)?.value.item());
            acc += n * (1.0 + ((lr - ls).exp() + 1.0).log2());
            inputs.extend([s, r]);
        }
        let rg = self.rg(&inputs);
        let op = Op::BitWidthAvg {
            terms: terms.to_vec(),
        };
        Ok(self.push(Tensor::scalar(acc / total), op, rg))
    }

    fn accumulate(&mut self, v: Var, g: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => node.grad = Some(g.to_vec()),
        }
    }

    fn accumulate_scalar(&mut self, v: Var, g: f64) {
        self.accumulate(v, &[g]);
    }

    /// Reverse pass from a scalar `loss`. Gradients from any earlier pass are
    /// cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.node(loss)?;
        if n.value.len() != 1 {
            return Err(Error::Tape("backward needs a scalar loss".into()));
        }
        if !n.requires_grad {
            return Err(Error::Tape("loss does not depend on any parameter".into()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let res = self.backward_op(&op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
            res?;
        }
        Ok(())
    }

    fn backward_op(&mut self, op: &Op, g: &[f64]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b } => {
                let need_dx = self.nodes[x.0].requires_grad;
                let dims = self.nodes[x.0].value.dims4()?;
                let c_out = self.nodes[w.0].value.shape()[0];
                let (dx, dw, db) = conv2d_backward(
                    self.nodes[x.0].value.data(),
                    dims,
                    self.nodes[w.0].value.data(),
                    c_out,
                    g,
                    need_dx,
                )?;
                if let Some(dx) = dx {
                    self.accumulate(x, &dx);
                }
                self.accumulate(w, &dw);
                if let Some(b) = b {
                    self.accumulate(b, &db);
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                ref xhat,
                ref inv_std,
            } => {
                let (b, c, h, w) = self.nodes[x.0].value.dims4()?;
                let hw = h * w;
                let n = (b * hw) as f64;
                let gm = self.nodes[gamma.0].value.data().to_vec();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..b {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for k in base..base + hw {
                            dgamma[ch] += g[k] * xhat[k];
                            dbeta[ch] += g[k];
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; g.len()];
                    for s in 0..b {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            let k1 = gm[ch] * inv_std[ch] / n;
                            for k in base..base + hw {
                                dx[k] = k1 * (n * g[k] - dbeta[ch] - xhat[k] * dgamma[ch]);
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                self.accumulate(gamma, &dgamma);
                self.accumulate(beta, &dbeta);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                ref mean,
                ref inv_std,
            } => {
                let (b, c, h, w) = self.nodes[x.0].value.dims4()?;
                let hw = h * w;
                let gm = self.nodes[gamma.0].value.data().to_vec();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; g.len()];
                let xs = self.nodes[x.0].value.data();
                for s in 0..b {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for k in base..base + hw {
                            dgamma[ch] += g[k] * (xs[k] - mean[ch]) * inv_std[ch];
                            dbeta[ch] += g[k];
                            dx[k] = g[k] * gm[ch] * inv_std[ch];
                        }
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gamma, &dgamma);
                self.accumulate(beta, &dbeta);
            }
            Op::Relu(x) => {
                let dx: Vec<f64> = self.nodes[x.0]
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Sign(x) => {
                let dx: Vec<f64> = self.nodes[x.0]
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &g)| g * (1.0 - v.tanh().powi(2)))
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Quant { x, step, range } => {
                let d = self.quant_value(step)?;
                let a = self.quant_value(range)?;
                let xs = self.nodes[x.0].value.data();
                let mut dx = vec![0.0; g.len()];
                let mut dd = 0.0;
                let mut da = 0.0;
                for k in 0..g.len() {
                    let v = xs[k];
                    if v.abs() <= a {
                        dx[k] = g[k];
                        dd += g[k] * (round_half_away(v / d) - v / d);
                    } else {
                        let c = a.copysign(v);
                        dd += g[k] * (round_half_away(c / d) - c / d);
                        da += g[k] * v.signum();
                    }
                }
                self.accumulate(x, &dx);
                if let QuantStep::Log { var, .. } = step {
                    self.accumulate_scalar(var, dd * d);
                }
                if let QuantStep::Log { var, .. } = range {
                    self.accumulate_scalar(var, da * a);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = self.nodes[b.0].value.data().iter().zip(g).map(|(v, g)| v * g).collect();
                let db: Vec<f64> = self.nodes[a.0].value.data().iter().zip(g).map(|(v, g)| v * g).collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Square(x) => {
                let dx: Vec<f64> = self.nodes[x.0].value.data().iter().zip(g).map(|(v, g)| 2.0 * v * g).collect();
                self.accumulate(x, &dx);
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = g.iter().map(|g| g * c).collect();
                self.accumulate(x, &dx);
            }
            Op::ScaleExp { x, log_scale } => {
                let k = self.nodes[log_scale.0].value.item().exp();
                let xs = self.nodes[x.0].value.data();
                let ds = xs.iter().zip(g).map(|(v, g)| v * g).sum::<f64>() * k;
                let dx: Vec<f64> = g.iter().map(|g| g * k).collect();
                self.accumulate(x, &dx);
                self.accumulate_scalar(log_scale, ds);
            }
            Op::Mse { pred, ref target } => {
                let p = self.nodes[pred.0].value.data();
                let k = 2.0 * g[0] / p.len() as f64;
                let dx: Vec<f64> = p.iter().zip(target).map(|(a, b)| k * (a - b)).collect();
                self.accumulate(pred, &dx);
            }
            Op::SumSquares(x) => {
                let dx: Vec<f64> = self.nodes[x.0].value.data().iter().map(|v| 2.0 * v * g[0]).collect();
                self.accumulate(x, &dx);
            }
            Op::TernaryMean { logits, alpha } => {
                let mut dl = vec![0.0; g.len() * 3];
                for (r, row) in self.nodes[logits.0].value.data().chunks(3).enumerate() {
                    let p = softmax3(row);
                    let e = p[2] - p[0];
                    for j in 0..3 {
                        dl[3 * r + j] = g[r] * alpha * p[j] * (TERNARY_LEVELS[j] - e);
                    }
                }
                self.accumulate(logits, &dl);
            }
            Op::TernaryVar { logits, alpha } => {
                let mut dl = vec![0.0; g.len() * 3];
                let a2 = alpha * alpha;
                for (r, row) in self.nodes[logits.0].value.data().chunks(3).enumerate() {
                    let p = softmax3(row);
                    let e = p[2] - p[0];
                    let m2 = p[0] + p[2];
                    for j in 0..3 {
                        let c = TERNARY_LEVELS[j];
                        let dm2 = p[j] * (c * c - m2);
                        let de = p[j] * (c - e);
                        dl[3 * r + j] = g[r] * a2 * (dm2 - 2.0 * e * de);
                    }
                }
                self.accumulate(logits, &dl);
            }
            Op::Reparam { mu, var, ref eps } => {
                self.accumulate(mu, g);
                let dv: Vec<f64> = self.nodes[var.0]
                    .value
                    .data()
                    .iter()
                    .zip(eps)
                    .zip(g)
                    .map(|((&v, &e), &g)| if v > 0.0 { g * e / (2.0 * v.sqrt()) } else { 0.0 })
                    .collect();
                self.accumulate(var, &dv);
            }
            Op::BitWidthAvg { ref terms } => {
                let total: f64 = terms.iter().map(|t| t.2).sum();
                for &(s, r, n) in terms {
                    let ratio = (self.nodes[r.0].value.item() - self.nodes[s.0].value.item()).exp();
                    let dk = ratio / ((ratio + 1.0) * std::f64::consts::LN_2);
                    let w = g[0] * n / total;
                    self.accumulate_scalar(r, w * dk);
                    self.accumulate_scalar(s, -w * dk);
                }
            }
        }
        Ok(())
    }
}
