use crate::kernels::{self, ConvGeom, ConvSpec};
use crate::norm::{self, BatchStats, NormError};
use crate::tensor::{Precision, Tensor, TensorError};

use super::GradError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate adjoint corruption, used as a negative control for gradient checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjointFault {
    /// Multiplier applied to the sigmoid/tanh/relu adjoints.
    pub scale: f64,
}

impl Default for AdjointFault {
    fn default() -> Self {
        AdjointFault { scale: 1.05 }
    }
}

/// How a batch-norm node obtains its statistics.
#[derive(Debug, Clone, Copy)]
pub enum BnSource<'a> {
    /// Statistics of the current batch over samples with `valid[b] == true`.
    Batch { valid: &'a [bool] },
    /// Fixed (running) statistics.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    /// `gate ⊙ a + (1 − gate) ⊙ b`
    Lerp { gate: Var, a: Var, b: Var },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        batch: usize,
    },
    MaxPool { input: Var, argmax: Vec<usize> },
    GlobalAvgPool { input: Var, plane: usize },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        batch: usize,
        n: usize,
        m: usize,
    },
    /// Per-sample selection along the leading (batch) axis.
    Select { mask: Vec<bool>, on: Var, off: Var },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Option<Var>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        geom: (usize, usize, usize),
        batch_stats: Option<(Vec<bool>, usize)>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Option<Var>,
        xhat: Vec<f64>,
        inv: Vec<f64>,
        geom: (usize, usize, usize),
    },
    SoftmaxNll {
        logits: Var,
        /// Per-sample `weight * (p - onehot)`, precomputed.
        dlogits: Vec<f64>,
    },
    Sum(Var),
    Dot { x: Var, coeffs: Vec<f64> },
    Mean(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so reverse index order is a reverse
/// topological order and each node is visited once during [`Tape::backward`].
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    precision: Precision,
    fault: Option<AdjointFault>,
}

/// Probability floor used by the negative log-likelihood.
pub const PROB_FLOOR: f64 = 1e-12;

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            precision,
            fault: None,
        }
    }

    pub fn with_fault(mut self, fault: AdjointFault) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn make(&self, shape: Vec<usize>, data: Vec<f64>, op: &'static str) -> Result<Tensor, TensorError> {
        Tensor::from_parts(shape, data, self.precision, op)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let value = value.to_precision(self.precision);
        self.push(value, Op::Leaf, &[])
    }

    /// A named leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.constant(value);
        self.nodes[v.0].requires_grad = true;
        self.params.push((name.into(), v));
        v
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: ta.shape().to_vec(),
                actual: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        self.make(ta.shape().to_vec(), data, op)
    }

    fn unary(&mut self, op: &'static str, a: Var, f: impl Fn(f64) -> f64) -> Result<Tensor, TensorError> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        self.make(ta.shape().to_vec(), data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, GradError> {
        let t = self.unary("scale", a, |x| x * k)?;
        Ok(self.push(t, Op::Scale(a, k), &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, GradError> {
        let t = self.unary("sigmoid", a, crate::tensor::sigmoid)?;
        Ok(self.push(t, Op::Sigmoid(a), &[a]))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, GradError> {
        let t = self.unary("tanh", a, f64::tanh)?;
        Ok(self.push(t, Op::Tanh(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, GradError> {
        let t = self.unary("relu", a, crate::tensor::relu)?;
        Ok(self.push(t, Op::Relu(a), &[a]))
    }

    /// `gate ⊙ a + (1 − gate) ⊙ b`, evaluated literally in that form.
    pub fn lerp(&mut self, gate: Var, a: Var, b: Var) -> Result<Var, GradError> {
        let (tg, ta, tb) = (self.value(gate), self.value(a), self.value(b));
        for other in [ta, tb] {
            if other.shape() != tg.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "lerp",
                    expected: tg.shape().to_vec(),
                    actual: other.shape().to_vec(),
                }
                .into());
            }
        }
        let data = tg
            .data()
            .iter()
            .zip(ta.data())
            .zip(tb.data())
            .map(|((&g, &x), &y)| g * x + (1.0 - g) * y)
            .collect();
        let t = self.make(tg.shape().to_vec(), data, "lerp")?;
        Ok(self.push(t, Op::Lerp { gate, a, b }, &[gate, a, b]))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var, GradError> {
        let ti = self.value(input);
        let (batch, geom) = kernels::conv_geometry(
            spec,
            ti.shape(),
            self.value(weight).shape(),
            bias.map(|b| self.value(b).shape()),
        )?;
        let mut out = vec![0.0; batch * geom.out_len()];
        kernels::conv2d_forward_batch(
            ti.data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
            batch,
            &mut out,
        );
        let shape = kernels::with_batch(ti.rank() == 4, batch, &geom.out_shape());
        let t = self.make(shape, out, "conv2d")?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                batch,
            },
            &inputs,
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, window: (usize, usize), stride: (usize, usize)) -> Result<Var, GradError> {
        let (t, argmax) = self.value(input).maxpool2d(window, stride)?;
        Ok(self.push(t, Op::MaxPool { input, argmax }, &[input]))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var, GradError> {
        let ti = self.value(input);
        let plane = ti.shape().iter().skip(ti.rank() - 2).product();
        let t = ti.global_avg_pool()?;
        Ok(self.push(t, Op::GlobalAvgPool { input, plane }, &[input]))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var, GradError> {
        let ti = self.value(input);
        let (batch, n, m) = kernels::dense_geometry(
            ti.shape(),
            self.value(weight).shape(),
            bias.map(|b| self.value(b).shape()),
        )?;
        let mut out = vec![0.0; batch * m];
        kernels::dense_forward(
            ti.data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            batch,
            n,
            m,
            &mut out,
        );
        let shape = if ti.rank() == 2 { vec![batch, m] } else { vec![m] };
        let t = self.make(shape, out, "dense")?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            t,
            Op::Dense {
                input,
                weight,
                bias,
                batch,
                n,
                m,
            },
            &inputs,
        ))
    }

    /// Per sample `b`: `on[b]` where `mask[b]`, else `off[b]`. Values are copied, not blended.
    pub fn select(&mut self, mask: &[bool], on: Var, off: Var) -> Result<Var, GradError> {
        let (ton, toff) = (self.value(on), self.value(off));
        if ton.shape() != toff.shape() || ton.shape().first() != Some(&mask.len()) {
            return Err(TensorError::ShapeMismatch {
                op: "select",
                expected: ton.shape().to_vec(),
                actual: toff.shape().to_vec(),
            }
            .into());
        }
        let per = ton.len() / mask.len();
        let mut data = toff.data().to_vec();
        for (b, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            data[b * per..(b + 1) * per].copy_from_slice(&ton.data()[b * per..(b + 1) * per]);
        }
        let t = self.make(ton.shape().to_vec(), data, "select")?;
        Ok(self.push(
            t,
            Op::Select {
                mask: mask.to_vec(),
                on,
                off,
            },
            &[on, off],
        ))
    }

    /// Batch normalization of `x` (`[B, F]` or `[B, C, H, W]`) followed by `gamma ⊙ x̂ (+ beta)`.
    /// Returns the batch statistics when they were computed.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Option<Var>,
        source: BnSource<'_>,
    ) -> Result<(Var, Option<BatchStats>), GradError> {
        let tx = self.value(x);
        let geom = norm::layout(tx.shape())?;
        self.check_affine(gamma, beta, geom.1)?;
        let (mean, var, stats) = match source {
            BnSource::Batch { valid } => {
                let st = norm::bn_batch_stats(tx.data(), geom, valid)?;
                (st.mean.clone(), st.var.clone(), Some(st))
            }
            BnSource::Fixed { mean, var } => {
                if mean.len() != geom.1 || var.len() != geom.1 {
                    return Err(NormError::AffineMismatch {
                        affine: mean.len(),
                        features: geom.1,
                    }
                    .into());
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let (out, xhat, inv_std) = norm::bn_apply(
            tx.data(),
            geom,
            &mean,
            &var,
            self.value(gamma).data(),
            beta.map(|b| self.value(b).data()),
        );
        let t = self.make(tx.shape().to_vec(), out, "batch_norm")?;
        let batch_stats = match (&source, &stats) {
            (BnSource::Batch { valid }, Some(st)) => Some((valid.to_vec(), st.count)),
            _ => None,
        };
        let mut inputs = vec![x, gamma];
        inputs.extend(beta);
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                geom,
                batch_stats,
            },
            &inputs,
        );
        Ok((v, stats))
    }

    /// Per-sample layer normalization followed by a per-feature affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Option<Var>) -> Result<Var, GradError> {
        let tx = self.value(x);
        let geom = norm::layout(tx.shape())?;
        self.check_affine(gamma, beta, geom.1)?;
        let (out, xhat, inv) = norm::ln_apply(
            tx.data(),
            geom,
            self.value(gamma).data(),
            beta.map(|b| self.value(b).data()),
        )?;
        let t = self.make(tx.shape().to_vec(), out, "layer_norm")?;
        let mut inputs = vec![x, gamma];
        inputs.extend(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv,
                geom,
            },
            &inputs,
        ))
    }

    fn check_affine(&self, gamma: Var, beta: Option<Var>, features: usize) -> Result<(), NormError> {
        let g = self.value(gamma).len();
        let b_ok = beta.is_none_or(|b| self.value(b).len() == features);
        if g != features || !b_ok {
            return Err(NormError::AffineMismatch { affine: g, features });
        }
        Ok(())
    }

    /// `Σ_b weight_b · −ln max(softmax(logits_b)[label_b], 1e−12)` as a `[1]` scalar.
    pub fn softmax_nll(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var, GradError> {
        let tl = self.value(logits);
        let (b, c) = match *tl.shape() {
            [b, c] => (b, c),
            [c] => (1, c),
            _ => {
                return Err(TensorError::Invalid {
                    op: "softmax_nll",
                    msg: format!("expected [B, C] logits, got {:?}", tl.shape()),
                }
                .into())
            }
        };
        if labels.len() != b || weights.len() != b || labels.iter().any(|&l| l >= c) {
            return Err(TensorError::Invalid {
                op: "softmax_nll",
                msg: format!("{} labels / {} weights for a batch of {b} with {c} classes", labels.len(), weights.len()),
            }
            .into());
        }
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; b * c];
        for i in 0..b {
            let p = softmax(&tl.data()[i * c..(i + 1) * c]);
            let py = p[labels[i]];
            loss += weights[i] * -py.max(PROB_FLOOR).ln();
            if py >= PROB_FLOOR {
                for j in 0..c {
                    let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                    dlogits[i * c + j] = weights[i] * (p[j] - onehot);
                }
            }
        }
        let t = self.make(vec![1], vec![loss], "softmax_nll")?;
        Ok(self.push(t, Op::SoftmaxNll { logits, dlogits }, &[logits]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, GradError> {
        let s = self.value(a).sum();
        let t = self.make(vec![1], vec![s], "sum")?;
        Ok(self.push(t, Op::Sum(a), &[a]))
    }

    /// `Σ_i coeffs_i · x_i` as a `[1]` scalar.
    pub fn dot(&mut self, x: Var, coeffs: &[f64]) -> Result<Var, GradError> {
        let tx = self.value(x);
        if tx.len() != coeffs.len() {
            return Err(TensorError::LengthMismatch {
                shape: tx.shape().to_vec(),
                expected: tx.len(),
                actual: coeffs.len(),
            }
            .into());
        }
        let s = tx.data().iter().zip(coeffs).map(|(a, b)| a * b).sum();
        let t = self.make(vec![1], vec![s], "dot")?;
        Ok(self.push(t, Op::Dot { x, coeffs: coeffs.to_vec() }, &[x]))
    }

    /// Elementwise mean of same-shaped values, summed in the given order.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var, GradError> {
        let first = xs.first().ok_or_else(|| TensorError::Invalid {
            op: "mean",
            msg: "no inputs".into(),
        })?;
        let shape = self.value(*first).shape().to_vec();
        let mut acc = vec![0.0; self.value(*first).len()];
        for &x in xs {
            let tx = self.value(x);
            if tx.shape() != shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "mean",
                    expected: shape,
                    actual: tx.shape().to_vec(),
                }
                .into());
            }
            for (a, v) in acc.iter_mut().zip(tx.data()) {
                *a += v;
            }
        }
        let k = xs.len() as f64;
        for a in &mut acc {
            *a /= k;
        }
        let t = self.make(shape, acc, "mean")?;
        Ok(self.push(t, Op::Mean(xs.to_vec()), xs))
    }

    /// Reverse sweep from `output`, seeded with `seed` (same shape as the output).
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients, GradError> {
        let out_shape = self.value(output).shape();
        if seed.shape() != out_shape {
            return Err(GradError::SeedShape {
                expected: out_shape.to_vec(),
                actual: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.data().to_vec());
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];

        for i in (0..=output.0).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.precision.round_slice(&mut g);
            if !g.iter().all(|v| v.is_finite()) {
                return Err(GradError::NonFiniteGradient(i));
            }
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g, self.precision, "backward")?);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: impl FnOnce(&mut [f64])) {
        if !self.wants(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        contrib(buf);
    }

    fn fault_scale(&self) -> f64 {
        self.fault.map_or(1.0, |f| f.scale)
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| {
                    for (d, gv) in d.iter_mut().zip(g) {
                        *d -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.accumulate(grads, *a, |d| {
                    for ((d, gv), y) in d.iter_mut().zip(g).zip(vb) {
                        *d += gv * y;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, gv), x) in d.iter_mut().zip(g).zip(va) {
                        *d += gv * x;
                    }
                });
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, |d| {
                for (d, gv) in d.iter_mut().zip(g) {
                    *d += gv * k;
                }
            }),
            Op::Sigmoid(a) => {
                let f = self.fault_scale();
                self.accumulate(grads, *a, |d| {
                    for ((d, gv), s) in d.iter_mut().zip(g).zip(out.data()) {
                        *d += gv * s * (1.0 - s) * f;
                    }
                })
            }
            Op::Tanh(a) => {
                let f = self.fault_scale();
                self.accumulate(grads, *a, |d| {
                    for ((d, gv), t) in d.iter_mut().zip(g).zip(out.data()) {
                        *d += gv * (1.0 - t * t) * f;
                    }
                })
            }
            Op::Relu(a) => {
                let f = self.fault_scale();
                let va = val(*a);
                self.accumulate(grads, *a, |d| {
                    for ((d, gv), x) in d.iter_mut().zip(g).zip(va) {
                        if *x > 0.0 {
                            *d += gv * f;
                        }
                    }
                })
            }
            Op::Lerp { gate, a, b } => {
                let (vg, va, vb) = (val(*gate), val(*a), val(*b));
                self.accumulate(grads, *gate, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (va[i] - vb[i]);
                    }
                });
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * vg[i];
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (1.0 - vg[i]);
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                batch,
            } => {
                let (vi, vw) = (val(*input), val(*weight));
                let mut gin = self.wants(*input).then(|| vec![0.0; vi.len()]);
                let mut gw = self.wants(*weight).then(|| vec![0.0; vw.len()]);
                let mut gb = bias.filter(|b| self.wants(*b)).map(|_| vec![0.0; geom.c_out]);
                kernels::conv2d_backward_batch(
                    vi,
                    vw,
                    g,
                    geom,
                    *batch,
                    gin.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(c) = gin {
                    self.accumulate(grads, *input, |d| add_into(d, &c));
                }
                if let Some(c) = gw {
                    self.accumulate(grads, *weight, |d| add_into(d, &c));
                }
                if let (Some(b), Some(c)) = (bias, gb) {
                    self.accumulate(grads, *b, |d| add_into(d, &c));
                }
            }
            Op::MaxPool { input, argmax } => self.accumulate(grads, *input, |d| {
                for (gv, &idx) in g.iter().zip(argmax) {
                    d[idx] += gv;
                }
            }),
            Op::GlobalAvgPool { input, plane } => self.accumulate(grads, *input, |d| {
                let k = *plane as f64;
                for (m, gv) in g.iter().enumerate() {
                    for v in &mut d[m * plane..(m + 1) * plane] {
                        *v += gv / k;
                    }
                }
            }),
            Op::Dense {
                input,
                weight,
                bias,
                batch,
                n,
                m,
            } => {
                let (vi, vw) = (val(*input), val(*weight));
                let (b_, n_, m_) = (*batch, *n, *m);
                self.accumulate(grads, *input, |d| {
                    for b in 0..b_ {
                        for i in 0..n_ {
                            let row = &vw[i * m_..(i + 1) * m_];
                            let acc: f64 = row.iter().zip(&g[b * m_..(b + 1) * m_]).map(|(w, gv)| w * gv).sum();
                            d[b * n_ + i] += acc;
                        }
                    }
                });
                self.accumulate(grads, *weight, |d| {
                    for b in 0..b_ {
                        for i in 0..n_ {
                            let x = vi[b * n_ + i];
                            for (dv, gv) in d[i * m_..(i + 1) * m_].iter_mut().zip(&g[b * m_..(b + 1) * m_]) {
                                *dv += x * gv;
                            }
                        }
                    }
                });
                if let Some(bias) = bias {
                    self.accumulate(grads, *bias, |d| {
                        for b in 0..b_ {
                            add_into(d, &g[b * m_..(b + 1) * m_]);
                        }
                    });
                }
            }
            Op::Select { mask, on, off } => {
                let per = g.len() / mask.len();
                self.accumulate(grads, *on, |d| {
                    for (b, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
                        add_into(&mut d[b * per..(b + 1) * per], &g[b * per..(b + 1) * per]);
                    }
                });
                self.accumulate(grads, *off, |d| {
                    for (b, _) in mask.iter().enumerate().filter(|(_, m)| !**m) {
                        add_into(&mut d[b * per..(b + 1) * per], &g[b * per..(b + 1) * per]);
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                geom,
                batch_stats,
            } => {
                let mut dx = self.wants(*x).then(|| vec![0.0; xhat.len()]);
                let mut dg = self.wants(*gamma).then(|| vec![0.0; geom.1]);
                let mut db = beta.filter(|b| self.wants(*b)).map(|_| vec![0.0; geom.1]);
                norm::bn_backward(
                    g,
                    xhat,
                    inv_std,
                    val(*gamma),
                    *geom,
                    batch_stats.as_ref().map(|(v, m)| (v.as_slice(), *m)),
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(c) = dx {
                    self.accumulate(grads, *x, |d| add_into(d, &c));
                }
                if let Some(c) = dg {
                    self.accumulate(grads, *gamma, |d| add_into(d, &c));
                }
                if let (Some(b), Some(c)) = (beta, db) {
                    self.accumulate(grads, *b, |d| add_into(d, &c));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv,
                geom,
            } => {
                let mut dx = self.wants(*x).then(|| vec![0.0; xhat.len()]);
                let mut dg = self.wants(*gamma).then(|| vec![0.0; geom.1]);
                let mut db = beta.filter(|b| self.wants(*b)).map(|_| vec![0.0; geom.1]);
                norm::ln_backward(
                    g,
                    xhat,
                    inv,
                    val(*gamma),
                    *geom,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(c) = dx {
                    self.accumulate(grads, *x, |d| add_into(d, &c));
                }
                if let Some(c) = dg {
                    self.accumulate(grads, *gamma, |d| add_into(d, &c));
                }
                if let (Some(b), Some(c)) = (beta, db) {
                    self.accumulate(grads, *b, |d| add_into(d, &c));
                }
            }
            Op::SoftmaxNll { logits, dlogits } => self.accumulate(grads, *logits, |d| {
                for (dv, c) in d.iter_mut().zip(dlogits) {
                    *dv += g[0] * c;
                }
            }),
            Op::Sum(a) => self.accumulate(grads, *a, |d| {
                for v in d.iter_mut() {
                    *v += g[0];
                }
            }),
            Op::Dot { x, coeffs } => self.accumulate(grads, *x, |d| {
                for (dv, c) in d.iter_mut().zip(coeffs) {
                    *dv += g[0] * c;
                }
            }),
            Op::Mean(xs) => {
                let k = xs.len() as f64;
                for &x in xs {
                    self.accumulate(grads, x, |d| {
                        for (dv, gv) in d.iter_mut().zip(g) {
                            *dv += gv / k;
                        }
                    });
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zero-filled when the output does not depend on it.
    pub fn get_or_zero(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec(), tape.precision()))
    }

    /// Named parameter gradients in registration order.
    pub fn params(&self, tape: &Tape) -> Vec<(String, Tensor)> {
        tape.params()
            .iter()
            .map(|(name, v)| (name.clone(), self.get_or_zero(tape, *v)))
            .collect()
    }
}
