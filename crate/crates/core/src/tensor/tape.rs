use super::conv::{self, Conv2dSpec, Geometry};
use super::ops::{self, sigmoid_value as sigmoid, sign, Activation, PoolKind, BN_EPS, BN_MOMENTUM};
use super::{dims4, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch statistics observed by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variance, the quantity tracked by the running average.
    pub var: Vec<f64>,
}

impl BnStats {
    /// `running = (1 - momentum) * running + momentum * batch`, momentum 0.1.
    pub fn update_running(&self, running_mean: &mut [f64], running_var: &mut [f64]) {
        for (r, b) in running_mean.iter_mut().zip(&self.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in running_var.iter_mut().zip(&self.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: Geometry,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Act {
        input: Var,
        kind: Activation,
    },
    GlobalPool {
        input: Var,
        argmax: Option<Vec<usize>>,
    },
    WindowPool {
        input: Var,
        k: usize,
        argmax: Option<Vec<usize>>,
    },
    Upsample {
        input: Var,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SpatialGradient {
        input: Var,
        gx: Vec<f64>,
        gy: Vec<f64>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Max(Var, Var),
    Expand {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape {
        input: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    AddScalar {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    L1(Var, Var),
    Mse(Var, Var),
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BceLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only computation graph with reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that is treated as data.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; `None` before any backward or for constants.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::from_parts(self.shape(v).to_vec(), g.to_vec()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite output from {} (shape {:?})",
                op_name(&op),
                value.shape()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ---- layers -------------------------------------------------------------

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let geom = Geometry::new(
            self.shape(input),
            self.shape(kernel),
            bias.map(|b| self.shape(b)),
            spec,
        )?;
        let out = conv::forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(
            Tensor::from_parts(geom.out_shape(), out),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &inputs,
        )
    }

    /// `input [B, Din] x weight[Dout, Din]^T + bias[Dout]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (b, din) = match *self.shape(input) {
            [b, d] => (b, d),
            ref s => return Err(Error::dim(format!("linear input must be 2-D, got {s:?}"))),
        };
        let dout = match *self.shape(weight) {
            [o, i] if i == din => o,
            ref s => {
                return Err(Error::dim(format!(
                    "linear weight {s:?} does not accept {din} inputs"
                )))
            }
        };
        if let Some(bv) = bias {
            if self.shape(bv) != [dout] {
                return Err(Error::dim(format!(
                    "linear bias {:?} does not match {dout} outputs",
                    self.shape(bv)
                )));
            }
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let bb = bias.map(|v| self.value(v).data());
        let mut out = vec![0.0; b * dout];
        for r in 0..b {
            let xr = &x[r * din..(r + 1) * din];
            for o in 0..dout {
                let mut acc = bb.map_or(0.0, |bb| bb[o]);
                for (xi, wi) in xr.iter().zip(&w[o * din..(o + 1) * din]) {
                    acc += xi * wi;
                }
                out[r * dout + o] = acc;
            }
        }
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            Tensor::from_parts(vec![b, dout], out),
            Op::Linear {
                input,
                weight,
                bias,
            },
            &inputs,
        )
    }

    pub fn activation(&mut self, kind: Activation, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data: Vec<f64> = match kind {
            Activation::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
            Activation::LeakyRelu(s) => x
                .data()
                .iter()
                .map(|&v| if v >= 0.0 { v } else { s * v })
                .collect(),
            Activation::Sigmoid => x.data().iter().map(|&v| sigmoid(v)).collect(),
        };
        let shape = x.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Act { input, kind }, &[input])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Relu, x)
    }

    pub fn lrelu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.activation(Activation::LeakyRelu(slope), x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn pool(&mut self, kind: PoolKind, input: Var) -> Result<Var> {
        let (b, c, h, w) = dims4(self.shape(input))?;
        let x = self.value(input).data();
        match kind {
            PoolKind::GlobalAvg | PoolKind::GlobalMax => {
                let plane = h * w;
                if plane == 0 {
                    return Err(Error::dim("global pool over an empty plane"));
                }
                let mut out = Vec::with_capacity(b * c);
                let mut argmax = Vec::new();
                for p in x.chunks(plane) {
                    if kind == PoolKind::GlobalAvg {
                        out.push(p.iter().sum::<f64>() / plane as f64);
                    } else {
                        let (i, v) = first_argmax(p.iter().copied());
                        argmax.push(i);
                        out.push(v);
                    }
                }
                let argmax = (kind == PoolKind::GlobalMax).then_some(argmax);
                self.push(
                    Tensor::from_parts(vec![b, c, 1, 1], out),
                    Op::GlobalPool { input, argmax },
                    &[input],
                )
            }
            PoolKind::Avg2d(k) | PoolKind::Max2d(k) => {
                if k == 0 || k > h || k > w {
                    return Err(Error::dim(format!(
                        "pool window {k} does not fit {h}x{w} input"
                    )));
                }
                let (ho, wo) = (h / k, w / k);
                let is_max = matches!(kind, PoolKind::Max2d(_));
                let mut out = Vec::with_capacity(b * c * ho * wo);
                let mut argmax = Vec::new();
                for (pi, p) in x.chunks(h * w).enumerate() {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let cells = (0..k * k).map(|t| (oy * k + t / k) * w + ox * k + t % k);
                            if is_max {
                                let (t, v) = first_argmax(cells.clone().map(|i| p[i]));
                                let i = cells.clone().nth(t).unwrap_or(0);
                                argmax.push(pi * h * w + i);
                                out.push(v);
                            } else {
                                out.push(cells.map(|i| p[i]).sum::<f64>() / (k * k) as f64);
                            }
                        }
                    }
                }
                let argmax = is_max.then_some(argmax);
                self.push(
                    Tensor::from_parts(vec![b, c, ho, wo], out),
                    Op::WindowPool { input, k, argmax },
                    &[input],
                )
            }
        }
    }

    /// Nearest-neighbour resize of the two spatial axes to `out_h x out_w`.
    pub fn upsample_nearest(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (b, c, h, w) = dims4(self.shape(input))?;
        if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
            return Err(Error::dim("upsample of an empty plane"));
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * c * out_h * out_w);
        for p in x.chunks(h * w) {
            for oy in 0..out_h {
                let sy = oy * h / out_h;
                for ox in 0..out_w {
                    out.push(p[sy * w + ox * w / out_w]);
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![b, c, out_h, out_w], out),
            Op::Upsample { input },
            &[input],
        )
    }

    /// Train-mode batch norm over `[B, C, H, W]`; returns the batch statistics
    /// for the caller's running-average update.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var) -> Result<(Var, BnStats)> {
        let (b, c, h, w) = dims4(self.shape(input))?;
        self.check_affine(gamma, beta, c)?;
        let n = b * h * w;
        if n < 2 {
            return Err(Error::DegenerateBatch(format!(
                "batch norm needs at least 2 values per channel, got {n}"
            )));
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                s += x[(bi * c + ch) * plane..][..plane].iter().sum::<f64>();
            }
            let m = s / n as f64;
            let mut ss = 0.0;
            for bi in 0..b {
                for &v in &x[(bi * c + ch) * plane..][..plane] {
                    ss += (v - m) * (v - m);
                }
            }
            mean[ch] = m;
            var[ch] = ss / n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for (i, (&v, (xh, o))) in x.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (i / plane) % c;
            *xh = (v - mean[ch]) * inv_std[ch];
            *o = g[ch] * *xh + be[ch];
        }
        let stats = BnStats {
            mean,
            var: var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect(),
        };
        let out = self.push(
            Tensor::from_parts(vec![b, c, h, w], out),
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[input, gamma, beta],
        )?;
        Ok((out, stats))
    }

    /// Eval-mode batch norm with the supplied running statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        let (b, c, h, w) = dims4(self.shape(input))?;
        self.check_affine(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("running statistics do not match channel count"));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let plane = h * w;
        let out: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / plane) % c;
                g[ch] * ((v - running_mean[ch]) * inv_std[ch]) + be[ch]
            })
            .collect();
        self.push(
            Tensor::from_parts(vec![b, c, h, w], out),
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            &[input, gamma, beta],
        )
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(format!(
                "batch norm affine params {:?}/{:?} do not match {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok(())
    }

    /// Sobel gradient magnitude `|Gx| + |Gy|` per channel, reflect padded.
    pub fn spatial_gradient(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = dims4(self.shape(input))?;
        if h < 3 || w < 3 {
            return Err(Error::dim(format!(
                "spatial gradient needs at least 3x3, got {h}x{w}"
            )));
        }
        let x = self.value(input).data();
        let n = x.len();
        let (mut gx, mut gy) = (vec![0.0; n], vec![0.0; n]);
        let plane = h * w;
        for p in 0..b * c {
            let r = p * plane..(p + 1) * plane;
            let (sx, sy) = (&mut gx[r.clone()], &mut gy[r.clone()]);
            ops::sobel_plane(&x[r], h, w, sx, sy);
        }
        let out: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.abs() + b.abs()).collect();
        self.push(
            Tensor::from_parts(vec![b, c, h, w], out),
            Op::SpatialGradient { input, gx, gy },
            &[input],
        )
    }

    // ---- elementwise and structural ----------------------------------------

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, data), op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise maximum; ties go to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "max", |x, y| if x >= y { x } else { y }, Op::Max(a, b))
    }

    /// Broadcast size-1 axes up to `shape` (same rank required).
    pub fn expand(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(input).to_vec();
        if src.len() != shape.len()
            || src.iter().zip(shape).any(|(&s, &t)| s != t && s != 1)
        {
            return Err(Error::dim(format!("cannot expand {src:?} to {shape:?}")));
        }
        let x = self.value(input).data();
        let numel: usize = shape.iter().product();
        let map = BroadcastMap::new(&src, shape);
        let data = (0..numel).map(|i| x[map.source(i)]).collect();
        self.push(Tensor::from_parts(shape.to_vec(), data), Op::Expand { input }, &[input])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(d, &e)| d != axis && e != base[d])
            {
                return Err(Error::dim(format!(
                    "concat: {s:?} incompatible with {base:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                data.extend_from_slice(&self.value(*v).data()[o * len..(o + 1) * len]);
            }
        }
        self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(input).clone().reshaped(shape)?;
        self.push(t, Op::Reshape { input }, &[input])
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let x = self.value(input);
        let t = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v * factor).collect());
        self.push(t, Op::Scale { input, factor }, &[input])
    }

    pub fn add_scalar(&mut self, input: Var, c: f64) -> Result<Var> {
        let x = self.value(input);
        let t = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v + c).collect());
        self.push(t, Op::AddScalar { input }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { input }, &[input])
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input).data();
        let s = x.iter().sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean { input }, &[input])
    }

    // ---- losses -------------------------------------------------------------

    /// Mean absolute difference over all elements. For `[B, 1, H, W]` images this
    /// is the per-image `(1/HW) * ||a - b||_1` averaged over the batch.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "l1")?;
        let n = self.value(a).numel() as f64;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / n;
        self.push(Tensor::scalar(s), Op::L1(a, b), &[a, b])
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = self.value(a).numel() as f64;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        self.push(Tensor::scalar(s), Op::Mse(a, b), &[a, b])
    }

    /// Mean pixelwise softmax cross-entropy of `[B, K, H, W]` logits against
    /// `B*H*W` class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, k, h, w) = dims4(self.shape(logits))?;
        let plane = h * w;
        if targets.len() != b * plane {
            return Err(Error::dim(format!(
                "{} targets for {b}x{h}x{w} logits",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Input(format!("class index {t} >= {k} classes")));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; x.len()];
        let mut loss = 0.0;
        for bi in 0..b {
            for p in 0..plane {
                let idx = |c: usize| (bi * k + c) * plane + p;
                let m = (0..k).map(|c| x[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..k).map(|c| (x[idx(c)] - m).exp()).sum();
                for c in 0..k {
                    probs[idx(c)] = (x[idx(c)] - m).exp() / z;
                }
                let t = targets[bi * plane + p];
                loss += z.ln() - (x[idx(t)] - m);
            }
        }
        loss /= (b * plane) as f64;
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Mean binary cross-entropy of logits against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::dim(format!(
                "bce: logits {:?} vs targets {:?}",
                self.shape(logits),
                targets.shape()
            )));
        }
        let x = self.value(logits).data();
        let n = x.len() as f64;
        let loss = x
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            &[logits],
        )
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse pass from a one-element loss. Leaf gradients accumulate into any
    /// gradient left by an earlier backward call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.backward_node(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(a) => a.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                if rg(*input) {
                    acc(*input, conv::backward_input(geom, val(*kernel), g));
                }
                if rg(*kernel) {
                    acc(*kernel, conv::backward_kernel(geom, val(*input), g));
                }
                if let Some(b) = bias {
                    if rg(*b) {
                        acc(*b, conv::backward_bias(geom, g));
                    }
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = val(*input);
                let w = val(*weight);
                let (b, din) = (self.shape(*input)[0], self.shape(*input)[1]);
                let dout = self.shape(*weight)[0];
                if rg(*input) {
                    let mut gx = vec![0.0; b * din];
                    for r in 0..b {
                        for o in 0..dout {
                            let go = g[r * dout + o];
                            for (gxi, wi) in gx[r * din..(r + 1) * din]
                                .iter_mut()
                                .zip(&w[o * din..(o + 1) * din])
                            {
                                *gxi += go * wi;
                            }
                        }
                    }
                    acc(*input, gx);
                }
                if rg(*weight) {
                    let mut gw = vec![0.0; dout * din];
                    for r in 0..b {
                        for o in 0..dout {
                            let go = g[r * dout + o];
                            for (gwi, xi) in gw[o * din..(o + 1) * din]
                                .iter_mut()
                                .zip(&x[r * din..(r + 1) * din])
                            {
                                *gwi += go * xi;
                            }
                        }
                    }
                    acc(*weight, gw);
                }
                if let Some(bv) = bias {
                    if rg(*bv) {
                        let mut gb = vec![0.0; dout];
                        for r in 0..b {
                            for o in 0..dout {
                                gb[o] += g[r * dout + o];
                            }
                        }
                        acc(*bv, gb);
                    }
                }
            }
            Op::Act { input, kind } => {
                let x = val(*input);
                let gx = match kind {
                    Activation::Relu => x
                        .iter()
                        .zip(g)
                        .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
                        .collect(),
                    Activation::LeakyRelu(s) => x
                        .iter()
                        .zip(g)
                        .map(|(&v, &gi)| if v >= 0.0 { gi } else { s * gi })
                        .collect(),
                    Activation::Sigmoid => node
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&y, &gi)| gi * y * (1.0 - y))
                        .collect(),
                };
                acc(*input, gx);
            }
            Op::GlobalPool { input, argmax } => {
                let (_, _, h, w) = dims4(self.shape(*input))?;
                let plane = h * w;
                let mut gx = vec![0.0; val(*input).len()];
                for (p, &gi) in g.iter().enumerate() {
                    match argmax {
                        Some(am) => gx[p * plane + am[p]] += gi,
                        None => gx[p * plane..(p + 1) * plane]
                            .iter_mut()
                            .for_each(|v| *v += gi / plane as f64),
                    }
                }
                acc(*input, gx);
            }
            Op::WindowPool { input, k, argmax } => {
                let (b, c, h, w) = dims4(self.shape(*input))?;
                let (ho, wo) = (h / k, w / k);
                let mut gx = vec![0.0; val(*input).len()];
                match argmax {
                    Some(am) => {
                        for (&src, &gi) in am.iter().zip(g) {
                            gx[src] += gi;
                        }
                    }
                    None => {
                        let share = 1.0 / (k * k) as f64;
                        for p in 0..b * c {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let gi = g[(p * ho + oy) * wo + ox] * share;
                                    for t in 0..k * k {
                                        gx[p * h * w + (oy * k + t / k) * w + ox * k + t % k] += gi;
                                    }
                                }
                            }
                        }
                    }
                }
                acc(*input, gx);
            }
            Op::Upsample { input } => {
                let (_, _, h, w) = dims4(self.shape(*input))?;
                let (_, _, oh, ow) = dims4(node.value.shape())?;
                let mut gx = vec![0.0; val(*input).len()];
                for (p, gp) in g.chunks(oh * ow).enumerate() {
                    for oy in 0..oh {
                        let sy = oy * h / oh;
                        for ox in 0..ow {
                            gx[p * h * w + sy * w + ox * w / ow] += gp[oy * ow + ox];
                        }
                    }
                }
                acc(*input, gx);
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (b, c, h, w) = dims4(self.shape(*input))?;
                let plane = h * w;
                let n = (b * plane) as f64;
                let gm = val(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (i, (&gi, &xh)) in g.iter().zip(xhat).enumerate() {
                    let ch = (i / plane) % c;
                    sum_g[ch] += gi;
                    sum_gx[ch] += gi * xh;
                }
                if rg(*input) {
                    let gx = g
                        .iter()
                        .zip(xhat)
                        .enumerate()
                        .map(|(i, (&gi, &xh))| {
                            let ch = (i / plane) % c;
                            gm[ch] * inv_std[ch] / n * (n * gi - sum_g[ch] - xh * sum_gx[ch])
                        })
                        .collect();
                    acc(*input, gx);
                }
                acc(*gamma, sum_gx);
                acc(*beta, sum_g);
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (_, c, h, w) = dims4(self.shape(*input))?;
                let plane = h * w;
                let x = val(*input);
                let gm = val(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (i, (&gi, &v)) in g.iter().zip(x).enumerate() {
                    let ch = (i / plane) % c;
                    sum_g[ch] += gi;
                    sum_gx[ch] += gi * (v - mean[ch]) * inv_std[ch];
                }
                if rg(*input) {
                    let gx = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| {
                            let ch = (i / plane) % c;
                            gi * gm[ch] * inv_std[ch]
                        })
                        .collect();
                    acc(*input, gx);
                }
                acc(*gamma, sum_gx);
                acc(*beta, sum_g);
            }
            Op::SpatialGradient { input, gx, gy } => {
                let (b, c, h, w) = dims4(self.shape(*input))?;
                let plane = h * w;
                let mut gin = vec![0.0; val(*input).len()];
                for p in 0..b * c {
                    let base = p * plane;
                    for y in 0..h {
                        for x in 0..w {
                            let o = base + y * w + x;
                            let dx = g[o] * sign(gx[o]);
                            let dy = g[o] * sign(gy[o]);
                            if dx == 0.0 && dy == 0.0 {
                                continue;
                            }
                            for ky in 0..3 {
                                let yy = ops::reflect(y as isize + ky as isize - 1, h);
                                for kx in 0..3 {
                                    let xx = ops::reflect(x as isize + kx as isize - 1, w);
                                    gin[base + yy * w + xx] +=
                                        ops::SOBEL_X[ky][kx] * dx + ops::SOBEL_Y[ky][kx] * dy;
                                }
                            }
                        }
                    }
                }
                acc(*input, gin);
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                if rg(*a) {
                    acc(*a, g.iter().zip(y).map(|(gi, yi)| gi * yi).collect());
                }
                if rg(*b) {
                    acc(*b, g.iter().zip(x).map(|(gi, xi)| gi * xi).collect());
                }
            }
            Op::Max(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let pick_a: Vec<bool> = x.iter().zip(y).map(|(xi, yi)| xi >= yi).collect();
                acc(
                    *a,
                    g.iter().zip(&pick_a).map(|(&gi, &p)| if p { gi } else { 0.0 }).collect(),
                );
                acc(
                    *b,
                    g.iter().zip(&pick_a).map(|(&gi, &p)| if p { 0.0 } else { gi }).collect(),
                );
            }
            Op::Expand { input } => {
                let src = self.shape(*input).to_vec();
                let map = BroadcastMap::new(&src, node.value.shape());
                let mut gx = vec![0.0; val(*input).len()];
                for (i, &gi) in g.iter().enumerate() {
                    gx[map.source(i)] += gi;
                }
                acc(*input, gx);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut parts: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(val(*v).len()))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (v, part) in inputs.iter().zip(parts.iter_mut()) {
                        let len = self.shape(*v)[*axis] * inner;
                        part.extend_from_slice(&g[off..off + len]);
                        off += len;
                    }
                }
                for (v, part) in inputs.iter().zip(parts) {
                    acc(*v, part);
                }
            }
            Op::Reshape { input } => acc(*input, g.to_vec()),
            Op::Scale { input, factor } => acc(*input, g.iter().map(|v| v * factor).collect()),
            Op::AddScalar { input } => acc(*input, g.to_vec()),
            Op::Sum { input } => acc(*input, vec![g[0]; val(*input).len()]),
            Op::Mean { input } => {
                let n = val(*input).len();
                acc(*input, vec![g[0] / n as f64; n]);
            }
            Op::L1(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let n = x.len() as f64;
                let d: Vec<f64> = x.iter().zip(y).map(|(xi, yi)| g[0] * sign(xi - yi) / n).collect();
                if rg(*b) {
                    acc(*b, d.iter().map(|v| -v).collect());
                }
                acc(*a, d);
            }
            Op::Mse(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let n = x.len() as f64;
                let d: Vec<f64> = x
                    .iter()
                    .zip(y)
                    .map(|(xi, yi)| g[0] * 2.0 * (xi - yi) / n)
                    .collect();
                if rg(*b) {
                    acc(*b, d.iter().map(|v| -v).collect());
                }
                acc(*a, d);
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            } => {
                let (b, k, h, w) = dims4(self.shape(*logits))?;
                let plane = h * w;
                let n = (b * plane) as f64;
                let mut gx: Vec<f64> = probs.iter().map(|p| g[0] * p / n).collect();
                for bi in 0..b {
                    for p in 0..plane {
                        let t = targets[bi * plane + p];
                        gx[(bi * k + t) * plane + p] -= g[0] / n;
                    }
                }
                acc(*logits, gx);
            }
            Op::BceLogits { logits, targets } => {
                let x = val(*logits);
                let n = x.len() as f64;
                acc(
                    *logits,
                    x.iter()
                        .zip(targets)
                        .map(|(&xi, &t)| g[0] * (sigmoid(xi) - t) / n)
                        .collect(),
                );
            }
        }
        Ok(())
    }
}

fn first_argmax(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::Linear { .. } => "linear",
        Op::Act { .. } => "activation",
        Op::GlobalPool { .. } => "global_pool",
        Op::WindowPool { .. } => "window_pool",
        Op::Upsample { .. } => "upsample",
        Op::BatchNormTrain { .. } | Op::BatchNormEval { .. } => "batch_norm",
        Op::SpatialGradient { .. } => "spatial_gradient",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Max(..) => "max",
        Op::Expand { .. } => "expand",
        Op::Concat { .. } => "concat",
        Op::Reshape { .. } => "reshape",
        Op::Scale { .. } => "scale",
        Op::AddScalar { .. } => "add_scalar",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::L1(..) => "l1",
        Op::Mse(..) => "mse",
        Op::SoftmaxCe { .. } => "softmax_cross_entropy",
        Op::BceLogits { .. } => "bce_with_logits",
    }
}

/// Maps a flat index of a broadcast output back to its source element.
struct BroadcastMap {
    out_strides: Vec<usize>,
    src_strides: Vec<usize>,
    src_shape: Vec<usize>,
}

impl BroadcastMap {
    fn new(src: &[usize], out: &[usize]) -> Self {
        BroadcastMap {
            out_strides: strides(out),
            src_strides: strides(src),
            src_shape: src.to_vec(),
        }
    }

    fn source(&self, mut flat: usize) -> usize {
        let mut idx = 0;
        for d in 0..self.out_strides.len() {
            let coord = flat / self.out_strides[d];
            flat %= self.out_strides[d];
            if self.src_shape[d] != 1 {
                idx += coord * self.src_strides[d];
            }
        }
        idx
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}
