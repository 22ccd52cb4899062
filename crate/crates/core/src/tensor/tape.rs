use super::kernels::{self, ConvDims};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Running per-channel statistics of a batch-normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormStats {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        dims: ConvDims,
    },
    AvgPool {
        input: Var,
        dims: [usize; 4],
        window: usize,
        stride: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        n: usize,
        m: usize,
    },
    Softmax {
        input: Var,
        n: usize,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ScaleChannels {
        input: Var,
        gate: Var,
        c: usize,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Reshape {
        input: Var,
    },
    GlobalAvgPool {
        input: Var,
        hw: usize,
        c: usize,
    },
    MulConst {
        input: Var,
        factors: Vec<f64>,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Sum {
        input: Var,
    },
    L1Norm {
        input: Var,
    },
    KlDiv {
        pred: Var,
        target: Vec<f64>,
        rows: usize,
    },
    Mae {
        pred: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Define-by-run recording of a forward computation.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and a single reverse sweep is a valid topological traversal.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn image_dims(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match *shape {
        [h, w, c] => Ok([1, h, w, c]),
        [n, h, w, c] => Ok([n, h, w, c]),
        _ => Err(Error::shape(format!(
            "{what}: expected H×W×C or N×H×W×C input, got {shape:?}"
        ))),
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. It is differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.data().to_vec(),
            op: Op::Leaf,
            requires_grad: tensor.requires_grad(),
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        let v = self.leaf(tensor);
        self.nodes[v.0].requires_grad = false;
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Which ReLU inputs are positive, in recording order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { input } => Some(input),
                _ => None,
            })
            .flat_map(|v| self.nodes[v.0].value.iter().map(|&x| x > 0.0))
            .collect()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Copies a recorded value (and its gradient, if any) out as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor {
            shape: node.shape.clone(),
            data: node.value.clone(),
            requires_grad: node.requires_grad,
            grad: node.grad.clone(),
        }
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    /// Valid 2-D convolution. `kernel` is `Kh × Kw × C_in × C_out`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let [n, h, w, ci] = image_dims(&in_shape, "conv2d")?;
        let (kh, kw, kci, co) = match *self.shape(kernel) {
            [kh, kw, kci, co] => (kh, kw, kci, co),
            ref s => {
                return Err(Error::shape(format!(
                    "conv2d: kernel must be Kh×Kw×C_in×C_out, got {s:?}"
                )))
            }
        };
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be at least 1"));
        }
        if kci != ci {
            return Err(Error::shape(format!(
                "conv2d: kernel expects {kci} input channels, input has {ci}"
            )));
        }
        if kh > h || kw > w {
            return Err(Error::shape(format!(
                "conv2d: {kh}×{kw} kernel larger than {h}×{w} input"
            )));
        }
        if self.shape(bias) != [co] {
            return Err(Error::shape(format!(
                "conv2d: bias shape {:?} does not match {co} output channels",
                self.shape(bias)
            )));
        }
        let dims = ConvDims {
            n,
            h,
            w,
            ci,
            kh,
            kw,
            co,
            stride,
        };
        let out = kernels::conv2d_forward(self.value(input), self.value(kernel), self.value(bias), dims);
        let mut shape = vec![dims.out_h(), dims.out_w(), co];
        if in_shape.len() == 4 {
            shape.insert(0, n);
        }
        Ok(self.push(
            shape,
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                dims,
            },
            &[input, kernel, bias],
        ))
    }

    pub fn avgpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let dims @ [n, h, w, c] = image_dims(&in_shape, "avgpool2d")?;
        if window == 0 || stride == 0 {
            return Err(Error::invalid("avgpool2d: window and stride must be positive"));
        }
        if window > h || window > w {
            return Err(Error::shape(format!(
                "avgpool2d: window {window} larger than {h}×{w} input"
            )));
        }
        let out = kernels::avgpool_forward(self.value(input), dims, window, stride);
        let mut shape = vec![(h - window) / stride + 1, (w - window) / stride + 1, c];
        if in_shape.len() == 4 {
            shape.insert(0, n);
        }
        Ok(self.push(
            shape,
            out,
            Op::AvgPool {
                input,
                dims,
                window,
                stride,
            },
            &[input],
        ))
    }

    /// Batch normalization over every axis but the last.
    ///
    /// In train mode the batch moments normalize the input and are folded
    /// into `stats` as `running = momentum·running + (1 − momentum)·batch`.
    /// In infer mode `stats` is read only.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats,
        mode: Mode,
        momentum: f64,
        epsilon: f64,
    ) -> Result<Var> {
        if epsilon <= 0.0 || epsilon.is_nan() {
            return Err(Error::invalid(format!(
                "batchnorm: epsilon must be positive, got {epsilon}"
            )));
        }
        let c = *self
            .shape(input)
            .last()
            .ok_or_else(|| Error::shape("batchnorm: scalar input"))?;
        for (what, len) in [
            ("gamma", self.value(gamma).len()),
            ("beta", self.value(beta).len()),
            ("running mean", stats.mean.len()),
            ("running variance", stats.var.len()),
        ] {
            if len != c {
                return Err(Error::shape(format!(
                    "batchnorm: {what} has {len} entries for {c} channels"
                )));
            }
        }
        let x = self.value(input);
        let (mean, var) = match mode {
            Mode::Train => {
                let (mean, var) = kernels::channel_moments(x, c);
                for ch in 0..c {
                    stats.mean[ch] = momentum * stats.mean[ch] + (1.0 - momentum) * mean[ch];
                    stats.var[ch] = momentum * stats.var[ch] + (1.0 - momentum) * var[ch];
                }
                (mean, var)
            }
            Mode::Infer => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for ((xr, hr), yr) in x
            .chunks_exact(c)
            .zip(xhat.chunks_exact_mut(c))
            .zip(out.chunks_exact_mut(c))
        {
            for ch in 0..c {
                hr[ch] = (xr[ch] - mean[ch]) * inv_std[ch];
                yr[ch] = g[ch] * hr[ch] + b[ch];
            }
        }
        let shape = self.shape(input).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            &[input, gamma, beta],
        ))
    }

    /// Fully connected layer on `[n]` or `[rows, n]` input with `n × m` weights.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, m) = match *self.shape(weight) {
            [n, m] => (n, m),
            ref s => return Err(Error::shape(format!("dense: weight must be n×m, got {s:?}"))),
        };
        let in_shape = self.shape(input).to_vec();
        let out_shape = match *in_shape.as_slice() {
            [k] if k == n => vec![m],
            [rows, k] if k == n => vec![rows, m],
            _ => {
                return Err(Error::shape(format!(
                    "dense: input {in_shape:?} does not match weight rows {n}"
                )))
            }
        };
        if let Some(b) = bias {
            if self.shape(b) != [m] {
                return Err(Error::shape(format!(
                    "dense: bias shape {:?} does not match {m} outputs",
                    self.shape(b)
                )));
            }
        }
        let out = kernels::dense_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            n,
            m,
        );
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            out_shape,
            out,
            Op::Dense {
                input,
                weight,
                bias,
                n,
                m,
            },
            &inputs,
        ))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let n = *self
            .shape(input)
            .last()
            .ok_or_else(|| Error::shape("softmax: scalar input"))?;
        let out = kernels::softmax_rows(self.value(input), n);
        let shape = self.shape(input).to_vec();
        Ok(self.push(shape, out, Op::Softmax { input, n }, &[input]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(input).to_vec();
        self.push(shape, out, Op::Relu { input }, &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = self.value(input).iter().map(|&v| kernels::sigmoid(v)).collect();
        let shape = self.shape(input).to_vec();
        self.push(shape, out, Op::Sigmoid { input }, &[input])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "multiply")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul { a, b }, &[a, b]))
    }

    /// Scales each channel of an image tensor by a per-sample gate of shape `[N, C]` (or `[C]`).
    pub fn scale_channels(&mut self, input: Var, gate: Var) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let [n, h, w, c] = image_dims(&in_shape, "scale_channels")?;
        let expected: &[usize] = if in_shape.len() == 4 { &[n, c] } else { &[c] };
        if self.shape(gate) != expected {
            return Err(Error::shape(format!(
                "scale_channels: gate {:?} does not match input {in_shape:?}",
                self.shape(gate)
            )));
        }
        let g = self.value(gate);
        let mut out = self.value(input).to_vec();
        for (px, row) in out.chunks_exact_mut(c).enumerate() {
            let b = px / (h * w);
            row.iter_mut()
                .zip(&g[b * c..(b + 1) * c])
                .for_each(|(v, s)| *v *= s);
        }
        Ok(self.push(
            in_shape,
            out,
            Op::ScaleChannels { input, gate, c },
            &[input, gate],
        ))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!(
                "concat: axis {axis} out of range for {base:?}"
            )));
        }
        let mut total = 0;
        let mut chunks = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat: {s:?} incompatible with {base:?} along axis {axis}"
                )));
            }
            total += s[axis];
            chunks.push(s[axis..].iter().product::<usize>());
        }
        let outer: usize = base[..axis].iter().product();
        let mut out = Vec::with_capacity(outer * chunks.iter().sum::<usize>());
        for o in 0..outer {
            for (&v, &chunk) in inputs.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                chunks,
            },
            inputs,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(input).len() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "reshape: cannot view {:?} as {shape:?}",
                self.shape(input)
            )));
        }
        let out = self.value(input).to_vec();
        Ok(self.push(shape, out, Op::Reshape { input }, &[input]))
    }

    /// Flattens an image batch `N×H×W×C` to `N × (H·W·C)`, or a single image to a vector.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let flat = match *shape.as_slice() {
            [n, h, w, c] => vec![n, h * w * c],
            _ => vec![shape.iter().product()],
        };
        self.reshape(input, flat)
    }

    /// Mean over the spatial axes: `N×H×W×C → N×C` (`H×W×C → C`).
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let [n, h, w, c] = image_dims(&in_shape, "global_avg_pool")?;
        let hw = h * w;
        let mut out = vec![0.0; n * c];
        for (px, row) in self.value(input).chunks_exact(c).enumerate() {
            let b = px / hw;
            out[b * c..(b + 1) * c]
                .iter_mut()
                .zip(row)
                .for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= hw as f64);
        let shape = if in_shape.len() == 4 { vec![n, c] } else { vec![c] };
        Ok(self.push(shape, out, Op::GlobalAvgPool { input, hw, c }, &[input]))
    }

    /// Elementwise product with fixed factors (e.g. a dropout mask).
    pub fn mul_const(&mut self, input: Var, factors: Vec<f64>) -> Result<Var> {
        if factors.len() != self.value(input).len() {
            return Err(Error::shape(format!(
                "mul_const: {} factors for {} values",
                factors.len(),
                self.value(input).len()
            )));
        }
        let out = self
            .value(input)
            .iter()
            .zip(&factors)
            .map(|(v, f)| v * f)
            .collect();
        let shape = self.shape(input).to_vec();
        Ok(self.push(shape, out, Op::MulConst { input, factors }, &[input]))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.value(input).iter().map(|v| v * factor).collect();
        let shape = self.shape(input).to_vec();
        self.push(shape, out, Op::Scale { input, factor }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum { input }, &[input])
    }

    /// Sum of absolute values; the subgradient at 0 is 0.
    pub fn l1_norm(&mut self, input: Var) -> Var {
        let s = self.value(input).iter().map(|v| v.abs()).sum();
        self.push(Vec::new(), vec![s], Op::L1Norm { input }, &[input])
    }

    /// Batch mean of `Σ_k t_k ln(t_k / p_k)`, zero-target terms contributing 0.
    pub fn kl_div(&mut self, target: &Tensor, pred: Var) -> Result<Var> {
        if target.shape() != self.shape(pred) {
            return Err(Error::shape(format!(
                "kl_div: target {:?} vs prediction {:?}",
                target.shape(),
                self.shape(pred)
            )));
        }
        let n = *target
            .shape()
            .last()
            .ok_or_else(|| Error::shape("kl_div: scalar input"))?;
        let rows = target.len() / n;
        let value = crate::loss::kl_divergence_flat(target.data(), self.value(pred), n)?;
        Ok(self.push(
            Vec::new(),
            vec![value],
            Op::KlDiv {
                pred,
                target: target.data().to_vec(),
                rows,
            },
            &[pred],
        ))
    }

    /// Batch mean of `|t − p|` for predictions shaped `[N]` or `[N, 1]`.
    pub fn mae(&mut self, target: &[f64], pred: Var) -> Result<Var> {
        let p = self.value(pred);
        let shape_ok = matches!(*self.shape(pred), [_] | [_, 1]);
        if !shape_ok || p.len() != target.len() {
            return Err(Error::shape(format!(
                "mae: {} targets for prediction shape {:?}",
                target.len(),
                self.shape(pred)
            )));
        }
        let value = crate::loss::mae_loss(target, p)?;
        Ok(self.push(
            Vec::new(),
            vec![value],
            Op::Mae {
                pred,
                target: target.to_vec(),
            },
            &[pred],
        ))
    }

    /// Reverse sweep from a scalar root. Gradients land on every node that
    /// requires them and accumulate across repeated calls.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward: root must be scalar, has shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        let mut pending: Vec<Option<Vec<f64>>> = Vec::new();
        pending.resize_with(root.0 + 1, || None);
        pending[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = pending[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            for (target, contribution) in self.node_vjp(idx, &g) {
                match &mut pending[target.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    // Vector-Jacobian products of one node with respect to its inputs that
    // require gradients.
    fn node_vjp(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                dims,
            } => {
                let want = [needs(*input), needs(*kernel), needs(*bias)];
                let grads = kernels::conv2d_backward(val(*input), val(*kernel), g, *dims, want);
                out.extend(grads.input.map(|d| (*input, d)));
                out.extend(grads.kernel.map(|d| (*kernel, d)));
                out.extend(grads.bias.map(|d| (*bias, d)));
            }
            Op::AvgPool {
                input,
                dims,
                window,
                stride,
            } => {
                if needs(*input) {
                    out.push((*input, kernels::avgpool_backward(g, *dims, *window, *stride)));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        dbeta[ch] += gr[ch];
                        dgamma[ch] += gr[ch] * hr[ch];
                    }
                }
                if needs(*input) {
                    let gam = val(*gamma);
                    let mut dx = vec![0.0; g.len()];
                    if *batch_stats {
                        let m = (g.len() / c) as f64;
                        for ((dr, gr), hr) in dx
                            .chunks_exact_mut(c)
                            .zip(g.chunks_exact(c))
                            .zip(xhat.chunks_exact(c))
                        {
                            for ch in 0..c {
                                dr[ch] = gam[ch] * inv_std[ch] / m
                                    * (m * gr[ch] - dbeta[ch] - hr[ch] * dgamma[ch]);
                            }
                        }
                    } else {
                        for (dr, gr) in dx.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                            for ch in 0..c {
                                dr[ch] = gr[ch] * gam[ch] * inv_std[ch];
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                if needs(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if needs(*beta) {
                    out.push((*beta, dbeta));
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
                n,
                m,
            } => {
                let (n, m) = (*n, *m);
                let x = val(*input);
                if needs(*input) {
                    let w = val(*weight);
                    let mut dx = vec![0.0; x.len()];
                    for (dr, gr) in dx.chunks_exact_mut(n).zip(g.chunks_exact(m)) {
                        for (d, wr) in dr.iter_mut().zip(w.chunks_exact(m)) {
                            *d = wr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        }
                    }
                    out.push((*input, dx));
                }
                if needs(*weight) {
                    let mut dw = vec![0.0; n * m];
                    for (xr, gr) in x.chunks_exact(n).zip(g.chunks_exact(m)) {
                        for (&a, dr) in xr.iter().zip(dw.chunks_exact_mut(m)) {
                            dr.iter_mut().zip(gr).for_each(|(d, b)| *d += a * b);
                        }
                    }
                    out.push((*weight, dw));
                }
                if let Some(b) = bias.filter(|b| needs(*b)) {
                    let mut db = vec![0.0; m];
                    for gr in g.chunks_exact(m) {
                        db.iter_mut().zip(gr).for_each(|(d, b)| *d += b);
                    }
                    out.push((b, db));
                }
            }
            Op::Softmax { input, n } => {
                if needs(*input) {
                    let y = &node.value;
                    let mut dx = vec![0.0; y.len()];
                    for ((dr, yr), gr) in dx
                        .chunks_exact_mut(*n)
                        .zip(y.chunks_exact(*n))
                        .zip(g.chunks_exact(*n))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    out.push((*input, dx));
                }
            }
            Op::Relu { input } => {
                if needs(*input) {
                    let dx = val(*input)
                        .iter()
                        .zip(g)
                        .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    out.push((*input, dx));
                }
            }
            Op::Sigmoid { input } => {
                if needs(*input) {
                    let dx = node
                        .value
                        .iter()
                        .zip(g)
                        .map(|(y, gv)| gv * y * (1.0 - y))
                        .collect();
                    out.push((*input, dx));
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if needs(v) {
                        out.push((v, g.to_vec()));
                    }
                }
            }
            Op::Mul { a, b } => {
                if needs(*a) {
                    out.push((*a, val(*b).iter().zip(g).map(|(y, gv)| y * gv).collect()));
                }
                if needs(*b) {
                    out.push((*b, val(*a).iter().zip(g).map(|(x, gv)| x * gv).collect()));
                }
            }
            Op::ScaleChannels { input, gate, c } => {
                let c = *c;
                let gate_v = val(*gate);
                let per_sample = node.value.len() / (gate_v.len() / c);
                if needs(*input) {
                    let mut dx = g.to_vec();
                    for (px, row) in dx.chunks_exact_mut(c).enumerate() {
                        let b = px * c / per_sample;
                        row.iter_mut()
                            .zip(&gate_v[b * c..(b + 1) * c])
                            .for_each(|(d, s)| *d *= s);
                    }
                    out.push((*input, dx));
                }
                if needs(*gate) {
                    let mut dg = vec![0.0; gate_v.len()];
                    for (px, (gr, xr)) in g.chunks_exact(c).zip(val(*input).chunks_exact(c)).enumerate() {
                        let b = px * c / per_sample;
                        for ((d, gv), xv) in dg[b * c..(b + 1) * c].iter_mut().zip(gr).zip(xr) {
                            *d += gv * xv;
                        }
                    }
                    out.push((*gate, dg));
                }
            }
            Op::Concat {
                inputs,
                outer,
                chunks,
            } => {
                let stride: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&v, &chunk) in inputs.iter().zip(chunks) {
                    if needs(v) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..*outer {
                            let start = o * stride + offset;
                            d.extend_from_slice(&g[start..start + chunk]);
                        }
                        out.push((v, d));
                    }
                    offset += chunk;
                }
            }
            Op::Reshape { input } => {
                if needs(*input) {
                    out.push((*input, g.to_vec()));
                }
            }
            Op::GlobalAvgPool { input, hw, c } => {
                if needs(*input) {
                    let inv = 1.0 / *hw as f64;
                    let mut dx = vec![0.0; val(*input).len()];
                    for (px, row) in dx.chunks_exact_mut(*c).enumerate() {
                        let b = px / hw;
                        row.iter_mut()
                            .zip(&g[b * c..(b + 1) * c])
                            .for_each(|(d, gv)| *d = gv * inv);
                    }
                    out.push((*input, dx));
                }
            }
            Op::MulConst { input, factors } => {
                if needs(*input) {
                    out.push((*input, factors.iter().zip(g).map(|(f, gv)| f * gv).collect()));
                }
            }
            Op::Scale { input, factor } => {
                if needs(*input) {
                    out.push((*input, g.iter().map(|gv| gv * factor).collect()));
                }
            }
            Op::Sum { input } => {
                if needs(*input) {
                    out.push((*input, vec![g[0]; val(*input).len()]));
                }
            }
            Op::L1Norm { input } => {
                if needs(*input) {
                    out.push((*input, val(*input).iter().map(|&v| g[0] * sign(v)).collect()));
                }
            }
            Op::KlDiv { pred, target, rows } => {
                if needs(*pred) {
                    let scale = g[0] / *rows as f64;
                    let dp = target
                        .iter()
                        .zip(val(*pred))
                        .map(|(&t, &p)| if t > 0.0 { -scale * t / p } else { 0.0 })
                        .collect();
                    out.push((*pred, dp));
                }
            }
            Op::Mae { pred, target } => {
                if needs(*pred) {
                    let scale = g[0] / target.len() as f64;
                    let dp = val(*pred)
                        .iter()
                        .zip(target)
                        .map(|(&p, &t)| scale * sign(p - t))
                        .collect();
                    out.push((*pred, dp));
                }
            }
        }
        out
    }
}
