//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op evaluates
//! eagerly, appends a node holding its output and whatever the backward rule
//! needs, and returns a [`Var`] handle. Node indices grow monotonically, so
//! walking the node list backwards visits operations in exact reverse
//! execution order.

use crate::error::TensorError;
use crate::tensor::dense::{strides, Tensor};
use crate::tensor::kernels::{self, ConvGeometry};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm normalization source.
#[derive(Clone, Debug)]
pub enum BatchNormMode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with externally tracked running statistics.
    Eval { mean: Vec<f64>, var: Vec<f64> },
}

/// Per-channel statistics of a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (`n - 1`) variance, the form fed to running averages.
    pub var_unbiased: Vec<f64>,
    pub count: usize,
}

/// Deliberate corruption of a backward rule, used to prove that the
/// gradient checker notices broken derivatives.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fault {
    SigmoidDerivativeScale(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    BatchedMatmul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        p: usize,
    },
    Permute {
        input: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    GlobalAvgPool(Var),
    GlobalMaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
        b_index: Option<Vec<usize>>,
    },
    Mul {
        a: Var,
        b: Var,
        b_index: Option<Vec<usize>>,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Sum(Var),
    Mean(Var),
    Nll {
        log_probs: Var,
        targets: Tensor,
    },
    SpectralScale {
        weight: Var,
        u: Vec<f64>,
        v: Vec<f64>,
        sigma: f64,
        guarded: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
    branch_hash: u64,
    fault: Option<Fault>,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Graph {
    pub fn new() -> Self {
        Graph {
            branch_hash: FNV_OFFSET,
            ..Default::default()
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every non-smooth decision taken so far (ReLU masks and max
    /// pooling winners). Two evaluations with equal signatures lie on the
    /// same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        self.branch_hash
    }

    fn mix(&mut self, word: u64) {
        self.branch_hash = (self.branch_hash ^ word).wrapping_mul(FNV_PRIME);
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, rg, op)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var, TensorError> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(TensorError::shape(
                "conv2d",
                format!("expected rank-4 input and kernel, got {xs:?} and {ks:?}"),
            ));
        }
        if xs[1] != ks[1] {
            return Err(TensorError::shape(
                "conv2d",
                format!("input has {} channels but kernel {ks:?} expects {}", xs[1], ks[1]),
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(TensorError::shape("conv2d", "stride must be positive"));
        }
        let (ph, pw) = (xs[2] + 2 * padding.0, xs[3] + 2 * padding.1);
        if ph < ks[2] || pw < ks[3] {
            return Err(TensorError::shape(
                "conv2d",
                format!("padded input {ph}x{pw} smaller than kernel {}x{}", ks[2], ks[3]),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(TensorError::shape(
                    "conv2d",
                    format!("bias shape {:?} != [{}]", self.shape(b), ks[0]),
                ));
            }
        }
        let geom = ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_channels: ks[0],
            kernel: (ks[2], ks[3]),
            padding,
            stride,
            out_h: (ph - ks[2]) / stride.0 + 1,
            out_w: (pw - ks[3]) / stride.1 + 1,
        };
        let data = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new([geom.batch, geom.out_channels, geom.out_h, geom.out_w], data)?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>), TensorError> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::shape(
                "batch_norm",
                format!("expected rank-4 input, got {xs:?}"),
            ));
        }
        let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(TensorError::shape(
                    "batch_norm",
                    format!("{name} shape {:?} != [{c}]", self.shape(v)),
                ));
            }
        }
        let count = n * plane;
        let x = self.value(input).data();
        let (mean, var, stats) = match &mode {
            BatchNormMode::Train => {
                if count < 2 {
                    return Err(TensorError::shape(
                        "batch_norm",
                        format!("training mode needs at least 2 values per channel, got {count}"),
                    ));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let vals = (0..n).flat_map(|i| {
                        let base = (i * c + ch) * plane;
                        x[base..base + plane].iter()
                    });
                    let m = vals.clone().sum::<f64>() / count as f64;
                    let v = vals.map(|&v| (v - m) * (v - m)).sum::<f64>() / count as f64;
                    mean[ch] = m;
                    var[ch] = v;
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var_unbiased: var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect(),
                    count,
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::shape(
                        "batch_norm",
                        format!("running statistics sized {} / {}, expected {c}", mean.len(), var.len()),
                    ));
                }
                (mean.clone(), var.clone(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                for j in base..base + plane {
                    let h = (x[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = g[ch] * h + b[ch];
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        let var_out = self.push(
            value,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: matches!(mode, BatchNormMode::Train),
            },
        );
        Ok((var_out, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // NaN passes through so a poisoned batch shows up in the loss.
        let out = self.unary(x, Op::Relu(x), |v| if v > 0.0 || v.is_nan() { v } else { 0.0 });
        let mut word = 0u64;
        let mut bits = 0;
        let mask: Vec<bool> = self.value(x).data().iter().map(|&v| v > 0.0).collect();
        for m in mask {
            word = (word << 1) | m as u64;
            bits += 1;
            if bits == 64 {
                self.mix(word);
                word = 0;
                bits = 0;
            }
        }
        self.mix(word ^ bits);
        out
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let d = *src.shape().last().expect("rank >= 1");
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let d = *src.shape().last().expect("rank >= 1");
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::LogSoftmax(x))
    }

    /// `[..., M, K] x [..., K, P]` with identical leading (batch) extents.
    pub fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sa.len() != sb.len() {
            return Err(TensorError::shape(
                "batched_matmul",
                format!("incompatible ranks: {sa:?} x {sb:?}"),
            ));
        }
        let r = sa.len();
        if sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(TensorError::shape(
                "batched_matmul",
                format!("extent mismatch: {sa:?} x {sb:?}"),
            ));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let (m, k, p) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let data = kernels::batched_matmul(self.value(a).data(), self.value(b).data(), batch, m, k, p);
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, p]);
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::BatchedMatmul { a, b, batch, m, k, p }))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        check_permutation(axes, shape.len())?;
        let (data, out_shape) = permute_data(self.value(x).data(), &shape, axes);
        let value = Tensor::new(out_shape, data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            value,
            rg,
            Op::Permute {
                input: x,
                axes: axes.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Mean over the two trailing axes of `[N, C, F, T]`, giving `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let (n, c, plane) = pool_dims(self.shape(x), "global_avg_pool")?;
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|w| w.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new([n, c], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::GlobalAvgPool(x)))
    }

    /// Max over the two trailing axes; ties go to the first index.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let (n, c, plane) = pool_dims(self.shape(x), "global_max_pool")?;
        let mut data = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for (i, w) in self.value(x).data().chunks(plane).enumerate() {
            let mut best = 0;
            for j in 1..plane {
                if !w[best].is_nan() && (w[j] > w[best] || w[j].is_nan()) {
                    best = j;
                }
            }
            data.push(w[best]);
            argmax.push(i * plane + best);
        }
        for &a in &argmax {
            self.mix(a as u64);
        }
        let value = Tensor::new([n, c], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::GlobalMaxPool { input: x, argmax }))
    }

    /// `x[N, Din] * w[Din, Dout] + b[Dout]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(TensorError::shape(
                "linear",
                format!("extent mismatch: input {xs:?}, weight {ws:?}"),
            ));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[1]);
        if let Some(b) = bias {
            if self.shape(b) != [dout] {
                return Err(TensorError::shape(
                    "linear",
                    format!("bias shape {:?} != [{dout}]", self.shape(b)),
                ));
            }
        }
        let mut out = vec![0.0; n * dout];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bd);
            }
        }
        kernels::gemm(
            n,
            din,
            dout,
            self.value(x).data(),
            din,
            1,
            self.value(weight).data(),
            dout,
            1,
            1.0,
            &mut out,
            dout,
            1,
        );
        let value = Tensor::new([n, dout], out)?;
        let mut deps = vec![x, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(value, rg, Op::Linear { input: x, weight, bias }))
    }

    /// Elementwise `a + b`; `b` may broadcast along singleton axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let b_index = broadcast_index(self.shape(a), self.shape(b), "add")?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data = match &b_index {
            None => av.iter().zip(bv).map(|(x, y)| x + y).collect(),
            Some(idx) => av.iter().zip(idx).map(|(x, &j)| x + bv[j]).collect(),
        };
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Add { a, b, b_index }))
    }

    /// Elementwise `a * b`; `b` may broadcast along singleton axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let b_index = broadcast_index(self.shape(a), self.shape(b), "mul")?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data = match &b_index {
            None => av.iter().zip(bv).map(|(x, y)| x * y).collect(),
            Some(idx) => av.iter().zip(idx).map(|(x, &j)| x * bv[j]).collect(),
        };
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Mul { a, b, b_index }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, Op::Scale { input: x, factor }, |v| v * factor)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Mean(x))
    }

    /// Batch mean of `-sum_i y_i * log_probs_i` for one-hot (or soft) targets.
    pub fn nll_loss(&mut self, log_probs: Var, targets: &Tensor) -> Result<Var, TensorError> {
        let lp = self.value(log_probs);
        if lp.rank() != 2 || lp.shape() != targets.shape() {
            return Err(TensorError::shape(
                "nll_loss",
                format!("log-probs {:?} vs targets {:?}", lp.shape(), targets.shape()),
            ));
        }
        let n = lp.shape()[0] as f64;
        let loss = -lp
            .data()
            .iter()
            .zip(targets.data())
            .filter(|(_, &y)| y != 0.0)
            .map(|(l, y)| y * l)
            .sum::<f64>()
            / n;
        let rg = self.any_grad(&[log_probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::Nll {
                log_probs,
                targets: targets.clone(),
            },
        ))
    }

    /// `W / max(u^T W v, eps)` with `u`, `v` held constant.
    pub fn spectral_scale(&mut self, weight: Var, u: &[f64], v: &[f64], eps: f64) -> Result<Var, TensorError> {
        let ws = self.shape(weight).to_vec();
        if ws.len() != 2 || ws[0] != u.len() || ws[1] != v.len() {
            return Err(TensorError::shape(
                "spectral_scale",
                format!("weight {ws:?} with u[{}], v[{}]", u.len(), v.len()),
            ));
        }
        let w = self.value(weight).data();
        let sigma = bilinear(w, u, v);
        let guarded = sigma < eps;
        let denom = if guarded { eps } else { sigma };
        let data = w.iter().map(|x| x / denom).collect();
        let value = Tensor::new(ws, data)?;
        let rg = self.any_grad(&[weight]);
        Ok(self.push(
            value,
            rg,
            Op::SpectralScale {
                weight,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma: denom,
                guarded,
            },
        ))
    }

    /// Populates gradients of every node that requires them. A graph can
    /// only be differentiated once; build a new graph for the next pass.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_deref() else {
                continue;
            };
            backprop(before, node, g, self.fault);
        }
        Ok(())
    }
}

fn accumulate(nodes: &mut [Node], v: Var, contribution: Vec<f64>) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    match node.grad.as_mut() {
        None => node.grad = Some(contribution),
        Some(g) => g.iter_mut().zip(contribution).for_each(|(a, b)| *a += b),
    }
}

fn needs(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn backprop(nodes: &mut [Node], node: &Node, g: &[f64], fault: Option<Fault>) {
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
        } => {
            let grads = kernels::conv2d_backward(
                geom,
                nodes[input.0].value.data(),
                nodes[kernel.0].value.data(),
                g,
                needs(nodes, *input),
            );
            if let Some(gx) = grads.input {
                accumulate(nodes, *input, gx);
            }
            accumulate(nodes, *kernel, grads.kernel);
            if let Some(b) = bias {
                accumulate(nodes, *b, grads.bias);
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let shape = node.value.shape();
            let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
            let gam = nodes[gamma.0].value.data().to_vec();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * plane;
                    for j in base..base + plane {
                        dgamma[ch] += g[j] * xhat[j];
                        dbeta[ch] += g[j];
                    }
                }
            }
            if needs(nodes, *input) {
                let m = (n * plane) as f64;
                let mut dx = vec![0.0; g.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * plane;
                        for j in base..base + plane {
                            dx[j] = if *train {
                                gam[ch] * inv_std[ch] / m * (m * g[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                            } else {
                                g[j] * gam[ch] * inv_std[ch]
                            };
                        }
                    }
                }
                accumulate(nodes, *input, dx);
            }
            accumulate(nodes, *gamma, dgamma);
            accumulate(nodes, *beta, dbeta);
        }
        Op::Relu(x) => {
            let xv = nodes[x.0].value.data();
            let dx = g.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
            accumulate(nodes, *x, dx);
        }
        Op::Sigmoid(x) => {
            let scale = match fault {
                Some(Fault::SigmoidDerivativeScale(s)) => s,
                None => 1.0,
            };
            let dx = g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y) * scale).collect();
            accumulate(nodes, *x, dx);
        }
        Op::Tanh(x) => {
            let dx = g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect();
            accumulate(nodes, *x, dx);
        }
        Op::Softmax(x) => {
            let d = *node.value.shape().last().unwrap();
            let mut dx = vec![0.0; g.len()];
            for ((gr, yr), dr) in g.chunks(d).zip(out.chunks(d)).zip(dx.chunks_mut(d)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(nodes, *x, dx);
        }
        Op::LogSoftmax(x) => {
            let d = *node.value.shape().last().unwrap();
            let mut dx = vec![0.0; g.len()];
            for ((gr, lr), dr) in g.chunks(d).zip(out.chunks(d)).zip(dx.chunks_mut(d)) {
                let total: f64 = gr.iter().sum();
                for j in 0..d {
                    dr[j] = gr[j] - lr[j].exp() * total;
                }
            }
            accumulate(nodes, *x, dx);
        }
        Op::BatchedMatmul { a, b, batch, m, k, p } => {
            let (batch, m, k, p) = (*batch, *m, *k, *p);
            if needs(nodes, *a) {
                let bv = nodes[b.0].value.data();
                let mut da = vec![0.0; batch * m * k];
                for i in 0..batch {
                    // dA = G * B^T
                    kernels::gemm(
                        m,
                        p,
                        k,
                        &g[i * m * p..],
                        p,
                        1,
                        &bv[i * k * p..],
                        1,
                        p,
                        0.0,
                        &mut da[i * m * k..],
                        k,
                        1,
                    );
                }
                accumulate(nodes, *a, da);
            }
            if needs(nodes, *b) {
                let av = nodes[a.0].value.data();
                let mut db = vec![0.0; batch * k * p];
                for i in 0..batch {
                    // dB = A^T * G
                    kernels::gemm(
                        k,
                        m,
                        p,
                        &av[i * m * k..],
                        1,
                        k,
                        &g[i * m * p..],
                        p,
                        1,
                        0.0,
                        &mut db[i * k * p..],
                        p,
                        1,
                    );
                }
                accumulate(nodes, *b, db);
            }
        }
        Op::Permute { input, axes } => {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            let (dx, _) = permute_data(g, node.value.shape(), &inverse);
            accumulate(nodes, *input, dx);
        }
        Op::Reshape(x) => accumulate(nodes, *x, g.to_vec()),
        Op::GlobalAvgPool(x) => {
            let xs = nodes[x.0].value.shape();
            let plane = xs[2] * xs[3];
            let dx = g
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v / plane as f64, plane))
                .collect();
            accumulate(nodes, *x, dx);
        }
        Op::GlobalMaxPool { input, argmax } => {
            let mut dx = vec![0.0; nodes[input.0].value.numel()];
            for (gv, &j) in g.iter().zip(argmax) {
                dx[j] += gv;
            }
            accumulate(nodes, *input, dx);
        }
        Op::Linear { input, weight, bias } => {
            let xs = nodes[input.0].value.shape().to_vec();
            let (n, din) = (xs[0], xs[1]);
            let dout = node.value.shape()[1];
            if needs(nodes, *input) {
                let w = nodes[weight.0].value.data();
                let mut dx = vec![0.0; n * din];
                kernels::gemm(n, dout, din, g, dout, 1, w, 1, dout, 0.0, &mut dx, din, 1);
                accumulate(nodes, *input, dx);
            }
            if needs(nodes, *weight) {
                let x = nodes[input.0].value.data();
                let mut dw = vec![0.0; din * dout];
                kernels::gemm(din, n, dout, x, 1, din, g, dout, 1, 0.0, &mut dw, dout, 1);
                accumulate(nodes, *weight, dw);
            }
            if let Some(b) = bias {
                let mut db = vec![0.0; dout];
                for row in g.chunks(dout) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                accumulate(nodes, *b, db);
            }
        }
        Op::Add { a, b, b_index } => {
            accumulate(nodes, *a, g.to_vec());
            if needs(nodes, *b) {
                let db = reduce_broadcast(g, b_index.as_deref(), nodes[b.0].value.numel());
                accumulate(nodes, *b, db);
            }
        }
        Op::Mul { a, b, b_index } => {
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            let da = needs(nodes, *a).then(|| match b_index {
                None => g.iter().zip(bv).map(|(g, y)| g * y).collect::<Vec<_>>(),
                Some(idx) => g.iter().zip(idx).map(|(g, &j)| g * bv[j]).collect(),
            });
            let db = needs(nodes, *b).then(|| {
                let prod: Vec<f64> = g.iter().zip(av).map(|(g, x)| g * x).collect();
                reduce_broadcast(&prod, b_index.as_deref(), bv.len())
            });
            if let Some(da) = da {
                accumulate(nodes, *a, da);
            }
            if let Some(db) = db {
                accumulate(nodes, *b, db);
            }
        }
        Op::Scale { input, factor } => {
            accumulate(nodes, *input, g.iter().map(|v| v * factor).collect());
        }
        Op::Sum(x) => {
            let n = nodes[x.0].value.numel();
            accumulate(nodes, *x, vec![g[0]; n]);
        }
        Op::Mean(x) => {
            let n = nodes[x.0].value.numel();
            accumulate(nodes, *x, vec![g[0] / n as f64; n]);
        }
        Op::Nll { log_probs, targets } => {
            let n = targets.shape()[0] as f64;
            let d = targets.data().iter().map(|y| -g[0] * y / n).collect();
            accumulate(nodes, *log_probs, d);
        }
        Op::SpectralScale {
            weight,
            u,
            v,
            sigma,
            guarded,
        } => {
            let dw = if *guarded {
                g.iter().map(|x| x / sigma).collect()
            } else {
                // d(W/s) with s = u^T W v: G/s - <G, W>/s^2 * u v^T
                let w = nodes[weight.0].value.data();
                let inner: f64 = g.iter().zip(w).map(|(a, b)| a * b).sum();
                let coef = inner / (sigma * sigma);
                let cols = v.len();
                g.iter()
                    .enumerate()
                    .map(|(idx, gv)| gv / sigma - coef * u[idx / cols] * v[idx % cols])
                    .collect()
            };
            accumulate(nodes, *weight, dw);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// `u^T W v` for a row-major `W[u.len(), v.len()]`.
pub(crate) fn bilinear(w: &[f64], u: &[f64], v: &[f64]) -> f64 {
    w.chunks(v.len())
        .zip(u)
        .map(|(row, ui)| ui * row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

fn pool_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize), TensorError> {
    if shape.len() != 4 || shape[2] * shape[3] == 0 {
        return Err(TensorError::shape(
            op,
            format!("expected [N, C, F, T] with F*T >= 1, got {shape:?}"),
        ));
    }
    Ok((shape[0], shape[1], shape[2] * shape[3]))
}

fn check_permutation(axes: &[usize], rank: usize) -> Result<(), TensorError> {
    let mut seen = vec![false; rank];
    let valid = axes.len() == rank
        && axes.iter().all(|&a| {
            if a >= rank || seen[a] {
                return false;
            }
            seen[a] = true;
            true
        });
    if valid {
        Ok(())
    } else {
        Err(TensorError::InvalidPermutation {
            axes: axes.to_vec(),
            rank,
        })
    }
}

pub(crate) fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

/// Flat index into `b` for every element of `a`, or `None` when the shapes
/// are identical. `b` is left-padded with singleton axes.
fn broadcast_index(a: &[usize], b: &[usize], op: &'static str) -> Result<Option<Vec<usize>>, TensorError> {
    if a == b {
        return Ok(None);
    }
    if b.len() > a.len() {
        return Err(TensorError::shape(op, format!("cannot broadcast {b:?} onto {a:?}")));
    }
    let mut padded = vec![1; a.len() - b.len()];
    padded.extend_from_slice(b);
    if padded.iter().zip(a).any(|(&pb, &pa)| pb != pa && pb != 1) {
        return Err(TensorError::shape(op, format!("cannot broadcast {b:?} onto {a:?}")));
    }
    let b_strides = strides(&padded);
    let eff: Vec<usize> = padded
        .iter()
        .zip(&b_strides)
        .map(|(&e, &s)| if e == 1 { 0 } else { s })
        .collect();
    let total: usize = a.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; a.len()];
    for _ in 0..total {
        out.push(idx.iter().zip(&eff).map(|(i, s)| i * s).sum());
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < a[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(Some(out))
}

fn reduce_broadcast(g: &[f64], b_index: Option<&[usize]>, b_len: usize) -> Vec<f64> {
    match b_index {
        None => g.to_vec(),
        Some(idx) => {
            let mut out = vec![0.0; b_len];
            for (v, &j) in g.iter().zip(idx) {
                out[j] += v;
            }
            out
        }
    }
}
