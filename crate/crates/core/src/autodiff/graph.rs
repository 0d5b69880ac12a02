use crate::error::{Error, Result};
use crate::quant::{
    binarize_forward, binarize_levels, soft_quantize_grad, ste_grad_factor, uniform_quantize,
    ActQuantState, BinaryLevels, SteParams,
};
use crate::tensor::Tensor;

use super::kernels::{self, ConvGeom};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool2d {
        input: Var,
        kernel: usize,
    },
    ScaleShift {
        input: Var,
        scale: Var,
        shift: Var,
    },
    Add(Var, Var),
    Reshape(Var),
    Sum(Var),
    HalfSumSquares(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    Binarize {
        input: Var,
        ste: SteParams,
        levels: BinaryLevels,
    },
    ActQuant {
        input: Var,
        state: ActQuantState,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::Relu(_) => "relu",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::ScaleShift { .. } => "scale_shift",
            Op::Add(..) => "add",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::HalfSumSquares(_) => "half_sum_squares",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Binarize { .. } => "binarize",
            Op::ActQuant { .. } => "act_quant",
        }
    }
}

/// One recorded operation with its cached forward value and gradient accumulator.
#[derive(Debug)]
pub struct Node {
    pub(crate) op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
}

impl Node {
    pub fn kind(&self) -> &'static str {
        self.op.kind()
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }
}

/// Append-only tape. Nodes are stored in creation order, which is a
/// topological order, so the backward sweep is a single reverse scan.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, op: Op, value: Tensor, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_with(op, value, requires_grad)
    }

    fn push_with(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "{} produced a non-finite value", op.kind());
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_with(Op::Leaf, t, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_with(Op::Leaf, t, true)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.value(input).shape(), self.value(weight).shape(), stride, padding)?;
        let (out, cols) = kernels::conv2d_forward(self.value(input), self.value(weight), &geom);
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                geom,
                cols,
            },
            out,
            &[input, weight],
        ))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = kernels::linear_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        )?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(Op::Linear { input, weight, bias }, out, &parents))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| v.max(0.0));
        self.push(Op::Relu(input), out, &[input])
    }

    pub fn max_pool2d(&mut self, input: Var, k: usize) -> Result<Var> {
        let (out, argmax) = kernels::max_pool2d_forward(self.value(input), k)?;
        Ok(self.push(Op::MaxPool2d { input, argmax }, out, &[input]))
    }

    pub fn avg_pool2d(&mut self, input: Var, kernel: usize) -> Result<Var> {
        let out = kernels::avg_pool2d_forward(self.value(input), kernel)?;
        Ok(self.push(Op::AvgPool2d { input, kernel }, out, &[input]))
    }

    /// Learnable per-channel affine map `x·scale[c] + shift[c]`.
    pub fn scale_shift(&mut self, input: Var, scale: Var, shift: Var) -> Result<Var> {
        let x = self.value(input);
        let (_, c, inner) = kernels::channel_layout(x.shape())?;
        let (s, b) = (self.value(scale), self.value(shift));
        if s.numel() != c || b.numel() != c {
            return Err(Error::shape(
                "scale_shift",
                format!("{c} channels but scale/shift have {}/{}", s.numel(), b.numel()),
            ));
        }
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / inner) % c;
            *v = *v * s.data()[ch] + b.data()[ch];
        }
        Ok(self.push(Op::ScaleShift { input, scale, shift }, out, &[input, scale, shift]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| x + y)
            .map_err(|_| {
                Error::shape(
                    "add",
                    format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
                )
            })?;
        Ok(self.push(Op::Add(a, b), out, &[a, b]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(input), out, &[input]))
    }

    /// Collapse all but the leading axis.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).shape();
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(input, &[n, rest])
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        self.push(Op::Sum(input), out, &[input])
    }

    /// `0.5 · ‖x‖²`.
    pub fn half_sum_squares(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(0.5 * self.value(input).sum_squares());
        self.push(Op::HalfSumSquares(input), out, &[input])
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            &[logits],
        ))
    }

    /// Moment-matched binarization forward, tanh STE backward.
    pub fn binarize(&mut self, input: Var, ste: SteParams) -> Result<Var> {
        let levels = binarize_levels(self.value(input))?;
        let out = binarize_forward(self.value(input), &levels);
        Ok(self.push(Op::Binarize { input, ste, levels }, out, &[input]))
    }

    /// Hard uniform quantization forward, soft-quantizer derivative backward.
    pub fn act_quant(&mut self, input: Var, state: ActQuantState) -> Var {
        let out = self.value(input).map(|a| uniform_quantize(a, &state));
        self.push(Op::ActQuant { input, state }, out, &[input])
    }

    /// Levels used by a binarize node.
    pub fn binary_levels(&self, v: Var) -> Option<BinaryLevels> {
        match &self.nodes[v.0].op {
            Op::Binarize { levels, .. } => Some(*levels),
            _ => None,
        }
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        debug_assert_eq!(node.value.shape(), g.shape(), "gradient shape for {}", node.op.kind());
        match &mut node.grad {
            Some(acc) => acc.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Reverse sweep from a scalar loss. Gradients of earlier calls are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.wants(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::ones(self.value(loss).shape()));
        for i in (0..=loss.0).rev() {
            let Some(up) = self.nodes[i].grad.take() else {
                continue;
            };
            self.backward_node(i, &up)?;
            self.nodes[i].grad = Some(up);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, up: &Tensor) -> Result<()> {
        // temporarily move the op out so parents can be borrowed mutably
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let result = self.propagate(&op, up);
        self.nodes[i].op = op;
        result
    }

    fn propagate(&mut self, op: &Op, up: &Tensor) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                geom,
                cols,
            } => {
                if self.wants(*weight) {
                    let dw = kernels::conv2d_backward_weight(up, cols, geom);
                    self.accumulate(*weight, dw);
                }
                if self.wants(*input) {
                    let dx = kernels::conv2d_backward_input(up, self.value(*weight), geom);
                    self.accumulate(*input, dx);
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, f, g) = kernels::linear_dims(x, w)?;
                if self.wants(*weight) {
                    let mut dw = vec![0.0; f * g];
                    crate::tensor::gemm(f, n, g, 1.0, x.data(), (1, f), up.data(), (g, 1), 0.0, &mut dw, (g, 1));
                    self.accumulate(*weight, Tensor::new(&[f, g], dw)?);
                }
                if self.wants(*input) {
                    let w = self.value(*weight);
                    let mut dx = vec![0.0; n * f];
                    crate::tensor::gemm(n, g, f, 1.0, up.data(), (g, 1), w.data(), (1, g), 0.0, &mut dx, (f, 1));
                    self.accumulate(*input, Tensor::new(&[n, f], dx)?);
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let mut db = vec![0.0; g];
                        for row in up.data().chunks(g) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        let shape = self.value(*b).shape().to_vec();
                        self.accumulate(*b, Tensor::new(&shape, db)?);
                    }
                }
            }
            Op::Relu(input) => {
                let x = self.value(*input);
                let dx = x.zip_map(up, |v, u| if v > 0.0 { u } else { 0.0 })?;
                self.accumulate(*input, dx);
            }
            Op::MaxPool2d { input, argmax } => {
                let mut dx = Tensor::zeros_like(self.value(*input));
                for (&idx, &u) in argmax.iter().zip(up.data()) {
                    dx.data_mut()[idx] += u;
                }
                self.accumulate(*input, dx);
            }
            Op::AvgPool2d { input, kernel } => {
                let dx = kernels::avg_pool2d_backward(self.value(*input).shape(), up, *kernel);
                self.accumulate(*input, dx);
            }
            Op::ScaleShift {
                input,
                scale,
                shift,
            } => {
                let x = self.value(*input);
                let (_, c, inner) = kernels::channel_layout(x.shape())?;
                let s = self.value(*scale).clone();
                let mut ds = vec![0.0; c];
                let mut db = vec![0.0; c];
                let mut dx = Tensor::zeros_like(x);
                for (i, ((&xv, &u), d)) in x.data().iter().zip(up.data()).zip(dx.data_mut()).enumerate() {
                    let ch = (i / inner) % c;
                    ds[ch] += u * xv;
                    db[ch] += u;
                    *d = u * s.data()[ch];
                }
                self.accumulate(*input, dx);
                self.accumulate(*scale, Tensor::new(s.shape(), ds)?);
                let shape = self.value(*shift).shape().to_vec();
                self.accumulate(*shift, Tensor::new(&shape, db)?);
            }
            Op::Add(a, b) => {
                self.accumulate(*a, up.clone());
                self.accumulate(*b, up.clone());
            }
            Op::Reshape(input) => {
                let shape = self.value(*input).shape().to_vec();
                self.accumulate(*input, up.clone().reshape(&shape)?);
            }
            Op::Sum(input) => {
                let g = Tensor::full(self.value(*input).shape(), up.data()[0]);
                self.accumulate(*input, g);
            }
            Op::HalfSumSquares(input) => {
                let u = up.data()[0];
                let g = self.value(*input).map(|v| v * u);
                self.accumulate(*input, g);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = probs.shape()[1];
                let scale = up.data()[0] / labels.len() as f64;
                let mut g = probs.clone();
                for (row, &y) in g.data_mut().chunks_mut(k).zip(labels) {
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                self.accumulate(*logits, g);
            }
            Op::Binarize { input, ste, .. } => {
                let w = self.value(*input);
                let g = w.zip_map(up, |wv, u| u * ste_grad_factor(wv, *ste))?;
                self.accumulate(*input, g);
            }
            Op::ActQuant { input, state } => {
                let a = self.value(*input);
                let g = a.zip_map(up, |av, u| u * soft_quantize_grad(av, state))?;
                self.accumulate(*input, g);
            }
        }
        Ok(())
    }
}
