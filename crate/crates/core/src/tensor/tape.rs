use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::ops::{self, ConvGeom, Padding, BN_EPSILON, BN_MOMENTUM};
use super::{matmul, Result, Scalar, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u64,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch-norm statistics used in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    initialized: bool,
}

impl<T: Scalar> RunningStats<T> {
    /// Zero mean, unit variance.
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            initialized: true,
        }
    }

    /// Statistics that must be filled by a training pass before eval use.
    pub fn uninitialized(channels: usize) -> Self {
        Self {
            initialized: false,
            ..Self::new(channels)
        }
    }

    pub fn from_parts(mean: Vec<T>, var: Vec<T>) -> Self {
        Self {
            mean,
            var,
            initialized: true,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn update(&mut self, batch_mean: &[T], batch_var: &[T]) {
        let keep = T::from_f64(BN_MOMENTUM);
        let take = T::one() - keep;
        if !self.initialized {
            self.mean.copy_from_slice(batch_mean);
            self.var.copy_from_slice(batch_var);
            self.initialized = true;
            return;
        }
        for (r, &m) in self.mean.iter_mut().zip(batch_mean) {
            *r = keep * *r + take * m;
        }
        for (r, &v) in self.var.iter_mut().zip(batch_var) {
            *r = keep * *r + take * v;
        }
    }
}

enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        dims: (usize, usize, usize),
        train: bool,
    },
    Relu {
        input: Var,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Affine {
        input: Var,
        weight: Var,
        bias: Var,
        dims: (usize, usize, usize),
    },
    Reshape {
        input: Var,
    },
    ConcatCols {
        parts: Vec<(Var, usize)>,
        rows: usize,
    },
    SigmoidCe {
        logits: Var,
        labels: Vec<T>,
        batch: usize,
    },
    SumSquares {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv1d",
            Op::MaxPool { .. } => "maxpool1d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu { .. } => "relu",
            Op::Add { .. } => "add",
            Op::Affine { .. } => "affine",
            Op::Reshape { .. } => "reshape",
            Op::ConcatCols { .. } => "concat",
            Op::SigmoidCe { .. } => "sigmoid_ce_loss",
            Op::SumSquares { .. } => "sum_squares",
            Op::Sum { .. } => "sum",
            Op::Scale { .. } => "scale",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
    label: Option<String>,
}

/// Append-only record of a forward computation.
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn parameter(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        let v = self.leaf(value, true);
        self.nodes[v.index].label = Some(name.into());
        v
    }

    /// Attaches a diagnostic label to a recorded value.
    pub fn set_label(&mut self, var: Var, label: impl Into<String>) {
        let i = self.index_of(var).expect("variable from another tape");
        self.nodes[i].label = Some(label.into());
    }

    /// Recorded value of `var`.
    ///
    /// # Panics
    /// If `var` was created by a different tape.
    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[self.index_of(var).expect("variable from another tape")].value
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any reached `var`.
    pub fn grad(&self, var: Var) -> Option<&[T]> {
        self.nodes[self.index_of(var).expect("variable from another tape")]
            .grad
            .as_deref()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[self.index_of(var).expect("variable from another tape")].requires_grad
    }

    /// First recorded value containing NaN or an infinity, described as
    /// `"#index op (label)"`.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            (!n.value.is_finite()).then(|| match &n.label {
                Some(l) => format!("#{i} {} ({l})", n.op.name()),
                None => format!("#{i} {}", n.op.name()),
            })
        })
    }

    fn index_of(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(TensorError::NotOnTape(var.index));
        }
        Ok(var.index)
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
            label: None,
        });
        Var {
            index: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index].requires_grad)
    }

    /// 1D convolution along the last axis.
    ///
    /// `input` is `[c_in, len]` or `[batch, c_in, len]`, `weight` is
    /// `[c_out, c_in, kernel]`, `bias` is `[c_out]`.
    pub fn conv1d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        const OP: &str = "conv1d";
        let ii = self.index_of(input)?;
        let wi = self.index_of(weight)?;
        if let Some(b) = bias {
            self.index_of(b)?;
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: OP,
                detail: "stride must be at least 1".into(),
            });
        }
        let xs = self.nodes[ii].value.shape().to_vec();
        let ws = self.nodes[wi].value.shape().to_vec();
        let (batch, c_in, len) = match xs.as_slice() {
            [c, l] => (1, *c, *l),
            [b, c, l] => (*b, *c, *l),
            _ => {
                return Err(TensorError::Shape {
                    op: OP,
                    detail: format!("input must be [C, L] or [B, C, L], got {xs:?}"),
                })
            }
        };
        let [c_out, w_in, kernel] = ws.as_slice() else {
            return Err(TensorError::Shape {
                op: OP,
                detail: format!("weight must be [C_out, C_in, K], got {ws:?}"),
            });
        };
        let (c_out, kernel) = (*c_out, *kernel);
        if *w_in != c_in {
            return Err(TensorError::Shape {
                op: OP,
                detail: format!("input has {c_in} channels but weight expects {w_in}"),
            });
        }
        if let Some(b) = bias {
            let bs = self.nodes[b.index].value.shape();
            if bs != [c_out] {
                return Err(TensorError::Shape {
                    op: OP,
                    detail: format!("bias must be [{c_out}], got {bs:?}"),
                });
            }
        }
        let (out_len, pad_left) = match padding {
            Padding::Same => ops::same_padding(len, kernel, stride),
            Padding::Valid => match ops::conv_output_len(len, kernel, stride, padding) {
                Some(l) => (l, 0),
                None => {
                    return Err(TensorError::Shape {
                        op: OP,
                        detail: format!("kernel {kernel} longer than input length {len}"),
                    })
                }
            },
        };
        let geom = ConvGeom {
            batch,
            c_in,
            len,
            c_out,
            kernel,
            stride,
            pad_left,
            out_len,
        };
        let out = ops::conv_forward(
            self.nodes[ii].value.data(),
            self.nodes[wi].value.data(),
            bias.map(|b| self.nodes[b.index].value.data()),
            &geom,
        );
        let shape = if xs.len() == 2 {
            vec![c_out, out_len]
        } else {
            vec![batch, c_out, out_len]
        };
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            rg,
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    /// Ceil-mode max pooling along the last axis.
    pub fn maxpool1d(&mut self, input: Var, size: usize, stride: usize) -> Result<Var> {
        let ii = self.index_of(input)?;
        if size == 0 || stride == 0 {
            return Err(TensorError::Invalid {
                op: "maxpool1d",
                detail: format!("size {size} and stride {stride} must be at least 1"),
            });
        }
        let x = &self.nodes[ii].value;
        let shape = x.shape().to_vec();
        let len = *shape.last().unwrap();
        let rows = x.len() / len;
        let (out, argmax) = ops::maxpool_forward(x.data(), rows, len, size, stride);
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = ops::pool_output_len(len, stride);
        let rg = self.nodes[ii].requires_grad;
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            rg,
            Op::MaxPool { input, argmax },
        ))
    }

    fn bn_dims(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        const OP: &str = "batchnorm";
        let ii = self.index_of(input)?;
        let gi = self.index_of(gamma)?;
        let bi = self.index_of(beta)?;
        let dims = match self.nodes[ii].value.shape() {
            &[b, c, l] => (b, c, l),
            &[b, c] => (b, c, 1),
            s => {
                return Err(TensorError::Shape {
                    op: OP,
                    detail: format!("input must be [B, C, L], got {s:?}"),
                })
            }
        };
        for idx in [gi, bi] {
            if self.nodes[idx].value.shape() != [dims.1] {
                return Err(TensorError::Shape {
                    op: OP,
                    detail: format!(
                        "affine parameters must be [{}], got {:?}",
                        dims.1,
                        self.nodes[idx].value.shape()
                    ),
                });
            }
        }
        Ok(dims)
    }

    /// Batch normalization over the batch and time axes of `[B, C, L]`.
    ///
    /// Train mode normalizes with batch statistics and folds them into
    /// `stats`; eval mode reads `stats` only.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        match mode {
            Mode::Train => self.batch_norm_train(input, gamma, beta, stats),
            Mode::Eval => self.batch_norm_eval(input, gamma, beta, stats),
        }
    }

    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
    ) -> Result<Var> {
        let dims = self.bn_dims(input, gamma, beta)?;
        let (b, c, l) = dims;
        if b * l < 2 {
            return Err(TensorError::Invalid {
                op: "batchnorm",
                detail: format!("train mode needs at least 2 values per channel, got {}", b * l),
            });
        }
        if stats.channels() != c {
            return Err(TensorError::LengthMismatch {
                what: "running statistics".into(),
                got: stats.channels(),
                expected: c,
            });
        }
        let out = ops::batchnorm_train(
            self.nodes[input.index].value.data(),
            dims,
            self.nodes[gamma.index].value.data(),
            self.nodes[beta.index].value.data(),
        );
        stats.update(&out.mean, &out.var);
        let shape = self.nodes[input.index].value.shape().to_vec();
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            Tensor::new(&shape, out.y)?,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat: out.xhat,
                inv_std: out.inv_std,
                dims,
                train: true,
            },
        ))
    }

    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats<T>,
    ) -> Result<Var> {
        let dims = self.bn_dims(input, gamma, beta)?;
        let (b, c, l) = dims;
        if !stats.is_initialized() {
            return Err(TensorError::UninitializedStats);
        }
        if stats.channels() != c {
            return Err(TensorError::LengthMismatch {
                what: "running statistics".into(),
                got: stats.channels(),
                expected: c,
            });
        }
        let inv_std: Vec<T> = stats
            .var
            .iter()
            .map(|v| T::from_f64(1.0 / (v.as_f64() + BN_EPSILON).sqrt()))
            .collect();
        let x = self.nodes[input.index].value.data();
        let g = self.nodes[gamma.index].value.data();
        let bt = self.nodes[beta.index].value.data();
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * l;
                for i in off..off + l {
                    let h = (x[i] - stats.mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    y[i] = g[ci] * h + bt[ci];
                }
            }
        }
        let shape = self.nodes[input.index].value.shape().to_vec();
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            Tensor::new(&shape, y)?,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                dims,
                train: false,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let ii = self.index_of(input)?;
        let x = &self.nodes[ii].value;
        let y: Vec<T> = x.data().iter().map(|&v| if v < T::zero() { T::zero() } else { v }).collect();
        let shape = x.shape().to_vec();
        let rg = self.nodes[ii].requires_grad;
        Ok(self.push(Tensor::new(&shape, y)?, rg, Op::Relu { input }))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let li = self.index_of(lhs)?;
        let ri = self.index_of(rhs)?;
        let (a, b) = (&self.nodes[li].value, &self.nodes[ri].value);
        if a.shape() != b.shape() {
            return Err(TensorError::Shape {
                op: "add",
                detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
            });
        }
        let y: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let shape = a.shape().to_vec();
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(Tensor::new(&shape, y)?, rg, Op::Add { lhs, rhs }))
    }

    /// `input [B, N] . weight[M, N]^T + bias[M]`
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "affine";
        let ii = self.index_of(input)?;
        let wi = self.index_of(weight)?;
        let bi = self.index_of(bias)?;
        let (xs, ws, bs) = (
            self.nodes[ii].value.shape(),
            self.nodes[wi].value.shape(),
            self.nodes[bi].value.shape(),
        );
        let (&[batch, n], &[m, wn]) = (xs, ws) else {
            return Err(TensorError::Shape {
                op: OP,
                detail: format!("expected [B, N] input and [M, N] weight, got {xs:?} and {ws:?}"),
            });
        };
        if wn != n || bs != [m] {
            return Err(TensorError::Shape {
                op: OP,
                detail: format!("input {xs:?}, weight {ws:?}, bias {bs:?} do not agree"),
            });
        }
        let mut y = vec![T::zero(); batch * m];
        let bias_data = self.nodes[bi].value.data();
        for row in y.chunks_exact_mut(m) {
            row.copy_from_slice(bias_data);
        }
        matmul(
            batch,
            n,
            m,
            self.nodes[ii].value.data(),
            false,
            self.nodes[wi].value.data(),
            true,
            T::one(),
            &mut y,
        );
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            Tensor::new(&[batch, m], y)?,
            rg,
            Op::Affine {
                input,
                weight,
                bias,
                dims: (batch, n, m),
            },
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let ii = self.index_of(input)?;
        let value = self.nodes[ii].value.clone().reshape(shape)?;
        let rg = self.nodes[ii].requires_grad;
        Ok(self.push(value, rg, Op::Reshape { input }))
    }

    /// Concatenates `[B, n_i]` matrices along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pi = self.index_of(p)?;
            let &[r, w] = self.nodes[pi].value.shape() else {
                return Err(TensorError::Shape {
                    op: "concat",
                    detail: format!("parts must be [B, N], got {:?}", self.nodes[pi].value.shape()),
                });
            };
            if *rows.get_or_insert(r) != r {
                return Err(TensorError::Shape {
                    op: "concat",
                    detail: "row counts differ".into(),
                });
            }
            widths.push((p, w));
        }
        let Some(rows) = rows else {
            return Err(TensorError::Invalid {
                op: "concat",
                detail: "nothing to concatenate".into(),
            });
        };
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, w) in &widths {
                out.extend_from_slice(&self.nodes[p.index].value.data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(&[rows, total], out)?,
            rg,
            Op::ConcatCols {
                parts: widths,
                rows,
            },
        ))
    }

    /// Sigmoid cross-entropy summed over heads and averaged over the batch.
    pub fn sigmoid_ce_loss(&mut self, logits: Var, labels: &Tensor<T>) -> Result<Var> {
        const OP: &str = "sigmoid_ce_loss";
        let li = self.index_of(logits)?;
        let z = &self.nodes[li].value;
        let &[batch, heads] = z.shape() else {
            return Err(TensorError::Shape {
                op: OP,
                detail: format!("logits must be [B, H], got {:?}", z.shape()),
            });
        };
        if labels.shape() != z.shape() {
            return Err(TensorError::Shape {
                op: OP,
                detail: format!("labels {:?} vs logits {:?}", labels.shape(), z.shape()),
            });
        }
        debug_assert!(heads >= 1);
        if let Some((index, v)) = labels
            .data()
            .iter()
            .enumerate()
            .find(|(_, &v)| v != T::zero() && v != T::one())
        {
            return Err(TensorError::NonBinaryLabel {
                index,
                value: v.as_f64(),
            });
        }
        let total: f64 = z
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&zi, &yi)| ops::sigmoid_ce_element(zi.as_f64(), yi.as_f64()))
            .sum();
        let rg = self.nodes[li].requires_grad;
        Ok(self.push(
            Tensor::scalar(T::from_f64(total / batch as f64)),
            rg,
            Op::SigmoidCe {
                logits,
                labels: labels.data().to_vec(),
                batch,
            },
        ))
    }

    /// `sum(x^2)` as a scalar.
    pub fn sum_squares(&mut self, input: Var) -> Result<Var> {
        let ii = self.index_of(input)?;
        let s: f64 = self.nodes[ii]
            .value
            .data()
            .iter()
            .map(|v| v.as_f64() * v.as_f64())
            .sum();
        let rg = self.nodes[ii].requires_grad;
        Ok(self.push(Tensor::scalar(T::from_f64(s)), rg, Op::SumSquares { input }))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let ii = self.index_of(input)?;
        let s: f64 = self.nodes[ii].value.data().iter().map(|v| v.as_f64()).sum();
        let rg = self.nodes[ii].requires_grad;
        Ok(self.push(Tensor::scalar(T::from_f64(s)), rg, Op::Sum { input }))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let ii = self.index_of(input)?;
        let x = &self.nodes[ii].value;
        let y: Vec<T> = x.data().iter().map(|&v| v * factor).collect();
        let shape = x.shape().to_vec();
        let rg = self.nodes[ii].requires_grad;
        Ok(self.push(Tensor::new(&shape, y)?, rg, Op::Scale { input, factor }))
    }

    /// Populates gradients of `loss` with respect to every recorded value
    /// that requires them. Gradients from an earlier call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.index_of(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[li].value.shape().to_vec()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[li].requires_grad {
            return Ok(());
        }
        self.nodes[li].grad = Some(vec![T::one()]);
        for i in (0..=li).rev() {
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            propagate(node, &grad, before);
            rest[0].grad = Some(grad);
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(nodes: &mut [Node<T>], var: Var, grad: Vec<T>) {
    let node = &mut nodes[var.index];
    if !node.requires_grad {
        return;
    }
    debug_assert_eq!(grad.len(), node.value.len());
    match node.grad.as_mut() {
        Some(g) => g.iter_mut().zip(&grad).for_each(|(a, &b)| *a += b),
        None => node.grad = Some(grad),
    }
}

fn propagate<T: Scalar>(node: &Node<T>, grad: &[T], nodes: &mut [Node<T>]) {
    match &node.op {
        Op::Leaf => {}
        Op::Conv {
            input,
            weight,
            bias,
            geom,
        } => {
            let need = (
                nodes[input.index].requires_grad,
                nodes[weight.index].requires_grad,
                bias.is_some_and(|b| nodes[b.index].requires_grad),
            );
            let g = ops::conv_backward(
                nodes[input.index].value.data(),
                nodes[weight.index].value.data(),
                grad,
                geom,
                need,
            );
            if let Some(dx) = g.dx {
                accumulate(nodes, *input, dx);
            }
            if let Some(dw) = g.dw {
                accumulate(nodes, *weight, dw);
            }
            if let (Some(b), Some(db)) = (bias, g.dbias) {
                accumulate(nodes, *b, db);
            }
        }
        Op::MaxPool { input, argmax } => {
            if nodes[input.index].requires_grad {
                let mut dx = vec![T::zero(); nodes[input.index].value.len()];
                for (&a, &g) in argmax.iter().zip(grad) {
                    dx[a] += g;
                }
                accumulate(nodes, *input, dx);
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            dims,
            train,
        } => {
            let (b, c, l) = *dims;
            let gamma_v = nodes[gamma.index].value.data().to_vec();
            if *train {
                let (dx, dg, db) = ops::batchnorm_train_backward(grad, xhat, inv_std, &gamma_v, *dims);
                accumulate(nodes, *input, dx);
                accumulate(nodes, *gamma, dg);
                accumulate(nodes, *beta, db);
            } else {
                let mut dx = vec![T::zero(); grad.len()];
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * l;
                        let s = gamma_v[ci] * inv_std[ci];
                        for i in off..off + l {
                            dx[i] = grad[i] * s;
                            dg[ci] += grad[i] * xhat[i];
                            db[ci] += grad[i];
                        }
                    }
                }
                accumulate(nodes, *input, dx);
                accumulate(nodes, *gamma, dg);
                accumulate(nodes, *beta, db);
            }
        }
        Op::Relu { input } => {
            let dx = node
                .value
                .data()
                .iter()
                .zip(grad)
                .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
                .collect();
            accumulate(nodes, *input, dx);
        }
        Op::Add { lhs, rhs } => {
            accumulate(nodes, *lhs, grad.to_vec());
            accumulate(nodes, *rhs, grad.to_vec());
        }
        Op::Affine {
            input,
            weight,
            bias,
            dims,
        } => {
            let (batch, n, m) = *dims;
            if nodes[input.index].requires_grad {
                let mut dx = vec![T::zero(); batch * n];
                matmul(batch, m, n, grad, false, nodes[weight.index].value.data(), false, T::zero(), &mut dx);
                accumulate(nodes, *input, dx);
            }
            if nodes[weight.index].requires_grad {
                let mut dw = vec![T::zero(); m * n];
                matmul(m, batch, n, grad, true, nodes[input.index].value.data(), false, T::zero(), &mut dw);
                accumulate(nodes, *weight, dw);
            }
            let mut db = vec![T::zero(); m];
            for row in grad.chunks_exact(m) {
                db.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
            }
            accumulate(nodes, *bias, db);
        }
        Op::Reshape { input } => accumulate(nodes, *input, grad.to_vec()),
        Op::ConcatCols { parts, rows } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut col = 0;
            for &(p, w) in parts {
                let mut g = Vec::with_capacity(rows * w);
                for r in 0..*rows {
                    g.extend_from_slice(&grad[r * total + col..r * total + col + w]);
                }
                accumulate(nodes, p, g);
                col += w;
            }
        }
        Op::SigmoidCe {
            logits,
            labels,
            batch,
        } => {
            let scale = grad[0].as_f64() / *batch as f64;
            let dz = nodes[logits.index]
                .value
                .data()
                .iter()
                .zip(labels)
                .map(|(&z, &y)| T::from_f64((ops::sigmoid(z.as_f64()) - y.as_f64()) * scale))
                .collect();
            accumulate(nodes, *logits, dz);
        }
        Op::SumSquares { input } => {
            let two_g = grad[0] + grad[0];
            let dx = nodes[input.index].value.data().iter().map(|&x| two_g * x).collect();
            accumulate(nodes, *input, dx);
        }
        Op::Sum { input } => {
            let n = nodes[input.index].value.len();
            accumulate(nodes, *input, vec![grad[0]; n]);
        }
        Op::Scale { input, factor } => {
            let dx = grad.iter().map(|&g| g * *factor).collect();
            accumulate(nodes, *input, dx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn conv_valid_sliding_dot_product() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[1, 1, 2], &[1.0, 1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv1d(x, w, Some(b), 1, Padding::Valid).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3]);
        assert_eq!(tape.value(y).data(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn conv_identity_and_zero_kernels() {
        let data = [0.5, -1.0, 2.0, 7.0, 3.0, -4.0];
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &data));
        let eye = tape.constant(t(&[2, 2, 1], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.conv1d(x, eye, None, 1, Padding::Same).unwrap();
        assert_eq!(tape.value(y).data(), &data);

        let zero = tape.constant(Tensor::zeros(&[2, 2, 5]));
        let b = tape.constant(t(&[2], &[1.5, -2.0]));
        let y = tape.conv1d(x, zero, Some(b), 1, Padding::Same).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, 1.5, 1.5, -2.0, -2.0, -2.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[3, 10]));
        let w = tape.constant(Tensor::zeros(&[4, 2, 3]));
        let err = tape.conv1d(x, w, None, 1, Padding::Same).unwrap_err();
        assert!(matches!(err, TensorError::Shape { op: "conv1d", .. }));
    }

    #[test]
    fn maxpool_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 5], &[3.0, 1.0, 4.0, 1.0, 5.0]));
        let y = tape.maxpool1d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0, 5.0]);

        let c = tape.constant(Tensor::full(&[1, 7], 2.5));
        let y = tape.maxpool1d(c, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5; 4]);

        let mut len = 2500;
        let mut v = tape.constant(Tensor::zeros(&[1, 2500]));
        for _ in 0..8 {
            v = tape.maxpool1d(v, 2, 2).unwrap();
            len = tape.value(v).shape()[1];
        }
        assert_eq!(len, 10);
    }

    #[test]
    fn maxpool_gradient_goes_to_first_max() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 4], &[2.0, 2.0, 1.0, 3.0]), true);
        let y = tape.maxpool1d(x, 2, 2).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn batchnorm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(t(&[1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));

        let mut stats = RunningStats::new(1);
        let c = tape.constant(Tensor::full(&[2, 1, 3], 4.0));
        let y = tape.batch_norm(c, g, b, &mut stats, Mode::Train).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let mut stats = RunningStats::new(1);
        let x = tape.constant(t(&[1, 1, 2], &[1.0, 3.0]));
        let y = tape.batch_norm(x, g, b, &mut stats, Mode::Train).unwrap();
        let scale = 1.0 / (1.0 + BN_EPSILON).sqrt();
        assert!((tape.value(y).data()[0] + scale).abs() < 1e-12);
        assert!((tape.value(y).data()[1] - scale).abs() < 1e-12);
        // running stats moved 10% of the way toward mean 2, variance 1
        assert!((stats.mean[0] - 0.2).abs() < 1e-12);
        assert!((stats.var[0] - 1.0).abs() < 1e-12);

        let stats = RunningStats::new(1);
        let x = tape.constant(t(&[1, 1, 3], &[-1.0, 0.5, 8.0]));
        let y = tape.batch_norm_eval(x, g, b, &stats).unwrap();
        for (a, e) in tape.value(y).data().iter().zip([-1.0, 0.5, 8.0]) {
            assert!((a - e).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_rejects_bad_modes() {
        let mut tape = Tape::new();
        let g = tape.constant(t(&[1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let x = tape.constant(t(&[1, 1, 1], &[1.0]));
        let mut stats = RunningStats::new(1);
        assert!(tape.batch_norm_train(x, g, b, &mut stats).is_err());
        let fresh = RunningStats::uninitialized(1);
        assert_eq!(
            tape.batch_norm_eval(x, g, b, &fresh).unwrap_err(),
            TensorError::UninitializedStats
        );
    }

    #[test]
    fn relu_values_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]), true);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let x = tape.leaf(t(&[2], &[-1.0, 2.0]), true);
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);

        let n = tape.constant(t(&[4], &[-3.0, -0.1, -7.0, -1e-9]));
        let y = tape.relu(n).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affine_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[1, 2], &[3.0, 4.0]));
        let b = tape.constant(t(&[1], &[1.0]));
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[12.0]);

        let x = tape.constant(t(&[2, 2], &[5.0, -6.0, 7.0, 8.0]));
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zb = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.affine(x, eye, zb).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, -6.0, 7.0, 8.0]);

        let z = tape.constant(Tensor::zeros(&[3, 2]));
        let bias = tape.constant(t(&[2], &[0.25, -1.0]));
        let y = tape.affine(z, eye, bias).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, -1.0, 0.25, -1.0, 0.25, -1.0]);

        let bad = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.affine(x, bad, zb).is_err());
    }

    #[test]
    fn sigmoid_ce_examples() {
        let mut tape = Tape::new();
        let z = tape.leaf(t(&[1, 3], &[0.0, 0.0, 0.0]), true);
        let loss = tape
            .sigmoid_ce_loss(z, &t(&[1, 3], &[1.0, 0.0, 1.0]))
            .unwrap();
        assert!((tape.value(loss).data()[0] - 3.0 * 2f64.ln()).abs() < 1e-12);

        let z1 = tape.leaf(t(&[1, 1], &[1.0]), true);
        let loss = tape.sigmoid_ce_loss(z1, &t(&[1, 1], &[0.0])).unwrap();
        assert!((tape.value(loss).data()[0] - 1.3133).abs() < 1e-4);

        let z = tape.leaf(t(&[1, 1], &[0.0]), true);
        let loss = tape.sigmoid_ce_loss(z, &t(&[1, 1], &[1.0])).unwrap();
        tape.backward(loss).unwrap();
        assert!((tape.grad(z).unwrap()[0] + 0.5).abs() < 1e-15);

        let z = tape.leaf(t(&[1, 1], &[30.0]), true);
        let loss = tape.sigmoid_ce_loss(z, &t(&[1, 1], &[1.0])).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(z).unwrap()[0].abs() < 1e-9);

        let z = tape.leaf(t(&[1, 1], &[0.0]), true);
        let err = tape.sigmoid_ce_loss(z, &t(&[1, 1], &[0.5])).unwrap_err();
        assert!(matches!(err, TensorError::NonBinaryLabel { .. }));
    }

    #[test]
    fn ce_gradient_is_mean_over_batch() {
        let mut tape = Tape::new();
        let z = tape.leaf(t(&[2, 1], &[0.0, 0.0]), true);
        let loss = tape.sigmoid_ce_loss(z, &t(&[2, 1], &[1.0, 0.0])).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(z).unwrap(), &[-0.25, 0.25]);
    }

    #[test]
    fn backward_rejects_foreign_and_non_scalar() {
        let mut a = Tape::<f64>::new();
        let mut b = Tape::<f64>::new();
        let x = a.leaf(t(&[1], &[1.0]), true);
        let _ = b.leaf(t(&[1], &[1.0]), true);
        assert_eq!(b.backward(x), Err(TensorError::NotOnTape(0)));
        let v = a.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(a.backward(v), Err(TensorError::NonScalarLoss(_))));
        let y = b.leaf(t(&[1], &[0.0]), true);
        assert!(a.relu(y).is_err());
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, -2.0]), true);
        let y = tape.add(x, x).unwrap();
        let s = tape.sum_squares(y).unwrap();
        tape.backward(s).unwrap();
        // d/dx sum((2x)^2) = 8x
        assert_eq!(tape.grad(x).unwrap(), &[8.0, -16.0]);
    }

    #[test]
    fn concat_and_reshape_route_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 1], &[1.0, 2.0]), true);
        let b = tape.leaf(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]), true);
        let c = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let r = tape.reshape(c, &[6]).unwrap();
        let w = tape.scale(r, 2.0).unwrap();
        let s = tape.sum_squares(w).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[8.0, 16.0]);
        assert_eq!(tape.grad(b).unwrap(), &[24.0, 32.0, 40.0, 48.0]);
    }

    #[test]
    fn non_finite_values_are_located() {
        let mut tape = Tape::new();
        let x = tape.parameter("stem.weight", t(&[2], &[1.0, f64::NAN]));
        let _ = tape.relu(x).unwrap();
        assert_eq!(tape.first_non_finite().unwrap(), "#0 leaf (stem.weight)");
    }
}
