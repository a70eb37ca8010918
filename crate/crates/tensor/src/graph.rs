//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every op appends a node holding its output value and whatever it needs for
//! the backward pass. A node can only reference nodes created before it, so
//! index order is a topological order and `backward` walks it in reverse,
//! visiting each node once.

use crate::error::{arg_err, shape_err, Result, TensorError};
use crate::ops::{self, BnSaved, ConvSpec, LnSaved, PoolSpec};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: LnSaved,
    },
    Pool {
        x: Var,
        spec: PoolSpec,
        argmax: Vec<usize>,
    },
    Softmax(Var),
    Gelu(Var),
    Relu(Var),
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Permute {
        x: Var,
        src: Vec<usize>,
    },
    Reshape(Var),
    Upsample {
        x: Var,
        factor: usize,
    },
    GlobalAvgPool(Var),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Tensor,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn checked(op: &'static str, t: Tensor) -> Result<Tensor> {
        if t.is_finite() {
            Ok(t)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// A trainable leaf; gradients flow to it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient (inputs, frozen buffers).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let v = Self::checked("add", v)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    /// `x[..., C] + b[C]`, broadcasting `b` over every leading index.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = bv.numel();
        if bv.rank() != 1 || xv.shape().last() != Some(&c) {
            return Err(shape_err(
                "add_bias",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bias) in row.iter_mut().zip(bv.data()) {
                *o += bias;
            }
        }
        let out = Self::checked("add_bias", out)?;
        Ok(self.push(out, Op::AddBias(x, b), &[x, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let v = Self::checked("mul", v)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise product with a constant tensor (dropout masks, fixed readouts).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let v = self.value(x).zip_map(&c, |a, b| a * b)?;
        let v = Self::checked("mul_const", v)?;
        Ok(self.push(v, Op::MulConst(x, c), &[x]))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let v = Self::checked("scale", self.value(x).map(|a| a * k))?;
        Ok(self.push(v, Op::Scale(x, k), &[x]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).t()?;
        Ok(self.push(v, Op::Transpose(x), &[x]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let v = ops::conv2d(
            self.value(x),
            &spec,
            self.value(w),
            b.map(|b| self.value(b)),
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(v, Op::Conv2d { x, w, b, spec }, &inputs))
    }

    /// Batch normalization over channel axis 1 using the statistics of `x`.
    /// Returns the output and the biased batch mean and variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (y, saved, mean, var) =
            ops::batch_norm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let out = self.push(
            y,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                saved,
            },
            &[x, gamma, beta],
        );
        Ok((out, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let stats = ops::NormStats {
            mean: mean.to_vec(),
            var: var.to_vec(),
            eps,
            scale: Some(self.value(gamma).data().to_vec()),
            shift: Some(self.value(beta).data().to_vec()),
        };
        let y = ops::batch_norm(xv, &stats)?;
        let plain = ops::batch_norm(
            xv,
            &ops::NormStats {
                scale: None,
                shift: None,
                ..stats
            },
        )?;
        let inv_std = var
            .iter()
            .map(|&v| {
                let d = (v + eps).sqrt();
                if d > 0.0 {
                    1.0 / d
                } else {
                    0.0
                }
            })
            .collect();
        Ok(self.push(
            y,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat: plain.into_data(),
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (y, saved) = ops::layer_norm_saved(
            self.value(x),
            Some(self.value(gamma)),
            Some(self.value(beta)),
            eps,
        )?;
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn pool2d(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let (y, argmax) = ops::pool2d(self.value(x), &spec)?;
        Ok(self.push(y, Op::Pool { x, spec, argmax }, &[x]))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let y = Self::checked("softmax", ops::softmax(self.value(x)))?;
        Ok(self.push(y, Op::Softmax(x), &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let y = Self::checked("gelu", ops::gelu(self.value(x)))?;
        Ok(self.push(y, Op::Gelu(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = ops::relu(self.value(x));
        Ok(self.push(y, Op::Relu(x), &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat(&vals, axis)?;
        Ok(self.push(
            y,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat_channels(&vals)?;
        Ok(self.push(
            y,
            Op::Concat {
                xs: xs.to_vec(),
                axis: 1,
            },
            xs,
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let y = ops::narrow(self.value(x), axis, start, len)?;
        Ok(self.push(y, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let y = ops::gather_rows(self.value(x), &rows)?;
        Ok(self.push(y, Op::GatherRows { x, rows }, &[x]))
    }

    /// Output element `i` takes the value of flat input element `src[i]`.
    pub fn permute(&mut self, x: Var, src: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if src.iter().any(|&s| s >= xv.numel()) {
            return Err(arg_err("permute", "source index out of range"));
        }
        let y = Tensor::new(shape, src.iter().map(|&s| xv.data()[s]).collect())?;
        Ok(self.push(y, Op::Permute { x, src }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x), &[x]))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let y = ops::upsample_nearest(self.value(x), factor)?;
        Ok(self.push(y, Op::Upsample { x, factor }, &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        Ok(self.push(y, Op::Sum(x), &[x]))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, via log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.dim(0) != labels.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {:?} vs {} labels", lv.shape(), labels.len()),
            ));
        }
        let c = lv.dim(1);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(arg_err(
                "cross_entropy",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let lse = ops::logsumexp_rows(lv);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| lse[i] - lv.data()[i * c + l])
            .sum::<f64>()
            / labels.len() as f64;
        let probs = ops::softmax(lv);
        let y = Self::checked("cross_entropy", Tensor::scalar(loss))?;
        Ok(self.push(
            y,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Back-propagates from a scalar `loss` through every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, dx) in self.node_backward(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&dx),
                    slot => *slot = Some(dx),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddBias(x, b) => {
                let c = val(*b).numel();
                let mut db = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![(*x, g.clone()), (*b, Tensor::from_parts(vec![c], db))]
            }
            Op::Mul(a, b) => {
                let da = g.zip_map(val(*b), |x, y| x * y).unwrap();
                let db = g.zip_map(val(*a), |x, y| x * y).unwrap();
                vec![(*a, da), (*b, db)]
            }
            Op::MulConst(x, c) => vec![(*x, g.zip_map(c, |a, b| a * b).unwrap())],
            Op::Scale(x, k) => vec![(*x, g.map(|v| v * k))],
            Op::MatMul(a, b) => {
                let (da, db) = ops::matmul_backward(val(*a), val(*b), g);
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose(x) => vec![(*x, g.t().unwrap())],
            Op::Conv2d { x, w, b, spec } => {
                let cg = ops::conv2d_backward(val(*x), spec, val(*w), g);
                let mut out = vec![(*x, cg.dx), (*w, cg.dw)];
                if let Some(b) = b {
                    out.push((*b, cg.db));
                }
                out
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                saved,
            } => {
                let (dx, dg, db) = ops::batch_norm_train_backward(saved, val(*gamma), g);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (outer, c, inner) = ops::channel_layout(g.shape());
                let mut dx = vec![0.0; g.numel()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                let gv = val(*gamma).data();
                for o in 0..outer {
                    for ch in 0..c {
                        for i in (o * c + ch) * inner..(o * c + ch + 1) * inner {
                            dx[i] = g.data()[i] * gv[ch] * inv_std[ch];
                            dg[ch] += g.data()[i] * xhat[i];
                            db[ch] += g.data()[i];
                        }
                    }
                }
                vec![
                    (*x, Tensor::from_parts(g.shape().to_vec(), dx)),
                    (*gamma, Tensor::from_parts(vec![c], dg)),
                    (*beta, Tensor::from_parts(vec![c], db)),
                ]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved,
            } => {
                let (dx, dg, db) = ops::layer_norm_backward(saved, Some(val(*gamma)), g);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Pool { x, spec, argmax } => {
                vec![(*x, ops::pool2d_backward(val(*x).shape(), spec, argmax, g))]
            }
            Op::Softmax(x) => vec![(*x, ops::softmax_backward(&node.value, g))],
            Op::Gelu(x) => vec![(*x, ops::gelu_backward(val(*x), g))],
            Op::Relu(x) => vec![(
                *x,
                g.zip_map(val(*x), |d, v| if v > 0.0 { d } else { 0.0 })
                    .unwrap(),
            )],
            Op::Concat { xs, axis } => {
                let mut start = 0;
                xs.iter()
                    .map(|&v| {
                        let len = val(v).dim(*axis);
                        let part = ops::narrow(g, *axis, start, len).unwrap();
                        start += len;
                        (v, part)
                    })
                    .collect()
            }
            Op::Narrow { x, axis, start } => {
                vec![(*x, ops::narrow_backward(val(*x).shape(), *axis, *start, g))]
            }
            Op::GatherRows { x, rows } => {
                vec![(*x, ops::gather_rows_backward(val(*x).shape(), rows, g))]
            }
            Op::Permute { x, src } => {
                let mut dx = Tensor::zeros(val(*x).shape());
                for (&s, &d) in src.iter().zip(g.data()) {
                    dx.data_mut()[s] += d;
                }
                vec![(*x, dx)]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape()).unwrap())],
            Op::Upsample { x, factor } => {
                vec![(
                    *x,
                    ops::upsample_nearest_backward(val(*x).shape(), *factor, g),
                )]
            }
            Op::GlobalAvgPool(x) => {
                let shape = val(*x).shape();
                let (_, _, inner) = ops::channel_layout(shape);
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v / inner as f64, inner))
                    .collect();
                vec![(*x, Tensor::from_parts(shape.to_vec(), data))]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let c = probs.dim(1);
                let scale = g.item() / labels.len() as f64;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d.data_mut()[i * c + l] -= 1.0;
                }
                d.data_mut().iter_mut().for_each(|v| *v *= scale);
                vec![(*logits, d)]
            }
        }
    }
}
