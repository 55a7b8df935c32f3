//! Reverse-mode differentiation over a layer-level operation tape.
//!
//! A [`Tape`] records the primitive operations of one forward pass on
//! batched tensors (leading axis = batch). [`Tape::backward`] replays the
//! record in reverse, visiting every operation once and summing adjoints of
//! tensors that feed several operations.
//!
//! Only nodes that depend on a leaf marked `requires_grad` receive adjoints,
//! so an input-gradient pass skips the weight-gradient work entirely.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::tensor::Tensor;

/// Handle to a recorded tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        k: NodeId,
        b: NodeId,
        geom: ConvGeom,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Relu {
        x: NodeId,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    Reshape {
        x: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    Softmax {
        x: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Tensor,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Sum {
        x: NodeId,
    },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of a forward pass.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    names: BTreeMap<String, NodeId>,
    input: Option<NodeId>,
}

/// Adjoints produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    names: BTreeMap<String, NodeId>,
    input: Option<NodeId>,
}

impl Gradients {
    /// Adjoint of `node`; `None` when the node does not influence the seed or
    /// does not require gradients.
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.grads.get(node.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of the leaf registered with [`Tape::input`].
    pub fn input(&self) -> Option<&Tensor> {
        self.input.and_then(|id| self.get(id))
    }

    /// Adjoints of every named parameter leaf. Parameters the seed does not
    /// depend on get an explicit zero tensor.
    pub fn parameters(&self, tape: &Tape<'_>) -> BTreeMap<String, Tensor> {
        self.names
            .iter()
            .map(|(name, &id)| {
                let g = self
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[node.0].value
    }

    /// The leaf registered with [`Tape::input`], if any.
    pub fn input_node(&self) -> Option<NodeId> {
        self.input
    }

    /// Registers the differentiable input leaf.
    pub fn input(&mut self, value: impl Into<Cow<'a, Tensor>>) -> NodeId {
        let id = self.leaf(value, true);
        self.input = Some(id);
        id
    }

    /// Registers a leaf that never receives gradients.
    pub fn constant(&mut self, value: impl Into<Cow<'a, Tensor>>) -> NodeId {
        self.leaf(value, false)
    }

    /// Registers a named parameter leaf.
    pub fn parameter(&mut self, name: &str, value: impl Into<Cow<'a, Tensor>>, requires_grad: bool) -> NodeId {
        let id = self.leaf(value, requires_grad);
        self.names.insert(name.to_string(), id);
        id
    }

    fn leaf(&mut self, value: impl Into<Cow<'a, Tensor>>, needs_grad: bool) -> NodeId {
        self.push(value.into(), Op::Leaf, needs_grad)
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn owned(&mut self, value: Tensor, op: Op, operands: &[NodeId], context: &str) -> Result<NodeId> {
        value.check_finite(context)?;
        let needs_grad = operands.iter().any(|o| self.nodes[o.0].needs_grad);
        Ok(self.push(Cow::Owned(value), op, needs_grad))
    }

    fn check(&self, node: NodeId) -> Result<&Tensor> {
        self.nodes
            .get(node.0)
            .map(|n| n.value.as_ref())
            .ok_or(Error::MissingNode(node.0))
    }

    /// `y[n] = W x[n] + b`; `x` is `[N, ...]` and is flattened per example.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let batch = *xv.shape().first().unwrap_or(&0);
        let n_in = if batch == 0 { 0 } else { xv.len() / batch };
        if wv.shape().len() != 2 || wv.shape()[1] != n_in || bv.shape() != [wv.shape()[0]] {
            return Err(Error::Shape(format!(
                "affine: input width {n_in}, weight {:?}, bias {:?}",
                wv.shape(),
                bv.shape()
            )));
        }
        let n_out = wv.shape()[0];
        let mut out = vec![0.0; batch * n_out];
        kernels::affine_batch_forward(batch, xv.data(), wv.data(), bv.data(), &mut out);
        let value = Tensor::from_parts(vec![batch, n_out], out);
        self.owned(value, Op::Affine { x, w, b }, &[x, w, b], "affine")
    }

    /// Stride-1 convolution with symmetric zero padding on `[N, C, H, W]`.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, b: NodeId, padding: usize) -> Result<NodeId> {
        let (xv, kv, bv) = (self.check(x)?, self.check(k)?, self.check(b)?);
        let (xs, ks) = (xv.shape(), kv.shape());
        if xs.len() != 4 || ks.len() != 4 || ks[1] != xs[1] || ks[2] != ks[3] || bv.shape() != [ks[0]] {
            return Err(Error::Shape(format!("conv2d: input {xs:?}, kernel {ks:?}")));
        }
        if xs[2] + 2 * padding < ks[2] || xs[3] + 2 * padding < ks[3] {
            return Err(Error::Shape(format!("conv2d: kernel {ks:?} larger than padded input {xs:?}")));
        }
        let geom = ConvGeom {
            in_c: xs[1],
            h: xs[2],
            w: xs[3],
            out_c: ks[0],
            k: ks[2],
            pad: padding,
        };
        let batch = xs[0];
        let (il, ol) = (geom.in_len(), geom.out_len());
        let mut out = vec![0.0; batch * ol];
        let mut col = Vec::new();
        for n in 0..batch {
            kernels::conv2d_forward(
                &geom,
                &xv.data()[n * il..(n + 1) * il],
                kv.data(),
                bv.data(),
                &mut out[n * ol..(n + 1) * ol],
                &mut col,
            );
        }
        let value = Tensor::from_parts(vec![batch, geom.out_c, geom.out_h(), geom.out_w()], out);
        self.owned(value, Op::Conv2d { x, k, b, geom }, &[x, k, b], "conv2d")
    }

    pub fn max_pool(&mut self, x: NodeId, size: usize, stride: usize) -> Result<NodeId> {
        let xv = self.check(x)?;
        let xs = xv.shape();
        if xs.len() != 4 || size == 0 || stride == 0 || xs[2] < size || xs[3] < size {
            return Err(Error::Shape(format!("max_pool {size}/{stride} on {xs:?}")));
        }
        let geom = PoolGeom {
            c: xs[1],
            h: xs[2],
            w: xs[3],
            size,
            stride,
        };
        let batch = xs[0];
        let (il, ol) = (geom.in_len(), geom.out_len());
        let mut out = vec![0.0; batch * ol];
        let mut argmax = vec![0usize; batch * ol];
        for n in 0..batch {
            kernels::maxpool_forward(
                &geom,
                &xv.data()[n * il..(n + 1) * il],
                &mut out[n * ol..(n + 1) * ol],
                Some(&mut argmax[n * ol..(n + 1) * ol]),
            );
            for a in &mut argmax[n * ol..(n + 1) * ol] {
                *a += n * il;
            }
        }
        let value = Tensor::from_parts(vec![batch, geom.c, geom.out_h(), geom.out_w()], out);
        self.owned(value, Op::MaxPool { x, argmax }, &[x], "max_pool")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.check(x)?.map(|v| v.max(0.0));
        self.owned(value, Op::Relu { x }, &[x], "relu")
    }

    /// Multiplies by a fixed mask (already scaled by the keep probability).
    pub fn dropout(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        let xv = self.check(x)?;
        if mask.len() != xv.len() {
            return Err(Error::Shape(format!("dropout mask {} vs {}", mask.len(), xv.len())));
        }
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.owned(value, Op::Dropout { x, mask }, &[x], "dropout")
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.check(x)?.clone().reshape(shape)?;
        self.owned(value, Op::Reshape { x }, &[x], "reshape")
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let value = self.check(x)?.scale(factor);
        self.owned(value, Op::Scale { x, factor }, &[x], "scale")
    }

    /// Row-wise softmax over the last axis of `[N, K]`.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.check(x)?;
        let (batch, k) = rows(xv)?;
        let mut out = vec![0.0; batch * k];
        for n in 0..batch {
            kernels::softmax_into(&xv.data()[n * k..(n + 1) * k], 1.0, &mut out[n * k..(n + 1) * k]);
        }
        let value = Tensor::from_parts(vec![batch, k], out);
        self.owned(value, Op::Softmax { x }, &[x], "softmax")
    }

    /// Fused `Σ_n weight_n · H(target_n, softmax(logits_n))`, a scalar.
    ///
    /// `targets` is `[N, K]` (one-hot rows for hard labels, distributions for
    /// soft labels); pass `weights = 1/N` for a batch mean.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: Tensor, weights: Vec<f64>) -> Result<NodeId> {
        let zv = self.check(logits)?;
        let (batch, k) = rows(zv)?;
        if targets.shape() != [batch, k] || weights.len() != batch {
            return Err(Error::Shape(format!(
                "cross entropy: logits {:?}, targets {:?}, {} weights",
                zv.shape(),
                targets.shape(),
                weights.len()
            )));
        }
        let mut probs = vec![0.0; batch * k];
        let mut loss = 0.0;
        for n in 0..batch {
            let z = &zv.data()[n * k..(n + 1) * k];
            let t = &targets.data()[n * k..(n + 1) * k];
            let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let mut h = 0.0;
            for j in 0..k {
                let logp = z[j] - lse;
                probs[n * k + j] = logp.exp();
                if t[j] != 0.0 {
                    h -= t[j] * logp;
                }
            }
            loss += weights[n] * h;
        }
        let op = Op::SoftmaxCrossEntropy {
            logits,
            targets,
            weights,
            probs,
        };
        self.owned(Tensor::scalar(loss), op, &[logits], "cross entropy")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.check(x)?.sum());
        self.owned(value, Op::Sum { x }, &[x], "sum")
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let v = self.check(loss)?;
        if v.len() != 1 {
            return Err(Error::Shape(format!("backward from non-scalar {:?}", v.shape())));
        }
        self.backward_seeded(loss, Tensor::full(v.shape(), 1.0))
    }

    /// Backpropagates a vector-Jacobian product: `seed` has the shape of `node`.
    pub fn backward_seeded(&self, node: NodeId, seed: Tensor) -> Result<Gradients> {
        let v = self.check(node)?;
        if v.shape() != seed.shape() {
            return Err(Error::Shape(format!("seed {:?} for node {:?}", seed.shape(), v.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[node.0] = Some(seed);
        for i in (0..=node.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.needs_grad {
                grads[i] = None;
            }
        }
        let out = Gradients {
            grads,
            names: self.names.clone(),
            input: self.input,
        };
        for g in out.grads.iter().flatten() {
            g.check_finite("backward")?;
        }
        Ok(out)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, op: &Op, output: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let batch = xv.shape()[0];
                let n_in = xv.len() / batch.max(1);
                let n_out = wv.shape()[0];
                let mut dx = self.wants(*x).then(|| vec![0.0; xv.len()]);
                let mut dw = self.wants(*w).then(|| vec![0.0; wv.len()]);
                let mut db = self.wants(*b).then(|| vec![0.0; n_out]);
                kernels::affine_batch_backward(
                    batch,
                    n_in,
                    n_out,
                    xv.data(),
                    wv.data(),
                    g.data(),
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                accumulate(grads, *x, xv.shape(), dx);
                accumulate(grads, *w, wv.shape(), dw);
                accumulate(grads, *b, &[n_out], db);
            }
            Op::Conv2d { x, k, b, geom } => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let batch = xv.shape()[0];
                let (il, ol) = (geom.in_len(), geom.out_len());
                let mut dx = self.wants(*x).then(|| vec![0.0; xv.len()]);
                let mut dk = self.wants(*k).then(|| vec![0.0; kv.len()]);
                let mut db = self.wants(*b).then(|| vec![0.0; geom.out_c]);
                let mut col = Vec::new();
                for n in 0..batch {
                    kernels::conv2d_backward(
                        geom,
                        &xv.data()[n * il..(n + 1) * il],
                        kv.data(),
                        &g.data()[n * ol..(n + 1) * ol],
                        dx.as_deref_mut().map(|d| &mut d[n * il..(n + 1) * il]),
                        dk.as_deref_mut(),
                        db.as_deref_mut(),
                        &mut col,
                    );
                }
                accumulate(grads, *x, xv.shape(), dx);
                accumulate(grads, *k, kv.shape(), dk);
                accumulate(grads, *b, &[geom.out_c], db);
            }
            Op::MaxPool { x, argmax } => {
                let xv = self.value(*x);
                let mut dx = vec![0.0; xv.len()];
                for (gv, &a) in g.data().iter().zip(argmax) {
                    dx[a] += gv;
                }
                accumulate(grads, *x, xv.shape(), Some(dx));
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let dx = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&a, &gv)| if a > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(grads, *x, xv.shape(), Some(dx));
            }
            Op::Dropout { x, mask } => {
                let dx = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                accumulate(grads, *x, self.value(*x).shape(), Some(dx));
            }
            Op::Reshape { x } => {
                accumulate(grads, *x, self.value(*x).shape(), Some(g.data().to_vec()));
            }
            Op::Scale { x, factor } => {
                let dx = g.data().iter().map(|v| v * factor).collect();
                accumulate(grads, *x, self.value(*x).shape(), Some(dx));
            }
            Op::Softmax { x } => {
                let y = output;
                let (batch, k) = (y.shape()[0], y.shape()[1]);
                let mut dx = vec![0.0; y.len()];
                for n in 0..batch {
                    let sm = &y.data()[n * k..(n + 1) * k];
                    let gr = &g.data()[n * k..(n + 1) * k];
                    let inner: f64 = gr.iter().zip(sm).map(|(a, s)| a * s).sum();
                    for j in 0..k {
                        dx[n * k + j] = sm[j] * (gr[j] - inner);
                    }
                }
                accumulate(grads, *x, y.shape(), Some(dx));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let scale = g.data()[0];
                let zv = self.value(*logits);
                let k = zv.shape()[1];
                let mut dz = vec![0.0; zv.len()];
                for (n, w) in weights.iter().enumerate() {
                    let t = &targets.data()[n * k..(n + 1) * k];
                    let mass: f64 = t.iter().sum();
                    for j in 0..k {
                        dz[n * k + j] = scale * w * (probs[n * k + j] * mass - t[j]);
                    }
                }
                accumulate(grads, *logits, zv.shape(), Some(dz));
            }
            Op::Sum { x } => {
                let xv = self.value(*x);
                accumulate(grads, *x, xv.shape(), Some(vec![g.data()[0]; xv.len()]));
            }
        }
    }
}

fn rows(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n, k] => Ok((*n, *k)),
        s => Err(Error::Shape(format!("expected [N, K], got {s:?}"))),
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], delta: Option<Vec<f64>>) {
    let Some(delta) = delta else { return };
    match &mut grads[id.0] {
        Some(existing) => {
            let summed = existing
                .data()
                .iter()
                .zip(&delta)
                .map(|(a, b)| a + b)
                .collect();
            *existing = Tensor::from_parts(shape.to_vec(), summed);
        }
        slot @ None => *slot = Some(Tensor::from_parts(shape.to_vec(), delta)),
    }
}
