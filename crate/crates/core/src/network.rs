//! Layer-structured model definitions, inference, and the taped record path.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::rng::{rng_stream, tag};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Named weight tensors, keyed `layer{i}.weight` / `layer{i}.bias`.
pub type Weights = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Stride-1 convolution with square kernel and symmetric zero padding.
    Conv2d {
        filters: usize,
        kernel: usize,
        padding: usize,
    },
    MaxPool {
        size: usize,
        stride: usize,
    },
    /// Fully connected layer; flattens its input.
    Dense {
        units: usize,
    },
    Relu,
    /// Inverted dropout, active only when training.
    Dropout {
        rate: f64,
    },
    /// Softmax head; always the final layer.
    Softmax,
}

/// A validated feed-forward architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct NetworkSpec {
    input_shape: [usize; 3],
    classes: usize,
    layers: Vec<LayerSpec>,
    #[serde(skip)]
    shapes: Vec<[usize; 3]>,
}

#[derive(Serialize, Deserialize)]
struct RawSpec {
    input_shape: [usize; 3],
    classes: usize,
    layers: Vec<LayerSpec>,
}

impl TryFrom<RawSpec> for NetworkSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        NetworkSpec::new(raw.input_shape, raw.classes, raw.layers)
    }
}

impl From<NetworkSpec> for RawSpec {
    fn from(s: NetworkSpec) -> Self {
        RawSpec {
            input_shape: s.input_shape,
            classes: s.classes,
            layers: s.layers,
        }
    }
}

impl NetworkSpec {
    /// Validates shapes layer by layer. `input_shape` is `[channels, height, width]`.
    pub fn new(input_shape: [usize; 3], classes: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument(format!("{classes} classes; need at least 2")));
        }
        if input_shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("input shape {input_shape:?}")));
        }
        if layers.last() != Some(&LayerSpec::Softmax) {
            return Err(Error::InvalidArgument("final layer must be softmax".into()));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut cur = input_shape;
        let mut flat = false;
        for (i, layer) in layers.iter().enumerate() {
            let bad = |what: String| Error::InvalidArgument(format!("layer {i}: {what}"));
            cur = match *layer {
                LayerSpec::Conv2d {
                    filters,
                    kernel,
                    padding,
                } => {
                    if flat {
                        return Err(bad("convolution after a dense layer".into()));
                    }
                    if filters == 0 || kernel == 0 {
                        return Err(bad("zero filters or kernel".into()));
                    }
                    let [c, h, w] = cur;
                    if h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return Err(bad(format!("kernel {kernel} exceeds padded input {cur:?}")));
                    }
                    let _ = c;
                    [filters, h + 2 * padding + 1 - kernel, w + 2 * padding + 1 - kernel]
                }
                LayerSpec::MaxPool { size, stride } => {
                    if flat {
                        return Err(bad("pooling after a dense layer".into()));
                    }
                    let [c, h, w] = cur;
                    if size == 0 || stride == 0 || h < size || w < size {
                        return Err(bad(format!("pool {size}/{stride} on {cur:?}")));
                    }
                    [c, (h - size) / stride + 1, (w - size) / stride + 1]
                }
                LayerSpec::Dense { units } => {
                    if units == 0 {
                        return Err(bad("zero units".into()));
                    }
                    flat = true;
                    [units, 1, 1]
                }
                LayerSpec::Relu => cur,
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(bad(format!("dropout rate {rate}")));
                    }
                    cur
                }
                LayerSpec::Softmax => {
                    if i + 1 != layers.len() {
                        return Err(bad("softmax before the final layer".into()));
                    }
                    let width: usize = cur.iter().product();
                    if width != classes {
                        return Err(bad(format!("softmax over {width} values, {classes} classes")));
                    }
                    cur
                }
            };
            shapes.push(cur);
        }
        Ok(Self {
            input_shape,
            classes,
            layers,
            shapes,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    fn in_shape(&self, i: usize) -> [usize; 3] {
        if i == 0 {
            self.input_shape
        } else {
            self.shapes[i - 1]
        }
    }

    /// `(name, shape)` of every trainable tensor, in layer order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let [c, h, w] = self.in_shape(i);
            match *layer {
                LayerSpec::Conv2d { filters, kernel, .. } => {
                    out.push((weight_name(i), vec![filters, c, kernel, kernel]));
                    out.push((bias_name(i), vec![filters]));
                }
                LayerSpec::Dense { units } => {
                    out.push((weight_name(i), vec![units, c * h * w]));
                    out.push((bias_name(i), vec![units]));
                }
                _ => {}
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// He-normal weights and zero biases drawn from the `INIT` stream.
    pub fn init_weights(&self, seed: u64) -> Weights {
        let mut rng = rng_stream(seed, &[tag::INIT]);
        let mut weights = Weights::new();
        for (name, shape) in self.parameter_shapes() {
            let n: usize = shape.iter().product();
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
                Tensor::from_parts(shape, data)
            };
            weights.insert(name, t);
        }
        weights
    }

    /// Errors unless `weights` holds exactly one tensor of the right shape per parameter.
    pub fn check_weights(&self, weights: &Weights) -> Result<()> {
        let shapes = self.parameter_shapes();
        if shapes.len() != weights.len() {
            return Err(Error::Checkpoint(format!(
                "{} weight tensors for {} parameters",
                weights.len(),
                shapes.len()
            )));
        }
        for (name, shape) in shapes {
            match weights.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "{name}: shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing {name}"))),
            }
        }
        Ok(())
    }

    /// Number of examples in `input`, which is `[N, C, H, W]` or a single `[C, H, W]`.
    pub fn batch_of(&self, input: &Tensor) -> Result<usize> {
        let s = input.shape();
        let [c, h, w] = self.input_shape;
        match s {
            [n, a, b, d] if [*a, *b, *d] == [c, h, w] => Ok(*n),
            [a, b, d] if [*a, *b, *d] == [c, h, w] => Ok(1),
            // Flat vectors are accepted for 1×1×n inputs (MLPs).
            [n, k] if c * h * w == *k && c == 1 && h == 1 => Ok(*n),
            [k] if *k == c * h * w && c == 1 && h == 1 => Ok(1),
            _ => Err(Error::Shape(format!(
                "input {s:?} does not match network input {:?}",
                self.input_shape
            ))),
        }
    }
}

fn weight_name(i: usize) -> String {
    format!("layer{i}.weight")
}

fn bias_name(i: usize) -> String {
    format!("layer{i}.bias")
}

/// ReLU MLP with softmax head over flat `input_dim` vectors.
pub fn build_synthetic_mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Result<NetworkSpec> {
    if input_dim == 0 || hidden.contains(&0) {
        return Err(Error::InvalidArgument("MLP dimensions must be at least 1".into()));
    }
    let mut layers = Vec::new();
    for &h in hidden {
        layers.push(LayerSpec::Dense { units: h });
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::Dense { units: classes });
    layers.push(LayerSpec::Softmax);
    NetworkSpec::new([1, 1, input_dim], classes, layers)
}

/// The 28×28 MNIST CNN with filter and unit counts multiplied by `scale`
/// (rounded up, at least 4).
pub fn build_mnist_cnn(scale: f64) -> Result<NetworkSpec> {
    build_mnist_cnn_with_dropout(scale, 0.5)
}

/// [`build_mnist_cnn`] with a different dropout rate at the dense layers.
pub fn build_mnist_cnn_with_dropout(scale: f64, dropout: f64) -> Result<NetworkSpec> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::InvalidArgument(format!("scale {scale} outside (0, 1]")));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::InvalidArgument(format!("dropout rate {dropout} outside [0, 1)")));
    }
    let n = |base: usize| ((base as f64 * scale).ceil() as usize).max(4);
    let conv = |filters| LayerSpec::Conv2d {
        filters,
        kernel: 3,
        padding: 0,
    };
    let pool = LayerSpec::MaxPool { size: 2, stride: 1 };
    let layers = vec![
        conv(n(32)),
        LayerSpec::Relu,
        conv(n(32)),
        LayerSpec::Relu,
        pool.clone(),
        conv(n(64)),
        LayerSpec::Relu,
        conv(n(64)),
        LayerSpec::Relu,
        pool,
        LayerSpec::Dense { units: n(256) },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: dropout },
        LayerSpec::Dense { units: n(256) },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: dropout },
        LayerSpec::Dense { units: 10 },
        LayerSpec::Softmax,
    ];
    NetworkSpec::new([1, 28, 28], 10, layers)
}

/// Borrowed view of an architecture with its weights.
#[derive(Debug, Clone, Copy)]
pub struct Model<'a> {
    pub spec: &'a NetworkSpec,
    pub weights: &'a Weights,
}

/// How dropout layers behave during a recorded pass.
#[derive(Debug, Clone, Copy)]
pub enum Mode {
    Eval,
    /// Dropout masks are drawn from the `DROPOUT` stream labelled `labels`.
    Train { seed: u64, labels: [u64; 2] },
}

/// Handles into a recorded forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Recorded {
    pub input: NodeId,
    pub logits: NodeId,
    /// Logits divided by the temperature.
    pub scaled: NodeId,
    pub probs: NodeId,
}

/// Result of [`forward_eval`].
#[derive(Debug)]
pub struct Forward<'a> {
    pub logits: Tensor,
    pub probs: Tensor,
    pub tape: Option<(Tape<'a>, Recorded)>,
}

impl<'a> Model<'a> {
    pub fn new(spec: &'a NetworkSpec, weights: &'a Weights) -> Self {
        Self { spec, weights }
    }

    fn w(&self, name: &str) -> &'a [f64] {
        self.weights[name].data()
    }

    /// Logits of one example (no dropout, no tape).
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let mut col = Vec::new();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let [c, h, w] = self.spec.in_shape(i);
            match *layer {
                LayerSpec::Conv2d {
                    filters,
                    kernel,
                    padding,
                } => {
                    let g = ConvGeom {
                        in_c: c,
                        h,
                        w,
                        out_c: filters,
                        k: kernel,
                        pad: padding,
                    };
                    next.clear();
                    next.resize(g.out_len(), 0.0);
                    kernels::conv2d_forward(&g, &cur, self.w(&weight_name(i)), self.w(&bias_name(i)), &mut next, &mut col);
                    std::mem::swap(&mut cur, &mut next);
                }
                LayerSpec::MaxPool { size, stride } => {
                    let g = PoolGeom { c, h, w, size, stride };
                    next.clear();
                    next.resize(g.out_len(), 0.0);
                    kernels::maxpool_forward(&g, &cur, &mut next, None);
                    std::mem::swap(&mut cur, &mut next);
                }
                LayerSpec::Dense { units } => {
                    next.clear();
                    next.resize(units, 0.0);
                    kernels::affine_batch_forward(1, &cur, self.w(&weight_name(i)), self.w(&bias_name(i)), &mut next);
                    std::mem::swap(&mut cur, &mut next);
                }
                LayerSpec::Relu => cur.iter_mut().for_each(|v| *v = v.max(0.0)),
                LayerSpec::Dropout { .. } | LayerSpec::Softmax => {}
            }
        }
        cur
    }

    /// `softmax(logits / temperature)` of one example.
    pub fn probs(&self, x: &[f64], temperature: f64) -> Vec<f64> {
        let z = self.logits(x);
        let mut p = vec![0.0; z.len()];
        kernels::softmax_into(&z, temperature, &mut p);
        p
    }

    /// Predicted class of one example; argmax of the logits, lowest index on ties.
    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    /// Records a batched forward pass on `tape`, with `x` as the
    /// differentiable input leaf. Parameters get gradients iff `param_grads`.
    pub fn record(
        &self,
        tape: &mut Tape<'a>,
        x: Tensor,
        temperature: f64,
        mode: Mode,
        param_grads: bool,
    ) -> Result<Recorded> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature {temperature}")));
        }
        let batch = self.spec.batch_of(&x)?;
        let [c, h, w] = self.spec.input_shape;
        let x = x.reshape(&[batch, c, h, w])?;
        let input = tape.input(x);
        let mut cur = input;
        let mut spatial = true;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            cur = match *layer {
                LayerSpec::Conv2d { padding, .. } => {
                    let k = tape.parameter(&weight_name(i), &self.weights[&weight_name(i)], param_grads);
                    let b = tape.parameter(&bias_name(i), &self.weights[&bias_name(i)], param_grads);
                    tape.conv2d(cur, k, b, padding)?
                }
                LayerSpec::MaxPool { size, stride } => tape.max_pool(cur, size, stride)?,
                LayerSpec::Dense { .. } => {
                    let wt = tape.parameter(&weight_name(i), &self.weights[&weight_name(i)], param_grads);
                    let b = tape.parameter(&bias_name(i), &self.weights[&bias_name(i)], param_grads);
                    spatial = false;
                    tape.affine(cur, wt, b)?
                }
                LayerSpec::Relu => tape.relu(cur)?,
                LayerSpec::Dropout { rate } => match mode {
                    Mode::Eval => cur,
                    Mode::Train { seed, labels } => {
                        let n = tape.value(cur).len();
                        let mut rng = rng_stream(seed, &[tag::DROPOUT, labels[0], labels[1], i as u64]);
                        let keep = 1.0 - rate;
                        let mask = (0..n)
                            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect();
                        tape.dropout(cur, mask)?
                    }
                },
                LayerSpec::Softmax => {
                    if spatial {
                        let k = self.spec.classes;
                        cur = tape.reshape(cur, &[batch, k])?;
                    }
                    let logits = cur;
                    let scaled = if temperature == 1.0 {
                        logits
                    } else {
                        tape.scale(logits, 1.0 / temperature)?
                    };
                    let probs = tape.softmax(scaled)?;
                    return Ok(Recorded {
                        input,
                        logits,
                        scaled,
                        probs,
                    });
                }
            };
        }
        unreachable!("validated specs end with softmax")
    }
}

/// Logits and `softmax(logits / temperature)` for a batch `[N, C, H, W]`
/// (or a single example), optionally recording a tape.
pub fn forward_eval<'a>(model: Model<'a>, input: &Tensor, temperature: f64, record: bool) -> Result<Forward<'a>> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {temperature}")));
    }
    input.check_finite("forward input")?;
    let batch = model.spec.batch_of(input)?;
    let k = model.spec.classes;
    if record {
        let mut tape = Tape::new();
        let rec = model.record(&mut tape, input.clone(), temperature, Mode::Eval, true)?;
        let logits = tape.value(rec.logits).clone();
        let probs = tape.value(rec.probs).clone();
        return Ok(Forward {
            logits,
            probs,
            tape: Some((tape, rec)),
        });
    }
    let n_in = model.spec.input_len();
    let mut logits = Vec::with_capacity(batch * k);
    let mut probs = vec![0.0; batch * k];
    for n in 0..batch {
        let z = model.logits(&input.data()[n * n_in..(n + 1) * n_in]);
        kernels::softmax_into(&z, temperature, &mut probs[n * k..(n + 1) * k]);
        logits.extend(z);
    }
    let logits = Tensor::from_parts(vec![batch, k], logits);
    logits.check_finite("logits")?;
    Ok(Forward {
        logits,
        probs: Tensor::from_parts(vec![batch, k], probs),
        tape: None,
    })
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `√2 · (top1 − top2)` of a probability vector.
pub fn confidence_of(probs: &[f64]) -> Result<f64> {
    if probs.len() < 2 {
        return Err(Error::InvalidArgument("confidence needs at least 2 classes".into()));
    }
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in probs {
        if p > a {
            b = a;
            a = p;
        } else if p > b {
            b = p;
        }
    }
    Ok(std::f64::consts::SQRT_2 * (a - b))
}

/// `(class, probs)` of a single example at `temperature`.
pub fn classify(model: Model<'_>, input: &Tensor, temperature: f64) -> Result<(usize, Vec<f64>)> {
    if model.spec.batch_of(input)? != 1 {
        return Err(Error::Shape(format!("classify expects one example, got {:?}", input.shape())));
    }
    let f = forward_eval(model, input, temperature, false)?;
    let probs = f.probs.into_data();
    Ok((argmax(&probs), probs))
}

/// Confidence of a single example at unit temperature.
pub fn confidence(model: Model<'_>, input: &Tensor) -> Result<f64> {
    let (_, probs) = classify(model, input, 1.0)?;
    confidence_of(&probs)
}

/// Product of Frobenius norms over every dense and convolution weight
/// (kernels flattened to matrices).
pub fn frobenius_product(model: Model<'_>) -> Result<f64> {
    let mut product = 1.0;
    let mut any = false;
    for (name, t) in model.weights {
        if name.ends_with(".weight") {
            product *= t.norm_l2();
            any = true;
        }
    }
    if !any {
        return Err(Error::InvalidArgument("network has no weight matrices".into()));
    }
    Ok(product)
}

/// `φ(x) / Π‖W‖_F`, a lower bound on the l2 distance to another class.
pub fn frobenius_radius_bound(model: Model<'_>, input: &Tensor) -> Result<f64> {
    let phi = confidence(model, input)?;
    if phi == 0.0 {
        return Ok(0.0);
    }
    Ok(phi / frobenius_product(model)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_cnn_full_scale_layer_sizes() {
        let s = build_mnist_cnn(1.0).unwrap();
        let filters: Vec<_> = s
            .layers()
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv2d { filters, .. } => Some(*filters),
                _ => None,
            })
            .collect();
        let units: Vec<_> = s
            .layers()
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Dense { units } => Some(*units),
                _ => None,
            })
            .collect();
        assert_eq!(filters, [32, 32, 64, 64]);
        assert_eq!(units, [256, 256, 10]);
        assert_eq!(s.classes(), 10);
    }

    #[test]
    fn mnist_cnn_quarter_scale() {
        let s = build_mnist_cnn(0.25).unwrap();
        let sizes: Vec<_> = s
            .layers()
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv2d { filters, .. } => Some(*filters),
                LayerSpec::Dense { units } => Some(*units),
                _ => None,
            })
            .collect();
        assert_eq!(sizes, [8, 8, 16, 16, 64, 64, 10]);
        assert!(build_mnist_cnn(0.0).is_err());
        assert!(build_mnist_cnn(1.5).is_err());
        // Minimum of 4 per layer.
        let tiny = build_mnist_cnn(0.01).unwrap();
        assert!(matches!(tiny.layers()[0], LayerSpec::Conv2d { filters: 4, .. }));
    }

    #[test]
    fn mlp_parameter_count() {
        assert_eq!(build_synthetic_mlp(2, &[16], 2).unwrap().parameter_count(), 82);
        let linear = build_synthetic_mlp(2, &[], 2).unwrap();
        assert_eq!(linear.layers().len(), 2);
        assert!(build_synthetic_mlp(2, &[], 1).is_err());
        assert!(build_synthetic_mlp(0, &[], 2).is_err());
    }

    #[test]
    fn softmax_must_be_last_and_match_classes() {
        let bad = NetworkSpec::new([1, 1, 2], 3, vec![LayerSpec::Dense { units: 2 }, LayerSpec::Softmax]);
        assert!(bad.is_err());
        let bad = NetworkSpec::new([1, 1, 2], 2, vec![LayerSpec::Dense { units: 2 }]);
        assert!(bad.is_err());
    }

    #[test]
    fn forward_uniform_on_zero_weights() {
        let spec = build_synthetic_mlp(4, &[], 4).unwrap();
        let w: Weights = spec
            .parameter_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(&s)))
            .collect();
        let x = Tensor::vector(&[0.3, -0.1, 0.9, 0.0]);
        let f = forward_eval(Model::new(&spec, &w), &x, 1.0, false).unwrap();
        assert_eq!(f.probs.data(), &[0.25; 4]);
        assert!(f.tape.is_none());
        let f = forward_eval(Model::new(&spec, &w), &x, 1.0, true).unwrap();
        assert!(f.tape.is_some());
    }

    #[test]
    fn taped_and_fast_paths_agree_on_cnn() {
        let spec = build_mnist_cnn(0.125).unwrap();
        let w = spec.init_weights(5);
        let m = Model::new(&spec, &w);
        let x: Vec<f64> = (0..784).map(|i| ((i as f64) * 0.37).sin()).collect();
        let t = Tensor::new(vec![1, 1, 28, 28], x.clone()).unwrap();
        let fast = forward_eval(m, &t, 2.0, false).unwrap();
        let taped = forward_eval(m, &t, 2.0, true).unwrap();
        assert_eq!(fast.logits, taped.logits);
        for (a, b) in fast.probs.data().iter().zip(taped.probs.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn argmax_ties_and_confidence() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        let c = confidence_of(&[0.7, 0.2, 0.1]).unwrap();
        assert!((c - std::f64::consts::SQRT_2 * 0.5).abs() < 1e-15);
        assert_eq!(confidence_of(&[0.25; 4]).unwrap(), 0.0);
        assert_eq!(confidence_of(&[1.0, 0.0]).unwrap(), std::f64::consts::SQRT_2);
    }

    #[test]
    fn frobenius_bound_identity_layer() {
        let spec = build_synthetic_mlp(2, &[], 2).unwrap();
        let mut w = Weights::new();
        w.insert("layer0.weight".into(), Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        w.insert("layer0.bias".into(), Tensor::zeros(&[2]));
        let m = Model::new(&spec, &w);
        let x = Tensor::vector(&[0.8, -0.4]);
        let phi = confidence(m, &x).unwrap();
        let bound = frobenius_radius_bound(m, &x).unwrap();
        assert!((bound - phi / 2f64.sqrt()).abs() < 1e-15);
        let tie = Tensor::vector(&[0.5, 0.5]);
        assert_eq!(frobenius_radius_bound(m, &tie).unwrap(), 0.0);
    }

    #[test]
    fn spec_serde_revalidates() {
        let s = build_mnist_cnn(0.25).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        let back: NetworkSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(s, back);
        let broken = json.replace("\"classes\":10", "\"classes\":9");
        assert!(serde_json::from_str::<NetworkSpec>(&broken).is_err());
    }
}
