//! Helpers shared by the integration suites and the acceptance runner.
#![allow(dead_code)]

use advlab::grad::{input_jacobian, loss_and_gradient, parameter_gradients, relative_error};
use advlab::network::{build_mnist_cnn, build_synthetic_mlp, Mode};
use advlab::rng::rng_stream;
use advlab::{Checkpoint, LayerSpec, Model, NetworkSpec, Tape, Tensor, Weights};
use rand::Rng;

/// Linear softmax model `z = W x + b` over `n` inputs laid out as `[1, 1, n]`.
pub fn linear(n: usize, w: Vec<f64>, b: Vec<f64>) -> Checkpoint {
    let k = b.len();
    let spec = NetworkSpec::new([1, 1, n], k, vec![LayerSpec::Dense { units: k }, LayerSpec::Softmax]).unwrap();
    let mut weights = Weights::new();
    weights.insert("layer0.weight".into(), Tensor::new(vec![k, n], w).unwrap());
    weights.insert("layer0.bias".into(), Tensor::new(vec![k], b).unwrap());
    Checkpoint::new(spec, weights, Default::default()).unwrap()
}

/// Same as [`linear`] but on an `h×w` single-channel image.
pub fn linear_image(h: usize, w: usize, weights_rows: Vec<f64>, b: Vec<f64>) -> Checkpoint {
    let k = b.len();
    let spec = NetworkSpec::new([1, h, w], k, vec![LayerSpec::Dense { units: k }, LayerSpec::Softmax]).unwrap();
    let mut weights = Weights::new();
    weights.insert("layer0.weight".into(), Tensor::new(vec![k, h * w], weights_rows).unwrap());
    weights.insert("layer0.bias".into(), Tensor::new(vec![k], b).unwrap());
    Checkpoint::new(spec, weights, Default::default()).unwrap()
}

pub fn random_mlp(input: usize, hidden: &[usize], classes: usize, seed: u64) -> Checkpoint {
    Checkpoint::init(build_synthetic_mlp(input, hidden, classes).unwrap(), seed)
}

/// Uniform vector in `[-1, 1]^n`.
pub fn uniform(n: usize, seed: u64, label: u64) -> Vec<f64> {
    let mut rng = rng_stream(seed, &[1000, label]);
    (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

/// Worst relative errors of one network against central differences.
#[derive(Debug, Default, Clone, Copy)]
pub struct GradientErrors {
    pub input: f64,
    pub parameter: f64,
    pub jacobian: f64,
    /// Sampled coordinates left out because ±h straddles a ReLU or
    /// max-pool kink.
    pub skipped: usize,
}

impl GradientErrors {
    pub fn worst(&self) -> f64 {
        self.input.max(self.parameter).max(self.jacobian)
    }
}

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

/// Central differences of `f` at `x0` with steps `H` and `H/4`. On a smooth
/// stretch both agree far below 1e-7; a kink inside the interval breaks
/// the agreement and the coordinate yields `None`.
fn smooth_differences(f: impl Fn(f64) -> Vec<f64>, x0: f64) -> Vec<Option<f64>> {
    let c = |h: f64| -> Vec<f64> { f(x0 + h).iter().zip(f(x0 - h)).map(|(u, d)| (u - d) / (2.0 * h)).collect() };
    let (coarse, fine) = (c(H), c(H / 4.0));
    coarse
        .into_iter()
        .zip(fine)
        .map(|(a, b)| ((a - b).abs() <= 1e-7 + 1e-5 * a.abs()).then_some(a))
        .collect()
}

fn ce(model: Model<'_>, x: &[f64], target: usize) -> f64 {
    let z = model.logits(x);
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[target]
}

fn splice(x: &[f64], i: usize, v: f64) -> Vec<f64> {
    let mut out = x.to_vec();
    out[i] = v;
    out
}

/// Compares input gradients, a sample of parameter gradients, and a sample
/// of softmax-Jacobian columns against central differences.
pub fn gradient_check(ckpt: &Checkpoint, x: &[f64], seed: u64, samples: usize) -> GradientErrors {
    let model = ckpt.model();
    let k = ckpt.spec.classes();
    let [c, h, w] = ckpt.spec.input_shape();
    let xt = Tensor::new(vec![c, h, w], x.to_vec()).unwrap();
    let target = (seed as usize) % k;
    let mut rng = rng_stream(seed, &[2000]);
    let mut pick = |n: usize| -> Vec<usize> {
        if n <= samples {
            (0..n).collect()
        } else {
            (0..samples).map(|_| rng.random_range(0..n)).collect()
        }
    };
    let mut errs = GradientErrors::default();

    let (_, g) = loss_and_gradient(model, &xt, target, 1.0).unwrap();
    let idx = pick(x.len());
    for &i in &idx {
        match smooth_differences(|v| vec![ce(model, &splice(x, i, v), target)], x[i])[0] {
            Some(fd) => errs.input = errs.input.max(relative_error(g.data()[i], fd, FLOOR)),
            None => errs.skipped += 1,
        }
    }

    let mut tape = Tape::new();
    let rec = model
        .record(&mut tape, Tensor::new(vec![1, c, h, w], x.to_vec()).unwrap(), 1.0, Mode::Eval, true)
        .unwrap();
    let mut onehot = vec![0.0; k];
    onehot[target] = 1.0;
    let loss = tape
        .softmax_cross_entropy(rec.scaled, Tensor::new(vec![1, k], onehot).unwrap(), vec![1.0])
        .unwrap();
    let grads = parameter_gradients(&tape, loss).unwrap();
    for (name, gt) in &grads {
        for i in pick(gt.len()) {
            let at = |v: f64| {
                let mut weights = ckpt.weights.clone();
                let t = &weights[name];
                let data = splice(t.data(), i, v);
                let shape = t.shape().to_vec();
                weights.insert(name.clone(), Tensor::new(shape, data).unwrap());
                vec![ce(Model::new(&ckpt.spec, &weights), x, target)]
            };
            match smooth_differences(at, ckpt.weights[name].data()[i])[0] {
                Some(fd) => errs.parameter = errs.parameter.max(relative_error(gt.data()[i], fd, FLOOR)),
                None => errs.skipped += 1,
            }
        }
    }

    let jac = input_jacobian(model, &xt, 1.0).unwrap();
    for &i in &idx {
        let column = smooth_differences(|v| model.probs(&splice(x, i, v), 1.0), x[i]);
        for (j, fd) in column.into_iter().enumerate() {
            match fd {
                Some(fd) => errs.jacobian = errs.jacobian.max(relative_error(jac.data()[j * x.len() + i], fd, FLOOR)),
                None => errs.skipped += 1,
            }
        }
    }
    errs
}

/// Twenty random networks: MLPs of one to three dense layers and scale-0.25
/// MNIST CNNs. Returns the errors of each.
pub fn gradient_suite(seed: u64) -> Vec<GradientErrors> {
    (0..20u64)
        .map(|n| {
            let s = seed.wrapping_add(n);
            let ckpt = if n % 5 == 4 {
                Checkpoint::init(build_mnist_cnn(0.25).unwrap(), s)
            } else {
                let input = 3 + (n as usize % 4);
                let hidden: Vec<usize> = (0..(n as usize % 3)).map(|l| 4 + l + n as usize % 3).collect();
                random_mlp(input, &hidden, 3 + n as usize % 3, s)
            };
            let x = uniform(ckpt.spec.input_len(), s, 0);
            gradient_check(&ckpt, &x, s, 24)
        })
        .collect()
}
