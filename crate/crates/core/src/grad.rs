//! Gradients and Jacobians of a model with respect to its input and
//! parameters, plus the central-difference oracle used to check them.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::network::{Model, Mode};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// `∇_x loss` from a tape whose input leaf was registered with [`Tape::input`].
pub fn input_gradient(tape: &Tape<'_>, loss: NodeId) -> Result<Tensor> {
    let input = tape
        .input_node()
        .ok_or_else(|| Error::InvalidArgument("tape has no input leaf".into()))?;
    let g = tape.backward(loss)?;
    Ok(g.input()
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(tape.value(input).shape())))
}

/// `∂loss/∂θ` for every named parameter on the tape.
pub fn parameter_gradients(tape: &Tape<'_>, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
    Ok(tape.backward(loss)?.parameters(tape))
}

/// Flat copy of a single example, or an error if `x` holds several.
fn single(model: Model<'_>, x: &Tensor) -> Result<Tensor> {
    if model.spec.batch_of(x)? != 1 {
        return Err(Error::Shape(format!("expected one example, got {:?}", x.shape())));
    }
    let [c, h, w] = model.spec.input_shape();
    x.clone().reshape(&[1, c, h, w])
}

/// Cross-entropy of `softmax(z / τ)` against class `target`, with its input gradient.
pub fn loss_and_gradient(model: Model<'_>, x: &Tensor, target: usize, temperature: f64) -> Result<(f64, Tensor)> {
    let k = model.spec.classes();
    if target >= k {
        return Err(Error::InvalidArgument(format!("target {target} with {k} classes")));
    }
    let x1 = single(model, x)?;
    let mut tape = Tape::new();
    let rec = model.record(&mut tape, x1, temperature, Mode::Eval, false)?;
    let mut onehot = vec![0.0; k];
    onehot[target] = 1.0;
    let loss = tape.softmax_cross_entropy(rec.scaled, Tensor::from_parts(vec![1, k], onehot), vec![1.0])?;
    let value = tape.value(loss).item()?;
    let g = tape.backward(loss)?;
    let grad = g.input().cloned().unwrap_or_else(|| Tensor::zeros(tape.value(rec.input).shape()));
    Ok((value, grad.reshape(x.shape())?))
}

/// Vector-Jacobian product `seedᵀ · ∂σ/∂x` for one example, and the
/// probabilities `σ = softmax(z / τ)` it was taken at.
pub fn probs_vjp(model: Model<'_>, x: &Tensor, temperature: f64, seed: &[f64]) -> Result<(Vec<f64>, Tensor)> {
    let (p, mut g) = probs_vjps(model, x, temperature, &[seed])?;
    Ok((p, g.pop().expect("one seed")))
}

/// Several vector-Jacobian products sharing one forward pass.
pub fn probs_vjps(model: Model<'_>, x: &Tensor, temperature: f64, seeds: &[&[f64]]) -> Result<(Vec<f64>, Vec<Tensor>)> {
    let k = model.spec.classes();
    let x1 = single(model, x)?;
    let mut tape = Tape::new();
    let rec = model.record(&mut tape, x1, temperature, Mode::Eval, false)?;
    let probs = tape.value(rec.probs).data().to_vec();
    let mut grads = Vec::with_capacity(seeds.len());
    for seed in seeds {
        if seed.len() != k {
            return Err(Error::Shape(format!("seed of length {} for {k} classes", seed.len())));
        }
        let g = tape.backward_seeded(rec.probs, Tensor::from_parts(vec![1, k], seed.to_vec()))?;
        let gx = g.input().cloned().unwrap_or_else(|| Tensor::zeros(tape.value(rec.input).shape()));
        grads.push(gx.reshape(&[x.len()])?);
    }
    Ok((probs, grads))
}

/// `J = ∂σ/∂x` of one example as a `[classes, inputs]` tensor; row `j` is `∇_x σ_j`.
pub fn input_jacobian(model: Model<'_>, x: &Tensor, temperature: f64) -> Result<Tensor> {
    let k = model.spec.classes();
    let seeds: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let mut s = vec![0.0; k];
            s[j] = 1.0;
            s
        })
        .collect();
    let refs: Vec<&[f64]> = seeds.iter().map(|s| s.as_slice()).collect();
    let (_, rows) = probs_vjps(model, x, temperature, &refs)?;
    let mut data = Vec::with_capacity(k * x.len());
    for r in &rows {
        data.extend_from_slice(r.data());
    }
    Ok(Tensor::from_parts(vec![k, x.len()], data))
}

/// Central differences `(f(x + h e_i) − f(x − h e_i)) / 2h` for every component.
pub fn central_difference(f: impl Fn(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step {h}")));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe)?;
        probe[i] = orig - h;
        let down = f(&probe)?;
        probe[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Central-difference estimate of `∇_x ℓ(f(x), target)` at unit temperature.
pub fn finite_difference_gradient(model: Model<'_>, x: &Tensor, target: usize, h: f64) -> Result<Tensor> {
    let k = model.spec.classes();
    if target >= k {
        return Err(Error::InvalidArgument(format!("target {target} with {k} classes")));
    }
    single(model, x)?;
    let g = central_difference(
        |v| {
            let z = model.logits(v);
            let max = z.iter().fold(f64::NEG_INFINITY, |m, &a| m.max(a));
            let lse = max + z.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
            Ok(lse - z[target])
        },
        x.data(),
        h,
    )?;
    Tensor::new(x.shape().to_vec(), g)
}

/// Relative error `|a − b| / max(|a|, |b|, floor)`, the measure used by the
/// gradient checks.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_mnist_cnn, build_synthetic_mlp, LayerSpec, NetworkSpec, Weights};

    fn linear(w: Vec<f64>, b: Vec<f64>, n: usize) -> (NetworkSpec, Weights) {
        let k = b.len();
        let spec = NetworkSpec::new([1, 1, n], k, vec![LayerSpec::Dense { units: k }, LayerSpec::Softmax]).unwrap();
        let mut weights = Weights::new();
        weights.insert("layer0.weight".into(), Tensor::new(vec![k, n], w).unwrap());
        weights.insert("layer0.bias".into(), Tensor::new(vec![k], b).unwrap());
        (spec, weights)
    }

    #[test]
    fn central_difference_of_square() {
        let g = central_difference(|v| Ok(v[0] * v[0]), &[3.0], 1e-3).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-9);
        assert!(central_difference(|v| Ok(v[0]), &[1.0], 0.0).is_err());
    }

    #[test]
    fn linear_model_gradient_closed_form() {
        // ∇_x CE = Wᵀ(σ − e_t).
        let (spec, weights) = linear(vec![1.0, -2.0, 0.5, 3.0], vec![0.1, -0.3], 2);
        let model = Model::new(&spec, &weights);
        let x = Tensor::vector(&[0.4, -0.7]);
        let (loss, g) = loss_and_gradient(model, &x, 1, 1.0).unwrap();
        let z: [f64; 2] = [0.4 - 2.0 * -0.7 + 0.1, 0.5 * 0.4 + 3.0 * -0.7 - 0.3];
        let m = z[0].max(z[1]);
        let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let p = [(z[0] - m).exp() / s, (z[1] - m).exp() / s];
        assert!((loss - -(p[1].ln())).abs() < 1e-14);
        let d = [p[0], p[1] - 1.0];
        let want = [d[0] * 1.0 + d[1] * 0.5, d[0] * -2.0 + d[1] * 3.0];
        for (a, b) in g.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let spec = build_synthetic_mlp(5, &[7, 6], 3).unwrap();
        let weights = spec.init_weights(4);
        let model = Model::new(&spec, &weights);
        let x = Tensor::vector(&[0.3, -0.2, 0.8, -0.9, 0.1]);
        for t in 0..3 {
            let (_, g) = loss_and_gradient(model, &x, t, 1.0).unwrap();
            let fd = finite_difference_gradient(model, &x, t, 1e-5).unwrap();
            for (a, b) in g.data().iter().zip(fd.data()) {
                assert!(relative_error(*a, *b, 1e-6) < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn jacobian_rows_sum_to_zero() {
        let spec = build_mnist_cnn(0.125).unwrap();
        let weights = spec.init_weights(2);
        let model = Model::new(&spec, &weights);
        let x = Tensor::new(vec![1, 28, 28], (0..784).map(|i| ((i as f64) * 0.1).sin()).collect()).unwrap();
        let j = input_jacobian(model, &x, 1.0).unwrap();
        assert_eq!(j.shape(), [10, 784]);
        let scale = j.norm_linf();
        for i in 0..784 {
            let s: f64 = (0..10).map(|r| j.data()[r * 784 + i]).sum();
            assert!(s.abs() <= 1e-12 * scale.max(1e-300) + 1e-300);
        }
    }

    #[test]
    fn bias_gradient_closed_form() {
        // ∂CE/∂b = σ − e_t for a single linear layer.
        let (spec, weights) = linear(vec![0.2, -0.1, 0.4, 0.3], vec![0.0, 0.5], 2);
        let model = Model::new(&spec, &weights);
        let mut tape = Tape::new();
        let rec = model.record(&mut tape, Tensor::vector(&[1.0, -1.0]), 1.0, Mode::Eval, true).unwrap();
        let loss = tape
            .softmax_cross_entropy(rec.scaled, Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(), vec![1.0])
            .unwrap();
        let grads = parameter_gradients(&tape, loss).unwrap();
        let p = tape.value(rec.probs).data().to_vec();
        let gb = grads["layer0.bias"].data();
        assert!((gb[0] - (p[0] - 1.0)).abs() < 1e-15);
        assert!((gb[1] - p[1]).abs() < 1e-15);
    }

    #[test]
    fn duplicated_batch_gives_same_mean_gradient() {
        let spec = build_synthetic_mlp(3, &[4], 2).unwrap();
        let weights = spec.init_weights(9);
        let model = Model::new(&spec, &weights);
        let one = |n: usize| {
            let x = Tensor::new(vec![n, 1, 1, 3], [0.2, -0.4, 0.9].repeat(n)).unwrap();
            let mut tape = Tape::new();
            let rec = model.record(&mut tape, x, 1.0, Mode::Eval, true).unwrap();
            let t = Tensor::new(vec![n, 2], [0.0, 1.0].repeat(n)).unwrap();
            let loss = tape.softmax_cross_entropy(rec.scaled, t, vec![1.0 / n as f64; n]).unwrap();
            parameter_gradients(&tape, loss).unwrap()
        };
        let (a, b) = (one(1), one(4));
        for (name, ga) in &a {
            for (x, y) in ga.data().iter().zip(b[name].data()) {
                assert!(relative_error(*x, *y, 1e-12) < 1e-12, "{name}");
            }
        }
    }

    #[test]
    fn single_example_is_enforced() {
        let spec = build_synthetic_mlp(2, &[], 2).unwrap();
        let weights = spec.init_weights(1);
        let model = Model::new(&spec, &weights);
        let x = Tensor::new(vec![2, 1, 1, 2], vec![0.0; 4]).unwrap();
        assert!(loss_and_gradient(model, &x, 0, 1.0).is_err());
        assert!(loss_and_gradient(model, &Tensor::vector(&[0.0, 0.0]), 5, 1.0).is_err());
    }
}
