//! Multilayer perceptron with analytic gradients.
//!
//! Hidden layers use ReLU and the output layer is the identity, so the model
//! emits raw logits. Everything is `f64`.

use std::io::{self, Read, Write};
use std::path::Path;

use rand::Rng as _;

use crate::error::{arg, non_negative, positive, Error, Result};
use crate::rng::rng_from_seed;

const CHECKPOINT_MAGIC: &[u8; 8] = b"SFKDMLP1";

/// One affine layer; `weight` is `outputs × inputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    #[inline]
    pub fn w(&self, out: usize, inp: usize) -> f64 {
        self.weight[out * self.inputs + inp]
    }
}

/// Parameters of the MLP. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
}

/// Gradients share the parameter layout.
pub type Gradients = ModelParams;

/// Row-major `batch × classes` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub values: Vec<f64>,
    pub num_classes: usize,
}

impl Logits {
    pub fn new(values: Vec<f64>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 || !values.len().is_multiple_of(num_classes) {
            return arg("logit buffer does not divide into rows");
        }
        Ok(Self {
            values,
            num_classes,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return arg("ragged logit rows");
        }
        Self::new(rows.concat(), c)
    }

    pub fn batch_size(&self) -> usize {
        self.values.len() / self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.num_classes)
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the input batch; `activations[l]` the output of layer `l - 1`.
    activations: Vec<Vec<f64>>,
    batch: usize,
}

impl ForwardTrace {
    pub fn logits(&self, num_classes: usize) -> Logits {
        Logits {
            values: self.activations.last().cloned().unwrap_or_default(),
            num_classes,
        }
    }
}

/// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
pub fn init_params(dims: &[usize], seed: u64) -> Result<ModelParams> {
    if dims.len() < 2 {
        return arg("model needs at least an input and an output dimension");
    }
    if dims.contains(&0) {
        return arg("layer dimensions must be positive");
    }
    let mut rng = rng_from_seed(seed);
    let layers = dims
        .windows(2)
        .map(|w| {
            let (inputs, outputs) = (w[0], w[1]);
            let bound = 1.0 / (inputs as f64).sqrt();
            let weight = (0..inputs * outputs)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            Layer {
                inputs,
                outputs,
                weight,
                bias: vec![0.0; outputs],
            }
        })
        .collect();
    Ok(ModelParams { layers })
}

impl ModelParams {
    /// Builds parameters from explicit layers, checking that shapes chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return arg("model needs at least one layer");
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return arg(format!("layer {i} buffers do not match its shape"));
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return arg(format!("layer {i} input does not match previous output"));
            }
        }
        Ok(Self { layers })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 {
            return arg("model needs at least an input and an output dimension");
        }
        Ok(Self {
            layers: dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].inputs];
        dims.extend(self.layers.iter().map(|l| l.outputs));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// All values in layer order, weights before biases.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.inputs == b.inputs && a.outputs == b.outputs)
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += scale * b;
        }
    }

    /// Frozen deep copy, e.g. a teacher model.
    pub fn snapshot(&self) -> ModelParams {
        self.clone()
    }

    pub fn restore(snapshot: &ModelParams) -> ModelParams {
        snapshot.clone()
    }

    fn check_input(&self, x: &[f64]) -> Result<usize> {
        let f = self.input_dim();
        if !x.len().is_multiple_of(f) {
            return arg(format!(
                "feature buffer of length {} is not a multiple of input dimension {f}",
                x.len()
            ));
        }
        Ok(x.len() / f)
    }

    /// Logits for a row-major batch of feature vectors.
    pub fn forward(&self, x: &[f64]) -> Result<Logits> {
        Ok(self.forward_trace(x)?.logits(self.num_classes()))
    }

    /// Forward pass that keeps every activation for [`ModelParams::backward`].
    pub fn forward_trace(&self, x: &[f64]) -> Result<ForwardTrace> {
        let batch = self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let input = activations.last().expect("non-empty");
            let mut out = vec![0.0; batch * layer.outputs];
            for n in 0..batch {
                let xin = &input[n * layer.inputs..(n + 1) * layer.inputs];
                let yout = &mut out[n * layer.outputs..(n + 1) * layer.outputs];
                for (o, y) in yout.iter_mut().enumerate() {
                    let row = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
                    let mut acc = layer.bias[o];
                    for (w, xi) in row.iter().zip(xin) {
                        acc += w * xi;
                    }
                    *y = if li < last { acc.max(0.0) } else { acc };
                }
            }
            activations.push(out);
        }
        Ok(ForwardTrace { activations, batch })
    }

    /// Backpropagates `d_logits` (`batch × classes`, already scaled by any
    /// batch reduction) through the trace of a forward pass.
    pub fn backward(&self, trace: &ForwardTrace, d_logits: &[f64]) -> Result<Gradients> {
        let batch = trace.batch;
        if d_logits.len() != batch * self.num_classes() {
            return arg("logit gradient does not match the forward batch");
        }
        let mut grads = self.zeros_like();
        let mut delta = d_logits.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &trace.activations[li];
            let g = &mut grads.layers[li];
            for n in 0..batch {
                let d = &delta[n * layer.outputs..(n + 1) * layer.outputs];
                let xin = &input[n * layer.inputs..(n + 1) * layer.inputs];
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    g.bias[o] += dv;
                    let grow = &mut g.weight[o * layer.inputs..(o + 1) * layer.inputs];
                    for (gw, xi) in grow.iter_mut().zip(xin) {
                        *gw += dv * xi;
                    }
                }
            }
            if li == 0 {
                break;
            }
            let mut prev = vec![0.0; batch * layer.inputs];
            for n in 0..batch {
                let d = &delta[n * layer.outputs..(n + 1) * layer.outputs];
                let xin = &input[n * layer.inputs..(n + 1) * layer.inputs];
                let p = &mut prev[n * layer.inputs..(n + 1) * layer.inputs];
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    let row = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
                    for (pi, w) in p.iter_mut().zip(row) {
                        *pi += w * dv;
                    }
                }
                // ReLU: the stored activation is positive exactly where the unit was active.
                for (pi, &a) in p.iter_mut().zip(xin) {
                    if a <= 0.0 {
                        *pi = 0.0;
                    }
                }
            }
            delta = prev;
        }
        Ok(grads)
    }

    /// In-place SGD step: `w -= eta * (grad + weight_decay * w)` for weights,
    /// `b -= eta * grad` for biases.
    pub fn apply_sgd(&mut self, grads: &Gradients, eta: f64, weight_decay: f64) -> Result<()> {
        if !positive(eta) {
            return arg("learning rate must be positive");
        }
        if !non_negative(weight_decay) {
            return arg("weight decay must be non-negative");
        }
        if !self.same_shape(grads) {
            return arg("gradient shape does not match parameters");
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, gw) in layer.weight.iter_mut().zip(&g.weight) {
                *w -= eta * (gw + weight_decay * *w);
            }
            for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= eta * gb;
            }
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> io::Result<()> {
        let dims = self.dims();
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&(dims.len() as u64).to_le_bytes())?;
        for d in &dims {
            out.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in self.values() {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a model checkpoint".into()));
        }
        let mut word = [0u8; 8];
        input.read_exact(&mut word)?;
        let n_dims = u64::from_le_bytes(word) as usize;
        if !(2..=64).contains(&n_dims) {
            return Err(Error::Format(format!("implausible layer count {n_dims}")));
        }
        let mut dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            input.read_exact(&mut word)?;
            dims.push(u64::from_le_bytes(word) as usize);
        }
        let mut params = ModelParams::zeros(&dims)?;
        for v in params.values_mut() {
            input.read_exact(&mut word)?;
            *v = f64::from_le_bytes(word);
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = io::BufWriter::new(file);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_checkpoint(io::BufReader::new(file))
    }
}

/// Functional SGD step returning the updated parameters.
pub fn sgd_step(
    params: &ModelParams,
    grads: &Gradients,
    eta: f64,
    weight_decay: f64,
) -> Result<ModelParams> {
    let mut next = params.clone();
    next.apply_sgd(grads, eta, weight_decay)?;
    Ok(next)
}

/// Weighted parameter average; weights are normalized internally.
pub fn weighted_average(models: &[ModelParams], weights: &[f64]) -> Result<ModelParams> {
    if models.is_empty() || models.len() != weights.len() {
        return arg("need one weight per model and at least one model");
    }
    let total: f64 = weights.iter().sum();
    if !positive(total) {
        return arg("average weights must have positive mass");
    }
    let mut avg = models[0].zeros_like();
    for (m, w) in models.iter().zip(weights) {
        if !m.same_shape(&avg) {
            return arg("cannot average models of different shapes");
        }
        avg.add_scaled(m, w / total);
    }
    Ok(avg)
}

/// Log-sum-exp of `z / tau` with max subtraction.
#[inline]
pub(crate) fn log_sum_exp(z: &[f64], tau: f64) -> f64 {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) / tau;
    m + z.iter().map(|&v| (v / tau - m).exp()).sum::<f64>().ln()
}

/// Stable softmax of `z / tau` into `out`.
#[inline]
pub(crate) fn softmax_into(z: &[f64], tau: f64, out: &mut [f64]) {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) / tau;
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v / tau - m).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Temperature softmax `p_c = exp(z_c/τ) / Σ_j exp(z_j/τ)`.
pub fn softmax_temp(z: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !positive(tau) {
        return arg("temperature must be positive");
    }
    let mut out = vec![0.0; z.len()];
    softmax_into(z, tau, &mut out);
    Ok(out)
}

fn check_targets(logits: &Logits, labels: &[usize]) -> Result<()> {
    if logits.batch_size() == 0 {
        return arg("empty batch");
    }
    if labels.len() != logits.batch_size() {
        return arg("one label per logit row required");
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.num_classes) {
        return arg(format!(
            "label {bad} out of range for {} classes",
            logits.num_classes
        ));
    }
    Ok(())
}

/// Mean negative log-likelihood under the softmax of the logits.
pub fn cross_entropy(logits: &Logits, labels: &[usize]) -> Result<f64> {
    check_targets(logits, labels)?;
    let total: f64 = logits
        .rows()
        .zip(labels)
        .map(|(z, &t)| log_sum_exp(z, 1.0) - z[t])
        .sum();
    Ok(total / labels.len() as f64)
}

/// Cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_with_grad(logits: &Logits, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    check_targets(logits, labels)?;
    let n = labels.len() as f64;
    let c = logits.num_classes;
    let mut grad = vec![0.0; logits.values.len()];
    let mut total = 0.0;
    for (i, (z, &t)) in logits.rows().zip(labels).enumerate() {
        total += log_sum_exp(z, 1.0) - z[t];
        let g = &mut grad[i * c..(i + 1) * c];
        softmax_into(z, 1.0, g);
        g[t] -= 1.0;
        for v in g.iter_mut() {
            *v /= n;
        }
    }
    Ok((total / n, grad))
}

pub(crate) fn check_batch_targets(logits: &Logits, labels: &[usize]) -> Result<()> {
    check_targets(logits, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn init_shapes_range_and_determinism() {
        let p = init_params(&[4, 8, 3], 5).unwrap();
        assert_eq!(p.layers[0].weight.len(), 32);
        assert_eq!((p.layers[0].outputs, p.layers[0].inputs), (8, 4));
        assert_eq!((p.layers[1].outputs, p.layers[1].inputs), (3, 8));
        assert_eq!(p.layers[0].bias.len(), 8);
        assert_eq!(p.layers[1].bias.len(), 3);
        for l in &p.layers {
            let bound = 1.0 / (l.inputs as f64).sqrt();
            assert!(l.weight.iter().all(|w| w.abs() <= bound));
            assert!(l.bias.iter().all(|&b| b == 0.0));
        }
        assert_eq!(
            init_params(&[2, 3], 5).unwrap(),
            init_params(&[2, 3], 5).unwrap()
        );
        assert!(init_params(&[3], 5).is_err());
        assert!(init_params(&[], 5).is_err());
    }

    #[test]
    fn forward_zero_and_identity() {
        let zero = ModelParams::zeros(&[3, 4, 2]).unwrap();
        let out = zero.forward(&[1.0, 2.0, 3.0, -1.0, 0.5, 9.0]).unwrap();
        assert!(out.values.iter().all(|&v| v == 0.0));

        let ident = ModelParams::from_layers(vec![Layer {
            inputs: 2,
            outputs: 2,
            weight: vec![1.0, 0.0, 0.0, 1.0],
            bias: vec![0.0, 0.0],
        }])
        .unwrap();
        assert_eq!(ident.forward(&[2.0, -1.0]).unwrap().values, vec![2.0, -1.0]);
        assert!(ident.forward(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn forward_matches_dot_products() {
        let p = init_params(&[3, 4, 2], 9).unwrap();
        let x: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
        let out = p.forward(&x).unwrap();
        for n in 0..5 {
            let xs = &x[n * 3..n * 3 + 3];
            let mut h = [0.0; 4];
            for (o, hv) in h.iter_mut().enumerate() {
                let s: f64 =
                    (0..3).map(|i| p.layers[0].w(o, i) * xs[i]).sum::<f64>() + p.layers[0].bias[o];
                *hv = s.max(0.0);
            }
            for o in 0..2 {
                let s: f64 =
                    (0..4).map(|i| p.layers[1].w(o, i) * h[i]).sum::<f64>() + p.layers[1].bias[o];
                assert!(close(out.row(n)[o], s, 1e-12));
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_temp(&[0.0, 0.0, 0.0], 3.0).unwrap();
        assert!(p.iter().all(|&v| close(v, 1.0 / 3.0, 1e-15)));
        let a = softmax_temp(&[0.0, 1.0, 2.0], 2.0).unwrap();
        let b = softmax_temp(&[7.5, 8.5, 9.5], 2.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(close(*x, *y, 1e-15));
        }
        let p = softmax_temp(&[1.0, 0.0], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!(close(p[0], e / (e + 1.0), 1e-15));
        assert!(close(p[0], 0.731059, 1e-6) && close(p[1], 0.268941, 1e-6));
        assert!(softmax_temp(&[1.0], 0.0).is_err());
        assert!(softmax_temp(&[1.0], -1.0).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Logits::new(vec![0.0; 10], 10).unwrap();
        assert!(close(
            cross_entropy(&uniform, &[3]).unwrap(),
            10f64.ln(),
            1e-12
        ));
        let mut sat = vec![0.0; 10];
        sat[4] = 30.0;
        let sat = Logits::new(sat, 10).unwrap();
        assert!(cross_entropy(&sat, &[4]).unwrap() < 1e-9);
        let l = Logits::new(vec![1.0, 0.0], 2).unwrap();
        let e = std::f64::consts::E;
        let ce = cross_entropy(&l, &[0]).unwrap();
        assert!(close(ce, -(e / (e + 1.0)).ln(), 1e-15));
        assert!(close(ce, 0.313262, 1e-6));
        assert!(cross_entropy(&l, &[2]).is_err());
        assert!(cross_entropy(&Logits::new(vec![], 2).unwrap(), &[]).is_err());
    }

    #[test]
    fn sgd_examples() {
        let p = init_params(&[3, 2], 1).unwrap();
        let same = sgd_step(&p, &p.zeros_like(), 0.1, 0.0).unwrap();
        assert_eq!(same, p);

        let scalar = |w: f64| {
            ModelParams::from_layers(vec![Layer {
                inputs: 1,
                outputs: 1,
                weight: vec![w],
                bias: vec![0.0],
            }])
            .unwrap()
        };
        let g = scalar(0.5);
        let w = sgd_step(&scalar(1.0), &g, 0.1, 0.0).unwrap();
        assert!(close(w.layers[0].weight[0], 0.95, 1e-15));
        let w = sgd_step(&scalar(1.0), &g, 0.1, 1e-4).unwrap();
        assert!(close(w.layers[0].weight[0], 0.94999, 1e-15));
        assert!(sgd_step(&scalar(1.0), &init_params(&[2, 1], 0).unwrap(), 0.1, 0.0).is_err());
        assert!(sgd_step(&scalar(1.0), &g, 0.0, 0.0).is_err());
    }

    #[test]
    fn bias_is_not_decayed() {
        let mut p = ModelParams::from_layers(vec![Layer {
            inputs: 1,
            outputs: 1,
            weight: vec![1.0],
            bias: vec![1.0],
        }])
        .unwrap();
        let zero = p.zeros_like();
        p.apply_sgd(&zero, 0.5, 0.1).unwrap();
        assert_eq!(p.layers[0].bias[0], 1.0);
        assert!(close(p.layers[0].weight[0], 0.95, 1e-15));
    }

    #[test]
    fn snapshot_isolation() {
        let mut live = init_params(&[2, 4, 2], 3).unwrap();
        let snap = live.snapshot();
        let x = [0.3, -0.7, 1.1, 0.2];
        let before = live.forward(&x).unwrap();
        for _ in 0..10 {
            let (_, d) = cross_entropy_with_grad(&live.forward(&x).unwrap(), &[0, 1]).unwrap();
            let trace = live.forward_trace(&x).unwrap();
            let g = live.backward(&trace, &d).unwrap();
            live.apply_sgd(&g, 0.5, 0.0).unwrap();
        }
        assert_ne!(live, snap);
        assert_eq!(ModelParams::restore(&snap).forward(&x).unwrap(), before);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(matches!(
            ModelParams::read_checkpoint(&b"NOTAMODEL......."[..]),
            Err(Error::Format(_))
        ));
        let p = init_params(&[2, 2], 0).unwrap();
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            ModelParams::read_checkpoint(&buf[..]),
            Err(Error::Io(_))
        ));
    }

    #[test]
    fn weighted_average_examples() {
        let p = init_params(&[2, 3], 1).unwrap();
        let q = init_params(&[2, 3], 2).unwrap();
        let avg = weighted_average(&[p.clone(), q.clone()], &[5.0, 5.0]).unwrap();
        for ((a, x), y) in avg.values().zip(p.values()).zip(q.values()) {
            assert!(close(*a, (x + y) / 2.0, 1e-15));
        }
        let avg = weighted_average(&[p.clone(), q.clone()], &[1.0, 3.0]).unwrap();
        for ((a, x), y) in avg.values().zip(p.values()).zip(q.values()) {
            assert!(close(*a, 0.25 * x + 0.75 * y, 1e-15));
        }
        let same = weighted_average(&[p.clone(), p.clone(), p.clone()], &[1.0, 2.0, 7.0]).unwrap();
        for (a, x) in same.values().zip(p.values()) {
            assert!(close(*a, *x, 1e-15));
        }
    }
}
