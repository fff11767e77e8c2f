//! Fully connected layer stacks with batched forward/backward passes.
//!
//! Weights are stored row-major as `outputs x inputs`. Hidden layers use the
//! configured activation; the final layer is linear.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, v: &mut [f64]) {
        match self {
            Activation::Tanh => v.iter_mut().for_each(|x| *x = x.tanh()),
            Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
        }
    }

    /// Multiplies `delta` by the derivative, expressed through the layer output.
    fn backprop(self, out: &[f64], delta: &mut [f64]) {
        match self {
            Activation::Tanh => delta
                .iter_mut()
                .zip(out)
                .for_each(|(d, y)| *d *= 1.0 - y * y),
            Activation::Relu => delta
                .iter_mut()
                .zip(out)
                .for_each(|(d, y)| {
                    if *y <= 0.0 {
                        *d = 0.0
                    }
                }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform in +-sqrt(1/fan_in) for weights and biases.
    pub fn random<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = (1.0 / inputs.max(1) as f64).sqrt();
        let mut draw = || rng.gen_range(-bound..=bound);
        let weights = (0..inputs * outputs).map(|_| draw()).collect();
        let bias = (0..outputs).map(|_| draw()).collect();
        Self {
            inputs,
            outputs,
            weights,
            bias,
        }
    }

    pub fn row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.inputs..(o + 1) * self.inputs]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..n {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

/// Layer inputs/outputs for a batch: `acts[0]` is the network input and
/// `acts[i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub batch: usize,
    pub acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Mlp {
    /// `sizes` lists input, hidden..., output widths.
    pub fn random<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Dense::random(w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Self {
        let layers = sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Self { layers, activation }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
            activation: self.activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn forward(&self, input: Vec<f64>, batch: usize) -> MlpCache {
        debug_assert_eq!(input.len(), batch * self.input_dim());
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input);
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            let x = acts.last().expect("input present");
            let mut out = Vec::with_capacity(batch * layer.outputs);
            for s in 0..batch {
                let xs = &x[s * layer.inputs..(s + 1) * layer.inputs];
                for o in 0..layer.outputs {
                    out.push(layer.bias[o] + dot(layer.row(o), xs));
                }
            }
            if i != last {
                self.activation.apply(&mut out);
            }
            acts.push(out);
        }
        MlpCache { batch, acts }
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input when `want_input` is set.
    pub fn backward(
        &self,
        cache: &MlpCache,
        dout: Vec<f64>,
        grads: &mut Mlp,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let batch = cache.batch;
        let mut delta = dout;
        let last = self.layers.len().saturating_sub(1);
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let g = &mut grads.layers[i];
            if i != last {
                self.activation.backprop(&cache.acts[i + 1], &mut delta);
            }
            let x = &cache.acts[i];
            for s in 0..batch {
                let ds = &delta[s * layer.outputs..(s + 1) * layer.outputs];
                let xs = &x[s * layer.inputs..(s + 1) * layer.inputs];
                for (o, &d) in ds.iter().enumerate() {
                    if d != 0.0 {
                        axpy(d, xs, &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs]);
                        g.bias[o] += d;
                    }
                }
            }
            if i == 0 && !want_input {
                return None;
            }
            let mut dx = vec![0.0; batch * layer.inputs];
            for s in 0..batch {
                let ds = &delta[s * layer.outputs..(s + 1) * layer.outputs];
                let dxs = &mut dx[s * layer.inputs..(s + 1) * layer.inputs];
                for (o, &d) in ds.iter().enumerate() {
                    if d != 0.0 {
                        axpy(d, layer.row(o), dxs);
                    }
                }
            }
            delta = dx;
        }
        Some(delta)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
    }
}
