use rand::Rng;
use serde::{Deserialize, Serialize};

use super::InitSpec;
use crate::data::{LabeledPoint, Task};
use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Fully connected network with a linear output layer.
///
/// Parameters are flattened layer by layer: the `out x in` weight matrix in
/// row-major order followed by the `out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    sizes: Vec<usize>,
    activation: Activation,
    task: Task,
}

struct Layer {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl Layer {
    fn weights<'a>(&self, w: &'a [f64]) -> &'a [f64] {
        &w[self.offset..self.offset + self.fan_in * self.fan_out]
    }

    fn biases<'a>(&self, w: &'a [f64]) -> &'a [f64] {
        let start = self.offset + self.fan_in * self.fan_out;
        &w[start..start + self.fan_out]
    }

    fn len(&self) -> usize {
        self.fan_out * (self.fan_in + 1)
    }
}

impl MlpModel {
    pub fn new(sizes: Vec<usize>, activation: Activation, task: Task) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(SimError::config("model.sizes", "need at least input and output layers, all non-empty"));
        }
        let out = *sizes.last().expect("len checked");
        match task {
            Task::Regression if out != 1 => {
                return Err(SimError::config("model.sizes", "regression networks have one output"))
            }
            Task::Classification if out < 2 => {
                return Err(SimError::config("model.sizes", "classification needs at least two outputs"))
            }
            _ => {}
        }
        Ok(Self {
            sizes,
            activation,
            task,
        })
    }

    /// One hidden layer of 64 tanh units.
    pub fn classifier(d_in: usize, n_classes: usize) -> Result<Self> {
        Self::new(vec![d_in, 64, n_classes], Activation::Tanh, Task::Classification)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn task(&self) -> Task {
        self.task
    }

    fn layers(&self) -> Vec<Layer> {
        let mut offset = 0;
        self.sizes
            .windows(2)
            .map(|pair| {
                let layer = Layer {
                    fan_in: pair[0],
                    fan_out: pair[1],
                    offset,
                };
                offset += layer.len();
                layer
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.sizes.windows(2).map(|p| p[1] * (p[0] + 1)).sum()
    }

    /// Splits a flat vector into per-layer `(weights, biases)` copies.
    pub fn unflatten(&self, w: &[f64]) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.layers()
            .iter()
            .map(|l| (l.weights(w).to_vec(), l.biases(w).to_vec()))
            .collect()
    }

    pub fn flatten(&self, layers: &[(Vec<f64>, Vec<f64>)]) -> Vec<f64> {
        layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect()
    }

    pub(crate) fn init_into(&self, spec: &InitSpec, out: &mut [f64], rng: &mut impl Rng) {
        for l in self.layers() {
            let n_w = l.fan_in * l.fan_out;
            spec.fill(&mut out[l.offset..l.offset + n_w], l.fan_in, l.fan_out, rng);
            out[l.offset + n_w..l.offset + l.len()].iter_mut().for_each(|b| *b = 0.0);
        }
    }

    /// Returns `(pre-activations, activations)` per layer; activations[0] is the input.
    fn forward_cached(&self, layers: &[Layer], w: &[f64], x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut zs = Vec::with_capacity(layers.len());
        let mut acts = Vec::with_capacity(layers.len() + 1);
        acts.push(x.to_vec());
        for (li, l) in layers.iter().enumerate() {
            let input = acts.last().expect("input pushed");
            let weights = l.weights(w);
            let z: Vec<f64> = l
                .biases(w)
                .iter()
                .enumerate()
                .map(|(o, b)| {
                    b + weights[o * l.fan_in..(o + 1) * l.fan_in]
                        .iter()
                        .zip(input)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                })
                .collect();
            let a = if li + 1 == layers.len() {
                z.clone()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            zs.push(z);
            acts.push(a);
        }
        (zs, acts)
    }

    pub(crate) fn forward(&self, w: &[f64], x: &[f64]) -> Vec<f64> {
        let layers = self.layers();
        let (_, mut acts) = self.forward_cached(&layers, w, x);
        acts.pop().expect("output layer")
    }

    fn point_loss(&self, out: &[f64], y: f64) -> f64 {
        match self.task {
            Task::Regression => 0.5 * (out[0] - y) * (out[0] - y),
            Task::Classification => {
                let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + out.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                lse - out[y as usize]
            }
        }
    }

    pub(crate) fn loss(&self, w: &[f64], batch: &[LabeledPoint]) -> f64 {
        let layers = self.layers();
        let total: f64 = batch
            .iter()
            .map(|p| {
                let (_, acts) = self.forward_cached(&layers, w, &p.x);
                self.point_loss(acts.last().expect("output"), p.y)
            })
            .sum();
        total / batch.len() as f64
    }

    pub(crate) fn loss_grad_into(&self, w: &[f64], batch: &[LabeledPoint], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let layers = self.layers();
        let n = batch.len() as f64;
        let mut total = 0.0;
        for p in batch {
            let (zs, acts) = self.forward_cached(&layers, w, &p.x);
            let out = acts.last().expect("output");
            total += self.point_loss(out, p.y);
            let mut delta: Vec<f64> = match self.task {
                Task::Regression => vec![(out[0] - p.y) / n],
                Task::Classification => {
                    let mut d = super::softmax(out);
                    d[p.y as usize] -= 1.0;
                    d.iter_mut().for_each(|v| *v /= n);
                    d
                }
            };
            for li in (0..layers.len()).rev() {
                let l = &layers[li];
                let input = &acts[li];
                for (o, &d) in delta.iter().enumerate() {
                    let row = l.offset + o * l.fan_in;
                    grad[row..row + l.fan_in]
                        .iter_mut()
                        .zip(input)
                        .for_each(|(g, a)| *g += d * a);
                    grad[l.offset + l.fan_in * l.fan_out + o] += d;
                }
                if li > 0 {
                    let weights = l.weights(w);
                    let prev_z = &zs[li - 1];
                    let prev_a = &acts[li];
                    delta = (0..l.fan_in)
                        .map(|i| {
                            let back: f64 = delta
                                .iter()
                                .enumerate()
                                .map(|(o, d)| d * weights[o * l.fan_in + i])
                                .sum();
                            back * self.activation.derivative(prev_z[i], prev_a[i])
                        })
                        .collect();
                }
            }
        }
        total / n
    }
}
