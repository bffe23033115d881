//! A minimal dense feed-forward network with hand-written backpropagation,
//! plus the Adam optimizer. Parameters live in one flat vector so optimizers
//! and finite-difference checks can address them uniformly.

use nalgebra::{DMatrix, DMatrixView};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: &mut DMatrix<f64>) {
        if self == Activation::Tanh {
            z.apply(|v| *v = v.tanh());
        }
    }

    /// Multiplies `grad` by the activation derivative, given the activated output.
    fn backprop(self, out: &DMatrix<f64>, grad: &mut DMatrix<f64>) {
        if self == Activation::Tanh {
            grad.zip_apply(out, |g, h| *g *= 1.0 - h * h);
        }
    }
}

/// Layer `l` maps `sizes[l] -> sizes[l + 1]`; the activation sits between
/// layers, never after the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
}

/// Per-layer activations kept for the backward pass.
pub struct ForwardCache {
    /// `outputs[0]` is the input batch; `outputs[l + 1]` is layer `l`'s output.
    outputs: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.outputs.last().unwrap()
    }
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    pub fn zeros(sizes: Vec<usize>, activation: Activation) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least one layer");
        let n = param_count(&sizes);
        Mlp {
            sizes,
            activation,
            params: vec![0.0; n],
        }
    }

    /// Uniform fan-in initialization: every weight and bias of a layer with
    /// `fan_in` inputs is drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init_uniform(sizes: Vec<usize>, activation: Activation, rng: &mut impl Rng) -> Self {
        let mut mlp = Mlp::zeros(sizes, activation);
        for l in 0..mlp.layers() {
            let bound = 1.0 / (mlp.sizes[l] as f64).sqrt();
            let (w, b) = mlp.layer_ranges(l);
            for v in &mut mlp.params[w.start..b.end] {
                *v = rng.random_range(-bound..bound);
            }
        }
        mlp
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Flat ranges of layer `l`'s weight (column-major, `out x in`) and bias.
    pub fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let mut off = 0;
        for w in self.sizes.windows(2).take(l) {
            off += w[0] * w[1] + w[1];
        }
        let (inp, out) = (self.sizes[l], self.sizes[l + 1]);
        let w = off..off + inp * out;
        let b = w.end..w.end + out;
        (w, b)
    }

    pub fn weight(&self, l: usize) -> DMatrixView<'_, f64> {
        let (w, _) = self.layer_ranges(l);
        DMatrixView::from_slice(&self.params[w], self.sizes[l + 1], self.sizes[l])
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let (_, b) = self.layer_ranges(l);
        &self.params[b]
    }

    pub fn set_weight(&mut self, l: usize, m: &DMatrix<f64>) {
        assert_eq!(m.shape(), (self.sizes[l + 1], self.sizes[l]));
        let (w, _) = self.layer_ranges(l);
        self.params[w].copy_from_slice(m.as_slice());
    }

    pub fn set_bias(&mut self, l: usize, b: &[f64]) {
        let (_, r) = self.layer_ranges(l);
        self.params[r].copy_from_slice(b);
    }

    /// Forward pass over a batch (one row per sample).
    pub fn forward_cached(&self, input: &DMatrix<f64>) -> ForwardCache {
        assert_eq!(input.ncols(), self.input_dim());
        let mut outputs = Vec::with_capacity(self.sizes.len());
        outputs.push(input.clone());
        for l in 0..self.layers() {
            let prev = outputs.last().unwrap();
            let mut z = prev * self.weight(l).transpose();
            let bias = self.bias(l);
            for mut row in z.row_iter_mut() {
                for (v, b) in row.iter_mut().zip(bias) {
                    *v += b;
                }
            }
            if l + 1 < self.layers() {
                self.activation.apply(&mut z);
            }
            outputs.push(z);
        }
        ForwardCache { outputs }
    }

    pub fn forward(&self, input: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_cached(input).outputs.pop().unwrap()
    }

    /// Gradient of a scalar loss w.r.t. all parameters, given `d loss / d output`.
    /// Also returns `d loss / d input`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = grad_out;
        for l in (0..self.layers()).rev() {
            let input = &cache.outputs[l];
            let gw = delta.transpose() * input;
            let (w, b) = self.layer_ranges(l);
            grads[w].copy_from_slice(gw.as_slice());
            for (g, col) in grads[b].iter_mut().zip(delta.column_iter()) {
                *g = col.sum();
            }
            let mut next = &delta * self.weight(l);
            if l > 0 {
                self.activation.backprop(input, &mut next);
            }
            delta = next;
        }
        (grads, delta)
    }
}

/// Adaptive-moment gradient descent.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.learning_rate * mh / (vh.sqrt() + self.epsilon);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::init_uniform(vec![3, 5, 4, 2], Activation::Tanh, &mut rng);
        let x = DMatrix::from_fn(4, 3, |i, j| ((i * 3 + j) as f64 * 0.37).sin());
        // loss = sum(out * c) for a fixed c
        let c = DMatrix::from_fn(4, 2, |i, j| 0.5 + i as f64 - j as f64);
        let loss = |m: &Mlp| m.forward(&x).component_mul(&c).sum();
        let cache = mlp.forward_cached(&x);
        let (g, _) = mlp.backward(&cache, c.clone());
        for i in 0..mlp.params.len() {
            let mut p = mlp.clone();
            p.params[i] += 1e-6;
            let up = loss(&p);
            p.params[i] -= 2e-6;
            let down = loss(&p);
            let fd = (up - down) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2));
    }
}
