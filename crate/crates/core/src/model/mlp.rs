use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::common::RandomSource;

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn swish(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn swish_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s + z * s * (1.0 - s)
}

/// Fully connected network with Swish hidden units and a linear output.
///
/// Parameters live in one flat buffer, layer by layer: the row-major
/// `out x in` weight matrix followed by the `out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

impl Mlp {
    pub fn new(sizes: Vec<usize>, rng: &mut RandomSource) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|s| *s > 0));
        let count: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let mut params = vec![0.0; count];
        let mut offset = 0;
        for w in sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let limit = (6.0 / (n_in + n_out) as f64).sqrt();
            for p in &mut params[offset..offset + n_in * n_out] {
                *p = rng.gen_range(-limit..limit);
            }
            offset += n_in * n_out + n_out;
        }
        Self { sizes, params }
    }

    pub fn from_parts(sizes: Vec<usize>, params: Vec<f64>) -> Option<Self> {
        let count: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        (sizes.len() >= 2 && params.len() == count).then_some(Self { sizes, params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.input_dim());
        let mut act = input.to_vec();
        let mut offset = 0;
        let layers = self.sizes.len() - 1;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + n_in * n_out];
            let biases = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let mut next = biases.to_vec();
            for (o, n) in next.iter_mut().enumerate() {
                let row = &weights[o * n_in..(o + 1) * n_in];
                *n += row.iter().zip(&act).map(|(a, b)| a * b).sum::<f64>();
            }
            if l + 1 < layers {
                next.iter_mut().for_each(|v| *v = swish(*v));
            }
            act = next;
            offset += n_in * n_out + n_out;
        }
        act
    }

    /// Mean squared error over a batch and its gradient w.r.t. the flat
    /// parameter buffer.
    ///
    /// `inputs` is `n x input_dim`, `targets` is `n x output_dim`, both
    /// row-major.
    pub fn loss_and_grad(&self, inputs: &[f64], targets: &[f64], n: usize) -> (f64, Vec<f64>) {
        let layers = self.sizes.len() - 1;
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(layers);
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers + 1);
        acts.push(inputs.to_vec());
        let mut offset = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + n_in * n_out];
            let biases = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let prev = &acts[l];
            let mut z = vec![0.0; n * n_out];
            for r in 0..n {
                let a = &prev[r * n_in..(r + 1) * n_in];
                let zr = &mut z[r * n_out..(r + 1) * n_out];
                for o in 0..n_out {
                    let row = &weights[o * n_in..(o + 1) * n_in];
                    zr[o] = biases[o] + row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
                }
            }
            let a = if l + 1 < layers {
                z.iter().map(|v| swish(*v)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
            acts.push(a);
            offset += n_in * n_out + n_out;
        }

        let out_dim = self.output_dim();
        let out = &acts[layers];
        let scale = 1.0 / (n * out_dim) as f64;
        let mut loss = 0.0;
        let mut delta: Vec<f64> = out
            .iter()
            .zip(targets)
            .map(|(o, t)| {
                let e = o - t;
                loss += e * e;
                2.0 * e * scale
            })
            .collect();
        loss *= scale;

        let mut grad = vec![0.0; self.params.len()];
        let mut offsets: Vec<usize> = Vec::with_capacity(layers);
        let mut acc = 0;
        for w in self.sizes.windows(2) {
            offsets.push(acc);
            acc += w[0] * w[1] + w[1];
        }
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            if l + 1 < layers {
                for (d, z) in delta.iter_mut().zip(&pre[l]) {
                    *d *= swish_grad(*z);
                }
            }
            let prev = &acts[l];
            {
                let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for r in 0..n {
                    let d = &delta[r * n_out..(r + 1) * n_out];
                    let a = &prev[r * n_in..(r + 1) * n_in];
                    for o in 0..n_out {
                        let dv = d[o];
                        if dv == 0.0 {
                            continue;
                        }
                        gb[o] += dv;
                        let g = &mut gw[o * n_in..(o + 1) * n_in];
                        for (gi, ai) in g.iter_mut().zip(a) {
                            *gi += dv * ai;
                        }
                    }
                }
            }
            if l > 0 {
                let weights = &self.params[off..off + n_in * n_out];
                let mut back = vec![0.0; n * n_in];
                for r in 0..n {
                    let d = &delta[r * n_out..(r + 1) * n_out];
                    let b = &mut back[r * n_in..(r + 1) * n_in];
                    for o in 0..n_out {
                        let dv = d[o];
                        let row = &weights[o * n_in..(o + 1) * n_in];
                        for (bi, wi) in b.iter_mut().zip(row) {
                            *bi += dv * wi;
                        }
                    }
                }
                delta = back;
            }
        }
        (loss, grad)
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i] + self.weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}
