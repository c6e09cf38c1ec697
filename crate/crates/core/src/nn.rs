//! Small fully connected networks with SiLU activations, explicit
//! reverse-mode gradients and an Adam optimizer.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{Dtype, SectionFile};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// out×in
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpShape {
    pub sizes: Vec<usize>,
    pub activation: String,
}

/// Intermediate values kept from the forward pass.
pub struct Cache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

impl Mlp {
    /// Xavier-uniform weights, zero biases. With `zero_output` the last
    /// layer starts at zero so the network initially outputs zeros.
    pub fn new<R: Rng>(sizes: &[usize], rng: &mut R, zero_output: bool) -> Self {
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for (idx, pair) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let last = idx == sizes.len() - 2;
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = if last && zero_output {
                Array2::zeros((fan_out, fan_in))
            } else {
                Array2::from_shape_fn((fan_out, fan_in), |_| a * (2.0 * rng.random::<f64>() - 1.0))
            };
            layers.push(Dense {
                w,
                b: Array1::zeros(fan_out),
            });
        }
        Self { layers }
    }

    pub fn shape(&self) -> MlpShape {
        let mut sizes = vec![self.layers[0].w.ncols()];
        sizes.extend(self.layers.iter().map(|l| l.w.nrows()));
        MlpShape {
            sizes,
            activation: "silu".into(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Cache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = h.dot(&layer.w.t()) + &layer.b.view().insert_axis(Axis(0));
            inputs.push(h);
            if i + 1 == self.layers.len() {
                h = z.clone();
            } else {
                h = z.mapv(silu);
            }
            pre.push(z);
        }
        (h, Cache { inputs, pre })
    }

    pub fn predict(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = h.dot(&layer.w.t()) + &layer.b.view().insert_axis(Axis(0));
            h = if i + 1 == self.layers.len() { z } else { z.mapv(silu) };
        }
        h
    }

    /// Gradients of a scalar loss with respect to parameters and input,
    /// given the loss gradient at the output.
    pub fn backward(&self, cache: &Cache, dout: &Array2<f64>) -> (Vec<Dense>, Array2<f64>) {
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut dz = dout.clone();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let dw = dz.t().dot(&cache.inputs[i]);
            let db = dz.sum_axis(Axis(0));
            let dh = dz.dot(&layer.w);
            grads.push(Dense { w: dw, b: db });
            if i > 0 {
                let z = &cache.pre[i - 1];
                dz = dh * &z.mapv(silu_grad);
            } else {
                dz = dh;
            }
        }
        grads.reverse();
        (grads, dz)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    /// Round every weight to f32 so in-memory and on-disk nets agree.
    pub fn freeze(&mut self) {
        for l in &mut self.layers {
            l.w.mapv_inplace(|v| v as f32 as f64);
            l.b.mapv_inplace(|v| v as f32 as f64);
        }
    }

    pub fn write_sections(&self, prefix: &str, f: &mut SectionFile) {
        for (i, l) in self.layers.iter().enumerate() {
            f.push_matrix(&format!("{prefix}.{i}.w"), Dtype::F32, &l.w);
            f.push_vector(&format!("{prefix}.{i}.b"), Dtype::F32, l.b.as_slice().unwrap());
        }
    }

    pub fn read_sections(prefix: &str, shape: &MlpShape, f: &SectionFile) -> Result<Self> {
        if shape.activation != "silu" {
            return Err(Error::format("artifact", format!("unknown activation {}", shape.activation)));
        }
        let mut layers = Vec::new();
        for (i, pair) in shape.sizes.windows(2).enumerate() {
            let w = f.matrix(&format!("{prefix}.{i}.w"))?;
            let b = f.vector(&format!("{prefix}.{i}.b"))?;
            if w.dim() != (pair[1], pair[0]) || b.len() != pair[1] {
                return Err(Error::format("artifact", format!("layer {prefix}.{i} shape mismatch")));
            }
            layers.push(Dense { w, b });
        }
        Ok(Self { layers })
    }

    pub fn zero_grads(&self) -> Vec<Dense> {
        self.layers
            .iter()
            .map(|l| Dense {
                w: Array2::zeros(l.w.dim()),
                b: Array1::zeros(l.b.len()),
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Dense>,
    v: Vec<Dense>,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: net.zero_grads(),
            v: net.zero_grads(),
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &[Dense]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((layer, g), (m, v)) in net
            .layers
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let upd = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            };
            ndarray::Zip::from(&mut layer.w)
                .and(&g.w)
                .and(&mut m.w)
                .and(&mut v.w)
                .for_each(|p, &g, m, v| upd(p, g, m, v));
            ndarray::Zip::from(&mut layer.b)
                .and(&g.b)
                .and(&mut m.b)
                .and(&mut v.b)
                .for_each(|p, &g, m, v| upd(p, g, m, v));
        }
    }
}

/// Adam on a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamVec {
    pub lr: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamVec {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - 0.9f64.powi(self.t);
        let c2 = 1.0 - 0.999f64.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = 0.9 * self.m[i] + 0.1 * grads[i];
            self.v[i] = 0.999 * self.v[i] + 0.001 * grads[i] * grads[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn loss(net: &Mlp, x: &Array2<f64>, t: &Array2<f64>) -> f64 {
        let y = net.predict(x);
        0.5 * (&y - t).mapv(|v| v * v).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = stream(1, 0);
        let mut net = Mlp::new(&[3, 5, 4, 2], &mut rng, false);
        let x = Array2::from_shape_fn((6, 3), |_| rng.random::<f64>() - 0.5);
        let t = Array2::from_shape_fn((6, 2), |_| rng.random::<f64>());
        let (y, cache) = net.forward(&x);
        let (grads, dx) = net.backward(&cache, &(&y - &t));
        let h = 1e-6;
        for li in 0..3 {
            let (r, c) = net.layers[li].w.dim();
            for (i, j) in [(0, 0), (r - 1, c - 1), (r / 2, c / 2)] {
                let orig = net.layers[li].w[[i, j]];
                net.layers[li].w[[i, j]] = orig + h;
                let lp = loss(&net, &x, &t);
                net.layers[li].w[[i, j]] = orig - h;
                let lm = loss(&net, &x, &t);
                net.layers[li].w[[i, j]] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - grads[li].w[[i, j]]).abs() < 1e-7, "layer {li}");
            }
            let orig = net.layers[li].b[0];
            net.layers[li].b[0] = orig + h;
            let lp = loss(&net, &x, &t);
            net.layers[li].b[0] = orig - h;
            let lm = loss(&net, &x, &t);
            net.layers[li].b[0] = orig;
            assert!(((lp - lm) / (2.0 * h) - grads[li].b[0]).abs() < 1e-7);
        }
        let mut xp = x.clone();
        xp[[2, 1]] += h;
        let mut xm = x.clone();
        xm[[2, 1]] -= h;
        let fd = (loss(&net, &xp, &t) - loss(&net, &xm, &t)) / (2.0 * h);
        assert!((fd - dx[[2, 1]]).abs() < 1e-7);
    }

    #[test]
    fn zero_output_layer_outputs_zero() {
        let net = Mlp::new(&[4, 8, 3], &mut stream(2, 0), true);
        let x = Array2::from_elem((5, 4), 0.3);
        assert!(net.predict(&x).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_fits_a_linear_map() {
        let mut rng = stream(3, 0);
        let mut net = Mlp::new(&[2, 16, 1], &mut rng, false);
        let mut opt = Adam::new(&net, 1e-2);
        let x = Array2::from_shape_fn((64, 2), |_| rng.random::<f64>() - 0.5);
        let t = x.map_axis(Axis(1), |r| r[0] - 2.0 * r[1]).insert_axis(Axis(1));
        let start = loss(&net, &x, &t);
        for _ in 0..500 {
            let (y, cache) = net.forward(&x);
            let (g, _) = net.backward(&cache, &(&y - &t));
            opt.step(&mut net, &g);
        }
        assert!(loss(&net, &x, &t) < 0.01 * start);
    }

    #[test]
    fn sections_round_trip_after_freeze() {
        let mut net = Mlp::new(&[3, 4, 2], &mut stream(4, 0), false);
        net.freeze();
        let mut f = SectionFile::new();
        net.write_sections("net", &mut f);
        let back = Mlp::read_sections("net", &net.shape(), &SectionFile::decode(&f.encode().unwrap(), "t").unwrap()).unwrap();
        assert_eq!(back, net);
    }
}
