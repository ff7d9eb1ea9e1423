use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::{fnv_step, Tensor};

/// Ordered, named parameter tensors belonging to one trainable component.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// He-normal conv weight `[out, in, k, k]` plus a zero bias; returns the weight slot.
    pub fn push_conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, rng: &mut impl Rng) -> usize {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = normal_tensor(&[cout, cin, k, k], std, rng);
        let slot = self.push(format!("{name}.weight"), w);
        self.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        slot
    }

    /// Linear weight `[out, in]` with the given std plus a zero bias; returns the weight slot.
    pub fn push_linear(&mut self, name: &str, din: usize, dout: usize, std: f64, rng: &mut impl Rng) -> usize {
        let w = normal_tensor(&[dout, din], std, rng);
        let slot = self.push(format!("{name}.weight"), w);
        self.push(format!("{name}.bias"), Tensor::zeros(&[dout]));
        slot
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn checksum(&self) -> u64 {
        self.tensors.iter().fold(0xcbf2_9ce4_8422_2325, |h, t| fnv_step(h, t.checksum()))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

/// Rescales gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|t| t.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for t in grads.iter_mut().flatten() {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ParamSet, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        let velocity = params.tensors().iter().map(|t| Tensor::zeros(&t.shape)).collect();
        Self { lr, momentum, weight_decay, velocity }
    }

    /// Slots with no gradient are left untouched, momentum included.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) {
        for ((p, v), g) in params.tensors_mut().iter_mut().zip(&mut self.velocity).zip(grads) {
            let Some(g) = g else { continue };
            for ((pv, vv), gv) in p.data.iter_mut().zip(&mut v.data).zip(&g.data) {
                *vv = self.momentum * *vv + gv + self.weight_decay * *pv;
                *pv -= self.lr * *vv;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(&t.shape)).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let gv = g.data[j];
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * gv;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * gv * gv;
                let mh = m.data[j] / bc1;
                let vh = v.data[j] / bc2;
                p.data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_skips_missing_gradients() {
        let mut ps = ParamSet::new();
        ps.push("a", Tensor::new(vec![2], vec![1.0, 2.0]));
        ps.push("b", Tensor::new(vec![1], vec![5.0]));
        let before = ps.get(1).clone();
        let mut opt = Sgd::new(&ps, 0.1, 0.9, 0.0);
        opt.step(&mut ps, &[Some(Tensor::new(vec![2], vec![1.0, -1.0])), None]);
        assert_eq!(ps.get(0).data, vec![0.9, 2.1]);
        assert_eq!(ps.get(1), &before);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = vec![Some(Tensor::new(vec![2], vec![3.0, 4.0])), None];
        let n = clip_grad_norm(&mut g, 1.0);
        assert!((n - 5.0).abs() < 1e-12);
        let t = g[0].as_ref().unwrap();
        assert!((t.data[0] - 0.6).abs() < 1e-12 && (t.data[1] - 0.8).abs() < 1e-12);
    }
}
