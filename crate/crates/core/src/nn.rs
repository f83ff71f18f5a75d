//! Layers, parameter storage and the Adam optimizer.
//!
//! Parameter values are kept exactly representable as `f32` so that
//! checkpoints, which store `f32`, round-trip bitwise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Grads, ParamKey, Var};
use crate::tensor::Tensor;

pub const STORE_ENCODER: u8 = 0;
pub const STORE_DECODER: u8 = 1;
pub const STORE_DENOISER: u8 = 2;
pub const STORE_PIXEL: u8 = 3;

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    tag: u8,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new(tag: u8) -> Self {
        Self {
            tag,
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn tag(&self) -> u8 {
        self.tag
    }

    pub fn add(&mut self, name: &str, mut t: Tensor) -> usize {
        t.map_inplace(round_f32);
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    /// Replaces a tensor, rounding its values to `f32` precision.
    pub fn set(&mut self, idx: usize, mut t: Tensor) {
        assert_eq!(t.shape(), self.tensors[idx].shape(), "param shape change");
        t.map_inplace(round_f32);
        self.tensors[idx] = t;
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn var(&self, g: &mut Graph, idx: usize) -> Var {
        g.param(
            &self.tensors[idx],
            ParamKey {
                store: self.tag,
                index: idx,
            },
        )
    }
}

fn uniform_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (3.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    weight: usize,
    bias: usize,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight = store.add(&format!("{name}.weight"), uniform_init(&[cout, cin, k, k], fan_in, rng));
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    /// A convolution whose weights start at zero (used for output heads).
    #[allow(clippy::too_many_arguments)]
    pub fn zeros(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let weight = store.add(&format!("{name}.weight"), Tensor::zeros(&[cout, cin, k, k]));
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = store.var(g, self.weight);
        let b = store.var(g, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    weight: usize,
    bias: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        let weight = store.add(&format!("{name}.weight"), uniform_init(&[dout, din], din, rng));
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[dout]));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = store.var(g, self.weight);
        let b = store.var(g, self.bias);
        g.linear(x, w, Some(b))
    }
}

/// Sinusoidal timestep features, `[t.len(), dim]`.
pub fn timestep_features(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &step in t {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out.push((step as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out.push((step as f64 * freq).cos());
        }
    }
    Tensor::new(&[t.len(), dim], out).expect("timestep features")
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let m: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            cfg,
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Applies one update from the gradients recorded in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        let gs = grads.param_grads(store.tag(), store.len());
        self.step_with(store, &gs);
    }

    pub fn step_with(&mut self, store: &mut ParamStore, gs: &[Option<Tensor>]) {
        self.step += 1;
        let norm: f64 = gs.iter().flatten().map(Tensor::sum_sq).sum::<f64>().sqrt();
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        for (i, g) in gs.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let mut p = store.get(i).clone();
            for (((pv, mv), vv), gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let gv = gv * clip;
                *mv = self.cfg.beta1 * *mv + (1.0 - self.cfg.beta1) * gv;
                *vv = self.cfg.beta2 * *vv + (1.0 - self.cfg.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
            store.set(i, p);
        }
    }
}
