//! Parameter storage and the few layer types the networks are built from.
//! Weights use runtime scaling ("equalized learning rate"): stored values are
//! unit-variance and multiplied by `lr_mult / sqrt(fan_in)` on use.

use crate::autodiff::{IndexMap, Tensor};
use crate::error::{Error, Result};
use crate::io::{ContainerReader, ContainerWriter};
use crate::rng::{normal_vec, Rng};
use sha2::{Digest, Sha256};

pub const LRELU_SLOPE: f64 = 0.2;
pub const LRELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// Ordered, named parameter tensors of one network.
#[derive(Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, data: Vec<f64>, shape: &[usize]) -> usize {
        self.names.push(name.into());
        self.values.push(Tensor::param(data, shape));
        self.values.len() - 1
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.values.iter().collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces the data of parameter `i`, keeping it a gradient leaf.
    pub fn set(&mut self, i: usize, data: Vec<f64>) {
        assert_eq!(data.len(), self.values[i].numel());
        let shape = self.values[i].shape().to_vec();
        self.values[i] = Tensor::param(data, &shape);
    }

    /// SHA-256 over names and raw f64 bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (n, v) in self.names.iter().zip(&self.values) {
            h.update(n.as_bytes());
            for x in v.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite)
    }

    pub fn save(&self, w: &mut ContainerWriter, prefix: &str) -> Result<()> {
        for (n, v) in self.names.iter().zip(&self.values) {
            w.f32(&format!("{prefix}/{n}.bin"), v.data())?;
        }
        Ok(())
    }

    pub fn load(&mut self, r: &ContainerReader, prefix: &str) -> Result<()> {
        for i in 0..self.values.len() {
            let key = format!("{prefix}/{}.bin", self.names[i]);
            let data = r.f32(&key)?;
            if data.len() != self.values[i].numel() {
                return Err(Error::load(key, format!("expected {} values, got {}", self.values[i].numel(), data.len())));
            }
            self.set(i, data);
        }
        Ok(())
    }
}

/// Fully connected layer on `[B, in]`.
#[derive(Clone, Debug)]
pub struct Dense {
    w: usize,
    b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
    lr_mult: f64,
}

impl Dense {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        lr_mult: f64,
        bias_init: f64,
        rng: &mut Rng,
    ) -> Self {
        let w = normal_vec(rng, fan_in * fan_out).into_iter().map(|x| x / lr_mult).collect();
        let w = ps.add(format!("{name}.weight"), w, &[fan_in, fan_out]);
        let b = ps.add(format!("{name}.bias"), vec![bias_init / lr_mult; fan_out], &[fan_out]);
        Self {
            w,
            b,
            fan_in,
            fan_out,
            lr_mult,
        }
    }

    pub fn weight_scale(&self) -> f64 {
        self.lr_mult / (self.fan_in as f64).sqrt()
    }

    pub fn forward(&self, ps: &ParamSet, x: &Tensor) -> Tensor {
        let w = ps.get(self.w).scale(self.weight_scale());
        let b = ps.get(self.b).scale(self.lr_mult);
        x.matmul(&w).add(&b)
    }
}

pub fn lrelu(x: &Tensor) -> Tensor {
    x.leaky_relu(LRELU_SLOPE).scale(LRELU_GAIN)
}

/// `k×k` same-padded convolution of NHWC input via im2col, optional stride.
#[derive(Clone, Debug)]
pub struct Conv {
    w: usize,
    b: Option<usize>,
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    pub fn new(ps: &mut ParamSet, name: &str, k: usize, cin: usize, cout: usize, bias: bool, rng: &mut Rng) -> Self {
        let w = ps.add(format!("{name}.weight"), normal_vec(rng, k * k * cin * cout), &[k * k * cin, cout]);
        let b = bias.then(|| ps.add(format!("{name}.bias"), vec![0.0; cout], &[cout]));
        Self { w, b, k, cin, cout }
    }

    pub fn weight(&self, ps: &ParamSet) -> Tensor {
        ps.get(self.w).scale(1.0 / ((self.k * self.k * self.cin) as f64).sqrt())
    }

    pub fn bias(&self, ps: &ParamSet) -> Option<Tensor> {
        self.b.map(|b| ps.get(b).clone())
    }

    /// Convolution with an explicit (already scaled) weight `[k·k·cin, cout]`.
    pub fn apply(&self, x: &Tensor, weight: &Tensor, stride: usize) -> Tensor {
        let [b, h, w, c] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
        assert_eq!(c, self.cin, "conv input channels");
        let pad = self.k / 2;
        let ho = (h + 2 * pad - self.k) / stride + 1;
        let wo = (w + 2 * pad - self.k) / stride + 1;
        let cols = if self.k == 1 && stride == 1 {
            x.reshape(&[b * h * w, c])
        } else {
            let idx = IndexMap::im2col(b, h, w, c, self.k, stride, pad);
            x.take(&idx, &[b * ho * wo, self.k * self.k * c])
        };
        cols.matmul(weight).reshape(&[b, ho, wo, self.cout])
    }

    pub fn forward(&self, ps: &ParamSet, x: &Tensor, stride: usize) -> Tensor {
        let y = self.apply(x, &self.weight(ps), stride);
        match self.bias(ps) {
            Some(b) => y.add(&b),
            None => y,
        }
    }
}

pub fn upsample2x(x: &Tensor) -> Tensor {
    let [b, h, w, c] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    x.take(&IndexMap::upsample2x(b, h, w, c), &[b, 2 * h, 2 * w, c])
}

/// 2×2 average pooling of NHWC input with even extents.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let [b, h, w, c] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    x.reshape(&[b * h / 2, 2, w / 2, 2 * c])
        .sum_axis_keep(1)
        .reshape(&[b * h / 2 * w / 2, 2, c])
        .sum_axis_keep(1)
        .reshape(&[b, h / 2, w / 2, c])
        .scale(0.25)
}
