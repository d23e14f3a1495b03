//! Adaptive-moment optimizer over a [`ParamSet`].

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io::{ContainerReader, ContainerWriter};
use crate::nn::ParamSet;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(ps: &ParamSet, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros = || ps.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from `grads`, aligned with the parameter order of `ps`.
    pub fn step(&mut self, ps: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), ps.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = ps.get(i).to_vec();
            for (k, &gk) in g.data().iter().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                data[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            if self.lr != 0.0 {
                ps.set(i, data);
            }
        }
    }

    pub fn save(&self, w: &mut ContainerWriter, prefix: &str) -> Result<()> {
        w.json(&format!("{prefix}/adam.json"), &serde_json::json!({ "step": self.step, "lr": self.lr }))?;
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            w.f32(&format!("{prefix}/m{i}.bin"), m)?;
            w.f32(&format!("{prefix}/v{i}.bin"), v)?;
        }
        Ok(())
    }

    pub fn load(&mut self, r: &ContainerReader, prefix: &str) -> Result<()> {
        let meta = r.json(&format!("{prefix}/adam.json"))?;
        self.step = meta["step"]
            .as_u64()
            .ok_or_else(|| Error::load(format!("{prefix}/adam.json"), "missing step"))?;
        for i in 0..self.m.len() {
            let m = r.f32(&format!("{prefix}/m{i}.bin"))?;
            let v = r.f32(&format!("{prefix}/v{i}.bin"))?;
            if m.len() != self.m[i].len() || v.len() != self.v[i].len() {
                return Err(Error::load(format!("{prefix}/m{i}.bin"), "moment size mismatch"));
            }
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}
