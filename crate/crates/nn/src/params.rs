//! Named parameters, buffers, Adam and the step learning-rate schedule.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Debug, Clone, PartialEq)]
struct Param {
    name: String,
    value: Tensor,
    grad: Tensor,
    has_grad: bool,
    m: Tensor,
    v: Tensor,
}

/// Trainable parameters and non-trainable buffers, both in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<(String, Tensor)>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.param_id(&name).is_none(),
            "duplicate parameter `{name}`"
        );
        let shape = value.shape().to_vec();
        self.params.push(Param {
            name,
            grad: Tensor::zeros(&shape),
            has_grad: false,
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> BufferId {
        let name = name.into();
        assert!(self.buffer_id(&name).is_none(), "duplicate buffer `{name}`");
        self.buffers.push((name, value));
        BufferId(self.buffers.len() - 1)
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn buffer_id(&self, name: &str) -> Option<BufferId> {
        self.buffers.iter().position(|b| b.0 == name).map(BufferId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        let p = &self.params[id.0];
        p.has_grad.then_some(&p.grad)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].1
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// `(name, value)` of every parameter, then every buffer.
    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    pub fn named_buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != g.shape() {
            return Err(NnError::Shape {
                op: "accumulate_grad",
                detail: format!(
                    "`{}` is {:?}, gradient is {:?}",
                    p.name,
                    p.value.shape(),
                    g.shape()
                ),
            });
        }
        if p.has_grad {
            p.grad.add_assign(g);
        } else {
            p.grad.data_mut().copy_from_slice(g.data());
            p.has_grad = true;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
            p.has_grad = false;
        }
    }

    /// Replaces values (not optimizer state) by name; shapes must match.
    pub fn load_values<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
        buffers: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<()> {
        for (name, t) in params {
            let id = self
                .param_id(name)
                .ok_or_else(|| NnError::UnknownName(name.to_string()))?;
            check_same_shape(name, self.value(id), t)?;
            *self.value_mut(id) = t.clone();
        }
        for (name, t) in buffers {
            let id = self
                .buffer_id(name)
                .ok_or_else(|| NnError::UnknownName(name.to_string()))?;
            check_same_shape(name, self.buffer(id), t)?;
            *self.buffer_mut(id) = t.clone();
        }
        Ok(())
    }
}

fn check_same_shape(name: &str, have: &Tensor, got: &Tensor) -> Result<()> {
    if have.shape() != got.shape() {
        return Err(NnError::Shape {
            op: "load",
            detail: format!("`{name}` is {:?}, stored {:?}", have.shape(), got.shape()),
        });
    }
    Ok(())
}

/// Adam with L2 penalty folded into the gradient (`g + wd * w`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

impl Adam {
    /// One update of every parameter; clears gradients afterwards.
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.params.iter().find(|p| !p.has_grad) {
            return Err(NnError::MissingGradient(p.name.clone()));
        }
        store.step += 1;
        let t = store.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in &mut store.params {
            let w = p.value.data_mut();
            let g = p.grad.data();
            let m = p.m.data_mut();
            let v = p.v.data_mut();
            for i in 0..w.len() {
                let gi = g[i] + self.weight_decay * w[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        store.zero_grad();
        Ok(())
    }
}

/// `base * factor^(number of milestones <= epoch)`.
pub fn multistep_lr(base_lr: f64, milestones: &[usize], factor: f64, epoch: usize) -> f64 {
    let k = milestones.iter().filter(|&&m| m <= epoch).count();
    base_lr * factor.powi(k as i32)
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights.
pub fn uniform_fan_in(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape matches")
}
