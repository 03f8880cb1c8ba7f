use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates and step counter for decoupled-weight-decay Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub config: AdamWConfig,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    step: u64,
}

fn check_shapes<F: Real>(params: &[Tensor<F>], other: &[Tensor<F>], op: &'static str) -> Result<()> {
    if params.len() != other.len() {
        return Err(Error::Dimension {
            op,
            lhs: vec![params.len()],
            rhs: vec![other.len()],
        });
    }
    for (p, g) in params.iter().zip(other) {
        if p.shape() != g.shape() {
            return Err(Error::Dimension {
                op,
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    Ok(())
}

impl<F: Real> OptimizerState<F> {
    pub fn new(params: &[Tensor<F>], config: AdamWConfig) -> Self {
        OptimizerState {
            config,
            m: params.iter().map(|p| vec![F::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![F::zero(); p.len()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn first_moments(&self) -> &[Vec<F>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<F>] {
        &self.v
    }

    /// One AdamW update in place. Weight decay multiplies the weights
    /// directly and never enters the moment estimates.
    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[Tensor<F>]) -> Result<()> {
        check_shapes(params, grads, "adamw_step")?;
        if params.len() != self.m.len() || params.iter().zip(&self.m).any(|(p, m)| p.len() != m.len()) {
            return Err(Error::Dimension {
                op: "adamw_step",
                lhs: params.iter().map(Tensor::len).collect(),
                rhs: self.m.iter().map(Vec::len).collect(),
            });
        }
        let c = self.config;
        if !(c.lr >= 0.0 && c.lr.is_finite()) {
            return Err(Error::Usage(format!("learning rate {} must be finite and >= 0", c.lr)));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = F::of(1.0 - c.beta1.powi(t));
        let bc2 = F::of(1.0 - c.beta2.powi(t));
        let (lr, b1, b2, eps) = (F::of(c.lr), F::of(c.beta1), F::of(c.beta2), F::of(c.eps));
        let decay = F::one() - lr * F::of(c.weight_decay);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (F::one() - b1) * gi;
                *vi = b2 * *vi + (F::one() - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

impl<F: Real> OptimizerState<F> {
    /// [`OptimizerState::step`] on parameters shared with graphs. Tensors are
    /// copied only if a graph still holds them.
    pub fn step_shared(&mut self, params: &mut [Arc<Tensor<F>>], grads: &[Tensor<F>]) -> Result<()> {
        let mut owned: Vec<Tensor<F>> = params
            .iter_mut()
            .map(|p| std::mem::replace(Arc::make_mut(p), Tensor::zeros([0])))
            .collect();
        let r = self.step(&mut owned, grads);
        for (p, t) in params.iter_mut().zip(owned) {
            *Arc::make_mut(p) = t;
        }
        r
    }
}

/// Rescale `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        scale_all(grads, max_norm / norm);
        // rounding in the element type can leave the result a few ulps high
        let after = global_norm(grads);
        if after > max_norm {
            scale_all(grads, (max_norm / after) * (1.0 - 4.0 * F::epsilon().f64()));
        }
    }
    norm
}

pub fn global_norm<F: Real>(grads: &[Tensor<F>]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

fn scale_all<F: Real>(grads: &mut [Tensor<F>], s: f64) {
    for g in grads.iter_mut() {
        for x in g.data_mut() {
            *x = F::of(x.f64() * s);
        }
    }
}

/// Linear warmup from zero to the peak, then cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, total_steps: usize, warmup_fraction: f64) -> Self {
        let warmup = ((total_steps as f64) * warmup_fraction).floor() as usize;
        LrSchedule {
            peak,
            total_steps,
            warmup_steps: warmup.min(total_steps.saturating_sub(1)),
        }
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Usage(format!(
                "step {step} is past the schedule's {} total steps",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            return Ok(self.peak * step as f64 / self.warmup_steps as f64);
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        Ok((self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0))
    }
}
