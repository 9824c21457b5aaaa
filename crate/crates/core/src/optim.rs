//! Adam with a linear warmup / linear decay learning-rate schedule.

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// A named parameter slice paired with its gradient.
pub struct Block<'a> {
    pub name: &'static str,
    pub values: &'a mut [f64],
    pub grad: &'a [f64],
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    base_lr: f64,
    warmup_fraction: f64,
    total_steps: u64,
}

impl OptimizerState {
    pub fn new(base_lr: f64, warmup_fraction: f64, total_steps: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup fraction {warmup_fraction} outside [0, 1]"
            )));
        }
        if !base_lr.is_finite() || base_lr < 0.0 {
            return Err(Error::Config(format!("invalid learning rate {base_lr}")));
        }
        Ok(Self {
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            base_lr,
            warmup_fraction,
            total_steps,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.total_steps as f64).round() as u64
    }

    /// Jumps the step counter; used to probe the schedule.
    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }
}

/// Learning rate for the current step: a ramp from 0 to the base rate over the
/// warmup steps, then a linear decay reaching 0 at the final step.
pub fn lr_at(state: &OptimizerState) -> f64 {
    let total = state.total_steps.max(1);
    let warmup = state.warmup_steps();
    let step = state.step;
    if step >= total {
        0.0
    } else if step < warmup {
        state.base_lr * (step as f64 / warmup as f64)
    } else {
        state.base_lr * ((total - step) as f64 / (total - warmup) as f64)
    }
}

/// One bias-corrected Adam update using the scheduled learning rate, then
/// advances the step counter. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step(state: &mut OptimizerState, blocks: &mut [Block<'_>]) -> Result<()> {
    for block in blocks.iter() {
        if block.values.len() != block.grad.len() {
            return Err(Error::Dimension(format!(
                "block `{}`: {} values but {} gradients",
                block.name,
                block.values.len(),
                block.grad.len()
            )));
        }
        if block.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                block: block.name.to_string(),
            });
        }
    }
    if state.first_moment.is_empty() {
        state.first_moment = blocks.iter().map(|b| vec![0.0; b.values.len()]).collect();
        state.second_moment = state.first_moment.clone();
    }
    if state.first_moment.len() != blocks.len()
        || state
            .first_moment
            .iter()
            .zip(blocks.iter())
            .any(|(m, b)| m.len() != b.values.len())
    {
        return Err(Error::Dimension(
            "parameter blocks changed shape between optimizer steps".into(),
        ));
    }

    let lr = lr_at(state);
    let t = (state.step + 1) as i32;
    let correction1 = 1.0 - BETA1.powi(t);
    let correction2 = 1.0 - BETA2.powi(t);

    for ((block, m), v) in blocks
        .iter_mut()
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        for i in 0..block.values.len() {
            let g = block.grad[i];
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
            let m_hat = m[i] / correction1;
            let v_hat = v[i] / correction2;
            block.values[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    state.step += 1;
    Ok(())
}
