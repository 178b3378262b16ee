//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn check_against(&self, params: &[Tensor]) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::invalid("optimizer state does not match parameter count"));
        }
        for (i, p) in params.iter().enumerate() {
            if self.m[i].len() != p.len() || self.v[i].len() != p.len() {
                return Err(Error::shape("optimizer state", &[self.m[i].len()], &[p.len()]));
            }
        }
        Ok(())
    }
}

/// One AdamW step:
/// `θ ← θ − lr·(m̂ / (√v̂ + ε)) − lr·wd·θ`. Missing gradients count as zero.
///
/// Nothing is modified if any gradient is non-finite.
pub fn adamw_update(
    params: &mut [Tensor],
    grads: &[Option<Tensor>],
    names: &[String],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    state.check_against(params)?;
    if grads.len() != params.len() {
        return Err(Error::invalid(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::shape("adamw_update", p.shape(), g.shape()));
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("param[{i}]"));
                return Err(Error::NonFiniteGradient(name));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].as_ref().map(Tensor::data);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, theta) in p.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(0.0, |g| g[j]);
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *theta -= lr * (m_hat / (v_hat.sqrt() + EPSILON) + weight_decay * *theta);
        }
    }
    Ok(())
}
