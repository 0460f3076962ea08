use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

use super::TrainConfig;

/// Hyperparameters of one AdamW update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// Moment buffers for a fixed, ordered list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One AdamW step with bias correction and decoupled weight decay:
/// `p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p)`.
///
/// `names` label the parameters for error reports. No parameter is
/// touched when any gradient is non-finite.
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Vec<T>],
    names: &[String],
    state: &mut OptimizerState,
    lr: f64,
    opt: &AdamW,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Usage(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[i].len() != g.len() {
            return Err(Error::dim("adamw_step", p.shape(), &[g.len()]));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: names.get(i).cloned().unwrap_or_else(|| format!("#{i}")),
                step: state.step as usize,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j].widen();
            m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * gj;
            v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * gj * gj;
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + opt.eps);
            let xv = x.widen();
            *x = T::of(xv - lr * (update + opt.weight_decay * xv));
        }
    }
    Ok(())
}

/// Linear warm-up from `warmup_floor_lr` at step 0 to `lr` after
/// `warmup_epochs` epochs, constant afterwards.
pub fn lr_at_step(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_epochs * steps_per_epoch;
    if warm == 0 || step >= warm {
        return cfg.lr;
    }
    let frac = step as f64 / warm as f64;
    cfg.warmup_floor_lr + (cfg.lr - cfg.warmup_floor_lr) * frac
}
