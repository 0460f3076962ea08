//! Central finite-difference gradient checking.
//!
//! The analytic side runs the objective on a `Tape<T>` (normally `f32`);
//! the numeric side re-evaluates the same generic objective on plain `f64`
//! tapes without recording gradients.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

/// A scalar-valued computation that can be replayed at any precision.
pub trait Objective {
    /// Builds the computation on `tape` given the registered leaves and
    /// returns the scalar root.
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, leaves: &[Var]) -> Result<Var>;
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Combine steps `h` and `h/2` with one Richardson extrapolation,
    /// cancelling the `O(h^2)` truncation term.
    pub richardson: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tol: 1e-3,
            richardson: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LeafReport {
    pub leaf: usize,
    pub max_abs_error: f64,
    /// `max |analytic - numeric|` over this leaf divided by the gradient
    /// scale of the whole objective (largest `|analytic|` or `|numeric|`
    /// over all leaves); zero when every gradient vanishes.
    pub max_rel_error: f64,
    /// Same error divided by this leaf's own gradient scale. Diagnostic
    /// only: leaves whose gradients sit near roundoff inflate it.
    pub local_rel_error: f64,
    /// Largest `|analytic|` or `|numeric|` entry of this leaf.
    pub scale: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub value: f64,
    pub leaves: Vec<LeafReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.leaves.iter().all(|l| l.max_rel_error <= self.tol)
    }
}

/// Reverse-mode gradient of `f` at `leaves`, evaluated in precision `T`.
pub fn reverse_gradient<T: Scalar, F: Objective>(
    f: &F,
    leaves: &[Tensor<f64>],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = leaves.iter().map(|l| tape.param(l.cast())).collect();
    let root = f.eval(&mut tape, &vars)?;
    let value = tape.scalar_value(root).widen();
    tape.backward(root)?;
    let grads = vars
        .iter()
        .map(|&v| tape.grad_or_zero(v).iter().map(|g| g.widen()).collect())
        .collect();
    Ok((value, grads))
}

fn eval_f64<F: Objective>(f: &F, leaves: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = leaves.iter().map(|l| tape.constant(l.clone())).collect();
    let root = f.eval(&mut tape, &vars)?;
    let v = tape.value(root);
    if v.len() != 1 {
        return Err(Error::Usage(format!("objective returned shape {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Central finite differences of `f` in `f64`, one entry per leaf element.
pub fn numeric_gradient<F: Objective>(f: &F, leaves: &[Tensor<f64>], step: f64) -> Result<Vec<Vec<f64>>> {
    let base = eval_f64(f, leaves)?;
    if !base.is_finite() {
        return Err(Error::Probe(format!("objective is {base} at the probe point")));
    }
    let mut work: Vec<Tensor<f64>> = leaves.to_vec();
    let mut out = Vec::with_capacity(leaves.len());
    for li in 0..leaves.len() {
        let mut g = Vec::with_capacity(leaves[li].len());
        for j in 0..leaves[li].len() {
            let x0 = leaves[li].data()[j];
            work[li].data_mut()[j] = x0 + step;
            let fp = eval_f64(f, &work)?;
            work[li].data_mut()[j] = x0 - step;
            let fm = eval_f64(f, &work)?;
            work[li].data_mut()[j] = x0;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Probe(format!("non-finite value near leaf {li}[{j}]")));
            }
            g.push((fp - fm) / (2.0 * step));
        }
        out.push(g);
    }
    Ok(out)
}

/// Compares reverse-mode gradients in precision `T` against `f64` central
/// differences.
pub fn grad_check<T: Scalar, F: Objective>(
    f: &F,
    leaves: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let (value, analytic) = reverse_gradient::<T, F>(f, leaves)?;
    if !value.is_finite() {
        return Err(Error::Probe(format!("objective is {value} at the probe point")));
    }
    let mut numeric = numeric_gradient(f, leaves, opts.step)?;
    if opts.richardson {
        let half = numeric_gradient(f, leaves, opts.step / 2.0)?;
        for (g, h) in numeric.iter_mut().zip(&half) {
            for (a, b) in g.iter_mut().zip(h) {
                *a = (4.0 * b - *a) / 3.0;
            }
        }
    }
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let global = analytic
        .iter()
        .chain(&numeric)
        .map(|g| max_abs(g))
        .fold(0.0, f64::max);
    let leaves = analytic
        .iter()
        .zip(&numeric)
        .enumerate()
        .map(|(leaf, (a, n))| compare(leaf, a, n, global))
        .collect();
    Ok(GradCheckReport {
        value,
        leaves,
        tol: opts.tol,
    })
}

fn compare(leaf: usize, analytic: &[f64], numeric: &[f64], global: f64) -> LeafReport {
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = max_abs(analytic).max(max_abs(numeric));
    let max_abs_error = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    let ratio = |s: f64| if s > 0.0 { max_abs_error / s } else { 0.0 };
    LeafReport {
        leaf,
        max_abs_error,
        max_rel_error: ratio(global),
        local_rel_error: ratio(scale),
        scale,
    }
}
