//! Central finite-difference checking of tape gradients.
//!
//! Points where the function has a kink inside the probe interval (a ReLU
//! input at exactly zero, a change of maximiser) are detected and left out
//! of the error statistics: there the central difference averages two
//! one-sided slopes and disagrees with any subgradient. Detection uses the
//! second difference, which for a smooth function shrinks fourfold when
//! the step halves but only about twofold across a kink. Second
//! differences within a rounding floor of `f` never count as kinks.

use crate::error::{AncError, Result};
use crate::rng::Rng;
use crate::tensor::DenseTensor;

use super::{NodeId, ParamSet, Tape};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckEntry {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub kink: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    /// Largest relative error per parameter tensor over its checked,
    /// kink-free entries; 0 when none were checked.
    pub per_param: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_param.iter().copied().fold(0.0, f64::max)
    }

    /// Entries that entered the statistics.
    pub fn checked(&self) -> usize {
        self.entries.iter().filter(|e| !e.kink).count()
    }
}

/// Evaluates `f` on a fresh tape; returns the loss and, when `with_grads`,
/// the gradient of every parameter.
pub fn evaluate<F>(params: &ParamSet, f: &F, with_grads: bool) -> Result<(f64, Vec<DenseTensor>)>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let nodes = params.bind(&mut tape);
    let loss = f(&mut tape, &nodes)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(AncError::Numeric(format!("loss evaluated to {value}")));
    }
    if !with_grads {
        return Ok((value, vec![]));
    }
    tape.backward(loss)?;
    let grads = nodes.iter().map(|&n| tape.grad(n)).collect::<Result<_>>()?;
    Ok((value, grads))
}

fn perturbed(params: &ParamSet, param: usize, index: usize, delta: f64) -> ParamSet {
    let mut p = params.clone();
    let v = &mut p.get_mut(param).value;
    let mut data = v.data().to_vec();
    data[index] += delta;
    *v = DenseTensor::new(v.dims(), data).expect("same dims");
    p
}

/// Compares analytic gradients of `f` with central differences
/// `(f(θ+step) − f(θ−step)) / (2·step)` at the `(param, index)` samples.
/// Relative error is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(
    params: &ParamSet,
    f: F,
    samples: &[(usize, usize)],
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(AncError::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let (f0, grads) = evaluate(params, &f, true)?;
    // second differences below this are indistinguishable from rounding
    let noise = 64.0 * f64::EPSILON * f0.abs().max(1.0);
    let at = |param, index, delta| -> Result<f64> {
        Ok(evaluate(&perturbed(params, param, index, delta), &f, false)?.0)
    };
    let mut entries = Vec::with_capacity(samples.len());
    let mut per_param = vec![0.0f64; params.len()];
    for &(param, index) in samples {
        if param >= params.len() || index >= params.get(param).value.len() {
            return Err(AncError::InvalidArgument(format!(
                "sample ({param}, {index}) out of range"
            )));
        }
        let analytic = grads[param].data()[index];
        let (fp, fm) = (at(param, index, step)?, at(param, index, -step)?);
        let numeric = (fp - fm) / (2.0 * step);
        let scale = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel_err = (analytic - numeric).abs() / scale;
        let s1 = fp - 2.0 * f0 + fm;
        let mut kink = false;
        // only pay for the half-step probes when the second difference is
        // large enough to matter at the checked tolerance and stands clear
        // of rounding in f
        if s1.abs() / (2.0 * step) > 1e-7 * scale && s1.abs() > noise {
            let (hp, hm) = (at(param, index, step / 2.0)?, at(param, index, -step / 2.0)?);
            let s2 = hp - 2.0 * f0 + hm;
            let excess = (s1 - 4.0 * s2).abs();
            kink = excess > 0.5 * s1.abs() && excess > noise;
        }
        if !kink {
            per_param[param] = per_param[param].max(rel_err);
        }
        entries.push(GradCheckEntry {
            param,
            index,
            analytic,
            numeric,
            rel_err,
            kink,
        });
    }
    Ok(GradCheckReport { entries, per_param })
}

/// Draws up to `n` distinct `(param, index)` samples, cycling over the
/// parameter tensors so each is represented. Only entries whose analytic
/// gradient magnitude is at least `min_abs` are eligible: for smaller
/// gradients the central difference is dominated by rounding in `f`.
pub fn sample_parameters(
    grads: &[DenseTensor],
    n: usize,
    min_abs: f64,
    rng: &mut Rng,
) -> Vec<(usize, usize)> {
    let mut pools: Vec<Vec<usize>> = grads
        .iter()
        .map(|g| {
            let mut idx: Vec<usize> = (0..g.len()).filter(|&i| g.data()[i].abs() >= min_abs).collect();
            rng.shuffle(&mut idx);
            idx
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    while out.len() < n && pools.iter().any(|p| !p.is_empty()) {
        for (param, pool) in pools.iter_mut().enumerate() {
            if out.len() == n {
                break;
            }
            if let Some(i) = pool.pop() {
                out.push((param, i));
            }
        }
    }
    out
}
