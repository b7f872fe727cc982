//! Finite-difference verification of vector-Jacobian products.
//!
//! Every differentiable operation exposes a forward pass and a VJP through
//! [`DifferentiableOp`]. [`vjp_check`] contracts the outputs with a fixed random
//! cotangent, so the scalar `L = <cotangent, forward(x)>` has gradient equal to the
//! VJP, and compares that gradient against central differences of `L`.

use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor4;

const COTANGENT_SEED: u64 = 0x5eed_c0ffee;

/// Input and parameter cotangents returned by [`DifferentiableOp::vjp`].
pub struct Vjp {
    pub inputs: Vec<Tensor4<f64>>,
    pub params: Grads<f64>,
}

/// Forward pass plus vector-Jacobian product, in double precision.
pub trait DifferentiableOp {
    fn name(&self) -> String;

    fn forward(&self, params: &ParamStore<f64>, inputs: &[Tensor4<f64>]) -> Result<Vec<Tensor4<f64>>>;

    fn vjp(
        &self,
        params: &ParamStore<f64>,
        inputs: &[Tensor4<f64>],
        cotangents: &[Tensor4<f64>],
    ) -> Result<Vjp>;
}

/// Where the largest discrepancy was found.
#[derive(Clone, Debug, PartialEq)]
pub struct VjpReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub coordinates: usize,
}

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Which coordinates to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// A seeded random sample of this many coordinates.
    Sample { count: usize, seed: u64 },
}

/// Max relative error over every input and parameter coordinate.
pub fn vjp_check(
    op: &dyn DifferentiableOp,
    params: &ParamStore<f64>,
    inputs: &[Tensor4<f64>],
    eps: f64,
) -> Result<f64> {
    vjp_check_report(op, params, inputs, eps, Coverage::All).map(|r| r.max_rel_error)
}

pub fn vjp_check_report(
    op: &dyn DifferentiableOp,
    params: &ParamStore<f64>,
    inputs: &[Tensor4<f64>],
    eps: f64,
    coverage: Coverage,
) -> Result<VjpReport> {
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-6, 1e-4]"
        )));
    }
    let outputs = op.forward(params, inputs)?;
    let again = op.forward(params, inputs)?;
    if outputs.len() != again.len() || outputs.iter().zip(&again).any(|(a, b)| !a.bit_eq(b)) {
        return Err(Error::NonDeterministic(op.name()));
    }

    let mut rng = SeededRng::new(COTANGENT_SEED);
    let cotangents: Vec<Tensor4<f64>> = outputs
        .iter()
        .map(|o| rng.normal_tensor(o.shape(), 1.0))
        .collect();
    let contract = |outs: &[Tensor4<f64>]| -> Result<f64> {
        outs.iter()
            .zip(&cotangents)
            .map(|(o, c)| o.dot(c))
            .sum::<Result<f64>>()
    };
    let analytic = op.vjp(params, inputs, &cotangents)?;
    if analytic.inputs.len() != inputs.len() {
        return Err(Error::InvalidArgument(format!(
            "`{}` returned {} input cotangents for {} inputs",
            op.name(),
            analytic.inputs.len(),
            inputs.len()
        )));
    }

    // (is_param, tensor index, element index)
    let mut coords: Vec<(bool, usize, usize)> = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        coords.extend((0..t.len()).map(|j| (false, i, j)));
    }
    for (id, p) in params.iter() {
        coords.extend((0..p.value.len()).map(|j| (true, id.index(), j)));
    }
    if let Coverage::Sample { count, seed } = coverage {
        let mut pick = SeededRng::new(seed);
        pick.shuffle(&mut coords);
        coords.truncate(count);
    }

    let mut report = VjpReport {
        max_rel_error: 0.0,
        worst: String::from("none"),
        coordinates: coords.len(),
    };
    let mut inputs_work = inputs.to_vec();
    let mut params_work = params.clone();
    let param_ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for (is_param, t, j) in coords {
        let (numeric, analytic_value, label) = if is_param {
            let id = param_ids[t];
            let orig = params_work.value(id).data()[j];
            params_work.value_mut(id).data_mut()[j] = orig + eps;
            let plus = contract(&op.forward(&params_work, inputs)?)?;
            params_work.value_mut(id).data_mut()[j] = orig - eps;
            let minus = contract(&op.forward(&params_work, inputs)?)?;
            params_work.value_mut(id).data_mut()[j] = orig;
            (
                (plus - minus) / (2.0 * eps),
                analytic.params.slot(id).data()[j],
                format!("param {}[{j}]", params.name(id)),
            )
        } else {
            let orig = inputs_work[t].data()[j];
            inputs_work[t].data_mut()[j] = orig + eps;
            let plus = contract(&op.forward(params, &inputs_work)?)?;
            inputs_work[t].data_mut()[j] = orig - eps;
            let minus = contract(&op.forward(params, &inputs_work)?)?;
            inputs_work[t].data_mut()[j] = orig;
            (
                (plus - minus) / (2.0 * eps),
                analytic.inputs[t].data()[j],
                format!("input {t}[{j}]"),
            )
        };
        let err = relative_error(analytic_value, numeric);
        if !err.is_finite() || err > report.max_rel_error {
            report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
            report.worst = label;
        }
    }
    Ok(report)
}

/// Wraps an op and scales its VJP by a constant factor; used to confirm the
/// harness notices a wrong backward pass.
pub struct ScaledVjp<O> {
    pub inner: O,
    pub factor: f64,
}

impl<O: DifferentiableOp> DifferentiableOp for ScaledVjp<O> {
    fn name(&self) -> String {
        format!("{} (vjp x{})", self.inner.name(), self.factor)
    }

    fn forward(&self, params: &ParamStore<f64>, inputs: &[Tensor4<f64>]) -> Result<Vec<Tensor4<f64>>> {
        self.inner.forward(params, inputs)
    }

    fn vjp(
        &self,
        params: &ParamStore<f64>,
        inputs: &[Tensor4<f64>],
        cotangents: &[Tensor4<f64>],
    ) -> Result<Vjp> {
        let mut v = self.inner.vjp(params, inputs, cotangents)?;
        for t in &mut v.inputs {
            *t = t.scale(self.factor);
        }
        v.params.scale(self.factor);
        Ok(v)
    }
}

impl DifferentiableOp for Box<dyn DifferentiableOp + Send + Sync> {
    fn name(&self) -> String {
        (**self).name()
    }

    fn forward(&self, params: &ParamStore<f64>, inputs: &[Tensor4<f64>]) -> Result<Vec<Tensor4<f64>>> {
        (**self).forward(params, inputs)
    }

    fn vjp(
        &self,
        params: &ParamStore<f64>,
        inputs: &[Tensor4<f64>],
        cotangents: &[Tensor4<f64>],
    ) -> Result<Vjp> {
        (**self).vjp(params, inputs, cotangents)
    }
}
