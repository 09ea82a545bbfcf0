//! Central-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for the per-entry relative error, so that entries whose
/// true gradient is ~0 are judged by absolute error against this scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tol)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_error >= self.tol)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares supplied `analytic` gradients against central differences of `eval`.
pub fn compare_gradients<E>(
    params: &[(String, Tensor)],
    analytic: &[Tensor],
    mut eval: E,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    E: FnMut(&[Tensor]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be > 0, got {h}")));
    }
    if analytic.len() != params.len() {
        return Err(Error::Arity {
            what: "gradient tensors",
            expected: params.len(),
            actual: analytic.len(),
        });
    }
    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport { params: Vec::with_capacity(params.len()), tol };
    for (p, (name, _)) in params.iter().enumerate() {
        if analytic[p].shape() != values[p].shape() {
            return Err(Error::Shape(format!(
                "gradient for {name} has shape {:?}, parameter has {:?}",
                analytic[p].shape(),
                values[p].shape()
            )));
        }
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for e in 0..values[p].len() {
            let orig = values[p].data()[e];
            values[p].data_mut()[e] = orig + h;
            let plus = eval(&values)?;
            values[p].data_mut()[e] = orig - h;
            let minus = eval(&values)?;
            values[p].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p].data()[e];
            if !plus.is_finite() || !minus.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient check of {name}[{e}]: f(+h)={plus}, f(-h)={minus}, analytic={a}"
                )));
            }
            let err = relative_error(a, numeric);
            if err > check.max_rel_error || e == 0 {
                check.max_rel_error = err;
                check.worst_entry = e;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

/// Builds `f` on a fresh tape with every parameter as a differentiable leaf,
/// runs the backward sweep and checks the result against central differences.
pub fn finite_diff_check<F>(params: &[(String, Tensor)], f: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval_graph = |values: &[Tensor], grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let v = g.value(loss);
        if v.len() != 1 {
            return Err(Error::Shape(format!("objective must be scalar, got {:?}", v.shape())));
        }
        let value = v.item();
        if !grad {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        Ok((value, vars.iter().map(|&v| grads.wrt(v)).collect()))
    };
    let initial: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let (_, analytic) = eval_graph(&initial, true)?;
    compare_gradients(params, &analytic, |vals| Ok(eval_graph(vals, false)?.0), h, tol)
}
