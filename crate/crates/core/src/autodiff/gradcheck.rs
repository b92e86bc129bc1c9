use super::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    pub worst_index: usize,
    /// Smallest |pre-activation| seen by any relu at the probe point.
    pub relu_margin: f64,
    pub pass: bool,
}

/// Checks the gradient of a scalar function of a flat parameter vector.
///
/// `f` receives the graph and a `[n]`-shaped parameter node and must return
/// a scalar node. Relative error per coordinate is
/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn finite_diff_check<F>(f: F, point: &[f64], h: f64, rtol: f64) -> Result<FdReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Invalid(format!("step h must be positive, got {h}")));
    }
    let eval = |x: Vec<f64>| -> Result<f64> {
        // a param, not a constant, so `f` may itself take gradients
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(x));
        let y = f(&mut g, p)?;
        g.scalar(y)
    };

    let mut g = Graph::new();
    let p = g.param(Tensor::vector(point.to_vec()));
    let y = f(&mut g, p)?;
    if !g.scalar(y)?.is_finite() {
        return Err(Error::NonFinite("objective at the probe point".into()));
    }
    let relu_margin = g.min_relu_margin();
    let dp = g.grad(y, &[p], false)?[0];
    let analytic = g.value(dp).data().to_vec();

    let mut numeric = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut plus = point.to_vec();
        let mut minus = point.to_vec();
        plus[i] += h;
        minus[i] -= h;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("objective at probe coordinate {i}")));
        }
        numeric.push((fp - fm) / (2.0 * h));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let e = (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR);
            if e.is_nan() {
                f64::INFINITY
            } else {
                e
            }
        })
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    Ok(FdReport {
        analytic,
        numeric,
        max_rel_error,
        worst_index,
        relu_margin,
        pass: max_rel_error <= rtol,
    })
}
