//! Central finite-difference verification of recorded gradients.

use rayon::prelude::*;

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)` over all coordinates.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coordinates: usize,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the reverse-mode gradient of `f` at `point` against central
/// differences with the given step, coordinate by coordinate. The
/// derivative is taken with the fourth-order central stencil
/// `(f(x-2h) - 8 f(x-h) + 8 f(x+h) - f(x+2h)) / 12h`.
///
/// `f` receives a fresh graph and one leaf per entry of `point` and must
/// return a scalar node.
pub fn grad_check<F>(f: F, point: &[Tensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Sync,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::Contract("grad_check function must be scalar".into()));
        }
        Ok(v.data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(point)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coordinates: 0,
        worst: (0, 0),
    };
    let coords: Vec<(usize, usize)> = point
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.len()).map(move |k| (t, k)))
        .collect();
    let numeric: Vec<f64> = coords
        .par_iter()
        .map_init(
            || point.to_vec(),
            |probe, &(t, k)| -> Result<f64> {
                let x0 = point[t].data()[k];
                let mut at = |offset: f64| -> Result<f64> {
                    probe[t].data_mut()[k] = x0 + offset;
                    eval(probe)
                };
                let (m2, m1, p1, p2) = (at(-2.0 * step)?, at(-step)?, at(step)?, at(2.0 * step)?);
                probe[t].data_mut()[k] = x0;
                Ok((m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * step))
            },
        )
        .collect::<Result<_>>()?;
    for (&(t, k), &n) in coords.iter().zip(&numeric) {
        let a = analytic[t][k];
        let rel = relative_error(a, n);
        report.coordinates += 1;
        report.max_abs_error = report.max_abs_error.max((a - n).abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = (t, k);
        }
    }
    Ok(report)
}
