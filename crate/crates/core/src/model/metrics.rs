//! Forecast error measures. Inputs are km/h; percentage errors are
//! returned as fractions (0.2 means 20 %).

use crate::error::{Error, Result};

/// Entries with `|y| < MAPE_SKIP` are left out of the standard MAPE.
pub const MAPE_SKIP: f64 = 1e-6;

fn check(pred: &[f64], actual: &[f64]) -> Result<()> {
    if pred.len() != actual.len() {
        return Err(Error::shape(format!(
            "{} predictions against {} observations",
            pred.len(),
            actual.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

pub fn mse(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check(pred, actual)?;
    let s: f64 = pred.iter().zip(actual).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok(s / pred.len() as f64)
}

/// Mean of `(ŷ - y) / ŷ`, signed and divided by the prediction.
pub fn mape_paper(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check(pred, actual)?;
    let mut s = 0.0;
    for (index, (p, y)) in pred.iter().zip(actual).enumerate() {
        if *p == 0.0 {
            return Err(Error::DivisionGuard { index });
        }
        s += (p - y) / p;
    }
    Ok(s / pred.len() as f64)
}

/// Mean of `|ŷ - y| / |y|` over entries with `|y| >= 1e-6`; zero when
/// every entry is skipped.
pub fn mape_standard(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check(pred, actual)?;
    let (mut s, mut n) = (0.0, 0usize);
    for (p, y) in pred.iter().zip(actual) {
        if y.abs() >= MAPE_SKIP {
            s += (p - y).abs() / y.abs();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { s / n as f64 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    /// `None` when some prediction is exactly zero.
    pub mape_paper: Option<f64>,
    pub mape_standard: f64,
    /// Mean absolute error per link, canonical link order.
    pub link_mae: Vec<f64>,
    pub count: usize,
}

impl Metrics {
    /// Pools rows of per-link predictions and observations.
    pub fn from_rows(pred: &[Vec<f64>], actual: &[Vec<f64>]) -> Result<Metrics> {
        if pred.len() != actual.len() {
            return Err(Error::shape("prediction and observation row counts differ"));
        }
        let links = pred.first().ok_or(Error::EmptyDataset)?.len();
        let mut flat_p = Vec::with_capacity(pred.len() * links);
        let mut flat_y = Vec::with_capacity(pred.len() * links);
        let mut link_sum = vec![0.0; links];
        for (p, y) in pred.iter().zip(actual) {
            check(p, y)?;
            if p.len() != links {
                return Err(Error::shape("rows of different link counts"));
            }
            for (l, (a, b)) in p.iter().zip(y).enumerate() {
                link_sum[l] += (a - b).abs();
            }
            flat_p.extend_from_slice(p);
            flat_y.extend_from_slice(y);
        }
        let rows = pred.len() as f64;
        Ok(Metrics {
            mse: mse(&flat_p, &flat_y)?,
            mape_paper: match mape_paper(&flat_p, &flat_y) {
                Ok(v) => Some(v),
                Err(Error::DivisionGuard { .. }) => None,
                Err(e) => return Err(e),
            },
            mape_standard: mape_standard(&flat_p, &flat_y)?,
            link_mae: link_sum.into_iter().map(|s| s / rows).collect(),
            count: flat_p.len(),
        })
    }
}
