//! Sliding-window training samples with multi-horizon targets.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::frame::NormalizedFrame;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct SampleWindow {
    /// Index of the first input period.
    pub start: usize,
    /// `lag` consecutive normalized frames.
    pub inputs: Vec<Arc<NormalizedFrame>>,
    /// Horizon (periods after the last input) -> link speeds in km/h,
    /// canonical link order.
    pub targets: BTreeMap<usize, Vec<f64>>,
    /// Link speeds at the last input period, for the persistence baseline.
    pub last_observed: Vec<f64>,
}

pub fn window_count(len: usize, lag: usize, horizons: &[usize]) -> usize {
    let max_h = horizons.iter().copied().max().unwrap_or(0);
    (len + 1).saturating_sub(lag + max_h)
}

/// One sample per start index `t`: inputs `frames[t..t+lag]`, and for each
/// horizon `h` the link speeds at `t + lag - 1 + h`.
pub fn make_windows(
    frames: &[Arc<NormalizedFrame>],
    link_speeds: &[Vec<f64>],
    lag: usize,
    horizons: &[usize],
) -> Result<Vec<SampleWindow>> {
    if lag == 0 {
        return Err(Error::config("model.lag", "must be at least 1"));
    }
    if horizons.is_empty() || horizons.contains(&0) {
        return Err(Error::config("model.horizons", "must be a nonempty set of positive steps"));
    }
    if frames.len() != link_speeds.len() {
        return Err(Error::Contract(format!(
            "{} frames but {} link speed vectors",
            frames.len(),
            link_speeds.len()
        )));
    }
    let max_h = *horizons.iter().max().unwrap();
    let required = lag + max_h;
    if frames.len() < required {
        return Err(Error::InsufficientData {
            required,
            available: frames.len(),
        });
    }
    let count = window_count(frames.len(), lag, horizons);
    Ok((0..count)
        .map(|t| {
            let last = t + lag - 1;
            SampleWindow {
                start: t,
                inputs: frames[t..t + lag].to_vec(),
                targets: horizons
                    .iter()
                    .map(|&h| (h, link_speeds[last + h].clone()))
                    .collect(),
                last_observed: link_speeds[last].clone(),
            }
        })
        .collect())
}
