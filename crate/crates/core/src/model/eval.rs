//! Held-out evaluation of any forecaster, with a per-link error report.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;

use super::metrics::Metrics;
use super::Model;
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::raster::{LinkId, SampleWindow};

/// Default per-link MAE above which a link is flagged, km/h.
pub const DEFAULT_FLAG_THRESHOLD: f64 = 2.0;

/// Anything that maps an input window to km/h forecasts per horizon.
pub trait Forecaster: Sync {
    fn name(&self) -> String;
    fn forecast(&self, sample: &SampleWindow) -> Result<BTreeMap<usize, Vec<f64>>>;
}

/// Repeats the last observed link speeds for every horizon.
#[derive(Clone, Copy, Debug, Default)]
pub struct Persistence;

impl Forecaster for Persistence {
    fn name(&self) -> String {
        "persistence".into()
    }

    fn forecast(&self, sample: &SampleWindow) -> Result<BTreeMap<usize, Vec<f64>>> {
        Ok(sample
            .targets
            .keys()
            .map(|&h| (h, sample.last_observed.clone()))
            .collect())
    }
}

/// A model with its trained parameters.
pub struct Trained {
    pub model: Model,
    pub store: ParamStore<f32>,
}

impl Forecaster for Trained {
    fn name(&self) -> String {
        self.model.config.architecture.to_string()
    }

    fn forecast(&self, sample: &SampleWindow) -> Result<BTreeMap<usize, Vec<f64>>> {
        self.model.predict(&self.store, &sample.inputs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinkError {
    pub link_id: LinkId,
    pub mae: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub name: String,
    /// Pooled over every horizon.
    pub overall: Metrics,
    pub per_horizon: BTreeMap<usize, Metrics>,
    pub links: Vec<LinkError>,
}

impl Evaluation {
    pub fn flagged(&self) -> usize {
        self.links.iter().filter(|l| l.flagged).count()
    }

    /// `link_id,mae_kmh,flagged`.
    pub fn write_link_report<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "link_id,mae_kmh,flagged")?;
        for l in &self.links {
            writeln!(w, "{},{:.6},{}", l.link_id, l.mae, u8::from(l.flagged))?;
        }
        Ok(())
    }
}

/// Scores `forecaster` on `samples`; links whose MAE exceeds `threshold`
/// km/h are flagged.
pub fn evaluate<F: Forecaster + ?Sized>(
    forecaster: &F,
    samples: &[SampleWindow],
    link_ids: &[LinkId],
    threshold: f64,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let forecasts = samples
        .par_iter()
        .map(|s| forecaster.forecast(s))
        .collect::<Result<Vec<_>>>()?;
    let mut all_p = Vec::new();
    let mut all_y = Vec::new();
    // horizon -> (predictions, targets), one row per sample
    type Rows = (Vec<Vec<f64>>, Vec<Vec<f64>>);
    let mut by_h: BTreeMap<usize, Rows> = BTreeMap::new();
    for (s, f) in samples.iter().zip(forecasts) {
        for (h, y) in &s.targets {
            let p = f
                .get(h)
                .ok_or_else(|| Error::shape(format!("forecast lacks horizon {h}")))?;
            if p.len() != link_ids.len() || y.len() != link_ids.len() {
                return Err(Error::shape(format!(
                    "forecast of {} links against {} targets and {} link ids",
                    p.len(),
                    y.len(),
                    link_ids.len()
                )));
            }
            let e = by_h.entry(*h).or_default();
            e.0.push(p.clone());
            e.1.push(y.clone());
            all_p.push(p.clone());
            all_y.push(y.clone());
        }
    }
    let overall = Metrics::from_rows(&all_p, &all_y)?;
    let per_horizon = by_h
        .into_iter()
        .map(|(h, (p, y))| Ok((h, Metrics::from_rows(&p, &y)?)))
        .collect::<Result<_>>()?;
    let links = link_ids
        .iter()
        .zip(&overall.link_mae)
        .map(|(&link_id, &mae)| LinkError {
            link_id,
            mae,
            flagged: mae > threshold,
        })
        .collect();
    Ok(Evaluation {
        name: forecaster.name(),
        overall,
        per_horizon,
        links,
    })
}
