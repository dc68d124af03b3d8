//! Time-aligned frame and link-speed series, chronological splits and
//! contiguous folds.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{
    aggregate_periods, fill_missing, make_windows, rasterize, synth_network, synth_records,
    synth_traffic, LinkId, LinkSpeedVector, Normalizer, NormalizedFrame, RoadNetwork,
    SampleWindow, SpeedFrame, SpeedRecord, TrafficParams,
};

/// Synthetic dataset generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub links: usize,
    pub periods: usize,
    pub grid: (usize, usize),
    pub noise_amplitude: f64,
    pub cycle: usize,
    pub congestion_depth: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let t = TrafficParams::default();
        SynthConfig {
            links: 8,
            periods: 720,
            grid: (20, 20),
            noise_amplitude: t.noise_amplitude,
            cycle: t.cycle,
            congestion_depth: t.congestion_depth,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.links == 0 {
            return Err(Error::config("synth.links", "must be at least 1"));
        }
        if self.periods == 0 {
            return Err(Error::config("synth.periods", "must be at least 1"));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(Error::config("synth.grid", "extents must be positive"));
        }
        if self.cycle == 0 {
            return Err(Error::config("synth.cycle", "must be at least 1"));
        }
        if !(self.noise_amplitude >= 0.0) {
            return Err(Error::config("synth.noise_amplitude", "must be non-negative"));
        }
        if !(self.congestion_depth >= 0.0) {
            return Err(Error::config("synth.congestion_depth", "must be non-negative"));
        }
        Ok(())
    }

    pub fn traffic(&self, v_max: f64) -> TrafficParams {
        TrafficParams {
            v_max,
            noise_amplitude: self.noise_amplitude,
            cycle: self.cycle,
            congestion_depth: self.congestion_depth,
        }
    }
}

/// Everything the synthetic generator produces.
pub struct SynthOutput {
    pub network: RoadNetwork,
    pub records: Vec<SpeedRecord>,
    pub frames: Vec<SpeedFrame>,
    pub series: Series,
}

/// Frames and canonical-order link speeds, one entry per period.
#[derive(Clone, Debug)]
pub struct Series {
    pub link_ids: Vec<LinkId>,
    pub frames: Vec<Arc<NormalizedFrame>>,
    /// km/h.
    pub speeds: Vec<Vec<f64>>,
    pub v_max: f64,
}

/// Aggregates records per period, fills gaps and rasterizes.
pub fn frames_from_records(
    network: &RoadNetwork,
    records: &[SpeedRecord],
    period_secs: i64,
) -> Result<(Vec<LinkSpeedVector>, Vec<SpeedFrame>)> {
    let filled = fill_missing(&aggregate_periods(network, records, period_secs)?)?;
    let frames = filled
        .iter()
        .map(|v| rasterize(network, v, v.period_index * period_secs))
        .collect::<Result<_>>()?;
    Ok((filled, frames))
}

impl Series {
    pub fn new(
        network: &RoadNetwork,
        filled: &[LinkSpeedVector],
        frames: &[SpeedFrame],
        v_max: f64,
    ) -> Result<Series> {
        let norm = Normalizer::new(v_max)?;
        if filled.len() != frames.len() {
            return Err(Error::Contract(format!(
                "{} frames but {} link speed vectors",
                frames.len(),
                filled.len()
            )));
        }
        let dims = network.grid_dims();
        if let Some(f) = frames.iter().find(|f| (f.rows, f.cols) != dims) {
            return Err(Error::shape(format!(
                "frame is {}x{}, network grid is {}x{}",
                f.rows, f.cols, dims.0, dims.1
            )));
        }
        let link_ids = network.link_ids();
        let speeds = filled
            .iter()
            .map(|v| {
                link_ids
                    .iter()
                    .map(|id| {
                        v.speeds
                            .get(id)
                            .copied()
                            .flatten()
                            .ok_or(Error::UnknownLink(*id))
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        Ok(Series {
            link_ids,
            frames: frames.iter().map(|f| Arc::new(norm.normalize_frame(f))).collect(),
            speeds,
            v_max,
        })
    }

    pub fn from_records(
        network: &RoadNetwork,
        records: &[SpeedRecord],
        period_secs: i64,
        v_max: f64,
    ) -> Result<(Series, Vec<SpeedFrame>)> {
        let (filled, frames) = frames_from_records(network, records, period_secs)?;
        Ok((Series::new(network, &filled, &frames, v_max)?, frames))
    }

    /// Network, per-vehicle records and the frames rasterized from them,
    /// all from one seed.
    pub fn synthetic(
        cfg: &SynthConfig,
        cell_size: (f64, f64),
        period_secs: i64,
        v_max: f64,
        seed: u64,
    ) -> Result<SynthOutput> {
        cfg.validate()?;
        let network = synth_network(cfg.links, cfg.grid, cell_size, seed)?;
        let traffic = synth_traffic(&network, cfg.periods, &cfg.traffic(v_max), seed)?;
        let records = synth_records(&traffic, period_secs, seed);
        let (series, frames) = Series::from_records(&network, &records, period_secs, v_max)?;
        Ok(SynthOutput {
            network,
            records,
            frames,
            series,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn grid(&self) -> (usize, usize) {
        self.frames.first().map_or((0, 0), |f| (f.rows, f.cols))
    }

    pub fn windows(&self, lag: usize, horizons: &[usize]) -> Result<Vec<SampleWindow>> {
        make_windows(&self.frames, &self.speeds, lag, horizons)
    }
}

/// Train, validation and test index ranges in time order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// `[train][gap][val][gap][test]` over `n` time-ordered samples. The gap
/// keeps windows of neighbouring parts from sharing periods.
pub fn chronological_split(
    n: usize,
    val_fraction: f64,
    test_fraction: f64,
    gap: usize,
) -> Result<Split> {
    for (field, f) in [
        ("train.val_fraction", val_fraction),
        ("train.test_fraction", test_fraction),
    ] {
        if !(0.0..1.0).contains(&f) {
            return Err(Error::config(field, "must lie in [0, 1)"));
        }
    }
    let n_test = (n as f64 * test_fraction).round() as usize;
    let n_val = (n as f64 * val_fraction).round() as usize;
    let gaps = gap * (usize::from(n_val > 0) + usize::from(n_test > 0));
    let used = n_test + n_val + gaps;
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if used >= n {
        return Err(Error::InsufficientData {
            required: used + 1,
            available: n,
        });
    }
    let n_train = n - used;
    let val_start = n_train + if n_val > 0 { gap } else { 0 };
    let val = val_start..val_start + n_val;
    let test_start = val.end + if n_test > 0 { gap } else { 0 };
    Ok(Split {
        train: 0..n_train,
        val,
        test: test_start..test_start + n_test,
    })
}

/// `k` contiguous blocks covering `0..n`; sizes differ by at most one.
pub fn fold_ranges(n: usize, k: usize) -> Result<Vec<Range<usize>>> {
    if k < 2 {
        return Err(Error::config("train.folds", "need at least 2 folds"));
    }
    if n < k {
        return Err(Error::TooFewSamples {
            samples: n,
            folds: k,
        });
    }
    let (base, extra) = (n / k, n % k);
    let mut start = 0;
    Ok((0..k)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}
