//! From road geometry and vehicle speeds to normalized grid frames and
//! windowed training samples.

use std::fmt;

pub mod frame;
pub mod io;
pub mod network;
pub mod speed;
pub mod synth;
pub mod window;

pub use frame::{
    normalize_frame, rasterize, rasterize_speeds, read_archive, write_archive, NormalizedFrame,
    Normalizer, SpeedFrame, DEFAULT_V_MAX,
};
pub use network::{segment_intersects_rect, BBox, CellRect, LinkGeometry, RoadNetwork};
pub use speed::{
    aggregate_link_speed, aggregate_periods, fill_missing, fill_series, LinkSpeedVector,
    SpeedRecord, DEFAULT_PERIOD_SECS,
};
pub use synth::{synth_network, synth_records, synth_traffic, TrafficParams};
pub use window::{make_windows, window_count, SampleWindow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LinkId(pub u64);

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[cfg(test)]
mod tests;
