//! Deterministic synthetic road networks and traffic, standing in for
//! floating-car data at desk scale.

use std::f64::consts::PI;

use rand::Rng;

use super::network::{BBox, LatLon, LinkGeometry, RoadNetwork};
use super::speed::{LinkSpeedVector, SpeedRecord};
use super::LinkId;
use crate::error::{Error, Result};
use crate::rng::substream;

/// South-west corner of generated networks.
pub const SYNTH_ORIGIN: LatLon = (39.90, 116.35);
/// First record timestamp of generated traffic (2015-06-01T00:00:00Z).
pub const SYNTH_EPOCH: i64 = 1_433_116_800;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrafficParams {
    pub v_max: f64,
    /// Half-width of the uniform per-period noise, km/h.
    pub noise_amplitude: f64,
    /// Periods per daily-cycle analogue.
    pub cycle: usize,
    /// Peak depth of the recurring congestion wave, km/h.
    pub congestion_depth: f64,
}

impl Default for TrafficParams {
    fn default() -> Self {
        TrafficParams {
            v_max: 80.0,
            noise_amplitude: 2.0,
            cycle: 60,
            congestion_depth: 20.0,
        }
    }
}

/// A serpentine road covering an `H×W` grid of `cell_size` cells, cut into
/// `n_links` consecutive links of equal length. Link `k+1` starts where link
/// `k` ends, so consecutive ids are adjacent. The bounding box of the
/// geometry spans exactly `H×W` cells.
pub fn synth_network(
    n_links: usize,
    grid: (usize, usize),
    cell_size: (f64, f64),
    seed: u64,
) -> Result<RoadNetwork> {
    if n_links == 0 {
        return Err(Error::config("synth.links", "must be at least 1"));
    }
    if grid.0 == 0 || grid.1 == 0 {
        return Err(Error::config("model.grid", "extents must be positive"));
    }
    let mut rng = substream(seed, "synth.network");
    let bbox = BBox {
        min_lat: SYNTH_ORIGIN.0,
        min_lon: SYNTH_ORIGIN.1,
        max_lat: SYNTH_ORIGIN.0 + grid.0 as f64 * cell_size.0,
        max_lon: SYNTH_ORIGIN.1 + grid.1 as f64 * cell_size.1,
    };
    let rows = (n_links / 2 + 1).clamp(2, grid.0 + 1);
    let spacing = (bbox.max_lat - bbox.min_lat) / (rows - 1) as f64;
    let mut route: Vec<LatLon> = Vec::new();
    for r in 0..rows {
        let interior = r > 0 && r + 1 < rows;
        let lat = bbox.max_lat - r as f64 * spacing
            + if interior { rng.gen_range(-0.25..0.25) * spacing } else { 0.0 };
        let (from, to) = if r % 2 == 0 {
            (bbox.min_lon, bbox.max_lon)
        } else {
            (bbox.max_lon, bbox.min_lon)
        };
        route.push((lat, from));
        if interior {
            let f: f64 = rng.gen_range(0.3..0.7);
            let kink = lat + rng.gen_range(-0.2..0.2) * spacing;
            route.push((kink, from + f * (to - from)));
        }
        route.push((lat, to));
    }
    let links = cut_route(&route, n_links)?;
    RoadNetwork::new(links, cell_size, Some(bbox))
}

fn dist(a: LatLon, b: LatLon) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn cut_route(route: &[LatLon], n: usize) -> Result<Vec<LinkGeometry>> {
    let mut cum = vec![0.0];
    for w in route.windows(2) {
        cum.push(cum.last().unwrap() + dist(w[0], w[1]));
    }
    let total = *cum.last().unwrap();
    let point_at = |s: f64| -> LatLon {
        let i = cum.partition_point(|&c| c <= s).clamp(1, route.len() - 1);
        let (a, b) = (route[i - 1], route[i]);
        let seg = cum[i] - cum[i - 1];
        let f = if seg > 0.0 { ((s - cum[i - 1]) / seg).clamp(0.0, 1.0) } else { 0.0 };
        (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1))
    };
    let mut links = Vec::with_capacity(n);
    let mut prev_end = route[0];
    for k in 0..n {
        let (s0, s1) = (total * k as f64 / n as f64, total * (k + 1) as f64 / n as f64);
        let mut poly = vec![prev_end];
        for (v, &c) in route.iter().zip(&cum) {
            if c > s0 && c < s1 {
                poly.push(*v);
            }
        }
        let end = if k + 1 == n { *route.last().unwrap() } else { point_at(s1) };
        poly.push(end);
        poly.dedup();
        prev_end = end;
        links.push(LinkGeometry::new(LinkId(k as u64 + 1), poly)?);
    }
    Ok(links)
}

/// Per-link sinusoid plus link offset, a recurring congestion dip that
/// travels upstream one link every two periods, and bounded uniform noise.
/// With zero noise the series repeats exactly every `cycle` periods.
pub fn synth_traffic(
    network: &RoadNetwork,
    n_periods: usize,
    params: &TrafficParams,
    seed: u64,
) -> Result<Vec<LinkSpeedVector>> {
    if n_periods == 0 {
        return Err(Error::config("synth.periods", "must be at least 1"));
    }
    if params.cycle == 0 {
        return Err(Error::config("synth.cycle", "must be at least 1"));
    }
    let ids = network.link_ids();
    let n = ids.len();
    let cycle = params.cycle;
    let mut rng = substream(seed, "synth.traffic");
    struct Profile {
        base: f64,
        amp: f64,
        offset: usize,
        depth: f64,
        center: usize,
    }
    let wave_start = rng.gen_range(0..cycle);
    let profiles: Vec<Profile> = (0..n)
        .map(|l| Profile {
            base: rng.gen_range(40.0..60.0),
            amp: rng.gen_range(5.0..12.0),
            offset: rng.gen_range(0..cycle),
            depth: params.congestion_depth * rng.gen_range(0.5..1.0),
            center: (wave_start + 2 * (n - 1 - l)) % cycle,
        })
        .collect();
    let width = (cycle as f64 / 12.0).max(1.0);
    let mut noise = substream(seed, "synth.noise");
    Ok((0..n_periods)
        .map(|t| {
            let speeds = ids
                .iter()
                .zip(&profiles)
                .map(|(&id, p)| {
                    let pos = (t + p.offset) % cycle;
                    let seasonal = p.amp * (2.0 * PI * pos as f64 / cycle as f64).sin();
                    let tau = t % cycle;
                    let d = tau.abs_diff(p.center);
                    let d = d.min(cycle - d) as f64;
                    let dip = p.depth * (-(d / width).powi(2)).exp();
                    let eps = params.noise_amplitude * noise.gen_range(-1.0..=1.0);
                    let v = (p.base + seasonal - dip + eps).clamp(0.0, params.v_max);
                    (id, Some(v))
                })
                .collect();
            LinkSpeedVector {
                period_index: t as i64,
                speeds,
            }
        })
        .collect())
}

/// Per-vehicle records whose per-period mean reproduces `traffic`, with
/// roughly one link-period in a hundred left unobserved.
pub fn synth_records(
    traffic: &[LinkSpeedVector],
    period_secs: i64,
    seed: u64,
) -> Vec<SpeedRecord> {
    let mut rng = substream(seed, "synth.records");
    let mut out = Vec::new();
    for (t, vec) in traffic.iter().enumerate() {
        let t0 = SYNTH_EPOCH + t as i64 * period_secs;
        for (&link_id, v) in &vec.speeds {
            let Some(v) = *v else { continue };
            if t > 0 && rng.gen_bool(0.01) {
                continue;
            }
            let k = rng.gen_range(1..=3usize);
            let delta = rng.gen_range(0.0..5.0f64).min(v);
            let speeds: Vec<f64> = match k {
                1 => vec![v],
                2 => vec![v - delta, v + delta],
                _ => vec![v - delta, v, v + delta],
            };
            for s in speeds {
                out.push(SpeedRecord {
                    link_id,
                    timestamp: t0 + rng.gen_range(0..period_secs),
                    speed: s,
                });
            }
        }
    }
    out.sort_by_key(|r| (r.timestamp, r.link_id));
    out
}
