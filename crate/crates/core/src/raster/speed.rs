//! Per-vehicle speed records, per-period link speeds and gap filling.

use std::collections::BTreeMap;

use super::network::RoadNetwork;
use super::LinkId;
use crate::error::{Error, Result};

/// Default aggregation period in seconds (2-minute frames).
pub const DEFAULT_PERIOD_SECS: i64 = 120;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeedRecord {
    pub link_id: LinkId,
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
    /// km/h
    pub speed: f64,
}

/// Link speeds of one aggregation period; `None` marks a link that no
/// vehicle traversed.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkSpeedVector {
    pub period_index: i64,
    pub speeds: BTreeMap<LinkId, Option<f64>>,
}

impl LinkSpeedVector {
    /// Speeds in canonical (ascending id) order, or `None` if any is missing.
    pub fn complete(&self) -> Option<Vec<f64>> {
        self.speeds.values().copied().collect()
    }
}

/// Mean speed of the records of one link in one period; `None` when there
/// are no records.
pub fn aggregate_link_speed(records: &[SpeedRecord]) -> Result<Option<f64>> {
    if let Some(bad) = records.iter().find(|r| !(r.speed >= 0.0) || !r.speed.is_finite()) {
        return Err(Error::RejectedRecord(format!(
            "link {} at {}: speed {}",
            bad.link_id, bad.timestamp, bad.speed
        )));
    }
    if records.is_empty() {
        return Ok(None);
    }
    let total: f64 = records.iter().map(|r| r.speed).sum();
    Ok(Some(total / records.len() as f64))
}

/// Buckets records into consecutive periods of `period_secs` starting at
/// the period containing the earliest record, and averages each
/// link/period cell. Every network link appears in every vector.
pub fn aggregate_periods(
    network: &RoadNetwork,
    records: &[SpeedRecord],
    period_secs: i64,
) -> Result<Vec<LinkSpeedVector>> {
    if period_secs <= 0 {
        return Err(Error::config("raster.period_seconds", "must be positive"));
    }
    let first = records.iter().map(|r| r.timestamp).min().ok_or(Error::NoRecords)?;
    let last = records.iter().map(|r| r.timestamp).max().unwrap();
    let origin = first.div_euclid(period_secs);
    let n_periods = (last.div_euclid(period_secs) - origin + 1) as usize;
    let n_links = network.links().len();
    let mut buckets: Vec<Vec<Vec<SpeedRecord>>> = vec![vec![Vec::new(); n_links]; n_periods];
    for r in records {
        let li = network.link_index(r.link_id).ok_or(Error::UnknownLink(r.link_id))?;
        let p = (r.timestamp.div_euclid(period_secs) - origin) as usize;
        buckets[p][li].push(*r);
    }
    let ids = network.link_ids();
    buckets
        .into_iter()
        .enumerate()
        .map(|(p, per_link)| {
            let speeds = ids
                .iter()
                .zip(&per_link)
                .map(|(&id, recs)| Ok((id, aggregate_link_speed(recs)?)))
                .collect::<Result<_>>()?;
            Ok(LinkSpeedVector {
                period_index: origin + p as i64,
                speeds,
            })
        })
        .collect()
}

/// Carries the last observation forward, then fills a leading gap
/// backward from the first observation. `None` if nothing was observed.
pub fn fill_series(series: &[Option<f64>]) -> Option<Vec<f64>> {
    let first = series.iter().find_map(|v| *v)?;
    let mut last = first;
    Some(
        series
            .iter()
            .map(|v| {
                if let Some(x) = v {
                    last = *x;
                }
                last
            })
            .collect(),
    )
}

/// Fills every link's gaps across the sequence. All vectors must carry the
/// same link set.
pub fn fill_missing(seq: &[LinkSpeedVector]) -> Result<Vec<LinkSpeedVector>> {
    let Some(head) = seq.first() else {
        return Ok(Vec::new());
    };
    let ids: Vec<LinkId> = head.speeds.keys().copied().collect();
    if seq.iter().any(|v| !v.speeds.keys().eq(ids.iter())) {
        return Err(Error::Contract(
            "link speed vectors carry different link sets".into(),
        ));
    }
    let mut filled: BTreeMap<LinkId, Vec<f64>> = BTreeMap::new();
    let mut unfillable = Vec::new();
    for &id in &ids {
        let series: Vec<Option<f64>> = seq.iter().map(|v| v.speeds[&id]).collect();
        match fill_series(&series) {
            Some(s) => {
                filled.insert(id, s);
            }
            None => unfillable.push(id),
        }
    }
    if !unfillable.is_empty() {
        return Err(Error::UnfillableLinks(unfillable));
    }
    Ok(seq
        .iter()
        .enumerate()
        .map(|(t, v)| LinkSpeedVector {
            period_index: v.period_index,
            speeds: ids.iter().map(|&id| (id, Some(filled[&id][t]))).collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::network::LinkGeometry;

    fn rec(id: u64, t: i64, v: f64) -> SpeedRecord {
        SpeedRecord {
            link_id: LinkId(id),
            timestamp: t,
            speed: v,
        }
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate_link_speed(&[rec(1, 0, 30.0)]).unwrap(), Some(30.0));
        assert_eq!(
            aggregate_link_speed(&[rec(1, 0, 20.0), rec(1, 5, 40.0)]).unwrap(),
            Some(30.0)
        );
        assert_eq!(aggregate_link_speed(&[]).unwrap(), None);
        let err = aggregate_link_speed(&[rec(7, 12, -1.0)]).unwrap_err();
        assert!(matches!(err, Error::RejectedRecord(ref m) if m.contains("link 7")));
    }

    #[test]
    fn fill_examples() {
        assert_eq!(
            fill_series(&[Some(30.0), None, None, Some(50.0)]).unwrap(),
            vec![30.0, 30.0, 30.0, 50.0]
        );
        assert_eq!(fill_series(&[None, Some(40.0)]).unwrap(), vec![40.0, 40.0]);
        assert_eq!(fill_series(&[Some(1.0), Some(2.0)]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(fill_series(&[None, None]), None);
    }

    fn two_link_network() -> RoadNetwork {
        let a = LinkGeometry::new(LinkId(1), vec![(0.0, 0.0), (0.0, 1.0)]).unwrap();
        let b = LinkGeometry::new(LinkId(2), vec![(1.0, 0.0), (1.0, 1.0)]).unwrap();
        RoadNetwork::new(vec![a, b], (0.5, 0.5), None).unwrap()
    }

    #[test]
    fn periods_and_unfillable_links() {
        let net = two_link_network();
        let recs = [rec(1, 0, 30.0), rec(1, 130, 50.0), rec(1, 250, 10.0)];
        let seq = aggregate_periods(&net, &recs, 120).unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(seq[1].speeds[&LinkId(1)], Some(50.0));
        assert_eq!(seq[1].speeds[&LinkId(2)], None);
        assert!(matches!(
            fill_missing(&seq),
            Err(Error::UnfillableLinks(ref ids)) if ids == &[LinkId(2)]
        ));
        assert!(matches!(
            aggregate_periods(&net, &[rec(9, 0, 1.0)], 120),
            Err(Error::UnknownLink(LinkId(9)))
        ));
        assert!(matches!(aggregate_periods(&net, &[], 120), Err(Error::NoRecords)));
    }

    #[test]
    fn fill_missing_completes_vectors() {
        let net = two_link_network();
        let recs = [rec(1, 0, 30.0), rec(2, 130, 44.0), rec(1, 250, 10.0)];
        let seq = fill_missing(&aggregate_periods(&net, &recs, 120).unwrap()).unwrap();
        let rows: Vec<Vec<f64>> = seq.iter().map(|v| v.complete().unwrap()).collect();
        assert_eq!(rows, vec![vec![30.0, 44.0], vec![30.0, 44.0], vec![10.0, 44.0]]);
    }
}
