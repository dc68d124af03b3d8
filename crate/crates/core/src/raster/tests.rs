use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;

use super::*;

type P = (f64, f64);

fn orient(a: P, b: P, c: P) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn on_segment(a: P, b: P, p: P) -> bool {
    p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
}

fn segments_cross(a: P, b: P, c: P, d: P) -> bool {
    let (o1, o2, o3, o4) = (orient(a, b, c), orient(a, b, d), orient(c, d, a), orient(c, d, b));
    if o1 * o2 < 0.0 && o3 * o4 < 0.0 {
        return true;
    }
    (o1 == 0.0 && on_segment(a, b, c))
        || (o2 == 0.0 && on_segment(a, b, d))
        || (o3 == 0.0 && on_segment(c, d, a))
        || (o4 == 0.0 && on_segment(c, d, b))
}

/// Endpoint containment or crossing of one of the four cell edges.
fn oracle_hits(a: P, b: P, r: &CellRect) -> bool {
    let inside = |p: P| p.0 >= r.lat_lo && p.0 <= r.lat_hi && p.1 >= r.lon_lo && p.1 <= r.lon_hi;
    if inside(a) || inside(b) {
        return true;
    }
    let corners = [
        (r.lat_lo, r.lon_lo),
        (r.lat_lo, r.lon_hi),
        (r.lat_hi, r.lon_hi),
        (r.lat_hi, r.lon_lo),
    ];
    (0..4).any(|k| segments_cross(a, b, corners[k], corners[(k + 1) % 4]))
}

fn oracle_frame(net: &RoadNetwork, speeds: &[f64]) -> Vec<f32> {
    let (h, w) = net.grid_dims();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let rect = net.cell_rect(r, c);
            let hits: Vec<f64> = net
                .links()
                .iter()
                .zip(speeds)
                .filter(|(l, _)| l.segments().any(|(a, b)| oracle_hits(a, b, &rect)))
                .map(|(_, &s)| s)
                .collect();
            out.push(if hits.is_empty() {
                0.0
            } else {
                (hits.iter().sum::<f64>() / hits.len() as f64) as f32
            });
        }
    }
    out
}

fn toy_network() -> RoadNetwork {
    let links = vec![
        LinkGeometry::new(LinkId(10), vec![(0.35, 0.03), (0.37, 0.21), (0.23, 0.38)]).unwrap(),
        LinkGeometry::new(LinkId(20), vec![(0.02, 0.05), (0.32, 0.17)]).unwrap(),
        LinkGeometry::new(LinkId(30), vec![(0.13, 0.33), (0.06, 0.39), (0.01, 0.22)]).unwrap(),
    ];
    let bbox = BBox {
        min_lat: 0.0,
        min_lon: 0.0,
        max_lat: 0.4,
        max_lon: 0.4,
    };
    RoadNetwork::new(links, (0.1, 0.1), Some(bbox)).unwrap()
}

fn speeds_vector(net: &RoadNetwork, speeds: &[f64]) -> LinkSpeedVector {
    LinkSpeedVector {
        period_index: 0,
        speeds: net.link_ids().into_iter().zip(speeds.iter().map(|&s| Some(s))).collect(),
    }
}

#[test]
fn toy_frame_matches_exhaustive_oracle() {
    let net = toy_network();
    assert_eq!(net.grid_dims(), (4, 4));
    let speeds = [30.0, 50.0, 17.5];
    let frame = rasterize(&net, &speeds_vector(&net, &speeds), 0).unwrap();
    assert_eq!(frame.values, oracle_frame(&net, &speeds));
    assert!(frame.values.contains(&0.0));
    assert!(frame.values.contains(&40.0));
}

#[test]
fn shared_cell_takes_the_mean() {
    let links = vec![
        LinkGeometry::new(LinkId(1), vec![(0.5, 0.1), (0.5, 0.9)]).unwrap(),
        LinkGeometry::new(LinkId(2), vec![(0.1, 0.5), (0.9, 0.5)]).unwrap(),
    ];
    let bbox = BBox {
        min_lat: 0.0,
        min_lon: 0.0,
        max_lat: 1.0,
        max_lon: 1.0,
    };
    let net = RoadNetwork::new(links, (0.3, 0.3), Some(bbox)).unwrap();
    let f = rasterize(&net, &speeds_vector(&net, &[30.0, 50.0]), 0).unwrap();
    // the crossing lies in cell (1, 1)
    assert_eq!(f.get(1, 1), 40.0);
    assert_eq!(f.get(0, 0), 0.0);
}

#[test]
fn rasterize_rejects_unknown_and_missing_links() {
    let net = toy_network();
    let mut v = speeds_vector(&net, &[1.0, 2.0, 3.0]);
    v.speeds.insert(LinkId(99), Some(5.0));
    assert!(matches!(
        rasterize(&net, &v, 0),
        Err(crate::Error::UnknownLink(LinkId(99)))
    ));
    let mut v = speeds_vector(&net, &[1.0, 2.0, 3.0]);
    v.speeds.insert(LinkId(20), None);
    assert!(rasterize(&net, &v, 0).is_err());
}

#[test]
fn synthetic_network_matches_oracle() {
    let net = synth_network(8, (20, 20), (1e-4, 1e-4), 7).unwrap();
    let speeds: Vec<f64> = (0..8).map(|k| 20.0 + 5.0 * k as f64).collect();
    let frame = rasterize_speeds(&net, &speeds, 0);
    assert_eq!(frame.values, oracle_frame(&net, &speeds));
}

fn arb_network() -> impl Strategy<Value = RoadNetwork> {
    let vertex = (0.0f64..1.0, 0.0f64..1.0);
    let link = prop::collection::vec(vertex, 2..5);
    (prop::collection::vec(link, 1..6), 0.05f64..0.4).prop_filter_map("degenerate", |(ls, cell)| {
        let links: Option<Vec<_>> = ls
            .into_iter()
            .enumerate()
            .map(|(i, p)| LinkGeometry::new(LinkId(i as u64), p).ok())
            .collect();
        RoadNetwork::new(links?, (cell, cell), None).ok()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_background_and_mean_bound(net in arb_network(), seed in 0u64..1000) {
        let n = net.links().len();
        let speeds: Vec<f64> = (0..n).map(|k| ((seed as f64 + 1.0) * (k as f64 + 1.3)) % 80.0 + 1.0).collect();
        let frame = rasterize_speeds(&net, &speeds, 0);
        let (h, w) = net.grid_dims();
        prop_assert_eq!(frame.values.len(), h * w);
        for r in 0..h {
            for c in 0..w {
                let v = frame.get(r, c) as f64;
                let links = net.links_in_cell(r, c);
                if links.is_empty() {
                    prop_assert_eq!(v, 0.0);
                } else {
                    let lo = links.iter().map(|&l| speeds[l]).fold(f64::INFINITY, f64::min);
                    let hi = links.iter().map(|&l| speeds[l]).fold(0.0, f64::max);
                    prop_assert!(v >= lo as f32 as f64 - 1e-4 && v <= hi as f32 as f64 + 1e-4);
                }
            }
        }
    }

    #[test]
    fn window_count_formula(len in 1usize..80, lag in 1usize..20, hs in prop::collection::btree_set(1usize..12, 1..4)) {
        let horizons: Vec<usize> = hs.into_iter().collect();
        let max_h = *horizons.iter().max().unwrap();
        let frames: Vec<Arc<NormalizedFrame>> = (0..len)
            .map(|t| Arc::new(NormalizedFrame { timestamp: t as i64, rows: 1, cols: 1, values: vec![0.0] }))
            .collect();
        let speeds = vec![vec![1.0]; len];
        let res = make_windows(&frames, &speeds, lag, &horizons);
        if len >= lag + max_h {
            prop_assert_eq!(res.unwrap().len(), len - lag - max_h + 1);
        } else {
            let is_insufficient = matches!(res, Err(crate::Error::InsufficientData { .. }));
            prop_assert!(is_insufficient);
        }
    }

    #[test]
    fn normalize_round_trip(v_max in 1.0f64..200.0, frac in 0.0f64..=1.0) {
        let n = Normalizer::new(v_max).unwrap();
        let v = frac * v_max;
        prop_assert_eq!(n.denormalize(n.normalize(v)), v);
    }

    #[test]
    fn aggregate_matches_sum_over_k(speeds in prop::collection::vec(0.0f64..150.0, 1..40)) {
        let recs: Vec<SpeedRecord> = speeds
            .iter()
            .enumerate()
            .map(|(i, &s)| SpeedRecord { link_id: LinkId(1), timestamp: i as i64, speed: s })
            .collect();
        let mut total = 0.0;
        for s in &speeds {
            total += s;
        }
        let oracle = total / speeds.len() as f64;
        let got = aggregate_link_speed(&recs).unwrap().unwrap();
        prop_assert!((got - oracle).abs() <= 1e-12 * oracle.abs().max(1e-300));
    }
}

#[test]
fn end_to_end_records_to_frames() {
    let net = toy_network();
    let recs = vec![
        SpeedRecord { link_id: LinkId(10), timestamp: 0, speed: 30.0 },
        SpeedRecord { link_id: LinkId(20), timestamp: 10, speed: 50.0 },
        SpeedRecord { link_id: LinkId(30), timestamp: 15, speed: 10.0 },
        SpeedRecord { link_id: LinkId(10), timestamp: 125, speed: 20.0 },
    ];
    let seq = fill_missing(&aggregate_periods(&net, &recs, 120).unwrap()).unwrap();
    assert_eq!(seq.len(), 2);
    let expected: BTreeMap<LinkId, Option<f64>> =
        [(LinkId(10), Some(20.0)), (LinkId(20), Some(50.0)), (LinkId(30), Some(10.0))].into();
    assert_eq!(seq[1].speeds, expected);
    let f = rasterize(&net, &seq[1], 120).unwrap();
    assert_eq!(f.values, oracle_frame(&net, &[20.0, 50.0, 10.0]));
}
