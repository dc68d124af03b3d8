//! Road geometry and the cell grid laid over it.
//!
//! Coordinates are plate carrée degrees, `(latitude, longitude)`. Row 0 of
//! the grid is the northern edge of the bounding box; column 0 the western.

use std::collections::BTreeSet;

use super::LinkId;
use crate::error::{Error, Result};

/// A `(lat, lon)` vertex in degrees.
pub type LatLon = (f64, f64);

#[derive(Clone, Debug, PartialEq)]
pub struct LinkGeometry {
    id: LinkId,
    polyline: Vec<LatLon>,
}

impl LinkGeometry {
    pub fn new(id: LinkId, polyline: Vec<LatLon>) -> Result<Self> {
        if polyline.len() < 2 {
            return Err(Error::config(
                format!("link {id}"),
                "polyline needs at least two vertices",
            ));
        }
        if polyline.iter().any(|&(a, b)| !a.is_finite() || !b.is_finite()) {
            return Err(Error::config(format!("link {id}"), "non-finite vertex"));
        }
        if polyline.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config(
                format!("link {id}"),
                "consecutive vertices must be distinct",
            ));
        }
        Ok(LinkGeometry { id, polyline })
    }

    pub fn id(&self) -> LinkId {
        self.id
    }

    pub fn polyline(&self) -> &[LatLon] {
        &self.polyline
    }

    pub fn segments(&self) -> impl Iterator<Item = (LatLon, LatLon)> + '_ {
        self.polyline.windows(2).map(|w| (w[0], w[1]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl BBox {
    pub fn of_links(links: &[LinkGeometry]) -> Option<BBox> {
        let mut pts = links.iter().flat_map(|l| l.polyline.iter());
        let &(lat, lon) = pts.next()?;
        let mut b = BBox {
            min_lat: lat,
            min_lon: lon,
            max_lat: lat,
            max_lon: lon,
        };
        for &(lat, lon) in pts {
            b.min_lat = b.min_lat.min(lat);
            b.max_lat = b.max_lat.max(lat);
            b.min_lon = b.min_lon.min(lon);
            b.max_lon = b.max_lon.max(lon);
        }
        Some(b)
    }

    pub fn contains(&self, (lat, lon): LatLon) -> bool {
        lat >= self.min_lat && lat <= self.max_lat && lon >= self.min_lon && lon <= self.max_lon
    }
}

/// Closed axis-aligned cell rectangle in degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellRect {
    pub lat_lo: f64,
    pub lat_hi: f64,
    pub lon_lo: f64,
    pub lon_hi: f64,
}

#[derive(Clone, Debug)]
pub struct RoadNetwork {
    links: Vec<LinkGeometry>,
    bbox: BBox,
    cell_size: (f64, f64),
    grid: (usize, usize),
    /// Indices into `links` of every link crossing each cell, row-major.
    cell_links: Vec<Vec<usize>>,
}

/// Relative slack when dividing an extent by the cell size, so that an
/// extent of exactly `n` cells does not round up to `n + 1`.
const DIM_SLACK: f64 = 1e-9;

impl RoadNetwork {
    /// Builds the network and its cell index. Links are kept in ascending
    /// id order, which is the canonical link ordering everywhere else.
    /// Without an explicit `bbox` the extent of the geometry is used.
    pub fn new(
        mut links: Vec<LinkGeometry>,
        cell_size: (f64, f64),
        bbox: Option<BBox>,
    ) -> Result<Self> {
        if links.is_empty() {
            return Err(Error::config("network", "no links"));
        }
        if !(cell_size.0 > 0.0 && cell_size.1 > 0.0) {
            return Err(Error::config("raster.cell_size", "must be positive"));
        }
        links.sort_by_key(|l| l.id);
        if let Some(w) = links.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::config("network", format!("duplicate link id {}", w[0].id)));
        }
        let bbox = match bbox {
            Some(b) => b,
            None => BBox::of_links(&links).expect("non-empty"),
        };
        if let Some(l) = links
            .iter()
            .find(|l| l.polyline.iter().any(|&p| !bbox.contains(p)))
        {
            return Err(Error::config(
                format!("link {}", l.id),
                "polyline leaves the bounding box",
            ));
        }
        let axis = |extent: f64, cell: f64| ((extent / cell - DIM_SLACK).ceil() as usize).max(1);
        let grid = (
            axis(bbox.max_lat - bbox.min_lat, cell_size.0),
            axis(bbox.max_lon - bbox.min_lon, cell_size.1),
        );
        let mut net = RoadNetwork {
            links,
            bbox,
            cell_size,
            grid,
            cell_links: Vec::new(),
        };
        net.cell_links = net.index_cells();
        Ok(net)
    }

    fn index_cells(&self) -> Vec<Vec<usize>> {
        let (h, w) = self.grid;
        let mut cells: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); h * w];
        for (li, link) in self.links.iter().enumerate() {
            for (a, b) in link.segments() {
                let (lat_min, lat_max) = (a.0.min(b.0), a.0.max(b.0));
                let (lon_min, lon_max) = (a.1.min(b.1), a.1.max(b.1));
                let row = |lat: f64| ((self.bbox.max_lat - lat) / self.cell_size.0).floor() as isize;
                let col = |lon: f64| ((lon - self.bbox.min_lon) / self.cell_size.1).floor() as isize;
                let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
                let (r0, r1) = (clamp(row(lat_max) - 1, h), clamp(row(lat_min) + 1, h));
                let (c0, c1) = (clamp(col(lon_min) - 1, w), clamp(col(lon_max) + 1, w));
                for r in r0..=r1 {
                    for c in c0..=c1 {
                        if segment_intersects_rect(a, b, &self.cell_rect(r, c)) {
                            cells[r * w + c].insert(li);
                        }
                    }
                }
            }
        }
        cells.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    pub fn links(&self) -> &[LinkGeometry] {
        &self.links
    }

    pub fn link_ids(&self) -> Vec<LinkId> {
        self.links.iter().map(|l| l.id).collect()
    }

    pub fn link_index(&self, id: LinkId) -> Option<usize> {
        self.links.binary_search_by_key(&id, |l| l.id).ok()
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    pub fn cell_size(&self) -> (f64, f64) {
        self.cell_size
    }

    /// `(H rows, W cols)`.
    pub fn grid_dims(&self) -> (usize, usize) {
        self.grid
    }

    pub fn cell_rect(&self, row: usize, col: usize) -> CellRect {
        let lat_hi = self.bbox.max_lat - row as f64 * self.cell_size.0;
        let lon_lo = self.bbox.min_lon + col as f64 * self.cell_size.1;
        CellRect {
            lat_lo: lat_hi - self.cell_size.0,
            lat_hi,
            lon_lo,
            lon_hi: lon_lo + self.cell_size.1,
        }
    }

    /// Links (as indices into [`RoadNetwork::links`]) crossing a cell.
    pub fn links_in_cell(&self, row: usize, col: usize) -> &[usize] {
        &self.cell_links[row * self.grid.1 + col]
    }

    /// Pairs of link indices sharing a polyline endpoint.
    pub fn adjacent_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.links.len() {
            for j in i + 1..self.links.len() {
                let (a, b) = (&self.links[i].polyline, &self.links[j].polyline);
                let ends_a = [a[0], a[a.len() - 1]];
                let ends_b = [b[0], b[b.len() - 1]];
                if ends_a.iter().any(|p| ends_b.contains(p)) {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Liang–Barsky clip of segment `a`–`b` against a closed rectangle.
pub fn segment_intersects_rect(a: LatLon, b: LatLon, rect: &CellRect) -> bool {
    let (x0, y0) = (a.1, a.0);
    let (dx, dy) = (b.1 - a.1, b.0 - a.0);
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    let edges = [
        (-dx, x0 - rect.lon_lo),
        (dx, rect.lon_hi - x0),
        (-dy, y0 - rect.lat_lo),
        (dy, rect.lat_hi - y0),
    ];
    for (p, q) in edges {
        if p == 0.0 {
            if q < 0.0 {
                return false;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                if r > t1 {
                    return false;
                }
                t0 = t0.max(r);
            } else {
                if r < t0 {
                    return false;
                }
                t1 = t1.min(r);
            }
        }
    }
    t0 <= t1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(lat_lo: f64, lat_hi: f64, lon_lo: f64, lon_hi: f64) -> CellRect {
        CellRect {
            lat_lo,
            lat_hi,
            lon_lo,
            lon_hi,
        }
    }

    #[test]
    fn clip_cases() {
        let r = rect(0.0, 1.0, 0.0, 1.0);
        assert!(segment_intersects_rect((0.5, -1.0), (0.5, 2.0), &r));
        assert!(segment_intersects_rect((0.2, 0.2), (0.3, 0.3), &r));
        assert!(!segment_intersects_rect((2.0, -1.0), (2.0, 2.0), &r));
        // touches the corner only
        assert!(segment_intersects_rect((1.0, 1.0), (2.0, 2.0), &r));
        assert!(!segment_intersects_rect((3.0, 0.0), (0.0, 3.5), &r));
    }

    #[test]
    fn link_validation() {
        assert!(LinkGeometry::new(LinkId(1), vec![(0.0, 0.0)]).is_err());
        assert!(LinkGeometry::new(LinkId(1), vec![(0.0, 0.0), (0.0, 0.0)]).is_err());
        assert!(LinkGeometry::new(LinkId(1), vec![(0.0, 0.0), (0.0, 1.0)]).is_ok());
    }

    #[test]
    fn grid_dims_follow_extent() {
        let l = LinkGeometry::new(LinkId(3), vec![(0.0, 0.0), (0.0004, 0.00035)]).unwrap();
        let net = RoadNetwork::new(vec![l], (0.0001, 0.0001), None).unwrap();
        assert_eq!(net.grid_dims(), (4, 4));
        let l = LinkGeometry::new(LinkId(3), vec![(0.0, 0.0), (0.0, 0.001)]).unwrap();
        let net = RoadNetwork::new(vec![l], (0.0001, 0.0001), None).unwrap();
        assert_eq!(net.grid_dims(), (1, 10));
    }

    #[test]
    fn duplicate_ids_and_escaping_links_rejected() {
        let a = LinkGeometry::new(LinkId(1), vec![(0.0, 0.0), (1.0, 1.0)]).unwrap();
        assert!(RoadNetwork::new(vec![a.clone(), a.clone()], (0.5, 0.5), None).is_err());
        let bbox = BBox {
            min_lat: 0.0,
            min_lon: 0.0,
            max_lat: 0.5,
            max_lon: 0.5,
        };
        assert!(RoadNetwork::new(vec![a], (0.1, 0.1), Some(bbox)).is_err());
    }
}
