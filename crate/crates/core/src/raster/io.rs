//! Text formats for road geometry and speed records.
//!
//! Geometry: one link per line, `link_id, lat lon; lat lon; ...`. Blank
//! lines and lines starting with `#` are ignored.
//!
//! Records: a table with header `link_id,timestamp,speed_kmh`.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use super::network::LinkGeometry;
use super::speed::SpeedRecord;
use super::LinkId;
use crate::error::{Error, Result};

pub const RECORDS_HEADER: &str = "link_id,timestamp,speed_kmh";

fn parse_err(path: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

pub fn parse_geometry<R: BufRead>(reader: R, path: &str) -> Result<Vec<LinkGeometry>> {
    let mut links = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let (id, rest) = text
            .split_once(',')
            .ok_or_else(|| parse_err(path, lineno, "expected `link_id, lat lon; ...`"))?;
        let id: u64 = id
            .trim()
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad link id `{}`", id.trim())))?;
        let mut poly = Vec::new();
        for vertex in rest.split(';').map(str::trim).filter(|v| !v.is_empty()) {
            let mut parts = vertex.split_whitespace().map(str::parse::<f64>);
            match (parts.next(), parts.next(), parts.next()) {
                (Some(Ok(lat)), Some(Ok(lon)), None) => poly.push((lat, lon)),
                _ => return Err(parse_err(path, lineno, format!("bad vertex `{vertex}`"))),
            }
        }
        let link = LinkGeometry::new(LinkId(id), poly)
            .map_err(|e| parse_err(path, lineno, e.to_string()))?;
        links.push(link);
    }
    Ok(links)
}

pub fn write_geometry<W: Write>(mut w: W, links: &[LinkGeometry]) -> Result<()> {
    for l in links {
        let mut line = format!("{},", l.id());
        for (k, (lat, lon)) in l.polyline().iter().enumerate() {
            let sep = if k == 0 { " " } else { "; " };
            write!(line, "{sep}{lat} {lon}").unwrap();
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn parse_records<R: BufRead>(reader: R, path: &str) -> Result<Vec<SpeedRecord>> {
    let mut lines = reader.lines().enumerate();
    match lines.next() {
        Some((_, header)) => {
            if header?.trim() != RECORDS_HEADER {
                return Err(parse_err(path, 1, format!("expected header `{RECORDS_HEADER}`")));
            }
        }
        None => return Err(Error::NoRecords),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [id, ts, speed] = fields[..] else {
            return Err(parse_err(path, lineno, "expected 3 fields"));
        };
        let record = SpeedRecord {
            link_id: LinkId(
                id.parse()
                    .map_err(|_| parse_err(path, lineno, format!("bad link id `{id}`")))?,
            ),
            timestamp: ts
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("bad timestamp `{ts}`")))?,
            speed: speed
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("bad speed `{speed}`")))?,
        };
        if !(record.speed >= 0.0) {
            return Err(Error::RejectedRecord(format!(
                "{path}:{lineno}: negative speed {}",
                record.speed
            )));
        }
        out.push(record);
    }
    if out.is_empty() {
        return Err(Error::NoRecords);
    }
    Ok(out)
}

pub fn write_records<W: Write>(mut w: W, records: &[SpeedRecord]) -> Result<()> {
    writeln!(w, "{RECORDS_HEADER}")?;
    for r in records {
        writeln!(w, "{},{},{}", r.link_id, r.timestamp, r.speed)?;
    }
    Ok(())
}
