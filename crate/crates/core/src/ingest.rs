//! Rasterizes point events from CSV into a `(time, space, space)` count tensor.
//!
//! Cells and time bins are half-open `[low, high)`. An event on the shared
//! edge of two cells lands in the cell the edge opens; an event on the upper
//! edge of the grid is outside it.

use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Absorbs decimal representation error when a coordinate sits on an edge.
const EDGE_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AxisOrder {
    /// Mode 2 is latitude, mode 3 longitude.
    LatLon,
    /// Mode 2 is longitude, mode 3 latitude.
    LonLat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lat: (f64, f64),
    pub lon: (f64, f64),
    /// Cell edge in degrees.
    pub cell: f64,
    pub order: AxisOrder,
}

impl GridSpec {
    pub fn new(lat: (f64, f64), lon: (f64, f64), cell: f64, order: AxisOrder) -> Result<Self> {
        let g = Self { lat, lon, cell, order };
        let finite = [lat.0, lat.1, lon.0, lon.1, cell].iter().all(|v| v.is_finite());
        if !finite || cell <= 0.0 || lat.1 <= lat.0 || lon.1 <= lon.0 {
            return Err(Error::config(format!("empty or invalid grid {g:?}")));
        }
        Ok(g)
    }

    /// Manhattan and surroundings in 0.001° cells: 120 longitude × 200
    /// latitude cells.
    pub fn nyc() -> Self {
        Self {
            lat: (40.66, 40.86),
            lon: (-74.03, -73.91),
            cell: 0.001,
            order: AxisOrder::LonLat,
        }
    }

    fn cells(range: (f64, f64), cell: f64) -> usize {
        ((range.1 - range.0) / cell - EDGE_EPSILON).ceil() as usize
    }

    pub fn lat_cells(&self) -> usize {
        Self::cells(self.lat, self.cell)
    }

    pub fn lon_cells(&self) -> usize {
        Self::cells(self.lon, self.cell)
    }

    /// `(J, K)` in the configured axis order.
    pub fn shape(&self) -> (usize, usize) {
        match self.order {
            AxisOrder::LatLon => (self.lat_cells(), self.lon_cells()),
            AxisOrder::LonLat => (self.lon_cells(), self.lat_cells()),
        }
    }

    fn axis(v: f64, range: (f64, f64), cell: f64, n: usize) -> Option<usize> {
        if !(v >= range.0 && v < range.1) {
            return None;
        }
        let idx = ((v - range.0) / cell + EDGE_EPSILON).floor() as usize;
        Some(idx.min(n - 1))
    }

    /// Mode-2 and mode-3 indices of a point, or `None` outside the grid.
    pub fn locate(&self, lat: f64, lon: f64) -> Option<(usize, usize)> {
        let y = Self::axis(lat, self.lat, self.cell, self.lat_cells())?;
        let x = Self::axis(lon, self.lon, self.cell, self.lon_cells())?;
        Some(match self.order {
            AxisOrder::LatLon => (y, x),
            AxisOrder::LonLat => (x, y),
        })
    }
}

/// Parses `30s`, `15m`, `6h`, `1d`, `1w` or plain seconds.
pub fn parse_bin_width(s: &str) -> Result<i64> {
    let s = s.trim();
    let (num, unit) = match s.find(|c: char| c.is_ascii_alphabetic()) {
        Some(p) => s.split_at(p),
        None => (s, "s"),
    };
    let n: i64 = num
        .parse()
        .map_err(|_| Error::config(format!("cannot parse bin width `{s}`")))?;
    let scale = match unit {
        "s" => 1,
        "m" => 60,
        "h" => 3600,
        "d" => 86_400,
        "w" => 604_800,
        _ => return Err(Error::config(format!("unknown bin unit `{unit}`"))),
    };
    if n <= 0 {
        return Err(Error::config("bin width must be positive"));
    }
    Ok(n * scale)
}

/// Epoch seconds from epoch numbers, RFC 3339, or naive UTC date-times.
pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(v) = s.parse::<f64>() {
        return v.is_finite().then(|| v.floor() as i64);
    }
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.timestamp());
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t.and_utc().timestamp());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
    pub count: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IngestStats {
    pub rows: usize,
    pub accepted: usize,
    pub outside_grid: usize,
    pub unparseable: usize,
    /// Index of the first time bin counted from the epoch.
    pub first_bin: i64,
}

/// Bins events into a tensor whose first slice is the earliest occupied bin.
pub fn rasterize(
    events: &[EventRecord],
    grid: &GridSpec,
    bin_seconds: i64,
) -> Result<(DenseTensor, IngestStats)> {
    if bin_seconds <= 0 {
        return Err(Error::config("bin width must be positive"));
    }
    let mut stats = IngestStats { rows: events.len(), ..IngestStats::default() };
    let mut placed = Vec::with_capacity(events.len());
    for e in events {
        match grid.locate(e.lat, e.lon) {
            Some(cell) => placed.push((e.timestamp.div_euclid(bin_seconds), cell, e.count)),
            None => stats.outside_grid += 1,
        }
    }
    let (Some(first), Some(last)) = (
        placed.iter().map(|p| p.0).min(),
        placed.iter().map(|p| p.0).max(),
    ) else {
        return Err(Error::Input("no event falls inside the grid".into()));
    };
    let (nj, nk) = grid.shape();
    let ni = usize::try_from(last - first + 1).expect("ordered bins");
    let mut values = vec![0.0; ni * nj * nk];
    for (bin, (j, k), count) in placed {
        let i = (bin - first) as usize;
        values[i + ni * (j + nj * k)] += count;
        stats.accepted += 1;
    }
    stats.first_bin = first;
    Ok((DenseTensor::new([ni, nj, nk], values)?, stats))
}

fn column(headers: &csv::StringRecord, names: &[&str]) -> Option<usize> {
    headers
        .iter()
        .position(|h| names.iter().any(|n| h.trim().eq_ignore_ascii_case(n)))
}

/// Reads `timestamp, lat, lon[, count]` rows (header required, any column
/// order) and parses each into an event. Unparseable rows are counted and
/// skipped.
pub fn read_events(path: impl AsRef<Path>) -> Result<(Vec<EventRecord>, usize)> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let ts = column(&headers, &["timestamp", "time", "datetime", "pickup_datetime"]);
    let lat = column(&headers, &["lat", "latitude", "pickup_latitude"]);
    let lon = column(&headers, &["lon", "lng", "longitude", "pickup_longitude"]);
    let count = column(&headers, &["count", "weight"]);
    let (Some(ts), Some(lat), Some(lon)) = (ts, lat, lon) else {
        return Err(Error::Input(format!(
            "CSV header needs timestamp, lat and lon columns, found {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    };
    let mut events = Vec::new();
    let mut bad = 0;
    for rec in reader.records() {
        let Ok(rec) = rec else {
            bad += 1;
            continue;
        };
        let num = |c: usize| rec.get(c).and_then(|v| v.trim().parse::<f64>().ok()).filter(|v| v.is_finite());
        let weight = match count {
            Some(c) => num(c),
            None => Some(1.0),
        };
        match (rec.get(ts).and_then(parse_timestamp), num(lat), num(lon), weight) {
            (Some(timestamp), Some(lat), Some(lon), Some(count)) => {
                events.push(EventRecord { timestamp, lat, lon, count })
            }
            _ => bad += 1,
        }
    }
    if bad > 0 {
        warn!("skipped {bad} unparseable rows");
    }
    if events.is_empty() {
        return Err(Error::Input("no parseable event rows".into()));
    }
    Ok((events, bad))
}

pub fn ingest_csv(
    path: impl AsRef<Path>,
    grid: &GridSpec,
    bin_seconds: i64,
) -> Result<(DenseTensor, IngestStats)> {
    let (events, bad) = read_events(path)?;
    let (t, mut stats) = rasterize(&events, grid, bin_seconds)?;
    stats.unparseable = bad;
    stats.rows += bad;
    Ok((t, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_grid() -> GridSpec {
        GridSpec::new((0.0, 0.3), (10.0, 10.2), 0.1, AxisOrder::LatLon).unwrap()
    }

    fn event(timestamp: i64, lat: f64, lon: f64) -> EventRecord {
        EventRecord { timestamp, lat, lon, count: 1.0 }
    }

    #[test]
    fn nyc_grid_shape() {
        let g = GridSpec::nyc();
        assert_eq!((g.lat_cells(), g.lon_cells()), (200, 120));
        assert_eq!(g.shape(), (120, 200));
        assert_eq!(g.locate(40.66, -74.03), Some((0, 0)));
        assert_eq!(g.locate(40.8599, -73.9101), Some((119, 199)));
        assert_eq!(g.locate(40.86, -74.0), None);
    }

    #[test]
    fn counts_events_per_cell_and_bin() {
        let events = vec![event(5, 0.05, 10.05), event(7, 0.05, 10.05), event(9, 0.06, 10.01)];
        let (t, stats) = rasterize(&events, &small_grid(), 10).unwrap();
        assert_eq!(t.dims(), [1, 3, 2]);
        assert_eq!(t.get(0, 0, 0), 3.0);
        assert_eq!(stats.accepted, 3);
    }

    #[test]
    fn edges_are_half_open() {
        let g = small_grid();
        // 0.1 and 0.2 are interior edges; decimal error would put them low
        assert_eq!(g.locate(0.1, 10.0), Some((1, 0)));
        assert_eq!(g.locate(0.2, 10.1), Some((2, 1)));
        assert_eq!(g.locate(0.0999999, 10.0), Some((0, 0)));
        assert_eq!(g.locate(0.3, 10.0), None);
        assert_eq!(g.locate(0.0, 10.2), None);
        assert_eq!(g.locate(-0.0001, 10.0), None);
        let (t, stats) = rasterize(&[event(0, 0.1, 10.0), event(86_400, 0.05, 10.0)], &g, 86_400).unwrap();
        assert_eq!(t.dims()[0], 2);
        assert_eq!(t.get(0, 1, 0), 1.0);
        assert_eq!(t.get(1, 0, 0), 1.0);
        assert_eq!(stats.first_bin, 0);
    }

    #[test]
    fn outside_events_are_counted_and_empty_input_fails() {
        let events = vec![event(0, 5.0, 10.0), event(0, 0.1, 10.1)];
        let (_, stats) = rasterize(&events, &small_grid(), 60).unwrap();
        assert_eq!((stats.accepted, stats.outside_grid), (1, 1));
        assert!(rasterize(&events[..1], &small_grid(), 60).is_err());
    }

    #[test]
    fn bin_widths_and_timestamps() {
        assert_eq!(parse_bin_width("1d").unwrap(), 86_400);
        assert_eq!(parse_bin_width("6h").unwrap(), 21_600);
        assert_eq!(parse_bin_width("15m").unwrap(), 900);
        assert_eq!(parse_bin_width("45").unwrap(), 45);
        assert!(parse_bin_width("0d").is_err());
        assert!(parse_bin_width("3y").is_err());
        assert_eq!(parse_timestamp("86400"), Some(86_400));
        assert_eq!(parse_timestamp("1970-01-02"), Some(86_400));
        assert_eq!(parse_timestamp("1970-01-02 00:01:00"), Some(86_460));
        assert_eq!(parse_timestamp("1970-01-02T01:00:00+01:00"), Some(86_400));
        assert_eq!(parse_timestamp("yesterday"), None);
    }

    #[test]
    fn csv_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trips.csv");
        std::fs::write(
            &path,
            "Latitude,Longitude,timestamp,count\n\
             0.05,10.05,2020-01-01 10:00:00,2\n\
             0.15,10.15,2020-01-01T23:59:59,1\n\
             0.15,10.15,2020-01-03 00:00:00,1\n\
             bad,10.1,2020-01-01,1\n\
             0.9,10.1,2020-01-01,1\n",
        )
        .unwrap();
        let (t, stats) = ingest_csv(&path, &small_grid(), 86_400).unwrap();
        assert_eq!(t.dims(), [3, 3, 2]);
        assert_eq!(t.get(0, 0, 0), 2.0);
        assert_eq!(t.get(0, 1, 1), 1.0);
        assert_eq!(t.get(2, 1, 1), 1.0);
        assert_eq!(stats.unparseable, 1);
        assert_eq!(stats.outside_grid, 1);
        assert_eq!(stats.rows, 5);

        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(matches!(ingest_csv(&path, &small_grid(), 60), Err(Error::Input(_))));
        std::fs::write(&path, "time,lat,lon\nx,y,z\n").unwrap();
        assert!(matches!(ingest_csv(&path, &small_grid(), 60), Err(Error::Input(_))));
    }

    proptest! {
        #[test]
        fn counts_are_conserved(
            pts in proptest::collection::vec((0i64..100_000, -0.1f64..0.4, 9.9f64..10.3, 1u32..4), 1..200),
        ) {
            let events: Vec<_> = pts
                .iter()
                .map(|&(t, lat, lon, c)| EventRecord { timestamp: t, lat, lon, count: c as f64 })
                .collect();
            let g = small_grid();
            let inside: f64 = events.iter().filter(|e| g.locate(e.lat, e.lon).is_some()).map(|e| e.count).sum();
            match rasterize(&events, &g, 3600) {
                Ok((t, stats)) => {
                    prop_assert_eq!(t.values().iter().sum::<f64>(), inside);
                    prop_assert_eq!(stats.accepted + stats.outside_grid, events.len());
                }
                Err(_) => prop_assert_eq!(inside, 0.0),
            }
        }
    }
}
