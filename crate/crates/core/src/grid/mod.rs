//! From raw trip records and points of interest to model-ready tensors.

mod container;
mod factors;
mod raster;
mod samples;

use chrono::{DateTime, Datelike, Duration, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use container::{
    demand_from_bytes, demand_to_bytes, factors_from_bytes, factors_to_bytes, read_demand, read_factors,
    write_demand, write_factors, CONTAINER_VERSION,
};
pub use factors::{
    encode_external_factors, read_pois, EncodeReport, FactorSchedule, FactorSeries, PoiRecord,
};
pub use raster::{rasterize_trips, read_trips_csv, DemandSeries, RasterReport, TripRecord};
pub use samples::{build_samples, split_dataset, DatasetSplit, SampleSet, ROLLING_WINDOW};

fn default_resolution() -> u32 {
    60
}

/// Bounding box and partitioning of the study area.
///
/// Cells are indexed `(w, h)` with `w` running west to east over longitude
/// and `h` running south to north over latitude.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub min_lat: f64,
    pub max_lat: f64,
    pub min_lon: f64,
    pub max_lon: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_resolution")]
    pub resolution_minutes: u32,
}

impl GridSpec {
    pub fn new(min_lat: f64, max_lat: f64, min_lon: f64, max_lon: f64, width: usize, height: usize) -> Result<Self> {
        let spec = GridSpec {
            min_lat,
            max_lat,
            min_lon,
            max_lon,
            width,
            height,
            resolution_minutes: default_resolution(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.min_lat, self.max_lat, self.min_lon, self.max_lon].iter().all(|v| v.is_finite());
        if !finite || self.max_lat <= self.min_lat || self.max_lon <= self.min_lon {
            return Err(Error::invalid(format!(
                "grid bounds must be finite with max > min (lat {}..{}, lon {}..{})",
                self.min_lat, self.max_lat, self.min_lon, self.max_lon
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("grid width and height must be at least 1"));
        }
        if self.resolution_minutes == 0 {
            return Err(Error::invalid("resolution_minutes must be positive"));
        }
        Ok(())
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: GridSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Region count `N = W * H`.
    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn step(&self) -> Duration {
        Duration::minutes(self.resolution_minutes as i64)
    }

    /// Cell containing a coordinate. Lower edges are inclusive and upper
    /// edges exclusive, except the global maxima which belong to the last
    /// row/column. `None` outside the bounding box.
    pub fn cell_of(&self, lat: f64, lon: f64) -> Option<(usize, usize)> {
        let w = bin(lon, self.min_lon, self.max_lon, self.width)?;
        let h = bin(lat, self.min_lat, self.max_lat, self.height)?;
        Some((w, h))
    }

    /// Center coordinate `(lat, lon)` of a cell.
    pub fn cell_center(&self, w: usize, h: usize) -> (f64, f64) {
        let dlon = (self.max_lon - self.min_lon) / self.width as f64;
        let dlat = (self.max_lat - self.min_lat) / self.height as f64;
        (self.min_lat + (h as f64 + 0.5) * dlat, self.min_lon + (w as f64 + 0.5) * dlon)
    }

    /// Latest resolution boundary at or before `t`.
    pub fn floor_time(&self, t: DateTime<Utc>) -> DateTime<Utc> {
        let period = self.resolution_minutes as i64 * 60;
        let excess = t.timestamp().rem_euclid(period);
        t - Duration::seconds(excess) - Duration::nanoseconds(t.timestamp_subsec_nanos() as i64)
    }

    /// Rejects start times that are not on a resolution boundary.
    pub fn check_aligned(&self, start: DateTime<Utc>) -> Result<()> {
        let period = self.resolution_minutes as i64 * 60;
        if start.timestamp().rem_euclid(period) != 0 || start.timestamp_subsec_nanos() != 0 {
            return Err(Error::invalid(format!(
                "start time {start} is not aligned to the {}-minute resolution",
                self.resolution_minutes
            )));
        }
        Ok(())
    }
}

fn bin(v: f64, lo: f64, hi: f64, n: usize) -> Option<usize> {
    if !v.is_finite() || v < lo || v > hi {
        return None;
    }
    let idx = ((v - lo) / (hi - lo) * n as f64).floor() as usize;
    Some(idx.min(n - 1))
}

/// Hour-of-week in `[0, 168)`, Monday 00:00 UTC = 0.
pub fn hour_of_week(t: DateTime<Utc>) -> usize {
    t.weekday().num_days_from_monday() as usize * 24 + t.hour() as usize
}

/// Parses the accepted ISO-8601 variants: RFC 3339 with offset, or a naive
/// `YYYY-MM-DD[T ]HH:MM:SS` taken as UTC.
pub fn parse_timestamp(s: &str) -> Result<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(t) = chrono::NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t.and_utc());
        }
    }
    Err(Error::invalid(format!("malformed timestamp {s:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GridSpec {
        GridSpec::new(40.0, 41.0, -74.0, -73.0, 4, 2).unwrap()
    }

    #[test]
    fn cell_edges() {
        let g = spec();
        assert_eq!(g.cell_of(40.0, -74.0), Some((0, 0)));
        assert_eq!(g.cell_of(41.0, -73.0), Some((3, 1)));
        // interior edge belongs to the upper cell
        assert_eq!(g.cell_of(40.5, -73.75), Some((1, 1)));
        assert_eq!(g.cell_of(41.0001, -73.5), None);
        assert_eq!(g.cell_of(40.5, -74.01), None);
        assert_eq!(g.cell_of(f64::NAN, -73.5), None);
    }

    #[test]
    fn invalid_specs() {
        assert!(GridSpec::new(41.0, 40.0, -74.0, -73.0, 2, 2).is_err());
        assert!(GridSpec::new(40.0, 41.0, -74.0, -73.0, 0, 2).is_err());
        let json = r#"{"min_lat":0,"max_lat":1,"min_lon":0,"max_lon":1,"width":3,"height":2}"#;
        let g: GridSpec = serde_json::from_str(json).unwrap();
        assert_eq!(g.resolution_minutes, 60);
        assert_eq!(g.cells(), 6);
    }

    #[test]
    fn centers_map_back_to_their_cell() {
        let g = spec();
        for w in 0..g.width {
            for h in 0..g.height {
                let (lat, lon) = g.cell_center(w, h);
                assert_eq!(g.cell_of(lat, lon), Some((w, h)));
            }
        }
    }

    #[test]
    fn timestamps_and_alignment() {
        let t = parse_timestamp("2024-01-01 08:30:00").unwrap();
        assert_eq!(t, parse_timestamp("2024-01-01T08:30:00Z").unwrap());
        assert_eq!(t, parse_timestamp("2024-01-01T10:30:00+02:00").unwrap());
        assert!(parse_timestamp("01/01/2024 08:30").is_err());
        let g = spec();
        assert!(g.check_aligned(t).is_err());
        assert!(g.check_aligned(parse_timestamp("2024-01-01T08:00:00Z").unwrap()).is_ok());
        assert_eq!(g.floor_time(t), parse_timestamp("2024-01-01T08:00:00Z").unwrap());
        // 2024-01-01 is a Monday
        assert_eq!(hour_of_week(t), 8);
        assert_eq!(hour_of_week(parse_timestamp("2024-01-07T23:00:00Z").unwrap()), 167);
    }
}
