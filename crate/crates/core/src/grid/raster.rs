use std::io::Read;

use chrono::{DateTime, Utc};
use serde::Serialize;

use super::{parse_timestamp, GridSpec};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TripRecord {
    pub pickup_time: DateTime<Utc>,
    pub pickup_lat: f64,
    pub pickup_lon: f64,
}

/// Hourly (per resolution step) ride counts, `T x W x H`.
#[derive(Clone, Debug, PartialEq)]
pub struct DemandSeries {
    grid: GridSpec,
    start_time: DateTime<Utc>,
    steps: usize,
    counts: Vec<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RasterReport {
    pub total: usize,
    pub outside_bounds: usize,
    pub outside_time_range: usize,
}

impl RasterReport {
    pub fn dropped(&self) -> usize {
        self.outside_bounds + self.outside_time_range
    }
}

impl DemandSeries {
    pub fn new(grid: GridSpec, start_time: DateTime<Utc>, steps: usize, counts: Vec<u32>) -> Result<Self> {
        grid.validate()?;
        grid.check_aligned(start_time)?;
        if steps == 0 {
            return Err(Error::invalid("demand series needs at least one time step"));
        }
        if counts.len() != steps * grid.cells() {
            return Err(Error::shape(
                "demand_series",
                format!("{} counts for {} steps x {} cells", counts.len(), steps, grid.cells()),
            ));
        }
        Ok(DemandSeries { grid, start_time, steps, counts })
    }

    pub fn zeros(grid: GridSpec, start_time: DateTime<Utc>, steps: usize) -> Result<Self> {
        let n = steps * grid.cells();
        Self::new(grid, start_time, steps, vec![0; n])
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn start_time(&self) -> DateTime<Utc> {
        self.start_time
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn counts_mut(&mut self) -> &mut [u32] {
        &mut self.counts
    }

    pub fn time_at(&self, step: usize) -> DateTime<Utc> {
        self.start_time + self.grid.step() * step as i32
    }

    /// `W x H` grid at one time step, row-major over `(w, h)`.
    pub fn frame(&self, step: usize) -> &[u32] {
        let n = self.grid.cells();
        &self.counts[step * n..(step + 1) * n]
    }

    pub fn get(&self, step: usize, w: usize, h: usize) -> u32 {
        self.counts[(step * self.grid.width + w) * self.grid.height + h]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn max_count(&self) -> u32 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    /// Sub-series covering `steps` (indices into this series).
    pub fn slice(&self, steps: std::ops::Range<usize>) -> Result<Self> {
        if steps.start >= steps.end || steps.end > self.steps {
            return Err(Error::invalid(format!("step range {steps:?} outside 0..{}", self.steps)));
        }
        let n = self.grid.cells();
        DemandSeries::new(
            self.grid.clone(),
            self.time_at(steps.start),
            steps.len(),
            self.counts[steps.start * n..steps.end * n].to_vec(),
        )
    }
}

/// Bins trip pickups into a `T x W x H` count grid starting at `start`.
/// Trips outside the bounding box or the time range are reported, not errors.
pub fn rasterize_trips(
    trips: &[TripRecord],
    grid: &GridSpec,
    start: DateTime<Utc>,
    steps: usize,
) -> Result<(DemandSeries, RasterReport)> {
    let mut series = DemandSeries::zeros(grid.clone(), start, steps)?;
    let step_secs = grid.resolution_minutes as i64 * 60;
    let mut report = RasterReport { total: trips.len(), ..Default::default() };
    for trip in trips {
        let Some((w, h)) = grid.cell_of(trip.pickup_lat, trip.pickup_lon) else {
            report.outside_bounds += 1;
            continue;
        };
        let secs = (trip.pickup_time - start).num_seconds();
        let slot = secs.div_euclid(step_secs);
        if secs < 0 || slot as usize >= steps {
            report.outside_time_range += 1;
            continue;
        }
        let idx = (slot as usize * grid.width + w) * grid.height + h;
        series.counts[idx] += 1;
    }
    Ok((series, report))
}

/// Reads a trips CSV with header `pickup_datetime,pickup_latitude,pickup_longitude`
/// (extra columns allowed, any order).
pub fn read_trips_csv<R: Read>(reader: R) -> Result<Vec<TripRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::invalid(format!("trips CSV is missing required column `{name}`")))
    };
    let (ti, lai, loi) = (column("pickup_datetime")?, column("pickup_latitude")?, column("pickup_longitude")?);
    let mut trips = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let pickup_time = parse_timestamp(field(ti))
            .map_err(|e| Error::invalid(format!("line {line}: {e}")))?;
        let coord = |i: usize, name: &str| -> Result<f64> {
            let v: f64 = field(i)
                .parse()
                .map_err(|_| Error::invalid(format!("line {line}: bad {name} {:?}", field(i))))?;
            if !v.is_finite() {
                return Err(Error::invalid(format!("line {line}: non-finite {name}")));
            }
            Ok(v)
        };
        trips.push(TripRecord {
            pickup_time,
            pickup_lat: coord(lai, "pickup_latitude")?,
            pickup_lon: coord(loi, "pickup_longitude")?,
        });
    }
    Ok(trips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::parse_timestamp;
    use proptest::prelude::*;

    fn grid() -> GridSpec {
        GridSpec::new(0.0, 2.0, 0.0, 3.0, 3, 2).unwrap()
    }

    fn t0() -> DateTime<Utc> {
        parse_timestamp("2024-03-04T00:00:00Z").unwrap()
    }

    fn trip(mins: i64, lat: f64, lon: f64) -> TripRecord {
        TripRecord { pickup_time: t0() + chrono::Duration::minutes(mins), pickup_lat: lat, pickup_lon: lon }
    }

    #[test]
    fn empty_input_gives_zero_series() {
        let (s, r) = rasterize_trips(&[], &grid(), t0(), 5).unwrap();
        assert_eq!(s.total(), 0);
        assert_eq!(s.counts().len(), 5 * 6);
        assert_eq!(r.dropped(), 0);
    }

    #[test]
    fn counts_by_hour_and_cell() {
        let trips = [trip(5, 0.5, 1.5), trip(59, 0.6, 1.2), trip(61, 0.5, 1.5)];
        let (s, r) = rasterize_trips(&trips, &grid(), t0(), 3).unwrap();
        assert_eq!(s.get(0, 1, 0), 2);
        assert_eq!(s.get(1, 1, 0), 1);
        assert_eq!(s.total(), 3);
        assert_eq!(r.dropped(), 0);
    }

    #[test]
    fn max_corner_is_kept() {
        let (s, r) = rasterize_trips(&[trip(0, 2.0, 3.0)], &grid(), t0(), 1).unwrap();
        assert_eq!(s.get(0, 2, 1), 1);
        assert_eq!(r.dropped(), 0);
    }

    #[test]
    fn out_of_range_trips_are_reported() {
        let trips = [trip(-1, 1.0, 1.0), trip(120, 1.0, 1.0), trip(10, 5.0, 1.0), trip(10, 1.0, 1.0)];
        let (s, r) = rasterize_trips(&trips, &grid(), t0(), 2).unwrap();
        assert_eq!(r, RasterReport { total: 4, outside_bounds: 1, outside_time_range: 2 });
        assert_eq!(s.total(), 1);
    }

    #[test]
    fn bad_arguments() {
        assert!(rasterize_trips(&[], &grid(), t0(), 0).is_err());
        let unaligned = t0() + chrono::Duration::minutes(30);
        assert!(rasterize_trips(&[], &grid(), unaligned, 2).is_err());
    }

    #[test]
    fn csv_parsing() {
        let text = "vendor,pickup_longitude,pickup_datetime,pickup_latitude\n\
                    1,1.5,2024-03-04 00:10:00,0.5\n\
                    2,2.5,2024-03-04T01:10:00Z,1.5\n";
        let trips = read_trips_csv(text.as_bytes()).unwrap();
        assert_eq!(trips.len(), 2);
        assert_eq!(trips[1].pickup_lon, 2.5);
        assert_eq!(trips[1].pickup_lat, 1.5);

        let err = read_trips_csv("pickup_latitude,pickup_longitude\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("pickup_datetime"));
        let err = read_trips_csv("pickup_datetime,pickup_latitude,pickup_longitude\nnope,1,1\n".as_bytes())
            .unwrap_err();
        assert!(err.to_string().contains("line 2"));
        assert!(read_trips_csv("pickup_datetime,pickup_latitude,pickup_longitude\n".as_bytes())
            .unwrap()
            .is_empty());
    }

    fn arb_trip() -> impl Strategy<Value = TripRecord> {
        (-30i64..400, -0.5f64..2.5, -0.5f64..3.5).prop_map(|(m, lat, lon)| trip(m, lat, lon))
    }

    proptest! {
        #[test]
        fn conservation_and_permutation_invariance(mut trips in prop::collection::vec(arb_trip(), 0..60)) {
            let (a, ra) = rasterize_trips(&trips, &grid(), t0(), 6).unwrap();
            prop_assert_eq!(a.total() as usize, trips.len() - ra.dropped());
            trips.reverse();
            let (b, rb) = rasterize_trips(&trips, &grid(), t0(), 6).unwrap();
            prop_assert_eq!(a, b);
            prop_assert_eq!(ra, rb);
        }
    }
}
