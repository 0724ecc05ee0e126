use std::collections::BTreeSet;

use chrono::{DateTime, Datelike, Timelike, Utc};
use serde::{Deserialize, Serialize};

use super::GridSpec;
use crate::error::{Error, Result};

fn all_days() -> BTreeSet<u8> {
    (0..7).collect()
}

/// When a point of interest influences demand. Days count from Monday = 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorSchedule {
    pub active_hours: BTreeSet<u8>,
    #[serde(default = "all_days")]
    pub active_days: BTreeSet<u8>,
}

impl FactorSchedule {
    pub fn new(active_hours: impl IntoIterator<Item = u8>) -> Result<Self> {
        let schedule = FactorSchedule { active_hours: active_hours.into_iter().collect(), active_days: all_days() };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn on_days(mut self, days: impl IntoIterator<Item = u8>) -> Result<Self> {
        self.active_days = days.into_iter().collect();
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.active_hours.is_empty() {
            return Err(Error::invalid("schedule needs at least one active hour"));
        }
        if let Some(h) = self.active_hours.iter().find(|&&h| h >= 24) {
            return Err(Error::invalid(format!("active hour {h} outside 0..24")));
        }
        if let Some(d) = self.active_days.iter().find(|&&d| d >= 7) {
            return Err(Error::invalid(format!("active day {d} outside 0..7")));
        }
        Ok(())
    }

    pub fn is_active(&self, t: DateTime<Utc>) -> bool {
        self.active_hours.contains(&(t.hour() as u8))
            && self.active_days.contains(&(t.weekday().num_days_from_monday() as u8))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoiRecord {
    pub name: String,
    pub lat: f64,
    pub lon: f64,
    pub factor_index: usize,
    #[serde(flatten)]
    pub schedule: FactorSchedule,
}

/// Reads the POI JSON array format.
pub fn read_pois(text: &str) -> Result<Vec<PoiRecord>> {
    let pois: Vec<PoiRecord> = serde_json::from_str(text)?;
    for p in &pois {
        p.schedule.validate().map_err(|e| Error::invalid(format!("poi {:?}: {e}", p.name)))?;
        if !p.lat.is_finite() || !p.lon.is_finite() {
            return Err(Error::invalid(format!("poi {:?}: non-finite coordinates", p.name)));
        }
    }
    Ok(pois)
}

/// Binary activation tensor `T x W x H x M`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorSeries {
    grid: GridSpec,
    start_time: DateTime<Utc>,
    steps: usize,
    num_factors: usize,
    values: Vec<u8>,
}

impl FactorSeries {
    pub fn new(
        grid: GridSpec,
        start_time: DateTime<Utc>,
        steps: usize,
        num_factors: usize,
        values: Vec<u8>,
    ) -> Result<Self> {
        grid.validate()?;
        grid.check_aligned(start_time)?;
        if values.len() != steps * grid.cells() * num_factors {
            return Err(Error::shape(
                "factor_series",
                format!("{} values for {steps} steps x {} cells x {num_factors} factors", values.len(), grid.cells()),
            ));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::invalid("factor values must be 0 or 1"));
        }
        Ok(FactorSeries { grid, start_time, steps, num_factors, values })
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

    pub fn num_factors(&self) -> usize {
        self.num_factors
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    /// `W x H x M` activations at one step.
    pub fn frame(&self, step: usize) -> &[u8] {
        let n = self.grid.cells() * self.num_factors;
        &self.values[step * n..(step + 1) * n]
    }

    pub fn get(&self, step: usize, w: usize, h: usize, m: usize) -> u8 {
        self.values[((step * self.grid.width + w) * self.grid.height + h) * self.num_factors + m]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EncodeReport {
    /// Names of POIs outside the grid bounding box (ignored).
    pub out_of_bounds: Vec<String>,
}

/// Builds the binary factor tensor: `factors[t][w][h][m] = 1` iff some POI of
/// factor `m` lies in cell `(w, h)` and its schedule is active at step `t`.
pub fn encode_external_factors(
    pois: &[PoiRecord],
    grid: &GridSpec,
    start: DateTime<Utc>,
    steps: usize,
    num_factors: usize,
) -> Result<(FactorSeries, EncodeReport)> {
    if steps == 0 {
        return Err(Error::invalid("factor series needs at least one time step"));
    }
    if let Some(p) = pois.iter().find(|p| p.factor_index >= num_factors) {
        return Err(Error::invalid(format!(
            "poi {:?} has factor_index {} but only {num_factors} factors are configured",
            p.name, p.factor_index
        )));
    }
    let mut report = EncodeReport::default();
    let mut located = Vec::with_capacity(pois.len());
    for p in pois {
        match grid.cell_of(p.lat, p.lon) {
            Some(cell) => located.push((p, cell)),
            None => {
                log::warn!("poi {:?} at ({}, {}) is outside the grid and was ignored", p.name, p.lat, p.lon);
                report.out_of_bounds.push(p.name.clone());
            }
        }
    }
    let (wd, ht, m) = (grid.width, grid.height, num_factors);
    let mut values = vec![0u8; steps * wd * ht * m];
    for t in 0..steps {
        let at = start + grid.step() * t as i32;
        for (p, (w, h)) in &located {
            if p.schedule.is_active(at) {
                values[((t * wd + w) * ht + h) * m + p.factor_index] = 1;
            }
        }
    }
    Ok((FactorSeries::new(grid.clone(), start, steps, num_factors, values)?, report))
}
