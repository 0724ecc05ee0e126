//! Deterministic synthetic city: seasonal Poisson demand plus additive boosts
//! from scheduled points of interest.

use std::f64::consts::PI;

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    encode_external_factors, hour_of_week, parse_timestamp, DemandSeries, FactorSchedule, FactorSeries, GridSpec,
    PoiRecord,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Noise {
    Poisson,
    None,
}

fn default_start() -> String {
    "2024-01-01T00:00:00Z".into()
}
fn default_pois() -> usize {
    2
}
fn default_bounds() -> [f64; 4] {
    [40.70, 40.80, -74.02, -73.92]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub steps: usize,
    pub factors: usize,
    pub base_rate: f64,
    /// Additive rate per active factor, one entry per factor.
    pub factor_boost: Vec<f64>,
    #[serde(default)]
    pub daily_amplitude: f64,
    #[serde(default)]
    pub weekly_amplitude: f64,
    pub noise: Noise,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_pois")]
    pub pois_per_factor: usize,
    #[serde(default = "default_start")]
    pub start_time: String,
    /// `[min_lat, max_lat, min_lon, max_lon]`
    #[serde(default = "default_bounds")]
    pub bounds: [f64; 4],
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.steps == 0 {
            return Err(Error::invalid("synth: width, height and steps must be positive"));
        }
        if !(self.base_rate.is_finite() && self.base_rate >= 0.0) {
            return Err(Error::invalid("synth: base_rate must be non-negative"));
        }
        if self.factor_boost.len() != self.factors {
            return Err(Error::invalid(format!(
                "synth: {} factor boosts for {} factors",
                self.factor_boost.len(),
                self.factors
            )));
        }
        if self.factor_boost.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::invalid("synth: factor boosts must be non-negative"));
        }
        for (name, a) in [("daily_amplitude", self.daily_amplitude), ("weekly_amplitude", self.weekly_amplitude)] {
            if !(0.0..1.0).contains(&a) {
                return Err(Error::invalid(format!("synth: {name} must lie in [0, 1), got {a}")));
            }
        }
        self.grid()?;
        parse_timestamp(&self.start_time)?;
        Ok(())
    }

    pub fn grid(&self) -> Result<GridSpec> {
        let [a, b, c, d] = self.bounds;
        GridSpec::new(a, b, c, d, self.width, self.height)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub grid: GridSpec,
    pub demand: DemandSeries,
    pub factors: FactorSeries,
    pub pois: Vec<PoiRecord>,
}

/// Seasonal part of the rate at a time.
pub fn seasonal_rate(config: &SynthConfig, t: DateTime<Utc>) -> f64 {
    let how = hour_of_week(t) as f64;
    let hour = how % 24.0;
    config.base_rate
        * (1.0 + config.daily_amplitude * (2.0 * PI * hour / 24.0).sin())
        * (1.0 + config.weekly_amplitude * (2.0 * PI * how / 168.0).sin())
}

fn random_pois(config: &SynthConfig, grid: &GridSpec, rng: &mut ChaCha8Rng) -> Result<Vec<PoiRecord>> {
    let mut pois = Vec::with_capacity(config.factors * config.pois_per_factor);
    for m in 0..config.factors {
        for i in 0..config.pois_per_factor {
            let w = rng.random_range(0..grid.width);
            let h = rng.random_range(0..grid.height);
            let (lat, lon) = grid.cell_center(w, h);
            let first = rng.random_range(0..24u8);
            let len = rng.random_range(2..=5u8);
            let hours = (0..len).map(|k| (first + k) % 24);
            pois.push(PoiRecord {
                name: format!("factor{m}_poi{i}"),
                lat,
                lon,
                factor_index: m,
                schedule: FactorSchedule::new(hours)?,
            });
        }
    }
    Ok(pois)
}

/// Builds a dataset with randomly placed, randomly scheduled POIs.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let grid = config.grid()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pois = random_pois(config, &grid, &mut rng)?;
    generate_with_pois(config, pois)
}

/// Builds a dataset from explicit POIs. Noise draws use their own stream of
/// the seeded generator, so they do not depend on how POIs were chosen.
pub fn generate_with_pois(config: &SynthConfig, pois: Vec<PoiRecord>) -> Result<SynthDataset> {
    config.validate()?;
    if !config.steps.is_multiple_of(24) {
        log::warn!("synth: {} steps is not a whole number of days", config.steps);
    }
    let grid = config.grid()?;
    let start = parse_timestamp(&config.start_time)?;
    grid.check_aligned(start)?;
    let (factors, _) = encode_external_factors(&pois, &grid, start, config.steps, config.factors)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let (n, m) = (grid.cells(), config.factors);
    let mut counts = Vec::with_capacity(config.steps * n);
    for t in 0..config.steps {
        let base = seasonal_rate(config, start + grid.step() * t as i32);
        let frame = factors.frame(t);
        for cell in 0..n {
            let boost: f64 =
                (0..m).map(|k| config.factor_boost[k] * frame[cell * m + k] as f64).sum();
            let rate = base + boost;
            let count = match config.noise {
                Noise::None => rate.round(),
                Noise::Poisson if rate > 0.0 => Poisson::new(rate)
                    .map_err(|e| Error::invalid(format!("poisson rate {rate}: {e}")))?
                    .sample(&mut rng),
                Noise::Poisson => 0.0,
            };
            counts.push(count as u32);
        }
    }
    let demand = DemandSeries::new(grid.clone(), start, config.steps, counts)?;
    Ok(SynthDataset { grid, demand, factors, pois })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> SynthConfig {
        SynthConfig {
            width: 3,
            height: 2,
            steps: 48,
            factors: 0,
            base_rate: 5.0,
            factor_boost: vec![],
            daily_amplitude: 0.0,
            weekly_amplitude: 0.0,
            noise: Noise::None,
            seed: 9,
            pois_per_factor: 2,
            start_time: default_start(),
            bounds: default_bounds(),
        }
    }

    #[test]
    fn constant_field() {
        let d = generate(&config()).unwrap();
        assert!(d.demand.counts().iter().all(|&c| c == 5));
        assert!(d.pois.is_empty());
    }

    #[test]
    fn single_factor_boost_is_exact() {
        let cfg = SynthConfig { factors: 1, factor_boost: vec![10.0], ..config() };
        let grid = cfg.grid().unwrap();
        let (lat, lon) = grid.cell_center(2, 1);
        let poi = PoiRecord {
            name: "hub".into(),
            lat,
            lon,
            factor_index: 0,
            schedule: FactorSchedule::new([8]).unwrap(),
        };
        let d = generate_with_pois(&cfg, vec![poi]).unwrap();
        for day in 0..2 {
            assert_eq!(d.demand.get(day * 24 + 8, 2, 1), d.demand.get(day * 24 + 9, 2, 1) + 10);
            assert_eq!(d.demand.get(day * 24 + 8, 0, 0), 5);
        }
    }

    #[test]
    fn deterministic_and_consistent_with_encoder() {
        let cfg = SynthConfig {
            factors: 2,
            factor_boost: vec![8.0, 12.0],
            daily_amplitude: 0.5,
            noise: Noise::Poisson,
            ..config()
        };
        let a = generate(&cfg).unwrap();
        assert_eq!(a, generate(&cfg).unwrap());
        let other = generate(&SynthConfig { seed: 10, ..cfg.clone() }).unwrap();
        assert_ne!(a.demand, other.demand);
        let (encoded, _) =
            encode_external_factors(&a.pois, &a.grid, a.demand.start_time(), cfg.steps, cfg.factors).unwrap();
        assert_eq!(encoded, a.factors);
        assert_eq!(a.pois.len(), 4);
    }

    #[test]
    fn poisson_mean_matches_rate() {
        let cfg = SynthConfig { width: 10, height: 10, steps: 120, base_rate: 3.0, noise: Noise::Poisson, ..config() };
        let d = generate(&cfg).unwrap();
        let mean = d.demand.total() as f64 / d.demand.counts().len() as f64;
        assert!((mean - 3.0).abs() < 0.05 * 3.0, "{mean}");
    }

    #[test]
    fn zero_rate_yields_zero() {
        let cfg = SynthConfig { base_rate: 0.0, noise: Noise::Poisson, ..config() };
        assert!(generate(&cfg).unwrap().demand.counts().iter().all(|&c| c == 0));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate(&SynthConfig { daily_amplitude: 1.0, ..config() }).is_err());
        assert!(generate(&SynthConfig { factors: 2, factor_boost: vec![1.0], ..config() }).is_err());
        assert!(generate(&SynthConfig { base_rate: -1.0, ..config() }).is_err());
        assert!(generate(&SynthConfig { start_time: "2024-01-01T00:30:00Z".into(), ..config() }).is_err());
    }
}
