use std::ops::Range;

use chrono::{DateTime, Utc};

use super::{DemandSeries, FactorSeries, GridSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Length of the rolling evaluation window: the last week of hourly data.
pub const ROLLING_WINDOW: usize = 168;

/// Aligned lag stacks and targets.
///
/// For sample `b` with target step `t`, lag slot `l` holds step `t - 1 - l`
/// (most recent first). Layouts: demand lags `B x L x W x H`, factor lags
/// `B x L x W x H x M`, targets `B x W x H`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    grid: GridSpec,
    lags: usize,
    num_factors: usize,
    demand_lags: Vec<f64>,
    factor_lags: Vec<f64>,
    targets: Vec<f64>,
    target_steps: Vec<usize>,
    timestamps: Vec<DateTime<Utc>>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.target_steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_steps.is_empty()
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn lags(&self) -> usize {
        self.lags
    }

    pub fn num_factors(&self) -> usize {
        self.num_factors
    }

    /// Index of each target in the source series.
    pub fn target_steps(&self) -> &[usize] {
        &self.target_steps
    }

    pub fn timestamps(&self) -> &[DateTime<Utc>] {
        &self.timestamps
    }

    fn demand_stride(&self) -> usize {
        self.lags * self.grid.cells()
    }

    fn factor_stride(&self) -> usize {
        self.lags * self.grid.cells() * self.num_factors
    }

    pub fn demand_lags(&self, b: usize) -> &[f64] {
        let s = self.demand_stride();
        &self.demand_lags[b * s..(b + 1) * s]
    }

    pub fn factor_lags(&self, b: usize) -> &[f64] {
        let s = self.factor_stride();
        &self.factor_lags[b * s..(b + 1) * s]
    }

    pub fn target(&self, b: usize) -> &[f64] {
        let n = self.grid.cells();
        &self.targets[b * n..(b + 1) * n]
    }

    /// Samples at the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> SampleSet {
        let (ds, fs, n) = (self.demand_stride(), self.factor_stride(), self.grid.cells());
        let mut out = SampleSet {
            grid: self.grid.clone(),
            lags: self.lags,
            num_factors: self.num_factors,
            demand_lags: Vec::with_capacity(indices.len() * ds),
            factor_lags: Vec::with_capacity(indices.len() * fs),
            targets: Vec::with_capacity(indices.len() * n),
            target_steps: Vec::with_capacity(indices.len()),
            timestamps: Vec::with_capacity(indices.len()),
        };
        for &b in indices {
            out.demand_lags.extend_from_slice(self.demand_lags(b));
            out.factor_lags.extend_from_slice(self.factor_lags(b));
            out.targets.extend_from_slice(self.target(b));
            out.target_steps.push(self.target_steps[b]);
            out.timestamps.push(self.timestamps[b]);
        }
        out
    }

    pub fn range(&self, range: Range<usize>) -> SampleSet {
        self.select(&range.collect::<Vec<_>>())
    }

    /// `[B, L, W, H]`
    pub fn demand_tensor(&self) -> Tensor {
        let g = &self.grid;
        Tensor::new(vec![self.len(), self.lags, g.width, g.height], self.demand_lags.clone()).expect("layout")
    }

    /// `[B, L, W, H, M]`
    pub fn factor_tensor(&self) -> Tensor {
        let g = &self.grid;
        Tensor::new(
            vec![self.len(), self.lags, g.width, g.height, self.num_factors],
            self.factor_lags.clone(),
        )
        .expect("layout")
    }

    /// `[B, W, H]`
    pub fn target_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.grid.width, self.grid.height], self.targets.clone()).expect("layout")
    }

    /// Assembles a single-sample set from explicit lag stacks (most recent
    /// first). Used when inputs are synthesized, e.g. during rolling runs.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        grid: GridSpec,
        lags: usize,
        num_factors: usize,
        demand_lags: Vec<f64>,
        factor_lags: Vec<f64>,
        target: Vec<f64>,
        target_step: usize,
        timestamp: DateTime<Utc>,
    ) -> Result<SampleSet> {
        let n = grid.cells();
        if demand_lags.len() != lags * n || factor_lags.len() != lags * n * num_factors || target.len() != n {
            return Err(Error::shape(
                "sample",
                format!(
                    "lags {}/{} factors {}/{} target {}/{}",
                    demand_lags.len(),
                    lags * n,
                    factor_lags.len(),
                    lags * n * num_factors,
                    target.len(),
                    n
                ),
            ));
        }
        Ok(SampleSet {
            grid,
            lags,
            num_factors,
            demand_lags,
            factor_lags,
            targets: target,
            target_steps: vec![target_step],
            timestamps: vec![timestamp],
        })
    }
}

/// One sample per target step `t = L..T-1`.
pub fn build_samples(demand: &DemandSeries, factors: &FactorSeries, lags: usize) -> Result<SampleSet> {
    if demand.grid() != factors.grid() {
        return Err(Error::invalid("demand and factor series use different grids"));
    }
    if demand.start_time() != factors.start_time() || demand.steps() != factors.steps() {
        return Err(Error::invalid(format!(
            "demand ({} steps from {}) and factors ({} steps from {}) are not on the same time axis",
            demand.steps(),
            demand.start_time(),
            factors.steps(),
            factors.start_time()
        )));
    }
    if lags == 0 {
        return Err(Error::invalid("lag count must be positive"));
    }
    let steps = demand.steps();
    if steps <= lags {
        return Err(Error::invalid(format!(
            "series has {steps} steps; at least {} are needed for {lags} lags",
            lags + 1
        )));
    }
    let grid = demand.grid().clone();
    let count = steps - lags;
    let n = grid.cells();
    let m = factors.num_factors();
    let mut set = SampleSet {
        grid,
        lags,
        num_factors: m,
        demand_lags: Vec::with_capacity(count * lags * n),
        factor_lags: Vec::with_capacity(count * lags * n * m),
        targets: Vec::with_capacity(count * n),
        target_steps: Vec::with_capacity(count),
        timestamps: Vec::with_capacity(count),
    };
    for t in lags..steps {
        for l in 0..lags {
            let src = t - 1 - l;
            set.demand_lags.extend(demand.frame(src).iter().map(|&c| c as f64));
            set.factor_lags.extend(factors.frame(src).iter().map(|&v| v as f64));
        }
        set.targets.extend(demand.frame(t).iter().map(|&c| c as f64));
        set.target_steps.push(t);
        set.timestamps.push(demand.time_at(t));
    }
    Ok(set)
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: SampleSet,
    pub validation: SampleSet,
    pub test: SampleSet,
    /// Trailing part of `test` (indices into it) used for rolling evaluation.
    pub rolling: Range<usize>,
}

/// Chronological three-way split. Train and validation sizes are floored;
/// the remainder goes to test.
pub fn split_dataset(samples: &SampleSet, ratios: (f64, f64, f64)) -> Result<DatasetSplit> {
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !r.is_finite() || *r <= 0.0) {
        return Err(Error::invalid(format!("split ratios must be positive, got {ratios:?}")));
    }
    if ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios must sum to 1, got {}", tr + va + te)));
    }
    let b = samples.len();
    // The small offset keeps e.g. 0.65 * 100 from flooring to 64.
    let n_train = (b as f64 * tr + 1e-9).floor() as usize;
    let n_val = (b as f64 * va + 1e-9).floor() as usize;
    let n_test = b.saturating_sub(n_train + n_val);
    for (name, n) in [("training", n_train), ("validation", n_val), ("test", n_test)] {
        if n == 0 {
            return Err(Error::invalid(format!("{name} split of {b} samples with ratios {ratios:?} is empty")));
        }
    }
    let test = samples.range(n_train + n_val..b);
    let rolling = n_test.saturating_sub(ROLLING_WINDOW)..n_test;
    Ok(DatasetSplit {
        train: samples.range(0..n_train),
        validation: samples.range(n_train..n_train + n_val),
        test,
        rolling,
    })
}
