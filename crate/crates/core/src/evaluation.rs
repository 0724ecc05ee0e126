//! Error metrics, the rolling protocol and the historical-average baseline.

use std::io::Write;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{hour_of_week, DemandSeries, FactorSeries, GridSpec, SampleSet};
use crate::model::{clamp_feedback, predict_batch, ModelParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    OneStep,
    Rolling(usize),
}

/// How percentage errors are aggregated over cells.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapeMode {
    /// Mean of `100 |X - X̂| / X` over cells with `X > 0`.
    #[default]
    Elementwise,
    /// `100 Σ|X - X̂| / Σ X` over cells with `X > 0`.
    SumRatio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when every target cell is zero.
    pub mape: Option<f64>,
    pub mape_excluded_cells: usize,
    pub mape_mode: MapeMode,
    pub horizon: Horizon,
    pub dataset_tag: String,
    pub samples: usize,
}

/// MAE, RMSE and MAPE over every cell of every sample. Zero-demand cells are
/// left out of MAPE and counted in `mape_excluded_cells`.
pub fn compute_metrics(preds: &Tensor, targets: &Tensor) -> Result<MetricsReport> {
    compute_metrics_with(preds, targets, MapeMode::Elementwise)
}

pub fn compute_metrics_with(preds: &Tensor, targets: &Tensor, mode: MapeMode) -> Result<MetricsReport> {
    if preds.shape() != targets.shape() || preds.ndim() != 3 {
        return Err(Error::shape(
            "compute_metrics",
            format!("predictions {:?} vs targets {:?}, expected equal [B, W, H]", preds.shape(), targets.shape()),
        ));
    }
    if preds.shape()[0] == 0 {
        return Err(Error::invalid("compute_metrics needs at least one sample"));
    }
    let n = preds.numel() as f64;
    let (mut abs_sum, mut sq_sum) = (0.0, 0.0);
    let (mut pct_sum, mut included, mut err_pos, mut target_pos) = (0.0, 0usize, 0.0, 0.0);
    for (&p, &x) in preds.data().iter().zip(targets.data()) {
        let e = (x - p).abs();
        abs_sum += e;
        sq_sum += e * e;
        if x > 0.0 {
            pct_sum += e / x;
            err_pos += e;
            target_pos += x;
            included += 1;
        }
    }
    let mape = (included > 0).then(|| match mode {
        MapeMode::Elementwise => 100.0 * pct_sum / included as f64,
        MapeMode::SumRatio => 100.0 * err_pos / target_pos,
    });
    Ok(MetricsReport {
        mae: abs_sum / n,
        rmse: (sq_sum / n).sqrt(),
        mape,
        mape_excluded_cells: preds.numel() - included,
        mape_mode: mode,
        horizon: Horizon::OneStep,
        dataset_tag: String::new(),
        samples: preds.shape()[0],
    })
}

/// Anything that maps input samples to `[B, W, H]` forecasts.
pub trait Predictor {
    fn predict(&self, samples: &SampleSet) -> Result<Tensor>;
}

impl Predictor for ModelParams {
    fn predict(&self, samples: &SampleSet) -> Result<Tensor> {
        predict_batch(self, samples)
    }
}

/// One-step metrics of a predictor on a sample set.
pub fn evaluate_one_step<P: Predictor + ?Sized>(predictor: &P, samples: &SampleSet, tag: &str) -> Result<MetricsReport> {
    let preds = predictor.predict(samples)?;
    let mut report = compute_metrics(&preds, &samples.target_tensor())?;
    report.dataset_tag = tag.to_string();
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepError {
    pub step: usize,
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RollingOutcome {
    pub metrics: MetricsReport,
    pub trace: Vec<StepError>,
    /// Raw predictions `[window, W, H]`.
    pub predictions: Tensor,
    /// Series index of the first scored target.
    pub first_target: usize,
}

/// Rolling evaluation over the last `window` steps of the series.
pub fn rolling_evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    demand: &DemandSeries,
    factors: &FactorSeries,
    lags: usize,
    window: usize,
) -> Result<RollingOutcome> {
    let steps = demand.steps();
    if window == 0 {
        return Err(Error::invalid("rolling window must be at least 1"));
    }
    if window + lags > steps {
        return Err(Error::invalid(format!(
            "rolling window of {window} steps needs {} steps of data ({lags} lag steps to seed), only {steps} available",
            window + lags
        )));
    }
    rolling_evaluate_from(predictor, demand, factors, lags, steps - window, window)
}

/// Rolling evaluation scoring targets `first_target .. first_target + window`.
///
/// The first forecast sees the true demand at the `lags` steps before
/// `first_target`. Each later forecast replaces the oldest lag with the
/// previous forecast, clamped at zero. Factor lags always come from the true
/// series. Metrics are computed on the raw forecasts.
pub fn rolling_evaluate_from<P: Predictor + ?Sized>(
    predictor: &P,
    demand: &DemandSeries,
    factors: &FactorSeries,
    lags: usize,
    first_target: usize,
    window: usize,
) -> Result<RollingOutcome> {
    if demand.grid() != factors.grid() || demand.steps() != factors.steps() {
        return Err(Error::invalid("demand and factor series are not aligned"));
    }
    if lags == 0 || window == 0 {
        return Err(Error::invalid("lags and window must be at least 1"));
    }
    if first_target < lags || first_target + window > demand.steps() {
        return Err(Error::invalid(format!(
            "rolling window {first_target}..{} with {lags} lags does not fit a {}-step series",
            first_target + window,
            demand.steps()
        )));
    }
    let grid = demand.grid().clone();
    let n = grid.cells();
    let m = factors.num_factors();

    // Oldest first.
    let mut history: Vec<Vec<f64>> = (first_target - lags..first_target)
        .map(|s| demand.frame(s).iter().map(|&c| c as f64).collect())
        .collect();
    let mut predictions = Vec::with_capacity(window * n);
    let mut targets = Vec::with_capacity(window * n);
    let mut trace = Vec::with_capacity(window);
    for k in 0..window {
        let t = first_target + k;
        let demand_lags: Vec<f64> = history.iter().rev().flatten().copied().collect();
        let factor_lags: Vec<f64> =
            (0..lags).flat_map(|l| factors.frame(t - 1 - l).iter().map(|&v| v as f64)).collect();
        let sample = SampleSet::from_parts(
            grid.clone(),
            lags,
            m,
            demand_lags,
            factor_lags,
            vec![0.0; n],
            t,
            demand.time_at(t),
        )?;
        let pred = predictor.predict(&sample)?;
        if pred.numel() != n {
            return Err(Error::shape("rolling_evaluate", format!("predictor returned {:?}", pred.shape())));
        }
        let truth: Vec<f64> = demand.frame(t).iter().map(|&c| c as f64).collect();
        let step_pred = Tensor::new(vec![1, grid.width, grid.height], pred.data().to_vec())?;
        let step_truth = Tensor::new(vec![1, grid.width, grid.height], truth.clone())?;
        let step = compute_metrics(&step_pred, &step_truth)?;
        trace.push(StepError { step: k, mae: step.mae, rmse: step.rmse });

        predictions.extend_from_slice(pred.data());
        targets.extend(truth);
        history.remove(0);
        history.push(pred.data().iter().map(|&v| clamp_feedback(v)).collect());
    }
    let predictions = Tensor::new(vec![window, grid.width, grid.height], predictions)?;
    let target_tensor = Tensor::new(vec![window, grid.width, grid.height], targets)?;
    let mut metrics = compute_metrics(&predictions, &target_tensor)?;
    metrics.horizon = Horizon::Rolling(window);
    Ok(RollingOutcome { metrics, trace, predictions, first_target })
}

/// Writes a rolling trace as CSV `step,mae,rmse`.
pub fn write_trace_csv<W: Write>(trace: &[StepError], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in trace {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io("<trace>", e))?;
    Ok(())
}

/// Per-cell mean demand for each hour of the week.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoricalAverage {
    grid: GridSpec,
    /// `168 x N`
    means: Vec<f64>,
}

impl HistoricalAverage {
    /// Fits on a series that covers every hour of the week at least once.
    pub fn fit(train: &DemandSeries) -> Result<Self> {
        let n = train.grid().cells();
        let mut sums = vec![0.0; 168 * n];
        let mut counts = vec![0usize; 168];
        for t in 0..train.steps() {
            let how = hour_of_week(train.time_at(t));
            counts[how] += 1;
            for (s, &c) in sums[how * n..(how + 1) * n].iter_mut().zip(train.frame(t)) {
                *s += c as f64;
            }
        }
        if let Some(missing) = counts.iter().position(|&c| c == 0) {
            return Err(Error::invalid(format!(
                "historical average needs at least one full week of data; hour-of-week {missing} is never observed in {} steps",
                train.steps()
            )));
        }
        for (how, &c) in counts.iter().enumerate() {
            sums[how * n..(how + 1) * n].iter_mut().for_each(|s| *s /= c as f64);
        }
        Ok(HistoricalAverage { grid: train.grid().clone(), means: sums })
    }

    pub fn predict_at(&self, t: DateTime<Utc>) -> &[f64] {
        let n = self.grid.cells();
        let how = hour_of_week(t);
        &self.means[how * n..(how + 1) * n]
    }
}

impl Predictor for HistoricalAverage {
    fn predict(&self, samples: &SampleSet) -> Result<Tensor> {
        if samples.grid() != &self.grid {
            return Err(Error::shape("historical_average", "sample grid differs from the fitted grid"));
        }
        let data = samples.timestamps().iter().flat_map(|&t| self.predict_at(t).iter().copied()).collect();
        Tensor::new(vec![samples.len(), self.grid.width, self.grid.height], data)
    }
}
