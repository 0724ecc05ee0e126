//! The CNN + LSTM forecaster with external-factor fusion.
//!
//! Stage chain for a batch of `B` samples:
//!
//! ```text
//! E  [B, L, W, H]         demand lags, most recent first
//! D  [B, L, W, H, K]      two 3x3 conv -> batch norm -> ReLU blocks, shared across lags
//! C  [B, L, W, H, K+M]    D concatenated with the factor lags F
//! B' [B, L, W*H*(K+M)]    spatial and channel axes flattened per lag
//! A  [B, L, d]            one dense layer (+ ReLU) per lag index
//! g  [B, u]               LSTM over the lags, oldest first; final hidden state
//! h  [B, N]               linear dense layer, N = W*H
//! X  [B, W, H]            reshape
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Gradients, LstmVars, NormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::SampleSet;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.9;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StefConfig {
    pub lags: usize,
    pub width: usize,
    pub height: usize,
    /// Convolution channels `K`.
    pub kernels: usize,
    /// External factor count `M`.
    pub factors: usize,
    /// Per-lag dense width `d`.
    pub dense_width: usize,
    pub lstm_units: usize,
    /// Demand inputs are divided by this and outputs multiplied by it.
    /// 1.0 feeds raw counts.
    #[serde(default = "one")]
    pub input_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl StefConfig {
    /// Default network (`L = 4`, `K = 32`) with 128-wide dense and LSTM layers.
    pub fn new(width: usize, height: usize, factors: usize) -> Self {
        StefConfig {
            lags: 4,
            width,
            height,
            kernels: 32,
            factors,
            dense_width: 128,
            lstm_units: 128,
            input_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("lags", self.lags),
            ("width", self.width),
            ("height", self.height),
            ("kernels", self.kernels),
            ("dense_width", self.dense_width),
            ("lstm_units", self.lstm_units),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model config: {name} must be positive")));
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return Err(Error::invalid("model config: input_scale must be positive"));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    /// Width of one flattened lag slice, `W * H * (K + M)`.
    pub fn flat_width(&self) -> usize {
        self.cells() * (self.kernels + self.factors)
    }

    /// Closed-form trainable parameter count.
    pub fn trainable_count(&self) -> usize {
        let (k, d, u, n) = (self.kernels, self.dense_width, self.lstm_units, self.cells());
        let conv1 = 9 * k + k + 2 * k;
        let conv2 = 9 * k * k + k + 2 * k;
        let lag_dense = self.lags * (self.flat_width() * d + d);
        let lstm = 4 * u * (d + u + 1);
        let output = u * n + n;
        conv1 + conv2 + lag_dense + lstm + output
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    /// `[3, 3, C_in, K]`
    pub kernel: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: BatchStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `[in, out]`
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    /// `[d, 4u]`, gate blocks ordered input, forget, candidate, output.
    pub input_weights: Tensor,
    /// `[u, 4u]`
    pub recurrent_weights: Tensor,
    /// `[4u]`
    pub bias: Tensor,
}

/// Every learned array plus the batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: StefConfig,
    pub conv1: ConvBlock,
    pub conv2: ConvBlock,
    /// One layer per lag index, `[W*H*(K+M), d]` each.
    pub lag_dense: Vec<DenseLayer>,
    pub lstm: LstmLayer,
    /// `[u, N]`
    pub output: DenseLayer,
    /// Set once a train-mode pass has folded batch statistics into the
    /// running averages; infer mode refuses to run before that.
    pub running_stats_ready: bool,
}

fn glorot(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::new(shape, data).expect("init shape")
}

impl ConvBlock {
    fn init(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> Self {
        ConvBlock {
            kernel: glorot(rng, vec![3, 3, c_in, c_out], 9 * c_in, 9 * c_out),
            bias: Tensor::zeros(vec![c_out]),
            gamma: Tensor::full(vec![c_out], 1.0),
            beta: Tensor::zeros(vec![c_out]),
            running: BatchStats { mean: vec![0.0; c_out], var: vec![1.0; c_out] },
        }
    }
}

impl DenseLayer {
    fn init(rng: &mut ChaCha8Rng, din: usize, dout: usize) -> Self {
        DenseLayer { weights: glorot(rng, vec![din, dout], din, dout), bias: Tensor::zeros(vec![dout]) }
    }
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, unit batch-norm scale; deterministic in `seed`.
    pub fn init(config: &StefConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, d, u) = (config.kernels, config.dense_width, config.lstm_units);
        let conv1 = ConvBlock::init(&mut rng, 1, k);
        let conv2 = ConvBlock::init(&mut rng, k, k);
        let lag_dense = (0..config.lags).map(|_| DenseLayer::init(&mut rng, config.flat_width(), d)).collect();
        let lstm = LstmLayer {
            input_weights: glorot(&mut rng, vec![d, 4 * u], d, 4 * u),
            recurrent_weights: glorot(&mut rng, vec![u, 4 * u], u, 4 * u),
            bias: Tensor::zeros(vec![4 * u]),
        };
        let output = DenseLayer::init(&mut rng, u, config.cells());
        Ok(ModelParams {
            config: config.clone(),
            conv1,
            conv2,
            lag_dense,
            lstm,
            output,
            running_stats_ready: false,
        })
    }

    /// Every trainable array in canonical order with its checkpoint name.
    pub fn trainable(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, block) in [("conv1", &self.conv1), ("conv2", &self.conv2)] {
            out.push((format!("{name}.kernel"), &block.kernel));
            out.push((format!("{name}.bias"), &block.bias));
            out.push((format!("{name}.bn_gamma"), &block.gamma));
            out.push((format!("{name}.bn_beta"), &block.beta));
        }
        for (l, layer) in self.lag_dense.iter().enumerate() {
            out.push((format!("lag_dense.{l}.weights"), &layer.weights));
            out.push((format!("lag_dense.{l}.bias"), &layer.bias));
        }
        out.push(("lstm.input_weights".into(), &self.lstm.input_weights));
        out.push(("lstm.recurrent_weights".into(), &self.lstm.recurrent_weights));
        out.push(("lstm.bias".into(), &self.lstm.bias));
        out.push(("output.weights".into(), &self.output.weights));
        out.push(("output.bias".into(), &self.output.bias));
        out
    }

    /// Mutable view in the same order as [`ModelParams::trainable`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for block in [&mut self.conv1, &mut self.conv2] {
            out.push(&mut block.kernel);
            out.push(&mut block.bias);
            out.push(&mut block.gamma);
            out.push(&mut block.beta);
        }
        for layer in &mut self.lag_dense {
            out.push(&mut layer.weights);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.lstm.input_weights);
        out.push(&mut self.lstm.recurrent_weights);
        out.push(&mut self.lstm.bias);
        out.push(&mut self.output.weights);
        out.push(&mut self.output.bias);
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Batch-norm running statistics as named arrays.
    pub fn running_stats(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, block) in [("conv1", &self.conv1), ("conv2", &self.conv2)] {
            let k = block.running.mean.len();
            out.push((format!("{name}.bn_running_mean"), Tensor::new(vec![k], block.running.mean.clone()).unwrap()));
            out.push((format!("{name}.bn_running_var"), Tensor::new(vec![k], block.running.var.clone()).unwrap()));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.trainable().iter().all(|(_, t)| t.is_finite())
            && [&self.conv1, &self.conv2]
                .iter()
                .all(|b| b.running.mean.iter().chain(&b.running.var).all(|v| v.is_finite()))
    }

    /// Every trainable array set to zero (including batch-norm scales).
    pub fn zeroed(mut self) -> Self {
        for t in self.trainable_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        self
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn absorb_batch_stats(&mut self, stats: &[BatchStats; 2]) {
        for (block, batch) in [&mut self.conv1, &mut self.conv2].into_iter().zip(stats) {
            for (r, b) in block.running.mean.iter_mut().zip(&batch.mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            for (r, b) in block.running.var.iter_mut().zip(&batch.var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
        self.running_stats_ready = true;
    }

    /// Checks every array against the shapes implied by `config`.
    pub fn check_shapes(&self) -> Result<()> {
        let reference = ModelParams::init(&self.config, 0)?;
        for ((name, a), (_, b)) in self.trainable().iter().zip(reference.trainable()) {
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    "model_params",
                    format!("{name} has shape {:?}, config implies {:?}", a.shape(), b.shape()),
                ));
            }
        }
        if self.lag_dense.len() != self.config.lags {
            return Err(Error::shape(
                "model_params",
                format!("{} lag dense layers for {} lags", self.lag_dense.len(), self.config.lags),
            ));
        }
        for (name, t) in self.running_stats() {
            if t.numel() != self.config.kernels {
                return Err(Error::shape("model_params", format!("{name} has {} channels", t.numel())));
            }
        }
        Ok(())
    }
}

/// Shapes of every intermediate stage of one forward pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StageShapes {
    pub conv_features: Vec<usize>,
    pub fused: Vec<usize>,
    pub flattened: Vec<usize>,
    pub lag_dense: Vec<usize>,
    pub lstm_state: Vec<usize>,
    pub dense_output: Vec<usize>,
    pub prediction: Vec<usize>,
}

/// A recorded forward pass, ready for a loss and backward.
pub struct ForwardPass {
    pub tape: Tape,
    pub prediction: Var,
    /// Leaves for [`ModelParams::trainable`], same order.
    pub param_vars: Vec<Var>,
    /// Train mode only: statistics of the two batch norms.
    pub batch_stats: Option<[BatchStats; 2]>,
    pub stages: StageShapes,
}

impl ForwardPass {
    pub fn prediction(&self) -> &Tensor {
        self.tape.value(self.prediction)
    }

    /// Gradients of every trainable array in canonical order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.param_vars.iter().map(|&v| grads.wrt(v)).collect()
    }
}

fn stage(name: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Shape { op, detail } => Error::Shape { op: name, detail: format!("{op}: {detail}") },
        other => other,
    }
}

/// Runs the network on `demand_lags: [B, L, W, H]` and `factor_lags: [B, L, W, H, M]`.
pub fn forward(params: &ModelParams, demand_lags: &Tensor, factor_lags: &Tensor, mode: NormMode) -> Result<ForwardPass> {
    let cfg = &params.config;
    let (l, w, h, k, m) = (cfg.lags, cfg.width, cfg.height, cfg.kernels, cfg.factors);
    let es = demand_lags.shape();
    if es.len() != 4 || es[1..] != [l, w, h] {
        return Err(Error::shape("input", format!("demand lags {es:?}, expected [B, {l}, {w}, {h}]")));
    }
    let batch = es[0];
    if batch == 0 {
        return Err(Error::shape("input", "empty batch"));
    }
    if factor_lags.shape() != [batch, l, w, h, m] {
        return Err(Error::shape(
            "input",
            format!("factor lags {:?}, expected [{batch}, {l}, {w}, {h}, {m}]", factor_lags.shape()),
        ));
    }
    if mode == NormMode::Infer && !params.running_stats_ready {
        return Err(Error::invalid(
            "batch-norm running statistics are unpopulated; train the model before inference",
        ));
    }

    let mut tape = Tape::new();
    let param_vars: Vec<Var> = params.trainable().into_iter().map(|(_, t)| tape.param(t.clone())).collect();
    let p = |i: usize| param_vars[i];
    let scaled = if cfg.input_scale == 1.0 {
        demand_lags.clone()
    } else {
        demand_lags.map(|v| v / cfg.input_scale)
    };
    let e = tape.constant(scaled.reshape(vec![batch * l, w, h, 1])?);
    let f = tape.constant(factor_lags.clone());

    let mut x = e;
    let mut stats = Vec::new();
    for (i, (name, block)) in [("conv1", &params.conv1), ("conv2", &params.conv2)].into_iter().enumerate() {
        let base = 4 * i;
        x = tape.conv2d_same(x, p(base), p(base + 1)).map_err(stage(name))?;
        let (y, s) = tape
            .batch_norm(x, p(base + 2), p(base + 3), mode, Some(&block.running))
            .map_err(stage(name))?;
        stats.extend(s);
        x = tape.relu(y);
    }
    let d = tape.reshape(x, &[batch, l, w, h, k]).map_err(stage("conv_features"))?;
    let c = tape.concat_last_axis(d, f).map_err(stage("fuse"))?;
    let flat = tape.reshape(c, &[batch, l, cfg.flat_width()]).map_err(stage("flatten"))?;

    let lag_base = 8;
    let mut per_lag = Vec::with_capacity(l);
    for lag in 0..l {
        let slice = tape.select_axis1(flat, lag).map_err(stage("lag_dense"))?;
        let a = tape
            .dense(slice, p(lag_base + 2 * lag), p(lag_base + 2 * lag + 1))
            .map_err(stage("lag_dense"))?;
        per_lag.push(tape.relu(a));
    }

    let lstm_base = lag_base + 2 * l;
    let lstm = LstmVars {
        input_weights: p(lstm_base),
        recurrent_weights: p(lstm_base + 1),
        bias: p(lstm_base + 2),
    };
    let u = cfg.lstm_units;
    let mut hidden = tape.constant(Tensor::zeros(vec![batch, u]));
    let mut cell = tape.constant(Tensor::zeros(vec![batch, u]));
    // Lag 0 is the most recent hour, so scanning in reverse feeds the oldest first.
    for &a in per_lag.iter().rev() {
        (hidden, cell) = tape.lstm_step(a, hidden, cell, &lstm).map_err(stage("lstm"))?;
    }

    let out = tape.dense(hidden, p(lstm_base + 3), p(lstm_base + 4)).map_err(stage("output"))?;
    let out = if cfg.input_scale == 1.0 { out } else { tape.scale(out, cfg.input_scale) };
    let prediction = tape.reshape(out, &[batch, w, h]).map_err(stage("reshape"))?;

    let stages = StageShapes {
        conv_features: tape.shape(d).to_vec(),
        fused: tape.shape(c).to_vec(),
        flattened: tape.shape(flat).to_vec(),
        lag_dense: vec![batch, per_lag.len(), tape.shape(per_lag[0])[1]],
        lstm_state: tape.shape(hidden).to_vec(),
        dense_output: tape.shape(out).to_vec(),
        prediction: tape.shape(prediction).to_vec(),
    };
    let batch_stats = match stats.len() {
        2 => {
            let mut it = stats.into_iter();
            Some([it.next().unwrap(), it.next().unwrap()])
        }
        _ => None,
    };
    Ok(ForwardPass { tape, prediction, param_vars, batch_stats, stages })
}

/// Infer-mode predictions `[B, W, H]` for every sample, evaluated in chunks.
pub fn predict_batch(params: &ModelParams, samples: &SampleSet) -> Result<Tensor> {
    check_compatible(params, samples)?;
    const CHUNK: usize = 256;
    let mut data = Vec::with_capacity(samples.len() * params.config.cells());
    let mut start = 0;
    while start < samples.len() {
        let end = (start + CHUNK).min(samples.len());
        let chunk = samples.range(start..end);
        let pass = forward(params, &chunk.demand_tensor(), &chunk.factor_tensor(), NormMode::Infer)?;
        data.extend_from_slice(pass.prediction().data());
        start = end;
    }
    Tensor::new(vec![samples.len(), params.config.width, params.config.height], data)
}

pub fn check_compatible(params: &ModelParams, samples: &SampleSet) -> Result<()> {
    let cfg = &params.config;
    let g = samples.grid();
    if (g.width, g.height, samples.lags(), samples.num_factors()) != (cfg.width, cfg.height, cfg.lags, cfg.factors) {
        return Err(Error::shape(
            "input",
            format!(
                "samples are {}x{} with L={} M={}, model expects {}x{} with L={} M={}",
                g.width, g.height, samples.lags(), samples.num_factors(), cfg.width, cfg.height, cfg.lags, cfg.factors
            ),
        ));
    }
    Ok(())
}

/// Feedback value for a predicted count when it re-enters the input window.
pub fn clamp_feedback(prediction: f64) -> f64 {
    prediction.max(0.0)
}
