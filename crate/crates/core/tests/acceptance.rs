//! End-to-end acceptance checks, one test per criterion. Each test writes a
//! single `criterion N: PASS|FAIL ...` line straight to stderr so the lines
//! survive output capture.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stef_core::autodiff::{sigmoid, BatchStats, LstmVars, NormMode, Tape};
use stef_core::checkpoint::{checkpoint_from_bytes, checkpoint_to_bytes, Checkpoint};
use stef_core::evaluation::{
    compute_metrics, evaluate_one_step, rolling_evaluate, rolling_evaluate_from, HistoricalAverage, Predictor,
};
use stef_core::grid::{build_samples, demand_to_bytes, factors_to_bytes, split_dataset, DemandSeries, SampleSet};
use stef_core::model::{forward, predict_batch, ModelParams, StefConfig};
use stef_core::synth::{generate, Noise, SynthConfig};
use stef_core::training::{mae_loss, new_optimizer, train, train_step, TrainConfig};
use stef_core::{Result, Tensor};

fn report(criterion: u32, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {criterion}: {status} {detail}\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn random_bits(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0..2) as f64).collect()).unwrap()
}

fn model_loss(params: &ModelParams, e: &Tensor, f: &Tensor, target: &Tensor) -> f64 {
    let mut pass = forward(params, e, f, NormMode::Train).unwrap();
    let t = pass.tape.constant(target.clone());
    let loss = mae_loss(&mut pass.tape, pass.prediction, t).unwrap();
    pass.tape.value(loss).data()[0]
}

#[test]
fn criterion_1_gradient_correctness() {
    let started = Instant::now();
    let cfg = StefConfig { lags: 2, width: 3, height: 3, kernels: 4, factors: 2, dense_width: 8, lstm_units: 8, input_scale: 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let params = ModelParams::init(&cfg, 7).unwrap();
    let e = random_tensor(&mut rng, &[2, 2, 3, 3], 0.0, 10.0);
    let f = random_bits(&mut rng, &[2, 2, 3, 3, 2]);
    let target = random_tensor(&mut rng, &[2, 3, 3], 0.0, 10.0);

    let mut pass = forward(&params, &e, &f, NormMode::Train).unwrap();
    let t = pass.tape.constant(target.clone());
    let loss = mae_loss(&mut pass.tape, pass.prediction, t).unwrap();
    let grads = pass.tape.backward(loss).unwrap();
    let analytic = pass.param_grads(&grads);

    let step = 1e-5;
    let mut worst = (0.0f64, String::new());
    let mut failures = Vec::new();
    let mut nontrivial = 0;
    let names: Vec<String> = params.trainable().into_iter().map(|(n, _)| n).collect();
    for (i, name) in names.iter().enumerate() {
        for j in 0..analytic[i].numel() {
            let mut plus = params.clone();
            plus.trainable_mut()[i].data_mut()[j] += step;
            let mut minus = params.clone();
            minus.trainable_mut()[i].data_mut()[j] -= step;
            let numeric = (model_loss(&plus, &e, &f, &target) - model_loss(&minus, &e, &f, &target)) / (2.0 * step);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let ok = err <= 1e-8 || err <= 1e-4 * scale;
            let rel = if scale > 0.0 { err / scale } else { 0.0 };
            if scale > 1e-6 {
                nontrivial += 1;
            }
            if scale > 1e-6 && rel > worst.0 {
                worst = (rel, format!("{name}[{j}]"));
            }
            if !ok {
                failures.push(format!("{name}[{j}]: analytic {a:e} numeric {numeric:e}"));
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 60.0;
    report(
        1,
        pass,
        &format!(
            "{} arrays, {nontrivial} nonzero gradient elements, worst relative error {:.2e} at {}, {} mismatches, {secs:.1}s",
            names.len(),
            worst.0,
            worst.1,
            failures.len()
        ),
    );
    assert!(pass, "{failures:#?}");
}

#[test]
fn criterion_2_shape_chain() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut bad = Vec::new();
    for case in 0..50 {
        let cfg = StefConfig {
            lags: rng.random_range(1..6),
            width: rng.random_range(1..7),
            height: rng.random_range(1..7),
            kernels: rng.random_range(1..6),
            factors: rng.random_range(0..4),
            dense_width: rng.random_range(1..9),
            lstm_units: rng.random_range(1..9),
            input_scale: 1.0,
        };
        let b = rng.random_range(1..4);
        let (l, w, h, k, m) = (cfg.lags, cfg.width, cfg.height, cfg.kernels, cfg.factors);
        let params = ModelParams::init(&cfg, case).unwrap();
        let e = random_tensor(&mut rng, &[b, l, w, h], 0.0, 5.0);
        let f = random_bits(&mut rng, &[b, l, w, h, m]);
        let s = forward(&params, &e, &f, NormMode::Train).unwrap().stages;
        let expected = [
            (s.conv_features.clone(), vec![b, l, w, h, k]),
            (s.fused.clone(), vec![b, l, w, h, k + m]),
            (s.flattened.clone(), vec![b, l, w * h * (k + m)]),
            (s.lag_dense.clone(), vec![b, l, cfg.dense_width]),
            (s.lstm_state.clone(), vec![b, cfg.lstm_units]),
            (s.dense_output.clone(), vec![b, w * h]),
            (s.prediction.clone(), vec![b, w, h]),
        ];
        if expected.iter().any(|(got, want)| got != want) || params.trainable_count() != cfg.trainable_count() {
            bad.push(format!("{cfg:?}: {s:?}"));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = bad.is_empty() && secs < 10.0;
    report(2, pass, &format!("50 random configs, {} mismatches, {secs:.2}s", bad.len()));
    assert!(pass, "{bad:#?}");
}

fn naive_conv(x: &Tensor, k: &Tensor, bias: &Tensor) -> Vec<f64> {
    let (b, w, h, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = k.shape()[3];
    let mut out = vec![0.0; b * w * h * cout];
    for n in 0..b {
        for i in 0..w {
            for j in 0..h {
                for o in 0..cout {
                    let mut acc = bias.data()[o];
                    for di in 0..3 {
                        for dj in 0..3 {
                            let (si, sj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                            if si < 0 || sj < 0 || si >= w as isize || sj >= h as isize {
                                continue;
                            }
                            for c in 0..cin {
                                acc += x.get(&[n, si as usize, sj as usize, c]) * k.get(&[di, dj, c, o]);
                            }
                        }
                    }
                    out[((n * w + i) * h + j) * cout + o] = acc;
                }
            }
        }
    }
    out
}

fn naive_lstm(x: &Tensor, h: &Tensor, c: &Tensor, wx: &Tensor, wh: &Tensor, b: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (batch, din, u) = (x.shape()[0], x.shape()[1], h.shape()[1]);
    let mut h_out = vec![0.0; batch * u];
    let mut c_out = vec![0.0; batch * u];
    for n in 0..batch {
        for j in 0..u {
            let gate = |g: usize| {
                let col = g * u + j;
                let mut z = b.data()[col];
                for i in 0..din {
                    z += x.get(&[n, i]) * wx.get(&[i, col]);
                }
                for i in 0..u {
                    z += h.get(&[n, i]) * wh.get(&[i, col]);
                }
                z
            };
            let (i_g, f_g, g_g, o_g) = (sigmoid(gate(0)), sigmoid(gate(1)), gate(2).tanh(), sigmoid(gate(3)));
            let cn = f_g * c.get(&[n, j]) + i_g * g_g;
            c_out[n * u + j] = cn;
            h_out[n * u + j] = o_g * cn.tanh();
        }
    }
    (h_out, c_out)
}

fn naive_metrics(p: &[f64], x: &[f64]) -> (f64, f64, Option<f64>, usize) {
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut pct = Vec::new();
    for i in 0..p.len() {
        let d = x[i] - p[i];
        abs += d.abs();
        sq += d * d;
        if x[i] != 0.0 {
            pct.push(d.abs() / x[i]);
        }
    }
    let n = p.len() as f64;
    let mape = if pct.is_empty() { None } else { Some(100.0 * pct.iter().sum::<f64>() / pct.len() as f64) };
    (abs / n, (sq / n).sqrt(), mape, p.len() - pct.len())
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_3_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut conv_err, mut lstm_err, mut metric_err) = (0.0f64, 0.0f64, 0.0f64);
    let mut metric_mismatch = 0;
    for _ in 0..100 {
        let (b, w, h, cin, cout) =
            (rng.random_range(1..3), rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..4), rng.random_range(1..4));
        let x = random_tensor(&mut rng, &[b, w, h, cin], -2.0, 2.0);
        let k = random_tensor(&mut rng, &[3, 3, cin, cout], -1.0, 1.0);
        let bias = random_tensor(&mut rng, &[cout], -1.0, 1.0);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.constant(x.clone()), tape.constant(k.clone()), tape.constant(bias.clone()));
        let y = tape.conv2d_same(xv, kv, bv).unwrap();
        conv_err = conv_err.max(max_diff(tape.value(y).data(), &naive_conv(&x, &k, &bias)));

        let (batch, din, u) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6));
        let xs = random_tensor(&mut rng, &[batch, din], -1.5, 1.5);
        let hs = random_tensor(&mut rng, &[batch, u], -1.0, 1.0);
        let cs = random_tensor(&mut rng, &[batch, u], -1.0, 1.0);
        let wx = random_tensor(&mut rng, &[din, 4 * u], -1.0, 1.0);
        let wh = random_tensor(&mut rng, &[u, 4 * u], -1.0, 1.0);
        let lb = random_tensor(&mut rng, &[4 * u], -1.0, 1.0);
        let mut tape = Tape::new();
        let vars = LstmVars {
            input_weights: tape.constant(wx.clone()),
            recurrent_weights: tape.constant(wh.clone()),
            bias: tape.constant(lb.clone()),
        };
        let (xv, hv, cv) = (tape.constant(xs.clone()), tape.constant(hs.clone()), tape.constant(cs.clone()));
        let (h1, c1) = tape.lstm_step(xv, hv, cv, &vars).unwrap();
        let (nh, nc) = naive_lstm(&xs, &hs, &cs, &wx, &wh, &lb);
        lstm_err = lstm_err.max(max_diff(tape.value(h1).data(), &nh)).max(max_diff(tape.value(c1).data(), &nc));

        let shape = [rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5)];
        let preds = random_tensor(&mut rng, &shape, -1.0, 8.0);
        let n: usize = shape.iter().product();
        let targets = Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0..9) as f64 }).collect(),
        )
        .unwrap();
        let r = compute_metrics(&preds, &targets).unwrap();
        let (mae, rmse, mape, excluded) = naive_metrics(preds.data(), targets.data());
        metric_err = metric_err.max((r.mae - mae).abs()).max((r.rmse - rmse).abs());
        match (r.mape, mape) {
            (Some(a), Some(b)) => metric_err = metric_err.max((a - b).abs()),
            (None, None) => {}
            _ => metric_mismatch += 1,
        }
        if r.mape_excluded_cells != excluded {
            metric_mismatch += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = conv_err <= 1e-12 && lstm_err <= 1e-12 && metric_err <= 1e-12 && metric_mismatch == 0 && secs < 30.0;
    report(
        3,
        pass,
        &format!(
            "100 instances each: conv {conv_err:.1e}, lstm {lstm_err:.1e}, metrics {metric_err:.1e} ({metric_mismatch} structural mismatches), {secs:.2}s"
        ),
    );
    assert!(pass);
}

fn learning_dataset() -> SynthConfig {
    SynthConfig {
        width: 8,
        height: 8,
        steps: 1440,
        factors: 2,
        base_rate: 5.0,
        factor_boost: vec![8.0, 12.0],
        daily_amplitude: 0.5,
        weekly_amplitude: 0.0,
        noise: Noise::Poisson,
        seed: 2024,
        pois_per_factor: 2,
        start_time: "2024-01-01T00:00:00Z".into(),
        bounds: [40.70, 40.80, -74.02, -73.92],
    }
}

#[test]
fn criterion_4_synthetic_learning() {
    let started = Instant::now();
    let data = generate(&learning_dataset()).unwrap();
    let lags = 4;
    let samples = build_samples(&data.demand, &data.factors, lags).unwrap();
    let split = split_dataset(&samples, (0.65, 0.15, 0.20)).unwrap();

    // The baseline sees the same span of history as the model's training block.
    let train_end = split.train.target_steps().last().unwrap() + 1;
    let ha = HistoricalAverage::fit(&data.demand.slice(0..train_end).unwrap()).unwrap();
    let ha_test = evaluate_one_step(&ha, &split.test, "test").unwrap();

    let cfg = StefConfig {
        lags,
        width: 8,
        height: 8,
        kernels: 32,
        factors: 2,
        dense_width: 32,
        lstm_units: 32,
        input_scale: 1.0,
    };
    let params = ModelParams::init(&cfg, 17).unwrap();
    let train_cfg = TrainConfig {
        learning_rate: 0.001,
        batch_size: 256,
        max_epochs: 200,
        early_stop_patience: 20,
        seed: 17,
        shuffle: true,
    };
    let (best, train_report) = train(params, &split.train, &split.validation, &train_cfg).unwrap();
    let model_test = evaluate_one_step(&best, &split.test, "test").unwrap();
    let rolling = rolling_evaluate(&best, &data.demand, &data.factors, lags, 168).unwrap();

    let improvement = 1.0 - model_test.mae / ha_test.mae;
    let ratio = rolling.metrics.mae / model_test.mae;
    let beats_baseline = improvement >= 0.20;
    let rolling_close = ratio <= 1.5;
    let secs = started.elapsed().as_secs_f64();
    let pass = beats_baseline && rolling_close;
    report(
        4,
        pass,
        &format!(
            "model test MAE {:.4} vs historical average {:.4} ({:.1}% lower, need >= 20%: {}); rolling MAE {:.4} = {ratio:.3}x one-step (need <= 1.5: {}); {} epochs, best {}, {secs:.0}s",
            model_test.mae,
            ha_test.mae,
            100.0 * improvement,
            if beats_baseline { "ok" } else { "no" },
            rolling.metrics.mae,
            if rolling_close { "ok" } else { "no" },
            train_report.epochs.len(),
            train_report.best_epoch,
        ),
    );
    assert!(model_test.mae.is_finite() && rolling.metrics.mae.is_finite());
    assert!(rolling_close, "rolling MAE {} vs one-step {}", rolling.metrics.mae, model_test.mae);
    assert!(beats_baseline, "model test MAE {} is only {:.1}% below the baseline {}", model_test.mae, 100.0 * improvement, ha_test.mae);
}

/// Returns the true next grid by looking the target time up in the series.
struct Oracle<'a>(&'a DemandSeries);

impl Predictor for Oracle<'_> {
    fn predict(&self, samples: &SampleSet) -> Result<Tensor> {
        let g = self.0.grid();
        let data = samples
            .target_steps()
            .iter()
            .flat_map(|&t| self.0.frame(t).iter().map(|&c| c as f64))
            .collect();
        Tensor::new(vec![samples.len(), g.width, g.height], data)
    }
}

fn small_world() -> (stef_core::synth::SynthDataset, ModelParams) {
    let cfg = SynthConfig {
        width: 4,
        height: 3,
        steps: 240,
        factor_boost: vec![6.0],
        factors: 1,
        ..learning_dataset()
    };
    let data = generate(&cfg).unwrap();
    let model_cfg = StefConfig { lags: 3, width: 4, height: 3, kernels: 4, factors: 1, dense_width: 6, lstm_units: 6, input_scale: 10.0 };
    let mut params = ModelParams::init(&model_cfg, 5).unwrap();
    params.running_stats_ready = true;
    params.conv1.running = BatchStats { mean: vec![0.1; 4], var: vec![0.5; 4] };
    params.conv2.running = BatchStats { mean: vec![0.2; 4], var: vec![0.3; 4] };
    (data, params)
}

#[test]
fn criterion_5_rolling_sanity() {
    let (data, params) = small_world();
    let lags = 3;

    let oracle = rolling_evaluate(&Oracle(&data.demand), &data.demand, &data.factors, lags, 168).unwrap();
    let oracle_zero = oracle.metrics.mae == 0.0 && oracle.metrics.rmse == 0.0 && oracle.trace.iter().all(|s| s.mae == 0.0);

    let samples = build_samples(&data.demand, &data.factors, lags).unwrap();
    let last = samples.range(samples.len() - 1..samples.len());
    let one_step = evaluate_one_step(&params, &last, "test").unwrap();
    let rolled = rolling_evaluate(&params, &data.demand, &data.factors, lags, 1).unwrap();
    let window_one_diff = (one_step.mae - rolled.metrics.mae)
        .abs()
        .max((one_step.rmse - rolled.metrics.rmse).abs())
        .max((one_step.mape.unwrap_or(0.0) - rolled.metrics.mape.unwrap_or(0.0)).abs());

    let first = 100;
    let clean = rolling_evaluate_from(&params, &data.demand, &data.factors, lags, first, 48).unwrap();
    let mut poisoned = data.demand.clone();
    let n = poisoned.grid().cells();
    poisoned.counts_mut()[first * n..].iter_mut().for_each(|c| *c = 999_999);
    let dirty = rolling_evaluate_from(&params, &poisoned, &data.factors, lags, first, 48).unwrap();
    let poison_safe = clean.predictions == dirty.predictions;

    let pass = oracle_zero && window_one_diff <= 1e-12 && poison_safe;
    report(
        5,
        pass,
        &format!(
            "oracle rolling MAE {} RMSE {}; window=1 vs one-step max diff {window_one_diff:.1e}; future poisoning leaves predictions unchanged: {poison_safe}",
            oracle.metrics.mae, oracle.metrics.rmse
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_metric_hand_checks() {
    let preds = Tensor::new(vec![1, 2, 2], vec![3.0, 3.0, 0.0, 0.0]).unwrap();
    let targets = Tensor::new(vec![1, 2, 2], vec![2.0, 4.0, 0.0, 2.0]).unwrap();
    let r = compute_metrics(&preds, &targets).unwrap();
    let mape = r.mape.unwrap_or(f64::NAN);
    let pass = (r.mae - 1.0).abs() <= 1e-9
        && (r.rmse - 1.2247).abs() <= 1e-4
        && (r.rmse - 1.5f64.sqrt()).abs() <= 1e-9
        && (mape - 58.33).abs() <= 0.01
        && r.mape_excluded_cells == 1;
    report(6, pass, &format!("MAE {} RMSE {:.10} MAPE {mape:.4} excluded {}", r.mae, r.rmse, r.mape_excluded_cells));
    assert!(pass);
}

#[test]
fn criterion_7_determinism_and_persistence() {
    let (data, _) = small_world();
    let samples = build_samples(&data.demand, &data.factors, 3).unwrap();
    let split = split_dataset(&samples, (0.65, 0.15, 0.20)).unwrap();
    let cfg = StefConfig { lags: 3, width: 4, height: 3, kernels: 4, factors: 1, dense_width: 6, lstm_units: 6, input_scale: 10.0 };
    let train_cfg = TrainConfig { batch_size: 32, max_epochs: 3, early_stop_patience: 5, seed: 9, ..TrainConfig::default() };
    let run = || train(ModelParams::init(&cfg, 3).unwrap(), &split.train, &split.validation, &train_cfg).unwrap();
    let (p1, r1) = run();
    let (p2, r2) = run();
    let train_identical = p1 == p2 && r1.same_run(&r2);

    let bytes = checkpoint_to_bytes(&Checkpoint { params: p1.clone(), seed: 3, trained_epochs: r1.epochs.len() }).unwrap();
    let restored = checkpoint_from_bytes(&bytes).unwrap().params;
    let before = predict_batch(&p1, &split.test).unwrap();
    let after = predict_batch(&restored, &split.test).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let checkpoint_identical = bits(&before) == bits(&after);

    let synth_cfg = learning_dataset();
    let a = generate(&synth_cfg).unwrap();
    let b = generate(&synth_cfg).unwrap();
    let synth_identical = demand_to_bytes(&a.demand).unwrap() == demand_to_bytes(&b.demand).unwrap()
        && factors_to_bytes(&a.factors).unwrap() == factors_to_bytes(&b.factors).unwrap();

    let pass = train_identical && checkpoint_identical && synth_identical;
    report(
        7,
        pass,
        &format!(
            "training bit-identical: {train_identical}; checkpoint predictions bit-identical: {checkpoint_identical}; synth containers byte-identical: {synth_identical}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_overfit_one_batch() {
    let (data, _) = small_world();
    let samples = build_samples(&data.demand, &data.factors, 3).unwrap();
    let batch = samples.range(0..16);
    let cfg = StefConfig { lags: 3, width: 4, height: 3, kernels: 4, factors: 1, dense_width: 6, lstm_units: 6, input_scale: 10.0 };
    let mut params = ModelParams::init(&cfg, 21).unwrap();
    let mut adam = new_optimizer(&params, 1e-3);
    let losses: Vec<f64> = (0..11).map(|_| train_step(&mut params, &mut adam, &batch).unwrap()).collect();
    let decreasing = losses.windows(2).all(|w| w[1] < w[0]);
    report(
        8,
        decreasing,
        &format!("losses over 10 Adam steps: {:.5} -> {:.5}, strictly decreasing: {decreasing}", losses[0], losses[10]),
    );
    assert!(decreasing, "{losses:?}");
}
