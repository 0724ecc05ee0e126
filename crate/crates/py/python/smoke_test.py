"""Smoke test for the Python bindings.

Build and install first, e.g. `maturin develop -m crates/py/Cargo.toml`,
then run `python crates/py/python/smoke_test.py`.
"""

import math
import os
import tempfile

import stef


def main():
    grid = stef.GridSpec(0.0, 2.0, 0.0, 2.0, 2, 2)
    assert grid.cells == 4
    assert grid.cell_of(0.5, 1.5) == (1, 0)
    assert grid.cell_of(5.0, 5.0) is None

    trips = [
        ("2024-01-01T00:10:00Z", 0.5, 0.5),
        ("2024-01-01T00:50:00Z", 1.5, 0.5),
        ("2024-01-01T01:05:00Z", 1.5, 1.5),
    ]
    demand = stef.rasterize(trips, grid, "2024-01-01T00:00:00Z", 2)
    assert demand.frame(0) == [1, 1, 0, 0]
    assert demand.frame(1) == [0, 0, 0, 1]

    m = stef.compute_metrics([3, 3, 0, 0], [2, 4, 0, 2], (1, 2, 2))
    assert m["mae"] == 1.0
    assert abs(m["rmse"] - math.sqrt(1.5)) < 1e-12
    assert abs(m["mape"] - 175.0 / 3.0) < 1e-9
    assert m["mape_excluded_cells"] == 1

    config = {
        "width": 4, "height": 3, "steps": 24 * 14, "factors": 2, "base_rate": 4.0,
        "factor_boost": [6.0, 9.0], "daily_amplitude": 0.4, "noise": "poisson", "seed": 5,
    }
    demand, factors, pois = stef.synth(config)
    assert len(demand) == 336 and factors.num_factors == 2 and len(pois) == 4
    again = stef.encode_factors(pois, demand.grid, demand.start_time, demand.steps, 2)
    assert all(again.frame(t) == factors.frame(t) for t in range(demand.steps))

    model = stef.Model(4, 3, 2, lags=3, kernels=4, dense_width=8, lstm_units=8, input_scale=10.0, seed=1)
    report = model.train(demand, factors, {"max_epochs": 2, "batch_size": 32, "seed": 1})
    assert len(report["epochs"]) == 2
    metrics = model.evaluate(demand, factors)
    assert metrics["dataset_tag"] == "test" and math.isfinite(metrics["mae"])
    rolled = model.roll(demand, factors, window=24)
    assert rolled["metrics"]["horizon"] == {"rolling": 24} and len(rolled["trace"]) == 24
    baseline = stef.baseline_evaluate(demand, factors, lags=3)
    assert math.isfinite(baseline["mae"])

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ckpt")
        model.save(path)
        restored = stef.Model.load(path)
        assert restored.predict(demand, factors) == model.predict(demand, factors)
        assert restored.config["lags"] == 3

    try:
        stef.Model.load(os.path.join(tempfile.gettempdir(), "does-not-exist.ckpt"))
    except OSError:
        pass
    else:
        raise AssertionError("missing checkpoint should raise")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
