import numpy as np
import pytest

from invda import evaluation as ev
from invda import lorenz96 as l96
from invda import neural
from invda.observation import ObservationOp, fit_whitening


def test_gamma_positive_and_stable():
    p = l96.L96Params(k=8)
    g1 = ev.estimate_gamma(neural.LORENZ96, p, 1000, seed=0, spinup=500)
    g2 = ev.estimate_gamma(neural.LORENZ96, p, 2000, seed=1, spinup=500)
    assert g1 > 0
    # doubling the pair count moves the estimate by < 5%
    assert abs(g1 - g2) / g1 < 0.05


def test_gamma_determinism_and_degenerate_guard():
    p = l96.L96Params(k=8)
    a = ev.estimate_gamma(neural.LORENZ96, p, 200, seed=3, spinup=500)
    b = ev.estimate_gamma(neural.LORENZ96, p, 200, seed=3, spinup=500)
    assert a == b
    with pytest.raises(ev.MetricError):
        ev.relative_error(np.ones(3), np.zeros(3), 0.0)
    with pytest.raises(ValueError):
        ev.estimate_gamma(neural.LORENZ96, p, 50, seed=0)


def test_relative_error_properties():
    z = np.array([1.0, -2.0, 3.0])
    assert ev.relative_error(z, z, 5.0) == 0.0
    assert ev.relative_error(z, z + 1.0, 3.0) == pytest.approx(1.0)
    a, b = np.array([1.0, 2.0]), np.array([0.5, -1.0])
    assert ev.relative_error(a, b, 2.0) == ev.relative_error(b, a, 2.0)


def test_metric_calibration_lorenz96():
    # fresh independent pairs have mean relative error 1.0 +- 0.1
    p = l96.L96Params()
    gamma = ev.estimate_gamma(neural.LORENZ96, p, 1000, seed=4)
    states = l96.sample_stationary(p, seed=5, n_samples=2000)
    errs = [ev.relative_error(states[2 * i], states[2 * i + 1], gamma)
            for i in range(1000)]
    assert np.mean(errs) == pytest.approx(1.0, abs=0.1)


def test_forecast_score_zero_at_truth_and_step0_definition():
    p = l96.L96Params(k=8)
    x0 = l96.sample_stationary(p, seed=6)
    gamma = ev.estimate_gamma(neural.LORENZ96, p, 200, seed=7, spinup=500)
    s = ev.forecast_and_score(neural.LORENZ96, p, x0, x0, 3, 2, gamma)
    np.testing.assert_allclose(s.errors, 0.0, atol=1e-15)
    assert s.errors.shape == (6,)

    y0 = x0 + 0.1
    s2 = ev.forecast_and_score(neural.LORENZ96, p, y0, x0, 3, 2, gamma)
    assert s2.errors[0] == pytest.approx(ev.relative_error(y0, x0, gamma))
    assert s2.first_forecast_error() == s2.errors[4]


def test_perturbation_error_grows_chaotically():
    p = l96.L96Params()
    gamma = ev.estimate_gamma(neural.LORENZ96, p, 200, seed=8)
    mean_growth = []
    for i in range(5):
        x0 = l96.sample_stationary(p, seed=100 + i)
        y0 = x0 + 1e-3 * np.random.default_rng(i).normal(size=40)
        s = ev.forecast_and_score(neural.LORENZ96, p, y0, x0, 10, 10, gamma)
        mean_growth.append(s.errors[-1] / max(s.errors[0], 1e-12))
    assert np.median(mean_growth) > 3.0


def test_summarize_normalizes_baseline_cell():
    scores = []
    rng = np.random.default_rng(9)
    for method, init in ev.COMBINATIONS:
        scale = {"observation": 1.0, "hybrid": 0.5}[method]
        scale *= {"baseline": 1.0, "inverse": 0.3}[init]
        for i in range(4):
            errors = scale * (1.0 + 0.05 * rng.random(7))
            scores.append(ev.ForecastScore(i, method, init, 2, errors))
    out = ev.summarize(scores)
    table = out["table_relative_to_baseline"]
    assert table[("observation", "baseline")] == 1.0
    assert table[("hybrid", "inverse")] < table[("hybrid", "baseline")] < 1.0
    assert out["curves"][("observation", "baseline")].shape == (7,)


def test_evaluate_suite_tiny_end_to_end():
    # miniature but complete four-way comparison
    p = l96.L96Params(k=8)
    op = ObservationOp.lorenz96(stride=4)
    cfg = neural.lorenz96_config(k=8, stride=4, window=4, base_channels=8)
    data = neural.generate_training_set(neural.LORENZ96, p, op, 48, seed=10,
                                        window=4, spinup=500)
    model = neural.build_network(cfg, seed=11)
    neural.set_input_normalization(model, data["obs"])
    neural.train(model, data, data, neural.TrainConfig(epochs=15, seed=12,
                                                       learning_rate=3e-3))
    samples = l96.sample_stationary(p, seed=13, n_samples=2000, spinup_steps=500)
    whitening = fit_whitening(samples)
    clim = samples.mean(axis=0)

    out = ev.evaluate_suite(neural.LORENZ96, p, op, model, whitening, clim,
                            budgets=(5, 15), n_test=3, window_steps=3, horizon=2,
                            gamma_pairs=200, seed=14)
    assert set(out["results"].keys()) == set(ev.COMBINATIONS)
    table = out["summary"]["table_relative_to_baseline"]
    assert table[("observation", "baseline")] == 1.0
    assert len(out["scores"]) == 4 * 3
    for s in out["scores"]:
        assert np.all(s.errors >= 0)
        assert s.errors.shape == (6,)
    # determinism of the whole suite
    out2 = ev.evaluate_suite(neural.LORENZ96, p, op, model, whitening, clim,
                             budgets=(5, 15), n_test=3, window_steps=3, horizon=2,
                             gamma_pairs=200, seed=14)
    for s1, s2 in zip(out["scores"], out2["scores"]):
        np.testing.assert_array_equal(s1.errors, s2.errors)
