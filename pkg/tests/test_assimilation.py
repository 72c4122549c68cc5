import numpy as np
import pytest

from invda import assimilation as da
from invda import lorenz96 as l96
from invda import neural
from invda.core import finite_difference_gradient
from invda.core.fd import relative_gradient_error
from invda import kolmogorov as kflow
from invda.observation import ObservationOp, fit_whitening, observe_window, whiten


def l96_spec(k=8, t_steps=3, seed=0, with_whitening=True):
    params = l96.L96Params(k=k)
    op = ObservationOp.lorenz96(stride=4)
    truth = l96.sample_stationary(params, seed=seed)
    traj = l96.integrate(truth, params, t_steps)
    y = observe_window(traj, op)
    w = None
    if with_whitening:
        samples = l96.sample_stationary(params, seed=seed + 1, n_samples=800)
        w = fit_whitening(samples)
    return da.ObjectiveSpec(neural.LORENZ96, params, op, y, whitening=w), truth


def kolmogorov_spec(n=8, t_steps=2, seed=0):
    params = kflow.KolmogorovParams(n=n, substeps=2, dt_inner=0.01)
    op = ObservationOp.kolmogorov(stride=4)
    truth = kflow.sample_stationary(params, seed=seed, spinup_snapshots=20)
    states = kflow.integrate(truth, params, t_steps)
    y = np.stack([np.asarray(observe_window([s], op))[0] for s in states])
    return da.ObjectiveSpec(neural.KOLMOGOROV, params, op, y), truth


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

def test_objective_obs_zero_at_truth():
    spec, truth = l96_spec()
    f, g = da.objective_obs(truth.reshape(-1), spec)
    assert f == pytest.approx(0.0, abs=1e-24)
    np.testing.assert_allclose(g, 0.0, atol=1e-12)


def test_objective_obs_single_state_window():
    spec, truth = l96_spec(t_steps=0)
    x = truth + 0.3
    f, _ = da.objective_obs(x.reshape(-1), spec)
    resid = x[::4] - spec.observations[0, :, 0]
    assert f == pytest.approx(float(np.sum(resid ** 2)), rel=1e-12)


def test_objective_obs_gradient_lorenz96():
    spec, truth = l96_spec()
    rng = np.random.default_rng(1)
    x = truth + 0.5 * rng.normal(size=truth.shape)
    _, g = da.objective_obs(x.reshape(-1), spec)
    g_fd = finite_difference_gradient(lambda z: da.objective_obs_value(z, spec),
                                      x.reshape(-1), h=1e-6)
    assert relative_gradient_error(g, g_fd) < 1e-5


def test_objective_obs_gradient_kolmogorov():
    spec, truth = kolmogorov_spec()
    rng = np.random.default_rng(2)
    x = truth + 0.1 * rng.normal(size=truth.shape)
    x = kflow.project_div_free(x, spec.dyn_params)
    _, g = da.objective_obs(x.reshape(-1), spec)
    g_fd = finite_difference_gradient(lambda z: da.objective_obs_value(z, spec),
                                      x.reshape(-1), h=1e-6)
    assert relative_gradient_error(g, g_fd) < 1e-4


def test_objective_physics_targets_cached_and_gradient():
    spec, truth = l96_spec(k=8, t_steps=3)
    # a synthetic "exact inverse": targets equal the true rollout
    w = 4
    traj = l96.integrate(truth, spec.dyn_params, spec.window_steps)
    spec.physics_targets = traj[:w].copy()

    f, g = da.objective_physics(truth.reshape(-1), spec)
    assert f == pytest.approx(0.0, abs=1e-24)

    rng = np.random.default_rng(3)
    x = truth + 0.4 * rng.normal(size=truth.shape)
    _, g = da.objective_physics(x.reshape(-1), spec)

    def value_only(z):
        t = l96.integrate(z.reshape(spec.state_shape()), spec.dyn_params,
                          spec.window_steps)
        return float(np.sum((t[:w] - spec.physics_targets) ** 2))

    g_fd = finite_difference_gradient(value_only, x.reshape(-1), h=1e-6)
    assert relative_gradient_error(g, g_fd) < 1e-5
    # targets must not change across evaluations
    t0 = spec.physics_targets.copy()
    da.objective_physics(x.reshape(-1), spec)
    np.testing.assert_array_equal(spec.physics_targets, t0)


def test_objective_whitened_equals_obs_after_whitening():
    spec, truth = l96_spec(k=8, t_steps=3, seed=4)
    rng = np.random.default_rng(5)
    for _ in range(3):
        x = truth + rng.normal(size=truth.shape)
        xi = np.asarray(whiten(x.reshape(-1), spec.whitening))
        f_w, _ = da.objective_whitened(xi, spec)
        f_o = da.objective_obs_value(
            np.asarray(spec.whitening.inverse @ xi), spec)
        assert f_w == pytest.approx(f_o, rel=1e-8)
        # value equality against the raw objective at the same x
        f_raw = da.objective_obs_value(x.reshape(-1), spec)
        assert f_w == pytest.approx(f_raw, rel=1e-6, abs=1e-8)


def test_objective_whitened_gradient():
    spec, truth = l96_spec(k=8, t_steps=3, seed=6)
    rng = np.random.default_rng(7)
    xi0 = np.asarray(whiten((truth + rng.normal(size=truth.shape)).reshape(-1),
                            spec.whitening))
    _, g = da.objective_whitened(xi0, spec)

    def value_only(z):
        return da.objective_whitened(z, spec)[0]

    g_fd = finite_difference_gradient(value_only, xi0, h=1e-6)
    assert relative_gradient_error(g, g_fd) < 1e-5


def test_identity_whitening_matches_raw_objective():
    spec, truth = l96_spec(k=8, t_steps=2, seed=8, with_whitening=False)
    from invda.observation import WhiteningTransform
    d = truth.size
    spec.whitening = WhiteningTransform("full", np.eye(d), np.eye(d), 1e-6, 2)
    rng = np.random.default_rng(9)
    x = truth + rng.normal(size=truth.shape)
    f_w, g_w = da.objective_whitened(x.reshape(-1), spec)
    f_o, g_o = da.objective_obs(x.reshape(-1), spec)
    assert f_w == pytest.approx(f_o, rel=1e-12)
    np.testing.assert_allclose(g_w, g_o, rtol=1e-10)


# ---------------------------------------------------------------------------
# L-BFGS
# ---------------------------------------------------------------------------

def test_lbfgs_convex_quadratic_40d():
    rng = np.random.default_rng(10)
    q, _ = np.linalg.qr(rng.normal(size=(40, 40)))
    h = (q * np.linspace(1.0, 20.0, 40)) @ q.T
    b = rng.normal(size=40)

    def f_g(x):
        return 0.5 * float(x @ h @ x) - float(b @ x), h @ x - b

    res = da.lbfgs_minimize(f_g, np.zeros(40), max_steps=60, grad_tol=1e-8)
    assert res.converged
    assert res.accepted <= 60
    assert res.final_grad_norm < 1e-8
    x_star = np.linalg.solve(h, b)
    np.testing.assert_allclose(res.x, x_star, atol=1e-6)


def test_lbfgs_rosenbrock():
    def f_g(z):
        x, y = z
        f = (1 - x) ** 2 + 100 * (y - x * x) ** 2
        g = np.array([-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)])
        return f, g

    res = da.lbfgs_minimize(f_g, np.array([-1.2, 1.0]), max_steps=100)
    assert res.f < 1e-8
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-3)


def test_lbfgs_trace_non_increasing():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(20, 10))

    def f_g(x):
        r = a @ x - 1.0
        return float(r @ r), 2.0 * a.T @ r

    res = da.lbfgs_minimize(f_g, rng.normal(size=10), max_steps=50)
    diffs = np.diff(res.trace)
    assert np.all(diffs <= 1e-15)


def test_lbfgs_immediate_convergence_at_minimum():
    def f_g(x):
        return float(x @ x), 2.0 * x

    res = da.lbfgs_minimize(f_g, np.zeros(5), max_steps=10)
    assert res.converged
    assert res.accepted == 0
    assert res.trace == [0.0]


def test_lbfgs_budget_accounting():
    def f_g(x):
        return float(np.sum(np.cos(x))), -np.sin(x)

    res = da.lbfgs_minimize(f_g, np.linspace(0.1, 2.0, 6), max_steps=7)
    assert res.accepted <= 7
    assert len(res.trace) == res.accepted + 1
    assert res.eval_bundles >= res.accepted + 1


def test_lbfgs_nonfinite_initial_objective():
    def f_g(x):
        return float("nan"), x

    with pytest.raises(da.NonFiniteObjective):
        da.lbfgs_minimize(f_g, np.ones(3), max_steps=5)


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------

def _trained_toy_model(spec, params, op, seed=20):
    cfg = neural.lorenz96_config(k=params.k, stride=4, window=4, base_channels=8)
    data = neural.generate_training_set(neural.LORENZ96, params, op, 32, seed,
                                        window=4, spinup=500)
    model = neural.build_network(cfg, seed=seed)
    neural.set_input_normalization(model, data["obs"])
    neural.train(model, data, data, neural.TrainConfig(epochs=3, seed=seed))
    return model


def test_assimilate_observation_method():
    spec, truth = l96_spec(k=8, t_steps=3, seed=12)
    rng = np.random.default_rng(13)
    init = truth + rng.normal(size=truth.shape)
    res = da.assimilate(spec, "observation", init, (0, 40), init_scheme="baseline")
    assert res.method == "observation"
    stages = {row[1] for row in res.rows}
    assert stages == {"observation"}
    assert res.rows[0][2] > res.rows[-1][2]  # objective decreased
    assert res.accepted_steps <= 40
    assert len(res.rows) == res.accepted_steps + 1
    # observation-space trace equals the optimized trace in this method
    for row in res.rows:
        assert row[2] == row[3]


def test_assimilate_hybrid_stage_structure():
    spec, truth = l96_spec(k=8, t_steps=3, seed=14)
    params = spec.dyn_params
    model = _trained_toy_model(spec, params, spec.obs_op)
    spec.inverse_model = model
    rng = np.random.default_rng(15)
    init = truth + rng.normal(size=truth.shape)

    res = da.assimilate(spec, "hybrid", init, (5, 10), init_scheme="inverse")
    stages = [row[1] for row in res.rows]
    assert stages[0] == "physics"
    assert "observation" in stages
    switch = stages.index("observation")
    assert all(s == "physics" for s in stages[:switch])
    assert all(s == "observation" for s in stages[switch:])
    # steps are contiguous and the obs-space objective is recorded everywhere
    assert [row[0] for row in res.rows] == list(range(len(res.rows)))
    for row in res.rows:
        assert np.isfinite(row[3])


def test_hybrid_with_zero_physics_budget_equals_observation_method():
    spec, truth = l96_spec(k=8, t_steps=3, seed=16)
    rng = np.random.default_rng(17)
    init = truth + rng.normal(size=truth.shape)
    res_h = da.assimilate(spec, "hybrid", init, (0, 25))
    res_o = da.assimilate(spec, "observation", init, (0, 25))
    np.testing.assert_array_equal(res_h.x0_opt, res_o.x0_opt)
    assert res_h.rows == res_o.rows


def test_assimilate_from_truth_terminates_immediately():
    spec, truth = l96_spec(k=8, t_steps=3, seed=18)
    res = da.assimilate(spec, "observation", truth, (0, 50))
    assert res.accepted_steps == 0
    assert res.converged
    assert res.rows[0][2] == pytest.approx(0.0, abs=1e-18)


def test_budget_sums():
    # paper budget conventions: 500 = 100 + 400 and 1000 = 100 + 900
    assert sum((100, 400)) == 500
    assert sum((100, 900)) == 1000
