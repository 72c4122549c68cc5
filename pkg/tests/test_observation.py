import numpy as np
import pytest

from invda import lorenz96 as l96
from invda import observation as obs
from invda.core import ops


def test_observe_stride_one_identity():
    op = obs.ObservationOp.lorenz96(stride=1)
    x = np.arange(8.0)
    y = np.asarray(obs.observe(x, op))
    np.testing.assert_array_equal(y[:, 0], x)


def test_observe_lorenz96_shapes():
    op = obs.ObservationOp.lorenz96(stride=4)
    x = np.arange(40.0)
    y = np.asarray(obs.observe(x, op))
    assert y.shape == (10, 1)
    np.testing.assert_array_equal(y[:, 0], x[::4])

    traj = np.stack([x + t for t in range(10)])
    window = obs.observe_window(traj, op)
    assert window.shape == (10, 10, 1)


def test_observe_kolmogorov_shapes():
    op = obs.ObservationOp.kolmogorov(stride=16)
    rng = np.random.default_rng(0)
    u = rng.normal(size=(2, 64, 64))
    y = np.asarray(obs.observe(u, op))
    assert y.shape == (4, 4, 2)
    np.testing.assert_array_equal(y[:, :, 0], u[0, ::16, ::16])
    np.testing.assert_array_equal(y[:, :, 1], u[1, ::16, ::16])

    traj = rng.normal(size=(10, 2, 64, 64))
    window = obs.observe_window(traj, op)
    assert window.shape == (10, 4, 4, 2)


def test_averaging_init_identity_when_fully_observed():
    op = obs.ObservationOp.lorenz96(stride=1)
    x = np.arange(6.0)
    y = obs.observe(x, op)
    out = obs.averaging_init(y, np.zeros(6), op)
    np.testing.assert_array_equal(out, x)


def test_averaging_init_observed_points_exact():
    op = obs.ObservationOp.lorenz96(stride=4)
    rng = np.random.default_rng(1)
    x = rng.normal(size=40)
    clim = np.full(40, 2.34)
    out = obs.averaging_init(obs.observe(x, op), clim, op)
    np.testing.assert_array_equal(out[::4], x[::4])
    mask = np.ones(40, dtype=bool)
    mask[::4] = False
    np.testing.assert_array_equal(out[mask], clim[mask])
    # observe(averaging_init(obs)) restricted to observed indices = identity
    np.testing.assert_array_equal(np.asarray(obs.observe(out, op)),
                                  np.asarray(obs.observe(x, op)))


def test_averaging_init_unobserved_matches_stationary_mean():
    p = l96.L96Params()
    samples = l96.sample_stationary(p, seed=2, n_samples=3000)
    clim = obs.climatological_mean(samples)
    # translation symmetry: one scalar mean for every coordinate
    assert np.max(np.abs(clim - clim.mean())) < 0.4
    op = obs.ObservationOp.lorenz96(4)
    out = obs.averaging_init(obs.observe(samples[0], op), clim, op)
    mask = np.ones(40, dtype=bool)
    mask[::4] = False
    np.testing.assert_array_equal(out[mask], clim[mask])


def test_interpolation_init_constant_and_exact_nodes():
    op = obs.ObservationOp.kolmogorov(stride=8)
    const = np.full((4, 4, 2), 3.3)
    out = obs.interpolation_init(const, op)
    assert out.shape == (2, 32, 32)
    np.testing.assert_allclose(out, 3.3, rtol=1e-14)

    rng = np.random.default_rng(3)
    o = rng.normal(size=(4, 4, 2))
    out = obs.interpolation_init(o, op)
    np.testing.assert_allclose(out[0, ::8, ::8], o[:, :, 0], atol=1e-12)
    np.testing.assert_allclose(out[1, ::8, ::8], o[:, :, 1], atol=1e-12)


def test_interpolation_init_low_mode_accuracy():
    # sin(y) observed at stride 16 on a 64 grid reconstructs within 5%
    n, s = 64, 16
    x = 2 * np.pi * np.arange(n) / n
    xx, yy = np.meshgrid(x, x, indexing="ij")
    u = np.stack([np.sin(yy), np.cos(xx)])
    op = obs.ObservationOp.kolmogorov(stride=s)
    observed = np.stack([u[0, ::s, ::s], u[1, ::s, ::s]], axis=-1)
    rec = obs.interpolation_init(observed, op)
    assert np.max(np.abs(rec - u)) < 0.05


def test_interpolation_rejects_1d():
    with pytest.raises(ValueError):
        obs.interpolation_init(np.zeros((10, 1)), obs.ObservationOp.lorenz96(4))


# ---------------------------------------------------------------------------
# whitening
# ---------------------------------------------------------------------------

def test_whitening_identity_covariance():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(20000, 6))
    w = obs.fit_whitening(x)
    assert obs.whitening_identity_error(w) < 1e-8
    np.testing.assert_allclose(w.forward, np.eye(6), atol=0.05)


def test_whitening_diagonal_hand_case():
    # covariance diag(4, 1): forward = diag(1/2, 1)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(200000, 2)) * np.array([2.0, 1.0])
    w = obs.fit_whitening(x)
    np.testing.assert_allclose(w.forward, np.diag([0.5, 1.0]), atol=0.02)
    np.testing.assert_allclose(w.inverse, np.diag([2.0, 1.0]), atol=0.02)


def test_whitening_floor_on_rank_deficient_samples():
    rng = np.random.default_rng(6)
    base = rng.normal(size=(50, 1))
    x = np.hstack([base, 2.0 * base, -base])  # rank one
    w = obs.fit_whitening(x, floor=1e-6)
    assert np.all(np.isfinite(w.forward))
    assert np.all(np.isfinite(w.inverse))
    assert obs.whitening_identity_error(w) < 1e-6
    cov = np.cov(x, rowvar=False)
    eigvals = np.linalg.eigvalsh(w.inverse @ w.inverse)
    assert np.min(eigvals) >= 1e-6 * (1 - 1e-9)
    assert np.min(np.linalg.eigvalsh(cov)) < 1e-6  # floor actually engaged


def test_whiten_round_trip():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(500, 8)) @ rng.normal(size=(8, 8))
    w = obs.fit_whitening(x)
    v = rng.normal(size=8)
    back = np.asarray(obs.unwhiten(obs.whiten(v, w), w))
    np.testing.assert_allclose(back, v, atol=1e-8)


def test_whiten_identity_transform_is_noop():
    w = obs.WhiteningTransform("full", np.eye(5), np.eye(5), 1e-6, 10)
    v = np.arange(5.0)
    np.testing.assert_allclose(np.asarray(obs.whiten(v, w)), v, atol=1e-15)


def test_whitened_lorenz96_covariance_near_identity():
    p = l96.L96Params()
    fit = l96.sample_stationary(p, seed=8, n_samples=10000)
    held = l96.sample_stationary(p, seed=9, n_samples=10000)
    w = obs.fit_whitening(fit, floor=1e-6)
    xi = held @ w.forward  # symmetric matrix
    xi = xi - xi.mean(axis=0)
    cov = xi.T @ xi / (len(xi) - 1)
    off = cov - np.diag(np.diag(cov))
    assert np.max(np.abs(off)) < 0.1
    assert np.max(np.abs(np.diag(cov) - 1.0)) < 0.1


def test_whitening_persistence_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    x = rng.normal(size=(300, 4))
    w = obs.fit_whitening(x, model="lorenz96")
    path = tmp_path / "whitening.bin"
    obs.save_whitening(path, w)
    back = obs.load_whitening(path)
    assert back.kind == w.kind
    assert back.model == "lorenz96"
    assert back.floor == w.floor
    assert back.n_samples == w.n_samples
    np.testing.assert_array_equal(back.forward, w.forward)
    np.testing.assert_array_equal(back.inverse, w.inverse)


def test_fit_whitening_needs_two_samples():
    with pytest.raises(obs.WhiteningError):
        obs.fit_whitening(np.zeros((1, 4)))


def test_diagonal_kind():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(5000, 3)) * np.array([3.0, 1.0, 0.5])
    w = obs.fit_whitening(x, kind="diagonal")
    assert w.kind == "diagonal"
    np.testing.assert_allclose(w.forward, [1 / 3.0, 1.0, 2.0], rtol=0.1)
    v = rng.normal(size=3)
    np.testing.assert_allclose(np.asarray(obs.unwhiten(obs.whiten(v, w), w)), v,
                               atol=1e-12)
