"""Relative-error metric, forecast scoring, and the four-way comparison.

The error between two states is their L1 distance divided by ``gamma``, the
mean L1 distance between independent stationary states, so an error of
order one means no better than a random draw from the attractor.

The suite runs both optimization methods (observation space, hybrid) from
both initializations (baseline, inverse) over a set of test windows and
summarizes the mean error of the first forecast state relative to the
baseline method.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import assimilation as da
from . import kolmogorov as kflow
from . import lorenz96 as l96
from . import neural
from .observation import ObservationOp, observe_window

COMBINATIONS = (("observation", "baseline"), ("observation", "inverse"),
                ("hybrid", "baseline"), ("hybrid", "inverse"))


class MetricError(ValueError):
    """Degenerate normalization (gamma <= 0)."""


def sample_states(kind, dyn_params, n, seed, spinup=None):
    if kind == neural.LORENZ96:
        sp = 1000 if spinup is None else spinup
        return l96.sample_stationary(dyn_params, seed, n_samples=n, spinup_steps=sp)
    sp = 60 if spinup is None else spinup
    return kflow.sample_stationary(dyn_params, seed, n_samples=n,
                                   spinup_snapshots=sp)


def estimate_gamma(kind, dyn_params, n_pairs: int, seed, spinup=None) -> float:
    """Mean L1 distance between independent stationary state pairs."""
    if n_pairs < 100:
        raise ValueError("need at least 100 pairs for a stable estimate")
    states = sample_states(kind, dyn_params, 2 * n_pairs, seed, spinup)
    flat = states.reshape(2 * n_pairs, -1)
    dists = np.abs(flat[0::2] - flat[1::2]).sum(axis=1)
    gamma = float(dists.mean())
    if gamma <= 0.0:
        raise MetricError("independent states coincide: gamma would be zero")
    return gamma


def relative_error(z1, z2, gamma: float) -> float:
    """L1 distance scaled by the independent-state mean distance."""
    if gamma <= 0.0:
        raise MetricError("gamma must be positive")
    a = np.asarray(z1, dtype=np.float64).reshape(-1)
    b = np.asarray(z2, dtype=np.float64).reshape(-1)
    return float(np.abs(a - b).sum() / gamma)


def rollout_trajectory(kind, dyn_params, x0, n_steps):
    if kind == neural.LORENZ96:
        return l96.integrate(x0, dyn_params, n_steps)
    return np.stack(kflow.integrate(x0, dyn_params, n_steps))


@dataclass
class ForecastScore:
    """Per-step relative errors over window plus forecast horizon."""

    sample: int
    method: str
    init_scheme: str
    window_steps: int
    errors: np.ndarray            # (window_steps + horizon + 1,)

    def first_forecast_error(self) -> float:
        return float(self.errors[self.window_steps + 1])


def forecast_and_score(kind, dyn_params, x0_opt, truth_x0, window_steps: int,
                       horizon: int, gamma: float, sample: int = 0,
                       method: str = "", init_scheme: str = "",
                       truth_traj=None) -> ForecastScore:
    """Roll out optimized and true initial states, score each step."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    n = window_steps + horizon
    opt_traj = rollout_trajectory(kind, dyn_params, x0_opt, n)
    if truth_traj is None:
        truth_traj = rollout_trajectory(kind, dyn_params, truth_x0, n)
    errors = np.array([relative_error(opt_traj[t], truth_traj[t], gamma)
                       for t in range(n + 1)])
    return ForecastScore(sample, method, init_scheme, window_steps, errors)


def make_test_windows(kind, dyn_params, obs_op: ObservationOp, n_test: int,
                      window_steps: int, seed, spinup=None):
    """Independent truth windows with their observation trajectories."""
    x0s = sample_states(kind, dyn_params, n_test, seed, spinup)
    windows = []
    for i in range(n_test):
        traj = rollout_trajectory(kind, dyn_params, x0s[i], window_steps)
        windows.append({"truth_x0": x0s[i], "truth_traj": traj,
                        "observations": observe_window(traj, obs_op)})
    return windows


def run_combination(kind, dyn_params, obs_op, windows, method: str,
                    init_scheme: str, budgets, whitening, inverse_model=None,
                    climatology=None):
    """Assimilate every window with one (method, init) combination."""
    results = []
    for window in windows:
        spec = da.ObjectiveSpec(kind, dyn_params, obs_op, window["observations"],
                                inverse_model=inverse_model, whitening=whitening)
        init = da.initial_state(spec, init_scheme, climatology=climatology)
        results.append(da.assimilate(spec, method, init, budgets,
                                     init_scheme=init_scheme))
    return results


def score_combination(kind, dyn_params, windows, results, horizon: int,
                      gamma: float, method: str, init_scheme: str):
    scores = []
    for i, (window, result) in enumerate(zip(windows, results)):
        n = window["truth_traj"].shape[0] - 1 + horizon
        truth_traj = rollout_trajectory(kind, dyn_params, window["truth_x0"], n)
        scores.append(forecast_and_score(
            kind, dyn_params, result.x0_opt, window["truth_x0"],
            window["truth_traj"].shape[0] - 1, horizon, gamma, sample=i,
            method=method, init_scheme=init_scheme, truth_traj=truth_traj))
    return scores


def summarize(scores, reference=("observation", "baseline")) -> dict:
    """Mean per-step curves and the first-forecast-state table.

    The table cell of the reference combination is exactly 1 by
    construction; every other cell is its mean error divided by the
    reference mean error.
    """
    by_combo: dict = {}
    for s in scores:
        by_combo.setdefault((s.method, s.init_scheme), []).append(s)
    curves = {}
    first_errors = {}
    for combo, items in by_combo.items():
        stacked = np.stack([s.errors for s in items])
        curves[combo] = stacked.mean(axis=0)
        first_errors[combo] = float(np.mean([s.first_forecast_error() for s in items]))
    ref = first_errors[reference]
    table = {combo: err / ref for combo, err in first_errors.items()}
    table[reference] = 1.0
    return {"curves": curves, "first_forecast_mean": first_errors,
            "table_relative_to_baseline": table}


def evaluate_suite(kind, dyn_params, obs_op, inverse_model, whitening,
                   climatology, budgets, n_test: int, window_steps: int,
                   horizon: int, gamma_pairs: int, seed) -> dict:
    """Run all four (method, init) combinations end to end."""
    root = seed if isinstance(seed, np.random.SeedSequence) \
        else np.random.SeedSequence(seed)
    s_windows, s_gamma = root.spawn(2)
    windows = make_test_windows(kind, dyn_params, obs_op, n_test, window_steps,
                                s_windows)
    gamma = estimate_gamma(kind, dyn_params, gamma_pairs, s_gamma)
    scores = []
    results = {}
    for method, init_scheme in COMBINATIONS:
        combo_results = run_combination(kind, dyn_params, obs_op, windows, method,
                                        init_scheme, budgets, whitening,
                                        inverse_model=inverse_model,
                                        climatology=climatology)
        results[(method, init_scheme)] = combo_results
        scores.extend(score_combination(kind, dyn_params, windows, combo_results,
                                        horizon, gamma, method, init_scheme))
    summary = summarize(scores)
    summary["gamma"] = gamma
    return {"windows": windows, "results": results, "scores": scores,
            "summary": summary}
