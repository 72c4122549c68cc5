"""Assimilation objectives, L-BFGS, and the optimization drivers.

Three objective functions over an assimilation window of ``T`` snapshot
steps (states ``x_0 .. x_T``):

  * observation space:  sum_t ||H(x_t) - y_t||^2
  * physics space:      sum_t ||x_t - target_t||^2 with targets produced by
    the inverse observation operator once, before optimization
  * whitened observation space: the observation objective in the variables
    xi = C^{-1/2} x

The drivers run L-BFGS (two-loop recursion, strong-Wolfe line search) either
purely in whitened observation space or in the hybrid order: physics space
first, then whitened refinement.  Traces record both the optimized objective
and the observation-space objective along the whole path.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import kolmogorov as kflow
from . import lorenz96 as l96
from . import neural
from .core import ops
from .core.tape import GradientTape, backward
from .observation import (ObservationOp, WhiteningTransform, averaging_init,
                          interpolation_init, observe, unwhiten, whiten)

GRAD_TOL = 1e-10
WOLFE_C1 = 1e-4
WOLFE_C2 = 0.9
MAX_TRIALS = 20


@dataclass
class ObjectiveSpec:
    """Everything one assimilation window needs.

    ``observations`` holds the full window ``(T+1, obs...)``; the inverse
    model consumes its earliest ``window`` slices.
    """

    kind: str                      # neural.LORENZ96 | neural.KOLMOGOROV
    dyn_params: object
    obs_op: ObservationOp
    observations: np.ndarray
    inverse_model: neural.InverseModel | None = None
    whitening: WhiteningTransform | None = None
    physics_targets: np.ndarray | None = field(default=None, repr=False)

    @property
    def window_steps(self) -> int:
        return self.observations.shape[0] - 1

    def state_shape(self) -> tuple:
        if self.kind == neural.LORENZ96:
            return (self.dyn_params.k,)
        return (2, self.dyn_params.n, self.dyn_params.n)

    def ensure_targets(self) -> np.ndarray:
        """Invert the observation window once and cache the result."""
        if self.physics_targets is None:
            if self.inverse_model is None:
                raise ValueError("physics-space objective requires an inverse model")
            w = self.inverse_model.config.window
            self.physics_targets = neural.invert_trajectory(
                self.inverse_model, self.observations[:w])
        return self.physics_targets


def _unflatten(x_flat, spec: ObjectiveSpec):
    return np.asarray(x_flat, dtype=np.float64).reshape(spec.state_shape())


def _rollout_obs_residual(x0_var, spec: ObjectiveSpec):
    """Taped observation-space objective given a leaf state Var."""
    t_steps = spec.window_steps
    y = spec.observations
    if spec.kind == neural.LORENZ96:
        traj = l96.integrate(x0_var, spec.dyn_params, t_steps)  # Var (T+1, K)
        (s,) = spec.obs_op.strides
        pred = ops.subsample(traj, (s,), (1,))
        return ops.sum_sq(ops.sub(pred, y[:, :, 0]))
    states = kflow.integrate(x0_var, spec.dyn_params, t_steps)
    total = None
    for t, state in enumerate(states):
        resid = ops.sub(observe(state, spec.obs_op), y[t])
        term = ops.sum_sq(resid)
        total = term if total is None else ops.add(total, term)
    return total


def _rollout_physics_residual(x0_var, spec: ObjectiveSpec):
    targets = spec.ensure_targets()
    w = targets.shape[0]
    if spec.kind == neural.LORENZ96:
        traj = l96.integrate(x0_var, spec.dyn_params, spec.window_steps)
        pred = ops.slice_leading(traj, w)
        return ops.sum_sq(ops.sub(pred, targets))
    states = kflow.integrate(x0_var, spec.dyn_params, spec.window_steps)
    total = None
    for t in range(w):
        term = ops.sum_sq(ops.sub(states[t], targets[t]))
        total = term if total is None else ops.add(total, term)
    return total


def objective_obs(x0_flat, spec: ObjectiveSpec):
    """Observation-space objective value and gradient at a flat state."""
    tape = GradientTape()
    xv = tape.leaf(_unflatten(x0_flat, spec))
    loss = _rollout_obs_residual(xv, spec)
    value = float(ops.value_of(loss))
    (g,) = backward(tape, loss)
    return value, g.reshape(-1)


def objective_obs_value(x0_flat, spec: ObjectiveSpec) -> float:
    """Forward-only observation-space objective (no tape)."""
    x0 = _unflatten(x0_flat, spec)
    t_steps = spec.window_steps
    y = spec.observations
    if spec.kind == neural.LORENZ96:
        traj = l96.integrate(x0, spec.dyn_params, t_steps)
        (s,) = spec.obs_op.strides
        return float(np.sum((traj[:, ::s] - y[:, :, 0]) ** 2))
    states = kflow.integrate(x0, spec.dyn_params, t_steps)
    total = 0.0
    for t, state in enumerate(states):
        resid = np.asarray(ops.value_of(observe(state, spec.obs_op))) - y[t]
        total += float(np.sum(resid * resid))
    return total


def objective_physics(x0_flat, spec: ObjectiveSpec):
    """Physics-space objective value and gradient at a flat state."""
    tape = GradientTape()
    xv = tape.leaf(_unflatten(x0_flat, spec))
    loss = _rollout_physics_residual(xv, spec)
    value = float(ops.value_of(loss))
    (g,) = backward(tape, loss)
    return value, g.reshape(-1)


def objective_whitened(xi_flat, spec: ObjectiveSpec):
    """Whitened observation-space objective at flat whitened variables."""
    if spec.whitening is None:
        raise ValueError("whitened objective requires a fitted transform")
    tape = GradientTape()
    xiv = tape.leaf(np.asarray(xi_flat, dtype=np.float64).reshape(-1))
    x_flat = unwhiten(xiv, spec.whitening)
    x_state = ops.reshape(x_flat, spec.state_shape())
    loss = _rollout_obs_residual(x_state, spec)
    value = float(ops.value_of(loss))
    (g,) = backward(tape, loss)
    return value, g.reshape(-1)


# ---------------------------------------------------------------------------
# L-BFGS with strong-Wolfe line search
# ---------------------------------------------------------------------------

class NonFiniteObjective(RuntimeError):
    """Objective returned NaN/Inf at the current iterate."""


@dataclass
class LbfgsResult:
    x: np.ndarray                 # best-seen iterate
    f: float                      # objective at the best-seen iterate
    trace: list                   # objective at x0 and every accepted step
    accepted: int
    eval_bundles: int
    converged: bool
    line_search_failed: bool
    final_grad_norm: float = float("inf")  # inf-norm at the terminal iterate


def _cubic_zoom_step(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi):
    d1 = d_lo + d_hi - 3.0 * (f_lo - f_hi) / (a_lo - a_hi)
    disc = d1 * d1 - d_lo * d_hi
    if disc < 0:
        return None
    d2 = np.sign(a_hi - a_lo) * np.sqrt(disc)
    denom = d_hi - d_lo + 2.0 * d2
    if denom == 0:
        return None
    a = a_hi - (a_hi - a_lo) * (d_hi + d2 - d1) / denom
    lo, hi = min(a_lo, a_hi), max(a_lo, a_hi)
    margin = 0.1 * (hi - lo)
    if not np.isfinite(a) or a < lo + margin or a > hi - margin:
        return None
    return a


def _wolfe_search(f_g, x, f0, g0, direction, alpha0, budget):
    """Strong-Wolfe line search (bracket + zoom with cubic interpolation).

    Returns (alpha, f, g, evals) or (None, ..., evals) on failure; at most
    ``budget`` objective evaluations.
    """
    dphi0 = float(np.dot(g0, direction))
    if dphi0 >= 0:
        return None, None, None, 0
    evals = 0

    def phi(a):
        nonlocal evals
        f, g = f_g(x + a * direction)
        evals += 1
        return f, g, float(np.dot(g, direction))

    def zoom(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi, g_lo):
        nonlocal evals
        best = None
        while evals < budget:
            a = _cubic_zoom_step(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi)
            if a is None:
                a = 0.5 * (a_lo + a_hi)
            f, g, d = phi(a)
            if not np.isfinite(f):
                a_hi, f_hi, d_hi = a, f, d
                continue
            if f > f0 + WOLFE_C1 * a * dphi0 or f >= f_lo:
                a_hi, f_hi, d_hi = a, f, d
            else:
                if abs(d) <= -WOLFE_C2 * dphi0:
                    return a, f, g
                if d * (a_hi - a_lo) >= 0:
                    a_hi, f_hi, d_hi = a_lo, f_lo, d_lo
                a_lo, f_lo, d_lo, g_lo = a, f, d, g
                best = (a, f, g)
            if abs(a_hi - a_lo) < 1e-18:
                break
        return best

    a_prev, f_prev, d_prev = 0.0, f0, dphi0
    g_prev = g0
    a = alpha0
    first = True
    while evals < budget:
        f, g, d = phi(a)
        if not np.isfinite(f):
            # shrink into the finite region
            a *= 0.5
            first = False
            if a < 1e-18:
                break
            continue
        if f > f0 + WOLFE_C1 * a * dphi0 or (not first and f >= f_prev):
            out = zoom(a_prev, f_prev, d_prev, a, f, d, g_prev)
            return (out[0], out[1], out[2], evals) if out else (None, None, None, evals)
        if abs(d) <= -WOLFE_C2 * dphi0:
            return a, f, g, evals
        if d >= 0:
            out = zoom(a, f, d, a_prev, f_prev, d_prev, g)
            return (out[0], out[1], out[2], evals) if out else (None, None, None, evals)
        a_prev, f_prev, d_prev, g_prev = a, f, d, g
        a = min(2.0 * a, 1e8)
        first = False
    return None, None, None, evals


def lbfgs_minimize(f_g, x0, max_steps: int, history: int = 10,
                   grad_tol: float = GRAD_TOL, on_accept=None) -> LbfgsResult:
    """Two-loop-recursion L-BFGS returning the best-seen iterate.

    ``f_g(x) -> (value, gradient)``; ``on_accept(x, f)`` is invoked for the
    initial point and after every accepted step.
    """
    if max_steps < 0:
        raise ValueError("max_steps must be >= 0")
    x = np.asarray(x0, dtype=np.float64).reshape(-1).copy()
    f, g = f_g(x)
    if not np.isfinite(f):
        raise NonFiniteObjective(f"objective is {f} at the initial point")
    evals = 1
    trace = [f]
    if on_accept is not None:
        on_accept(x, f)
    best_x, best_f = x.copy(), f

    s_hist: list = []
    y_hist: list = []
    rho_hist: list = []
    accepted = 0
    converged = False
    ls_failed = False

    for it in range(max_steps):
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if gnorm < grad_tol:
            converged = True
            break

        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * np.dot(s, q)
            alphas.append(a)
            q -= a * y
        if y_hist:
            gamma = np.dot(s_hist[-1], y_hist[-1]) / np.dot(y_hist[-1], y_hist[-1])
            q *= gamma
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * np.dot(y, q)
            q += s * (a - b)
        direction = -q
        if np.dot(direction, g) >= 0:
            direction = -g

        alpha0 = 1.0 if accepted > 0 else min(1.0, 1.0 / max(np.linalg.norm(g), 1e-12))
        a, f_new, g_new, used = _wolfe_search(f_g, x, f, g, direction, alpha0,
                                              MAX_TRIALS)
        evals += used
        if a is None and not np.array_equal(direction, -g):
            # one steepest-descent fallback before giving up
            direction = -g
            a, f_new, g_new, used = _wolfe_search(f_g, x, f, g, direction,
                                                  min(1.0, 1.0 / max(np.linalg.norm(g), 1e-12)),
                                                  MAX_TRIALS)
            evals += used
        if a is None:
            ls_failed = True
            break

        s = a * direction
        y = g_new - g
        sy = float(np.dot(s, y))
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > history:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)

        x = x + s
        f, g = f_new, g_new
        accepted += 1
        trace.append(f)
        if on_accept is not None:
            on_accept(x, f)
        if f < best_f:
            best_f, best_x = f, x.copy()

    return LbfgsResult(best_x, best_f, trace, accepted, evals, converged, ls_failed,
                       final_grad_norm=float(np.max(np.abs(g))) if g.size else 0.0)


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------

@dataclass
class AssimilationResult:
    """Optimized initial state plus per-step traces and counters."""

    x0_opt: np.ndarray
    rows: list                     # (step, stage, objective_optimized, objective_obs)
    method: str
    init_scheme: str
    accepted_steps: int
    eval_bundles: int
    wall_time: float
    converged: bool
    line_search_failed: bool


def initial_state(spec: ObjectiveSpec, scheme: str, climatology=None) -> np.ndarray:
    """Baseline (averaging / interpolation) or learned-inverse initialization."""
    if scheme == "inverse":
        if spec.inverse_model is None:
            raise ValueError("inverse initialization requires an inverse model")
        w = spec.inverse_model.config.window
        return neural.inverse_initialization(spec.inverse_model, spec.observations[:w])
    if scheme != "baseline":
        raise ValueError(f"unknown initialization scheme {scheme!r}")
    if spec.kind == neural.LORENZ96:
        if climatology is None:
            raise ValueError("averaging initialization requires a climatological mean")
        return averaging_init(spec.observations[0], climatology, spec.obs_op)
    return interpolation_init(spec.observations[0], spec.obs_op)


def assimilate(spec: ObjectiveSpec, method: str, init: np.ndarray,
               budgets, init_scheme: str = "") -> AssimilationResult:
    """Run one assimilation window.

    ``method`` is ``"observation"`` (whitened observation space for the whole
    budget) or ``"hybrid"`` (physics space for ``budgets[0]`` steps, then
    whitened refinement for ``budgets[1]``).  ``budgets`` is ``(physics,
    observation)``; the observation method uses their sum.
    """
    if spec.whitening is None:
        raise ValueError("assimilation requires a fitted whitening transform")
    b_phys, b_obs = int(budgets[0]), int(budgets[1])
    if method == "observation":
        b_phys, b_obs = 0, b_phys + b_obs
    elif method != "hybrid":
        raise ValueError(f"unknown method {method!r}")

    t0 = time.perf_counter()
    rows: list = []
    accepted = 0
    evals = 0
    converged = False
    ls_failed = False
    x_flat = np.asarray(init, dtype=np.float64).reshape(-1).copy()

    if b_phys > 0:
        spec.ensure_targets()

        def on_accept_phys(x, f):
            step = len(rows)
            rows.append((step, "physics", f, objective_obs_value(x, spec)))

        res = lbfgs_minimize(lambda z: objective_physics(z, spec), x_flat, b_phys,
                             on_accept=on_accept_phys)
        x_flat = res.x
        accepted += res.accepted
        evals += res.eval_bundles
        ls_failed |= res.line_search_failed

    xi = np.asarray(ops.value_of(whiten(x_flat, spec.whitening)))

    # drop the duplicate initial row when a physics stage already logged it
    first_obs_row_skipped = [b_phys > 0 and len(rows) > 0]

    def on_accept_obs_dedup(z, f):
        if first_obs_row_skipped[0]:
            first_obs_row_skipped[0] = False
            return
        step = len(rows)
        rows.append((step, "observation", f, f))

    res = lbfgs_minimize(lambda z: objective_whitened(z, spec), xi, b_obs,
                         on_accept=on_accept_obs_dedup)
    x_flat = np.asarray(ops.value_of(unwhiten(res.x, spec.whitening)))
    accepted += res.accepted
    evals += res.eval_bundles
    converged = res.converged
    ls_failed |= res.line_search_failed

    return AssimilationResult(
        x0_opt=x_flat.reshape(spec.state_shape()),
        rows=rows,
        method=method,
        init_scheme=init_scheme,
        accepted_steps=accepted,
        eval_bundles=evals,
        wall_time=time.perf_counter() - t0,
        converged=converged,
        line_search_failed=ls_failed,
    )
