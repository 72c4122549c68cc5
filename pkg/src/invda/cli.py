"""Command-line entry point.

    invda gen-data      --config C [--seed N]
    invda train         --config C [--seed N]
    invda fit-whitening --config C [--seed N]
    invda assimilate    --config C --method observation|hybrid
                        --init baseline|inverse [--seed N]
    invda evaluate      --config C [--seed N]
    invda report        --config C [--seed N]

Every command validates its inputs up front, writes the resolved config into
the output directory, and writes outputs atomically.  Reruns with the same
config and seed reproduce every output file byte for byte (timings go to
stderr only).
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import time

import numpy as np

from . import assimilation as da
from . import evaluation as ev
from . import kolmogorov as kflow
from . import neural
from .config import ConfigError, ExperimentConfig, config_hash, load_config, write_resolved
from .core.container import atomic_write, load_tensor, save_tensor
from .observation import (climatological_mean, fit_whitening, load_whitening,
                          save_whitening)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_RUNTIME = 4


class MissingArtifact(FileNotFoundError):
    """A required input file from an earlier stage is absent."""


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _require(path: str, hint: str) -> str:
    if not os.path.exists(path):
        raise MissingArtifact(f"missing {path!r}: run `invda {hint}` first")
    return path


def _write_csv(path: str, header: list, rows: list) -> None:
    def writer(f):
        f.write((",".join(header) + "\n").encode())
        for row in rows:
            f.write((",".join(repr(v) if isinstance(v, float) else str(v)
                             for v in row) + "\n").encode())

    atomic_write(path, writer)


def _stationary_pool(cfg: ExperimentConfig):
    return ev.sample_states(cfg.model, cfg.dyn_params(), cfg.stationary_samples,
                             cfg.stream_seed("stationary_pool"), spinup=cfg.spinup)


def _test_windows(cfg: ExperimentConfig):
    return ev.make_test_windows(cfg.model, cfg.dyn_params(), cfg.obs_op(),
                                cfg.n_test, cfg.window_steps,
                                cfg.stream_seed("test_windows"), spinup=cfg.spinup)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig) -> None:
    """Training/validation datasets plus the stationary sample pool."""
    if cfg.train_trajectories < 2:
        raise ConfigError("empty dataset: need at least 2 trajectories for a split")
    os.makedirs(cfg.path("data"), exist_ok=True)
    n_total = cfg.train_trajectories
    n_val = max(1, int(round(n_total * cfg.val_fraction)))
    n_train = n_total - n_val

    t0 = time.perf_counter()
    train_set = neural.generate_training_set(
        cfg.model, cfg.dyn_params(), cfg.obs_op(), n_train,
        cfg.stream_seed("train_data"), window=cfg.net_window, spinup=cfg.spinup)
    val_set = neural.generate_training_set(
        cfg.model, cfg.dyn_params(), cfg.obs_op(), n_val,
        cfg.stream_seed("val_data"), window=cfg.net_window, spinup=cfg.spinup)
    neural.save_dataset(cfg.train_data_path(), train_set)
    neural.save_dataset(cfg.val_data_path(), val_set)
    if train_set["resampled"] or val_set["resampled"]:
        _log(f"resampled {train_set['resampled'] + val_set['resampled']} diverged members")

    pool = _stationary_pool(cfg)
    save_tensor(cfg.pool_path(), pool)
    save_tensor(cfg.climatology_path(), climatological_mean(pool))
    _log(f"gen-data: {n_train}+{n_val} windows, {cfg.stationary_samples} pool "
         f"samples in {time.perf_counter() - t0:.1f}s")


def cmd_train(cfg: ExperimentConfig) -> None:
    """Train the inverse observation operator; checkpoint + loss history."""
    _require(cfg.train_data_path(), "gen-data")
    _require(cfg.val_data_path(), "gen-data")
    train_set = neural.load_dataset(cfg.train_data_path())
    val_set = neural.load_dataset(cfg.val_data_path())

    model = neural.build_network(cfg.network_config(),
                                 seed=cfg.stream_seed("model_init"))
    neural.set_input_normalization(model, train_set["obs"])
    t0 = time.perf_counter()
    history = neural.train(model, train_set, val_set,
                           neural.TrainConfig(learning_rate=cfg.learning_rate,
                                              batch_size=cfg.batch_size,
                                              epochs=cfg.epochs,
                                              seed=cfg.stream_seed("training")))
    neural.save_checkpoint(cfg.checkpoint_path(), model)
    _write_csv(cfg.loss_history_path(), ["epoch", "train_loss", "val_loss"],
               [(e, float(tr), float(vl)) for e, tr, vl in history])
    _log(f"train: {cfg.epochs} epochs in {time.perf_counter() - t0:.1f}s, "
         f"final val loss {history[-1][2]:.6g}")


def cmd_fit_whitening(cfg: ExperimentConfig) -> None:
    """Fit and persist the whitening transform from the stationary pool."""
    _require(cfg.pool_path(), "gen-data")
    pool = load_tensor(cfg.pool_path()).numpy()
    if pool.shape[0] < 2:
        raise ConfigError("insufficient samples for a covariance fit")
    w = fit_whitening(pool, floor=cfg.whitening_floor, kind=cfg.whitening_kind,
                      model=cfg.model)
    save_whitening(cfg.whitening_path(), w)
    _log(f"fit-whitening: kind={w.kind}, dim={w.dim}, n={w.n_samples}")


def _load_artifacts(cfg: ExperimentConfig, need_model: bool):
    whitening = load_whitening(_require(cfg.whitening_path(), "fit-whitening"))
    climatology = load_tensor(_require(cfg.climatology_path(), "gen-data")).numpy()
    model = None
    if need_model:
        model = neural.load_checkpoint(_require(cfg.checkpoint_path(), "train"),
                                       expected_config=cfg.network_config())
    return whitening, climatology, model


def cmd_assimilate(cfg: ExperimentConfig, method: str, init_scheme: str) -> None:
    """Assimilate every test window with one (method, init) combination."""
    if method not in ("observation", "hybrid"):
        raise ConfigError(f"method must be observation or hybrid, got {method!r}")
    if init_scheme not in ("baseline", "inverse"):
        raise ConfigError(f"init must be baseline or inverse, got {init_scheme!r}")
    need_model = init_scheme == "inverse" or method == "hybrid"
    whitening, climatology, model = _load_artifacts(cfg, need_model)

    out_dir = cfg.assim_dir(method, init_scheme)
    os.makedirs(out_dir, exist_ok=True)
    t0 = time.perf_counter()
    windows = _test_windows(cfg)
    budgets = (cfg.budget_physics, cfg.budget_observation)
    for i, window in enumerate(windows):
        spec = da.ObjectiveSpec(cfg.model, cfg.dyn_params(), cfg.obs_op(),
                                window["observations"], inverse_model=model,
                                whitening=whitening)
        init = da.initial_state(spec, init_scheme, climatology=climatology)
        result = da.assimilate(spec, method, init, budgets, init_scheme=init_scheme)
        stem = os.path.join(out_dir, f"sample_{i:03d}")
        save_tensor(stem + ".x0.bin", result.x0_opt)
        _write_csv(stem + ".trace.csv",
                   ["step", "stage", "objective_optimized", "objective_obs_space"],
                   result.rows)
        meta = {"method": method, "init": init_scheme, "sample": i,
                "accepted_steps": result.accepted_steps,
                "eval_bundles": result.eval_bundles,
                "converged": result.converged,
                "line_search_failed": result.line_search_failed,
                "budget_physics": budgets[0], "budget_observation": budgets[1]}
        atomic_write(stem + ".meta.json",
                     lambda f, m=meta: f.write(json.dumps(m, sort_keys=True,
                                                          indent=1).encode()))
        _log(f"assimilate[{method}/{init_scheme}] sample {i}: "
             f"{result.accepted_steps} steps, J_obs {result.rows[-1][3]:.4g} "
             f"({result.wall_time:.1f}s)")
    _log(f"assimilate[{method}/{init_scheme}]: {len(windows)} windows in "
         f"{time.perf_counter() - t0:.1f}s")


def cmd_evaluate(cfg: ExperimentConfig) -> None:
    """Score all four combinations; per-sample CSV + normalized summary."""
    for method, init_scheme in ev.COMBINATIONS:
        d = cfg.assim_dir(method, init_scheme)
        for i in range(cfg.n_test):
            _require(os.path.join(d, f"sample_{i:03d}.x0.bin"),
                     f"assimilate --method {method} --init {init_scheme}")
    os.makedirs(cfg.eval_dir(), exist_ok=True)

    windows = _test_windows(cfg)
    gamma = ev.estimate_gamma(cfg.model, cfg.dyn_params(), cfg.gamma_pairs,
                              cfg.stream_seed("gamma"), spinup=cfg.spinup)
    rows = []
    scores = []
    for method, init_scheme in ev.COMBINATIONS:
        d = cfg.assim_dir(method, init_scheme)
        results = []
        for i in range(cfg.n_test):
            x0 = load_tensor(os.path.join(d, f"sample_{i:03d}.x0.bin")).numpy()
            results.append(x0)
        for i, (window, x0) in enumerate(zip(windows, results)):
            score = ev.forecast_and_score(cfg.model, cfg.dyn_params(), x0,
                                          window["truth_x0"], cfg.window_steps,
                                          cfg.horizon, gamma, sample=i,
                                          method=method, init_scheme=init_scheme)
            scores.append(score)
            for t, err in enumerate(score.errors):
                stage = "window" if t <= cfg.window_steps else "forecast"
                rows.append((i, method, init_scheme, t, stage, float(err)))
    _write_csv(cfg.path("eval", "scores.csv"),
               ["sample", "method", "init", "step", "stage", "rel_error"], rows)

    summary = ev.summarize(scores)
    payload = {
        "config_hash": config_hash(cfg),
        "model": cfg.model,
        "gamma": gamma,
        "n_test": cfg.n_test,
        "window_steps": cfg.window_steps,
        "horizon": cfg.horizon,
        "first_forecast_mean": {f"{m}/{i}": v for (m, i), v
                                in summary["first_forecast_mean"].items()},
        "table_relative_to_baseline": {f"{m}/{i}": v for (m, i), v
                                       in summary["table_relative_to_baseline"].items()},
        "mean_error_curves": {f"{m}/{i}": list(map(float, c)) for (m, i), c
                              in summary["curves"].items()},
    }
    atomic_write(cfg.path("eval", "summary.json"),
                 lambda f: f.write(json.dumps(payload, sort_keys=True,
                                              indent=1).encode()))
    table = payload["table_relative_to_baseline"]
    _log("evaluate: " + ", ".join(f"{k}={v:.3f}" for k, v in sorted(table.items())))


def cmd_report(cfg: ExperimentConfig, n_field_samples: int = 2) -> None:
    """Collate evaluation outputs and field snapshots into a plot bundle."""
    _require(cfg.path("eval", "scores.csv"), "evaluate")
    _require(cfg.path("eval", "summary.json"), "evaluate")
    out = cfg.report_dir()
    os.makedirs(out, exist_ok=True)
    files = {}

    for name in ("scores.csv", "summary.json"):
        shutil.copyfile(cfg.path("eval", name), os.path.join(out, name))
        files[name] = name

    # optimization traces for every combination and sample
    for method, init_scheme in ev.COMBINATIONS:
        d = cfg.assim_dir(method, init_scheme)
        for i in range(cfg.n_test):
            src = os.path.join(d, f"sample_{i:03d}.trace.csv")
            _require(src, f"assimilate --method {method} --init {init_scheme}")
            rel = f"trace_{method}_{init_scheme}_{i:03d}.csv"
            shutil.copyfile(src, os.path.join(out, rel))
            files[f"trace/{method}/{init_scheme}/{i}"] = rel

    # field snapshots: truth vs optimized forecasts for a sample subset
    windows = _test_windows(cfg)
    n_show = min(n_field_samples, cfg.n_test)
    snap_steps = [0, cfg.window_steps + 1, cfg.window_steps + cfg.horizon]
    for i in range(n_show):
        window = windows[i]
        truth = ev.rollout_trajectory(cfg.model, cfg.dyn_params(), window["truth_x0"],
                            cfg.window_steps + cfg.horizon)
        rel = f"fields_truth_{i:03d}.bin"
        save_tensor(os.path.join(out, rel), truth[snap_steps])
        files[f"fields/truth/{i}"] = rel
        for method, init_scheme in ev.COMBINATIONS:
            x0 = load_tensor(os.path.join(cfg.assim_dir(method, init_scheme),
                                          f"sample_{i:03d}.x0.bin")).numpy()
            traj = ev.rollout_trajectory(cfg.model, cfg.dyn_params(), x0,
                               cfg.window_steps + cfg.horizon)
            rel = f"fields_{method}_{init_scheme}_{i:03d}.bin"
            save_tensor(os.path.join(out, rel), traj[snap_steps])
            files[f"fields/{method}/{init_scheme}/{i}"] = rel
        if cfg.model == neural.KOLMOGOROV:
            w = kflow.vorticity(truth[snap_steps], cfg.dyn_params())
            rel = f"vorticity_truth_{i:03d}.bin"
            save_tensor(os.path.join(out, rel), w)
            files[f"vorticity/truth/{i}"] = rel
            for method, init_scheme in ev.COMBINATIONS:
                x0 = load_tensor(os.path.join(cfg.assim_dir(method, init_scheme),
                                              f"sample_{i:03d}.x0.bin")).numpy()
                traj = ev.rollout_trajectory(cfg.model, cfg.dyn_params(), x0,
                                   cfg.window_steps + cfg.horizon)
                w = kflow.vorticity(traj[snap_steps], cfg.dyn_params())
                rel = f"vorticity_{method}_{init_scheme}_{i:03d}.bin"
                save_tensor(os.path.join(out, rel), w)
                files[f"vorticity/{method}/{init_scheme}/{i}"] = rel

    manifest = {
        "model": cfg.model,
        "config_hash": config_hash(cfg),
        "window_steps": cfg.window_steps,
        "horizon": cfg.horizon,
        "snapshot_steps": snap_steps,
        "n_test": cfg.n_test,
        "n_field_samples": n_show,
        "observation_stride": cfg.stride,
        "budget_physics": cfg.budget_physics,
        "files": files,
    }
    atomic_write(os.path.join(out, "manifest.json"),
                 lambda f: f.write(json.dumps(manifest, sort_keys=True,
                                              indent=1).encode()))
    _log(f"report: bundle with {len(files)} files at {out}")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="invda",
        description="Variational data assimilation with a learned inverse "
                    "observation operator")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "fit-whitening", "assimilate",
                 "evaluate", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the INI config")
        p.add_argument("--seed", type=int, default=None,
                       help="override [experiment] seed")
        if name == "assimilate":
            p.add_argument("--method", required=True,
                           choices=["observation", "hybrid"])
            p.add_argument("--init", required=True,
                           choices=["baseline", "inverse"])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.validate()
        write_resolved(cfg)
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "fit-whitening":
            cmd_fit_whitening(cfg)
        elif args.command == "assimilate":
            cmd_assimilate(cfg, args.method, args.init)
        elif args.command == "evaluate":
            cmd_evaluate(cfg)
        elif args.command == "report":
            cmd_report(cfg)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except MissingArtifact as exc:
        _log(str(exc))
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - single actionable message
        _log(f"error: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
