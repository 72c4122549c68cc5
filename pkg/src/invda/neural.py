"""Fully-convolutional inverse observation operators.

Architecture pattern (channels-last, kernel extent 3 per axis, zero-padded
time, periodic space):

  * Lorenz96: (10, 10, 1) -> conv 128 -> [up, conv 64] -> [up, conv 32]
    -> conv 16 -> conv 1 -> (10, 40, 1)
  * Kolmogorov: (10, 4, 4, 2) -> conv 64 -> [up, conv]* halving channels
    per upsample -> conv 2 -> (10, N, N, 2)

Every convolution except the output layer is followed by batch
normalization and SiLU.  Observations are standardized by climatological
statistics stored with the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kolmogorov as kflow
from . import lorenz96 as l96
from .core import ops
from .core.container import (atomic_write, read_metadata, read_named_tensors,
                             write_metadata, write_named_tensors, write_tensor,
                             read_tensor)
from .core.ops import RunningStats
from .core.tape import GradientTape, Var, backward
from .observation import ObservationOp, observe_window

LORENZ96 = "lorenz96"
KOLMOGOROV = "kolmogorov"


class TrainingError(RuntimeError):
    """Non-finite loss or invalid training input."""


@dataclass(frozen=True)
class LayerSpec:
    out_channels: int
    upsample: bool
    activated: bool


@dataclass(frozen=True)
class InverseModelConfig:
    """Window geometry plus the convolutional layer list."""

    kind: str
    window: int
    coarse: tuple        # observed spatial extents
    full: tuple          # state spatial extents
    channels: int        # physical channels (1 or 2)
    layers: tuple

    def obs_shape(self) -> tuple:
        return (self.window,) + self.coarse + (self.channels,)

    def out_shape(self) -> tuple:
        return (self.window,) + self.full + (self.channels,)

    def space_ndim(self) -> int:
        return len(self.full)

    def validate(self):
        extents = list(self.coarse)
        for spec in self.layers:
            if spec.upsample:
                extents = [2 * e for e in extents]
        if tuple(extents) != self.full:
            raise ValueError(f"upsampling reaches {tuple(extents)}, state needs {self.full}")
        if self.layers[-1].out_channels != self.channels:
            raise ValueError("final layer must emit the physical channels")


def lorenz96_config(k: int = 40, stride: int = 4, window: int = 10,
                    base_channels: int = 128) -> InverseModelConfig:
    n_up = int(round(math.log2(stride)))
    if 2 ** n_up != stride:
        raise ValueError("stride must be a power of two")
    layers = [LayerSpec(base_channels, False, True)]
    ch = base_channels
    for _ in range(n_up):
        ch //= 2
        layers.append(LayerSpec(ch, True, True))
    layers.append(LayerSpec(ch // 2, False, True))
    layers.append(LayerSpec(1, False, False))
    cfg = InverseModelConfig(LORENZ96, window, (k // stride,), (k,), 1, tuple(layers))
    cfg.validate()
    return cfg


def kolmogorov_config(n: int = 64, stride: int = 16, window: int = 10,
                      base_channels: int = 64) -> InverseModelConfig:
    n_up = int(round(math.log2(stride)))
    if 2 ** n_up != stride:
        raise ValueError("stride must be a power of two")
    layers = [LayerSpec(base_channels, False, True)]
    ch = base_channels
    for _ in range(n_up):
        ch //= 2
        layers.append(LayerSpec(ch, True, True))
    layers.append(LayerSpec(2, False, False))
    cfg = InverseModelConfig(KOLMOGOROV, window, (n // stride,) * 2, (n,) * 2, 2,
                             tuple(layers))
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------

@dataclass
class InverseModel:
    """Parameters, batch-norm running statistics and input normalization."""

    config: InverseModelConfig
    params: dict
    running: list
    norm_mean: np.ndarray
    norm_std: np.ndarray
    epochs_trained: int = 0
    final_loss: float = float("nan")

    @property
    def trained(self) -> bool:
        return all(rs.initialized for _, rs in self._bn_layers()) and self.epochs_trained > 0

    def _bn_layers(self):
        for i, spec in enumerate(self.config.layers):
            if spec.activated:
                yield i, self.running[i]


def build_network(config: InverseModelConfig, seed=0) -> InverseModel:
    """Randomly initialized model mapping obs windows to state windows.

    Kernels draw from N(0, 2/fan_in); biases and batch-norm shifts start at
    zero, batch-norm scales at one.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    ksize = (3,) * (1 + config.space_ndim())
    params: dict = {}
    running: list = []
    c_in = config.channels
    for i, spec in enumerate(config.layers):
        shape = ksize + (c_in, spec.out_channels)
        fan_in = int(np.prod(ksize)) * c_in
        params[f"layer{i}.kernel"] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        params[f"layer{i}.bias"] = np.zeros(spec.out_channels)
        if spec.activated:
            params[f"layer{i}.bn_scale"] = np.ones(spec.out_channels)
            params[f"layer{i}.bn_shift"] = np.zeros(spec.out_channels)
            running.append(RunningStats())
        else:
            running.append(None)
        c_in = spec.out_channels
    return InverseModel(config, params, running,
                        norm_mean=np.zeros(config.channels),
                        norm_std=np.ones(config.channels))


def set_input_normalization(model: InverseModel, obs_samples: np.ndarray) -> None:
    """Standardize inputs by per-channel statistics of the training windows."""
    c = model.config.channels
    flat = obs_samples.reshape(-1, c)
    model.norm_mean = flat.mean(axis=0)
    model.norm_std = np.maximum(flat.std(axis=0), 1e-8)


def forward(model: InverseModel, obs_batch, mode: str, params: dict | None = None,
            update_stats: bool = True):
    """Forward pass on a batch ``(B, W, space..., C)``.

    ``params`` may carry tape Vars for training; otherwise the stored
    arrays are used.
    """
    p = model.params if params is None else params
    cfg = model.config
    x = ops.mul(ops.sub(obs_batch, model.norm_mean), 1.0 / model.norm_std)
    space_axes = tuple(range(2, 2 + cfg.space_ndim()))
    for i, spec in enumerate(cfg.layers):
        if spec.upsample:
            for ax in space_axes:
                x = ops.upsample2(x, ax)
        x = ops.conv_periodic(x, p[f"layer{i}.kernel"], p[f"layer{i}.bias"])
        if spec.activated:
            x = ops.batch_norm(x, p[f"layer{i}.bn_scale"], p[f"layer{i}.bn_shift"],
                               model.running[i], mode, update=update_stats)
            x = ops.silu(x)
    return x


def output_to_states(config: InverseModelConfig, out: np.ndarray) -> np.ndarray:
    """Window of network outputs -> array of physics states (W, state...)."""
    out = np.asarray(out, dtype=np.float64)
    if config.kind == LORENZ96:
        return out[..., 0]                                  # (W, K)
    return np.ascontiguousarray(np.moveaxis(out, -1, -3))   # (W, 2, N, N)


def invert_trajectory(model: InverseModel, obs_window) -> np.ndarray:
    """Inference-mode inversion of one observation window -> state window."""
    if not model.trained:
        raise TrainingError("model has no trained running statistics")
    obs_window = np.asarray(ops.value_of(obs_window), dtype=np.float64)
    if obs_window.shape != model.config.obs_shape():
        raise ValueError(f"observation window must be {model.config.obs_shape()}, "
                         f"got {obs_window.shape}")
    out = forward(model, obs_window[None], "infer")
    return output_to_states(model.config, np.asarray(ops.value_of(out))[0])


def inverse_initialization(model: InverseModel, obs_window) -> np.ndarray:
    """First state of the inverted trajectory."""
    return invert_trajectory(model, obs_window)[0]


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

def _window_targets_lorenz96(params: l96.L96Params, n: int, seed, window: int,
                             spinup_steps: int):
    x0 = l96.sample_stationary(params, seed, n_samples=n, spinup_steps=spinup_steps)
    traj = l96.integrate(x0, params, window - 1)       # (W, n, K)
    targets = np.moveaxis(traj, 0, 1)[..., None]       # (n, W, K, 1)
    return targets


def _window_targets_kolmogorov(params: kflow.KolmogorovParams, n: int, seed,
                               window: int, spinup_snapshots: int):
    u = kflow.sample_stationary(params, seed, n_samples=n,
                                spinup_snapshots=spinup_snapshots)
    states = [u]
    for _ in range(window - 1):
        states.append(kflow.ns_snapshot_step(states[-1], params))
    traj = np.stack(states, axis=1)                    # (n, W, 2, N, N)
    return np.ascontiguousarray(np.moveaxis(traj, 2, -1))  # (n, W, N, N, 2)


def generate_training_set(kind: str, dyn_params, obs_op: ObservationOp, n: int,
                          seed, window: int = 10, spinup: int | None = None,
                          max_resample_rounds: int = 4):
    """Pairs of (observed window, full-state window), channels-last.

    Targets are the exact simulated states; observations are their strided
    subsamples, so ``observe(target) == obs`` holds by construction.
    Diverged members are resampled with a derived seed (count logged in the
    returned metadata).
    """
    if n < 1:
        raise ValueError("need at least one trajectory")
    resampled = 0
    root = seed if isinstance(seed, np.random.SeedSequence) \
        else np.random.SeedSequence(seed)
    streams = iter(root.spawn(max_resample_rounds + 1))

    def attempt(count, stream):
        if kind == LORENZ96:
            sp = 1000 if spinup is None else spinup
            return _window_targets_lorenz96(dyn_params, count, stream, window, sp)
        if kind == KOLMOGOROV:
            sp = 60 if spinup is None else spinup
            return _window_targets_kolmogorov(dyn_params, count, stream, window, sp)
        raise ValueError(f"unknown model kind {kind!r}")

    try:
        targets = attempt(n, next(streams))
    except (l96.DivergenceError, kflow.StabilityError):
        # isolate bad members one by one (rare path)
        targets = None
    if targets is None:
        rows = []
        for i in range(n):
            for stream in root.spawn(n)[i].spawn(max_resample_rounds):
                try:
                    rows.append(attempt(1, stream)[0])
                    break
                except (l96.DivergenceError, kflow.StabilityError):
                    resampled += 1
            else:
                raise TrainingError("persistent solver divergence during data generation")
        targets = np.stack(rows)

    if kind == LORENZ96:
        (s,) = obs_op.strides
        observations = targets[:, :, ::s, :]
    else:
        s0, s1 = obs_op.strides
        observations = targets[:, :, ::s0, ::s1, :]
    return {"obs": np.ascontiguousarray(observations),
            "targets": targets,
            "resampled": resampled}


def save_dataset(path, dataset) -> None:
    """Count header followed by interleaved (obs, target) tensor records."""
    import struct

    obs, targets = dataset["obs"], dataset["targets"]

    def writer(f):
        f.write(struct.pack("<Q", obs.shape[0]))
        for i in range(obs.shape[0]):
            write_tensor(f, obs[i])
            write_tensor(f, targets[i])

    atomic_write(path, writer)


def load_dataset(path):
    import struct

    with open(path, "rb") as f:
        (count,) = struct.unpack("<Q", f.read(8))
        obs, targets = [], []
        for _ in range(count):
            obs.append(read_tensor(f).data)
            targets.append(read_tensor(f).data)
    return {"obs": np.stack(obs), "targets": np.stack(targets), "resampled": 0}


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

def mse_loss(output, target):
    """Mean of squared differences over all elements."""
    return ops.mse(output, target)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place."""
    state.t += 1
    t = state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        params[name] -= lr * mhat / (np.sqrt(vhat) + eps)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("training hyperparameters must be positive")


def evaluate_loss(model, dataset, batch: int = 32) -> float:
    """Inference-mode MSE over a dataset."""
    obs, targets = dataset["obs"], dataset["targets"]
    mode = "infer" if all(rs is None or rs.initialized for rs in model.running) \
        else "train"
    total = 0.0
    for lo in range(0, len(obs), batch):
        hi = min(len(obs), lo + batch)
        out = forward(model, obs[lo:hi], mode, update_stats=False)
        diff = np.asarray(ops.value_of(out)) - targets[lo:hi]
        total += float(np.sum(diff * diff))
    return total / targets.size


def train(model: InverseModel, train_data, val_data, cfg: TrainConfig):
    """Adam training over seeded shuffled mini-batches.

    Returns per-epoch history rows ``(epoch, train_loss, val_loss)`` with an
    initial evaluation at epoch 0; ``epochs=0`` leaves the model unchanged.
    """
    obs, targets = train_data["obs"], train_data["targets"]
    if len(obs) == 0:
        raise TrainingError("empty training dataset")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    history = [(0, evaluate_loss(model, train_data), evaluate_loss(model, val_data))]
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(len(obs))
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, len(perm), cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            tape = GradientTape()
            pvars = {name: tape.leaf(arr) for name, arr in model.params.items()}
            out = forward(model, obs[idx], "train", params=pvars)
            loss = mse_loss(out, targets[idx])
            loss_val = float(ops.value_of(loss))
            if not np.isfinite(loss_val):
                raise TrainingError(
                    f"non-finite loss {loss_val} at epoch {epoch}, batch {n_batches}")
            grads = backward(tape, loss)
            adam_step(model.params, dict(zip(pvars.keys(), grads)), state,
                      lr=cfg.learning_rate)
            epoch_loss += loss_val
            n_batches += 1
        val_loss = evaluate_loss(model, val_data)
        history.append((epoch, epoch_loss / max(n_batches, 1), val_loss))
        model.epochs_trained += 1
        model.final_loss = val_loss
    return history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _config_to_dict(cfg: InverseModelConfig) -> dict:
    return {"kind": cfg.kind, "window": cfg.window, "coarse": list(cfg.coarse),
            "full": list(cfg.full), "channels": cfg.channels,
            "layers": [[s.out_channels, s.upsample, s.activated] for s in cfg.layers]}


def _config_from_dict(d: dict) -> InverseModelConfig:
    layers = tuple(LayerSpec(int(c), bool(u), bool(a)) for c, u, a in d["layers"])
    return InverseModelConfig(d["kind"], int(d["window"]), tuple(d["coarse"]),
                              tuple(d["full"]), int(d["channels"]), layers)


def save_checkpoint(path, model: InverseModel) -> None:
    tensors = dict(model.params)
    for i, rs in enumerate(model.running):
        if rs is not None and rs.initialized:
            tensors[f"layer{i}.bn_mean"] = rs.mean
            tensors[f"layer{i}.bn_var"] = rs.var
    tensors["norm.mean"] = model.norm_mean
    tensors["norm.std"] = model.norm_std

    def writer(f):
        write_metadata(f, {"config": _config_to_dict(model.config),
                           "epochs_trained": model.epochs_trained,
                           "final_loss": model.final_loss})
        write_named_tensors(f, tensors)

    atomic_write(path, writer)


class CheckpointError(IOError):
    """Corrupt checkpoint or config mismatch."""


def load_checkpoint(path, expected_config: InverseModelConfig | None = None
                    ) -> InverseModel:
    with open(path, "rb") as f:
        meta = read_metadata(f)
        tensors = {k: v.numpy() for k, v in read_named_tensors(f).items()}
    cfg = _config_from_dict(meta["config"])
    if expected_config is not None and cfg != expected_config:
        raise CheckpointError(f"checkpoint config {cfg} does not match expected "
                              f"{expected_config}")
    model = build_network(cfg, seed=0)
    for name in model.params:
        if name not in tensors:
            raise CheckpointError(f"missing tensor {name!r}")
        if tensors[name].shape != model.params[name].shape:
            raise CheckpointError(f"shape mismatch for {name!r}")
        model.params[name] = tensors[name]
    for i, rs in enumerate(model.running):
        if rs is not None and f"layer{i}.bn_mean" in tensors:
            rs.mean = tensors[f"layer{i}.bn_mean"]
            rs.var = tensors[f"layer{i}.bn_var"]
            rs.initialized = True
    model.norm_mean = tensors["norm.mean"]
    model.norm_std = tensors["norm.std"]
    model.epochs_trained = int(meta["epochs_trained"])
    model.final_loss = float(meta["final_loss"])
    return model
