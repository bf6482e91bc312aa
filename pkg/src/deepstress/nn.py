"""Feed-forward regression networks written directly in numpy.

Layers compute ``x @ W + b`` with ``W`` of shape (in, out). Hidden layers
apply ReLU or LWTA followed by inverted dropout; the output layer is linear.
Training minimises the mean squared error with minibatch SGD (optional
momentum) and keeps the epoch with the lowest validation loss.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .activations import (
    dropout_mask,
    gumbel,
    lwta_backward,
    lwta_forward,
    relu,
    relu_backward,
)
from .balance import BankState, RwaMethod, TargetVector, project_car
from .errors import DataError, NumericalError
from .panel import NEURAL_TARGETS, SupervisedPanel

MAX_HIDDEN = 5


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture and optimiser settings.

    ``layer_widths`` runs from the input dimension to the output dimension.
    The architecture grid uses 1-5 hidden layers; zero hidden layers (a
    plain linear model) is accepted for diagnostics.
    """

    layer_widths: tuple
    activation: str = "relu"
    block_size: int = 2
    dropout_rate: float = 0.0
    bayesian: bool = False
    seed: int = 0
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 100
    lr_decay: float = 0.0
    scale_targets: bool = True
    # variational / LWTA settings (ignored by point networks where irrelevant)
    prior_sigma: float = 1.0
    init_rho: float = -5.0
    tau_start: float = 0.67
    tau_end: float = 0.1

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ValueError("layer_widths needs positive input and output widths")
        if len(widths) - 2 > MAX_HIDDEN:
            raise ValueError(f"at most {MAX_HIDDEN} hidden layers")
        if self.activation not in ("relu", "lwta"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.activation == "lwta":
            if self.block_size < 2:
                raise ValueError("LWTA blocks need at least 2 units")
            if any(w % self.block_size for w in widths[1:-1]):
                raise ValueError("hidden widths must be multiples of block_size")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")

    @property
    def n_hidden(self) -> int:
        return len(self.layer_widths) - 2

    @property
    def n_parameters(self) -> int:
        w = self.layer_widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))

    def tau(self, epoch: int) -> float:
        """Linearly annealed LWTA temperature for a 1-based epoch."""
        if self.epochs <= 1:
            return self.tau_end
        frac = (epoch - 1) / (self.epochs - 1)
        return self.tau_start + frac * (self.tau_end - self.tau_start)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_widths"] = list(self.layer_widths)
        return d

    @classmethod
    def from_dict(cls, d) -> "NetworkConfig":
        return cls(**dict(d))


@dataclass
class NetworkParams:
    weights: list
    biases: list
    y_mean: np.ndarray | None = None
    y_scale: np.ndarray | None = None

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases],
            None if self.y_mean is None else self.y_mean.copy(),
            None if self.y_scale is None else self.y_scale.copy(),
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    valid_loss: list = field(default_factory=list)
    selected_epoch: int = 0
    seed: int = 0

    def to_dict(self) -> dict:
        return {"train_loss": [float(v) for v in self.train_loss],
                "valid_loss": [float(v) for v in self.valid_loss],
                "selected_epoch": self.selected_epoch, "seed": self.seed}


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def init_params(config: NetworkConfig, rng=None) -> NetworkParams:
    """Fan-in scaled uniform weights, zero biases."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    w = config.layer_widths
    weights, biases = [], []
    for i in range(len(w) - 1):
        limit = np.sqrt(6.0 / w[i])
        weights.append(rng.uniform(-limit, limit, size=(w[i], w[i + 1])))
        biases.append(np.zeros(w[i + 1]))
    return NetworkParams(weights, biases)


def dense_forward(W, b, x):
    W = np.asarray(W, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != W.shape[0] or np.shape(b) != (W.shape[1],):
        raise DataError(f"shape mismatch: x {x.shape}, W {W.shape}, b {np.shape(b)}")
    return x @ W + b


def sample_noise(config: NetworkConfig, n: int, rng) -> list:
    """Per-sample dropout masks and LWTA Gumbel noise for every hidden layer."""
    noise = []
    for width in config.layer_widths[1:-1]:
        layer = {"drop": dropout_mask((n, width), config.dropout_rate, rng)}
        if config.activation == "lwta":
            layer["gumbel"] = gumbel((n, width), rng)
        noise.append(layer)
    return noise


def _forward(config: NetworkConfig, weights, biases, X, mode: str, noise, tau):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != config.layer_widths[0]:
        raise DataError(f"input has shape {X.shape}, expected (n, {config.layer_widths[0]})")
    cache = {"a": [X], "z": [], "xi": [], "drop": [], "mode": mode, "tau": tau}
    a = X
    for l in range(config.n_hidden):
        z = dense_forward(weights[l], biases[l], a)
        if config.activation == "relu":
            h, xi = relu(z), None
        else:
            g = None if noise is None else noise[l].get("gumbel")
            h, xi = lwta_forward(z, config.block_size, tau, mode=mode, noise=g)
        drop = None
        if mode == "train" and config.dropout_rate > 0:
            drop = noise[l]["drop"]
            h = h * drop
        cache["z"].append(z)
        cache["xi"].append(xi)
        cache["drop"].append(drop)
        cache["a"].append(h)
        a = h
    out = dense_forward(weights[-1], biases[-1], a)
    return out, cache


def forward(config: NetworkConfig, params: NetworkParams, x, mode: str = "infer", rng=None,
            noise=None, tau: float | None = None):
    """Raw network output (before any target de-scaling).

    In train mode dropout masks and Gumbel noise come from ``noise`` or are
    drawn from ``rng``.
    """
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if mode == "train" and noise is None:
        noise = sample_noise(config, X.shape[0], rng if rng is not None else np.random.default_rng())
    tau = config.tau_start if tau is None else tau
    out, _ = _forward(config, params.weights, params.biases, X, mode, noise, tau)
    return out[0] if single else out


def backprop(config: NetworkConfig, weights, cache, dout):
    """Gradients of a scalar loss given its gradient ``dout`` at the output."""
    n_layers = len(weights)
    dW, db = [None] * n_layers, [None] * n_layers
    delta = dout
    for l in range(n_layers - 1, -1, -1):
        a_in = cache["a"][l]
        dW[l] = a_in.T @ delta
        db[l] = delta.sum(axis=0)
        if not (np.all(np.isfinite(dW[l])) and np.all(np.isfinite(db[l]))):
            raise NumericalError(f"non-finite gradient in layer {l}")
        if l == 0:
            break
        da = delta @ weights[l].T
        h = l - 1
        if cache["drop"][h] is not None:
            da = da * cache["drop"][h]
        z = cache["z"][h]
        if config.activation == "relu":
            delta = relu_backward(da, z)
        else:
            delta = lwta_backward(da, z, cache["xi"][h], config.block_size, cache["tau"], cache["mode"])
    return dW, db


def loss_mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise DataError(f"pred {pred.shape} and target {target.shape} differ in shape")
    return float(np.mean((pred - target) ** 2))


def backward(config: NetworkConfig, params: NetworkParams, X, Y, noise=None,
             mode: str | None = None, tau: float | None = None):
    """MSE loss and its exact gradients for one batch.

    With ``noise`` given the pass runs in train mode with those dropout
    masks / Gumbel draws held fixed; otherwise it is the deterministic
    inference network. Returns ``(loss, (dW, db))``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[0] == 0:
        raise DataError("empty batch")
    mode = mode or ("train" if noise is not None else "infer")
    tau = config.tau_start if tau is None else tau
    pred, cache = _forward(config, params.weights, params.biases, X, mode, noise, tau)
    resid = pred - Y
    loss = float(np.mean(resid ** 2))
    dout = 2.0 * resid / resid.size
    return loss, backprop(config, params.weights, cache, dout)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _target_scaling(Y, enabled: bool):
    if not enabled:
        return np.zeros(Y.shape[1]), np.ones(Y.shape[1])
    mean = Y.mean(axis=0)
    sd = Y.std(axis=0)
    return mean, np.where(sd > 0, sd, 1.0)


def predict(config: NetworkConfig, params: NetworkParams, X) -> np.ndarray:
    """Inference-mode prediction in the original target units."""
    out = forward(config, params, np.atleast_2d(X), mode="infer")
    if params.y_scale is not None:
        out = out * params.y_scale + params.y_mean
    return out


def minibatches(n: int, batch_size: int, rng):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def train(config: NetworkConfig, X, Y, X_valid=None, Y_valid=None):
    """Minibatch SGD on the MSE; returns ``(params, TrainReport)``.

    The returned parameters are those of the epoch with the lowest
    validation loss (training loss when no validation data is given).
    Everything is deterministic given ``config.seed``.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.shape[1] != config.layer_widths[-1]:
        raise DataError(f"targets have {Y.shape[1]} columns, network outputs {config.layer_widths[-1]}")
    rng = np.random.default_rng(config.seed)
    params = init_params(config, rng)
    y_mean, y_scale = _target_scaling(Y, config.scale_targets)
    params.y_mean, params.y_scale = y_mean, y_scale
    Yt = (Y - y_mean) / y_scale
    has_valid = X_valid is not None
    if has_valid:
        Xv = np.asarray(X_valid, dtype=float)
        Yv = (np.asarray(Y_valid, dtype=float) - y_mean) / y_scale
    vel_w = [np.zeros_like(w) for w in params.weights]
    vel_b = [np.zeros_like(b) for b in params.biases]
    report = TrainReport(seed=config.seed)
    best, best_loss = params.copy(), np.inf
    for epoch in range(1, config.epochs + 1):
        tau = config.tau(epoch)
        lr = config.learning_rate / (1.0 + config.lr_decay * (epoch - 1))
        total = 0.0
        for idx in minibatches(len(X), config.batch_size, rng):
            noise = sample_noise(config, len(idx), rng)
            loss, (dW, db) = backward(config, params, X[idx], Yt[idx], noise, "train", tau)
            total += loss * len(idx)
            for l in range(len(params.weights)):
                vel_w[l] = config.momentum * vel_w[l] - lr * dW[l]
                vel_b[l] = config.momentum * vel_b[l] - lr * db[l]
                params.weights[l] += vel_w[l]
                params.biases[l] += vel_b[l]
        train_loss = total / len(X)
        if has_valid:
            vloss = loss_mse(forward(config, params, Xv, "infer"), Yv)
        else:
            vloss = loss_mse(forward(config, params, X, "infer"), Yt)
        if not (np.isfinite(train_loss) and np.isfinite(vloss)):
            raise NumericalError(f"training diverged at epoch {epoch}")
        report.train_loss.append(train_loss)
        report.valid_loss.append(vloss)
        if vloss < best_loss:
            best, best_loss = params.copy(), vloss
            report.selected_epoch = epoch
    return best, report


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

def entity_folds(bank_ids: Sequence, folds: int, seed: int = 0) -> list[set]:
    entities = sorted(set(bank_ids), key=str)
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if len(entities) < folds:
        raise DataError(f"{len(entities)} entities cannot fill {folds} folds (a fold would be empty)")
    order = np.random.default_rng(seed).permutation(len(entities))
    return [set(entities[i] for i in part) for part in np.array_split(order, folds)]


def clip_growths(T: np.ndarray, floor: float = -0.99) -> np.ndarray:
    """Keep predicted growth rates (first four columns) above -1."""
    T = np.array(T, dtype=float)
    T[:, :4] = np.maximum(T[:, :4], floor)
    return T


def car_rmse(panel: SupervisedPanel, targets: np.ndarray, method: RwaMethod) -> float:
    """End-to-end CAR RMSE of predicted 9-vectors against ``panel.car_next``."""
    kind = {RwaMethod.NEURAL_GROWTH: "growth", RwaMethod.SATELLITE_DENSITY: "density",
            RwaMethod.CONSTANT: "none"}[method]
    tv = TargetVector.from_array(clip_growths(targets), kind)
    _, _, car = project_car(BankState.from_array(panel.states), method, tv)
    return float(np.sqrt(np.mean((car - panel.car_next) ** 2)))


def _default_fit(config: NetworkConfig, panel: SupervisedPanel):
    params, _ = train(config, panel.X, panel.targets(NEURAL_TARGETS))
    return params


def _default_score(config: NetworkConfig, model, panel: SupervisedPanel) -> float:
    return car_rmse(panel, predict(config, model, panel.X), RwaMethod.NEURAL_GROWTH)


def cross_validate(configs: Sequence[NetworkConfig], panel: SupervisedPanel, folds: int = 5,
                   seed: int = 0, fit_fn: Callable | None = None, score_fn: Callable | None = None,
                   return_scores: bool = False):
    """Pick the config with the lowest mean held-out CAR RMSE.

    Folds partition entities. ``fit_fn(config, train_panel) -> model`` and
    ``score_fn(config, model, heldout_panel) -> rmse`` default to point
    network training and NeuralGrowth CAR projection. Ties go to the config
    with fewer parameters, then to the earlier one.
    """
    configs = list(configs)
    if not configs:
        raise ValueError("no candidate configs")
    fit_fn = fit_fn or _default_fit
    score_fn = score_fn or _default_score
    if len(configs) == 1 and not return_scores:
        return configs[0]
    parts = entity_folds(panel.bank_ids, folds, seed)
    scores = []
    for cfg in configs:
        fold_scores = []
        for held in parts:
            mask = panel.entity_mask(held)
            model = fit_fn(cfg, panel.subset(~mask))
            fold_scores.append(score_fn(cfg, model, panel.subset(mask)))
        scores.append(float(np.mean(fold_scores)))
    ranked = sorted(range(len(configs)), key=lambda i: (scores[i], configs[i].n_parameters, i))
    best = configs[ranked[0]]
    return (best, scores) if return_scores else best


def architecture_grid(n_inputs: int, n_outputs: int = 9, widths=(32, 64, 128), depths=(1, 2, 3, 4, 5),
                      dropouts=(0.0, 0.2, 0.5), **kwargs) -> list[NetworkConfig]:
    """Default candidate grid: widths x depths x dropout rates."""
    return [
        NetworkConfig((n_inputs,) + (w,) * d + (n_outputs,), dropout_rate=p, **kwargs)
        for d in depths for w in widths for p in dropouts
    ]


# ---------------------------------------------------------------------------
# Binary parameter container
# ---------------------------------------------------------------------------

_MAGIC = b"DSPARAM1"


def save_container(path, arrays: dict, manifest: dict) -> None:
    """Write named float64 arrays plus a JSON manifest.

    Layout: 8-byte magic, little-endian uint64 header length, JSON header
    (manifest, array names, shapes, byte offsets), then the raw
    little-endian float64 payloads in header order.
    """
    names = sorted(arrays)
    entries, offset = [], 0
    blobs = []
    for n in names:
        a = np.ascontiguousarray(arrays[n], dtype="<f8")
        entries.append({"name": n, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"manifest": manifest, "arrays": entries}, sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_container(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise DataError(f"{path} is not a deepstress parameter container")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    base = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        arrays[e["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=start).reshape(
            e["shape"]).copy()
    return header["manifest"], arrays


def save_params(path, config: NetworkConfig, params: NetworkParams) -> None:
    arrays = {}
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"W{l}"] = w
        arrays[f"b{l}"] = b
    if params.y_mean is not None:
        arrays["y_mean"] = params.y_mean
        arrays["y_scale"] = params.y_scale
    save_container(path, arrays, {"variant": "point", "version": 1, "config": config.to_dict()})


def load_params(path) -> tuple[NetworkConfig, NetworkParams]:
    manifest, arrays = load_container(path)
    config = NetworkConfig.from_dict(manifest["config"])
    n = len(config.layer_widths) - 1
    params = NetworkParams([arrays[f"W{l}"] for l in range(n)], [arrays[f"b{l}"] for l in range(n)],
                           arrays.get("y_mean"), arrays.get("y_scale"))
    return config, params


def with_seed(config: NetworkConfig, seed: int) -> NetworkConfig:
    return replace(config, seed=seed)
