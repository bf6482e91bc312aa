"""Mean-field Gaussian variational networks trained by ELBO ascent.

Weights get a N(0, prior_sigma^2) prior and a factorised Gaussian posterior
N(mu, softplus(rho)^2); biases and the per-output log noise scale are point
parameters. One reparameterised weight sample is drawn per minibatch and the
KL term is weighted by batch_size / n_total.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .activations import lwta_forward, winner_probabilities  # noqa: F401  (re-exported)
from .errors import DataError, NumericalError
from .nn import (
    NetworkConfig,
    _forward,
    _target_scaling,
    backprop,
    forward,
    init_params,
    load_container,
    loss_mse,
    minibatches,
    sample_noise,
    save_container,
)

LOG_2PI = float(np.log(2.0 * np.pi))


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


@dataclass
class VariationalLayer:
    mu: np.ndarray
    rho: np.ndarray
    prior_sigma: float = 1.0

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.rho = np.asarray(self.rho, dtype=float)
        if self.mu.shape != self.rho.shape:
            raise DataError("mu and rho must have the same shape")
        if not self.prior_sigma > 0:
            raise ValueError("prior_sigma must be positive")

    @property
    def sigma(self) -> np.ndarray:
        return softplus(self.rho)

    def copy(self) -> "VariationalLayer":
        return VariationalLayer(self.mu.copy(), self.rho.copy(), self.prior_sigma)


@dataclass
class BayesianParams:
    layers: list
    biases: list
    log_noise: np.ndarray
    variant: str = "relu"
    y_mean: np.ndarray | None = None
    y_scale: np.ndarray | None = None

    def copy(self) -> "BayesianParams":
        return BayesianParams(
            [l.copy() for l in self.layers], [b.copy() for b in self.biases], self.log_noise.copy(),
            self.variant,
            None if self.y_mean is None else self.y_mean.copy(),
            None if self.y_scale is None else self.y_scale.copy(),
        )

    @property
    def mean_weights(self) -> list:
        return [l.mu for l in self.layers]


@dataclass
class ElboEntry:
    nll: float
    kl: float
    elbo: float


@dataclass
class ElboReport:
    nll: list = field(default_factory=list)
    kl: list = field(default_factory=list)
    elbo: list = field(default_factory=list)
    valid_loss: list = field(default_factory=list)
    selected_epoch: int = 0
    seed: int = 0

    def append(self, e: ElboEntry) -> None:
        self.nll.append(e.nll)
        self.kl.append(e.kl)
        self.elbo.append(e.elbo)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) if not isinstance(getattr(self, k), list)
                else [float(v) for v in getattr(self, k)]
                for k in ("nll", "kl", "elbo", "valid_loss", "selected_epoch", "seed")}


def sample_weights(layer: VariationalLayer, rng=None, eps=None) -> np.ndarray:
    """Reparameterised draw ``mu + sigma * eps`` with standard normal eps."""
    if eps is None:
        eps = rng.standard_normal(layer.mu.shape)
    return layer.mu + layer.sigma * eps


def kl_gaussian(layer: VariationalLayer) -> float:
    """KL(q || prior) summed over entries; always >= 0."""
    s = layer.sigma
    sp = layer.prior_sigma
    kl = np.log(sp / s) + (s ** 2 + layer.mu ** 2) / (2.0 * sp ** 2) - 0.5
    return float(np.sum(kl))


def init_bayesian(config: NetworkConfig, variant: str, rng=None) -> BayesianParams:
    point = init_params(config, rng)
    layers = [VariationalLayer(w, np.full(w.shape, config.init_rho), config.prior_sigma)
              for w in point.weights]
    return BayesianParams(layers, point.biases, np.zeros(config.layer_widths[-1]), variant)


def sample_eps(params: BayesianParams, rng) -> list:
    return [rng.standard_normal(l.mu.shape) for l in params.layers]


def elbo(config: NetworkConfig, params: BayesianParams, X, Y, n_total: int, rng=None, eps=None,
         noise=None, tau: float | None = None, return_grads: bool = False):
    """Minibatch ELBO = -NLL(one weight sample) - (batch / n_total) * KL.

    The likelihood is Gaussian with a learned per-output noise scale
    ``exp(log_noise)``. With ``return_grads`` the gradients of **-ELBO** with
    respect to every mu, rho, bias and ``log_noise`` are returned as well
    (for fixed ``eps`` and ``noise``).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    B = X.shape[0]
    if n_total < B:
        raise ValueError("n_total must be at least the batch size")
    if eps is None:
        eps = sample_eps(params, rng)
    if noise is None:
        noise = sample_noise(config, B, rng)
    tau = config.tau_start if tau is None else tau
    weights = [sample_weights(l, eps=e) for l, e in zip(params.layers, eps)]
    pred, cache = _forward(config, weights, params.biases, X, "train", noise, tau)
    var = np.exp(2.0 * params.log_noise)
    resid = pred - Y
    nll = 0.5 * float(np.sum(resid ** 2 / var + LOG_2PI + 2.0 * params.log_noise))
    kl = sum(kl_gaussian(l) for l in params.layers)
    frac = B / n_total
    entry = ElboEntry(nll=nll, kl=kl, elbo=-nll - frac * kl)
    if not np.isfinite(entry.elbo):
        raise NumericalError("non-finite ELBO")
    if not return_grads:
        return entry
    dW, db = backprop(config, weights, cache, resid / var)
    d_mu, d_rho = [], []
    for l, layer in enumerate(params.layers):
        s = layer.sigma
        sp2 = layer.prior_sigma ** 2
        d_mu.append(dW[l] + frac * layer.mu / sp2)
        d_sigma = dW[l] * eps[l] + frac * (-1.0 / s + s / sp2)
        d_rho.append(d_sigma * sigmoid(layer.rho))
    d_log_noise = np.sum(1.0 - resid ** 2 / var, axis=0)
    return entry, {"mu": d_mu, "rho": d_rho, "b": db, "log_noise": d_log_noise}


def predict_bayesian(config: NetworkConfig, params: BayesianParams, X) -> np.ndarray:
    """Posterior-mean weights, argmax LWTA, original target units."""
    out, _ = _forward(config, params.mean_weights, params.biases, np.atleast_2d(X), "infer", None, None)
    if params.y_scale is not None:
        out = out * params.y_scale + params.y_mean
    return out


def hidden_activations(config: NetworkConfig, params: BayesianParams, X) -> list:
    """Inference-mode hidden layer outputs (for structural checks)."""
    _, cache = _forward(config, params.mean_weights, params.biases, np.atleast_2d(X), "infer", None, None)
    return cache["a"][1:]


def train_bayesian(config: NetworkConfig, X, Y, X_valid=None, Y_valid=None, variant: str = "relu"):
    """ELBO ascent with minibatch Adam; returns ``(BayesianParams, ElboReport)``.

    ``variant`` ("relu" or "lwta") overrides ``config.activation``. The
    returned parameters are from the epoch with the lowest validation MSE of
    the posterior-mean network (training MSE without validation data).
    ``config.momentum`` serves as Adam's first-moment decay.
    """
    if variant not in ("relu", "lwta"):
        raise ValueError(f"unknown variant {variant!r}")
    config = replace(config, activation=variant, bayesian=True)
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n = len(X)
    rng = np.random.default_rng(config.seed)
    params = init_bayesian(config, variant, rng)
    y_mean, y_scale = _target_scaling(Y, config.scale_targets)
    params.y_mean, params.y_scale = y_mean, y_scale
    Yt = (Y - y_mean) / y_scale
    if X_valid is not None:
        Xv = np.asarray(X_valid, dtype=float)
        Yv = (np.asarray(Y_valid, dtype=float) - y_mean) / y_scale
    else:
        Xv, Yv = X, Yt

    state = _Adam(params, beta1=config.momentum)
    report = ElboReport(seed=config.seed)
    best, best_loss = params.copy(), np.inf
    for epoch in range(1, config.epochs + 1):
        tau = config.tau(epoch)
        lr = config.learning_rate / (1.0 + config.lr_decay * (epoch - 1))
        tot = ElboEntry(0.0, 0.0, 0.0)
        for idx in minibatches(n, config.batch_size, rng):
            entry, grads = elbo(config, params, X[idx], Yt[idx], n, rng=rng, tau=tau, return_grads=True)
            tot.nll += entry.nll
            tot.elbo += entry.elbo
            state.step(params, grads, lr)
        tot.kl = sum(kl_gaussian(l) for l in params.layers)
        vloss = loss_mse(_mean_forward(config, params, Xv), Yv)
        if not (np.isfinite(tot.elbo) and np.isfinite(vloss)):
            raise NumericalError(f"ELBO training diverged at epoch {epoch}")
        report.append(tot)
        report.valid_loss.append(vloss)
        if vloss < best_loss:
            best, best_loss = params.copy(), vloss
            report.selected_epoch = epoch
    return best, report


class _Adam:
    """Adam on -ELBO. Its per-coordinate scaling makes the step size
    insensitive to the 1 / noise-variance factor in the likelihood gradient,
    which plain SGD turns into an exploding effective learning rate as the
    learned noise shrinks."""

    keys = ("mu", "rho", "b", "log_noise")

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: [np.zeros_like(a) for a in _group(params, k)] for k in self.keys}
        self.v = {k: [np.zeros_like(a) for a in _group(params, k)] for k in self.keys}

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k in self.keys:
            g_list = grads[k] if k != "log_noise" else [grads[k]]
            for arr, m, v, g in zip(_group(params, k), self.m[k], self.v[k], g_list):
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                arr -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _group(params: BayesianParams, key: str) -> list:
    if key == "mu":
        return [l.mu for l in params.layers]
    if key == "rho":
        return [l.rho for l in params.layers]
    if key == "log_noise":
        return [params.log_noise]
    return params.biases


def _mean_forward(config, params, X):
    out, _ = _forward(config, params.mean_weights, params.biases, X, "infer", None, None)
    return out


def save_bayesian(path, config: NetworkConfig, params: BayesianParams) -> None:
    arrays = {"log_noise": params.log_noise}
    for l, (layer, b) in enumerate(zip(params.layers, params.biases)):
        arrays[f"mu{l}"] = layer.mu
        arrays[f"rho{l}"] = layer.rho
        arrays[f"b{l}"] = b
    if params.y_mean is not None:
        arrays["y_mean"] = params.y_mean
        arrays["y_scale"] = params.y_scale
    save_container(path, arrays, {"variant": f"bayesian-{params.variant}", "version": 1,
                                  "config": config.to_dict()})


def load_bayesian(path) -> tuple[NetworkConfig, BayesianParams]:
    manifest, arrays = load_container(path)
    config = NetworkConfig.from_dict(manifest["config"])
    n = len(config.layer_widths) - 1
    layers = [VariationalLayer(arrays[f"mu{l}"], arrays[f"rho{l}"], config.prior_sigma) for l in range(n)]
    variant = manifest["variant"].split("-", 1)[1]
    return config, BayesianParams(layers, [arrays[f"b{l}"] for l in range(n)], arrays["log_noise"],
                                  variant, arrays.get("y_mean"), arrays.get("y_scale"))


__all__ = [
    "VariationalLayer", "BayesianParams", "ElboEntry", "ElboReport", "sample_weights",
    "kl_gaussian", "elbo", "lwta_forward", "winner_probabilities", "train_bayesian",
    "predict_bayesian", "hidden_activations", "save_bayesian", "load_bayesian", "forward",
]
