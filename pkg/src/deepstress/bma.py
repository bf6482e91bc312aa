"""Bayesian Model Averaging with Zellner's g-prior.

y and every regressor are mean-centred before any likelihood is evaluated;
the intercept is handled outside the g-prior. Under this convention the
log marginal likelihood of model gamma (up to a model-independent constant) is

    -(N - 1)/2 * log(1 - g/(1+g) * R2_gamma) - k_gamma/2 * log(1 + g)

and the coefficient posterior has mean g/(1+g) * beta_ols and covariance
s2 * g/(1+g) * (1 - g/(1+g) * R2) * (X'X)^-1 with s2 = TSS / (N - 3).

Models are represented internally as integer bitmasks (bit j = regressor j).
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.special import betaln

from .errors import DataError, NumericalError, SingularMatrixError
from .panel import MACRO_NAMES, SATELLITE_TARGETS, TARGET_NAMES, SupervisedPanel, clean_panel_columns

logger = logging.getLogger(__name__)

R2_CLAMP = 1.0 - 1e-12
_SINGULAR_TOL = 1e-10


@dataclass(frozen=True)
class ModelSpec:
    """Inclusion mask over K candidate regressors."""

    mask: tuple

    def __post_init__(self):
        object.__setattr__(self, "mask", tuple(bool(v) for v in self.mask))

    @classmethod
    def null(cls, K: int) -> "ModelSpec":
        return cls((False,) * K)

    @classmethod
    def from_indices(cls, K: int, idx) -> "ModelSpec":
        idx = set(idx)
        return cls(tuple(j in idx for j in range(K)))

    @property
    def K(self) -> int:
        return len(self.mask)

    @property
    def size(self) -> int:
        return sum(self.mask)

    @property
    def indices(self) -> list[int]:
        return [j for j, v in enumerate(self.mask) if v]

    def bitstring(self) -> str:
        return "".join("1" if v else "0" for v in self.mask)


def _indices(model, K: int) -> list[int]:
    if isinstance(model, ModelSpec):
        if model.K != K:
            raise DataError(f"model mask has length {model.K}, design has K={K}")
        return model.indices
    arr = np.asarray(model)
    if arr.dtype == bool:
        if arr.shape != (K,):
            raise DataError(f"model mask has length {arr.shape}, design has K={K}")
        return list(np.flatnonzero(arr))
    return sorted(int(j) for j in arr)


def _mask_indices(m: int, K: int) -> list[int]:
    return [j for j in range(K) if (m >> j) & 1]


def g_value(rule, n_obs: int, K: int) -> float:
    """Numeric g from a rule name (``"uip"``: g = N, ``"fernandez"``: max(N, K^2)) or a number."""
    if isinstance(rule, str):
        if rule == "uip":
            return float(n_obs)
        if rule == "fernandez":
            return float(max(n_obs, K * K))
        raise ValueError(f"unknown g rule {rule!r}")
    g = float(rule)
    if not g > 0:
        raise ValueError("g must be positive")
    return g


# ---------------------------------------------------------------------------
# Single-model quantities
# ---------------------------------------------------------------------------

def ols_fit(X_sub, y, names: Sequence[str] | None = None):
    """Centred OLS of y on the columns of ``X_sub``.

    Returns ``(beta_hat, rss, r2)``; R2 is relative to the centred y. A rank
    deficient design raises :class:`SingularMatrixError` naming the
    dependent columns.
    """
    X = np.asarray(X_sub, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    yc = y - y.mean()
    tss = float(yc @ yc)
    k = X.shape[1]
    if k == 0:
        return np.zeros(0), tss, 0.0
    Xc = X - X.mean(axis=0)
    Q, R, piv = sla.qr(Xc, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(Xc.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > max(tol, _SINGULAR_TOL * (diag[0] if diag.size else 0.0))))
    if rank < k:
        bad = sorted(int(j) for j in piv[rank:])
        labels = [names[j] for j in bad] if names is not None else bad
        raise SingularMatrixError(f"design is rank deficient; dependent column(s): {labels}", labels)
    beta_p = sla.solve_triangular(R, Q.T @ yc)
    beta = np.empty(k)
    beta[piv] = beta_p
    resid = yc - Xc @ beta
    rss = float(resid @ resid)
    r2 = 1.0 - rss / tss if tss > 0 else 0.0
    return beta, rss, r2


@dataclass
class _ModelFit:
    idx: list
    beta: np.ndarray
    r2: float
    chol: tuple | None


class GPriorDesign:
    """Centred sufficient statistics for fast repeated model evaluation."""

    def __init__(self, X, y, g=None, names: Sequence[str] | None = None):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise DataError("X must be N x K and match len(y)")
        self.n, self.K = X.shape
        self.names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(self.K))
        self.x_mean = X.mean(axis=0)
        self.y_mean = float(y.mean())
        Xc = X - self.x_mean
        yc = y - self.y_mean
        self.xtx = Xc.T @ Xc
        self.xty = Xc.T @ yc
        self.tss = float(yc @ yc)
        self.g = g_value("uip" if g is None else g, self.n, self.K)
        self.shrink = self.g / (1.0 + self.g)

    @classmethod
    def from_stats(cls, n, x_mean, y_mean, xtx, xty, tss, g, names=None) -> "GPriorDesign":
        self = cls.__new__(cls)
        self.n = int(n)
        self.x_mean = np.asarray(x_mean, float)
        self.K = self.x_mean.shape[0]
        self.names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(self.K))
        self.y_mean = float(y_mean)
        self.xtx = np.asarray(xtx, float)
        self.xty = np.asarray(xty, float)
        self.tss = float(tss)
        self.g = float(g)
        self.shrink = self.g / (1.0 + self.g)
        return self

    def dof_ok(self, k: int) -> bool:
        return self.n > k + 3

    def fit(self, idx: Sequence[int]) -> _ModelFit | None:
        """OLS pieces for a model, or None when its gram block is singular."""
        idx = list(idx)
        if not idx:
            return _ModelFit(idx, np.zeros(0), 0.0, None)
        A = self.xtx[np.ix_(idx, idx)]
        scale = np.max(np.diag(A))
        if not scale > 0:
            return None
        try:
            c = sla.cho_factor(A, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            return None
        if np.min(np.diag(c[0])) ** 2 < _SINGULAR_TOL * scale:
            return None
        b = self.xty[idx]
        beta = sla.cho_solve(c, b, check_finite=False)
        r2 = float(b @ beta) / self.tss if self.tss > 0 else 0.0
        return _ModelFit(idx, beta, r2, c)

    def log_ml(self, fit: _ModelFit) -> float:
        r2 = fit.r2
        if r2 >= 1.0:
            warnings.warn("R2 >= 1 numerically; clamped to 1 - 1e-12", RuntimeWarning, stacklevel=3)
            r2 = R2_CLAMP
        k = len(fit.idx)
        return (-(self.n - 1) / 2.0 * math.log1p(-self.shrink * r2)
                - k / 2.0 * math.log1p(self.g))

    def posterior_scale(self, fit: _ModelFit) -> float:
        s2 = self.tss / (self.n - 3)
        return s2 * self.shrink * (1.0 - self.shrink * min(fit.r2, R2_CLAMP))

    def posterior(self, fit: _ModelFit):
        mean = self.shrink * fit.beta
        k = len(fit.idx)
        if k == 0:
            return mean, np.zeros((0, 0))
        inv = sla.cho_solve(fit.chol, np.eye(k), check_finite=False)
        return mean, self.posterior_scale(fit) * inv

    def posterior_diag(self, fit: _ModelFit):
        mean = self.shrink * fit.beta
        if not fit.idx:
            return mean, np.zeros(0)
        L = np.tril(fit.chol[0])
        Linv = sla.solve_triangular(L, np.eye(len(fit.idx)), lower=True, check_finite=False)
        return mean, self.posterior_scale(fit) * np.sum(Linv ** 2, axis=0)


def _fit_or_raise(design: GPriorDesign, idx):
    k = len(idx)
    if not design.dof_ok(k):
        raise DataError(f"degrees-of-freedom guard: N={design.n} must exceed k+3={k + 3}")
    fit = design.fit(idx)
    if fit is None:
        raise SingularMatrixError(f"X'X is singular for model {list(idx)}",
                                  [design.names[j] for j in idx])
    return fit


def zellner_posterior(X, y, model, g):
    """Posterior mean and covariance of the model's slope coefficients."""
    design = GPriorDesign(X, y, g)
    fit = _fit_or_raise(design, _indices(model, design.K))
    return design.posterior(fit)


def log_marginal_likelihood(X, y, model, g) -> float:
    """g-prior log marginal likelihood, normalised so the null model scores 0."""
    design = GPriorDesign(X, y, g)
    fit = _fit_or_raise(design, _indices(model, design.K))
    return design.log_ml(fit)


def model_prior_logp(model, prior_kind: str = "binomial-beta", expected_size: float | None = None,
                     K: int | None = None) -> float:
    """Log prior mass of a model.

    ``"uniform"`` gives every model the same (zero) log mass.
    ``"binomial-beta"`` integrates the inclusion probability against
    Beta(1, (K - m)/m), m being the prior expected model size (default K/2):
    log B(1 + k, b + K - k) - log B(1, b).
    """
    if isinstance(model, ModelSpec):
        K, k = model.K, model.size
    elif isinstance(model, (int, np.integer)):
        if K is None:
            raise ValueError("K is required when model is given as a size")
        k = int(model)
    else:
        arr = np.asarray(model, dtype=bool)
        K, k = arr.size, int(arr.sum())
    if prior_kind == "uniform":
        return 0.0
    if prior_kind != "binomial-beta":
        raise ValueError(f"unknown prior kind {prior_kind!r}")
    m = K / 2.0 if expected_size is None else float(expected_size)
    if not 0 < m < K:
        raise ValueError(f"expected model size must lie in (0, K={K}), got {m}")
    a, b = 1.0, (K - m) / m
    return float(betaln(a + k, b + K - k) - betaln(a, b))


# ---------------------------------------------------------------------------
# Posterior summaries
# ---------------------------------------------------------------------------

@dataclass
class PosteriorSummary:
    """Aggregated posterior over the model space for one dependent variable.

    Per-model arrays (``masks``, ``log_ml``, ``log_prior``, ``pmp``, ``r2``)
    cover every enumerated or visited model. The centred sufficient
    statistics (``xtx``, ``xty``, ``tss``) allow any model's posterior to be
    recomputed after reload.
    """

    names: tuple
    masks: np.ndarray
    log_ml: np.ndarray
    log_prior: np.ndarray
    pmp: np.ndarray
    r2: np.ndarray
    inclusion: np.ndarray
    coef_mean: np.ndarray
    coef_var: np.ndarray
    intercept: float
    g: float
    prior_kind: str
    n_obs: int
    method: str = "enumeration"
    x_mean: np.ndarray | None = None
    y_mean: float | None = None
    xtx: np.ndarray | None = None
    xty: np.ndarray | None = None
    tss: float | None = None
    expected_size: float | None = None
    draws: int | None = None
    burnin: int | None = None
    seed: int | None = None
    target: str = ""

    @property
    def K(self) -> int:
        return len(self.names)

    def design(self) -> GPriorDesign:
        if self.xtx is None:
            raise DataError("summary carries no sufficient statistics")
        return GPriorDesign.from_stats(self.n_obs, self.x_mean, self.y_mean, self.xtx, self.xty,
                                       self.tss, self.g, self.names)

    def top_models(self, n: int = 10):
        order = np.argsort(-self.pmp, kind="stable")[:n]
        return [(ModelSpec(tuple(self.masks[i])), float(self.pmp[i])) for i in order]

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "format": "deepstress-bma-summary",
            "version": 1,
            "target": self.target,
            "names": list(self.names),
            "method": self.method,
            "g": self.g,
            "prior_kind": self.prior_kind,
            "expected_size": self.expected_size,
            "n_obs": self.n_obs,
            "draws": self.draws,
            "burnin": self.burnin,
            "seed": self.seed,
            "intercept": self.intercept,
            "inclusion": arr(self.inclusion),
            "coef_mean": arr(self.coef_mean),
            "coef_var": arr(self.coef_var),
            "x_mean": arr(self.x_mean),
            "y_mean": self.y_mean,
            "tss": self.tss,
            "xtx": arr(self.xtx),
            "xty": arr(self.xty),
            "models": [
                {"mask": "".join("1" if v else "0" for v in self.masks[i]),
                 "log_ml": float(self.log_ml[i]), "log_prior": float(self.log_prior[i]),
                 "pmp": float(self.pmp[i]), "r2": float(self.r2[i])}
                for i in range(len(self.pmp))
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PosteriorSummary":
        models = d["models"]
        K = len(d["names"])
        masks = np.array([[c == "1" for c in m["mask"]] for m in models], dtype=bool).reshape(-1, K)

        def arr(key, dtype=float):
            return None if d.get(key) is None else np.asarray(d[key], dtype=dtype)

        return cls(
            names=tuple(d["names"]), masks=masks,
            log_ml=np.array([m["log_ml"] for m in models], float),
            log_prior=np.array([m["log_prior"] for m in models], float),
            pmp=np.array([m["pmp"] for m in models], float),
            r2=np.array([m["r2"] for m in models], float),
            inclusion=arr("inclusion"), coef_mean=arr("coef_mean"), coef_var=arr("coef_var"),
            intercept=float(d["intercept"]), g=float(d["g"]), prior_kind=d["prior_kind"],
            n_obs=int(d["n_obs"]), method=d["method"], x_mean=arr("x_mean"), y_mean=d.get("y_mean"),
            xtx=arr("xtx"), xty=arr("xty"), tss=d.get("tss"), expected_size=d.get("expected_size"),
            draws=d.get("draws"), burnin=d.get("burnin"), seed=d.get("seed"), target=d.get("target", ""),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "PosteriorSummary":
        return cls.from_dict(json.loads(Path(path).read_text()))


def model_average(pmp, means, variances=None):
    """Mixture mean (and variance) of per-model coefficient posteriors.

    ``means`` is (M, K) with zeros for excluded coefficients.
    """
    pmp = np.asarray(pmp, float)
    means = np.asarray(means, float)
    mix_mean = pmp @ means
    if variances is None:
        return mix_mean
    second = pmp @ (np.asarray(variances, float) + means ** 2)
    return mix_mean, np.maximum(second - mix_mean ** 2, 0.0)


def _summarize(design: GPriorDesign, masks: list[int], weights: np.ndarray, log_ml, log_prior,
               r2, fits, prior_kind, expected_size, method, **extra) -> PosteriorSummary:
    K = design.K
    means = np.zeros((len(masks), K))
    varis = np.zeros((len(masks), K))
    for i, fit in enumerate(fits):
        if fit is None or not fit.idx or weights[i] == 0:
            continue
        mu, var = design.posterior_diag(fit)
        means[i, fit.idx] = mu
        varis[i, fit.idx] = var
    coef_mean, coef_var = model_average(weights, means, varis)
    bool_masks = np.array([[(m >> j) & 1 for j in range(K)] for m in masks], dtype=bool).reshape(-1, K)
    inclusion = np.clip(weights @ bool_masks, 0.0, 1.0)
    return PosteriorSummary(
        names=design.names, masks=bool_masks, log_ml=np.asarray(log_ml, float),
        log_prior=np.asarray(log_prior, float), pmp=weights, r2=np.asarray(r2, float),
        inclusion=inclusion, coef_mean=coef_mean, coef_var=coef_var,
        intercept=float(design.y_mean - design.x_mean @ coef_mean), g=design.g,
        prior_kind=prior_kind, n_obs=design.n, method=method, x_mean=design.x_mean.copy(),
        y_mean=design.y_mean, xtx=design.xtx.copy(), xty=design.xty.copy(), tss=design.tss,
        expected_size=expected_size, **extra,
    )


def _log_post(design: GPriorDesign, idx, prior_kind, expected_size):
    """(fit, log_ml, log_prior) or (None, -inf, ...) for inadmissible models."""
    lp = model_prior_logp(len(idx), prior_kind, expected_size, K=design.K)
    if not design.dof_ok(len(idx)):
        return None, -np.inf, lp
    fit = design.fit(idx)
    if fit is None:
        return None, -np.inf, lp
    return fit, design.log_ml(fit), lp


def enumerate_posterior(X, y, g=None, prior_kind: str = "binomial-beta",
                        expected_size: float | None = None, names=None,
                        max_k: int = 20) -> PosteriorSummary:
    """Exact BMA over all 2^K models.

    Singular models and models violating the degrees-of-freedom guard get
    zero posterior mass.
    """
    design = GPriorDesign(X, y, g, names)
    K = design.K
    if K > max_k:
        raise DataError(f"enumeration capped at K={max_k}, got K={K}; use mcmc_birth_death")
    masks, fits, lml, lpr, r2 = [], [], [], [], []
    for k in range(K + 1):
        for idx in combinations(range(K), k):
            fit, ml, lp = _log_post(design, list(idx), prior_kind, expected_size)
            masks.append(sum(1 << j for j in idx))
            fits.append(fit)
            lml.append(ml)
            lpr.append(lp)
            r2.append(fit.r2 if fit is not None else np.nan)
    order = np.argsort(masks, kind="stable")
    masks = [masks[i] for i in order]
    fits = [fits[i] for i in order]
    lml, lpr, r2 = (np.asarray(a)[order] for a in (lml, lpr, r2))
    logpost = lml + lpr
    top = np.max(logpost)
    w = np.exp(logpost - top)
    w /= w.sum()
    return _summarize(design, masks, w, lml, lpr, r2, fits, prior_kind, expected_size,
                      "enumeration")


def mcmc_birth_death(X, y, g=None, prior_kind: str = "binomial-beta", draws: int = 20000,
                     burnin: int = 10000, seed: int = 0, expected_size: float | None = None,
                     names=None, start=None) -> PosteriorSummary:
    """Metropolis-Hastings over models with single-flip birth/death moves.

    Each step flips one uniformly chosen regressor (birth if excluded, death
    if included) and accepts with probability
    min(1, exp(delta log-ML + delta log-prior)). PMPs are visit frequencies
    over the ``draws - burnin`` retained steps; the chain starts at the null
    model unless ``start`` is given.
    """
    if not draws > burnin >= 0:
        raise ValueError("need draws > burnin >= 0")
    design = GPriorDesign(X, y, g, names)
    K = design.K
    if K == 0:
        raise DataError("no candidate regressors")
    rng = np.random.default_rng(seed)
    flips = rng.integers(0, K, size=draws)
    log_u = np.log(rng.random(draws))

    cache: dict[int, tuple] = {}

    def evaluate(m: int):
        hit = cache.get(m)
        if hit is None:
            fit, ml, lp = _log_post(design, _mask_indices(m, K), prior_kind, expected_size)
            hit = (fit, ml, lp, ml + lp)
            cache[m] = hit
        return hit

    current = 0
    if start is not None:
        current = sum(1 << j for j in _indices(start, K))
    cur_lp = evaluate(current)[3]
    if not np.isfinite(cur_lp):
        raise DataError("chain start model is inadmissible")
    counts: dict[int, int] = {}
    for i in range(draws):
        prop = current ^ (1 << int(flips[i]))
        prop_lp = evaluate(prop)[3]
        if log_u[i] < prop_lp - cur_lp:
            current, cur_lp = prop, prop_lp
        if i >= burnin:
            counts[current] = counts.get(current, 0) + 1
    masks = sorted(counts)
    retained = draws - burnin
    w = np.array([counts[m] / retained for m in masks])
    fits = [cache[m][0] for m in masks]
    return _summarize(
        design, masks, w, [cache[m][1] for m in masks], [cache[m][2] for m in masks],
        [f.r2 if f is not None else np.nan for f in fits], fits, prior_kind, expected_size,
        "mcmc", draws=draws, burnin=burnin, seed=seed,
    )


def bma_predict(summary: PosteriorSummary, x_new, max_models: int = 500, mass: float = 0.999):
    """Point forecast and predictive-variance proxy.

    The point forecast is ``intercept + x . coef_mean`` (aggregated over all
    models). The variance proxy is the PMP-weighted per-model predictive
    variance plus the between-model dispersion of forecasts, computed over
    the highest-PMP models covering ``mass`` (at most ``max_models``),
    renormalised. It is NaN when the summary carries no sufficient statistics.
    """
    x = np.asarray(x_new, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != summary.K:
        raise DataError(f"x_new has dimension {X.shape[1]}, summary has K={summary.K}")
    point = summary.intercept + X @ summary.coef_mean
    if summary.xtx is None:
        var = np.full(X.shape[0], np.nan)
    else:
        design = summary.design()
        order = np.argsort(-summary.pmp, kind="stable")
        cum = np.cumsum(summary.pmp[order])
        n_keep = min(int(np.searchsorted(cum, mass * cum[-1])) + 1, max_models, len(order))
        keep = order[:n_keep]
        w = summary.pmp[keep] / summary.pmp[keep].sum()
        Xc = X - design.x_mean
        preds = np.empty((len(keep), X.shape[0]))
        pvars = np.empty_like(preds)
        s2 = design.tss / (design.n - 3)
        for i, mi in enumerate(keep):
            idx = list(np.flatnonzero(summary.masks[mi]))
            fit = design.fit(idx)
            if fit is None:
                preds[i] = design.y_mean
                pvars[i] = s2
                continue
            xs = Xc[:, idx]
            preds[i] = design.y_mean + xs @ (design.shrink * fit.beta)
            lev = (np.einsum("ij,ij->i", xs, sla.cho_solve(fit.chol, xs.T).T)
                   if idx else np.zeros(X.shape[0]))
            pvars[i] = s2 * (1.0 - design.shrink * min(fit.r2, R2_CLAMP)) * (1.0 + design.shrink * lev)
        mean_pred = w @ preds
        var = w @ pvars + w @ (preds - mean_pred) ** 2
    if single:
        return float(point[0]), float(var[0])
    return point, var


# ---------------------------------------------------------------------------
# Satellite set
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BmaOptions:
    g_rule: object = "uip"
    prior_kind: str = "binomial-beta"
    expected_size: float | None = None
    method: str = "auto"
    enumerate_max_k: int = 20
    draws: int = 20000
    burnin: int = 10000
    seed: int = 0
    mad_threshold: float | None = 5.0
    clean_target: bool = False
    clean_macro: bool = False

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "BmaOptions":
        return cls(**dict(d or {}))


@dataclass
class SatelliteSet:
    """Named satellite posteriors; a full set has the 9 canonical targets."""

    summaries: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.summaries) - set(SATELLITE_TARGETS)
        if unknown:
            raise DataError(f"non-canonical satellite name(s): {sorted(unknown)}")

    @property
    def complete(self) -> bool:
        return set(self.summaries) == set(SATELLITE_TARGETS)

    def __len__(self):
        return len(self.summaries)

    def __getitem__(self, name) -> PosteriorSummary:
        return self.summaries[name]

    def __iter__(self):
        return iter(self.summaries)

    def names(self) -> tuple:
        return tuple(n for n in SATELLITE_TARGETS if n in self.summaries)

    def predict(self, X) -> dict:
        return {n: bma_predict(self.summaries[n], X)[0] for n in self.names()}

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for n in self.names():
            self.summaries[n].save(d / f"{n}.json")

    @classmethod
    def load(cls, directory, names=SATELLITE_TARGETS) -> "SatelliteSet":
        d = Path(directory)
        return cls({n: PosteriorSummary.load(d / f"{n}.json") for n in names if (d / f"{n}.json").exists()})


def fit_satellite(X, y, options: BmaOptions, names=None, seed=None, target="") -> PosteriorSummary:
    K = np.asarray(X).shape[1]
    g = g_value(options.g_rule, np.asarray(X).shape[0], K)
    method = options.method
    if method == "auto":
        method = "enumeration" if K <= options.enumerate_max_k else "mcmc"
    if method == "enumeration":
        s = enumerate_posterior(X, y, g, options.prior_kind, options.expected_size, names,
                                max_k=options.enumerate_max_k)
    elif method == "mcmc":
        s = mcmc_birth_death(X, y, g, options.prior_kind, options.draws, options.burnin,
                             options.seed if seed is None else seed, options.expected_size, names)
    else:
        raise ValueError(f"unknown BMA method {method!r}")
    s.target = target
    return s


def fit_satellites(panel: SupervisedPanel, options: BmaOptions | None = None,
                   targets: Sequence[str] = SATELLITE_TARGETS) -> SatelliteSet:
    """One BMA posterior per target on the outlier-cleaned shared regressor pool."""
    options = options or BmaOptions()
    if len(panel) == 0:
        raise DataError("cannot fit satellites on an empty panel")
    X = np.array(panel.X, dtype=float)
    if options.mad_threshold is not None:
        # macro columns are common to all banks; their extremes are the stress signal
        cols = [j for j, n in enumerate(panel.feature_names)
                if options.clean_macro or n.rsplit("_lag", 1)[0] not in MACRO_NAMES]
        if cols:
            X[:, cols] = clean_panel_columns(panel, options.mad_threshold, X[:, cols])
    out = {}
    for i, name in enumerate(targets):
        if name not in SATELLITE_TARGETS:
            raise DataError(f"unknown satellite target {name!r}")
        y = panel.Y[:, TARGET_NAMES.index(name)]
        if options.mad_threshold is not None and options.clean_target:
            y = clean_panel_columns(panel, options.mad_threshold, y)
        out[name] = fit_satellite(X, y, options, panel.feature_names, seed=options.seed + i,
                                  target=name)
        s = out[name]
        logger.info("satellite %s: %d models, top inclusion %s", name, len(s.pmp),
                    s.names[int(np.argmax(s.inclusion))] if s.K else "-")
    if not all(np.all(np.isfinite(s.coef_mean)) for s in out.values()):
        raise NumericalError("non-finite satellite coefficients")
    return SatelliteSet(out)
