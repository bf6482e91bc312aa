"""Capital roll-forward, RWA treatments and CAR.

All functions work elementwise, so the fields of :class:`BankState` and
:class:`TargetVector` may be scalars or equal-shape numpy arrays (one entry
per bank).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import CarDomainError, InvariantViolation, NumericalError


class RwaMethod(enum.Enum):
    NEURAL_GROWTH = "neural_growth"
    SATELLITE_DENSITY = "satellite_density"
    CONSTANT = "constant"


# semantic tag carried by TargetVector.rwa_measure
RWA_TAG = {
    RwaMethod.NEURAL_GROWTH: "growth",
    RwaMethod.SATELLITE_DENSITY: "density",
    RwaMethod.CONSTANT: "none",
}


@dataclass(frozen=True)
class BankState:
    capital: float
    rwa: float
    loans: float
    earning_assets: float
    assets: float
    deposits: float

    def __post_init__(self):
        for f in fields(self):
            if np.any(np.asarray(getattr(self, f.name)) < 0):
                raise InvariantViolation(f"BankState.{f.name} must be >= 0")
        if np.any(np.asarray(self.capital) > np.asarray(self.assets)):
            raise InvariantViolation("BankState.capital must not exceed assets")

    @classmethod
    def from_array(cls, a) -> "BankState":
        """Build from rows ordered as ``panel.STATE_NAMES``."""
        a = np.asarray(a, dtype=float)
        return cls(*(a[..., i] for i in range(6)))


@dataclass(frozen=True)
class TargetVector:
    g_dep: float
    g_loan: float
    g_asset: float
    g_easset: float
    cost_of_risk: float
    yea: float
    cfd: float
    nfia: float
    rwa_measure: float
    rwa_kind: str = "growth"

    def __post_init__(self):
        if self.rwa_kind not in ("growth", "density", "none"):
            raise ValueError(f"unknown rwa_kind {self.rwa_kind!r}")
        for name in ("g_dep", "g_loan", "g_asset", "g_easset"):
            if np.any(np.asarray(getattr(self, name)) <= -1.0):
                raise InvariantViolation(f"growth {name} must exceed -1")
        for name in ("cost_of_risk", "yea", "cfd", "nfia", "rwa_measure"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvariantViolation(f"{name} must be finite")

    @classmethod
    def from_array(cls, a, rwa_kind: str) -> "TargetVector":
        """Build from 9 columns: 4 growths, 4 yields, RWA measure."""
        a = np.asarray(a, dtype=float)
        return cls(*(a[..., i] for i in range(9)), rwa_kind=rwa_kind)

    def as_array(self) -> np.ndarray:
        return np.stack([np.asarray(getattr(self, f.name), float) for f in fields(self)[:9]], axis=-1)

    def scaled_yields(self, alpha: float) -> "TargetVector":
        return replace(self, cost_of_risk=alpha * self.cost_of_risk, yea=alpha * self.yea,
                       cfd=alpha * self.cfd, nfia=alpha * self.nfia)


def roll_forward_capital(state: BankState, t: TargetVector):
    """One-year capital: income on start-of-period balances added to capital.

    capital + yea*earning_assets - cost_of_risk*loans + nfia*assets - cfd*deposits.
    The result may be negative; insolvency is not clamped.
    """
    capital = (state.capital + t.yea * state.earning_assets - t.cost_of_risk * state.loans
               + t.nfia * state.assets - t.cfd * state.deposits)
    if not np.all(np.isfinite(capital)):
        raise NumericalError("capital roll-forward produced a non-finite value")
    return capital


def apply_growth(state: BankState, t: TargetVector) -> BankState:
    """Grow loans, deposits, assets and earning assets; capital and RWA stay."""
    return BankState(
        capital=state.capital,
        rwa=state.rwa,
        loans=state.loans * (1.0 + t.g_loan),
        earning_assets=state.earning_assets * (1.0 + t.g_easset),
        assets=state.assets * (1.0 + t.g_asset),
        deposits=state.deposits * (1.0 + t.g_dep),
    )


def project_rwa(state: BankState, method: RwaMethod, t: TargetVector):
    """Projected RWA under one of the three treatments.

    ``state`` is the start-of-period state; the density method multiplies
    the predicted RW density by the grown asset base.
    """
    if method is RwaMethod.CONSTANT:
        return state.rwa
    if t.rwa_kind != RWA_TAG[method]:
        raise ValueError(f"{method.name} needs an rwa_measure tagged {RWA_TAG[method]!r}, "
                         f"got {t.rwa_kind!r}")
    if method is RwaMethod.NEURAL_GROWTH:
        return state.rwa * (1.0 + t.rwa_measure)
    return t.rwa_measure * (state.assets * (1.0 + t.g_asset))


def compute_car(capital, rwa):
    rwa = np.asarray(rwa, dtype=float)
    if np.any(rwa <= 0):
        raise CarDomainError("CAR undefined for rwa <= 0")
    out = np.asarray(capital, dtype=float) / rwa
    return float(out) if out.ndim == 0 else out


def project_car(state: BankState, method: RwaMethod, t: TargetVector):
    """Chain the roll-forward, RWA projection and CAR. Returns (capital, rwa, car)."""
    capital = roll_forward_capital(state, t)
    rwa = project_rwa(state, method, t)
    return capital, rwa, compute_car(capital, rwa)
