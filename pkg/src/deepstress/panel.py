"""Bank panel ingestion, cleaning, entity splits and lagged feature construction.

The supervised unit is one ``(bank, quarter t)`` pair: features are built
from macro and bank variables at fixed quarter offsets, targets describe the
bank at ``t + 4`` (one year ahead).
"""

from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DataError,
    DuplicateRecordError,
    InsufficientHistoryError,
    InvariantViolation,
)

logger = logging.getLogger(__name__)

HORIZON = 4

MACRO_NAMES = (
    "gdp", "export", "govcredit", "debt", "govexp",
    "inflat", "rre", "unr", "yield10y", "stocks",
)

CURRENCY_FIELDS = (
    "net_loans", "deposits_total", "deposits_domestic", "assets_avg",
    "earning_assets_avg", "equity_avg", "loans_avg", "rwa_total",
)
RATE_FIELDS = ("cfd", "yea", "nfia", "rw_density", "loss_loan", "car")
NUMERIC_FIELDS = CURRENCY_FIELDS + RATE_FIELDS

# derived year-on-year growth features: name -> underlying level field
GROWTH_FEATURES = {
    "g_dep": "deposits_total",
    "g_loan": "loans_avg",
    "g_asset": "assets_avg",
    "g_easset": "earning_assets_avg",
    "g_rwa": "rwa_total",
}

DEFAULT_FINANCIALS = (
    "g_dep", "g_loan", "g_asset", "g_easset",
    "loss_loan", "yea", "cfd", "nfia", "rw_density",
)

TARGET_NAMES = (
    "g_dep", "g_loan", "g_asset", "g_easset",
    "cost_of_risk", "yea", "cfd", "nfia", "g_rwa", "rw_density",
)
NEURAL_TARGETS = TARGET_NAMES[:8] + ("g_rwa",)
SATELLITE_TARGETS = TARGET_NAMES[:8] + ("rw_density",)
YIELD_TARGETS = ("cost_of_risk", "yea", "cfd", "nfia")

STATE_NAMES = ("capital", "rwa", "loans", "earning_assets", "assets", "deposits")


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

_QUARTER_RE = re.compile(r"^\s*(\d{4})\s*[-_ ]?\s*[Qq]\s*([1-4])\s*$")


@dataclass(frozen=True, order=True)
class Quarter:
    year: int
    q: int

    def __post_init__(self):
        if not 1 <= self.q <= 4:
            raise ValueError(f"quarter number must be in 1..4, got {self.q}")

    @classmethod
    def parse(cls, text: str) -> "Quarter":
        m = _QUARTER_RE.match(str(text))
        if not m:
            raise DataError(f"unparseable quarter {text!r} (expected e.g. 2010Q1)")
        return cls(int(m.group(1)), int(m.group(2)))

    @classmethod
    def from_index(cls, index: int) -> "Quarter":
        return cls(index // 4, index % 4 + 1)

    @property
    def index(self) -> int:
        return self.year * 4 + self.q - 1

    def shift(self, n: int) -> "Quarter":
        return Quarter.from_index(self.index + n)

    def next(self) -> "Quarter":
        return self.shift(1)

    def prev(self) -> "Quarter":
        return self.shift(-1)

    def __sub__(self, other: "Quarter") -> int:
        return self.index - other.index

    def __str__(self) -> str:
        return f"{self.year}Q{self.q}"


def quarter_range(start: Quarter, end: Quarter) -> list[Quarter]:
    """Inclusive list of quarters from ``start`` to ``end``."""
    return [Quarter.from_index(i) for i in range(start.index, end.index + 1)]


@dataclass(frozen=True)
class BankQuarter:
    bank_id: str
    quarter: Quarter
    net_loans: float
    deposits_total: float
    deposits_domestic: float
    assets_avg: float
    earning_assets_avg: float
    equity_avg: float
    loans_avg: float
    cfd: float
    yea: float
    nfia: float
    rw_density: float
    loss_loan: float
    rwa_total: float
    car: float
    failed: bool = False

    @property
    def capital(self) -> float:
        return self.car * self.rwa_total

    def validate(self, rwa_tolerance: float | None = 0.05) -> None:
        """Raise :class:`InvariantViolation` if a domain invariant fails."""
        key = f"({self.bank_id}, {self.quarter})"
        for name in NUMERIC_FIELDS:
            v = getattr(self, name)
            if not np.isfinite(v):
                raise InvariantViolation(f"invariant violation at {key}: {name} is not finite")
        for name in CURRENCY_FIELDS:
            if getattr(self, name) < 0:
                raise InvariantViolation(f"invariant violation at {key}: {name} < 0")
        if not 0.0 <= self.rw_density <= 5.0:
            raise InvariantViolation(f"invariant violation at {key}: rw_density outside [0, 5]")
        if self.car < 0:
            raise InvariantViolation(f"invariant violation at {key}: car < 0")
        if rwa_tolerance is not None and self.assets_avg > 0 and self.rwa_total > 0:
            implied = self.rw_density * self.assets_avg
            if abs(implied - self.rwa_total) > rwa_tolerance * self.rwa_total:
                raise InvariantViolation(
                    f"invariant violation at {key}: rwa_total {self.rwa_total:g} "
                    f"inconsistent with rw_density*assets_avg {implied:g}"
                )


@dataclass(frozen=True)
class MacroQuarter:
    quarter: Quarter
    gdp: float
    export: float
    govcredit: float
    debt: float
    govexp: float
    inflat: float
    rre: float
    unr: float
    yield10y: float
    stocks: float

    def __post_init__(self):
        if not 0.0 <= self.unr <= 1.0:
            raise InvariantViolation(f"invariant violation at {self.quarter}: unr outside [0, 1]")

    def values(self, names: Sequence[str] = MACRO_NAMES) -> np.ndarray:
        return np.array([getattr(self, n) for n in names], dtype=float)

    def with_overrides(self, overrides: Mapping[str, float]) -> "MacroQuarter":
        unknown = set(overrides) - set(MACRO_NAMES)
        if unknown:
            raise DataError(f"unknown macro variable(s): {sorted(unknown)}")
        return replace(self, **{k: float(v) for k, v in overrides.items()})


@dataclass(frozen=True)
class FeatureRecipe:
    """Which lag offsets and bank variables enter the feature vector.

    ``macro_anchor="feature"`` takes macro offsets back from the feature
    quarter t; ``"target"`` takes them back from t + 4 so the macro path of
    the projection year (the stress scenario) enters the features.
    ``included_macro`` restricts which macro series are used (all ten by
    default); features are ordered macro-first, then financials, lag-major.
    """

    macro_lags: tuple[int, ...] = (0, 4, 8, 12)
    financial_lags: tuple[int, ...] = (0, 4, 8)
    included_financials: tuple[str, ...] = DEFAULT_FINANCIALS
    macro_anchor: str = "feature"
    included_macro: tuple[str, ...] = MACRO_NAMES

    def __post_init__(self):
        for name in ("macro_lags", "financial_lags"):
            lags = tuple(int(v) for v in getattr(self, name))
            if any(v < 0 for v in lags):
                raise ValueError(f"{name} must be non-negative")
            if list(lags) != sorted(set(lags)):
                raise ValueError(f"{name} must be sorted and unique")
            object.__setattr__(self, name, lags)
        object.__setattr__(self, "included_financials", tuple(self.included_financials))
        unknown = [n for n in self.included_financials if n not in FINANCIAL_FEATURES]
        if unknown:
            raise DataError(f"recipe references unknown variable(s): {unknown}")
        object.__setattr__(self, "included_macro", tuple(self.included_macro))
        bad = [n for n in self.included_macro if n not in MACRO_NAMES]
        if bad or len(set(self.included_macro)) != len(self.included_macro):
            raise DataError(f"recipe macro list is invalid: {list(self.included_macro)}")
        if self.macro_anchor not in ("feature", "target"):
            raise ValueError("macro_anchor must be 'feature' or 'target'")

    @property
    def feature_dim(self) -> int:
        return feature_dim(self)

    def feature_names(self) -> tuple[str, ...]:
        names = [f"{m}_lag{k}" for k in self.macro_lags for m in self.included_macro]
        names += [f"{v}_lag{k}" for k in self.financial_lags for v in self.included_financials]
        return tuple(names)

    def macro_offsets(self) -> tuple[int, ...]:
        """Macro quarter offsets relative to the feature quarter t."""
        shift = HORIZON if self.macro_anchor == "target" else 0
        return tuple(shift - k for k in self.macro_lags)

    def to_dict(self) -> dict:
        return {
            "macro_lags": list(self.macro_lags),
            "financial_lags": list(self.financial_lags),
            "included_financials": list(self.included_financials),
            "macro_anchor": self.macro_anchor,
            "included_macro": list(self.included_macro),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureRecipe":
        return cls(
            macro_lags=tuple(d.get("macro_lags", (0, 4, 8, 12))),
            financial_lags=tuple(d.get("financial_lags", (0, 4, 8))),
            included_financials=tuple(d.get("included_financials", DEFAULT_FINANCIALS)),
            macro_anchor=d.get("macro_anchor", "feature"),
            included_macro=tuple(d.get("included_macro", MACRO_NAMES)),
        )


def feature_dim(recipe: FeatureRecipe) -> int:
    return len(recipe.included_macro) * len(recipe.macro_lags) + len(recipe.included_financials) * len(
        recipe.financial_lags
    )


FINANCIAL_FEATURES = {**{k: ("growth", v) for k, v in GROWTH_FEATURES.items()},
                      **{k: ("level", k) for k in NUMERIC_FIELDS}}


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    sd: np.ndarray
    constant: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "sd": self.sd.tolist(),
                "constant": self.constant.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureStats":
        return cls(np.asarray(d["mean"], float), np.asarray(d["sd"], float),
                   np.asarray(d["constant"], bool))

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.mean.shape[0]:
            raise DataError(
                f"stats dimension mismatch: {self.mean.shape[0]} stats for {X.shape[-1]} features"
            )
        return (X - self.mean) / self.sd

    def invert(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z, dtype=float) * self.sd + self.mean


@dataclass(frozen=True)
class SupervisedPanel:
    """Feature/target matrices with row keys; arrays are read-only.

    ``states`` holds the bank's start-of-period balance sheet (columns
    :data:`STATE_NAMES`) and ``car_next`` the realised CAR at t + 4, so the
    panel alone supports end-to-end CAR scoring.
    """

    bank_ids: tuple
    quarters: tuple
    X: np.ndarray
    Y: np.ndarray
    states: np.ndarray
    car_next: np.ndarray
    feature_names: tuple
    recipe: FeatureRecipe = field(default_factory=FeatureRecipe)
    dropped: int = 0
    stats: FeatureStats | None = None

    def __post_init__(self):
        n = len(self.bank_ids)
        for name in ("X", "Y", "states", "car_next"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape[0] != n:
                raise DataError(f"{name} has {arr.shape[0]} rows, expected {n}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.X.ndim != 2 or self.X.shape[1] != len(self.feature_names):
            raise DataError("feature matrix width does not match feature_names")

    def __len__(self) -> int:
        return len(self.bank_ids)

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    @property
    def rows(self):
        for i in range(len(self)):
            yield self.bank_ids[i], self.quarters[i], self.X[i], self.Y[i]

    def targets(self, names: Sequence[str] = NEURAL_TARGETS) -> np.ndarray:
        idx = [TARGET_NAMES.index(n) for n in names]
        return self.Y[:, idx]

    def subset(self, mask) -> "SupervisedPanel":
        mask = np.asarray(mask)
        idx = np.flatnonzero(mask) if mask.dtype == bool else mask
        return replace(
            self,
            bank_ids=tuple(self.bank_ids[i] for i in idx),
            quarters=tuple(self.quarters[i] for i in idx),
            X=self.X[idx], Y=self.Y[idx], states=self.states[idx],
            car_next=self.car_next[idx],
        )

    def entity_mask(self, ids: Iterable) -> np.ndarray:
        ids = set(ids)
        return np.array([b in ids for b in self.bank_ids], dtype=bool)

    def window_mask(self, window: tuple[Quarter, Quarter]) -> np.ndarray:
        lo, hi = window
        return np.array([lo <= q <= hi for q in self.quarters], dtype=bool)


@dataclass(frozen=True)
class SplitAssignment:
    train_ids: frozenset
    validation_ids: frozenset
    in_sample_window: tuple
    out_of_time_window: tuple

    def to_dict(self) -> dict:
        return {
            "train_ids": sorted(map(str, self.train_ids)),
            "validation_ids": sorted(map(str, self.validation_ids)),
            "in_sample_window": [str(q) for q in self.in_sample_window],
            "out_of_time_window": [str(q) for q in self.out_of_time_window],
        }


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

_TRUE = {"1", "true", "t", "yes", "y"}
_FALSE = {"0", "false", "f", "no", "n", ""}


def _parse_bool(text: str, where: str) -> bool:
    t = text.strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise DataError(f"unparseable boolean {text!r} {where}")


def _parse_float(text: str, where: str) -> float:
    try:
        return float(text)
    except (TypeError, ValueError):
        raise DataError(f"unparseable numeric {text!r} {where}") from None


def _open_table(path, schema: Mapping[str, str], mandatory: Sequence[str], delimiter: str):
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        header = reader.fieldnames or []
        missing = [f for f in mandatory if schema.get(f, f) not in header]
        if missing:
            cols = [schema.get(f, f) for f in missing]
            raise DataError(f"{path}: missing mandatory column(s) {cols}")
        rows = list(reader)
    return path, rows


def load_bank_panel(path, schema: Mapping[str, str] | None = None, delimiter: str = ",",
                    rwa_tolerance: float | None = 0.05) -> list[BankQuarter]:
    """Read a delimiter-separated bank panel.

    ``schema`` maps engine field names (``bank_id``, ``quarter``, the numeric
    fields and optionally ``failed``) to column headers in the file; unmapped
    fields are looked up under their own name.
    """
    schema = dict(schema or {})
    mandatory = ("bank_id", "quarter") + NUMERIC_FIELDS
    path, rows = _open_table(path, schema, mandatory, delimiter)
    failed_col = schema.get("failed", "failed")
    out, seen = [], set()
    for lineno, row in enumerate(rows, start=2):
        where = f"at {path.name}:{lineno}"
        bank_id = row[schema.get("bank_id", "bank_id")].strip()
        quarter = Quarter.parse(row[schema.get("quarter", "quarter")])
        key = (bank_id, quarter)
        if key in seen:
            raise DuplicateRecordError(f"duplicate record for key ({bank_id}, {quarter}) {where}")
        seen.add(key)
        values = {f: _parse_float(row[schema.get(f, f)], f"for {f} {where}") for f in NUMERIC_FIELDS}
        failed = _parse_bool(row[failed_col], where) if failed_col in row else False
        rec = BankQuarter(bank_id=bank_id, quarter=quarter, failed=failed, **values)
        rec.validate(rwa_tolerance)
        out.append(rec)
    return out


def load_macro(path, schema: Mapping[str, str] | None = None,
               delimiter: str = ",") -> dict[Quarter, MacroQuarter]:
    schema = dict(schema or {})
    path, rows = _open_table(path, schema, ("quarter",) + MACRO_NAMES, delimiter)
    out = {}
    for lineno, row in enumerate(rows, start=2):
        where = f"at {path.name}:{lineno}"
        q = Quarter.parse(row[schema.get("quarter", "quarter")])
        if q in out:
            raise DuplicateRecordError(f"duplicate macro quarter {q} {where}")
        vals = {m: _parse_float(row[schema.get(m, m)], f"for {m} {where}") for m in MACRO_NAMES}
        out[q] = MacroQuarter(quarter=q, **vals)
    return dict(sorted(out.items()))


def write_bank_panel(records: Iterable[BankQuarter], path) -> None:
    cols = ["bank_id", "quarter", *NUMERIC_FIELDS, "failed"]
    recs = sorted(records, key=lambda r: (str(r.bank_id), r.quarter))
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in recs:
            w.writerow([r.bank_id, str(r.quarter), *(repr(float(getattr(r, f))) for f in NUMERIC_FIELDS),
                        int(r.failed)])


def write_macro(macro: Mapping[Quarter, MacroQuarter], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quarter", *MACRO_NAMES])
        for q in sorted(macro):
            w.writerow([str(q), *(repr(float(v)) for v in macro[q].values())])


# ---------------------------------------------------------------------------
# Cleaning and splitting
# ---------------------------------------------------------------------------

def filter_failed(panel: Sequence[BankQuarter]) -> list[BankQuarter]:
    return [r for r in panel if not r.failed]


def _clean_once(x: np.ndarray, threshold: float) -> tuple[np.ndarray, bool]:
    med = np.median(x)
    mad = np.median(np.abs(x - med))
    if mad == 0:
        return x, False
    flagged = np.abs(x - med) / mad > threshold
    if not flagged.any():
        return x, False
    if flagged.all():
        return x, False
    idx = np.arange(len(x))
    keep = ~flagged
    out = x.copy()
    # np.interp holds endpoints at the nearest kept value
    out[flagged] = np.interp(idx[flagged], idx[keep], x[keep])
    return out, True


def clean_outliers(series, mad_threshold: float = 5.0, max_passes: int = 50) -> np.ndarray:
    """Replace MAD outliers by linear interpolation of their kept neighbours.

    A point is an outlier when ``|x - median| / MAD > mad_threshold``. Passes
    repeat until nothing is flagged, so the result is a fixed point and the
    operation is idempotent.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim != 1 or len(x) < 3:
        raise DataError("clean_outliers needs a 1-D series of length >= 3")
    if mad_threshold <= 0:
        raise ValueError("mad_threshold must be positive")
    for _ in range(max_passes):
        x, changed = _clean_once(x, mad_threshold)
        if not changed:
            break
    return x


def clean_panel_columns(panel: SupervisedPanel, mad_threshold: float = 5.0, values=None) -> np.ndarray:
    """Outlier-clean every column along each bank's time series.

    ``values`` (rows aligned with the panel) defaults to the feature matrix.
    Banks with fewer than three rows are left as they are.
    """
    X = np.array(panel.X if values is None else values, dtype=float)
    squeeze = X.ndim == 1
    if squeeze:
        X = X[:, None]
    by_bank: dict = {}
    for i, b in enumerate(panel.bank_ids):
        by_bank.setdefault(b, []).append(i)
    for rows in by_bank.values():
        if len(rows) < 3:
            continue
        rows = sorted(rows, key=lambda i: panel.quarters[i])
        for j in range(X.shape[1]):
            X[rows, j] = clean_outliers(X[rows, j], mad_threshold)
    return X[:, 0] if squeeze else X


def split_panel(panel, ratio: float = 0.8, seed: int = 0,
                in_sample: tuple[Quarter, Quarter] | None = None,
                out_of_time: tuple[Quarter, Quarter] | None = None) -> SplitAssignment:
    """Entity-level train/validation split plus time windows."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    if isinstance(panel, SupervisedPanel):
        ids = panel.bank_ids
    else:
        ids = [r.bank_id for r in panel]
    entities = sorted(set(ids), key=str)
    if len(entities) < 2:
        raise DataError("split_panel needs at least 2 entities")
    if in_sample is not None and out_of_time is not None:
        if in_sample[0] > in_sample[1] or out_of_time[0] > out_of_time[1]:
            raise ValueError("window start must not follow its end")
        if not out_of_time[0] > in_sample[1]:
            raise ValueError("out-of-time window must strictly follow the in-sample window")
    n_train = min(max(int(round(ratio * len(entities))), 1), len(entities) - 1)
    order = np.random.default_rng(seed).permutation(len(entities))
    train = frozenset(entities[i] for i in order[:n_train])
    valid = frozenset(entities[i] for i in order[n_train:])
    return SplitAssignment(train, valid, tuple(in_sample or ()), tuple(out_of_time or ()))


# ---------------------------------------------------------------------------
# Feature construction
# ---------------------------------------------------------------------------

def index_panel(panel: Iterable[BankQuarter]) -> dict[str, dict[int, BankQuarter]]:
    """Group records by bank, keyed by quarter index."""
    out: dict[str, dict[int, BankQuarter]] = {}
    for r in panel:
        out.setdefault(r.bank_id, {})[r.quarter.index] = r
    return out


def _financial_value(series: Mapping[int, BankQuarter], t: int, name: str) -> float:
    kind, src = FINANCIAL_FEATURES[name]
    if kind == "level":
        rec = series.get(t)
        if rec is None:
            raise InsufficientHistoryError(f"missing {Quarter.from_index(t)}")
        return float(getattr(rec, src))
    now, before = series.get(t), series.get(t - HORIZON)
    if now is None or before is None:
        missing = t if now is None else t - HORIZON
        raise InsufficientHistoryError(f"missing {Quarter.from_index(missing)}")
    base = getattr(before, src)
    return getattr(now, src) / base - 1.0 if base > 0 else float("nan")


def feature_vector(series: Mapping[int, BankQuarter], macro: Mapping[Quarter, MacroQuarter],
                   t: Quarter, recipe: FeatureRecipe) -> np.ndarray:
    """Feature vector of one bank at feature quarter ``t``.

    Raises :class:`InsufficientHistoryError` naming the first missing quarter.
    """
    parts = []
    for off in recipe.macro_offsets():
        q = t.shift(off)
        m = macro.get(q)
        if m is None:
            raise InsufficientHistoryError(f"missing macro quarter {q}")
        parts.append(m.values(recipe.included_macro))
    fin = [
        _financial_value(series, t.index - k, name)
        for k in recipe.financial_lags
        for name in recipe.included_financials
    ]
    parts.append(np.asarray(fin, dtype=float))
    return np.concatenate(parts) if parts else np.zeros(0)


def bank_state_row(rec: BankQuarter) -> np.ndarray:
    return np.array([rec.capital, rec.rwa_total, rec.loans_avg, rec.earning_assets_avg,
                     rec.assets_avg, rec.deposits_total], dtype=float)


def target_row(now: BankQuarter, ahead: BankQuarter) -> np.ndarray:
    def growth(f):
        base = getattr(now, f)
        return getattr(ahead, f) / base - 1.0 if base > 0 else float("nan")

    return np.array([
        growth("deposits_total"), growth("loans_avg"), growth("assets_avg"),
        growth("earning_assets_avg"), ahead.loss_loan, ahead.yea, ahead.cfd, ahead.nfia,
        growth("rwa_total"), ahead.rw_density,
    ], dtype=float)


def build_features(panel: Sequence[BankQuarter], macro: Mapping[Quarter, MacroQuarter],
                   recipe: FeatureRecipe | None = None) -> SupervisedPanel:
    """Build the supervised panel; rows lacking any lag or the t+4 target are dropped."""
    recipe = recipe or FeatureRecipe()
    by_bank = index_panel(panel)
    keys, xs, ys, states, cars = [], [], [], [], []
    dropped = 0
    for bank in sorted(by_bank, key=str):
        series = by_bank[bank]
        for t_idx in sorted(series):
            ahead = series.get(t_idx + HORIZON)
            if ahead is None:
                dropped += 1
                continue
            t = Quarter.from_index(t_idx)
            try:
                x = feature_vector(series, macro, t, recipe)
            except InsufficientHistoryError:
                dropped += 1
                continue
            y = target_row(series[t_idx], ahead)
            s = bank_state_row(series[t_idx])
            if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y)) and np.all(np.isfinite(s))
                    and np.isfinite(ahead.car)):
                dropped += 1
                continue
            keys.append((bank, t))
            xs.append(x)
            ys.append(y)
            states.append(s)
            cars.append(ahead.car)
    if not keys:
        raise DataError("build_features produced no rows (insufficient history everywhere)")
    if dropped:
        logger.info("build_features dropped %d candidate rows", dropped)
    return SupervisedPanel(
        bank_ids=tuple(k[0] for k in keys), quarters=tuple(k[1] for k in keys),
        X=np.vstack(xs), Y=np.vstack(ys), states=np.vstack(states), car_next=np.asarray(cars),
        feature_names=recipe.feature_names(), recipe=recipe, dropped=dropped,
    )


def compute_stats(X: np.ndarray) -> FeatureStats:
    X = np.asarray(X, dtype=float)
    mean = X.mean(axis=0)
    sd = X.std(axis=0)  # population convention
    constant = ~(sd > 0)
    return FeatureStats(np.where(constant, 0.0, mean), np.where(constant, 1.0, sd), constant)


def standardize(panel: SupervisedPanel,
                stats: FeatureStats | None = None) -> tuple[SupervisedPanel, FeatureStats]:
    """Scale features to zero mean / unit population sd; targets untouched.

    Without ``stats`` they are computed from ``panel`` (train time); with
    ``stats`` they are applied as given (test time). Constant columns pass
    through unchanged and are flagged in ``stats.constant``.
    """
    if stats is None:
        stats = compute_stats(panel.X)
        if stats.constant.any():
            names = [panel.feature_names[i] for i in np.flatnonzero(stats.constant)]
            logger.warning("constant feature(s) left unscaled: %s", names)
    Z = stats.apply(panel.X)
    return replace(panel, X=Z, stats=stats), stats


# ---------------------------------------------------------------------------
# Panel cache
# ---------------------------------------------------------------------------

_CACHE_MAGIC = "# deepstress-panel v1"


def save_panel(panel: SupervisedPanel, path) -> None:
    """Write the canonical columnar panel serialization.

    Line 1 is ``# deepstress-panel v1 <json meta>`` (recipe, dropped count,
    optional standardization stats). Line 2 is the CSV header:
    ``bank_id, quarter, x:<feature>..., y:<target>..., s:<state>..., car_next``.
    Floats use ``repr`` so a reload is bit-exact.
    """
    meta = {"recipe": panel.recipe.to_dict(), "dropped": panel.dropped,
            "stats": panel.stats.to_dict() if panel.stats is not None else None}
    header = (["bank_id", "quarter"] + [f"x:{n}" for n in panel.feature_names]
              + [f"y:{n}" for n in TARGET_NAMES] + [f"s:{n}" for n in STATE_NAMES] + ["car_next"])
    with Path(path).open("w", newline="") as fh:
        fh.write(f"{_CACHE_MAGIC} {json.dumps(meta, sort_keys=True)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(panel)):
            vals = np.concatenate([panel.X[i], panel.Y[i], panel.states[i], [panel.car_next[i]]])
            w.writerow([panel.bank_ids[i], str(panel.quarters[i]), *(repr(float(v)) for v in vals)])


def load_panel(path) -> SupervisedPanel:
    path = Path(path)
    with path.open(newline="") as fh:
        first = fh.readline()
        if not first.startswith(_CACHE_MAGIC):
            raise DataError(f"{path} is not a deepstress panel cache")
        meta = json.loads(first[len(_CACHE_MAGIC):])
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    feats = [h[2:] for h in header if h.startswith("x:")]
    nf, nt, ns = len(feats), len(TARGET_NAMES), len(STATE_NAMES)
    data = np.array([[float(v) for v in r[2:]] for r in rows], dtype=float).reshape(len(rows), -1)
    stats = FeatureStats.from_dict(meta["stats"]) if meta.get("stats") else None
    return SupervisedPanel(
        bank_ids=tuple(r[0] for r in rows), quarters=tuple(Quarter.parse(r[1]) for r in rows),
        X=data[:, :nf], Y=data[:, nf:nf + nt], states=data[:, nf + nt:nf + nt + ns],
        car_next=data[:, -1], feature_names=tuple(feats),
        recipe=FeatureRecipe.from_dict(meta["recipe"]), dropped=int(meta["dropped"]), stats=stats,
    )


def bank_quarter_fields() -> tuple[str, ...]:
    return tuple(f.name for f in fields(BankQuarter))
