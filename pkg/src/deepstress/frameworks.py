"""The three stress-testing frameworks: fit, then project CAR one year ahead.

* ``constant``: the four yield satellites; balances and RWA frozen.
* ``satellite``: nine BMA satellites; RWA = predicted density x grown assets.
* ``deep-*``: one multivariate network for the nine targets (point,
  variational ReLU or variational LWTA); RWA scaled by predicted growth.

Every framework predicts the same kind of 9-vector, so they differ only in
the estimator and the RWA treatment.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import bayes, nn
from .balance import RWA_TAG, BankState, RwaMethod, TargetVector, apply_growth, project_car
from .bma import BmaOptions, SatelliteSet, fit_satellites
from .errors import DataError, InsufficientHistoryError
from .panel import (
    HORIZON,
    MACRO_NAMES,
    NEURAL_TARGETS,
    SATELLITE_TARGETS,
    YIELD_TARGETS,
    BankQuarter,
    FeatureRecipe,
    FeatureStats,
    MacroQuarter,
    Quarter,
    SupervisedPanel,
    bank_state_row,
    feature_vector,
    index_panel,
    standardize,
)

logger = logging.getLogger(__name__)


class Framework(enum.Enum):
    CONSTANT = "constant"
    SATELLITE = "satellite"
    DEEP_POINT = "deep-point"
    DEEP_BAYES_RELU = "deep-bayes-relu"
    DEEP_BAYES_LWTA = "deep-bayes-lwta"

    @classmethod
    def parse(cls, name) -> "Framework":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name))
        except ValueError:
            valid = ", ".join(f.value for f in cls)
            raise ValueError(f"unknown framework {name!r}; valid names: {valid}") from None

    @property
    def rwa_method(self) -> RwaMethod:
        if self is Framework.CONSTANT:
            return RwaMethod.CONSTANT
        if self is Framework.SATELLITE:
            return RwaMethod.SATELLITE_DENSITY
        return RwaMethod.NEURAL_GROWTH

    @property
    def is_deep(self) -> bool:
        return self.value.startswith("deep-")

    @property
    def label(self) -> str:
        return {
            "constant": "Constant Balance Sheet",
            "satellite": "Satellite Modelling (BMS)",
            "deep-point": "Deep Learning (point estimate)",
            "deep-bayes-relu": "Deep Learning (Bayesian ReLU)",
            "deep-bayes-lwta": "Deep Learning (Bayesian LWTA)",
        }[self.value]


FRAMEWORK_NAMES = tuple(f.value for f in Framework)


# ---------------------------------------------------------------------------
# Options
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DeepOptions:
    """Architecture grid and optimiser settings for the network frameworks."""

    widths: tuple = (32, 64, 128)
    depths: tuple = (1, 2, 3, 4, 5)
    dropouts: tuple = (0.0, 0.2, 0.5)
    block_size: int = 2
    epochs: int = 100
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    lr_decay: float = 0.0
    prior_sigma: float = 1.0
    init_rho: float = -5.0
    cv_folds: int = 5
    seed: int = 0
    # share of training entities held out for early epoch selection
    early_stop_fraction: float = 0.2

    def grid(self, n_inputs: int, framework: Framework) -> list[nn.NetworkConfig]:
        activation = "lwta" if framework is Framework.DEEP_BAYES_LWTA else "relu"
        return nn.architecture_grid(
            n_inputs, len(NEURAL_TARGETS), self.widths, self.depths, self.dropouts,
            activation=activation, block_size=self.block_size,
            bayesian=framework in (Framework.DEEP_BAYES_RELU, Framework.DEEP_BAYES_LWTA),
            seed=self.seed, learning_rate=self.learning_rate, momentum=self.momentum,
            batch_size=self.batch_size, epochs=self.epochs, lr_decay=self.lr_decay,
            prior_sigma=self.prior_sigma, init_rho=self.init_rho,
        )

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "DeepOptions":
        d = dict(d or {})
        for key in ("widths", "depths", "dropouts"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class FrameworkOptions:
    bma: BmaOptions = field(default_factory=BmaOptions)
    deep: DeepOptions = field(default_factory=DeepOptions)
    growth_floor: float = -0.99

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "FrameworkOptions":
        d = dict(d or {})
        return cls(BmaOptions.from_dict(d.get("bma")), DeepOptions.from_dict(d.get("deep")),
                   float(d.get("growth_floor", -0.99)))

    def to_dict(self) -> dict:
        return {"bma": asdict(self.bma), "deep": asdict(self.deep), "growth_floor": self.growth_floor}


# ---------------------------------------------------------------------------
# Fitted artifact
# ---------------------------------------------------------------------------

@dataclass
class FittedFramework:
    framework: Framework
    recipe: FeatureRecipe
    stats: FeatureStats
    satellites: SatelliteSet | None = None
    network_config: nn.NetworkConfig | None = None
    network_params: object = None
    report: dict = field(default_factory=dict)
    growth_floor: float = -0.99

    @property
    def output_dim(self) -> int:
        if self.network_config is not None:
            return self.network_config.layer_widths[-1]
        return len(SATELLITE_TARGETS)

    def predict_targets(self, X_std) -> np.ndarray:
        """Predicted 9-vectors (4 growths, 4 yields, RWA measure) for standardized rows."""
        X_std = np.atleast_2d(np.asarray(X_std, dtype=float))
        n = X_std.shape[0]
        fw = self.framework
        if fw is Framework.CONSTANT:
            T = np.zeros((n, 9))
            pred = self.satellites.predict(X_std)
            for j, name in enumerate(YIELD_TARGETS):
                T[:, 4 + j] = pred[name]
            return T
        if fw is Framework.SATELLITE:
            pred = self.satellites.predict(X_std)
            T = np.column_stack([pred[name] for name in SATELLITE_TARGETS])
        elif fw is Framework.DEEP_POINT:
            T = nn.predict(self.network_config, self.network_params, X_std)
        else:
            T = bayes.predict_bayesian(self.network_config, self.network_params, X_std)
        T = np.array(T, dtype=float)
        T[:, :4] = np.maximum(T[:, :4], self.growth_floor)
        if fw.is_deep:
            # RWA growth must also stay above -1
            T[:, 8] = np.maximum(T[:, 8], self.growth_floor)
        else:
            T[:, 8] = np.maximum(T[:, 8], 0.0)
        return T

    # -- persistence -------------------------------------------------------
    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = {"framework": self.framework.value, "recipe": self.recipe.to_dict(),
                "stats": self.stats.to_dict(), "growth_floor": self.growth_floor,
                "report": self.report}
        (d / "artifact.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
        if self.satellites is not None:
            self.satellites.save(d / "satellites")
        if self.network_params is not None:
            if self.framework is Framework.DEEP_POINT:
                nn.save_params(d / "network.bin", self.network_config, self.network_params)
            else:
                bayes.save_bayesian(d / "network.bin", self.network_config, self.network_params)

    @classmethod
    def load(cls, directory) -> "FittedFramework":
        d = Path(directory)
        meta = json.loads((d / "artifact.json").read_text())
        fw = Framework.parse(meta["framework"])
        out = cls(fw, FeatureRecipe.from_dict(meta["recipe"]), FeatureStats.from_dict(meta["stats"]),
                  report=meta.get("report", {}), growth_floor=meta.get("growth_floor", -0.99))
        if (d / "satellites").is_dir():
            names = YIELD_TARGETS if fw is Framework.CONSTANT else SATELLITE_TARGETS
            out.satellites = SatelliteSet.load(d / "satellites", names)
        if fw.is_deep:
            if fw is Framework.DEEP_POINT:
                out.network_config, out.network_params = nn.load_params(d / "network.bin")
            else:
                out.network_config, out.network_params = bayes.load_bayesian(d / "network.bin")
        return out


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def _shared_standardization(train: SupervisedPanel, valid: SupervisedPanel | None):
    if train.stats is None:
        train, stats = standardize(train)
    else:
        stats = train.stats
    if valid is not None and valid.stats is None:
        valid, _ = standardize(valid, stats)
    return train, valid, stats


def _network_fit(framework: Framework, config: nn.NetworkConfig, train: SupervisedPanel,
                 valid: SupervisedPanel | None):
    Y = train.targets(NEURAL_TARGETS)
    Xv = None if valid is None else valid.X
    Yv = None if valid is None else valid.targets(NEURAL_TARGETS)
    if framework is Framework.DEEP_POINT:
        return nn.train(config, train.X, Y, Xv, Yv)
    variant = "lwta" if framework is Framework.DEEP_BAYES_LWTA else "relu"
    return bayes.train_bayesian(config, train.X, Y, Xv, Yv, variant=variant)


def _network_targets(framework, config, params, X, floor):
    fitted = FittedFramework(framework, FeatureRecipe(), FeatureStats(np.zeros(0), np.zeros(0), np.zeros(0, bool)),
                             network_config=config, network_params=params, growth_floor=floor)
    return fitted.predict_targets(X)


def _car_rmse(panel: SupervisedPanel, T: np.ndarray, method: RwaMethod) -> float:
    tv = TargetVector.from_array(T, RWA_TAG[method])
    _, _, car = project_car(BankState.from_array(panel.states), method, tv)
    return float(np.sqrt(np.mean((car - panel.car_next) ** 2)))


def _early_stop_split(panel: SupervisedPanel, fraction: float, seed: int):
    if fraction <= 0:
        return panel, None
    ids = sorted(set(panel.bank_ids), key=str)
    n_hold = int(round(fraction * len(ids)))
    if n_hold < 1 or n_hold >= len(ids):
        return panel, None
    order = np.random.default_rng(seed + 7919).permutation(len(ids))
    held = {ids[i] for i in order[:n_hold]}
    mask = panel.entity_mask(held)
    return panel.subset(~mask), panel.subset(mask)


def fit(framework, train_panel: SupervisedPanel, valid_panel: SupervisedPanel | None = None,
        options: FrameworkOptions | None = None) -> FittedFramework:
    """Fit one framework on ``train_panel``.

    Features are standardized with statistics of the training panel (reused
    unchanged for ``valid_panel`` and at projection). Network frameworks pick
    an architecture by entity-level cross-validation on end-to-end CAR RMSE
    and then train once on the full training panel; ``valid_panel`` (or an
    entity holdout of the training panel) drives early epoch selection.
    """
    fw = Framework.parse(framework)
    options = options or FrameworkOptions()
    if len(train_panel) == 0:
        raise DataError("empty training panel")
    train_panel, valid_panel, stats = _shared_standardization(train_panel, valid_panel)
    out = FittedFramework(fw, train_panel.recipe, stats, growth_floor=options.growth_floor)
    if fw is Framework.CONSTANT:
        out.satellites = fit_satellites(train_panel, options.bma, YIELD_TARGETS)
        out.report = {"satellites": list(YIELD_TARGETS), "n_obs": len(train_panel)}
        return out
    if fw is Framework.SATELLITE:
        out.satellites = fit_satellites(train_panel, options.bma, SATELLITE_TARGETS)
        out.report = {"satellites": list(SATELLITE_TARGETS), "n_obs": len(train_panel)}
        return out

    deep = options.deep
    configs = deep.grid(train_panel.feature_dim, fw)
    method = fw.rwa_method

    def fit_fn(cfg, panel):
        fit_part, stop_part = _early_stop_split(panel, deep.early_stop_fraction, cfg.seed)
        params, _ = _network_fit(fw, cfg, fit_part, stop_part)
        return params

    def score_fn(cfg, params, panel):
        return _car_rmse(panel, _network_targets(fw, cfg, params, panel.X, options.growth_floor), method)

    if len(configs) > 1:
        best, scores = nn.cross_validate(configs, train_panel, deep.cv_folds, deep.seed,
                                         fit_fn=fit_fn, score_fn=score_fn, return_scores=True)
    else:
        best, scores = configs[0], []
    if valid_panel is None:
        fit_part, stop_part = _early_stop_split(train_panel, deep.early_stop_fraction, best.seed)
    else:
        fit_part, stop_part = train_panel, valid_panel
    params, report = _network_fit(fw, best, fit_part, stop_part)
    out.network_config = best
    out.network_params = params
    out.report = {"selected": best.to_dict(), "cv_rmse": [float(s) for s in scores],
                  "candidates": [c.to_dict()["layer_widths"] + [c.dropout_rate] for c in configs],
                  "training": report.to_dict(), "n_obs": len(train_panel)}
    return out


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioPath:
    """Macro overrides by quarter; quarters must be contiguous."""

    overrides: Mapping = field(default_factory=dict)

    def __post_init__(self):
        qs = sorted(self.overrides)
        for a, b in zip(qs, qs[1:]):
            if b - a != 1:
                raise DataError(f"scenario quarters are not contiguous: {a} -> {b}")
        for q, vals in self.overrides.items():
            unknown = set(vals) - set(MACRO_NAMES)
            if unknown:
                raise DataError(f"scenario quarter {q}: unknown macro variable(s) {sorted(unknown)}")

    @property
    def quarters(self) -> list:
        return sorted(self.overrides)

    def check_after(self, as_of: Quarter) -> None:
        if self.overrides and min(self.overrides) <= as_of:
            raise DataError(f"scenario starts at {min(self.overrides)}, not strictly after {as_of}")

    def apply(self, macro: Mapping[Quarter, MacroQuarter]) -> dict:
        """Observed macro with scenario values substituted (new quarters need all 10 values)."""
        out = dict(macro)
        for q, vals in self.overrides.items():
            if q in out:
                out[q] = out[q].with_overrides(vals)
            else:
                missing = [n for n in MACRO_NAMES if n not in vals]
                if missing:
                    raise DataError(f"scenario quarter {q} lies beyond the observed macro series "
                                    f"and lacks {missing}")
                out[q] = MacroQuarter(q, **{n: float(vals[n]) for n in MACRO_NAMES})
        return out


def load_scenario(path) -> ScenarioPath:
    """Read ``quarter,<macro>...`` rows; empty cells keep the observed value."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"scenario file not found: {path}")
    overrides = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or "quarter" not in reader.fieldnames:
            raise DataError(f"{path}: scenario file needs a 'quarter' column")
        for line, row in enumerate(reader, start=2):
            q = Quarter.parse(row["quarter"])
            vals = {}
            for k, v in row.items():
                if k == "quarter" or v is None or v.strip() == "":
                    continue
                try:
                    vals[k] = float(v)
                except ValueError:
                    raise DataError(f"{path}:{line}: cannot parse {k}={v!r}") from None
            if q in overrides:
                raise DataError(f"{path}: duplicate scenario quarter {q}")
            overrides[q] = vals
    return ScenarioPath(overrides)


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Projection:
    bank_id: str
    as_of: Quarter
    framework: str
    targets: np.ndarray
    state: np.ndarray
    capital: float
    rwa: float
    predicted_car: float

    @property
    def target_quarter(self) -> Quarter:
        return self.as_of.shift(HORIZON)

    def target_vector(self) -> TargetVector:
        return TargetVector.from_array(self.targets, RWA_TAG[Framework.parse(self.framework).rwa_method])


@dataclass
class SkipReport:
    entries: dict = field(default_factory=dict)  # bank_id -> list of (quarter, reason)

    def add(self, bank, quarter, reason) -> None:
        self.entries.setdefault(bank, []).append((quarter, reason))

    def __len__(self):
        return len(self.entries)

    def banks(self) -> list:
        return sorted(self.entries, key=str)

    def rows(self):
        for bank in self.banks():
            qs = self.entries[bank]
            yield bank, len(qs), str(min(q for q, _ in qs)), str(max(q for q, _ in qs)), qs[0][1]


def _macro_for(macro, scenario: ScenarioPath | None):
    if scenario is None:
        return dict(macro), None
    last_observed = max(macro) if macro else None
    return scenario.apply(macro), last_observed


def _features_for(series, macro_eff, as_of, recipe, last_observed):
    if as_of.index not in series:
        raise InsufficientHistoryError(f"no record at as_of {as_of}")
    try:
        return feature_vector(series, macro_eff, as_of, recipe)
    except InsufficientHistoryError as exc:
        missing = [as_of.shift(o) for o in recipe.macro_offsets() if as_of.shift(o) not in macro_eff]
        if missing and last_observed is not None and min(missing) > last_observed:
            raise InsufficientHistoryError(f"missing scenario quarter {min(missing)}") from exc
        raise


def _project_rows(fitted: FittedFramework, keys, feats, states) -> list[Projection]:
    if not keys:
        return []
    X = fitted.stats.apply(np.vstack(feats))
    T = fitted.predict_targets(X)
    S = np.vstack(states)
    method = fitted.framework.rwa_method
    tv = TargetVector.from_array(T, RWA_TAG[method])
    state = BankState.from_array(S)
    capital, rwa, car = project_car(state, method, tv)
    rwa = np.broadcast_to(rwa, capital.shape)
    return [
        Projection(bank, q, fitted.framework.value, T[i].copy(), S[i].copy(), float(capital[i]),
                   float(rwa[i]), float(car[i]))
        for i, (bank, q) in enumerate(keys)
    ]


def project_bank(fitted: FittedFramework, history, macro: Mapping[Quarter, MacroQuarter],
                 as_of: Quarter, scenario: ScenarioPath | None = None) -> Projection:
    """Project one bank one year ahead from ``as_of``.

    ``history`` is the bank's records (a list of :class:`BankQuarter` or a
    quarter-index mapping). Raises :class:`InsufficientHistoryError` when a
    lag, or a scenario quarter needed by the features, is missing.
    """
    series = history if isinstance(history, Mapping) else {r.quarter.index: r for r in history}
    if scenario is not None:
        scenario.check_after(as_of)
    macro_eff, last = _macro_for(macro, scenario)
    x = _features_for(series, macro_eff, as_of, fitted.recipe, last)
    rec = series[as_of.index]
    return _project_rows(fitted, [(rec.bank_id, as_of)], [x], [bank_state_row(rec)])[0]


def as_of_quarters(window) -> list[Quarter]:
    if isinstance(window, Quarter):
        return [window]
    window = list(window)
    if len(window) == 2 and all(isinstance(q, Quarter) for q in window) and window[0] <= window[1]:
        lo, hi = window
        return [Quarter.from_index(i) for i in range(lo.index, hi.index + 1)]
    return sorted(window)


def project_all(fitted: FittedFramework, panel: Sequence[BankQuarter],
                macro: Mapping[Quarter, MacroQuarter], as_of, scenario: ScenarioPath | None = None):
    """Project every bank at every as_of quarter in ``as_of`` (a (first, last) pair or a list).

    Returns ``(projections, skips)``; projections are ordered by (bank, as_of)
    regardless of input order. Banks lacking history at some as_of go into
    the skip report (one entry per bank, listing the quarters).
    """
    quarters = as_of_quarters(as_of)
    if scenario is not None and quarters:
        scenario.check_after(quarters[0])
    macro_eff, last = _macro_for(macro, scenario)
    by_bank = index_panel(panel)
    keys, feats, states = [], [], []
    skips = SkipReport()
    for bank in sorted(by_bank, key=str):
        series = by_bank[bank]
        for q in quarters:
            try:
                x = _features_for(series, macro_eff, q, fitted.recipe, last)
            except InsufficientHistoryError as exc:
                skips.add(bank, q, str(exc))
                continue
            if not np.all(np.isfinite(x)):
                skips.add(bank, q, "non-finite feature")
                continue
            keys.append((bank, q))
            feats.append(x)
            states.append(bank_state_row(series[q.index]))
    return _project_rows(fitted, keys, feats, states), skips


def check_projection(p: Projection) -> None:
    """Structural framework/RWA coupling check; raises AssertionError on violation."""
    fw = Framework.parse(p.framework)
    state = BankState.from_array(p.state)
    tv = p.target_vector()
    if fw is Framework.CONSTANT:
        assert p.rwa == state.rwa, "constant framework changed RWA"
        assert apply_growth(state, tv) == state, "constant framework grew the balance sheet"
    elif fw is Framework.SATELLITE:
        assert np.isclose(p.rwa, tv.rwa_measure * state.assets * (1 + tv.g_asset), rtol=1e-12)
    else:
        assert np.isclose(p.rwa, state.rwa * (1 + tv.rwa_measure), rtol=1e-12)
    assert p.predicted_car == p.capital / p.rwa


# ---------------------------------------------------------------------------
# Projection files
# ---------------------------------------------------------------------------

PROJECTION_COLUMNS = (["bank_id", "as_of", "target_quarter", "framework"]
                      + [f"t:{n}" for n in SATELLITE_TARGETS[:8]] + ["t:rwa_measure"]
                      + ["capital", "rwa", "predicted_car"])


def write_projections(projections: Sequence[Projection], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROJECTION_COLUMNS)
        for p in sorted(projections, key=lambda p: (p.framework, str(p.bank_id), p.as_of)):
            w.writerow([p.bank_id, str(p.as_of), str(p.target_quarter), p.framework,
                        *(repr(float(v)) for v in p.targets),
                        repr(p.capital), repr(p.rwa), repr(p.predicted_car)])


def read_projections(path) -> list[Projection]:
    out = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            T = np.array([float(row[c]) for c in PROJECTION_COLUMNS[4:13]])
            out.append(Projection(row["bank_id"], Quarter.parse(row["as_of"]), row["framework"], T,
                                  np.full(6, np.nan), float(row["capital"]), float(row["rwa"]),
                                  float(row["predicted_car"])))
    return out


def write_skips(skips: SkipReport, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bank_id", "n_quarters", "first", "last", "reason"])
        for row in skips.rows():
            w.writerow(row)


__all__ = [
    "Framework", "FRAMEWORK_NAMES", "DeepOptions", "FrameworkOptions", "FittedFramework", "fit",
    "ScenarioPath", "load_scenario", "Projection", "SkipReport", "project_bank", "project_all",
    "check_projection", "write_projections", "read_projections", "write_skips",
]
