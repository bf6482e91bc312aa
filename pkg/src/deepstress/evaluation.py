"""Backtest metrics, cohort cuts and report emission.

Emitted files (all CSV with ``\\n`` line endings, rows in a fixed order):

``table1_car.csv``
    cohort, row, out_of_sample_car, in_sample_car. Mean one-year-ahead CAR in
    percent per framework plus an ``Actual`` row, 2 decimals.
``table2_metrics.csv``
    cohort, sample, framework, rmse, mape, mae. RMSE and MAE in CAR
    percentage points, MAPE in percent of the actual CAR, 2 decimals.
``metrics.csv``
    Every MetricRow unrounded (fractions), with counts.
``series_<framework>.csv``
    cohort, sample, as_of, target_quarter, n, mean predicted / actual CAR
    and capital per as_of quarter (plot data).
``car_series.csv``
    framework, as_of, target_quarter, n, mean_predicted_car,
    mean_actual_car for the all-banks cohort; one row per framework and
    distinct as_of quarter.
``manifest.json``
    File list, units, omitted empty cells and unmatched projection counts.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError
from .frameworks import Framework, Projection
from .panel import HORIZON, BankQuarter, Quarter

LARGE_BANK_ASSETS = 200e9
SAMPLES = ("out-of-time", "in-sample")
COHORTS = ("all", "large")
# row order of the emitted tables
TABLE_ORDER = ("satellite", "deep-point", "deep-bayes-relu", "deep-bayes-lwta", "constant")
REPORT_VERSION = 1
# sample names as rendered in the emitted tables
TABLE_SAMPLE = {"out-of-time": "out-of-sample", "in-sample": "in-sample"}


def _pair(pred, actual):
    pred = np.asarray(pred, dtype=float).ravel()
    actual = np.asarray(actual, dtype=float).ravel()
    if pred.shape != actual.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions, {actual.size} actuals")
    if pred.size == 0:
        raise ValueError("metrics need at least one pair")
    return pred, actual


def rmse(pred, actual) -> float:
    p, a = _pair(pred, actual)
    return float(np.sqrt(np.mean((p - a) ** 2)))


def mae(pred, actual) -> float:
    p, a = _pair(pred, actual)
    return float(np.mean(np.abs(p - a)))


def mape(pred, actual, return_excluded: bool = False):
    """Mean absolute percentage error as a fraction; pairs with actual 0 are skipped.

    With ``return_excluded`` returns ``(value, n_excluded)``.
    """
    p, a = _pair(pred, actual)
    keep = a != 0
    n_excl = int(np.sum(~keep))
    if not keep.any():
        raise ValueError("all pairs have actual == 0; MAPE undefined")
    value = float(np.mean(np.abs(p[keep] - a[keep]) / np.abs(a[keep])))
    return (value, n_excl) if return_excluded else value


# ---------------------------------------------------------------------------
# Actuals and cohorts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Actuals:
    """Lookup of realised CAR / capital and assets by (bank, quarter)."""

    car: Mapping
    capital: Mapping
    assets: Mapping

    @classmethod
    def from_records(cls, records: Sequence[BankQuarter]) -> "Actuals":
        car, cap, assets = {}, {}, {}
        for r in records:
            key = (r.bank_id, r.quarter)
            car[key] = r.car
            cap[key] = r.capital
            assets[key] = r.assets_avg
        return cls(car, cap, assets)


def subset_large(projections: Sequence[Projection], actuals, threshold: float = LARGE_BANK_ASSETS):
    """Projections of banks whose as_of ``assets_avg`` is strictly above ``threshold``."""
    if not isinstance(actuals, Actuals):
        actuals = Actuals.from_records(actuals)
    return [p for p in projections if actuals.assets.get((p.bank_id, p.as_of), -np.inf) > threshold]


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class MetricRow:
    framework: str
    sample: str
    cohort: str
    rmse: float
    mae: float
    mape: float
    mean_predicted_car: float
    mean_actual_car: float
    n: int
    mape_excluded: int = 0


@dataclass
class SeriesRow:
    framework: str
    sample: str
    cohort: str
    as_of: Quarter
    n: int
    mean_predicted_car: float
    mean_actual_car: float
    mean_predicted_capital: float
    mean_actual_capital: float


@dataclass
class EvaluationReport:
    rows: list = field(default_factory=list)
    series: list = field(default_factory=list)
    unmatched: dict = field(default_factory=dict)
    omitted: list = field(default_factory=list)

    def row(self, framework, sample, cohort) -> MetricRow | None:
        for r in self.rows:
            if (r.framework, r.sample, r.cohort) == (framework, sample, cohort):
                return r
        return None

    def frameworks(self) -> list:
        present = {r.framework for r in self.rows}
        ordered = [f for f in TABLE_ORDER if f in present]
        return ordered + sorted(present - set(ordered))


@dataclass(frozen=True)
class SampleSpec:
    """An evaluation sample: as_of window plus optional entity restriction."""

    window: tuple
    bank_ids: frozenset | None = None

    def contains(self, p: Projection) -> bool:
        lo, hi = self.window
        if not lo <= p.as_of <= hi:
            return False
        return self.bank_ids is None or p.bank_id in self.bank_ids


def _metric_row(fw, sample, cohort, pairs) -> MetricRow:
    pred = np.array([x[0] for x in pairs])
    act = np.array([x[1] for x in pairs])
    try:
        mp, excl = mape(pred, act, return_excluded=True)
    except ValueError:
        mp, excl = float("nan"), len(pairs)
    return MetricRow(fw, sample, cohort, rmse(pred, act), mae(pred, act), mp,
                     float(pred.mean()), float(act.mean()), len(pairs), excl)


def evaluate(projections: Sequence[Projection], actuals, samples: Mapping[str, SampleSpec],
             cohorts: Sequence[str] = COHORTS, threshold: float = LARGE_BANK_ASSETS) -> EvaluationReport:
    """Join projections with realised CAR and compute metrics per framework x sample x cohort.

    A projection is matched when the actual CAR of its target quarter
    (as_of + 4) is known; the rest are counted as unmatched. Empty cells are
    omitted and listed in ``report.omitted``. Raises :class:`DataError` when
    nothing matches at all.
    """
    if not isinstance(actuals, Actuals):
        actuals = Actuals.from_records(actuals)
    report = EvaluationReport()
    by_fw: dict = {}
    for p in projections:
        by_fw.setdefault(p.framework, []).append(p)
    total_matched = 0
    for fw in sorted(by_fw):
        matched = []
        unmatched = 0
        for p in sorted(by_fw[fw], key=lambda p: (str(p.bank_id), p.as_of)):
            key = (p.bank_id, p.target_quarter)
            if key in actuals.car:
                matched.append(p)
            else:
                unmatched += 1
        report.unmatched[fw] = unmatched
        total_matched += len(matched)
        large_ids = {(p.bank_id, p.as_of) for p in subset_large(matched, actuals, threshold)}
        for sample, spec in samples.items():
            in_sample = [p for p in matched if spec.contains(p)]
            for cohort in cohorts:
                if cohort == "all":
                    sel = in_sample
                elif cohort == "large":
                    sel = [p for p in in_sample if (p.bank_id, p.as_of) in large_ids]
                else:
                    raise ValueError(f"unknown cohort {cohort!r}")
                if not sel:
                    report.omitted.append({"framework": fw, "sample": sample, "cohort": cohort})
                    continue
                pairs = [(p.predicted_car, actuals.car[(p.bank_id, p.target_quarter)]) for p in sel]
                report.rows.append(_metric_row(fw, sample, cohort, pairs))
                report.series.extend(_series(fw, sample, cohort, sel, actuals))
    if total_matched == 0:
        raise DataError("no projection matched an actual CAR")
    return report


def _series(fw, sample, cohort, sel, actuals) -> list[SeriesRow]:
    groups: dict = {}
    for p in sel:
        groups.setdefault(p.as_of, []).append(p)
    out = []
    for q in sorted(groups):
        ps = groups[q]
        keys = [(p.bank_id, p.target_quarter) for p in ps]
        out.append(SeriesRow(
            fw, sample, cohort, q, len(ps),
            float(np.mean([p.predicted_car for p in ps])),
            float(np.mean([actuals.car[k] for k in keys])),
            float(np.mean([p.capital for p in ps])),
            float(np.mean([actuals.capital[k] for k in keys])),
        ))
    return out


def actual_mean_car(report: EvaluationReport, sample: str, cohort: str) -> float | None:
    """Mean actual CAR over the union of matched rows (first framework's view)."""
    for fw in report.frameworks():
        r = report.row(fw, sample, cohort)
        if r is not None:
            return r.mean_actual_car
    return None


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------

def _fmt2(v) -> str:
    if v is None or not np.isfinite(v):
        return ""
    return f"{v:.2f}"


def _label(fw: str) -> str:
    try:
        return Framework.parse(fw).label
    except ValueError:
        return fw


def emit_report(report: EvaluationReport, out_dir) -> list[str]:
    """Write the table, series and manifest files; returns the file names."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    fws = report.frameworks()

    def writer(name):
        files.append(name)
        fh = (out / name).open("w", newline="")
        return fh, csv.writer(fh, lineterminator="\n")

    fh, w = writer("table1_car.csv")
    w.writerow(["cohort", "row", "out_of_sample_car", "in_sample_car"])
    for cohort in COHORTS:
        cells = [(fw, [report.row(fw, s, cohort) for s in SAMPLES]) for fw in fws]
        if all(r is None for _, rs in cells for r in rs):
            continue
        for fw, rs in cells:
            w.writerow([cohort, _label(fw), *(_fmt2(None if r is None else 100 * r.mean_predicted_car)
                                              for r in rs)])
        acts = [actual_mean_car(report, s, cohort) for s in SAMPLES]
        w.writerow([cohort, "Actual", *(_fmt2(None if a is None else 100 * a) for a in acts)])
    fh.close()

    fh, w = writer("table2_metrics.csv")
    w.writerow(["cohort", "sample", "framework", "rmse", "mape", "mae"])
    for cohort in COHORTS:
        for sample in SAMPLES:
            for fw in fws:
                r = report.row(fw, sample, cohort)
                if r is None:
                    continue
                w.writerow([cohort, TABLE_SAMPLE[sample], _label(fw), _fmt2(100 * r.rmse), _fmt2(100 * r.mape),
                            _fmt2(100 * r.mae)])
    fh.close()

    fh, w = writer("metrics.csv")
    cols = list(MetricRow.__dataclass_fields__)
    w.writerow(cols)
    for cohort in COHORTS:
        for sample in SAMPLES:
            for fw in fws:
                r = report.row(fw, sample, cohort)
                if r is not None:
                    w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])
    fh.close()

    series_cols = ["cohort", "sample", "as_of", "target_quarter", "n", "mean_predicted_car",
                   "mean_actual_car", "mean_predicted_capital", "mean_actual_capital"]
    for fw in fws:
        fh, w = writer(f"series_{fw}.csv")
        w.writerow(series_cols)
        rows = [s for s in report.series if s.framework == fw]
        rows.sort(key=lambda s: (COHORTS.index(s.cohort), SAMPLES.index(s.sample), s.as_of))
        for s in rows:
            w.writerow([s.cohort, s.sample, str(s.as_of), str(s.as_of.shift(HORIZON)), s.n,
                        repr(s.mean_predicted_car), repr(s.mean_actual_car),
                        repr(s.mean_predicted_capital), repr(s.mean_actual_capital)])
        fh.close()

    fh, w = writer("car_series.csv")
    w.writerow(["framework", "as_of", "target_quarter", "n", "mean_predicted_car", "mean_actual_car"])
    for fw in fws:
        # one row per as_of over the all-banks cohort, pooling the samples
        rows = [s for s in report.series if s.framework == fw and s.cohort == "all"]
        merged: dict = {}
        for s in rows:
            m = merged.setdefault(s.as_of, [0, 0.0, 0.0])
            m[0] += s.n
            m[1] += s.n * s.mean_predicted_car
            m[2] += s.n * s.mean_actual_car
        for q in sorted(merged):
            n, sp, sa = merged[q]
            w.writerow([fw, str(q), str(q.shift(HORIZON)), n, repr(sp / n), repr(sa / n)])
    fh.close()

    manifest = {
        "version": REPORT_VERSION,
        "files": sorted(files + ["manifest.json"]),
        "frameworks": fws,
        "samples": list(SAMPLES),
        "cohorts": list(COHORTS),
        "omitted": report.omitted,
        "unmatched": {k: report.unmatched[k] for k in sorted(report.unmatched)},
        "units": {
            "table1_car.csv": "mean CAR in percent",
            "table2_metrics.csv": "rmse and mae in CAR percentage points; mape in percent of actual CAR",
            "metrics.csv": "fractions",
        },
        "footnote": ("The published tables do not state the unit convention of MAPE and MAE; "
                     "this report uses percentage points for RMSE/MAE and percent for MAPE."),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return sorted(files + ["manifest.json"])


def read_table(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
