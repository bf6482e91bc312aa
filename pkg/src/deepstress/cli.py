"""``deepstress`` command line: ingest, train, project, evaluate, report.

All commands read one YAML/JSON run config. Relative paths in it resolve
against the config file's directory; ``--out`` overrides the output
directory. Layout under the output directory::

    resolved_config.json
    cache/bank_panel.csv  cache/macro.csv  cache/supervised.csv  cache/split.json
    artifacts/<framework>/...
    projections/<framework>.csv  projections/<framework>.skips.csv
    report/...               (see :mod:`deepstress.evaluation`)
    report/evaluation.json   (machine-readable report, input of ``report``)

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from . import __version__
from .bma import BmaOptions
from .errors import DataError, NumericalError
from .evaluation import (
    Actuals,
    EvaluationReport,
    MetricRow,
    SampleSpec,
    SeriesRow,
    emit_report,
    evaluate,
)
from .frameworks import (
    FRAMEWORK_NAMES,
    DeepOptions,
    Framework,
    FittedFramework,
    FrameworkOptions,
    fit,
    load_scenario,
    project_all,
    read_projections,
    write_projections,
    write_skips,
)
from .panel import (
    FeatureRecipe,
    Quarter,
    SplitAssignment,
    build_features,
    filter_failed,
    load_bank_panel,
    load_macro,
    load_panel,
    save_panel,
    split_panel,
    write_bank_panel,
    write_macro,
)

logger = logging.getLogger("deepstress")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    """Bad command line or run config (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Run config
# ---------------------------------------------------------------------------

_TOP_KEYS = {"seed", "paths", "schema", "delimiter", "rwa_tolerance", "recipe", "split",
             "frameworks", "options"}


@dataclass
class RunConfig:
    seed: int
    bank_panel: Path
    macro: Path
    out: Path
    scenario: Path | None = None
    schema: dict = field(default_factory=dict)
    delimiter: str = ","
    rwa_tolerance: float | None = 0.05
    recipe: FeatureRecipe = field(default_factory=FeatureRecipe)
    split_ratio: float = 0.8
    split_seed: int = 0
    in_sample: tuple = (Quarter(2010, 1), Quarter(2013, 4))
    out_of_time: tuple = (Quarter(2014, 1), Quarter(2015, 4))
    frameworks: tuple = FRAMEWORK_NAMES
    options: FrameworkOptions = field(default_factory=FrameworkOptions)

    def validate(self) -> None:
        for label, p in (("bank panel", self.bank_panel), ("macro", self.macro), ("scenario", self.scenario)):
            if p is not None and not p.exists():
                raise DataError(f"{label} file not found: {p}")

    def snapshot(self, raw: dict) -> dict:
        """Resolved settings as plain data (paths as written in the config)."""
        return {
            "version": __version__,
            "seed": self.seed,
            "paths": {k: raw.get("paths", {}).get(k) for k in ("bank_panel", "macro", "scenario")},
            "scenario_used": None if self.scenario is None else self.scenario.name,
            "schema": self.schema,
            "delimiter": self.delimiter,
            "rwa_tolerance": self.rwa_tolerance,
            "recipe": self.recipe.to_dict(),
            "split": {"ratio": self.split_ratio, "seed": self.split_seed,
                      "in_sample": [str(q) for q in self.in_sample],
                      "out_of_time": [str(q) for q in self.out_of_time]},
            "frameworks": list(self.frameworks),
            "options": self.options.to_dict(),
        }


def _window(value, name) -> tuple:
    try:
        lo, hi = (Quarter.parse(str(v)) for v in value)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"split.{name} must be two quarters like [2010Q1, 2013Q4]: {exc}") from None
    return lo, hi


def _framework_list(names) -> tuple:
    if isinstance(names, str):
        names = [names]
    out = []
    for n in names:
        if n == "all":
            out.extend(FRAMEWORK_NAMES)
            continue
        try:
            out.append(Framework.parse(n).value)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    # keep canonical order, drop duplicates
    return tuple(f for f in FRAMEWORK_NAMES if f in out)


def load_config(path, out=None, seed_override=None, scenario=None) -> tuple[RunConfig, dict]:
    """Parse a run config file; returns ``(RunConfig, raw mapping)``."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError("config must be a mapping")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise UsageError(f"unknown config key(s): {sorted(unknown)}")
    seed = raw.get("seed") if seed_override is None else seed_override
    if seed is None or isinstance(seed, bool) or not isinstance(seed, int):
        raise UsageError("config needs an explicit integer 'seed' (no entropy default)")
    base = path.parent
    paths = raw.get("paths") or {}

    def resolve(p):
        return None if p is None else (base / p)

    for key in ("bank_panel", "macro"):
        if not paths.get(key):
            raise UsageError(f"config is missing paths.{key}")
    out_dir = Path(out) if out is not None else resolve(paths.get("out", "out"))
    scen = Path(scenario) if scenario is not None else resolve(paths.get("scenario"))

    split = raw.get("split") or {}
    opts = dict(raw.get("options") or {})
    bma = dict(opts.get("bma") or {})
    deep = dict(opts.get("deep") or {})
    # component seeds follow the run seed unless pinned (and always under --seed-override)
    if seed_override is not None or "seed" not in bma:
        bma["seed"] = seed
    if seed_override is not None or "seed" not in deep:
        deep["seed"] = seed
    split_seed = seed if seed_override is not None else split.get("seed", seed)
    try:
        options = FrameworkOptions(BmaOptions.from_dict(bma), DeepOptions.from_dict(deep),
                                   float(opts.get("growth_floor", -0.99)))
        recipe = FeatureRecipe.from_dict(raw.get("recipe") or {})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid options: {exc}") from None
    cfg = RunConfig(
        seed=seed, bank_panel=resolve(paths["bank_panel"]), macro=resolve(paths["macro"]),
        out=out_dir, scenario=scen, schema=dict(raw.get("schema") or {}),
        delimiter=str(raw.get("delimiter", ",")), rwa_tolerance=raw.get("rwa_tolerance", 0.05),
        recipe=recipe, split_ratio=float(split.get("ratio", 0.8)), split_seed=int(split_seed),
        in_sample=_window(split.get("in_sample", ["2010Q1", "2013Q4"]), "in_sample"),
        out_of_time=_window(split.get("out_of_time", ["2014Q1", "2015Q4"]), "out_of_time"),
        frameworks=_framework_list(raw.get("frameworks", list(FRAMEWORK_NAMES))),
        options=options,
    )
    if not cfg.out_of_time[0] > cfg.in_sample[1]:
        raise UsageError("out-of-time window must strictly follow the in-sample window")
    return cfg, raw


def _write_snapshot(cfg: RunConfig, raw: dict) -> None:
    cfg.out.mkdir(parents=True, exist_ok=True)
    text = json.dumps(cfg.snapshot(raw), sort_keys=True, indent=1) + "\n"
    (cfg.out / "resolved_config.json").write_text(text)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _cache(cfg: RunConfig) -> Path:
    return cfg.out / "cache"


def cmd_ingest(cfg: RunConfig) -> dict:
    cfg.validate()
    records = load_bank_panel(cfg.bank_panel, cfg.schema, cfg.delimiter, cfg.rwa_tolerance)
    macro = load_macro(cfg.macro, None, cfg.delimiter)
    kept = filter_failed(records)
    if not kept:
        raise DataError("every bank record is flagged as failed")
    panel = build_features(kept, macro, cfg.recipe)
    split = split_panel(kept, cfg.split_ratio, cfg.split_seed, cfg.in_sample, cfg.out_of_time)
    cache = _cache(cfg)
    cache.mkdir(parents=True, exist_ok=True)
    write_bank_panel(kept, cache / "bank_panel.csv")
    write_macro(macro, cache / "macro.csv")
    save_panel(panel, cache / "supervised.csv")
    (cache / "split.json").write_text(json.dumps(split.to_dict(), sort_keys=True, indent=1) + "\n")
    counts = {"records": len(records), "failed_dropped": len(records) - len(kept),
              "banks": len({r.bank_id for r in kept}), "macro_quarters": len(macro),
              "rows": len(panel), "rows_dropped": panel.dropped,
              "train_banks": len(split.train_ids), "validation_banks": len(split.validation_ids)}
    print("ingest: " + " ".join(f"{k}={v}" for k, v in counts.items()))
    return counts


def _need(path: Path, hint: str) -> Path:
    if not path.exists():
        raise DataError(f"{path} not found; run '{hint}' first")
    return path


def _load_split(cfg: RunConfig) -> SplitAssignment:
    d = json.loads(_need(_cache(cfg) / "split.json", "deepstress ingest").read_text())
    return SplitAssignment(frozenset(d["train_ids"]), frozenset(d["validation_ids"]),
                           tuple(Quarter.parse(q) for q in d["in_sample_window"]),
                           tuple(Quarter.parse(q) for q in d["out_of_time_window"]))


def cmd_train(cfg: RunConfig, framework: str) -> FittedFramework:
    panel = load_panel(_need(_cache(cfg) / "supervised.csv", "deepstress ingest"))
    split = _load_split(cfg)
    window = panel.window_mask(cfg.in_sample)
    train = panel.subset(window & panel.entity_mask(split.train_ids))
    valid = panel.subset(window & panel.entity_mask(split.validation_ids))
    if len(train) == 0:
        raise DataError(f"no training rows in the in-sample window {cfg.in_sample[0]}..{cfg.in_sample[1]}")
    fw = Framework.parse(framework)
    fitted = fit(fw, train, valid if (fw.is_deep and len(valid)) else None, cfg.options)
    dest = cfg.out / "artifacts" / fw.value
    fitted.save(dest)
    print(f"train: framework={fw.value} rows={len(train)} artifact={dest.relative_to(cfg.out)}")
    return fitted


def _windows_as_of(cfg: RunConfig) -> list:
    lo = cfg.in_sample[0].index
    hi = cfg.out_of_time[1].index
    return [Quarter.from_index(i) for i in range(lo, hi + 1)]


def cmd_project(cfg: RunConfig, framework: str) -> list:
    fw = Framework.parse(framework)
    art = cfg.out / "artifacts" / fw.value
    _need(art / "artifact.json", f"deepstress train --framework {fw.value}")
    fitted = FittedFramework.load(art)
    cache = _cache(cfg)
    records = load_bank_panel(_need(cache / "bank_panel.csv", "deepstress ingest"), rwa_tolerance=None)
    macro = load_macro(cache / "macro.csv")
    scenario = load_scenario(cfg.scenario) if cfg.scenario is not None else None
    projections, skips = project_all(fitted, records, macro, _windows_as_of(cfg), scenario)
    if not projections:
        raise DataError(f"{fw.value}: no bank could be projected")
    dest = cfg.out / "projections"
    dest.mkdir(parents=True, exist_ok=True)
    write_projections(projections, dest / f"{fw.value}.csv")
    write_skips(skips, dest / f"{fw.value}.skips.csv")
    print(f"project: framework={fw.value} projections={len(projections)} skipped_banks={len(skips)}")
    return projections


def _samples(cfg: RunConfig, split: SplitAssignment) -> dict:
    return {"out-of-time": SampleSpec(cfg.out_of_time),
            "in-sample": SampleSpec(cfg.in_sample, frozenset(split.train_ids))}


def cmd_evaluate(cfg: RunConfig, frameworks) -> EvaluationReport:
    cache = _cache(cfg)
    records = load_bank_panel(_need(cache / "bank_panel.csv", "deepstress ingest"), rwa_tolerance=None)
    split = _load_split(cfg)
    projections = []
    for fw in frameworks:
        path = cfg.out / "projections" / f"{fw}.csv"
        projections.extend(read_projections(_need(path, f"deepstress project --framework {fw}")))
    samples = _samples(cfg, split)
    report = evaluate(projections, Actuals.from_records(records), samples)
    for fw in frameworks:
        for sample in samples:
            if report.row(fw, sample, "all") is None:
                raise DataError(f"empty sample: no matched {fw} projections in the {sample} window")
    dest = cfg.out / "report"
    emit_report(report, dest)
    _save_report(report, dest / "evaluation.json")
    print(f"evaluate: frameworks={','.join(frameworks)} rows={len(report.rows)} "
          f"omitted={len(report.omitted)} report={dest.relative_to(cfg.out)}")
    return report


def _save_report(report: EvaluationReport, path: Path) -> None:
    data = {
        "rows": [asdict(r) for r in report.rows],
        "series": [{**asdict(s), "as_of": str(s.as_of)} for s in report.series],
        "unmatched": report.unmatched, "omitted": report.omitted,
    }
    path.write_text(json.dumps(data, sort_keys=True, indent=1) + "\n")


def _load_report(path: Path) -> EvaluationReport:
    data = json.loads(_need(path, "deepstress evaluate").read_text())
    return EvaluationReport(
        rows=[MetricRow(**r) for r in data["rows"]],
        series=[SeriesRow(**{**s, "as_of": Quarter.parse(s["as_of"])}) for s in data["series"]],
        unmatched=data["unmatched"], omitted=data["omitted"],
    )


def cmd_report(cfg: RunConfig) -> EvaluationReport:
    """Re-render the report files from the saved evaluation and print the tables."""
    dest = cfg.out / "report"
    report = _load_report(dest / "evaluation.json")
    emit_report(report, dest)
    for name in ("table1_car.csv", "table2_metrics.csv"):
        print(f"== {name}")
        print((dest / name).read_text(), end="")
    return report


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deepstress", description="Bank capital stress-testing pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", required=True, help="run config (YAML or JSON)")
    common.add_argument("--out", help="output directory (overrides paths.out)")
    common.add_argument("--seed-override", type=int, help="replace every seed in the config")
    common.add_argument("-v", "--verbose", action="store_true")
    fw_help = f"framework name or 'all' (repeatable); one of: {', '.join(FRAMEWORK_NAMES)}"
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("ingest", parents=[common], help="load, filter and cache the panel")
    for name, text in (("train", "fit framework artifacts"), ("project", "write projections"),
                       ("evaluate", "score projections and emit the report"),
                       ("run", "ingest, train, project and evaluate in one go")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--framework", action="append", help=fw_help)
        if name in ("project", "run"):
            p.add_argument("--scenario", help="macro scenario CSV (overrides paths.scenario)")
    sub.add_parser("report", parents=[common], help="re-render report tables")
    return parser


def _selected(cfg: RunConfig, args) -> tuple:
    if getattr(args, "framework", None):
        return _framework_list(args.framework)
    return cfg.frameworks


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg, raw = load_config(args.config, args.out, args.seed_override, getattr(args, "scenario", None))
        frameworks = _selected(cfg, args)
        _write_snapshot(cfg, raw)
        if args.command in ("ingest", "run"):
            cmd_ingest(cfg)
        if args.command in ("train", "run"):
            for fw in frameworks:
                cmd_train(cfg, fw)
        if args.command in ("project", "run"):
            for fw in frameworks:
                cmd_project(cfg, fw)
        if args.command in ("evaluate", "run"):
            cmd_evaluate(cfg, frameworks)
        if args.command == "report":
            cmd_report(cfg)
    except UsageError as exc:
        print(f"deepstress: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"deepstress: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"deepstress: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
