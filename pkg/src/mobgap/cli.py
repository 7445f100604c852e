"""Command-line entry point: ``mobgap {run,synth,cluster,gaps,elbow}``.

Settings come from an optional JSON file (``--config``); command-line flags
override it.  Every command stages its outputs in a temporary directory next
to ``--out`` and moves them into place only after the whole command succeeds.

Exit codes: 0 success, 1 invalid input, 2 computation failure, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import shutil
import sys
import tempfile
import time
import traceback
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from . import __version__
from .charts import render_elbow_svg, render_gap_svg
from .errors import ComputationError, MobgapError, ValidationError
from .gaps import cluster_summary, compute_gaps, default_metrics, report_bundle, summary_to_csv
from .income import IncomeObservation, classify, load_bracket_map, load_threshold_table
from .kprototypes import (
    DEFAULT_TAU,
    TIE_BREAK_POLICY,
    ClusterConfig,
    as_arrays,
    fit,
    select_elbow,
    sweep_k,
)
from .survey import (
    ColumnMap,
    data_path,
    derive_all_features,
    load_geography_map,
    load_survey,
    to_feature_matrix,
)
from .synth import SurveySpec, synthesize

EXIT_OK, EXIT_VALIDATION, EXIT_COMPUTATION, EXIT_IO = 0, 1, 2, 3

BUILTIN = "builtin"
_BUILTIN_FILES = {
    "column_map": "nhts2017_column_map.json",
    "geography_map": "nys_geography.csv",
    "bracket_map": "nhts2017_income_brackets.csv",
    "threshold_table": "thresholds_2017.csv",
}


@dataclass
class RunConfig:
    """Everything a command needs; serialised verbatim into the manifest."""

    households: str | None = None
    persons: str | None = None
    trips: str | None = None
    synth: bool | str | None = None
    n_households: int = 2000
    column_map: str = BUILTIN
    geography_map: str = BUILTIN
    bracket_map: str = BUILTIN
    representative_rule: str = "midpoint"
    threshold_table: str | None = None
    threshold_definition: str | None = None
    default_region: str | None = None
    seed: int = 0
    k: int | None = None
    k_range: tuple[int, int] | None = None
    tau: float = DEFAULT_TAU
    gamma: float | str = "auto"
    n_restarts: int = 10
    max_iter: int = 100
    standardize: bool = True
    weighted: bool = True
    exclude_modes: list[str] | None = None
    strict: bool = True
    assignments: str | None = None
    out: str | None = None
    jobs: int = field(default=1, metadata={"echo": False})

    @classmethod
    def build(cls, file_values: dict, overrides: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(file_values) - known)
        if unknown:
            raise ValidationError(f"unknown config keys: {unknown}")
        values = dict(file_values)
        if overrides.get("k") is not None:
            values.pop("k_range", None)
        if overrides.get("k_range") is not None:
            values.pop("k", None)
        values.update({k: v for k, v in overrides.items() if v is not None})
        cfg = cls(**values)
        cfg._normalise()
        return cfg

    def _normalise(self) -> None:
        if self.k_range is not None:
            self.k_range = parse_k_range(self.k_range)
        if self.k is not None:
            self.k = int(self.k)
            if self.k < 1:
                raise ValidationError("k must be >= 1")
        for name in ("standardize", "weighted", "strict"):
            setattr(self, name, parse_bool(getattr(self, name)))
        if self.gamma != "auto":
            self.gamma = float(self.gamma)
        if self.exclude_modes is not None:
            self.exclude_modes = sorted(str(m) for m in self.exclude_modes)
        self.seed = int(self.seed)
        self.jobs = max(1, int(self.jobs))

    def require_k_choice(self) -> None:
        if (self.k is None) == (self.k_range is None):
            raise ValidationError("give exactly one of k or k_range")

    def echo(self) -> dict:
        d = asdict(self)
        for f in fields(self):
            if f.metadata.get("echo") is False:
                d.pop(f.name)
        if d["k_range"] is not None:
            d["k_range"] = list(d["k_range"])
        return d


def parse_bool(v: Any) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"not a boolean: {v!r}")


def parse_k_range(v: Any) -> tuple[int, int]:
    try:
        if isinstance(v, str):
            a, b = v.split("..")
        else:
            a, b = v
        lo, hi = int(a), int(b)
    except (TypeError, ValueError):
        raise ValidationError(f"k range must look like A..B, got {v!r}") from None
    if lo < 1 or hi < lo:
        raise ValidationError(f"invalid k range {lo}..{hi}")
    return lo, hi


def _resolve(value: str | None, key: str) -> Path:
    if value is None:
        raise ValidationError(f"{key} is required")
    return data_path(_BUILTIN_FILES[key]) if value == BUILTIN else Path(value)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@contextmanager
def _stage(name: str, timings: dict[str, float]):
    t0 = time.perf_counter()
    try:
        yield
    except (MobgapError, OSError) as exc:
        if getattr(exc, "stage", None) is None:
            exc.stage = name
        raise
    finally:
        timings[name] = round(time.perf_counter() - t0, 3)


class _Run:
    """State of one command invocation: staging area, timings, manifest parts."""

    def __init__(self, command: str, cfg: RunConfig):
        if not cfg.out:
            raise ValidationError("--out is required")
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.staging = Path(tempfile.mkdtemp(prefix=".mobgap-", dir=self.out.parent))
        self.timings: dict[str, float] = {}
        self.manifest: dict[str, Any] = {}
        self.inputs: dict[str, dict] = {}
        self.artifacts: list[str] = []

    def stage(self, name: str):
        return _stage(name, self.timings)

    def write(self, name: str, text: str) -> None:
        path = self.staging / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8", newline="\n")
        self.artifacts.append(name)

    def record_input(self, label: str, path: Path, shown: str | None = None) -> None:
        self.inputs[label] = {"path": shown or str(path), "sha256": _sha256(path)}

    def finish(self) -> None:
        digests = {name: _sha256(self.staging / name) for name in sorted(self.artifacts)}
        doc = {
            "tool": "mobgap",
            "version": __version__,
            "command": self.command,
            "config": self.cfg.echo(),
            "seed": self.cfg.seed,
            "tie_break_policy": TIE_BREAK_POLICY,
            "inputs": self.inputs,
            **self.manifest,
            "artifacts": digests,
            "execution": {"jobs": self.cfg.jobs},
            "timings_s": self.timings,
        }
        (self.staging / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                                    encoding="utf-8")
        self.out.mkdir(parents=True, exist_ok=True)
        for src in sorted(p for p in self.staging.rglob("*") if p.is_file()):
            dest = self.out / src.relative_to(self.staging)
            dest.parent.mkdir(parents=True, exist_ok=True)
            os.replace(src, dest)
        self.cleanup()

    def cleanup(self) -> None:
        shutil.rmtree(self.staging, ignore_errors=True)


@dataclass
class _Loaded:
    store: Any
    classes: dict[str, str]
    features: dict


def _synth_spec(cfg: RunConfig) -> SurveySpec:
    if isinstance(cfg.synth, str) and cfg.synth.lower() not in ("true", "1", "yes"):
        return SurveySpec.load(cfg.synth)
    return SurveySpec.default(cfg.n_households)


def _load(run: _Run) -> _Loaded:
    cfg = run.cfg
    counts: dict[str, Any] = {}
    if cfg.synth:
        with run.stage("synth"):
            paths = synthesize(_synth_spec(cfg), cfg.seed, run.staging / "fixture")
            run.artifacts.extend(f"fixture/{p.name}" for p in paths.values())
        sources = {k: paths[k] for k in ("households", "persons", "trips")}
        shown = {k: f"fixture/{p.name}" for k, p in sources.items()}
    else:
        missing = [k for k in ("households", "persons", "trips") if not getattr(cfg, k)]
        if missing:
            raise ValidationError(f"missing input paths: {missing} (or set synth)")
        sources = {k: Path(getattr(cfg, k)) for k in ("households", "persons", "trips")}
        shown = {k: str(p) for k, p in sources.items()}

    with run.stage("load"):
        for k, p in sources.items():
            run.record_input(k, p, shown[k])
        cmap_path = _resolve(cfg.column_map, "column_map")
        geo_path = _resolve(cfg.geography_map, "geography_map")
        brk_path = _resolve(cfg.bracket_map, "bracket_map")
        if cfg.threshold_table is None:
            raise ValidationError("threshold_table is required; pass a CSV path or 'builtin' with threshold_definition")
        thr_path = _resolve(cfg.threshold_table, "threshold_table")
        for label, p, value in (("column_map", cmap_path, cfg.column_map), ("geography_map", geo_path, cfg.geography_map),
                                ("bracket_map", brk_path, cfg.bracket_map),
                                ("threshold_table", thr_path, cfg.threshold_table)):
            run.record_input(label, p, value if value == BUILTIN else str(p))
        cmap = ColumnMap.load(cmap_path)
        store = load_survey(sources["households"], sources["persons"], sources["trips"], cmap, strict=cfg.strict)
        counts.update({k: dict(v) for k, v in store.row_counts.items()})
        counts["dropped_rows"] = [str(d) for d in store.diagnostics]

    with run.stage("classify"):
        table = load_threshold_table(thr_path, cfg.threshold_definition, cfg.default_region)
        brackets = load_bracket_map(brk_path, cfg.representative_rule)
        classes: dict[str, str] = {}
        failed: dict[str, str] = {}
        for h, _ in store.iter_households():
            try:
                if store.codes.income_kind == "bracket":
                    obs = IncomeObservation(h.region_code, h.size, bracket_id=str(h.income), metro_code=h.metro_code)
                else:
                    obs = IncomeObservation(h.region_code, h.size, income=float(h.income), metro_code=h.metro_code)
                classes[h.household_id] = classify(obs, table, brackets)
            except (ValidationError, ValueError) as exc:
                failed[h.household_id] = f"household {h.household_id}: {exc}"
        if failed and cfg.strict:
            shown = list(failed.values())
            more = f" (+{len(shown) - 5} more)" if len(shown) > 5 else ""
            raise ValidationError(f"{len(shown)} household(s) could not be classified: {'; '.join(shown[:5])}{more}")
        store = store.without(failed)
        counts["unclassified_households"] = list(failed.values())
        counts["classified"] = {
            "low_income": sum(c == "low_income" for c in classes.values()),
            "not_low_income": sum(c == "not_low_income" for c in classes.values()),
        }
        run.manifest["threshold_definition"] = table.definition_name

    with run.stage("features"):
        features = derive_all_features(store, load_geography_map(geo_path))
    counts["analysed_households"] = len(features)
    run.manifest["row_counts"] = counts
    return _Loaded(store, classes, features)


def _cluster(run: _Run, loaded: _Loaded, write_elbow: bool = True):
    cfg = run.cfg
    cfg.require_k_choice()
    with run.stage("cluster"):
        pts, schema = to_feature_matrix(list(loaded.features.values()))
        data = as_arrays(pts, schema)
        template = ClusterConfig(k=1, gamma=cfg.gamma, max_iter=cfg.max_iter, n_restarts=cfg.n_restarts,
                                 seed=cfg.seed, standardize_numeric=cfg.standardize)
        curve = None
        if cfg.k is not None:
            model = fit(data, template.replace(k=cfg.k), schema, n_jobs=cfg.jobs)
            selected = cfg.k
        else:
            curve = sweep_k(data, cfg.k_range, template, schema, n_jobs=cfg.jobs)
            selected = select_elbow(curve, cfg.tau) if len(curve.points) > 1 else curve.ks[0]
            model = curve.model_for(selected)
    run.manifest.update({"selected_k": selected, "gamma_used": model.gamma_used, "tau": cfg.tau,
                         "converged": model.converged, "cost": model.cost})
    if curve is not None and write_elbow:
        run.write("elbow.csv", curve.to_csv())
        run.write("elbow.svg", render_elbow_svg(curve, selected))
    labels = {hid: str(int(c) + 1) for hid, c in zip(loaded.features, model.assignments)}
    return model, curve, labels


def _assignments_csv(labels: dict[str, str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["household_id", "cluster"])
    w.writerows(labels.items())
    return buf.getvalue()


def _read_assignments(path: Path) -> dict[str, str]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"household_id", "cluster"} <= set(reader.fieldnames):
            raise ValidationError(f"{path}: needs household_id and cluster columns")
        return {r["household_id"]: r["cluster"] for r in reader}


def _gaps(run: _Run, loaded: _Loaded, labels: dict[str, str]) -> None:
    cfg = run.cfg
    with run.stage("gaps"):
        missing = [h for h in loaded.features if h not in labels]
        if missing:
            raise ValidationError(f"{len(missing)} household(s) have no cluster label, e.g. {missing[0]!r}")
        air = cfg.exclude_modes if cfg.exclude_modes is not None else loaded.store.codes.air_modes
        metrics = default_metrics(air)
        report = compute_gaps(loaded.store, loaded.classes, labels, metrics, weighted=cfg.weighted)
        other = compute_gaps(loaded.store, loaded.classes, labels, metrics, weighted=not cfg.weighted)
        summary = cluster_summary(loaded.store, loaded.features, labels, loaded.classes)
    run.write("gaps.csv", report.to_csv())
    run.write("gaps_unweighted.csv" if cfg.weighted else "gaps_weighted.csv", other.to_csv())
    run.write("cluster_summary.csv", summary_to_csv(summary))
    run.write("report.json", report_bundle(report, summary))
    for m in metrics:
        run.write(f"gap_{m.name}.svg", render_gap_svg([r for r in report.results if r.metric.name == m.name]))


def cmd_run(cfg: RunConfig) -> _Run:
    cfg.require_k_choice()
    run = _Run("run", cfg)
    try:
        loaded = _load(run)
        model, _, labels = _cluster(run, loaded)
        run.write("cluster_model.json", model.to_json())
        run.write("assignments.csv", _assignments_csv(labels))
        _gaps(run, loaded, labels)
        run.finish()
    finally:
        run.cleanup()
    return run


def cmd_cluster(cfg: RunConfig) -> _Run:
    cfg.require_k_choice()
    run = _Run("cluster", cfg)
    try:
        loaded = _load(run)
        model, _, labels = _cluster(run, loaded)
        run.write("cluster_model.json", model.to_json())
        run.write("assignments.csv", _assignments_csv(labels))
        run.finish()
    finally:
        run.cleanup()
    return run


def cmd_elbow(cfg: RunConfig) -> _Run:
    if cfg.k_range is None:
        raise ValidationError("elbow needs --k-range")
    cfg.k = None
    run = _Run("elbow", cfg)
    try:
        loaded = _load(run)
        _cluster(run, loaded)
        run.finish()
    finally:
        run.cleanup()
    return run


def cmd_gaps(cfg: RunConfig) -> _Run:
    if not cfg.assignments:
        raise ValidationError("gaps needs --assignments (an assignments.csv from a previous run)")
    run = _Run("gaps", cfg)
    try:
        loaded = _load(run)
        path = Path(cfg.assignments)
        run.record_input("assignments", path)
        _gaps(run, loaded, _read_assignments(path))
        run.finish()
    finally:
        run.cleanup()
    return run


def cmd_synth(cfg: RunConfig) -> _Run:
    run = _Run("synth", cfg)
    try:
        spec = _synth_spec(cfg)
        with run.stage("synth"):
            paths = synthesize(spec, cfg.seed, run.staging)
        run.artifacts.extend(p.name for p in paths.values())
        run.write("synth_spec.json", json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
        run.finish()
    finally:
        run.cleanup()
    return run


COMMANDS = {"run": cmd_run, "synth": cmd_synth, "cluster": cmd_cluster, "gaps": cmd_gaps, "elbow": cmd_elbow}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mobgap", description="Household clustering and low-income mobility gaps.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "run": "full pipeline: load, classify, cluster, gaps, charts",
        "synth": "write a synthetic survey with planted groups",
        "cluster": "fit clusters and write the model and assignments",
        "gaps": "compute gaps from an existing assignments.csv",
        "elbow": "sweep k and write the elbow curve",
    }
    for name, text in helps.items():
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", help="JSON settings file; flags override it")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory")
        if name != "synth":
            group = s.add_mutually_exclusive_group()
            group.add_argument("--k", type=int)
            group.add_argument("--k-range", dest="k_range", metavar="A..B")
            s.add_argument("--tau", type=float)
            s.add_argument("--gamma", help="number or 'auto'")
            s.add_argument("--weighted", metavar="BOOL")
            s.add_argument("--strict", metavar="BOOL")
            for opt in ("households", "persons", "trips", "column-map", "geography-map", "bracket-map"):
                s.add_argument(f"--{opt}", dest=opt.replace("-", "_"), metavar="PATH")
            s.add_argument("--threshold-table", dest="threshold_table", help="CSV path or 'builtin'")
            s.add_argument("--threshold-definition", dest="threshold_definition")
            s.add_argument("--synth", nargs="?", const=True, metavar="SPEC",
                           help="analyse a freshly synthesised survey (optionally from a spec JSON)")
            s.add_argument("--jobs", type=int, help="worker threads (results do not depend on it)")
        else:
            s.add_argument("--spec", dest="synth", help="synthesis spec JSON")
        s.add_argument("--n-households", dest="n_households", type=int)
        if name == "gaps":
            s.add_argument("--assignments")
    return p


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    file_values = {}
    if args.config:
        try:
            file_values = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(file_values, dict):
            raise ValidationError(f"{args.config}: top level must be an object")
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        return RunConfig.build(file_values, overrides)
    except TypeError as exc:
        raise ValidationError(f"bad configuration: {exc}") from None


def _fail(exc: BaseException, code: int) -> int:
    stage = getattr(exc, "stage", None)
    where = f" [{stage}]" if stage else ""
    print(f"mobgap: error{where}: {exc}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
        run = COMMANDS[args.command](cfg)
    except ValidationError as exc:
        return _fail(exc, EXIT_VALIDATION)
    except (ComputationError, MobgapError) as exc:
        return _fail(exc, EXIT_COMPUTATION)
    except OSError as exc:
        return _fail(exc, EXIT_IO)
    except Exception as exc:  # noqa: BLE001 - report, never leave a traceback-only exit 1
        traceback.print_exc()
        return _fail(exc, EXIT_COMPUTATION)
    sel = run.manifest.get("selected_k")
    print(f"mobgap {args.command}: wrote {len(run.artifacts) + 1} files to {run.out}"
          + (f" (k={sel})" if sel is not None else ""))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
