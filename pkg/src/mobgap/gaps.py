"""Weighted mobility statistics by income class, overall and per cluster.

Every gap is reported as *not-low-income minus low-income*.  Means use
survey weights (or unit weights in unweighted mode); their variances use the
Kish effective sample size, and significance comes from a Welch t-test on
those weighted means.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .errors import ValidationError
from .survey import CATEGORICAL_FEATURES, NUMERIC_FEATURES, HouseholdFeatures, PersonRecord, SurveyStore

LOW = "low"
NOT_LOW = "not_low"
ALL = "all"
INSUFFICIENT = "insufficient_data"

METRIC_UNITS = {
    "daily_person_trips": "trips/person-day",
    "daily_pmt": "miles/person-day",
    "trip_length": "miles/trip",
    "trip_duration": "minutes/trip",
}
PER_DAY = ("daily_person_trips", "daily_pmt")
PER_TRIP = ("trip_length", "trip_duration")

GAP_COLUMNS = ["metric", "group", "n_low", "n_notlow", "mean_low", "mean_notlow",
               "difference", "p_value", "significant", "status"]
SUMMARY_COLUMNS = ["group", "variable", "level", "unweighted", "weighted"]


@dataclass(frozen=True)
class MetricSpec:
    name: str
    exclude_modes: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.name not in METRIC_UNITS:
            raise ValidationError(f"unknown metric {self.name!r}")
        object.__setattr__(self, "exclude_modes", frozenset(str(m) for m in self.exclude_modes))
        if self.name in PER_DAY and self.exclude_modes:
            raise ValidationError(f"{self.name} counts every trip; exclude_modes must be empty")

    @property
    def unit(self) -> str:
        return METRIC_UNITS[self.name]

    @property
    def weight_kind(self) -> str:
        return "person" if self.name in PER_DAY else "trip"


def default_metrics(air_modes: Iterable[str] = ("19",)) -> list[MetricSpec]:
    """The four gap metrics; air trips are dropped from the per-trip pair only."""
    air = frozenset(air_modes)
    return [
        MetricSpec("daily_person_trips"),
        MetricSpec("daily_pmt"),
        MetricSpec("trip_length", air),
        MetricSpec("trip_duration", air),
    ]


@dataclass(frozen=True)
class GroupStat:
    group_label: str
    income_class: str
    n_unweighted: int
    n_effective: float
    mean: float
    variance_of_mean: float


@dataclass(frozen=True)
class GapResult:
    metric: MetricSpec
    group_label: str
    low: GroupStat | None
    not_low: GroupStat | None
    difference: float | None
    p_value: float | None
    significant_5pct: bool

    @property
    def status(self) -> str:
        return "ok" if self.difference is not None else INSUFFICIENT


def weighted_mean(values, weights) -> tuple[float, float, float]:
    """Weighted mean, variance of that mean, and Kish effective sample size.

    The variance uses the weighted sample variance with an effective-size
    Bessel correction, so unit weights give the textbook ``s**2 / n``.  With a
    single effective observation the variance is ``nan``.
    """
    v = np.asarray(values, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if v.shape != w.shape or v.ndim != 1:
        raise ValidationError("values and weights must be 1-D and equally long")
    if v.size == 0 or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValidationError("weights must be finite, non-negative and non-empty")
    total = w.sum()
    if total <= 0:
        raise ValidationError("weights sum to zero")
    mean = float((w * v).sum() / total)
    n_eff = float(total**2 / (w**2).sum())
    if n_eff <= 1:
        return mean, math.nan, n_eff
    pop_var = float((w * (v - mean) ** 2).sum() / total)
    sample_var = pop_var * n_eff / (n_eff - 1)
    return mean, sample_var / n_eff, n_eff


def welch_test(a: GroupStat, b: GroupStat) -> float:
    """Two-sided Welch p-value for the difference of two weighted means."""
    for s in (a, b):
        if not s.n_effective > 1 or not math.isfinite(s.variance_of_mean):
            raise ValidationError(f"{s.group_label}/{s.income_class}: needs n_effective > 1 and finite variance")
    va, vb = a.variance_of_mean, b.variance_of_mean
    v = va + vb
    diff = abs(a.mean - b.mean)
    if v == 0:
        return 1.0 if diff == 0 else 0.0
    t = diff / math.sqrt(v)
    # Welch-Satterthwaite df written with variance shares so tiny variances cannot underflow
    ra, rb = va / v, vb / v
    df = 1.0 / (ra**2 / (a.n_effective - 1) + rb**2 / (b.n_effective - 1))
    return float(min(1.0, max(0.0, 2.0 * stats.t.sf(t, df))))


def person_day_metric(store: SurveyStore, person: PersonRecord | tuple[str, str], metric: MetricSpec) -> float:
    """Trips or miles one person reported on the travel day (0 without trips)."""
    if metric.name not in PER_DAY:
        raise ValidationError(f"{metric.name} is not a per-day metric")
    hid, pid = (person.household_id, person.person_id) if isinstance(person, PersonRecord) else person
    t = store.trips
    mine = t[(t["household_id"] == hid) & (t["person_id"] == pid)]
    if metric.name == "daily_person_trips":
        return float(len(mine))
    return float(mine["distance"].sum())


def per_trip_metric(store: SurveyStore, metric: MetricSpec) -> list[tuple[float, float]]:
    """(value, trip weight) for every trip whose mode is not excluded."""
    df = _trip_values(store, metric)
    return list(zip(df["value"].tolist(), df["weight"].tolist()))


def _trip_values(store: SurveyStore, metric: MetricSpec) -> pd.DataFrame:
    if metric.name not in PER_TRIP:
        raise ValidationError(f"{metric.name} is not a per-trip metric")
    t = store.trips[~store.trips["mode_code"].isin(metric.exclude_modes)]
    col = "distance" if metric.name == "trip_length" else "duration"
    return pd.DataFrame({"household_id": t["household_id"].to_numpy(),
                         "value": t[col].to_numpy(dtype=np.float64),
                         "weight": t["trip_weight"].to_numpy(dtype=np.float64)})


def _person_values(store: SurveyStore, metric: MetricSpec) -> pd.DataFrame:
    keys = ["household_id", "person_id"]
    per = store.trips.groupby(keys, sort=False).agg(n=("distance", "size"), miles=("distance", "sum"))
    joined = store.persons[keys + ["person_weight"]].join(per, on=keys)
    col = "n" if metric.name == "daily_person_trips" else "miles"
    return pd.DataFrame({"household_id": joined["household_id"].to_numpy(),
                         "value": joined[col].fillna(0).to_numpy(dtype=np.float64),
                         "weight": joined["person_weight"].to_numpy(dtype=np.float64)})


def metric_values(store: SurveyStore, metric: MetricSpec) -> pd.DataFrame:
    """Observation table (household_id, value, weight) for one metric."""
    return _person_values(store, metric) if metric.name in PER_DAY else _trip_values(store, metric)


def _normalise_class(c: str) -> str:
    c = str(c)
    if c in (LOW, "low_income"):
        return LOW
    if c in (NOT_LOW, "not_low_income"):
        return NOT_LOW
    raise ValidationError(f"unknown income class {c!r}")


def _group_order(labels: Iterable[str]) -> list[str]:
    labels = sorted(set(labels))
    try:
        return sorted(labels, key=int)
    except ValueError:
        return labels


@dataclass
class GapReport:
    results: list[GapResult]
    stats: list[GroupStat]
    weighted: bool = True

    def rows(self) -> list[dict]:
        out = []
        for r in self.results:
            out.append({
                "metric": r.metric.name,
                "group": r.group_label,
                "n_low": r.low.n_unweighted if r.low else 0,
                "n_notlow": r.not_low.n_unweighted if r.not_low else 0,
                "mean_low": r.low.mean if r.low else None,
                "mean_notlow": r.not_low.mean if r.not_low else None,
                "difference": r.difference,
                "p_value": r.p_value,
                "significant": r.significant_5pct,
                "status": r.status,
            })
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(GAP_COLUMNS)
        for row in self.rows():
            w.writerow([_fmt(row[c]) for c in GAP_COLUMNS])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "weighted": self.weighted,
            "gaps": [{k: _json_num(v) for k, v in row.items()} for row in self.rows()],
            "group_stats": [{k: _json_num(v) for k, v in s.__dict__.items()} for s in self.stats],
        }

    def get(self, metric: str, group: str = ALL) -> GapResult:
        for r in self.results:
            if r.metric.name == metric and r.group_label == group:
                return r
        raise KeyError((metric, group))


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _json_num(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def compute_gaps(
    store: SurveyStore,
    income_classes: Mapping[str, str],
    assignments: Mapping[str, object],
    metrics: Sequence[MetricSpec] | None = None,
    weighted: bool = True,
) -> GapReport:
    """Per-metric gaps for every cluster and for all households together.

    ``income_classes`` and ``assignments`` are keyed by household id and must
    cover every household in ``store``.  A group missing either income class
    is reported with status ``insufficient_data`` rather than a zero gap.
    """
    metrics = list(metrics) if metrics is not None else default_metrics(store.codes.air_modes)
    hh_ids = store.households.index
    missing = [h for h in hh_ids if h not in income_classes or h not in assignments]
    if missing:
        raise ValidationError(f"{len(missing)} household(s) lack an income class or cluster label, e.g. {missing[0]!r}")
    cls = pd.Series({h: _normalise_class(income_classes[h]) for h in hh_ids})
    lab = pd.Series({h: str(assignments[h]) for h in hh_ids})
    groups = _group_order(lab.unique()) + [ALL]

    results: list[GapResult] = []
    all_stats: list[GroupStat] = []
    for metric in metrics:
        obs = metric_values(store, metric)
        obs["cls"] = cls.reindex(obs["household_id"]).to_numpy()
        obs["grp"] = lab.reindex(obs["household_id"]).to_numpy()
        if not weighted:
            obs["weight"] = 1.0
        for g in groups:
            sub = obs if g == ALL else obs[obs["grp"] == g]
            side = {}
            for c in (LOW, NOT_LOW):
                part = sub[sub["cls"] == c]
                if len(part) == 0 or part["weight"].sum() <= 0:
                    side[c] = None
                    continue
                m, var, neff = weighted_mean(part["value"].to_numpy(), part["weight"].to_numpy())
                side[c] = GroupStat(g, c, len(part), neff, m, var)
                all_stats.append(side[c])
            lo, hi = side[LOW], side[NOT_LOW]
            if lo is None or hi is None:
                results.append(GapResult(metric, g, lo, hi, None, None, False))
                continue
            try:
                p = welch_test(lo, hi)
            except ValidationError:
                p = None
            results.append(GapResult(metric, g, lo, hi, hi.mean - lo.mean, p, p is not None and p < 0.05))
    return GapReport(results, all_stats, weighted)


def median(values: Sequence[float], weights: Sequence[float] | None = None) -> float:
    """Median; with an even split the two middle values are averaged.

    Weighted form: the value where cumulative weight first reaches half the
    total, averaged with the next value when it reaches exactly half.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValidationError("median of an empty sample")
    w = np.ones_like(v) if weights is None else np.asarray(weights, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    v, w = v[order], w[order]
    cum = np.cumsum(w)
    half = cum[-1] / 2
    i = int(np.searchsorted(cum, half))
    if math.isclose(cum[i], half, rel_tol=1e-12) and i + 1 < v.size:
        return float((v[i] + v[i + 1]) / 2)
    return float(v[i])


def cluster_summary(
    store: SurveyStore,
    features: Mapping[str, HouseholdFeatures],
    assignments: Mapping[str, object],
    income_classes: Mapping[str, str],
) -> pd.DataFrame:
    """Per-cluster medians, level percentages, cluster share and low-income share.

    Long format with columns ``group, variable, level, unweighted, weighted``;
    the last group is ``all``.
    """
    ids = [h for h in store.households.index]
    w = store.households.loc[ids, "hh_weight"].to_numpy(dtype=np.float64)
    lab = np.array([str(assignments[h]) for h in ids], dtype=object)
    low = np.array([_normalise_class(income_classes[h]) == LOW for h in ids])
    feats = [features[h] for h in ids]
    n_total, w_total = len(ids), w.sum()

    rows = []
    for g in _group_order(lab) + [ALL]:
        m = np.ones(len(ids), bool) if g == ALL else lab == g
        wm = w[m]
        ws = wm.sum()

        def pct(mask, _m=m, _wm=wm, _ws=ws):
            u = 100.0 * mask[_m].sum() / _m.sum()
            wt = 100.0 * _wm[mask[_m]].sum() / _ws if _ws > 0 else math.nan
            return u, wt

        rows.append((g, "households", "count", float(m.sum()), float(ws)))
        rows.append((g, "households", "share_pct", 100.0 * m.sum() / n_total,
                     100.0 * ws / w_total if w_total > 0 else math.nan))
        rows.append((g, "income", "low_income_pct", *pct(low)))
        for name in NUMERIC_FEATURES:
            vals = np.array([getattr(f, name) for f in feats])
            rows.append((g, name, "median", median(vals[m]), median(vals[m], wm) if ws > 0 else math.nan))
        for name, levels in CATEGORICAL_FEATURES.items():
            vals = np.array([getattr(f, name) for f in feats], dtype=object)
            for level in levels:
                rows.append((g, name, level, *pct(vals == level)))
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def summary_to_csv(summary: pd.DataFrame, decimals: int = 2) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for row in summary.itertuples(index=False):
        w.writerow([row.group, row.variable, row.level,
                    *(("" if math.isnan(x) else f"{x:.{decimals}f}") for x in (row.unweighted, row.weighted))])
    return buf.getvalue()


def report_bundle(report: GapReport, summary: pd.DataFrame) -> str:
    """JSON document holding both the gap table and the cluster summary."""
    doc = report.to_dict()
    doc["schema_version"] = 1
    doc["cluster_summary"] = [
        {k: _json_num(v) for k, v in rec.items()} for rec in summary.to_dict(orient="records")
    ]
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
