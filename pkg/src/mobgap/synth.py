"""Synthetic NHTS-style survey fixtures with planted groups and planted gaps.

Households are drawn from a mixture of groups, each with its own feature
distributions and low-income rate.  Group membership and income class are
written to a ``truth.csv`` sidecar so that clustering and gap recovery can be
scored.  The output files use the NHTS 2017 column names of the default
column map.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ValidationError
from .income import BracketMap, ThresholdTable, load_bracket_map, load_threshold_table
from .survey import CATEGORICAL_FEATURES, data_path

LOW = "low"
NOT_LOW = "not_low"

VERY_LOW_DEFINITION = "HUD-very-low-2017"
LOW_DEFINITION = "HUD-low-2017"

# Planted overall gaps (not-low minus low): +12.4 mi/day PMT, +2.7 mi/trip,
# -1.8 min/trip.  Low-income persons: 3 trips/day of 20/3 miles -> 20 mi/day.
TARGET_PMT_GAP = 12.4
TARGET_LENGTH_GAP = 2.7
TARGET_DURATION_GAP = -1.8
_LOW_MILES = 20.0 / 3.0
_NOT_LOW_MILES = _LOW_MILES + TARGET_LENGTH_GAP
DEFAULT_TRAVEL = {
    LOW: {"daily_trips": 3.0, "trip_miles": _LOW_MILES, "trip_minutes": 21.8},
    NOT_LOW: {
        "daily_trips": (20.0 + TARGET_PMT_GAP) / _NOT_LOW_MILES,
        "trip_miles": _NOT_LOW_MILES,
        "trip_minutes": 20.0,
    },
}

DEFAULT_REGIONS = {
    "NYC": ["36005", "36047", "36061", "36081", "36085"],
    "other_urban": ["36001", "36029", "36055", "36067"],
    "rural": ["36031", "36041", "36097", "36123"],
}
_METRO = {"NYC": "35620"}
_NON_WHITE_CODES = ["2", "3", "4", "5", "6", "97"]
_MODES = {
    LOW: {"1": 0.20, "3": 0.45, "11": 0.15, "16": 0.15, "17": 0.05},
    NOT_LOW: {"1": 0.12, "2": 0.04, "3": 0.70, "11": 0.04, "16": 0.10},
}
AIR_MODE = "19"


def _g(name, share, low_rate, size, vehicles, **levels):
    return {"name": name, "share": share, "low_income_rate": low_rate,
            "size": size, "vehicles": vehicles, "levels": levels}


# Profiles follow five reference clusters, sharpened so that each group
# is dominated by its defining levels.  The reference low-income shares
# average to ~25%; the four not-low-dominated groups are scaled by 1.358 so the
# overall rate lands near 30% while the elderly group keeps 71.7%.
DEFAULT_GROUPS = [
    _g("White household with more vehicles than drivers", 0.142, 0.311,
       {2: 1.0}, {3: 1.0},
       location={"NYC": .02, "other_urban": .95, "rural": .03},
       elderly={"elderly": .05, "non_elderly": .95},
       race={"white": .95, "non_white": .05},
       employment={"working": .95, "non_working": .05},
       education={"higher": .95, "lower": .05},
       gender_balance={"males_lt_females": .03, "males_eq_females": .95, "males_gt_females": .02},
       vehicle_driver_balance={"veh_lt_drv": 0.0, "veh_eq_drv": .05, "veh_gt_drv": .95}),
    _g("Household with equal male and female residents", 0.298, 0.155,
       {2: 1.0}, {2: 1.0},
       location={"NYC": .02, "other_urban": .95, "rural": .03},
       elderly={"elderly": .95, "non_elderly": .05},
       race={"white": .95, "non_white": .05},
       employment={"working": .95, "non_working": .05},
       education={"higher": .95, "lower": .05},
       gender_balance={"males_lt_females": .03, "males_eq_females": .95, "males_gt_females": .02},
       vehicle_driver_balance={"veh_lt_drv": .03, "veh_eq_drv": .95, "veh_gt_drv": .02}),
    _g("Higher educated non-elderly household", 0.186, 0.202,
       {3: .02, 4: .96, 5: .02}, {2: 1.0},
       location={"NYC": .02, "other_urban": .95, "rural": .03},
       elderly={"elderly": .05, "non_elderly": .95},
       race={"white": .95, "non_white": .05},
       employment={"working": .95, "non_working": .05},
       education={"higher": .95, "lower": .05},
       gender_balance={"males_lt_females": .95, "males_eq_females": .03, "males_gt_females": .02},
       vehicle_driver_balance={"veh_lt_drv": .03, "veh_eq_drv": .95, "veh_gt_drv": .02}),
    _g("Elderly household with equal vehicles and drivers", 0.164, 0.717,
       {1: .97, 2: .03}, {1: 1.0},
       location={"NYC": .02, "other_urban": .95, "rural": .03},
       elderly={"elderly": .95, "non_elderly": .05},
       race={"white": .95, "non_white": .05},
       employment={"working": .05, "non_working": .95},
       education={"higher": .05, "lower": .95},
       gender_balance={"males_lt_females": .95, "males_eq_females": .03, "males_gt_females": .02},
       vehicle_driver_balance={"veh_lt_drv": .03, "veh_eq_drv": .95, "veh_gt_drv": .02}),
    _g("NYC household with more male than female residents", 0.210, 0.258,
       {1: .97, 2: .03}, {1: 1.0},
       location={"NYC": .95, "other_urban": .03, "rural": .02},
       elderly={"elderly": .05, "non_elderly": .95},
       race={"white": .95, "non_white": .05},
       employment={"working": .95, "non_working": .05},
       education={"higher": .95, "lower": .05},
       gender_balance={"males_lt_females": .03, "males_eq_females": .02, "males_gt_females": .95},
       vehicle_driver_balance={"veh_lt_drv": .03, "veh_eq_drv": .95, "veh_gt_drv": .02}),
]


@dataclass(frozen=True)
class GroupSpec:
    name: str
    share: float
    low_income_rate: float
    size: Mapping[int, float]
    vehicles: Mapping[int, float]
    levels: Mapping[str, Mapping[str, float]]
    travel: Mapping[str, Mapping[str, float]] | None = None


@dataclass(frozen=True)
class SurveySpec:
    n_households: int = 2000
    groups: tuple[GroupSpec, ...] = ()
    travel: Mapping[str, Mapping[str, float]] = field(default_factory=lambda: DEFAULT_TRAVEL)
    max_daily_trips: int = 6
    trip_miles_cv: float = 0.25
    trip_minutes_cv: float = 0.10
    air_trip_rate: float = 0.0002
    air_trip_miles: float = 200.0
    air_trip_minutes: float = 150.0
    weight_sigma: float = 0.3
    moderate_share: float = 0.2 / 0.7
    extra_adult_prob: float = 0.4
    regions: Mapping[str, list[str]] = field(default_factory=lambda: DEFAULT_REGIONS)

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        if self.n_households < 1:
            raise ValidationError("n_households must be >= 1")
        if not self.groups:
            raise ValidationError("at least one group is required")
        total = sum(g.share for g in self.groups)
        if abs(total - 1.0) > 1e-6:
            raise ValidationError(f"group shares sum to {total}, not 1")
        for g in self.groups:
            if not 0 <= g.low_income_rate <= 1:
                raise ValidationError(f"group {g.name!r}: low_income_rate outside [0, 1]")
            for label, dist in [("size", g.size), ("vehicles", g.vehicles), *g.levels.items()]:
                _check_dist(f"group {g.name!r} {label}", dist)
            if set(g.levels) != set(CATEGORICAL_FEATURES):
                raise ValidationError(f"group {g.name!r}: levels must cover {sorted(CATEGORICAL_FEATURES)}")
            for feat, dist in g.levels.items():
                unknown = set(dist) - set(CATEGORICAL_FEATURES[feat])
                if unknown:
                    raise ValidationError(f"group {g.name!r} {feat}: unknown levels {sorted(unknown)}")
            if min(g.size) < 1 or min(g.vehicles) < 0:
                raise ValidationError(f"group {g.name!r}: sizes must be >= 1 and vehicle counts >= 0")
        for g in self.groups:
            for cls in (LOW, NOT_LOW):
                t = self.travel_for(g, cls)
                if not 0 <= t["daily_trips"] <= self.max_daily_trips:
                    raise ValidationError(f"daily_trips must lie in [0, {self.max_daily_trips}]")

    def travel_for(self, group: GroupSpec, cls: str) -> Mapping[str, float]:
        if group.travel and cls in group.travel:
            return group.travel[cls]
        return self.travel[cls]

    @classmethod
    def from_dict(cls, d: dict) -> "SurveySpec":
        d = dict(d)
        groups = []
        for g in d.pop("groups", DEFAULT_GROUPS):
            groups.append(GroupSpec(
                name=g["name"],
                share=float(g["share"]),
                low_income_rate=float(g["low_income_rate"]),
                size={int(k): float(v) for k, v in g["size"].items()},
                vehicles={int(k): float(v) for k, v in g["vehicles"].items()},
                levels={f: dict(v) for f, v in g["levels"].items()},
                travel=g.get("travel"),
            ))
        return cls(groups=tuple(groups), **d)

    @classmethod
    def default(cls, n_households: int = 2000) -> "SurveySpec":
        return cls.from_dict({"n_households": n_households})

    @classmethod
    def load(cls, path: str | PathLike) -> "SurveySpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "groups"}
        out["groups"] = [
            {"name": g.name, "share": g.share, "low_income_rate": g.low_income_rate,
             "size": {str(k): v for k, v in g.size.items()},
             "vehicles": {str(k): v for k, v in g.vehicles.items()},
             "levels": {f: dict(v) for f, v in g.levels.items()},
             **({"travel": g.travel} if g.travel else {})}
            for g in self.groups
        ]
        return out


def _check_dist(label: str, dist: Mapping) -> None:
    probs = list(dist.values())
    if not probs or any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-6:
        raise ValidationError(f"{label}: probabilities must be non-negative and sum to 1")


def _allocate(n: int, shares: list[float]) -> list[int]:
    """Largest-remainder integer allocation of ``n`` items."""
    raw = [n * s for s in shares]
    counts = [math.floor(r) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def _pick(rng, dist: Mapping, allowed=None):
    keys = [k for k in dist if allowed is None or k in allowed]
    probs = np.array([dist[k] for k in keys], dtype=float)
    if probs.sum() <= 0:
        return None
    return keys[rng.choice(len(keys), p=probs / probs.sum())]


def _gamma_draw(rng, mean: float, cv: float, size: int) -> np.ndarray:
    if size == 0:
        return np.zeros(0)
    if cv <= 0:
        return np.full(size, mean)
    shape = 1.0 / cv**2
    return rng.gamma(shape, mean / shape, size)


@dataclass
class SyntheticSurvey:
    households: list[dict]
    persons: list[dict]
    trips: list[dict]
    truth: list[dict]

    def write(self, outdir: str | PathLike) -> dict[str, Path]:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {}
        for name, rows in (("households", self.households), ("persons", self.persons),
                           ("trips", self.trips), ("truth", self.truth)):
            path = out / f"{name}.csv"
            with open(path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else [], lineterminator="\n")
                writer.writeheader()
                writer.writerows(rows)
            paths[name] = path
        return paths


def _income_bands(region: str, size: int, very_low: ThresholdTable, low: ThresholdTable, brackets: BracketMap):
    vl = very_low.cutoff(very_low.resolve_region(region), size)
    lo = low.cutoff(low.resolve_region(region), size)
    bands = {"low": [], "moderate": [], "high": []}
    for b in brackets.brackets:
        v = b.representative(brackets.representative_rule)
        band = "low" if v <= vl else "moderate" if v <= lo else "high"
        bands[band].append(b.bracket_id)
    return bands


def generate(
    spec: SurveySpec,
    seed: int,
    very_low: ThresholdTable | None = None,
    low: ThresholdTable | None = None,
    brackets: BracketMap | None = None,
) -> SyntheticSurvey:
    """Draw a synthetic survey.  Identical (spec, seed) give identical rows."""
    tables = data_path("thresholds_2017.csv")
    very_low = very_low or load_threshold_table(tables, VERY_LOW_DEFINITION)
    low = low or load_threshold_table(tables, LOW_DEFINITION)
    brackets = brackets or load_bracket_map(data_path("nhts2017_income_brackets.csv"))
    rng = np.random.default_rng(int(seed))

    n = spec.n_households
    counts = _allocate(n, [g.share for g in spec.groups])
    labels = rng.permutation(np.repeat(np.arange(len(spec.groups)), counts))
    income = np.empty(n, dtype=object)
    for gi, g in enumerate(spec.groups):
        members = np.flatnonzero(labels == gi)
        n_low = int(round(g.low_income_rate * len(members)))
        income[members] = NOT_LOW
        income[rng.permutation(members)[:n_low]] = LOW

    hh_rows, person_rows, trip_rows, truth_rows = [], [], [], []
    for i in range(n):
        g = spec.groups[labels[i]]
        hid = f"{i + 1:08d}"
        size = int(_pick(rng, g.size))
        vehicles = int(_pick(rng, g.vehicles))
        n_adults = size if size <= 2 else 2 + int(rng.binomial(size - 2, spec.extra_adult_prob))
        lv = {f: _pick(rng, g.levels[f]) for f in ("location", "elderly", "race", "employment", "education")}

        gender_ok = {"males_lt_females", "males_gt_females"} | ({"males_eq_females"} if size % 2 == 0 else set())
        lv["gender_balance"] = _pick(rng, g.levels["gender_balance"], gender_ok)
        vd_ok = {"veh_eq_drv"} if vehicles <= n_adults else set()
        if vehicles < n_adults:
            vd_ok.add("veh_lt_drv")
        if vehicles >= 1:
            vd_ok.add("veh_gt_drv")
        lv["vehicle_driver_balance"] = _pick(rng, g.levels["vehicle_driver_balance"], vd_ok)
        if lv["gender_balance"] is None or lv["vehicle_driver_balance"] is None:
            raise ValidationError(
                f"group {g.name!r}: no feasible gender or vehicle/driver level for size {size}, "
                f"{vehicles} vehicles, {n_adults} adults"
            )

        vd = lv["vehicle_driver_balance"]
        if vd == "veh_lt_drv":
            drivers = int(rng.integers(vehicles + 1, n_adults + 1))
        elif vd == "veh_eq_drv":
            drivers = vehicles
        else:
            drivers = int(rng.integers(0, min(vehicles - 1, n_adults) + 1))

        location = lv["location"]
        region = str(rng.choice(spec.regions[location]))
        race_code = "1" if lv["race"] == "white" else str(rng.choice(_NON_WHITE_CODES))

        cls = income[i]
        band = LOW if cls == LOW else ("moderate" if rng.random() < spec.moderate_share else "high")
        bands = _income_bands(region, size, very_low, low, brackets)
        choices = bands["low" if band == LOW else band]
        if not choices:
            raise ValidationError(f"no income bracket falls in band {band!r} for region {region}, size {size}")
        bracket = str(rng.choice(choices))

        hh_weight = 100.0 * float(rng.lognormal(0.0, spec.weight_sigma))
        hh_rows.append({
            "HOUSEID": hid, "HHSIZE": size, "HHVEHCNT": vehicles, "DRVRCNT": drivers,
            "HHFAMINC": bracket, "HH_RACE": race_code, "HHCNTYFP": region,
            "HH_CBSA": _METRO.get(location, "XXXXX"), "URBRUR": "2" if location == "rural" else "1",
            "WTHHFIN": f"{hh_weight:.4f}",
        })
        truth_rows.append({"HOUSEID": hid, "group": int(labels[i]), "group_name": g.name,
                           "income_class": cls, "income_band": band,
                           "size": size, "vehicle_count": vehicles, **lv})

        # persons: adults first, then children under 16
        elderly = lv["elderly"] == "elderly"
        ages = [int(rng.integers(18, 65)) for _ in range(n_adults)]
        if elderly:
            ages[0] = int(rng.integers(65, 91))
        ages += [int(rng.integers(0, 16)) for _ in range(size - n_adults)]

        workers = [False] * n_adults
        if lv["employment"] == "working":
            workers = [bool(rng.random() < 0.5) for _ in range(n_adults)]
            workers[int(rng.integers(n_adults))] = True
        if lv["education"] == "higher":
            educ = [int(rng.integers(1, 6)) for _ in range(n_adults)]
            educ[int(rng.integers(n_adults))] = int(rng.integers(4, 6))
        else:
            educ = [int(rng.integers(1, 4)) for _ in range(n_adults)]

        gb = lv["gender_balance"]
        if gb == "males_lt_females":
            males = int(rng.integers(0, (size + 1) // 2))
        elif gb == "males_eq_females":
            males = size // 2
        else:
            males = int(rng.integers(size // 2 + 1, size + 1))
        sexes = ["1"] * males + ["2"] * (size - males)
        sexes = [sexes[j] for j in rng.permutation(size)]

        travel = spec.travel_for(g, cls)
        for p in range(size):
            pid = f"{p + 1:02d}"
            adult = p < n_adults
            p_weight = hh_weight * float(rng.lognormal(0.0, spec.weight_sigma / 3))
            person_rows.append({
                "HOUSEID": hid, "PERSONID": pid, "R_AGE": ages[p], "R_SEX": sexes[p],
                "WORKER": ("1" if workers[p] else "2") if adult else "-1",
                "EDUC": educ[p] if adult else -1, "WTPERFIN": f"{p_weight:.4f}",
            })
            n_trips = int(rng.binomial(spec.max_daily_trips, travel["daily_trips"] / spec.max_daily_trips))
            n_air = int(rng.poisson(spec.air_trip_rate))
            miles = _gamma_draw(rng, travel["trip_miles"], spec.trip_miles_cv, n_trips)
            minutes = _gamma_draw(rng, travel["trip_minutes"], spec.trip_minutes_cv, n_trips)
            modes = [_pick(rng, _MODES[cls]) for _ in range(n_trips)]
            air_miles = _gamma_draw(rng, spec.air_trip_miles, 0.25, n_air)
            air_minutes = _gamma_draw(rng, spec.air_trip_minutes, 0.25, n_air)
            legs = list(zip(miles, minutes, modes)) + [(m, t, AIR_MODE) for m, t in zip(air_miles, air_minutes)]
            for t, (mi, mn, mode) in enumerate(legs, start=1):
                trip_rows.append({
                    "HOUSEID": hid, "PERSONID": pid, "TDTRPNUM": t,
                    "TRPMILES": f"{mi:.3f}", "TRVLCMIN": f"{mn:.2f}", "TRPTRANS": mode,
                    "WTTRDFIN": f"{p_weight * 365:.4f}",
                })
    return SyntheticSurvey(hh_rows, person_rows, trip_rows, truth_rows)


def synthesize(spec: SurveySpec, seed: int, outdir: str | PathLike) -> dict[str, Path]:
    """Write households/persons/trips CSVs plus the ``truth.csv`` sidecar."""
    return generate(spec, seed).write(outdir)
