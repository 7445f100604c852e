"""Loading NHTS-style household/person/trip extracts and deriving household features.

Source column names are remapped to canonical field names through a
:class:`ColumnMap` (JSON).  The default map targets the public NHTS 2017
file layout; see ``data/nhts2017_column_map.json``.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from os import PathLike
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import LoadError, ValidationError
from .kprototypes import CATEGORICAL, NUMERIC, Column, FeatureSchema, FeatureVector

log = logging.getLogger(__name__)

HOUSEHOLD_FIELDS = (
    "household_id", "size", "vehicle_count", "driver_count", "income",
    "race_code", "region_code", "metro_code", "urban_flag", "hh_weight",
)
PERSON_FIELDS = ("household_id", "person_id", "age", "sex", "worker", "education", "person_weight")
TRIP_FIELDS = ("household_id", "person_id", "trip_id", "distance", "duration", "mode_code", "trip_weight")
OPTIONAL_FIELDS = {"metro_code", "trip_id"}


def data_path(name: str) -> Path:
    """Path of a fixture shipped in ``mobgap/data``."""
    return Path(str(resources.files("mobgap") / "data" / name))


@dataclass(frozen=True)
class Codebook:
    income_kind: str = "bracket"
    white_race: tuple[str, ...] = ("1",)
    urban: tuple[str, ...] = ("1",)
    male: tuple[str, ...] = ("1",)
    female: tuple[str, ...] = ("2",)
    worker_yes: tuple[str, ...] = ("1",)
    college_min: int = 4
    air_modes: tuple[str, ...] = ("19",)

    def __post_init__(self):
        if self.income_kind not in ("bracket", "exact"):
            raise ValidationError(f"income_kind must be 'bracket' or 'exact', got {self.income_kind!r}")
        for name in ("white_race", "urban", "male", "female", "worker_yes", "air_modes"):
            v = getattr(self, name)
            v = (v,) if isinstance(v, (str, int)) else v
            object.__setattr__(self, name, tuple(str(x) for x in v))


@dataclass(frozen=True)
class ColumnMap:
    households: Mapping[str, str]
    persons: Mapping[str, str]
    trips: Mapping[str, str]
    codes: Codebook = field(default_factory=Codebook)

    def __post_init__(self):
        for part, fields in (("households", HOUSEHOLD_FIELDS), ("persons", PERSON_FIELDS), ("trips", TRIP_FIELDS)):
            mapping = dict(getattr(self, part))
            missing = [f for f in fields if f not in mapping and f not in OPTIONAL_FIELDS]
            if missing:
                raise ValidationError(f"column map '{part}' lacks fields {missing}")
            object.__setattr__(self, part, MappingProxyType(mapping))

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnMap":
        return cls(d["households"], d["persons"], d["trips"], Codebook(**d.get("codes", {})))

    @classmethod
    def load(cls, path: str | PathLike) -> "ColumnMap":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def nhts2017(cls) -> "ColumnMap":
        return cls.load(data_path("nhts2017_column_map.json"))

    def to_dict(self) -> dict:
        return {
            "households": dict(self.households),
            "persons": dict(self.persons),
            "trips": dict(self.trips),
            "codes": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.codes.__dict__.items()},
        }


@dataclass(frozen=True)
class Diagnostic:
    file: str
    line: int
    message: str

    def __str__(self) -> str:
        return f"{self.file}:{self.line}: {self.message}"


@dataclass(frozen=True)
class HouseholdRecord:
    household_id: str
    size: int
    vehicle_count: int
    driver_count: int
    income: str
    race_code: str
    region_code: str
    urban_flag: str
    hh_weight: float
    metro_code: str | None = None


@dataclass(frozen=True)
class PersonRecord:
    household_id: str
    person_id: str
    age: float
    sex: str
    worker_flag: bool
    education_code: int
    person_weight: float


@dataclass(frozen=True)
class TripRecord:
    household_id: str
    person_id: str
    trip_id: str
    distance: float
    duration: float
    mode_code: str
    trip_weight: float


@dataclass(frozen=True, eq=False)
class SurveyStore:
    """Validated survey tables with canonical column names.

    ``households`` is indexed by ``household_id``; ``persons`` and ``trips``
    carry ``household_id``/``person_id`` columns.  Sex is normalised to
    ``male``/``female``/``unknown`` and the worker column to a boolean.
    """

    households: pd.DataFrame
    persons: pd.DataFrame
    trips: pd.DataFrame
    codes: Codebook
    diagnostics: tuple[Diagnostic, ...] = ()
    row_counts: Mapping[str, Mapping[str, int]] = field(default_factory=dict)

    def household(self, household_id: str) -> HouseholdRecord:
        r = self.households.loc[household_id]
        return HouseholdRecord(
            household_id=household_id,
            size=int(r["size"]),
            vehicle_count=int(r["vehicle_count"]),
            driver_count=int(r["driver_count"]),
            income=r["income"],
            race_code=r["race_code"],
            region_code=r["region_code"],
            urban_flag=r["urban_flag"],
            hh_weight=float(r["hh_weight"]),
            metro_code=r.get("metro_code") or None,
        )

    def without(self, household_ids: Iterable[str]) -> "SurveyStore":
        """Copy with the given households and their persons and trips removed."""
        drop = set(household_ids)
        if not drop:
            return self
        return SurveyStore(
            households=self.households[~self.households.index.isin(drop)],
            persons=self.persons[~self.persons["household_id"].isin(drop)].reset_index(drop=True),
            trips=self.trips[~self.trips["household_id"].isin(drop)].reset_index(drop=True),
            codes=self.codes,
            diagnostics=self.diagnostics,
            row_counts=self.row_counts,
        )

    def persons_of(self, household_id: str) -> list[PersonRecord]:
        sub = self.persons[self.persons["household_id"] == household_id]
        return [_person(r) for r in sub.itertuples(index=False)]

    def iter_households(self) -> Iterator[tuple[HouseholdRecord, list[PersonRecord]]]:
        grouped = {hid: [_person(r) for r in g.itertuples(index=False)]
                   for hid, g in self.persons.groupby("household_id", sort=False)}
        for hid in self.households.index:
            yield self.household(hid), grouped.get(hid, [])


def _person(r) -> PersonRecord:
    return PersonRecord(r.household_id, r.person_id, float(r.age), r.sex, bool(r.worker),
                        int(r.education), float(r.person_weight))


def _read(source, label: str, mapping: Mapping[str, str], required: Sequence[str]) -> pd.DataFrame:
    try:
        df = pd.read_csv(source, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise LoadError(f"{label}: cannot parse CSV ({exc})") from exc
    missing = [f"{mapping[f]} (for {f})" for f in required if f in mapping and mapping[f] not in df.columns]
    if missing:
        raise LoadError(f"{label}: missing mapped columns {missing}")
    out = pd.DataFrame({f: df[mapping[f]].str.strip() for f in required if f in mapping})
    out["_line"] = np.arange(len(df)) + 2
    return out


class _Checker:
    def __init__(self, label: str, df: pd.DataFrame):
        self.label = label
        self.df = df
        self.bad = pd.Series(False, index=df.index)
        self.diagnostics: list[Diagnostic] = []

    def flag(self, mask: pd.Series, message: str) -> None:
        mask = mask & ~self.bad
        for line in self.df.loc[mask, "_line"]:
            self.diagnostics.append(Diagnostic(self.label, int(line), message))
        self.bad |= mask

    def number(self, col: str, *, integer: bool = False, minimum: float | None = 0) -> pd.Series:
        vals = pd.to_numeric(self.df[col], errors="coerce")
        self.flag(vals.isna() | ~np.isfinite(vals.fillna(0)), f"{col}: not a finite number")
        if integer:
            self.flag(vals.notna() & (vals != vals.round()), f"{col}: not an integer")
        if minimum is not None:
            self.flag(vals < minimum, f"{col}: below {minimum}")
        return vals


def load_survey(
    hh_csv,
    person_csv,
    trip_csv,
    column_map: ColumnMap | None = None,
    strict: bool = True,
) -> SurveyStore:
    """Parse and validate the three survey files.

    In strict mode any invalid row aborts with a :class:`LoadError` listing
    the offending lines; otherwise such rows are dropped (cascading to their
    dependants) and reported in ``store.diagnostics``.
    """
    cmap = column_map or ColumnMap.nhts2017()
    codes = cmap.codes

    n_read = {}
    hh = _read(hh_csv, "households", cmap.households, HOUSEHOLD_FIELDS)
    n_read["households"] = len(hh)
    if "metro_code" not in hh:
        hh["metro_code"] = ""
    c = _Checker("households", hh)
    c.flag(hh["household_id"] == "", "household_id: empty")
    c.flag(hh["household_id"].duplicated(keep="first"), "household_id: duplicate")
    hh["size"] = c.number("size", integer=True, minimum=1)
    hh["vehicle_count"] = c.number("vehicle_count", integer=True)
    hh["driver_count"] = c.number("driver_count", integer=True)
    hh["hh_weight"] = c.number("hh_weight")
    c.flag(hh["income"] == "", "income: empty")
    if codes.income_kind == "exact":
        c.number("income")
    diags = list(c.diagnostics)
    hh = hh[~c.bad]

    pp = _read(person_csv, "persons", cmap.persons, PERSON_FIELDS)
    n_read["persons"] = len(pp)
    c = _Checker("persons", pp)
    c.flag(~pp["household_id"].isin(hh["household_id"]), "orphan person: household not found")
    c.flag(pp.duplicated(["household_id", "person_id"], keep="first"), "person_id: duplicate within household")
    pp["age"] = c.number("age")
    pp["person_weight"] = c.number("person_weight")
    edu = pd.to_numeric(pp["education"], errors="coerce")
    c.flag(edu.isna(), "education: not a number")
    pp["education"] = edu
    diags += c.diagnostics
    pp = pp[~c.bad].copy()
    pp["sex"] = np.where(pp["sex"].isin(codes.male), "male", np.where(pp["sex"].isin(codes.female), "female", "unknown"))
    pp["worker"] = pp["worker"].isin(codes.worker_yes)
    pp["education"] = pp["education"].astype(np.int64)

    tt = _read(trip_csv, "trips", cmap.trips, TRIP_FIELDS)
    n_read["trips"] = len(tt)
    if "trip_id" not in tt:
        tt["trip_id"] = (tt.groupby(["household_id", "person_id"]).cumcount() + 1).astype(str)
    c = _Checker("trips", tt)
    known = pd.MultiIndex.from_frame(pp[["household_id", "person_id"]])
    keys = pd.MultiIndex.from_frame(tt[["household_id", "person_id"]])
    c.flag(pd.Series(~keys.isin(known), index=tt.index), "orphan trip: person not found")
    tt["distance"] = c.number("distance")
    tt["duration"] = c.number("duration")
    tt["trip_weight"] = c.number("trip_weight")
    diags += c.diagnostics
    tt = tt[~c.bad].copy()

    if strict and diags:
        shown = "; ".join(str(d) for d in diags[:10])
        more = f" (+{len(diags) - 10} more)" if len(diags) > 10 else ""
        raise LoadError(f"{len(diags)} invalid row(s): {shown}{more}")
    for d in diags:
        log.warning("dropped %s", d)

    counts = {
        "households": {"read": n_read["households"], "kept": len(hh)},
        "persons": {"read": n_read["persons"], "kept": len(pp)},
        "trips": {"read": n_read["trips"], "kept": len(tt)},
    }
    for col in ("size", "vehicle_count", "driver_count"):
        hh[col] = hh[col].astype(np.int64)
    hh = hh.drop(columns="_line").set_index("household_id", drop=False)
    hh.index.name = None
    return SurveyStore(
        households=hh,
        persons=pp.drop(columns="_line").reset_index(drop=True),
        trips=tt.drop(columns="_line").reset_index(drop=True),
        codes=codes,
        diagnostics=tuple(diags),
        row_counts=counts,
    )


def load_geography_map(path: str | PathLike) -> frozenset[str]:
    """Region codes flagged as New York City (``region_code,is_nyc[,name]``)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"region_code", "is_nyc"} <= set(reader.fieldnames):
            raise LoadError("geography map needs region_code and is_nyc columns")
        return frozenset(r["region_code"].strip() for r in reader if r["is_nyc"].strip() in ("1", "true", "True"))


# Level order defines the categorical indices used by the clustering schema.
LOCATION_LEVELS = ("NYC", "other_urban", "rural")
ELDERLY_LEVELS = ("elderly", "non_elderly")
RACE_LEVELS = ("white", "non_white")
EMPLOYMENT_LEVELS = ("working", "non_working")
EDUCATION_LEVELS = ("higher", "lower")
GENDER_LEVELS = ("males_lt_females", "males_eq_females", "males_gt_females")
VEHICLE_DRIVER_LEVELS = ("veh_lt_drv", "veh_eq_drv", "veh_gt_drv")

CATEGORICAL_FEATURES = {
    "location": LOCATION_LEVELS,
    "elderly": ELDERLY_LEVELS,
    "race": RACE_LEVELS,
    "employment": EMPLOYMENT_LEVELS,
    "education": EDUCATION_LEVELS,
    "gender_balance": GENDER_LEVELS,
    "vehicle_driver_balance": VEHICLE_DRIVER_LEVELS,
}
NUMERIC_FEATURES = ("size", "vehicle_count")

HOUSEHOLD_SCHEMA = FeatureSchema(
    tuple(Column(n, NUMERIC) for n in NUMERIC_FEATURES)
    + tuple(Column(n, CATEGORICAL, levels) for n, levels in CATEGORICAL_FEATURES.items())
)


@dataclass(frozen=True)
class HouseholdFeatures:
    size: float
    vehicle_count: float
    location: str
    elderly: str
    race: str
    employment: str
    education: str
    gender_balance: str
    vehicle_driver_balance: str

    def __post_init__(self):
        for name, levels in CATEGORICAL_FEATURES.items():
            if getattr(self, name) not in levels:
                raise ValidationError(f"{name}: {getattr(self, name)!r} is not one of {levels}")


def _compare(a: int, b: int, levels: tuple[str, str, str]) -> str:
    return levels[0] if a < b else levels[1] if a == b else levels[2]


def derive_features(
    household: HouseholdRecord,
    persons: Sequence[PersonRecord],
    nyc_regions: Iterable[str],
    codes: Codebook | None = None,
) -> HouseholdFeatures:
    """The nine clustering features of one household."""
    codes = codes or Codebook()
    if not persons:
        raise ValidationError(f"household {household.household_id!r} has no person records")
    males = sum(p.sex == "male" for p in persons)
    females = sum(p.sex == "female" for p in persons)
    if household.region_code in set(nyc_regions):
        location = "NYC"
    elif household.urban_flag in codes.urban:
        location = "other_urban"
    else:
        location = "rural"
    return HouseholdFeatures(
        size=float(household.size),
        vehicle_count=float(household.vehicle_count),
        location=location,
        elderly="elderly" if any(p.age >= 65 for p in persons) else "non_elderly",
        race="white" if household.race_code in codes.white_race else "non_white",
        employment="working" if any(p.worker_flag for p in persons) else "non_working",
        education="higher" if max(p.education_code for p in persons) >= codes.college_min else "lower",
        gender_balance=_compare(males, females, GENDER_LEVELS),
        vehicle_driver_balance=_compare(household.vehicle_count, household.driver_count, VEHICLE_DRIVER_LEVELS),
    )


def derive_all_features(store: SurveyStore, nyc_regions: Iterable[str]) -> dict[str, HouseholdFeatures]:
    """Features for every household in store order.

    Households without person records raise :class:`ValidationError`.
    """
    nyc = frozenset(nyc_regions)
    return {h.household_id: derive_features(h, persons, nyc, store.codes) for h, persons in store.iter_households()}


def to_feature_matrix(features: Sequence[HouseholdFeatures]) -> tuple[list[FeatureVector], FeatureSchema]:
    """Numeric (size, vehicle_count) then the seven categoricals, as level indices."""
    features = list(features)
    if not features:
        raise ValidationError("no households to convert")
    out = []
    for f in features:
        num = tuple(getattr(f, n) for n in NUMERIC_FEATURES)
        cat = tuple(levels.index(getattr(f, n)) for n, levels in CATEGORICAL_FEATURES.items())
        out.append(FeatureVector(num, cat))
    return out, HOUSEHOLD_SCHEMA
