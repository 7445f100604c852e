"""Table-driven low-income classification.

A :class:`ThresholdTable` maps (region, household size) to an annual income
cutoff.  A household is low-income when its income does not exceed the
cutoff for its region and size.  Survey incomes reported as brackets are
reduced to a single dollar figure by a :class:`BracketMap` first.

Table CSV columns: ``definition,region_code,household_size,cutoff_usd``
(extra columns such as ``source`` are ignored).
Bracket CSV columns: ``bracket_id,lower_usd,upper_usd`` (empty upper = open).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from types import MappingProxyType
from typing import IO, Mapping, Union

from .errors import (
    ClassificationError,
    DuplicateKeyError,
    LoadError,
    MonotonicityError,
    NonPositiveCutoffError,
    ValidationError,
)

LOW_INCOME = "low_income"
NOT_LOW_INCOME = "not_low_income"

Source = Union[str, PathLike, IO[str]]


def _open_rows(source: Source) -> tuple[list[dict], list[str]]:
    if hasattr(source, "read"):
        text = source.read()
    else:
        text = Path(source).read_text(encoding="utf-8")
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise LoadError("empty CSV document")
    return [{k.strip(): (v or "").strip() for k, v in row.items() if k is not None} for row in reader], list(
        reader.fieldnames
    )


@dataclass(frozen=True)
class ThresholdTable:
    definition_name: str
    entries: Mapping[tuple[str, int], float]
    default_region: str | None = None
    _by_region: Mapping[str, tuple[tuple[int, float], ...]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        by_region: dict[str, list[tuple[int, float]]] = {}
        for (region, size), cutoff in self.entries.items():
            if size < 1:
                raise LoadError(f"{region}: household size must be >= 1, got {size}")
            if not cutoff > 0:
                raise NonPositiveCutoffError(f"({region}, {size}): cutoff must be positive, got {cutoff}")
            by_region.setdefault(region, []).append((size, float(cutoff)))
        for region, rows in by_region.items():
            rows.sort()
            for (s0, c0), (s1, c1) in zip(rows, rows[1:]):
                if c1 < c0:
                    raise MonotonicityError(
                        f"{self.definition_name} region {region}: cutoff for size {s1} ({c1}) "
                        f"is below size {s0} ({c0})"
                    )
        if self.default_region is not None and self.default_region not in by_region:
            raise LoadError(f"default region {self.default_region!r} has no rows")
        object.__setattr__(self, "entries", MappingProxyType(dict(self.entries)))
        object.__setattr__(
            self, "_by_region", MappingProxyType({r: tuple(v) for r, v in by_region.items()})
        )

    @property
    def regions(self) -> list[str]:
        return sorted(self._by_region)

    def resolve_region(self, region_code: str, metro_code: str | None = None) -> str:
        """County code, then metro code, then the default region."""
        for code in (region_code, metro_code, self.default_region):
            if code is not None and code in self._by_region:
                return code
        raise ClassificationError(
            f"region {region_code!r}"
            + (f" (metro {metro_code!r})" if metro_code else "")
            + f" not in table {self.definition_name!r} and no default region is set"
        )

    def cutoff(self, region: str, household_size: int) -> float:
        """Cutoff for an exact region key; sizes past the table clamp to the largest row."""
        rows = self._by_region[region]
        if household_size < 1:
            raise ValidationError(f"household size must be >= 1, got {household_size}")
        best = None
        for size, c in rows:
            if size <= household_size:
                best = c
        if best is None:
            raise ClassificationError(
                f"table {self.definition_name!r} region {region!r} has no row for size <= {household_size}"
            )
        return best


def load_threshold_table(
    source: Source, definition: str | None = None, default_region: str | None = None
) -> ThresholdTable:
    """Load one definition from a threshold CSV.

    ``definition`` may be omitted when the document holds exactly one.
    """
    rows, fields = _open_rows(source)
    required = {"definition", "region_code", "household_size", "cutoff_usd"}
    missing = required - set(fields)
    if missing:
        raise LoadError(f"threshold table missing columns: {sorted(missing)}")
    names = sorted({r["definition"] for r in rows})
    if definition is None:
        if len(names) != 1:
            raise LoadError(f"document holds definitions {names}; choose one")
        definition = names[0]
    elif definition not in names:
        raise LoadError(f"definition {definition!r} not found; available: {names}")
    entries: dict[tuple[str, int], float] = {}
    for lineno, r in enumerate(rows, start=2):
        if r["definition"] != definition:
            continue
        try:
            size = int(r["household_size"])
            cutoff = float(r["cutoff_usd"])
        except ValueError:
            raise LoadError(f"line {lineno}: unparseable size or cutoff") from None
        if not math.isfinite(cutoff):
            raise NonPositiveCutoffError(f"line {lineno}: cutoff must be finite")
        key = (r["region_code"], size)
        if key in entries:
            raise DuplicateKeyError(f"line {lineno}: duplicate entry for region {key[0]!r} size {size}")
        entries[key] = cutoff
    return ThresholdTable(definition, entries, default_region)


@dataclass(frozen=True)
class Bracket:
    bracket_id: str
    lower: float
    upper: float | None

    def representative(self, rule: str) -> float:
        if self.upper is None:
            return self.lower
        if rule == "midpoint":
            return (self.lower + self.upper) / 2
        if rule == "lower":
            return self.lower
        return self.upper


@dataclass(frozen=True)
class BracketMap:
    brackets: tuple[Bracket, ...]
    representative_rule: str = "midpoint"

    def __post_init__(self):
        object.__setattr__(self, "brackets", tuple(self.brackets))
        if self.representative_rule not in ("midpoint", "lower", "upper"):
            raise ValidationError(f"unknown representative rule {self.representative_rule!r}")
        ids = [b.bracket_id for b in self.brackets]
        if len(set(ids)) != len(ids):
            raise DuplicateKeyError(f"duplicate bracket ids: {ids}")
        for i, b in enumerate(self.brackets):
            if b.upper is None and i != len(self.brackets) - 1:
                raise LoadError(f"bracket {b.bracket_id!r}: only the last bracket may be open")
            if b.upper is not None and b.upper < b.lower:
                raise LoadError(f"bracket {b.bracket_id!r}: upper below lower")
            if i and b.lower < self.brackets[i - 1].upper:
                raise LoadError(f"bracket {b.bracket_id!r} overlaps or precedes its predecessor")

    def get(self, bracket_id: str) -> Bracket:
        for b in self.brackets:
            if b.bracket_id == bracket_id:
                return b
        raise ValidationError(f"unknown income bracket {bracket_id!r}")


def load_bracket_map(source: Source, representative_rule: str = "midpoint") -> BracketMap:
    rows, fields = _open_rows(source)
    missing = {"bracket_id", "lower_usd", "upper_usd"} - set(fields)
    if missing:
        raise LoadError(f"bracket map missing columns: {sorted(missing)}")
    brackets = []
    for lineno, r in enumerate(rows, start=2):
        try:
            lower = float(r["lower_usd"])
            upper = float(r["upper_usd"]) if r["upper_usd"] else None
        except ValueError:
            raise LoadError(f"line {lineno}: unparseable bound") from None
        brackets.append(Bracket(r["bracket_id"], lower, upper))
    return BracketMap(tuple(brackets), representative_rule)


@dataclass(frozen=True)
class IncomeObservation:
    """One household's income in either exact dollars or a survey bracket."""

    region_code: str
    household_size: int
    income: float | None = None
    bracket_id: str | None = None
    metro_code: str | None = None

    def __post_init__(self):
        if self.household_size < 1:
            raise ValidationError(f"household size must be >= 1, got {self.household_size}")
        if (self.income is None) == (self.bracket_id is None):
            raise ValidationError("give exactly one of income or bracket_id")
        if self.income is not None and not self.income >= 0:
            raise ValidationError(f"income must be >= 0, got {self.income}")


def representative_income(obs: IncomeObservation, brackets: BracketMap | None) -> float:
    if obs.income is not None:
        return float(obs.income)
    if brackets is None:
        raise ValidationError("bracketed income needs a bracket map")
    return brackets.get(obs.bracket_id).representative(brackets.representative_rule)


def classify(obs: IncomeObservation, table: ThresholdTable, brackets: BracketMap | None = None) -> str:
    """``LOW_INCOME`` when the representative income is at or below the cutoff."""
    region = table.resolve_region(obs.region_code, obs.metro_code)
    cutoff = table.cutoff(region, obs.household_size)
    return LOW_INCOME if representative_income(obs, brackets) <= cutoff else NOT_LOW_INCOME
