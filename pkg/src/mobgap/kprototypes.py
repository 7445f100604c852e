"""K-prototypes clustering for records that mix numeric and categorical columns.

The dissimilarity between a record ``x`` and a prototype ``q`` is::

    sum_j (x_j - q_j)**2  +  gamma * #{categorical j : x_j != q_j}

Prototypes hold per-cluster means for numeric columns and per-cluster modes
for categorical columns.  ``fit`` alternates assignment and prototype update
from several seeded random starts and keeps the cheapest result.  Elbow
selection over a sweep of cluster counts lives here as well.

Every public operation accepts either a sequence of :class:`FeatureVector`
or a pre-stacked :class:`MixedArrays`; large inputs should use the latter.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .errors import EmptyClusterError, InfeasibleError, ValidationError, ComputationError

NUMERIC = "numeric"
CATEGORICAL = "categorical"
SCHEMA_VERSION = 1
TIE_BREAK_POLICY = "lowest-index/v1"
DEFAULT_TAU = 0.07

_MONOTONE_RTOL = 1e-9


@dataclass(frozen=True)
class Column:
    name: str
    kind: str
    categories: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        if self.kind not in (NUMERIC, CATEGORICAL):
            raise ValidationError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == NUMERIC and self.categories:
            raise ValidationError(f"numeric column {self.name!r} must not list categories")
        if self.kind == CATEGORICAL and not self.categories:
            raise ValidationError(f"categorical column {self.name!r} needs at least one category")


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered column declarations.

    Numeric and categorical columns may be interleaved; a :class:`FeatureVector`
    stores the numeric values and the categorical indices separately, each in
    schema order.
    """

    columns: tuple[Column, ...]

    def __post_init__(self):
        cols = tuple(c if isinstance(c, Column) else Column(*c) for c in self.columns)
        object.__setattr__(self, "columns", cols)
        if not cols:
            raise ValidationError("schema needs at least one column")
        names = [c.name for c in cols]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate column names in schema: {names}")

    @property
    def numeric_columns(self) -> list[Column]:
        return [c for c in self.columns if c.kind == NUMERIC]

    @property
    def categorical_columns(self) -> list[Column]:
        return [c for c in self.columns if c.kind == CATEGORICAL]

    @property
    def n_numeric(self) -> int:
        return len(self.numeric_columns)

    @property
    def n_categorical(self) -> int:
        return len(self.categorical_columns)

    @property
    def category_counts(self) -> np.ndarray:
        return np.array([len(c.categories) for c in self.categorical_columns], dtype=np.int64)

    def to_dict(self) -> dict:
        return {
            "columns": [
                {"name": c.name, "kind": c.kind, "categories": list(c.categories)}
                for c in self.columns
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(tuple(Column(c["name"], c["kind"], tuple(c.get("categories", ()))) for c in d["columns"]))


@dataclass(frozen=True)
class FeatureVector:
    numeric: tuple[float, ...] = ()
    categorical: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "numeric", tuple(float(v) for v in self.numeric))
        object.__setattr__(self, "categorical", tuple(int(v) for v in self.categorical))

    def validate(self, schema: FeatureSchema) -> None:
        if len(self.numeric) != schema.n_numeric:
            raise ValidationError(
                f"expected {schema.n_numeric} numeric values, got {len(self.numeric)}"
            )
        if len(self.categorical) != schema.n_categorical:
            raise ValidationError(
                f"expected {schema.n_categorical} categorical values, got {len(self.categorical)}"
            )
        for v, col in zip(self.numeric, schema.numeric_columns):
            if not math.isfinite(v):
                raise ValidationError(f"column {col.name!r}: non-finite value {v}")
        for idx, col in zip(self.categorical, schema.categorical_columns):
            if not 0 <= idx < len(col.categories):
                raise ValidationError(
                    f"column {col.name!r}: category index {idx} outside 0..{len(col.categories) - 1}"
                )


@dataclass(frozen=True, eq=False)
class MixedArrays:
    """Row-stacked records: ``numeric`` is (n, p) float, ``categorical`` is (n, c) int."""

    numeric: np.ndarray
    categorical: np.ndarray

    def __len__(self) -> int:
        return self.numeric.shape[0]

    def row(self, i: int) -> FeatureVector:
        return FeatureVector(tuple(self.numeric[i].tolist()), tuple(self.categorical[i].tolist()))

    def take(self, idx) -> "MixedArrays":
        return MixedArrays(self.numeric[idx], self.categorical[idx])


Points = Union[Sequence[FeatureVector], MixedArrays]


def as_arrays(points: Points, schema: FeatureSchema) -> MixedArrays:
    """Stack and validate ``points`` against ``schema``."""
    if isinstance(points, MixedArrays):
        num = np.asarray(points.numeric, dtype=np.float64)
        cat = np.asarray(points.categorical, dtype=np.int64)
        if num.ndim != 2 or cat.ndim != 2:
            raise ValidationError("MixedArrays fields must be 2-D")
        n = num.shape[0]
        if num.shape != (n, schema.n_numeric) or cat.shape != (n, schema.n_categorical):
            raise ValidationError(
                f"array shapes {num.shape}, {cat.shape} do not match schema "
                f"({schema.n_numeric} numeric, {schema.n_categorical} categorical)"
            )
        if not np.all(np.isfinite(num)):
            raise ValidationError("non-finite numeric value")
        counts = schema.category_counts
        if cat.size and (np.any(cat < 0) or np.any(cat >= counts[None, :])):
            bad = np.argwhere((cat < 0) | (cat >= counts[None, :]))[0]
            raise ValidationError(
                f"row {bad[0]}: category index {cat[bad[0], bad[1]]} out of range for "
                f"column {schema.categorical_columns[bad[1]].name!r}"
            )
        return MixedArrays(num, cat)
    pts = list(points)
    for p in pts:
        p.validate(schema)
    n = len(pts)
    num = np.array([p.numeric for p in pts], dtype=np.float64).reshape(n, schema.n_numeric)
    cat = np.array([p.categorical for p in pts], dtype=np.int64).reshape(n, schema.n_categorical)
    return MixedArrays(num, cat)


def mixed_dissimilarity(x: FeatureVector, q: FeatureVector, gamma: float, schema: FeatureSchema) -> float:
    x.validate(schema)
    q.validate(schema)
    if gamma < 0:
        raise ValidationError(f"gamma must be >= 0, got {gamma}")
    num = sum((a - b) ** 2 for a, b in zip(x.numeric, q.numeric))
    mismatches = sum(a != b for a, b in zip(x.categorical, q.categorical))
    return float(num + gamma * mismatches)


def _distances(num, cat, pnum, pcat, gamma) -> np.ndarray:
    """(n, k) matrix of dissimilarities from every row to every prototype."""
    d = ((num[:, None, :] - pnum[None, :, :]) ** 2).sum(axis=2)
    if cat.shape[1]:
        d = d + gamma * (cat[:, None, :] != pcat[None, :, :]).sum(axis=2)
    return d


def _row_costs(num, cat, pnum, pcat, labels, gamma) -> np.ndarray:
    c = ((num - pnum[labels]) ** 2).sum(axis=1)
    if cat.shape[1]:
        c = c + gamma * (cat != pcat[labels]).sum(axis=1)
    return c


def _update(num, cat, labels, k, n_cats):
    pnum = np.empty((k, num.shape[1]))
    pcat = np.empty((k, cat.shape[1]), dtype=np.int64)
    for j in range(k):
        members = labels == j
        if not members.any():
            raise EmptyClusterError(f"cluster {j} has no members")
        pnum[j] = num[members].mean(axis=0)
        sub = cat[members]
        for c in range(cat.shape[1]):
            # argmax returns the first maximum: ties go to the lowest category index
            pcat[j, c] = np.bincount(sub[:, c], minlength=n_cats[c]).argmax()
    return pnum, pcat


def _prototype_list(pnum, pcat) -> tuple[FeatureVector, ...]:
    return tuple(FeatureVector(tuple(pnum[j].tolist()), tuple(pcat[j].tolist())) for j in range(pnum.shape[0]))


def assign(points: Points, prototypes: Sequence[FeatureVector], gamma: float, schema: FeatureSchema) -> np.ndarray:
    """Index of the nearest prototype for every point (ties to the lowest index)."""
    if len(prototypes) == 0:
        raise ValidationError("assign needs at least one prototype")
    if gamma < 0:
        raise ValidationError(f"gamma must be >= 0, got {gamma}")
    data = as_arrays(points, schema)
    protos = as_arrays(list(prototypes), schema)
    return _distances(data.numeric, data.categorical, protos.numeric, protos.categorical, gamma).argmin(axis=1)


def update_prototypes(points: Points, assignments, schema: FeatureSchema, k: int | None = None) -> list[FeatureVector]:
    """Per-cluster numeric means and categorical modes.

    Raises :class:`EmptyClusterError` when any cluster in ``range(k)`` has no
    members (``k`` defaults to ``max(assignments) + 1``).
    """
    data = as_arrays(points, schema)
    labels = np.asarray(assignments, dtype=np.int64)
    if labels.shape != (len(data),):
        raise ValidationError("one assignment per point is required")
    if labels.size == 0:
        raise ValidationError("no points to update from")
    if np.any(labels < 0):
        raise ValidationError("negative cluster index")
    k = int(labels.max()) + 1 if k is None else k
    pnum, pcat = _update(data.numeric, data.categorical, labels, k, schema.category_counts)
    return list(_prototype_list(pnum, pcat))


def _standardize(num: np.ndarray):
    mean = num.mean(axis=0)
    std = num.std(axis=0)
    # degenerate columns are centred only
    scale = np.where(std > 0, std, 1.0)
    return (num - mean) / scale, tuple(zip(mean.tolist(), scale.tolist()))


def _gamma_from_numeric(num: np.ndarray) -> float:
    if num.shape[1] == 0:
        return 1.0
    return float(0.5 * num.std(axis=0).mean())


def auto_gamma(points: Points, schema: FeatureSchema, standardize: bool = True) -> float:
    """Half the mean population standard deviation of the numeric columns.

    Computed on z-scored columns when ``standardize`` is set, so the result is
    exactly 0.5 for non-degenerate data.  Purely categorical schemas get 1.0.
    """
    data = as_arrays(points, schema)
    if len(data) < 2:
        raise ValidationError("auto_gamma needs at least two points")
    num = data.numeric
    if standardize and num.shape[1]:
        num, _ = _standardize(num)
    return _gamma_from_numeric(num)


@dataclass(frozen=True)
class ClusterConfig:
    k: int
    gamma: float | str = "auto"
    max_iter: int = 100
    n_restarts: int = 10
    seed: int = 0
    standardize_numeric: bool = True

    def __post_init__(self):
        if not isinstance(self.k, (int, np.integer)) or self.k < 1:
            raise ValidationError(f"k must be a positive integer, got {self.k!r}")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be >= 1")
        if self.n_restarts < 1:
            raise ValidationError("n_restarts must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")
        if self.gamma != "auto":
            try:
                g = float(self.gamma)
            except (TypeError, ValueError):
                raise ValidationError(f"gamma must be a number or 'auto', got {self.gamma!r}") from None
            if not g >= 0:
                raise ValidationError(f"gamma must be >= 0, got {self.gamma}")
            object.__setattr__(self, "gamma", g)

    def replace(self, **changes) -> "ClusterConfig":
        d = dict(self.__dict__)
        d.update(changes)
        return ClusterConfig(**d)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True, eq=False)
class ClusterModel:
    schema: FeatureSchema
    prototypes: tuple[FeatureVector, ...]
    gamma_used: float
    assignments: np.ndarray
    cost: float
    iterations_run: int
    standardization: tuple[tuple[float, float], ...] | None = None
    converged: bool = True
    cost_history: tuple[float, ...] = ()
    restart_costs: tuple[float, ...] = ()
    seed: int | None = None

    @property
    def k(self) -> int:
        return len(self.prototypes)

    def transform(self, points: Points) -> MixedArrays:
        """Map raw points into the space the model was fitted in."""
        data = as_arrays(points, self.schema)
        if self.standardization is None:
            return data
        mean = np.array([m for m, _ in self.standardization])
        scale = np.array([s for _, s in self.standardization])
        return MixedArrays((data.numeric - mean) / scale, data.categorical)

    def predict(self, points: Points) -> np.ndarray:
        return assign(self.transform(points), self.prototypes, self.gamma_used, self.schema)

    def prototypes_original_scale(self) -> list[FeatureVector]:
        if self.standardization is None:
            return list(self.prototypes)
        out = []
        for p in self.prototypes:
            num = tuple(v * s + m for v, (m, s) in zip(p.numeric, self.standardization))
            out.append(FeatureVector(num, p.categorical))
        return out

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "tie_break_policy": TIE_BREAK_POLICY,
            "schema": self.schema.to_dict(),
            "k": self.k,
            "gamma_used": self.gamma_used,
            "cost": self.cost,
            "iterations_run": self.iterations_run,
            "converged": self.converged,
            "seed": self.seed,
            "standardization": None
            if self.standardization is None
            else [
                {"column": c.name, "mean": m, "std": s}
                for c, (m, s) in zip(self.schema.numeric_columns, self.standardization)
            ],
            "prototypes": [
                {"numeric": list(p.numeric), "categorical": list(p.categorical)} for p in self.prototypes
            ],
            "restart_costs": list(self.restart_costs),
            "cost_history": list(self.cost_history),
            "assignments": self.assignments.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterModel":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValidationError(f"unsupported cluster model schema_version {d.get('schema_version')!r}")
        std = d.get("standardization")
        return cls(
            schema=FeatureSchema.from_dict(d["schema"]),
            prototypes=tuple(FeatureVector(p["numeric"], p["categorical"]) for p in d["prototypes"]),
            gamma_used=float(d["gamma_used"]),
            assignments=np.asarray(d["assignments"], dtype=np.int64),
            cost=float(d["cost"]),
            iterations_run=int(d["iterations_run"]),
            standardization=None if std is None else tuple((s["mean"], s["std"]) for s in std),
            converged=bool(d.get("converged", True)),
            cost_history=tuple(d.get("cost_history", ())),
            restart_costs=tuple(d.get("restart_costs", ())),
            seed=d.get("seed"),
        )

    @classmethod
    def from_json(cls, text: str) -> "ClusterModel":
        return cls.from_dict(json.loads(text))


@dataclass
class RestartResult:
    labels: np.ndarray
    prototypes_numeric: np.ndarray
    prototypes_categorical: np.ndarray
    cost: float
    cost_history: list[float]
    converged: bool
    trace: list[np.ndarray] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.cost_history)


def _repair_empty(labels, row_cost, pnum, pcat, num, cat, k) -> None:
    """Give each empty cluster the point farthest from its current prototype.

    Donors must keep at least one member.  Works in place.
    """
    while True:
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            return
        j = int(empty[0])
        candidates = np.where(counts[labels] > 1, row_cost, -np.inf)
        i = int(candidates.argmax())
        if not np.isfinite(candidates[i]):
            raise EmptyClusterError(f"cannot reseed empty cluster {j}: no donor cluster has two members")
        labels[i] = j
        row_cost[i] = 0.0
        pnum[j] = num[i]
        pcat[j] = cat[i]


def run_restart(
    data: MixedArrays,
    n_categories: np.ndarray,
    gamma: float,
    init_indices: Sequence[int],
    max_iter: int = 100,
    trace: bool = False,
) -> RestartResult:
    """One alternating assign/update run from the records at ``init_indices``.

    ``data`` must already be in fitting space (standardized if wanted).
    """
    num, cat = data.numeric, data.categorical
    idx = np.asarray(init_indices, dtype=np.int64)
    k = idx.size
    pnum = num[idx].copy()
    pcat = cat[idx].copy()
    labels = None
    history: list[float] = []
    snapshots: list[np.ndarray] = []
    converged = False
    for _ in range(max_iter):
        dist = _distances(num, cat, pnum, pcat, gamma)
        new = dist.argmin(axis=1)
        row_cost = dist[np.arange(len(new)), new]
        _repair_empty(new, row_cost, pnum, pcat, num, cat, k)
        if labels is not None and np.array_equal(new, labels):
            converged = True
            break
        labels = new
        if trace:
            snapshots.append(labels.copy())
        pnum, pcat = _update(num, cat, labels, k, n_categories)
        cost = float(_row_costs(num, cat, pnum, pcat, labels, gamma).sum())
        if history and cost > history[-1] * (1 + _MONOTONE_RTOL) + 1e-300:
            raise ComputationError(f"cost increased from {history[-1]!r} to {cost!r}")
        history.append(cost)

    if not converged:
        # iteration budget exhausted right after an update: reassign once so
        # that the returned labels are optimal for the returned prototypes
        dist = _distances(num, cat, pnum, pcat, gamma)
        new = dist.argmin(axis=1)
        if np.bincount(new, minlength=k).min() > 0:
            labels = new
    cost = float(_row_costs(num, cat, pnum, pcat, labels, gamma).sum())
    return RestartResult(labels, pnum, pcat, cost, history, converged, snapshots)


def _row_keys(data: MixedArrays) -> np.ndarray:
    return np.hstack([data.numeric, data.categorical.astype(np.float64)])


def n_distinct(data: MixedArrays) -> int:
    if len(data) == 0:
        return 0
    return int(np.unique(_row_keys(data), axis=0).shape[0])


def initial_indices(data: MixedArrays, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` records with pairwise-distinct values, in seeded random order."""
    keys = _row_keys(data)
    chosen: list[int] = []
    seen: set[bytes] = set()
    for i in rng.permutation(len(data)):
        key = keys[i].tobytes()
        if key in seen:
            continue
        seen.add(key)
        chosen.append(int(i))
        if len(chosen) == k:
            return np.array(chosen, dtype=np.int64)
    raise InfeasibleError(f"k={k} exceeds the number of distinct points ({len(seen)})")


def restart_rng(seed: int, restart: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(restart)])


def derive_seed(seed: int, k: int) -> int:
    """Per-k seed used by :func:`sweep_k`."""
    state = np.random.SeedSequence([int(seed), int(k)]).generate_state(1, dtype=np.uint64)
    return int(state[0])


def fit(
    points: Points,
    config: ClusterConfig,
    schema: FeatureSchema,
    *,
    init_indices: Sequence[int] | None = None,
    n_jobs: int = 1,
) -> ClusterModel:
    """Best-of-``config.n_restarts`` K-prototypes fit.

    ``init_indices`` pins the starting prototypes to specific records and runs
    a single start.  Restarts may run on ``n_jobs`` threads; the result does not
    depend on ``n_jobs``.
    """
    data = as_arrays(points, schema)
    n = len(data)
    k = config.k
    if k > n:
        raise InfeasibleError(f"k={k} exceeds the number of points ({n})")
    distinct = n_distinct(data)
    if k > distinct:
        raise InfeasibleError(f"k={k} exceeds the number of distinct points ({distinct})")

    standardization = None
    if config.standardize_numeric and schema.n_numeric:
        num, standardization = _standardize(data.numeric)
        data = MixedArrays(num, data.categorical)
    gamma = _gamma_from_numeric(data.numeric) if config.gamma == "auto" else float(config.gamma)
    n_cats = schema.category_counts

    if init_indices is not None:
        starts = [np.asarray(init_indices, dtype=np.int64)]
        if starts[0].size != k or n_distinct(data.take(starts[0])) != k:
            raise ValidationError("init_indices must name k records with distinct values")
    else:
        starts = [initial_indices(data, k, restart_rng(config.seed, r)) for r in range(config.n_restarts)]

    def one(start):
        return run_restart(data, n_cats, gamma, start, config.max_iter)

    if n_jobs > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(one, starts))
    else:
        results = [one(s) for s in starts]

    best = results[0]
    for r in results[1:]:
        if r.cost < best.cost:
            best = r
    return ClusterModel(
        schema=schema,
        prototypes=_prototype_list(best.prototypes_numeric, best.prototypes_categorical),
        gamma_used=gamma,
        assignments=best.labels,
        cost=best.cost,
        iterations_run=best.iterations,
        standardization=standardization,
        converged=best.converged,
        cost_history=tuple(best.cost_history),
        restart_costs=tuple(r.cost for r in results),
        seed=int(config.seed),
    )


def average_dispersion(model: ClusterModel, n_points: int) -> float:
    if n_points < 1:
        raise ValidationError("n_points must be >= 1")
    return model.cost / n_points


@dataclass(frozen=True)
class DispersionCurve:
    points: tuple[tuple[int, float], ...]
    models: tuple[ClusterModel, ...] = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        pts = tuple((int(k), float(d)) for k, d in self.points)
        object.__setattr__(self, "points", pts)
        ks = [k for k, _ in pts]
        if any(b != a + 1 for a, b in zip(ks, ks[1:])):
            raise ValidationError(f"curve k values must be consecutive and increasing: {ks}")
        if any(d < 0 for _, d in pts):
            raise ValidationError("average dispersion must be non-negative")

    @property
    def ks(self) -> list[int]:
        return [k for k, _ in self.points]

    @property
    def dispersions(self) -> list[float]:
        return [d for _, d in self.points]

    def model_for(self, k: int) -> ClusterModel:
        return self.models[self.ks.index(k)]

    def to_csv(self) -> str:
        rows = ["k,average_dispersion"] + [f"{k},{d!r}" for k, d in self.points]
        return "\n".join(rows) + "\n"


def sweep_k(
    points: Points,
    k_range: tuple[int, int],
    template: ClusterConfig,
    schema: FeatureSchema,
    *,
    n_jobs: int = 1,
) -> DispersionCurve:
    """Fit every k in ``k_range`` (inclusive) and record average dispersion.

    The fit for each k is seeded with ``derive_seed(template.seed, k)``.
    Fitted models are kept on the returned curve.
    """
    k_min, k_max = map(int, k_range)
    if k_min < 1 or k_max < k_min:
        raise ValidationError(f"invalid k range {k_range}")
    data = as_arrays(points, schema)
    n = len(data)
    distinct = n_distinct(data)
    if k_max > distinct:
        raise InfeasibleError(f"k_max={k_max} exceeds the number of distinct points ({distinct})")

    def one(k):
        return fit(data, template.replace(k=k, seed=derive_seed(template.seed, k)), schema)

    ks = range(k_min, k_max + 1)
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            models = list(pool.map(one, ks))
    else:
        models = [one(k) for k in ks]
    return DispersionCurve(tuple((k, average_dispersion(m, n)) for k, m in zip(ks, models)), tuple(models))


def select_elbow(curve: DispersionCurve, tau: float = DEFAULT_TAU) -> int:
    """Smallest k whose next step improves average dispersion by less than ``tau`` (relative).

    Falls back to the largest k on the curve when every step clears ``tau``.
    """
    if len(curve.points) < 2:
        raise ValidationError("elbow selection needs at least two curve points")
    if not 0 < tau < 1:
        raise ValidationError(f"tau must lie in (0, 1), got {tau}")
    for (k, d), (_, d_next) in zip(curve.points, curve.points[1:]):
        drop = 0.0 if d == 0 else (d - d_next) / d
        if drop < tau:
            return k
    return curve.points[-1][0]
