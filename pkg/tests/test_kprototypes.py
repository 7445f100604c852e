import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mobgap.kprototypes as kp
from mobgap.errors import EmptyClusterError, InfeasibleError, ValidationError
from mobgap.kprototypes import (
    CATEGORICAL,
    NUMERIC,
    ClusterConfig,
    ClusterModel,
    Column,
    DispersionCurve,
    FeatureSchema,
    FeatureVector,
    as_arrays,
    assign,
    auto_gamma,
    average_dispersion,
    derive_seed,
    fit,
    mixed_dissimilarity,
    run_restart,
    select_elbow,
    sweep_k,
    update_prototypes,
)

NUM2 = FeatureSchema((Column("a", NUMERIC), Column("b", NUMERIC)))
NUM1 = FeatureSchema((Column("x", NUMERIC),))
CAT2 = FeatureSchema((Column("c1", CATEGORICAL, ("A", "B", "C")), Column("c2", CATEGORICAL, ("A", "B", "C"))))
MIXED = FeatureSchema((Column("x", NUMERIC), Column("c", CATEGORICAL, ("A", "B"))))

A, B, C = 0, 1, 2


def fv(num=(), cat=()):
    return FeatureVector(tuple(num), tuple(cat))


def ones(values):
    return [fv((v,)) for v in values]


# --- schema and vectors ---------------------------------------------------------

def test_schema_rejects_duplicate_names():
    with pytest.raises(ValidationError):
        FeatureSchema((Column("x", NUMERIC), Column("x", NUMERIC)))


def test_schema_rejects_empty_and_bad_categories():
    with pytest.raises(ValidationError):
        FeatureSchema(())
    with pytest.raises(ValidationError):
        Column("c", CATEGORICAL, ())
    with pytest.raises(ValidationError):
        Column("x", NUMERIC, ("A",))


def test_vector_validation():
    with pytest.raises(ValidationError):
        fv((1.0,), (0,)).validate(NUM2)
    with pytest.raises(ValidationError):
        fv((1.0,), (5,)).validate(MIXED)


def test_schema_round_trip():
    assert FeatureSchema.from_dict(MIXED.to_dict()) == MIXED


# --- dissimilarity --------------------------------------------------------------

def test_dissimilarity_identity():
    x = fv((1.5,), (1,))
    assert mixed_dissimilarity(x, x, 3.0, MIXED) == 0


def test_dissimilarity_numeric_only():
    assert mixed_dissimilarity(fv((0, 0)), fv((3, 4)), 7.0, NUM2) == 25


def test_dissimilarity_categorical_only():
    assert mixed_dissimilarity(fv(cat=(A, B)), fv(cat=(A, C)), 2.0, CAT2) == 2


def test_dissimilarity_schema_mismatch():
    with pytest.raises(ValidationError):
        mixed_dissimilarity(fv((0,)), fv((3, 4)), 1.0, NUM2)


# quarter-unit grid keeps squared differences clear of underflow
mixed_points = st.tuples(st.integers(-400, 400), st.integers(0, 1)).map(lambda t: fv((t[0] / 4,), (t[1],)))


@given(mixed_points, mixed_points, st.floats(0.01, 10))
def test_dissimilarity_symmetric_nonnegative(x, q, gamma):
    d = mixed_dissimilarity(x, q, gamma, MIXED)
    assert d == mixed_dissimilarity(q, x, gamma, MIXED)
    assert d >= 0
    assert (d == 0) == (x == q)


def test_kmodes_reduction_hamming():
    x, q = fv(cat=(A, B)), fv(cat=(C, C))
    assert mixed_dissimilarity(x, q, 1.0, CAT2) == 2
    pts = [fv(cat=(A, B)), fv(cat=(A, C)), fv(cat=(B, C))]
    (proto,) = update_prototypes(pts, [0, 0, 0], CAT2)
    assert proto == fv(cat=(A, C))


# --- assign / update --------------------------------------------------------------

def test_assign_exact_match():
    protos = ones([5.0, 7.0, 1.0])
    assert assign(ones([1.0]), protos, 0.0, NUM1).tolist() == [2]


def test_assign_tie_goes_to_lowest_index():
    assert assign(ones([5.0]), ones([4.0, 6.0]), 0.0, NUM1).tolist() == [0]


def test_assign_hand_example():
    assert assign(ones([0.0, 10.0]), ones([1.0, 9.0]), 0.0, NUM1).tolist() == [0, 1]


def test_assign_needs_prototypes():
    with pytest.raises(ValidationError):
        assign(ones([0.0]), [], 0.0, NUM1)


def test_update_mean_and_mode():
    pts = [fv((1,), (A,)), fv((3,), (A,)), fv((2,), (B,))]
    assert update_prototypes(pts, [0, 0, 0], MIXED) == [fv((2.0,), (A,))]


def test_update_single_member():
    p = fv((4.25,), (B,))
    assert update_prototypes([p], [0], MIXED) == [p]


def test_update_mode_tie_lowest_category():
    pts = [fv((0,), (B,)), fv((0,), (A,))]
    assert update_prototypes(pts, [0, 0], MIXED)[0].categorical == (A,)


def test_update_empty_cluster_signalled():
    with pytest.raises(EmptyClusterError):
        update_prototypes(ones([1.0, 2.0]), [0, 0], NUM1, k=2)


# --- fit ------------------------------------------------------------------------

BLOBS = [0.0, 0.1, 0.2, 10.0, 10.1, 10.2]
# exhaustive enumeration over every labelling of the six blob points
BLOB_OPTIMA = {1: 150.04, 2: 0.04, 3: 0.025}


def _brute_force(values, k):
    best = np.inf
    for labels in itertools.product(range(k), repeat=len(values)):
        groups = [[v for v, l in zip(values, labels) if l == j] for j in range(k)]
        if any(not g for g in groups):
            continue
        best = min(best, sum(sum((v - np.mean(g)) ** 2 for v in g) for g in groups))
    return best


def test_brute_force_oracle_matches_frozen_values():
    for k, cost in BLOB_OPTIMA.items():
        assert _brute_force(BLOBS, k) == pytest.approx(cost, rel=1e-12)


def test_fit_blobs_partition_and_optimal_cost():
    model = fit(ones(BLOBS), ClusterConfig(k=2, gamma=0.0, standardize_numeric=False, seed=3), NUM1)
    labels = model.assignments.tolist()
    assert len(set(labels[:3])) == 1 and len(set(labels[3:])) == 1 and labels[0] != labels[3]
    assert model.cost == pytest.approx(BLOB_OPTIMA[2], rel=1e-9)


def test_fit_k_equals_n_has_zero_cost():
    model = fit(ones([1.0, 2.0, 5.0, 9.0]), ClusterConfig(k=4), NUM1)
    assert model.cost == pytest.approx(0.0, abs=1e-12)


def test_fit_k1_global_prototype():
    pts = [fv((0,), (A,)), fv((2,), (B,)), fv((4,), (B,))]
    model = fit(pts, ClusterConfig(k=1, gamma=1.0, standardize_numeric=False), MIXED)
    assert model.prototypes == (fv((2.0,), (B,)),)
    assert model.cost == pytest.approx(8.0 + 1.0)


def test_fit_k_too_large():
    with pytest.raises(InfeasibleError):
        fit(ones([1.0, 1.0, 2.0]), ClusterConfig(k=3), NUM1)
    with pytest.raises(InfeasibleError):
        fit(ones([1.0, 2.0]), ClusterConfig(k=3), NUM1)


def test_config_validation():
    for bad in ({"k": 0}, {"k": 2, "gamma": -1.0}, {"k": 2, "max_iter": 0}, {"k": 2, "n_restarts": 0},
                {"k": 2, "gamma": "sometimes"}):
        with pytest.raises(ValidationError):
            ClusterConfig(**bad)


def _random_mixed(rng, n, n_num=2, n_cat=2, levels=3):
    schema = FeatureSchema(tuple(Column(f"n{i}", NUMERIC) for i in range(n_num))
                           + tuple(Column(f"c{i}", CATEGORICAL, tuple("ABCDE"[:levels])) for i in range(n_cat)))
    num = rng.normal(size=(n, n_num)) + rng.integers(0, 3, size=(n, 1)) * 3
    cat = rng.integers(0, levels, size=(n, n_cat))
    return [fv(num[i], cat[i]) for i in range(n)], schema


def _recompute_cost(points, model, schema):
    data = model.transform(points)
    return sum(
        mixed_dissimilarity(data.row(i), model.prototypes[a], model.gamma_used, schema)
        for i, a in enumerate(model.assignments)
    )


@pytest.mark.parametrize("seed", range(5))
def test_model_invariants(seed):
    rng = np.random.default_rng(seed)
    pts, schema = _random_mixed(rng, 60)
    model = fit(pts, ClusterConfig(k=4, seed=seed), schema)
    assert model.cost == pytest.approx(_recompute_cost(pts, model, schema), rel=1e-9)
    data = model.transform(pts)
    assert np.array_equal(assign(data, model.prototypes, model.gamma_used, schema), model.assignments)
    assert np.array_equal(model.predict(pts), model.assignments)
    assert np.bincount(model.assignments, minlength=4).min() > 0
    assert model.gamma_used == pytest.approx(0.5)
    assert list(model.cost_history) == sorted(model.cost_history, reverse=True)


def test_fit_is_deterministic_and_parallel_invariant():
    rng = np.random.default_rng(11)
    pts, schema = _random_mixed(rng, 80)
    cfg = ClusterConfig(k=3, seed=99)
    a = fit(pts, cfg, schema)
    b = fit(pts, cfg, schema, n_jobs=4)
    assert a.to_json() == b.to_json()


def test_best_restart_ties_go_to_lowest_index():
    model = fit(ones(BLOBS), ClusterConfig(k=2, n_restarts=6, standardize_numeric=False), NUM1)
    best = min(model.restart_costs)
    assert model.cost == best


def test_permutation_covariance():
    rng = np.random.default_rng(5)
    pts, schema = _random_mixed(rng, 40)
    init = [3, 17, 29]
    perm = rng.permutation(len(pts))
    inv = np.argsort(perm)
    permuted = [pts[i] for i in perm]
    cfg = ClusterConfig(k=3, gamma=0.7)
    a = fit(pts, cfg, schema, init_indices=init)
    b = fit(permuted, cfg, schema, init_indices=[int(inv[i]) for i in init])
    for pa, pb in zip(a.prototypes, b.prototypes):
        assert pa.categorical == pb.categorical
        assert np.allclose(pa.numeric, pb.numeric, rtol=0, atol=1e-12)
    assert np.array_equal(b.assignments, a.assignments[perm])


def test_empty_cluster_is_reseeded(monkeypatch):
    # found by search: the first assignment pass leaves one prototype without members
    schema = FeatureSchema((Column("x", NUMERIC), Column("c", CATEGORICAL, ("A", "B", "C")),
                            Column("d", CATEGORICAL, ("A", "B", "C"))))
    rows = [(0.0, (1, 1)), (2.0, (0, 1)), (0.0, (0, 1)), (3.0, (0, 1)), (3.0, (2, 1)), (0.0, (0, 0))]
    data = as_arrays([fv((x,), c) for x, c in rows], schema)

    emptied = []
    original = kp._repair_empty

    def spy(labels, *rest):
        emptied.append(np.bincount(labels, minlength=rest[-1]).min() == 0)
        return original(labels, *rest)

    monkeypatch.setattr(kp, "_repair_empty", spy)
    result = run_restart(data, schema.category_counts, 1.0, [5, 0, 2])
    assert any(emptied)
    assert np.bincount(result.labels, minlength=3).min() > 0
    assert result.cost_history == sorted(result.cost_history, reverse=True)


def test_repair_takes_farthest_point_from_a_donor():
    num = np.array([[0.0], [1.0], [9.0]])
    cat = np.zeros((3, 0), dtype=np.int64)
    labels = np.array([0, 0, 0])
    row_cost = np.array([1.0, 0.0, 64.0])
    pnum, pcat = np.array([[1.0], [50.0]]), np.zeros((2, 0), dtype=np.int64)
    kp._repair_empty(labels, row_cost, pnum, pcat, num, cat, 2)
    assert labels.tolist() == [0, 0, 1]
    assert pnum[1, 0] == 9.0


def test_repair_without_donor_raises():
    labels = np.array([0])
    with pytest.raises(EmptyClusterError):
        kp._repair_empty(labels, np.zeros(1), np.zeros((2, 1)), np.zeros((2, 0), dtype=np.int64),
                         np.zeros((1, 1)), np.zeros((1, 0), dtype=np.int64), 2)


def test_max_iter_budget_reports_not_converged():
    rng = np.random.default_rng(2)
    pts, schema = _random_mixed(rng, 200)
    model = fit(pts, ClusterConfig(k=6, max_iter=1, n_restarts=1), schema)
    assert model.iterations_run == 1
    data = model.transform(pts)
    assert np.array_equal(assign(data, model.prototypes, model.gamma_used, schema), model.assignments)


def test_model_json_round_trip():
    rng = np.random.default_rng(3)
    pts, schema = _random_mixed(rng, 30)
    model = fit(pts, ClusterConfig(k=2, seed=4), schema)
    text = model.to_json()
    doc = json.loads(text)
    assert doc["schema_version"] == 1 and doc["tie_break_policy"]
    back = ClusterModel.from_json(text)
    assert back.to_json() == text
    assert np.array_equal(back.predict(pts), model.assignments)


def test_model_rejects_unknown_schema_version():
    rng = np.random.default_rng(3)
    pts, schema = _random_mixed(rng, 10)
    doc = fit(pts, ClusterConfig(k=2), schema).to_dict()
    doc["schema_version"] = 99
    with pytest.raises(ValidationError):
        ClusterModel.from_dict(doc)


def test_prototypes_original_scale():
    pts = ones([0.0, 0.1, 0.2, 10.0, 10.1, 10.2])
    model = fit(pts, ClusterConfig(k=2), NUM1)
    means = sorted(p.numeric[0] for p in model.prototypes_original_scale())
    assert means == pytest.approx([0.1, 10.1])


# --- dispersion, sweep, elbow ----------------------------------------------------

def test_average_dispersion_examples():
    model = fit(ones([0.0, 2.0]), ClusterConfig(k=1, standardize_numeric=False), NUM1)
    assert model.cost == pytest.approx(2.0)
    assert average_dispersion(model, 2) == pytest.approx(1.0)
    zero = fit(ones([1.0, 2.0]), ClusterConfig(k=2), NUM1)
    assert average_dispersion(zero, 7) == 0
    fake = ClusterModel(NUM1, (fv((0.0,)),), 0.0, np.zeros(10, dtype=np.int64), 50.0, 1)
    assert average_dispersion(fake, 10) == 5
    with pytest.raises(ValidationError):
        average_dispersion(fake, 0)


def test_sweep_single_points():
    pts = ones(BLOBS)
    tmpl = ClusterConfig(k=1, standardize_numeric=False)
    full = sweep_k(pts, (6, 6), tmpl, NUM1)
    assert full.points == ((6, 0.0),) or full.points[0][1] == pytest.approx(0.0, abs=1e-12)
    one = sweep_k(pts, (1, 1), tmpl, NUM1)
    assert one.points[0][1] == pytest.approx(BLOB_OPTIMA[1] / 6)


def test_sweep_blobs_matches_per_k_optima():
    curve = sweep_k(ones(BLOBS), (1, 3), ClusterConfig(k=1, standardize_numeric=False, gamma=0.0), NUM1)
    ds = curve.dispersions
    assert ds == pytest.approx([BLOB_OPTIMA[k] / 6 for k in (1, 2, 3)], rel=1e-9)
    assert ds[0] > ds[1] > ds[2]
    assert (ds[0] - ds[1]) / ds[0] > 0.99


def test_sweep_uses_derived_seeds():
    rng = np.random.default_rng(8)
    pts, schema = _random_mixed(rng, 30)
    curve = sweep_k(pts, (2, 4), ClusterConfig(k=1, seed=5), schema)
    assert [m.seed for m in curve.models] == [derive_seed(5, k) for k in (2, 3, 4)]
    again = sweep_k(pts, (2, 4), ClusterConfig(k=1, seed=5), schema, n_jobs=3)
    assert curve.points == again.points


def test_sweep_rejects_infeasible_range():
    with pytest.raises(InfeasibleError):
        sweep_k(ones([1.0, 2.0]), (1, 3), ClusterConfig(k=1), NUM1)
    with pytest.raises(ValidationError):
        sweep_k(ones([1.0, 2.0]), (0, 1), ClusterConfig(k=1), NUM1)


def test_curve_requires_consecutive_ks():
    with pytest.raises(ValidationError):
        DispersionCurve(((1, 3.0), (3, 1.0)))


def test_curve_csv():
    assert DispersionCurve(((1, 2.0), (2, 1.5))).to_csv() == "k,average_dispersion\n1,2.0\n2,1.5\n"


def test_elbow_hand_example():
    curve = DispersionCurve(((1, 100), (2, 50), (3, 26), (4, 24.5), (5, 24)))
    assert select_elbow(curve, 0.07) == 3


def test_elbow_flat_and_geometric():
    assert select_elbow(DispersionCurve(((1, 10), (2, 10), (3, 10))), 0.01) == 1
    assert select_elbow(DispersionCurve(tuple((k, 2.0 ** -k) for k in range(1, 7))), 0.1) == 6


def test_elbow_zero_dispersion_counts_as_no_drop():
    assert select_elbow(DispersionCurve(((1, 0.0), (2, 0.0))), 0.5) == 1


def test_elbow_errors():
    with pytest.raises(ValidationError):
        select_elbow(DispersionCurve(((1, 1.0),)))
    with pytest.raises(ValidationError):
        select_elbow(DispersionCurve(((1, 1.0), (2, 0.5))), tau=1.5)


@given(st.lists(st.floats(0, 1e6), min_size=2, max_size=12), st.floats(0.001, 0.999))
def test_elbow_rule_definition(ds, tau):
    curve = DispersionCurve(tuple(enumerate(ds, start=1)))
    k = select_elbow(curve, tau)
    drops = [0.0 if a == 0 else (a - b) / a for a, b in zip(ds, ds[1:])]
    expected = next((i + 1 for i, d in enumerate(drops) if d < tau), len(ds))
    assert k == expected


# --- gamma ------------------------------------------------------------------------

def test_auto_gamma_examples():
    rng = np.random.default_rng(0)
    pts, schema = _random_mixed(rng, 20)
    assert auto_gamma(pts, schema) == pytest.approx(0.5)
    assert auto_gamma(ones([0.0, 2.0]), NUM1, standardize=False) == pytest.approx(0.5)
    assert auto_gamma([fv(cat=(A, B)), fv(cat=(B, C))], CAT2) == 1.0
    with pytest.raises(ValidationError):
        auto_gamma(ones([1.0]), NUM1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cost_never_increases(seed):
    rng = np.random.default_rng(seed)
    pts, schema = _random_mixed(rng, int(rng.integers(8, 40)))
    k = int(rng.integers(1, 5))
    model = fit(pts, ClusterConfig(k=k, seed=seed, n_restarts=2), schema)
    hist = model.cost_history
    assert all(b <= a * (1 + 1e-9) for a, b in zip(hist, hist[1:]))
