import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oodselect.baselines import most_misclassified, random_subset
from oodselect.data import CorrectnessMatrix, ModelTable, probit, selected_ood_accuracy, split_models
from oodselect.exceptions import DegenerateVariance
from oodselect.selector import discretize
from oodselect.stats import (
    fisher_interval,
    fit_correlation_line,
    jaccard,
    normalized_jaccard_sequence,
    pearson,
    rank,
    spearman,
)

EPS = 1e-3
probs = st.floats(0.0, 1.0, allow_nan=False)
finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def vectors(n_min=3, n_max=30):
    return st.integers(n_min, n_max).flatmap(
        lambda n: st.tuples(arrays(np.float64, n, elements=finite), arrays(np.float64, n, elements=finite))
    )


def binary(rows, cols):
    return arrays(np.uint8, (rows, cols), elements=st.integers(0, 1))


@given(probs, probs)
def test_probit_monotone(p, q):
    lo, hi = min(p, q), max(p, q)
    assert probit(lo, EPS) <= probit(hi, EPS)


@given(st.floats(EPS, 1 - EPS))
def test_probit_antisymmetric(p):
    assert abs(probit(p, EPS) + probit(1 - p, EPS)) < 1e-9


@given(st.floats(0, EPS), st.floats(1 - EPS, 1))
def test_probit_constant_when_clipped(low, high):
    assert probit(low, EPS) == probit(EPS, EPS)
    assert probit(high, EPS) == probit(1 - EPS, EPS)


@given(st.integers(1, 8), st.integers(1, 12), st.data())
def test_uniform_weights_give_row_means(n, d, data):
    z = data.draw(binary(n, d))
    np.testing.assert_array_equal(selected_ood_accuracy(z, np.ones(d)), z.mean(axis=1))


@given(st.integers(1, 8), st.integers(1, 12), st.floats(1e-3, 1.0), st.data())
def test_selected_accuracy_scale_invariant(n, d, c, data):
    z = data.draw(binary(n, d))
    s = data.draw(arrays(np.float64, d, elements=st.floats(0.01, 1.0)))
    np.testing.assert_allclose(selected_ood_accuracy(z, c * s), selected_ood_accuracy(z, s), atol=1e-12)


@given(st.integers(3, 60), st.integers(0, 2**31), st.lists(st.sampled_from("ABCDEF"), min_size=60, max_size=60))
def test_splits_partition_and_keep_families(n, seed, fam):
    fam = fam[:n]
    models = ModelTable.from_arrays([f"m{i}" for i in range(n)], np.linspace(0.4, 0.9, n), fam)
    s = split_models(models, "random", seed=seed)
    assert all(x in ("train", "val", "test") for x in s.split)
    if len(set(fam)) >= 3:
        f = split_models(models, "family_disjoint", seed=seed)
        for name in set(fam):
            assert len({sp for sp, ff in zip(f.split, fam) if ff == name}) == 1
        assert set(f.split) == {"train", "val", "test"}


@given(vectors(), st.floats(0.01, 100), st.floats(-100, 100))
def test_pearson_affine_invariance(xy, a, b):
    x, y = xy
    try:
        r = pearson(x, y)
    except DegenerateVariance:
        return
    assume(np.ptp(x) > 1e-3 and np.ptp(y) > 1e-3)
    assert abs(pearson(a * x + b, y) - r) < 1e-9
    assert abs(pearson(x, -y) + r) < 1e-9


@given(vectors())
def test_spearman_is_pearson_of_ranks(xy):
    x, y = xy
    try:
        s = spearman(x, y)
    except DegenerateVariance:
        return
    assert s == pearson(rank(x), rank(y))


@given(st.floats(-0.99, 0.99), st.integers(4, 5000), st.floats(0.5, 0.999))
def test_fisher_width_decreasing(r, n, conf):
    lo1, hi1 = fisher_interval(r, n, conf)
    lo2, hi2 = fisher_interval(r, n + 1, conf)
    assert hi2 - lo2 < hi1 - lo1
    assert -1 < lo1 <= r <= hi1 < 1


@given(vectors())
def test_line_fit_residual_bound(xy):
    x, y = xy
    try:
        fit = fit_correlation_line(x, y)
    except DegenerateVariance:
        return
    assert fit.eps_max >= 0
    assert np.all(np.abs(fit.residuals(x, y)) <= fit.eps_max + 1e-9 * max(1.0, fit.eps_max))


@given(st.sets(st.integers(0, 30), min_size=1), st.sets(st.integers(0, 30)))
def test_jaccard_symmetry(a, b):
    assert jaccard(a, b) == jaccard(b, a)
    assert jaccard(a, a) == 1.0
    assert 0.0 <= jaccard(a, b) <= 1.0


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=2, max_size=4, unique=True), st.integers(0, 1000))
def test_nested_sequences_score_one(sizes, seed):
    sizes = sorted(sizes)
    universe = 200
    perm = np.random.default_rng(seed).permutation(universe)
    subsets = [set(perm[:s].tolist()) for s in sizes]
    assert normalized_jaccard_sequence(subsets, universe, random_trials=20, seed=seed) == 1.0


@given(st.integers(1, 50), st.data())
def test_baselines_return_s_distinct_ids(d, data):
    S = data.draw(st.integers(1, d))
    ids = [f"e{j}" for j in range(d)]
    assert len(random_subset(ids, S, seed=data.draw(st.integers(0, 100)))) == S
    z = data.draw(binary(4, d))
    m = CorrectnessMatrix(z, ["a", "b", "c", "d"], ids)
    models = ModelTable.from_arrays(m.model_ids, [0.5, 0.6, 0.7, 0.8], split=["train"] * 4)
    picked = most_misclassified(m, models, S)
    assert len(picked) == S and picked <= set(ids)


@given(st.integers(1, 30), st.data())
def test_discretize_cardinality_and_order(d, data):
    S = data.draw(st.integers(1, d))
    w = data.draw(arrays(np.float64, d, elements=st.sampled_from([0.1, 0.3, 0.5, 0.9])))
    ids = [f"x{j:02d}" for j in range(d)]
    chosen = discretize(w, S, ids)
    assert len(chosen) == S
    lowest = min(w[int(i[1:])] for i in chosen)
    for j in range(d):
        if ids[j] not in chosen:
            assert w[j] <= lowest
            if w[j] == lowest:
                assert all(ids[j] > c for c in chosen if w[int(c[1:])] == lowest)


@pytest.mark.parametrize("n", [5, 9])
def test_probit_vector_matches_scalar(n):
    p = np.linspace(0, 1, n)
    np.testing.assert_array_equal(probit(p), [probit(float(v)) for v in p])
