import math

import numpy as np
import pytest

from oodselect.exceptions import (
    DegenerateCorrelation,
    DegenerateVariance,
    EmptySets,
    NormalizationDegenerate,
    OODSelectError,
    TooFewModels,
)
from oodselect.stats import (
    CorrelationReport,
    bootstrap_prevalence_shift,
    correlation_report,
    fisher_interval,
    fit_correlation_line,
    jaccard,
    model_count_stability,
    normalized_jaccard_sequence,
    pearson,
    rank,
    regime,
    running_pearson,
    spearman,
)

from conftest import inv_norm_bisect, plain_pearson


def test_pearson_examples():
    assert pearson([0.1, 0.4, 0.9], [0.1, 0.4, 0.9]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    # hand: cov 3, |x| sqrt 2, |y| sqrt(42)/3 -> 9 / sqrt(84)
    assert pearson([1, 2, 3], [1, 2, 4]) == pytest.approx(9 / math.sqrt(84), abs=1e-12)
    assert pearson([1, 2, 3], [1, 2, 4]) == pytest.approx(0.981981, abs=1e-6)


def test_pearson_degenerate():
    with pytest.raises(DegenerateVariance):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(TooFewModels):
        pearson([1, 2], [2, 1])
    with pytest.raises(OODSelectError):
        pearson([1, 2, 3], [1, 2])


def test_pearson_matches_plain(rng):
    x, y = rng.normal(size=50), rng.normal(size=50)
    assert pearson(x, y) == pytest.approx(plain_pearson(list(x), list(y)), abs=1e-12)


def test_spearman_examples():
    x = np.array([0.3, 1.2, 2.5, 7.0])
    assert spearman(x, np.exp(x)) == pytest.approx(1.0)
    assert spearman([1, 2, 3, 100], [1, 2, 3, 4]) == pytest.approx(1.0)
    np.testing.assert_array_equal(rank([1, 2, 2, 3]), [1, 2.5, 2.5, 4])
    with pytest.raises(DegenerateVariance):
        spearman([2, 2, 2], [1, 2, 3])


def test_fisher_interval_oracle():
    hw = math.tanh(inv_norm_bisect(0.975) / 10.0)
    lo, hi = fisher_interval(0.0, 103, 0.95)
    assert (lo, hi) == pytest.approx((-hw, hw), abs=1e-12)
    assert hi == pytest.approx(0.1935, abs=1e-3)


def test_fisher_interval_limits_and_errors():
    lo, hi = fisher_interval(0.5, 40, 1e-9)
    assert lo == pytest.approx(0.5, abs=1e-8) and hi == pytest.approx(0.5, abs=1e-8)
    w = lambda n: np.subtract(*fisher_interval(0.4, n)[::-1])  # noqa: E731
    assert w(28) > w(103)
    with pytest.raises(TooFewModels):
        fisher_interval(0.1, 3)
    with pytest.raises(DegenerateCorrelation):
        fisher_interval(1.0, 30)
    with pytest.raises(OODSelectError):
        fisher_interval(0.1, 30, 1.0)


def test_regime_labels():
    assert regime(0.31) == "AoTL"
    assert regime(0.3) == "weak"
    assert regime(-0.3) == "weak"
    assert regime(-0.31) == "AoTIL"


def test_report_roundtrip_and_ci(rng):
    x = rng.normal(size=30)
    rep = correlation_report(x, x + rng.normal(size=30))
    assert rep.ci_low <= rep.r <= rep.ci_high
    d = rep.to_dict()
    assert set(d) == {"kind", "r", "n", "ci", "regime"}
    assert CorrelationReport.from_dict(d) == rep
    assert correlation_report([1, 2, 3], [1, 2, 4]).ci_low is None
    perfect = correlation_report([1, 2, 3, 4], [2, 4, 6, 8])
    assert perfect.ci_low == perfect.ci_high == perfect.r


def test_line_fit():
    f = fit_correlation_line([0.1, 0.5, 2.0], [0.1, 0.5, 2.0])
    assert (f.a, f.b, f.eps_max) == pytest.approx((1, 0, 0), abs=1e-12)
    g = fit_correlation_line([0.1, 0.5, 2.0], [-0.1, -0.5, -2.0])
    assert g.a == pytest.approx(-1) and g.eps_max == pytest.approx(0, abs=1e-12)
    # hand least squares on x=[0,1,3], y=[0,1,2]: a=3/2, b=-1/6, residuals (1/6, -1/3, 1/6)
    h = fit_correlation_line([0, 1, 3], [0, 1, 2])
    assert h.a == pytest.approx(1.5) and h.b == pytest.approx(-1 / 6)
    assert h.eps_max == pytest.approx(1 / 3)


def test_jaccard_examples():
    assert jaccard({1, 2}, {1, 2}) == 1.0
    assert jaccard({1}, {2}) == 0.0
    assert jaccard({1, 2}, {2, 3}) == pytest.approx(1 / 3)
    with pytest.raises(EmptySets):
        jaccard(set(), set())


def test_normalized_jaccard_nested_and_random():
    nested = [set(range(10)), set(range(25)), set(range(60))]
    assert normalized_jaccard_sequence(nested, 1000) == 1.0
    g = np.random.default_rng(0)
    rand = [set(g.choice(10000, 10, replace=False)), set(g.choice(10000, 20, replace=False))]
    assert abs(normalized_jaccard_sequence(rand, 10000)) < 0.05


def test_normalized_jaccard_clamp_and_errors():
    # disjoint sets sit below the random bound for a small universe
    res = normalized_jaccard_sequence([{0, 1}, {2, 3, 4, 5}], 8, details=True)
    assert res.normalized == 0.0 and res.mean < res.lower
    with pytest.raises(OODSelectError):
        normalized_jaccard_sequence([{1, 2}, {3}], 10)
    with pytest.raises(NormalizationDegenerate):
        normalized_jaccard_sequence([{0}, {0, 1}], 2)


def test_normalized_jaccard_seeded():
    subs = [set(range(0, 40, 2)), set(range(50))]
    assert normalized_jaccard_sequence(subs, 500, seed=3) == normalized_jaccard_sequence(subs, 500, seed=3)


def test_bootstrap_no_shift():
    vals = ["a"] * 40 + ["b"] * 60
    res = bootstrap_prevalence_shift(vals, vals, n_resamples=500, seed=1)
    for v in res.values():
        assert v["delta"] == 0.0
        assert v["p"] > 0.5


def test_bootstrap_max_shift():
    res = bootstrap_prevalence_shift(["A"] * 50, ["A"] * 50 + ["B"] * 50, n_resamples=1000)
    assert res["A"]["delta"] == pytest.approx(0.5)
    assert res["A"]["p"] < 0.01
    assert res["B"]["delta"] == pytest.approx(-0.5)


def test_bootstrap_documented_case():
    # 68% in the subset vs 61% overall: a +0.07 shift that the test flags
    full = ["pos"] * 6100 + ["neg"] * 3900
    sub = ["pos"] * 3400 + ["neg"] * 1600
    res = bootstrap_prevalence_shift(sub, full, n_resamples=1000, seed=0)
    assert res["pos"]["delta"] == pytest.approx(0.07)
    assert res["pos"]["p"] < 0.05
    assert res["pos"]["ci"][0] > 0


def test_bootstrap_worker_invariance():
    sub = list("aabbbcab")
    full = list("aabbbcabccca")
    a = bootstrap_prevalence_shift(sub, full, n_resamples=700, seed=5, n_jobs=1)
    b = bootstrap_prevalence_shift(sub, full, n_resamples=700, seed=5, n_jobs=2)
    assert a == b


def test_bootstrap_errors():
    with pytest.raises(OODSelectError):
        bootstrap_prevalence_shift([], ["a"])
    with pytest.raises(OODSelectError):
        bootstrap_prevalence_shift(["a"], ["a"], n_resamples=50)


def test_running_pearson(rng):
    x, y = rng.normal(size=40), rng.normal(size=40)
    r = running_pearson(x, y)
    assert np.isnan(r[:2]).all()
    for m in (3, 10, 40):
        assert r[m - 1] == pytest.approx(pearson(x[:m], y[:m]), abs=1e-10)


def test_stability_examples(rng):
    acc = rng.uniform(0.1, 0.9, size=60)
    res = model_count_stability(acc, acc)
    assert res.n == 3 and res.converged
    noisy = np.clip(acc + rng.normal(0, 0.1, 60), 0.01, 0.99)
    never = model_count_stability(acc, noisy, rel_threshold=0.0)
    assert not never.converged and never.n == 60
    with pytest.raises(TooFewModels):
        model_count_stability(acc[:20], acc[:20])


def test_stability_monotone_in_threshold():
    g = np.random.default_rng(8)
    a = g.uniform(0.3, 0.9, 2000)
    b = np.clip(a + g.normal(0, 0.08, 2000), 0.01, 0.99)
    ns = [model_count_stability(a, b, rel_threshold=t, n_orderings=8, seed=2).n for t in (0.05, 0.01, 0.002)]
    assert ns[0] <= ns[1] <= ns[2]
    assert ns[0] < ns[2]
