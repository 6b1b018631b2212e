import math
from statistics import NormalDist

import numpy as np
import pytest

from oodselect import split_models
from oodselect.synth import PlantedSpec, generate_planted

PLANTED_SEED = 7


def inv_norm_bisect(q, lo=-40.0, hi=40.0):
    """Inverse standard-normal CDF by bisection on erfc; independent of scipy."""
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if 0.5 * math.erfc(-mid / math.sqrt(2.0)) < q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def plain_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def plain_probit(p, eps=1e-3):
    return NormalDist().inv_cdf(min(max(p, eps), 1 - eps))


@pytest.fixture(scope="session")
def planted():
    """The acceptance fixture: 300 models, 1400/500/100 pools, 60/20/20 split."""
    matrix, models, truth = generate_planted(PlantedSpec(seed=PLANTED_SEED))
    return matrix, split_models(models, "random", (0.6, 0.2, 0.2), seed=PLANTED_SEED), truth


@pytest.fixture(scope="session")
def small_planted():
    matrix, models, truth = generate_planted(
        PlantedSpec(n_models=40, n_aligned=30, n_inverted=15, n_noise=5, seed=3)
    )
    return matrix, split_models(models, seed=3), truth


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(label, ok, detail):
        line = f"{label:<34} {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
