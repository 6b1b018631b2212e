"""Correlation statistics, confidence intervals and consistency measures."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from joblib import Parallel, delayed
from scipy.stats import rankdata

from . import _random
from .data import DEFAULT_CLIP_EPS, norm_ppf, probit
from .exceptions import (
    DegenerateCorrelation,
    DegenerateVariance,
    EmptySets,
    NormalizationDegenerate,
    OODSelectError,
    TooFewModels,
)

AOTL_THRESHOLD = 0.3


def regime(r):
    """Label a correlation as ``AoTL`` (> 0.3), ``AoTIL`` (< -0.3) or ``weak``."""
    if r > AOTL_THRESHOLD:
        return "AoTL"
    if r < -AOTL_THRESHOLD:
        return "AoTIL"
    return "weak"


@dataclass(frozen=True)
class CorrelationReport:
    r: float
    n: int
    ci_low: float | None
    ci_high: float | None
    kind: str = "pearson"

    @property
    def regime(self):
        return regime(self.r)

    def to_dict(self):
        return {
            "kind": self.kind,
            "r": self.r,
            "n": self.n,
            "ci": [self.ci_low, self.ci_high],
            "regime": self.regime,
        }

    @classmethod
    def from_dict(cls, d):
        lo, hi = d["ci"]
        return cls(d["r"], d["n"], lo, hi, d["kind"])


@dataclass(frozen=True)
class LineFit:
    a: float
    b: float
    eps_max: float

    def residuals(self, x, y):
        return np.asarray(x, float) - (self.a * np.asarray(y, float) + self.b)


def _centered(v, name):
    v = np.asarray(v, dtype=np.float64)
    c = v - v.mean()
    scale = max(1.0, float(np.abs(v).max()))
    if float(np.abs(c).max()) <= 1e-12 * scale:
        raise DegenerateVariance(f"{name} has zero variance")
    return c


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise OODSelectError(f"expected equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < 3:
        raise TooFewModels(f"need at least 3 points, got {x.size}")
    return x, y


def pearson(x, y):
    """Sample Pearson correlation of two equal-length vectors."""
    x, y = _check_pair(x, y)
    xc = _centered(x, "x")
    yc = _centered(y, "y")
    r = float(xc @ yc / (np.linalg.norm(xc) * np.linalg.norm(yc)))
    return min(1.0, max(-1.0, r))


def rank(x):
    """Average ranks (1-based); tied values share their mean rank."""
    return rankdata(np.asarray(x, dtype=np.float64), method="average")


def spearman(x, y):
    x, y = _check_pair(x, y)
    return pearson(rank(x), rank(y))


CORRELATIONS = {"pearson": pearson, "spearman": spearman}


def fisher_interval(r, n, confidence=0.95):
    """Fisher z-interval ``tanh(atanh(r) -/+ z_crit / sqrt(n - 3))``."""
    if n < 4:
        raise TooFewModels(f"Fisher interval needs n >= 4, got {n}")
    if not abs(r) < 1:
        raise DegenerateCorrelation(f"|r| must be < 1, got {r}")
    if not 0 < confidence < 1:
        raise OODSelectError(f"confidence must lie in (0, 1), got {confidence}")
    z = math.atanh(r)
    hw = norm_ppf(0.5 + confidence / 2.0) / math.sqrt(n - 3)
    return math.tanh(z - hw), math.tanh(z + hw)


def correlation_report(x, y, kind="pearson", confidence=0.95):
    """Correlation of ``x`` and ``y`` with its Fisher interval.

    When the interval is undefined (n < 4 or |r| = 1) the bounds are ``None``
    or collapse onto ``r`` respectively.
    """
    try:
        fn = CORRELATIONS[kind]
    except KeyError:
        raise OODSelectError(f"unknown correlation kind {kind!r}") from None
    r = fn(x, y)
    n = len(x)
    if n < 4:
        lo = hi = None
    elif abs(r) >= 1 - 1e-12:
        lo = hi = r
    else:
        lo, hi = fisher_interval(r, n, confidence)
    return CorrelationReport(r, n, lo, hi, kind)


def probit_correlation(id_acc, ood_acc, kind="pearson", eps=DEFAULT_CLIP_EPS, confidence=0.95):
    """Correlation report on probit-transformed accuracies."""
    return correlation_report(probit(id_acc, eps), probit(ood_acc, eps), kind, confidence)


def fit_correlation_line(x_probit, y_probit):
    """Least-squares fit ``x ~ a * y + b`` and its maximum absolute residual."""
    x, y = _check_pair(x_probit, y_probit)
    xc = x - x.mean()
    yc = _centered(y, "y")
    _centered(x, "x")
    a = float(xc @ yc / (yc @ yc))
    b = float(x.mean() - a * y.mean())
    eps_max = float(np.abs(x - (a * y + b)).max())
    return LineFit(a, b, eps_max)


# ---------------------------------------------------------------------------
# subset consistency
# ---------------------------------------------------------------------------


def jaccard(a, b):
    a, b = set(a), set(b)
    union = a | b
    if not union:
        raise EmptySets("Jaccard index undefined for two empty sets")
    return len(a & b) / len(union)


def mean_consecutive_jaccard(subsets):
    return float(np.mean([jaccard(s, t) for s, t in zip(subsets[:-1], subsets[1:])]))


def nested_jaccard_bound(sizes):
    """Mean consecutive Jaccard of a nested sequence with these sizes."""
    return float(np.mean([a / b for a, b in zip(sizes[:-1], sizes[1:])]))


def random_jaccard_bound(sizes, universe, random_trials=200, seed=0):
    """Monte Carlo mean consecutive Jaccard of independent uniform subsets."""
    d = int(universe)
    vals = np.empty(random_trials)
    for t in range(random_trials):
        rng = _random.substream(seed, "jaccard", t)
        seq = [rng.choice(d, size=s, replace=False) for s in sizes]
        vals[t] = mean_consecutive_jaccard(seq)
    return float(vals.mean())


class JaccardConsistency(NamedTuple):
    normalized: float
    mean: float
    lower: float
    upper: float


def normalized_jaccard_sequence(subsets, universe, random_trials=200, seed=0, *, details=False):
    """Consecutive-overlap consistency rescaled between random and nested
    reference sequences, clamped to ``[0, 1]``.

    Parameters
    ----------
    subsets : list of sets
        Ordered by strictly increasing size.
    universe : int
        Number of candidate examples the subsets were drawn from.
    """
    subsets = [set(s) for s in subsets]
    if len(subsets) < 2:
        raise OODSelectError("need at least two subsets")
    sizes = [len(s) for s in subsets]
    if any(a >= b for a, b in zip(sizes[:-1], sizes[1:])):
        raise OODSelectError(f"subset sizes must be strictly increasing, got {sizes}")
    if sizes[-1] > universe:
        raise OODSelectError("largest subset exceeds the universe")
    jbar = mean_consecutive_jaccard(subsets)
    jmax = nested_jaccard_bound(sizes)
    jmin = random_jaccard_bound(sizes, universe, random_trials, seed)
    if jmax <= jmin:
        raise NormalizationDegenerate(f"nested bound {jmax:g} <= random bound {jmin:g}")
    if jbar == jmax:
        value = 1.0
    else:
        value = min(1.0, max(0.0, (jbar - jmin) / (jmax - jmin)))
    if details:
        return JaccardConsistency(value, jbar, jmin, jmax)
    return value


# ---------------------------------------------------------------------------
# prevalence shift
# ---------------------------------------------------------------------------

_BOOT_SHARD = 250


def _boot_shard(codes, n_cat, size, n, seed, shard):
    rng = _random.substream(seed, "boot", shard)
    draws = rng.integers(0, len(codes), size=(n, size))
    counts = np.stack([np.bincount(row, minlength=n_cat) for row in codes[draws]])
    return counts / size


def bootstrap_prevalence_shift(
    subset_values, full_values, n_resamples=1000, seed=0, confidence=0.95, n_jobs=1
):
    """Bootstrap test of category prevalence in a subset versus the full pool.

    Returns a dict mapping each category to ``{"delta", "ci", "p"}`` where
    ``delta = prevalence(subset) - prevalence(full)``, ``ci`` is the
    percentile interval of resampled deltas and ``p`` the two-sided
    sign-based p-value ``min(2 * min(P(d* <= 0), P(d* >= 0)), 1)``.
    """
    if n_resamples < 100:
        raise OODSelectError(f"n_resamples must be >= 100, got {n_resamples}")
    subset_values = [str(v) for v in subset_values]
    full_values = [str(v) for v in full_values]
    if not subset_values:
        raise OODSelectError("empty subset")
    cats = sorted(set(full_values) | set(subset_values))
    code = {c: k for k, c in enumerate(cats)}
    sub = np.array([code[v] for v in subset_values])
    full = np.array([code[v] for v in full_values])
    p_full = np.bincount(full, minlength=len(cats)) / len(full)
    p_sub = np.bincount(sub, minlength=len(cats)) / len(sub)

    shards = []
    left, k = n_resamples, 0
    while left > 0:
        shards.append((k, min(_BOOT_SHARD, left)))
        left -= _BOOT_SHARD
        k += 1
    parts = Parallel(n_jobs=n_jobs)(
        delayed(_boot_shard)(sub, len(cats), len(sub), n, seed, k) for k, n in shards
    )
    deltas = np.concatenate(parts) - p_full
    alpha = 1.0 - confidence
    out = {}
    for k, c in enumerate(cats):
        dk = deltas[:, k]
        lo, hi = np.quantile(dk, [alpha / 2, 1 - alpha / 2])
        p = min(1.0, 2.0 * min(np.mean(dk <= 0), np.mean(dk >= 0)))
        out[c] = {
            "delta": float(p_sub[k] - p_full[k]),
            "ci": (float(lo), float(hi)),
            "p": float(p),
            "prevalence_subset": float(p_sub[k]),
            "prevalence_full": float(p_full[k]),
        }
    return out


# ---------------------------------------------------------------------------
# model-count stability
# ---------------------------------------------------------------------------


class StabilityResult(NamedTuple):
    n: int
    converged: bool
    per_ordering: tuple


def running_pearson(x, y):
    """Pearson of every prefix ``x[:m], y[:m]``; NaN where undefined (m < 3)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    # shift for numerical stability of the running sums
    x = x - x.mean()
    y = y - y.mean()
    m = np.arange(1, len(x) + 1, dtype=np.float64)
    sx, sy = np.cumsum(x), np.cumsum(y)
    sxx, syy, sxy = np.cumsum(x * x), np.cumsum(y * y), np.cumsum(x * y)
    cxx = sxx - sx * sx / m
    cyy = syy - sy * sy / m
    cxy = sxy - sx * sy / m
    with np.errstate(invalid="ignore", divide="ignore"):
        r = cxy / np.sqrt(cxx * cyy)
    r[:2] = np.nan
    return np.clip(r, -1.0, 1.0)


def _first_stable(rho, rel_threshold, window, floor):
    # rho[m - 1] is the correlation over the first m models
    n_total = len(rho)
    change = np.abs(np.diff(rho)) / np.maximum(np.abs(rho[:-1]), floor)
    ok = change < rel_threshold  # ok[m - 1]: step m -> m + 1
    ok[:2] = False
    ok[np.isnan(change)] = False
    for n in range(3, n_total - window):
        if ok[n - 1:n + window].all():
            return n, True
    return n_total, False


def model_count_stability(
    id_acc,
    ood_acc,
    rel_threshold=0.01,
    n_orderings=32,
    window=25,
    seed=0,
    eps=DEFAULT_CLIP_EPS,
    floor=0.05,
):
    """Smallest model count after which adding models moves the probit
    correlation by less than ``rel_threshold`` (relative), for ``window``
    consecutive additions. Reports the median over random model orderings.
    """
    x = probit(id_acc, eps)
    y = probit(ood_acc, eps)
    n_total = len(x)
    if len(y) != n_total:
        raise OODSelectError("accuracy vectors differ in length")
    if n_total < window + 4:
        raise TooFewModels(f"need at least window + 4 = {window + 4} models, got {n_total}")
    results = []
    for k in range(n_orderings):
        perm = _random.substream(seed, "stability", k).permutation(n_total)
        results.append(_first_stable(running_pearson(x[perm], y[perm]), rel_threshold, window, floor))
    ns = [n for n, _ in results]
    median = int(math.ceil(np.median(ns)))
    return StabilityResult(median, all(c for _, c in results), tuple(ns))
