"""Synthetic correctness matrices with planted example pools, and
brute-force oracles for the selection problem and its theory.
"""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import comb, expit, ndtri

from . import _random
from .data import (
    DEFAULT_CLIP_EPS,
    CorrectnessMatrix,
    ModelTable,
    probit,
    probit_derivative,
)
from .exceptions import CombinatorialGuardExceeded, DegenerateVariance, OODSelectError
from .stats import pearson

BRUTE_FORCE_GUARD = 10**6


@dataclass(frozen=True)
class PlantedSpec:
    """Recipe for a planted instance.

    ``n_families > 0`` splits the models round-robin into families whose
    skills come from overlapping but distinct windows of the skill range.
    """

    n_models: int = 300
    n_aligned: int = 1400
    n_inverted: int = 500
    n_noise: int = 100
    skill_low: float = 0.55
    skill_high: float = 0.95
    slope: float = 10.0
    seed: int = 0
    obs_noise: float = 0.01
    n_families: int = 0

    @property
    def n_examples(self):
        return self.n_aligned + self.n_inverted + self.n_noise

    def validate(self):
        if self.n_examples < 1 or min(self.n_aligned, self.n_inverted, self.n_noise) < 0:
            raise OODSelectError("planted spec needs non-negative pools with at least one example")
        if self.n_models < 1:
            raise OODSelectError("planted spec needs at least one model")
        if not 0 < self.skill_low < self.skill_high < 1:
            raise OODSelectError("need 0 < skill_low < skill_high < 1")
        if self.slope <= 0:
            raise OODSelectError("slope must be positive")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class PlantedTruth:
    aligned_ids: frozenset
    inverted_ids: frozenset
    noise_ids: frozenset
    model_skills: np.ndarray

    def to_dict(self):
        return {
            "aligned_ids": sorted(self.aligned_ids),
            "inverted_ids": sorted(self.inverted_ids),
            "noise_ids": sorted(self.noise_ids),
            "model_skills": [float(a) for a in self.model_skills],
        }


def _family_skills(spec, rng):
    k = spec.n_families
    fam = np.arange(spec.n_models) % k
    width = (spec.skill_high - spec.skill_low) / k
    lo = spec.skill_low + fam * width - 0.25 * width
    hi = lo + 1.5 * width
    lo = np.maximum(lo, spec.skill_low)
    hi = np.minimum(hi, spec.skill_high)
    skills = lo + (hi - lo) * rng.random(spec.n_models)
    return skills, [f"fam{f}" for f in fam]


def generate_planted(spec: PlantedSpec):
    """Draw a planted instance.

    Model skill ``a_i ~ U(skill_low, skill_high)``; reported ID accuracy is
    ``a_i`` plus ``N(0, obs_noise)``. Aligned example ``j`` is answered
    correctly with probability ``sigmoid(c (a_i - tau_j))``, inverted ones
    with ``sigmoid(-c (a_i - tau_j))``, ``tau_j ~ U(skill range)``; noise
    examples with a skill-free ``q_j ~ U(0.05, 0.5)``.

    Returns
    -------
    (CorrectnessMatrix, ModelTable, PlantedTruth)
    """
    spec.validate()
    seed = spec.seed
    n, d = spec.n_models, spec.n_examples
    rng_models = _random.substream(seed, "planted", "models")
    if spec.n_families > 0:
        skills, family = _family_skills(spec, rng_models)
    else:
        skills = rng_models.uniform(spec.skill_low, spec.skill_high, size=n)
        family = [""] * n
    id_acc = np.clip(skills + spec.obs_noise * rng_models.standard_normal(n), 1e-3, 1 - 1e-3)

    kinds = np.array([0] * spec.n_aligned + [1] * spec.n_inverted + [2] * spec.n_noise)
    kinds = kinds[_random.substream(seed, "planted", "layout").permutation(d)]

    rng_ex = _random.substream(seed, "planted", "examples")
    tau = rng_ex.uniform(spec.skill_low, spec.skill_high, size=d)
    q = rng_ex.uniform(0.05, 0.5, size=d)
    sign = np.where(kinds == 0, 1.0, -1.0)
    prob = expit(sign[None, :] * spec.slope * (skills[:, None] - tau[None, :]))
    prob[:, kinds == 2] = q[kinds == 2]

    rng_cells = _random.substream(seed, "planted", "cells")
    z = (rng_cells.random((n, d)) < prob).astype(np.uint8)

    model_ids = [f"m{i:05d}" for i in range(n)]
    example_ids = [f"e{j:06d}" for j in range(d)]
    matrix = CorrectnessMatrix(z, model_ids, example_ids)
    models = ModelTable.from_arrays(model_ids, id_acc, family)
    ids = np.array(example_ids)
    truth = PlantedTruth(
        frozenset(ids[kinds == 0]),
        frozenset(ids[kinds == 1]),
        frozenset(ids[kinds == 2]),
        skills,
    )
    return matrix, models, truth


# ---------------------------------------------------------------------------
# exhaustive oracle
# ---------------------------------------------------------------------------


def _batch_corr(x_c, acc, eps):
    p = ndtri(np.clip(acc, eps, 1 - eps))
    y = p - p.mean(axis=0, keepdims=True)
    ny = np.linalg.norm(y, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (x_c @ y) / (np.linalg.norm(x_c) * ny)
    r[ny <= 1e-12] = np.inf
    return r


def brute_force_best_subset(z, id_acc, S, clip_eps=DEFAULT_CLIP_EPS, example_ids=None,
                            guard=BRUTE_FORCE_GUARD, chunk=20000):
    """Exhaustively find the size-``S`` subset with the lowest probit
    correlation between ``id_acc`` and subset accuracy.

    Subsets whose accuracy vector has zero variance are skipped. Ties go to
    the lexicographically first combination of column indices.

    Returns
    -------
    (set of ids, float)
    """
    if isinstance(z, CorrectnessMatrix):
        example_ids = example_ids or z.example_ids
        z = z.z
    z = np.asarray(z, dtype=np.float64)
    n, d = z.shape
    if example_ids is None:
        example_ids = [str(j) for j in range(d)]
    if not 1 <= S <= d:
        raise OODSelectError(f"cannot pick {S} of {d} examples")
    total = comb(d, S, exact=True)
    if total > guard:
        raise CombinatorialGuardExceeded(f"C({d}, {S}) = {total} exceeds guard {guard}")
    x = probit(id_acc, clip_eps)
    x_c = x - x.mean()
    if np.linalg.norm(x_c) <= 1e-12:
        raise DegenerateVariance("ID accuracies have zero variance")
    best_val, best_combo = np.inf, None
    combos = itertools.combinations(range(d), S)
    while True:
        block = np.array(list(itertools.islice(combos, chunk)), dtype=np.intp)
        if block.size == 0:
            break
        acc = z[:, block].sum(axis=2) / S  # (n, n_block)
        r = _batch_corr(x_c, acc, clip_eps)
        k = int(np.argmin(r))
        if r[k] < best_val:
            best_val, best_combo = float(r[k]), block[k]
    if best_combo is None:
        raise DegenerateVariance("every subset has zero accuracy variance")
    return {example_ids[j] for j in best_combo}, best_val


# ---------------------------------------------------------------------------
# non-submodularity
# ---------------------------------------------------------------------------


class Witness(NamedTuple):
    small: frozenset  # s_i
    large: frozenset  # s_j, superset of s_i
    k: int
    gain_small: float
    gain_large: float
    z: np.ndarray
    id_acc: np.ndarray

    def to_dict(self):
        return {
            "s_i": sorted(self.small),
            "s_j": sorted(self.large),
            "k": self.k,
            "gain_s_i": self.gain_small,
            "gain_s_j": self.gain_large,
            "z": self.z.astype(int).tolist(),
            "id_acc": [float(a) for a in self.id_acc],
        }


def subset_correlation(z, id_acc, cols, clip_eps=DEFAULT_CLIP_EPS):
    """Probit Pearson correlation of ID accuracy and accuracy on ``cols``."""
    cols = sorted(cols)
    acc = np.asarray(z, dtype=np.float64)[:, cols].mean(axis=1)
    return pearson(probit(id_acc, clip_eps), probit(acc, clip_eps))


def marginal_gains(z, id_acc, small, large, k, set_function=None):
    """Return ``(f(small + k) - f(small), f(large + k) - f(large))``."""
    f = set_function or subset_correlation
    small, large = set(small), set(large)
    g_small = f(z, id_acc, small | {k}) - f(z, id_acc, small)
    g_large = f(z, id_acc, large | {k}) - f(z, id_acc, large)
    return g_small, g_large


def nonsubmodularity_witness(n_models=8, d=6, trials=100_000, seed=0, set_function=None, tol=1e-12):
    """Search random instances for a violation of diminishing returns.

    Each trial draws a binary ``n_models x d`` matrix, ID accuracies, nested
    subsets ``s_i <= s_j`` and an index ``k`` outside ``s_j``; it returns the
    first trial where the gain of adding ``k`` to ``s_i`` is strictly smaller
    (by more than ``tol``) than the gain of adding it to ``s_j``. Returns
    ``None`` if no trial qualifies.
    """
    if d < 3:
        raise OODSelectError("need d >= 3")
    for t in range(trials):
        rng = _random.substream(seed, "witness", t)
        z = rng.integers(0, 2, size=(n_models, d))
        id_acc = rng.uniform(0.05, 0.95, size=n_models)
        large_size = int(rng.integers(1, d))  # leaves room for k
        perm = rng.permutation(d)
        large = set(perm[:large_size].tolist())
        k = int(perm[large_size])
        small = set(rng.choice(sorted(large), size=int(rng.integers(1, large_size + 1)), replace=False).tolist())
        try:
            g_small, g_large = marginal_gains(z, id_acc, small, large, k, set_function)
        except DegenerateVariance:
            continue
        if g_small < g_large - tol:
            return Witness(frozenset(small), frozenset(large), k, float(g_small), float(g_large), z, id_acc)
    return None


# ---------------------------------------------------------------------------
# decay probes
# ---------------------------------------------------------------------------


class DecayProbe(NamedTuple):
    sizes: tuple
    max_abs_delta: tuple
    slope: float

    def to_dict(self):
        return {
            "points": [{"size": s, "max_abs_delta_r": d} for s, d in zip(self.sizes, self.max_abs_delta)],
            "slope": self.slope,
        }


def _new_model_delta(n, rng, alpha):
    zw = rng.uniform(alpha, 1 - alpha, size=(2, n))
    x, y = ndtri(zw[0]), ndtri(zw[1])
    before = pearson(x, y)
    beta = rng.uniform(0.5, 2.0)
    lo, hi = max(alpha, alpha / beta), min(1 - alpha, (1 - alpha) / beta)
    z_new = rng.uniform(lo, hi)
    after = pearson(np.append(x, ndtri(z_new)), np.append(y, ndtri(beta * z_new)))
    return abs(after - before)


def _new_example_delta(S, rng, alpha, n_models):
    skills = rng.uniform(alpha, 1 - alpha, size=n_models)
    w = rng.uniform(alpha, 1 - alpha, size=n_models)
    thresholds = rng.random(S + 1)
    z = (thresholds[None, :] < skills[:, None]).astype(np.float64)
    y = ndtri(w)
    before = pearson(probit(z[:, :S].mean(axis=1), alpha), y)
    after = pearson(probit(z.mean(axis=1), alpha), y)
    return abs(after - before)


def lemma_decay_probe(kind, sizes=(16, 32, 64, 128, 256, 512), trials=200, seed=0,
                      alpha=0.05, n_models=64):
    """Largest observed change in probit correlation after adding one model
    (``kind="new_model"``) or one selected example (``kind="new_example"``),
    per size, and the least-squares slope of log(max change) on log(size).

    Accuracies stay inside ``[alpha, 1 - alpha]``. For ``new_model`` the
    appended pair is ``(z, beta * z)`` with ``beta ~ U(0.5, 2)``. For
    ``new_example``, ``n_models`` models of uniform skill answer example
    ``j`` correctly iff a shared threshold ``u_j`` lies below their skill, so
    accuracy spread across models does not shrink with subset size.
    """
    sizes = tuple(int(s) for s in sizes)
    if any(s < 8 for s in sizes) or any(a >= b for a, b in zip(sizes[:-1], sizes[1:])):
        raise OODSelectError("sizes must be increasing and each >= 8")
    if kind not in ("new_model", "new_example"):
        raise OODSelectError(f"unknown probe kind {kind!r}")
    maxima = []
    for size in sizes:
        worst = 0.0
        for t in range(trials):
            rng = _random.substream(seed, "decay", kind, size, t)
            try:
                if kind == "new_model":
                    delta = _new_model_delta(size, rng, alpha)
                else:
                    delta = _new_example_delta(size, rng, alpha, n_models)
            except DegenerateVariance:
                continue
            worst = max(worst, delta)
        maxima.append(worst)
    slope = float(np.polyfit(np.log(sizes), np.log(maxima), 1)[0])
    return DecayProbe(sizes, tuple(maxima), slope)


# ---------------------------------------------------------------------------
# Lipschitz check
# ---------------------------------------------------------------------------


class LipschitzProbe(NamedTuple):
    constant: float
    ratios: np.ndarray
    pairs_used: int

    @property
    def violations(self):
        return int(np.sum(self.ratios > self.constant))


def _mass_preserving_weights(rng, d, S):
    hot = np.zeros(d)
    hot[rng.choice(d, size=S, replace=False)] = 1.0
    t = rng.random()
    return t * hot + (1 - t) * (S / d)


def lipschitz_probe(z, id_acc, S, pairs=500, seed=0, clip_eps=DEFAULT_CLIP_EPS):
    """Empirical check that the weighted-selection correlation is Lipschitz
    in the weights, over random pairs of equal mass ``S``.

    Pairs whose weighted accuracies touch the clip region are discarded. The
    constant is ``2 L_f ||Z||_2 / (S * eps)``, where ``L_f`` is the largest
    probit slope over the sampled accuracies and ``eps`` the smallest norm of
    a centred probit-accuracy vector among the sampled weights.
    """
    z = np.asarray(z.z if isinstance(z, CorrectnessMatrix) else z, dtype=np.float64)
    n, d = z.shape
    y = probit(id_acc, clip_eps)
    y_c = y - y.mean()
    y_hat = y_c / np.linalg.norm(y_c)
    op_norm = float(np.linalg.norm(z, 2))

    def point(s):
        m = z @ s / S
        if np.any(m <= clip_eps) or np.any(m >= 1 - clip_eps):
            return None
        p = ndtri(m)
        u = p - p.mean()
        nu = float(np.linalg.norm(u))
        return float(y_hat @ u) / nu, nu, float(probit_derivative(m, clip_eps).max())

    ratios, min_norm, max_slope = [], np.inf, 0.0
    for t in range(pairs):
        rng = _random.substream(seed, "lipschitz", t)
        s1, s2 = _mass_preserving_weights(rng, d, S), _mass_preserving_weights(rng, d, S)
        a, b = point(s1), point(s2)
        if a is None or b is None:
            continue
        dist = float(np.linalg.norm(s1 - s2))
        if dist == 0:
            continue
        ratios.append(abs(a[0] - b[0]) / dist)
        min_norm = min(min_norm, a[1], b[1])
        max_slope = max(max_slope, a[2], b[2])
    if not ratios:
        raise OODSelectError("no admissible weight pairs sampled")
    constant = 2.0 * max_slope * op_norm / (S * min_norm)
    return LipschitzProbe(constant, np.array(ratios), len(ratios))
