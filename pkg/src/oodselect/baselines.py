"""Reference selectors that OODSelect is compared against.

* uniform random subsets,
* the examples misclassified by the most models,
* the OOD examples farthest from the ID data in an embedding space.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.feature_selection import SelectorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import _random
from .data import CorrectnessMatrix, EmbeddingTable, ModelTable
from .exceptions import DimensionMismatch, OODSelectError

DISTANCE_METRICS = ("centroid_euclidean", "max_min_greedy")


def _universe(universe):
    if isinstance(universe, (int, np.integer)):
        return [str(j) for j in range(int(universe))]
    return [str(u) for u in universe]


def _check_size(S, d):
    if not 1 <= S <= d:
        raise OODSelectError(f"cannot select {S} of {d} examples")


def random_subset(universe, S, seed=0):
    """Uniform size-``S`` subset without replacement.

    ``universe`` is either a count ``d`` (ids ``"0" .. "d-1"``) or a sequence
    of ids. ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    ids = _universe(universe)
    _check_size(S, len(ids))
    rng = seed if isinstance(seed, np.random.Generator) else _random.substream(seed, "baseline", "random")
    picks = rng.choice(len(ids), size=S, replace=False)
    return {ids[j] for j in picks}


def _ranked_ids(scores, ids, S):
    # descending score, ascending id
    order = sorted(range(len(ids)), key=lambda j: (-scores[j], ids[j]))
    return {ids[j] for j in order[:S]}


def most_misclassified(matrix: CorrectnessMatrix, models: ModelTable, S, split="train"):
    """The ``S`` examples misclassified by the most models of ``split``."""
    _check_size(S, matrix.n_examples)
    if split is None:
        rows = np.arange(matrix.n_models)
    else:
        if models.model_ids != matrix.model_ids:
            models = models.reindex(matrix.model_ids)
        rows = np.flatnonzero(models.split_mask(split))
        if rows.size == 0:
            raise OODSelectError(f"split {split!r} has no models")
    wrong = rows.size - matrix.z[rows].sum(axis=0, dtype=np.int64)
    return _ranked_ids(wrong, list(matrix.example_ids), S)


def farthest_from_id(ood_emb: EmbeddingTable, id_emb: EmbeddingTable, S, metric="centroid_euclidean"):
    """OOD examples far from the ID embeddings.

    ``centroid_euclidean`` ranks by distance to the ID centroid.
    ``max_min_greedy`` adds, one at a time, the remaining OOD example whose
    nearest ID vector is farthest away.
    """
    if ood_emb.dim != id_emb.dim:
        raise DimensionMismatch(f"OOD dim {ood_emb.dim} != ID dim {id_emb.dim}")
    _check_size(S, len(ood_emb))
    ids = list(ood_emb.ids)
    if metric == "centroid_euclidean":
        centroid = id_emb.vectors.mean(axis=0)
        dist = np.linalg.norm(ood_emb.vectors - centroid, axis=1)
        return _ranked_ids(dist, ids, S)
    if metric == "max_min_greedy":
        return set(max_min_order(ood_emb, id_emb)[:S])
    raise OODSelectError(f"unknown distance metric {metric!r}")


def _min_dist(ood, ref, chunk=1024):
    out = np.empty(len(ood))
    for start in range(0, len(ood), chunk):
        block = ood[start:start + chunk]
        d2 = ((block[:, None, :] - ref[None, :, :]) ** 2).sum(axis=2)
        out[start:start + chunk] = np.sqrt(d2.min(axis=1))
    return out


def max_min_order(ood_emb: EmbeddingTable, id_emb: EmbeddingTable):
    """Greedy order of OOD ids by distance to the nearest ID vector.

    Each step takes the unpicked example with the largest minimum distance to
    the ID set (ties: smallest id). The ID set stays fixed, so the greedy
    order equals a sort on that distance.
    """
    dist = _min_dist(ood_emb.vectors, id_emb.vectors)
    ids = list(ood_emb.ids)
    return [ids[j] for j in sorted(range(len(ids)), key=lambda j: (-dist[j], ids[j]))]


# ---------------------------------------------------------------------------
# estimator wrappers
# ---------------------------------------------------------------------------


class _SubsetSelector(SelectorMixin, BaseEstimator):
    def _get_support_mask(self):
        check_is_fitted(self, "support_")
        mask = np.zeros(self.n_features_in_, dtype=bool)
        mask[self.support_] = True
        return mask


class RandomSubsetSelector(_SubsetSelector):
    """Keep ``n_select`` uniformly random columns."""

    def __init__(self, n_select=100, random_state=0):
        self.n_select = n_select
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X)
        self.n_features_in_ = X.shape[1]
        picked = random_subset(X.shape[1], int(self.n_select), self.random_state)
        self.support_ = np.sort([int(j) for j in picked])
        return self


class MostMisclassifiedSelector(_SubsetSelector):
    """Keep the ``n_select`` columns with the fewest correct models."""

    def __init__(self, n_select=100):
        self.n_select = n_select

    def fit(self, X, y=None):
        X = check_array(X)
        _check_size(int(self.n_select), X.shape[1])
        self.n_features_in_ = X.shape[1]
        wrong = X.shape[0] - X.sum(axis=0)
        order = np.lexsort((np.arange(X.shape[1]), -wrong))
        self.support_ = np.sort(order[: int(self.n_select)])
        return self


class FarthestFromIDSelector(_SubsetSelector):
    """Keep the ``n_select`` rows of ``X`` (OOD embeddings) farthest from ``id_embeddings``.

    Unlike the other selectors this one selects samples, not columns, so
    ``transform`` is not meaningful; use ``support_``.
    """

    def __init__(self, id_embeddings=None, n_select=100, metric="centroid_euclidean"):
        self.id_embeddings = id_embeddings
        self.n_select = n_select
        self.metric = metric

    def fit(self, X, y=None):
        X = check_array(X)
        ref = check_array(self.id_embeddings)
        ids = [f"{j:09d}" for j in range(X.shape[0])]
        picked = farthest_from_id(
            EmbeddingTable(tuple(ids), X),
            EmbeddingTable(tuple(f"{j}" for j in range(len(ref))), ref),
            int(self.n_select),
            self.metric,
        )
        self.n_features_in_ = X.shape[0]
        self.support_ = np.sort([int(j) for j in picked])
        return self
