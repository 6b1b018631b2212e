"""Correctness matrices, model and example metadata, and the shared
accuracy transforms.

The correctness matrix is kept bit-packed by row; reductions unpack into
float64 so accumulated accuracies are exact for any realistic width.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import ndtri

from . import _random
from .exceptions import (
    DimensionMismatch,
    DuplicateExampleId,
    DuplicateModelId,
    DegenerateSelection,
    EmptyMatrix,
    InsufficientFamilies,
    NonBinaryCell,
    OODSelectError,
    RaggedRow,
    UnknownId,
)

DEFAULT_CLIP_EPS = 1e-3
DEFAULT_WEIGHT_FLOOR = 1e-6
SPLITS = ("train", "val", "test")
UNASSIGNED = "unassigned"


# ---------------------------------------------------------------------------
# probit
# ---------------------------------------------------------------------------


def _check_eps(eps):
    if not 0.0 < eps < 0.5:
        raise OODSelectError(f"clip margin eps must lie in (0, 0.5), got {eps}")


def probit(p, eps=DEFAULT_CLIP_EPS):
    """Clipped inverse standard-normal CDF.

    Parameters
    ----------
    p : float or array-like
        Probabilities in ``[0, 1]``.
    eps : float
        Clip margin; ``p`` is clamped to ``[eps, 1 - eps]`` first.

    Returns
    -------
    float or ndarray
        ``Phi^{-1}(clip(p, eps, 1 - eps))``. Scalars in, scalar out.
    """
    _check_eps(eps)
    arr = np.asarray(p, dtype=np.float64)
    if np.any(np.isnan(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise OODSelectError("probit expects probabilities in [0, 1]")
    out = ndtri(np.clip(arr, eps, 1.0 - eps))
    if out.ndim == 0:
        return float(out)
    return out


def probit_derivative(p, eps=DEFAULT_CLIP_EPS):
    """Derivative of :func:`probit` with respect to ``p``.

    Equals ``1 / phi(probit(p))`` strictly inside the clip interval and 0 on
    the clipped regions (the kink itself is assigned 0).
    """
    arr = np.asarray(p, dtype=np.float64)
    inside = (arr > eps) & (arr < 1.0 - eps)
    q = ndtri(np.clip(arr, eps, 1.0 - eps))
    return np.where(inside, math.sqrt(2.0 * math.pi) * np.exp(0.5 * q * q), 0.0)


def norm_ppf(q):
    """Unclipped standard-normal quantile, for critical values."""
    return float(ndtri(q))


# ---------------------------------------------------------------------------
# correctness matrix
# ---------------------------------------------------------------------------


def _check_unique(ids, exc, what):
    seen = set()
    for i in ids:
        if i in seen:
            raise exc(f"duplicate {what} id {i!r}")
        seen.add(i)


class CorrectnessMatrix:
    """Immutable ``N x d`` binary matrix of per-model, per-example correctness.

    Parameters
    ----------
    z : array-like of shape (n_models, n_examples)
        Entries must be exactly 0 or 1.
    model_ids, example_ids : sequence of str
        Unique identifiers for rows and columns.
    """

    __slots__ = ("_packed", "n_models", "n_examples", "model_ids", "example_ids", "_dense")

    def __init__(self, z, model_ids: Sequence[str], example_ids: Sequence[str]):
        arr = np.asarray(z)
        if arr.ndim != 2 or arr.size == 0:
            raise EmptyMatrix("correctness matrix must be a non-empty 2-D array")
        n, d = arr.shape
        model_ids = tuple(str(m) for m in model_ids)
        example_ids = tuple(str(e) for e in example_ids)
        if len(model_ids) != n or len(example_ids) != d:
            raise DimensionMismatch(
                f"matrix is {n}x{d} but got {len(model_ids)} model ids and "
                f"{len(example_ids)} example ids"
            )
        _check_unique(model_ids, DuplicateModelId, "model")
        _check_unique(example_ids, DuplicateExampleId, "example")
        bad = (arr != 0) & (arr != 1)
        if np.any(bad):
            i, j = map(int, np.argwhere(bad)[0])
            raise NonBinaryCell(model_ids[i], example_ids[j], arr[i, j].item())
        self._packed = np.packbits(arr.astype(np.uint8), axis=1)
        self._packed.setflags(write=False)
        self.n_models = n
        self.n_examples = d
        self.model_ids = model_ids
        self.example_ids = example_ids
        self._dense = None

    def __repr__(self):
        return f"CorrectnessMatrix(n_models={self.n_models}, n_examples={self.n_examples})"

    def __eq__(self, other):
        if not isinstance(other, CorrectnessMatrix):
            return NotImplemented
        return (
            self.model_ids == other.model_ids
            and self.example_ids == other.example_ids
            and np.array_equal(self._packed, other._packed)
        )

    __hash__ = None

    @property
    def packed(self):
        return self._packed

    @property
    def z(self):
        """Unpacked ``uint8`` view (read-only, cached)."""
        if self._dense is None:
            dense = np.unpackbits(self._packed, axis=1, count=self.n_examples)
            dense.setflags(write=False)
            self._dense = dense
        return self._dense

    def as_float(self):
        return self.z.astype(np.float64)

    def row_means(self):
        return self.z.sum(axis=1, dtype=np.float64) / self.n_examples

    def example_index(self, ids):
        lookup = {e: j for j, e in enumerate(self.example_ids)}
        try:
            return np.array([lookup[str(e)] for e in ids], dtype=np.intp)
        except KeyError as err:
            raise UnknownId(f"unknown example id {err.args[0]!r}") from None

    def model_index(self, ids):
        lookup = {m: i for i, m in enumerate(self.model_ids)}
        try:
            return np.array([lookup[str(m)] for m in ids], dtype=np.intp)
        except KeyError as err:
            raise UnknownId(f"unknown model id {err.args[0]!r}") from None

    def take_models(self, rows):
        rows = np.asarray(rows, dtype=np.intp)
        return CorrectnessMatrix(
            self.z[rows], [self.model_ids[i] for i in rows], self.example_ids
        )

    def take_examples(self, cols):
        cols = np.asarray(cols, dtype=np.intp)
        return CorrectnessMatrix(
            self.z[:, cols], self.model_ids, [self.example_ids[j] for j in cols]
        )


def load_correctness(path) -> CorrectnessMatrix:
    """Read a correctness CSV (``model_id,<example ids...>`` header, 0/1 cells)."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyMatrix(f"{path} is empty") from None
        example_ids = [h.strip() for h in header[1:]]
        if not example_ids:
            raise EmptyMatrix(f"{path} has no example columns")
        _check_unique(example_ids, DuplicateExampleId, "example")
        model_ids, rows = [], []
        seen = set()
        for line in reader:
            if not line or (len(line) == 1 and not line[0].strip()):
                continue
            mid = line[0].strip()
            if mid in seen:
                raise DuplicateModelId(f"duplicate model id {mid!r} in {path}")
            seen.add(mid)
            cells = [c.strip() for c in line[1:]]
            if len(cells) != len(example_ids):
                raise RaggedRow(mid, len(example_ids), len(cells))
            row = np.array(cells)
            ok = (row == "0") | (row == "1")
            if not ok.all():
                j = int(np.argmin(ok))
                raise NonBinaryCell(mid, example_ids[j], cells[j])
            model_ids.append(mid)
            rows.append(row == "1")
    if not rows:
        raise EmptyMatrix(f"{path} has no model rows")
    return CorrectnessMatrix(np.array(rows, dtype=np.uint8), model_ids, example_ids)


def write_correctness(matrix: CorrectnessMatrix, path):
    path = Path(path)
    z = matrix.z
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(("model_id",) + matrix.example_ids) + "\n")
        for mid, row in zip(matrix.model_ids, z):
            fh.write(mid + "," + ",".join("1" if v else "0" for v in row) + "\n")


# ---------------------------------------------------------------------------
# model metadata
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelRecord:
    model_id: str
    id_accuracy: float
    family: str = ""
    split: str = UNASSIGNED


@dataclass(frozen=True)
class ModelTable:
    """Per-model metadata, column-oriented."""

    model_ids: tuple
    id_accuracy: np.ndarray
    family: tuple
    split: tuple

    def __post_init__(self):
        n = len(self.model_ids)
        acc = np.array(self.id_accuracy, dtype=np.float64)
        acc.setflags(write=False)
        object.__setattr__(self, "id_accuracy", acc)
        object.__setattr__(self, "model_ids", tuple(self.model_ids))
        object.__setattr__(self, "family", tuple(self.family))
        object.__setattr__(self, "split", tuple(self.split))
        if not (len(acc) == len(self.family) == len(self.split) == n):
            raise DimensionMismatch("model table columns have unequal lengths")
        _check_unique(self.model_ids, DuplicateModelId, "model")
        for s in self.split:
            if s not in SPLITS and s != UNASSIGNED:
                raise OODSelectError(f"unknown split label {s!r}")

    @classmethod
    def from_records(cls, records: Sequence[ModelRecord]):
        return cls(
            tuple(r.model_id for r in records),
            np.array([r.id_accuracy for r in records], dtype=np.float64),
            tuple(r.family for r in records),
            tuple(r.split for r in records),
        )

    @classmethod
    def from_arrays(cls, model_ids, id_accuracy, family=None, split=None):
        n = len(model_ids)
        family = tuple(family) if family is not None else ("",) * n
        split = tuple(split) if split is not None else (UNASSIGNED,) * n
        return cls(tuple(str(m) for m in model_ids), np.asarray(id_accuracy, float), family, split)

    def __len__(self):
        return len(self.model_ids)

    def records(self):
        return [
            ModelRecord(m, float(a), f, s)
            for m, a, f, s in zip(self.model_ids, self.id_accuracy, self.family, self.split)
        ]

    def with_splits(self, split):
        return ModelTable(self.model_ids, self.id_accuracy, self.family, tuple(split))

    def is_split(self):
        return all(s in SPLITS for s in self.split)

    def split_mask(self, split):
        return np.array([s == split for s in self.split], dtype=bool)

    def reindex(self, model_ids):
        """Return the table reordered to follow ``model_ids``."""
        lookup = {m: i for i, m in enumerate(self.model_ids)}
        try:
            idx = [lookup[str(m)] for m in model_ids]
        except KeyError as err:
            raise UnknownId(f"model {err.args[0]!r} missing from model table") from None
        return ModelTable(
            tuple(self.model_ids[i] for i in idx),
            self.id_accuracy[idx],
            tuple(self.family[i] for i in idx),
            tuple(self.split[i] for i in idx),
        )


def clip_accuracy(acc, eps=DEFAULT_CLIP_EPS, *, what="id_accuracy"):
    acc = np.asarray(acc, dtype=np.float64)
    if np.any(~np.isfinite(acc)) or np.any(acc < 0) or np.any(acc > 1):
        raise OODSelectError(f"{what} values must lie in [0, 1]")
    saturated = (acc <= eps) | (acc >= 1 - eps)
    if np.any(saturated):
        warnings.warn(
            f"{int(saturated.sum())} {what} value(s) clipped to [{eps}, {1 - eps}]",
            stacklevel=3,
        )
    return np.clip(acc, eps, 1 - eps)


def load_models(path, eps=DEFAULT_CLIP_EPS) -> ModelTable:
    """Read ``model_id,id_accuracy[,family[,split]]``.

    Accuracies of exactly 0 or 1 (anything outside ``[eps, 1 - eps]``) are
    clipped with a warning.
    """
    _check_eps(eps)
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"model_id", "id_accuracy"} <= set(reader.fieldnames):
            raise OODSelectError(f"{path} needs model_id and id_accuracy columns")
        ids, acc, fam, split = [], [], [], []
        for row in reader:
            ids.append(row["model_id"].strip())
            try:
                acc.append(float(row["id_accuracy"]))
            except ValueError:
                raise OODSelectError(
                    f"bad id_accuracy {row['id_accuracy']!r} for {ids[-1]!r}"
                ) from None
            fam.append((row.get("family") or "").strip())
            split.append((row.get("split") or "").strip() or UNASSIGNED)
    if not ids:
        raise EmptyMatrix(f"{path} has no model rows")
    return ModelTable(tuple(ids), clip_accuracy(acc, eps), tuple(fam), tuple(split))


def write_models(models: ModelTable, path, include_split=False):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["model_id", "id_accuracy", "family"] + (["split"] if include_split else [])
        w.writerow(header)
        for r in models.records():
            row = [r.model_id, repr(r.id_accuracy), r.family]
            if include_split:
                row.append(r.split)
            w.writerow(row)


# ---------------------------------------------------------------------------
# example metadata and embeddings
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExampleMeta:
    example_id: str
    label: str | None = None
    attributes: Mapping[str, str] = field(default_factory=dict)


def load_example_meta(path, matrix: CorrectnessMatrix | None = None):
    """Read ``example_id,label,<attr>...``; returns a list of :class:`ExampleMeta`."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "example_id" not in reader.fieldnames:
            raise OODSelectError(f"{path} needs an example_id column")
        attrs = [c for c in reader.fieldnames if c not in ("example_id", "label")]
        out = []
        for row in reader:
            label = row.get("label")
            out.append(
                ExampleMeta(
                    row["example_id"].strip(),
                    label.strip() if label not in (None, "") else None,
                    {a: (row.get(a) or "").strip() for a in attrs},
                )
            )
    _check_unique([m.example_id for m in out], DuplicateExampleId, "example")
    if matrix is not None:
        known = set(matrix.example_ids)
        for m in out:
            if m.example_id not in known:
                raise UnknownId(f"example {m.example_id!r} not in correctness matrix")
    return out


@dataclass(frozen=True)
class EmbeddingTable:
    ids: tuple
    vectors: np.ndarray

    def __post_init__(self):
        vec = np.array(self.vectors, dtype=np.float64)
        if vec.ndim != 2 or vec.shape[0] != len(self.ids):
            raise DimensionMismatch("embedding ids and vectors disagree in length")
        if not np.all(np.isfinite(vec)):
            raise OODSelectError("embedding vectors must be finite")
        vec.setflags(write=False)
        object.__setattr__(self, "vectors", vec)
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        _check_unique(self.ids, DuplicateExampleId, "embedding")

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.ids)


def load_embeddings(path) -> EmbeddingTable:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 2:
            raise EmptyMatrix(f"{path} has no embedding columns")
        dim = len(header) - 1
        ids, vecs = [], []
        for line in reader:
            if not line:
                continue
            if len(line) - 1 != dim:
                raise RaggedRow(line[0], dim, len(line) - 1)
            ids.append(line[0].strip())
            try:
                vecs.append([float(v) for v in line[1:]])
            except ValueError:
                raise OODSelectError(f"non-numeric embedding value for {line[0]!r}") from None
    if not ids:
        raise EmptyMatrix(f"{path} has no rows")
    return EmbeddingTable(tuple(ids), np.array(vecs))


# ---------------------------------------------------------------------------
# selected accuracy
# ---------------------------------------------------------------------------


def selected_ood_accuracy(z, s, weight_floor=DEFAULT_WEIGHT_FLOOR):
    """Per-model accuracy on the examples weighted by ``s``.

    ``out[i] = sum_j z[i, j] * s[j] / sum_j s[j]``.

    Raises
    ------
    DegenerateSelection
        If ``||s||_1`` is below ``weight_floor``.
    """
    if isinstance(z, CorrectnessMatrix):
        z = z.z
    z = np.asarray(z)
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1 or s.shape[0] != z.shape[1]:
        raise DimensionMismatch(f"weights have length {s.shape}, matrix has {z.shape[1]} columns")
    if np.any(s < 0) or np.any(s > 1):
        raise OODSelectError("selection weights must lie in [0, 1]")
    mass = s.sum()
    if mass < weight_floor:
        raise DegenerateSelection(f"selection mass {mass:g} below floor {weight_floor:g}")
    return (z @ s) / mass


def subset_accuracy(z, cols):
    """Per-model accuracy over a column index set (binary selection)."""
    if isinstance(z, CorrectnessMatrix):
        z = z.z
    cols = np.asarray(cols, dtype=np.intp)
    if cols.size == 0:
        raise DegenerateSelection("empty subset")
    return z[:, cols].sum(axis=1, dtype=np.float64) / cols.size


# ---------------------------------------------------------------------------
# model splits
# ---------------------------------------------------------------------------


def _quota(n, ratios):
    raw = np.asarray(ratios, dtype=np.float64) * n
    counts = np.floor(raw).astype(int)
    rem = n - counts.sum()
    # largest remainder, earlier split wins ties
    order = sorted(range(len(raw)), key=lambda k: (-(raw[k] - counts[k]), k))
    for k in order[:rem]:
        counts[k] += 1
    return counts


def _check_ratios(ratios):
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise OODSelectError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    return ratios


def split_models(models: ModelTable, mode="random", ratios=(0.6, 0.2, 0.2), seed=0) -> ModelTable:
    """Assign every model to train/val/test.

    ``random`` shuffles models and fills the splits by quota.
    ``family_disjoint`` assigns whole architecture families, largest first,
    to whichever split is furthest below its target count.
    """
    ratios = _check_ratios(ratios)
    seed = _random.check_random_seed(seed)
    n = len(models)
    if mode == "random":
        counts = _quota(n, ratios)
        perm = _random.substream(seed, "split", "random").permutation(n)
        split = [None] * n
        start = 0
        for name, c in zip(SPLITS, counts):
            for i in perm[start:start + c]:
                split[i] = name
            start += c
        return models.with_splits(split)
    if mode == "family_disjoint":
        families = {}
        for i, f in enumerate(models.family):
            families.setdefault(f, []).append(i)
        if len(families) < 3:
            raise InsufficientFamilies(
                f"family_disjoint splitting needs >= 3 families, got {len(families)}"
            )
        names = sorted(families)
        rng = _random.substream(seed, "split", "family")
        names = [names[k] for k in rng.permutation(len(names))]
        names.sort(key=lambda f: -len(families[f]))  # stable: seed breaks size ties
        target = np.asarray(ratios) * n
        filled = np.zeros(3)
        members = [0, 0, 0]
        assign = {}
        for k, fam in enumerate(names):
            remaining = len(names) - k
            empty = [j for j in range(3) if members[j] == 0]
            candidates = empty if remaining <= len(empty) else range(3)
            j = max(candidates, key=lambda j: (target[j] - filled[j], -j))
            assign[fam] = SPLITS[j]
            filled[j] += len(families[fam])
            members[j] += 1
        return models.with_splits([assign[f] for f in models.family])
    raise OODSelectError(f"unknown split mode {mode!r}")
