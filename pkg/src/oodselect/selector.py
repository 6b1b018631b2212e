"""Gradient-based selection of OOD example subsets that minimise the
ID/OOD probit correlation across models.

The combinatorial problem (pick ``S`` columns of the correctness matrix so
that per-model accuracy on them is as anti-correlated as possible with ID
accuracy) is relaxed to weights ``s = sigmoid(theta)`` in ``(0, 1)^d`` with a
quadratic mass penalty ``lambda * (S - sum(s))^2``. Adam runs on ``theta``
with a cosine-annealed learning rate while ``lambda`` ramps up, and the
final weights are rounded to the top ``S`` examples.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed
from scipy.special import expit, ndtri
from sklearn.base import BaseEstimator
from sklearn.feature_selection import SelectorMixin
from sklearn.utils.validation import check_array, check_is_fitted, column_or_1d

from . import _random
from .data import (
    DEFAULT_CLIP_EPS,
    DEFAULT_WEIGHT_FLOOR,
    SPLITS,
    CorrectnessMatrix,
    ModelTable,
    probit,
    subset_accuracy,
)
from .exceptions import (
    DegenerateSelection,
    DegenerateVariance,
    InvalidConfig,
    OODSelectError,
    OptimizationFailed,
)
from .stats import CorrelationReport, correlation_report

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class OptimizerConfig:
    target_size: int
    steps: int = 2000
    lr0: float = 0.05
    lambda0: float = 0.0
    lambda_max: float = 1.0
    restarts: int = 8
    seed: int = 0
    clip_eps: float = DEFAULT_CLIP_EPS
    init_scale: float = 0.01
    weight_floor: float = DEFAULT_WEIGHT_FLOOR

    def validate(self, n_examples=None):
        if self.steps < 1:
            raise InvalidConfig(f"steps must be >= 1, got {self.steps}")
        if self.target_size < 1:
            raise InvalidConfig(f"target size must be >= 1, got {self.target_size}")
        if n_examples is not None and self.target_size > n_examples:
            raise InvalidConfig(f"target size {self.target_size} exceeds {n_examples} examples")
        if self.lr0 <= 0:
            raise InvalidConfig("lr0 must be positive")
        if self.lambda0 < 0 or self.lambda_max < self.lambda0:
            raise InvalidConfig("need 0 <= lambda0 <= lambda_max")
        if self.restarts < 1:
            raise InvalidConfig("restarts must be >= 1")
        if not 0 < self.clip_eps < 0.5:
            raise InvalidConfig("clip_eps must lie in (0, 0.5)")
        if self.init_scale < 0 or self.weight_floor <= 0:
            raise InvalidConfig("init_scale must be >= 0 and weight_floor > 0")
        return self

    def to_dict(self):
        return asdict(self)


def lr_schedule(t, steps, lr0):
    return lr0 * (1.0 + math.cos(math.pi * t / steps)) / 2.0


def lambda_schedule(t, steps, lambda0, lambda_max):
    return lambda0 + (lambda_max - lambda0) * (1.0 - math.cos(math.pi * t / steps)) / 2.0


# ---------------------------------------------------------------------------
# objective and gradient
# ---------------------------------------------------------------------------


def _as_float_matrix(z):
    if isinstance(z, CorrectnessMatrix):
        return z.as_float()
    return np.asarray(z, dtype=np.float64)


def _centered_target(x_id):
    x = np.asarray(x_id, dtype=np.float64)
    x = x - x.mean()
    norm = float(np.linalg.norm(x))
    if norm <= 1e-12 * max(1.0, float(np.abs(x_id).max())):
        raise DegenerateVariance("ID accuracies have zero variance")
    return x, norm


class _Problem:
    """Precomputed pieces shared by objective and gradient evaluations."""

    def __init__(self, z, x_id, clip_eps, weight_floor):
        self.z = _as_float_matrix(z)
        self.x, self.x_norm = _centered_target(x_id)
        if self.z.shape[0] != self.x.shape[0]:
            raise OODSelectError("matrix rows and ID accuracies differ in length")
        self.eps = clip_eps
        self.floor = weight_floor

    def correlation(self, s, with_grad=False):
        mass = s.sum()
        if mass < self.floor:
            raise DegenerateSelection(f"selection mass {mass:g} below floor")
        m = self.z @ s / mass
        p = ndtri(np.clip(m, self.eps, 1.0 - self.eps))
        y = p - p.mean()
        y_norm = float(np.linalg.norm(y))
        if y_norm <= 1e-12:
            raise DegenerateVariance("weighted OOD accuracies have zero variance")
        corr = float(self.x @ y) / (self.x_norm * y_norm)
        if not with_grad:
            return corr, mass
        g_p = self.x / (self.x_norm * y_norm) - corr * y / (y_norm * y_norm)
        inside = (m > self.eps) & (m < 1.0 - self.eps)
        g_m = np.where(inside, g_p * _SQRT_2PI * np.exp(0.5 * p * p), 0.0)
        g_s = (self.z.T @ g_m - float(g_m @ m)) / mass
        return corr, mass, g_s

    def value(self, theta, S, lam):
        s = expit(theta)
        corr, mass = self.correlation(s)
        return corr + lam * (S - mass) ** 2

    def value_and_grad(self, theta, S, lam):
        s = expit(theta)
        corr, mass, g_s = self.correlation(s, with_grad=True)
        gap = S - mass
        g_theta = (g_s - 2.0 * lam * gap) * s * (1.0 - s)
        return corr + lam * gap * gap, g_theta, corr, mass


def objective(
    z, x_id, theta, S, lam, clip_eps=DEFAULT_CLIP_EPS, weight_floor=DEFAULT_WEIGHT_FLOOR
):
    """Relaxed selection objective.

    Parameters
    ----------
    z : CorrectnessMatrix or array of shape (n_models, n_examples)
        Correctness of the (training) models.
    x_id : array of shape (n_models,)
        Probit ID accuracies; centred internally.
    theta : array of shape (n_examples,)
        Pre-sigmoid selection parameters.
    S : float
        Target selection mass.
    lam : float
        Penalty weight.

    Returns
    -------
    float
        ``pearson(x_id, probit(Z s / |s|_1)) + lam * (S - |s|_1)^2``.
    """
    prob = _Problem(z, x_id, clip_eps, weight_floor)
    return prob.value(np.asarray(theta, dtype=np.float64), S, lam)


def gradient(
    z, x_id, theta, S, lam, clip_eps=DEFAULT_CLIP_EPS, weight_floor=DEFAULT_WEIGHT_FLOOR
):
    """Analytic gradient of :func:`objective` with respect to ``theta``."""
    prob = _Problem(z, x_id, clip_eps, weight_floor)
    return prob.value_and_grad(np.asarray(theta, dtype=np.float64), S, lam)[1]


# ---------------------------------------------------------------------------
# discretisation
# ---------------------------------------------------------------------------


def _id_ranks(example_ids, d):
    if example_ids is None:
        return np.arange(d)
    return np.argsort(np.argsort(np.asarray(example_ids, dtype=str), kind="stable"), kind="stable")


def top_s_indices(weights, S, example_ids=None, id_ranks=None):
    """Indices of the ``S`` largest weights; ties go to the smaller id."""
    w = np.asarray(weights, dtype=np.float64)
    if not 1 <= S <= w.size:
        raise InvalidConfig(f"cannot pick {S} of {w.size} examples")
    if id_ranks is None:
        id_ranks = _id_ranks(example_ids, w.size)
    order = np.lexsort((id_ranks, -w))
    return np.sort(order[:S])


def discretize(weights, S, example_ids):
    """Return the ids of the ``S`` examples with the largest weights."""
    return {example_ids[j] for j in top_s_indices(weights, S, example_ids)}


def binary_correlation(z, x_id, cols, clip_eps=DEFAULT_CLIP_EPS, kind="pearson"):
    acc = subset_accuracy(z, cols)
    return correlation_report(x_id, probit(acc, clip_eps), kind).r


# ---------------------------------------------------------------------------
# single restart
# ---------------------------------------------------------------------------


@dataclass
class RestartOutcome:
    index: int
    theta: np.ndarray | None = None
    objective: float = math.inf
    relaxed: float = math.inf
    mass: float = math.nan
    support: np.ndarray | None = None
    step: int = -1
    error: str | None = None
    history: list = field(default_factory=list)


def run_restart(z, x_id, config: OptimizerConfig, index, example_ids=None, record_every=0,
                checkpoints=None):
    """One Adam trajectory from a seeded random start.

    The weights are rounded to their top ``S`` at ``checkpoints`` evenly
    spaced steps (default: every step) and at the end; the outcome keeps the
    rounding with the lowest binary correlation. The relaxed optimum is often
    fractional, and the last iterate does not always round best.
    """
    prob = _Problem(z, x_id, config.clip_eps, config.weight_floor)
    d = prob.z.shape[1]
    rng = _random.substream(config.seed, "fit", "restart", index)
    S = float(config.target_size)
    # start on the mass constraint; a zero-mean start puts the mass near d/2 and
    # the penalty then swamps Adam's second-moment estimate
    theta = rng.normal(math.log(S / (d - S)) if S < d else 0.0, config.init_scale, size=d)
    m1 = np.zeros(d)
    m2 = np.zeros(d)
    if checkpoints is None:
        every = 1
    else:
        every = max(1, config.steps // checkpoints) if checkpoints else config.steps + 1
    ranks = _id_ranks(example_ids, d)
    out = RestartOutcome(index)
    seen = set()

    def consider(th, t):
        cols = top_s_indices(th, config.target_size, id_ranks=ranks)
        key = cols.tobytes()
        if key in seen:
            return
        seen.add(key)
        try:
            r = binary_correlation(prob.z, prob.x, cols, config.clip_eps)
        except DegenerateVariance:
            return
        if r < out.objective:
            out.objective, out.support, out.step = r, cols, t

    try:
        for t in range(config.steps):
            lr = lr_schedule(t, config.steps, config.lr0)
            lam = lambda_schedule(t, config.steps, config.lambda0, config.lambda_max)
            val, g, corr, mass = prob.value_and_grad(theta, S, lam)
            if record_every and t % record_every == 0:
                out.history.append((t, val, corr, mass))
            if t and t % every == 0:
                consider(theta, t)
            m1 = ADAM_BETA1 * m1 + (1 - ADAM_BETA1) * g
            m2 = ADAM_BETA2 * m2 + (1 - ADAM_BETA2) * g * g
            m1_hat = m1 / (1 - ADAM_BETA1 ** (t + 1))
            m2_hat = m2 / (1 - ADAM_BETA2 ** (t + 1))
            theta = theta - lr * m1_hat / (np.sqrt(m2_hat) + ADAM_EPS)
        lam = lambda_schedule(config.steps, config.steps, config.lambda0, config.lambda_max)
        out.relaxed = prob.value(theta, S, lam)
        out.mass = float(expit(theta).sum())
        out.theta = theta
        consider(theta, config.steps)
        if out.support is None:
            raise DegenerateVariance("every rounded subset had zero accuracy variance")
    except (DegenerateVariance, DegenerateSelection, FloatingPointError) as err:
        out.error = f"{type(err).__name__}: {err}"
    return out


def best_restart(outcomes):
    """Lowest discretised objective; earlier restart wins ties."""
    ok = [o for o in outcomes if o.error is None]
    if not ok:
        msgs = "; ".join(o.error for o in outcomes)
        raise OptimizationFailed(f"all {len(outcomes)} restarts failed: {msgs}")
    return min(ok, key=lambda o: (o.objective, o.index))


# ---------------------------------------------------------------------------
# estimator
# ---------------------------------------------------------------------------


class OODSelect(SelectorMixin, BaseEstimator):
    """Select ``n_select`` columns of a correctness matrix whose per-model
    accuracy is least (most negatively) correlated with ID accuracy.

    ``fit(X, y)`` takes the binary correctness matrix ``X`` (models by
    examples) and the ID accuracies ``y`` of the same models; afterwards
    ``transform`` keeps the selected example columns, like any sklearn
    feature selector.

    Parameters
    ----------
    n_select : int
        Number of examples to select.
    steps, lr0, lambda0, lambda_max, restarts, init_scale :
        Optimiser settings; see :class:`OptimizerConfig`.
    clip_eps : float
        Probit clip margin applied to both accuracy axes.
    random_state : int
        Root seed. Restart ``k`` draws from the ``fit/restart/k`` substream.
    n_jobs : int
        Workers for restarts. Results do not depend on it.

    Attributes
    ----------
    weights_ : ndarray of shape (n_features,)
        Relaxed weights of the winning restart.
    support_ : ndarray of int
        Sorted indices of the selected examples.
    objective_ : float
        Probit correlation of the selected subset on the fitting models.
    restart_index_ : int
    mass_ : float
        ``sum(weights_)``, close to ``n_select`` when the penalty did its job.
    restarts_ : list of RestartOutcome
    """

    def __init__(
        self,
        n_select=100,
        *,
        steps=2000,
        lr0=0.05,
        lambda0=0.0,
        lambda_max=1.0,
        restarts=8,
        init_scale=0.01,
        clip_eps=DEFAULT_CLIP_EPS,
        weight_floor=DEFAULT_WEIGHT_FLOOR,
        random_state=0,
        n_jobs=1,
    ):
        self.n_select = n_select
        self.steps = steps
        self.lr0 = lr0
        self.lambda0 = lambda0
        self.lambda_max = lambda_max
        self.restarts = restarts
        self.init_scale = init_scale
        self.clip_eps = clip_eps
        self.weight_floor = weight_floor
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _config(self):
        return OptimizerConfig(
            target_size=int(self.n_select),
            steps=int(self.steps),
            lr0=float(self.lr0),
            lambda0=float(self.lambda0),
            lambda_max=float(self.lambda_max),
            restarts=int(self.restarts),
            seed=_random.check_random_seed(self.random_state),
            clip_eps=float(self.clip_eps),
            init_scale=float(self.init_scale),
            weight_floor=float(self.weight_floor),
        )

    def fit(self, X, y, example_ids=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=4)
        if np.any((X != 0) & (X != 1)):
            raise OODSelectError("X must be a binary correctness matrix")
        y = column_or_1d(y)
        if len(y) != X.shape[0]:
            raise OODSelectError("y must hold one ID accuracy per row of X")
        config = self._config().validate(X.shape[1])
        x_id = probit(y, config.clip_eps)
        if example_ids is not None and len(example_ids) != X.shape[1]:
            raise OODSelectError("example_ids must match the columns of X")
        outcomes = Parallel(n_jobs=self.n_jobs)(
            delayed(run_restart)(X, x_id, config, k, example_ids) for k in range(config.restarts)
        )
        best = best_restart(outcomes)
        self.n_features_in_ = X.shape[1]
        self.restarts_ = outcomes
        self.weights_ = expit(best.theta)
        self.support_ = best.support
        self.objective_ = best.objective
        self.relaxed_objective_ = best.relaxed
        self.restart_index_ = best.index
        self.mass_ = best.mass
        return self

    def _get_support_mask(self):
        check_is_fitted(self, "support_")
        mask = np.zeros(self.n_features_in_, dtype=bool)
        mask[self.support_] = True
        return mask

    def selected_accuracy(self, X):
        """Per-model accuracy on the selected examples."""
        check_is_fitted(self, "support_")
        X = check_array(X, dtype=np.float64)
        return X[:, self.support_].mean(axis=1)

    def correlation(self, X, y, kind="pearson"):
        """Probit correlation of ``y`` with accuracy on the selected examples."""
        acc = self.selected_accuracy(X)
        return correlation_report(
            probit(column_or_1d(y), self.clip_eps), probit(acc, self.clip_eps), kind
        )


# ---------------------------------------------------------------------------
# split-aware selection and evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SelectionResult:
    subset: frozenset
    objective_train: float
    reports: dict
    config: OptimizerConfig
    restart_index: int
    mass: float
    n_examples: int

    @property
    def report_train(self):
        return self.reports.get("train")

    @property
    def report_val(self):
        return self.reports.get("val")

    @property
    def report_test(self):
        return self.reports.get("test")

    @property
    def size(self):
        return len(self.subset)

    def to_dict(self):
        return {
            "S": self.config.target_size,
            "subset": sorted(self.subset),
            "n_examples": self.n_examples,
            "objective_train": self.objective_train,
            "restart_index": self.restart_index,
            "mass": self.mass,
            "reports": {k: (v.to_dict() if v is not None else None) for k, v in self.reports.items()},
            "config": self.config.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            frozenset(d["subset"]),
            d["objective_train"],
            {k: (CorrelationReport.from_dict(v) if v else None) for k, v in d["reports"].items()},
            OptimizerConfig(**d["config"]),
            d["restart_index"],
            d["mass"],
            d["n_examples"],
        )


def _aligned(matrix: CorrectnessMatrix, models: ModelTable):
    if models.model_ids != matrix.model_ids:
        models = models.reindex(matrix.model_ids)
    return models


def evaluate_subset(
    subset, matrix: CorrectnessMatrix, models: ModelTable, split="test",
    kind="pearson", clip_eps=DEFAULT_CLIP_EPS,
):
    """Probit correlation report for a binary subset on one model split.

    ``split=None`` uses every model.
    """
    if not subset:
        raise OODSelectError("empty subset")
    models = _aligned(matrix, models)
    cols = matrix.example_index(sorted(subset))
    rows = np.arange(len(models)) if split is None else np.flatnonzero(models.split_mask(split))
    if rows.size == 0:
        raise OODSelectError(f"split {split!r} has no models")
    acc = subset_accuracy(matrix.z[rows], cols)
    x = probit(models.id_accuracy[rows], clip_eps)
    return correlation_report(x, probit(acc, clip_eps), kind)


def _safe_report(*args, **kw):
    try:
        return evaluate_subset(*args, **kw)
    except (DegenerateVariance, OODSelectError):
        return None


def split_reports(subset, matrix, models, kind="pearson", clip_eps=DEFAULT_CLIP_EPS):
    return {
        sp: _safe_report(subset, matrix, models, sp, kind=kind, clip_eps=clip_eps) for sp in SPLITS
    }


def _train_problem(matrix, models, config):
    models = _aligned(matrix, models)
    if not models.is_split():
        raise OODSelectError("models must be assigned to train/val/test before fitting")
    rows = np.flatnonzero(models.split_mask("train"))
    if rows.size < 4:
        raise OODSelectError(f"train split needs >= 4 models, has {rows.size}")
    config.validate(matrix.n_examples)
    z = matrix.z[rows].astype(np.float64)
    x_id = probit(models.id_accuracy[rows], config.clip_eps)
    return models, z, x_id


def _result_from(outcomes, matrix, models, config, kind):
    best = best_restart(outcomes)
    subset = frozenset(matrix.example_ids[j] for j in best.support)
    return SelectionResult(
        subset=subset,
        objective_train=best.objective,
        reports=split_reports(subset, matrix, models, kind, config.clip_eps),
        config=config,
        restart_index=best.index,
        mass=best.mass,
        n_examples=matrix.n_examples,
    )


def select_subset(matrix: CorrectnessMatrix, models: ModelTable, config: OptimizerConfig,
                  kind="pearson", n_jobs=1) -> SelectionResult:
    """Optimise on the train split, then report on train, val and test."""
    models, z, x_id = _train_problem(matrix, models, config)
    outcomes = Parallel(n_jobs=n_jobs)(
        delayed(run_restart)(z, x_id, config, k, matrix.example_ids) for k in range(config.restarts)
    )
    return _result_from(outcomes, matrix, models, config, kind)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepEntry:
    S: int
    oodselect: SelectionResult | None = None
    baselines: dict = field(default_factory=dict)  # method -> {"subset", "reports"}
    error: str | None = None

    def to_dict(self):
        return {
            "S": self.S,
            "error": self.error,
            "oodselect": self.oodselect.to_dict() if self.oodselect else None,
            "baselines": {
                name: {
                    "subset": sorted(b["subset"]),
                    "reports": {k: (v.to_dict() if v else None) for k, v in b["reports"].items()},
                }
                for name, b in self.baselines.items()
            },
        }


@dataclass
class SweepReport:
    entries: list

    def to_dict(self):
        return {"entries": [e.to_dict() for e in self.entries]}

    def rows(self):
        """Flat ``(S, method, split, r, ci_low, ci_high, regime)`` rows."""
        out = []
        for e in self.entries:
            methods = []
            if e.oodselect is not None:
                methods.append(("oodselect", e.oodselect.reports))
            for name in sorted(e.baselines):
                methods.append((name, e.baselines[name]["reports"]))
            for name, reports in methods:
                for sp in SPLITS:
                    rep = reports.get(sp)
                    if rep is None:
                        continue
                    out.append((e.S, name, sp, rep.r, rep.ci_low, rep.ci_high, rep.regime))
        return out

    def to_csv(self):
        def fmt(v):
            return "" if v is None else repr(float(v))

        lines = ["S,method,split,r,ci_low,ci_high,regime"]
        for S, method, sp, r, lo, hi, reg in self.rows():
            lines.append(f"{S},{method},{sp},{fmt(r)},{fmt(lo)},{fmt(hi)},{reg}")
        return "\n".join(lines) + "\n"


def _restart_job(z, x_id, config, k, example_ids):
    return run_restart(z, x_id, config, k, example_ids)


def sweep(matrix: CorrectnessMatrix, models: ModelTable, sizes, config: OptimizerConfig,
          kind="pearson", n_jobs=1, ood_embeddings=None, id_embeddings=None,
          distance_metric="centroid_euclidean") -> SweepReport:
    """Run the optimiser and every baseline at each subset size.

    All ``(S, restart)`` pairs are independent jobs; failures are recorded on
    the affected entry instead of aborting the sweep.
    """
    from . import baselines

    sizes = [int(s) for s in sizes]
    if not sizes:
        raise OODSelectError("sizes must be non-empty")
    if any(a >= b for a, b in zip(sizes[:-1], sizes[1:])):
        raise OODSelectError(f"sizes must be strictly increasing, got {sizes}")
    if sizes[-1] > matrix.n_examples:
        raise OODSelectError(f"size {sizes[-1]} exceeds {matrix.n_examples} examples")
    models, z, x_id = _train_problem(matrix, models, replace(config, target_size=sizes[0]))
    configs = {S: replace(config, target_size=S) for S in sizes}
    jobs = [(S, k) for S in sizes for k in range(config.restarts)]
    outcomes = Parallel(n_jobs=n_jobs)(
        delayed(_restart_job)(z, x_id, configs[S], k, matrix.example_ids) for S, k in jobs
    )
    by_size = {S: [] for S in sizes}
    for (S, _), o in zip(jobs, outcomes):
        by_size[S].append(o)

    entries = []
    for S in sizes:
        entry = SweepEntry(S)
        try:
            entry.oodselect = _result_from(by_size[S], matrix, models, configs[S], kind)
        except OODSelectError as err:
            entry.error = f"{type(err).__name__}: {err}"
        picks = {
            "random": baselines.random_subset(matrix.example_ids, S, _random.substream(config.seed, "sweep", "random", S)),
            "most_misclassified": baselines.most_misclassified(matrix, models, S, "train"),
        }
        if ood_embeddings is not None and id_embeddings is not None:
            picks["distance"] = baselines.farthest_from_id(ood_embeddings, id_embeddings, S, distance_metric)
        for name, subset in picks.items():
            entry.baselines[name] = {
                "subset": frozenset(subset),
                "reports": split_reports(subset, matrix, models, kind, config.clip_eps),
            }
        entries.append(entry)
    return SweepReport(entries)


def recommend_size(report: SweepReport, threshold=-0.3, split="val"):
    """Largest ``S`` whose OODSelect correlation on ``split`` is ``<= threshold``."""
    if not report.entries:
        raise OODSelectError("empty sweep")
    best = None
    for e in report.entries:
        if e.oodselect is None:
            continue
        rep = e.oodselect.reports.get(split)
        if rep is not None and rep.r <= threshold:
            best = e.S if best is None else max(best, e.S)
    return best
