"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are repeated
in the terminal summary under "acceptance criteria".
"""
import json
import math
import time

import numpy as np
import pytest
from scipy.special import expit

from oodselect import split_models
from oodselect.baselines import most_misclassified, random_subset
from oodselect.cli import main
from oodselect.data import probit, selected_ood_accuracy
from oodselect.selector import OptimizerConfig, evaluate_subset, gradient, objective, select_subset
from oodselect.stats import fisher_interval, jaccard, normalized_jaccard_sequence
from oodselect.synth import (
    PlantedSpec,
    brute_force_best_subset,
    generate_planted,
    lemma_decay_probe,
    marginal_gains,
    nonsubmodularity_witness,
)

from conftest import PLANTED_SEED, inv_norm_bisect

pytestmark = pytest.mark.slow

RANDOM_SIZES = (100, 500, 1000)


def test_planted_recovery(planted, verdict):
    matrix, models, truth = planted
    full = evaluate_subset(set(matrix.example_ids), matrix, models, split=None).r
    t0 = time.perf_counter()
    res = select_subset(matrix, models, OptimizerConfig(500, steps=2000, restarts=8, seed=PLANTED_SEED))
    elapsed = time.perf_counter() - t0
    overlap = jaccard(res.subset, truth.inverted_ids)
    test_r = res.report_test.r
    ok = full >= 0.7 and test_r <= -0.5 and overlap >= 0.7 and elapsed <= 300
    verdict("1 planted recovery", ok,
            f"full_r={full:.3f} test_r={test_r:.3f} jaccard={overlap:.3f} time={elapsed:.1f}s")
    assert ok


def test_oracle_optimality(verdict):
    gaps = []
    for i in range(20):
        m, models, _ = generate_planted(PlantedSpec(n_models=30, n_aligned=8, n_inverted=4, n_noise=3, seed=100 + i))
        models = split_models(models, seed=i)
        tr = models.split_mask("train")
        _, best = brute_force_best_subset(m.z[tr], models.id_accuracy[tr], 5)
        res = select_subset(m, models, OptimizerConfig(5, restarts=10, seed=i))
        gaps.append(res.objective_train - best)
    gaps = np.array(gaps)
    assert np.all(gaps >= -1e-9)  # brute force is a lower bound
    within = int(np.sum(gaps <= 0.05))
    ok = within >= 18
    verdict("2 oracle optimality", ok, f"{within}/20 within 0.05, worst gap {gaps.max():.3f}")
    assert ok


def test_gradient_correctness(verdict):
    rng = np.random.default_rng(2024)
    h, d, eps = 1e-5, 50, 1e-3
    worst, points = 0.0, 0
    while points < 100:
        n = int(rng.integers(10, 40))
        z = rng.integers(0, 2, size=(n, d))
        x = probit(rng.uniform(0.3, 0.95, size=n))
        theta = rng.normal(0, 1.5, size=d)
        S, lam = float(rng.uniform(5, 45)), float(rng.uniform(0, 2))
        m = selected_ood_accuracy(z, expit(theta))
        # central differences move m by far less than this margin
        if np.min(np.minimum(np.abs(m - eps), np.abs(m - 1 + eps))) < 1e-3 or np.ptp(m) < 1e-3:
            continue
        g = gradient(z, x, theta, S, lam)
        fd = np.empty(d)
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            fd[j] = (objective(z, x, theta + e, S, lam) - objective(z, x, theta - e, S, lam)) / (2 * h)
        worst = max(worst, np.max(np.abs(g - fd)) / np.max(np.abs(fd)))
        points += 1
    ok = worst < 1e-5
    verdict("3 gradient correctness", ok, f"max relative error {worst:.2e} over {points} points")
    assert ok


def test_random_subsets_track_full_set(planted, verdict):
    matrix, models, _ = planted
    full = evaluate_subset(set(matrix.example_ids), matrix, models, "test")
    counts = {}
    for S in RANDOM_SIZES:
        inside = 0
        for t in range(100):
            r = evaluate_subset(random_subset(matrix.example_ids, S, seed=1000 * S + t), matrix, models, "test").r
            inside += full.ci_low <= r <= full.ci_high
        counts[S] = inside
    ok = all(c >= 90 for c in counts.values())
    detail = " ".join(f"S={S}:{c}/100" for S, c in counts.items())
    verdict("4a random subsets in full-set CI", ok,
            f"{detail} CI=[{full.ci_low:.3f}, {full.ci_high:.3f}]")
    assert ok


def test_most_misclassified_on_noise(verdict):
    m, models, _ = generate_planted(PlantedSpec(n_aligned=100, n_inverted=100, n_noise=1800, seed=11))
    models = split_models(models, "random", (0.6, 0.2, 0.2), seed=11)
    r = evaluate_subset(most_misclassified(m, models, 200), m, models, "test").r
    ok = abs(r) < 0.3
    verdict("4b most misclassified on noise", ok, f"test_r={r:.3f}")
    assert ok


def test_fisher_interval(verdict):
    lo, hi = fisher_interval(0.0, 103, 0.95)
    half = math.tanh(inv_norm_bisect(0.975) / math.sqrt(100))
    widths = [float(np.subtract(*fisher_interval(0.4, n, 0.95)[::-1])) for n in (28, 53, 103, 403)]
    ok = (abs(lo + half) <= 1e-3 and abs(hi - half) <= 1e-3
          and abs(lo + 0.1935) <= 1e-3 and abs(hi - 0.1935) <= 1e-3
          and all(a > b for a, b in zip(widths, widths[1:])))
    verdict("5 fisher interval", ok,
            f"({lo:.4f}, {hi:.4f}) oracle +-{half:.4f} widths {[round(w, 4) for w in widths]}")
    assert ok


def test_jaccard_normalization(verdict):
    universe, sizes = 2000, (100, 200, 400, 800)
    perm = np.random.default_rng(5).permutation(universe)
    nested = normalized_jaccard_sequence([set(perm[:s].tolist()) for s in sizes], universe, seed=0)
    rng = np.random.default_rng(6)
    indep = [set(rng.choice(universe, s, replace=False).tolist()) for s in sizes]
    rand = normalized_jaccard_sequence(indep, universe, random_trials=200, seed=0)
    ok = nested == 1.0 and abs(rand) < 0.1
    verdict("6 jaccard normalization", ok, f"nested={nested!r} random={rand:.4f}")
    assert ok


def test_lemma_decay(verdict):
    t0 = time.perf_counter()
    probes = {k: lemma_decay_probe(k, sizes=(16, 32, 64, 128, 256, 512), trials=200, seed=0)
              for k in ("new_model", "new_example")}
    elapsed = time.perf_counter() - t0
    ok = all(-1.3 <= p.slope <= -0.7 for p in probes.values()) and elapsed <= 120
    detail = " ".join(f"{k}={p.slope:.3f}" for k, p in probes.items())
    verdict("7 decay slopes", ok, f"{detail} time={elapsed:.1f}s")
    assert ok


def test_nonsubmodularity(verdict):
    w = nonsubmodularity_witness(n_models=8, d=6, trials=100_000, seed=0)
    ok = w is not None and w.z.shape[0] <= 12 and w.z.shape[1] <= 8
    if ok:
        g_small, g_large = marginal_gains(w.z, w.id_acc, w.small, w.large, w.k)
        ok = g_small < g_large and w.small <= w.large and w.k not in w.large
    detail = "none found" if w is None else (
        f"|s_i|={len(w.small)} |s_j|={len(w.large)} gains {w.gain_small:.4f} < {w.gain_large:.4f}")
    verdict("8 non-submodularity witness", ok, detail)
    assert ok


def test_sweep_determinism(tmp_path, verdict):
    fx = tmp_path / "fx"
    assert main(["synth", "--out", str(fx), "--seed", str(PLANTED_SEED)]) == 0
    docs, csvs = [], []
    for jobs in (1, 8):
        out = tmp_path / f"jobs{jobs}"
        assert main(["sweep", "--correctness", str(fx / "correctness.csv"), "--models", str(fx / "models.csv"),
                     "--seed", str(PLANTED_SEED), "--jobs", str(jobs), "--out", str(out)]) == 0
        csvs.append((out / "sweep.csv").read_bytes())
        doc = json.loads((out / "sweep.json").read_text())
        for key in ("created",):
            doc.pop(key)
        for key in ("jobs", "out"):
            doc["config"].pop(key)
        docs.append(doc)
    ok = csvs[0] == csvs[1] and docs[0] == docs[1]
    verdict("9 sweep determinism", ok, f"csv {len(csvs[0])} bytes, equal={csvs[0] == csvs[1]}")
    assert ok


def test_family_disjoint_hygiene(verdict):
    spec = PlantedSpec(n_models=180, n_aligned=400, n_inverted=150, n_noise=50, n_families=6, seed=21)
    m, models, truth = generate_planted(spec)
    models = split_models(models, "family_disjoint", seed=21)
    fam = np.array(models.family)
    split = np.array(models.split)
    spread = {f: set(split[fam == f]) for f in set(fam)}
    res = select_subset(m, models, OptimizerConfig(150, restarts=4, seed=21))
    ok = all(len(s) == 1 for s in spread.values()) and set(res.reports) == {"train", "val", "test"}
    reps = " ".join(f"{k}_r={v.r:.3f}" for k, v in sorted(res.reports.items()))
    verdict("10 family-disjoint split hygiene", ok, f"{len(spread)} families, one split each; {reps}")
    assert ok
