"""Command-line front end.

Every command reads a flat ``key = value`` config file (optional), applies
flag overrides on top, and writes JSON (plus CSV for ``sweep``) into
``--out``. JSON outputs echo the resolved config; the only field that
changes between identical runs is ``created``.

Exit codes: 0 success, 2 invalid input, 3 optimisation failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import synth
from .data import (
    DEFAULT_CLIP_EPS,
    load_correctness,
    load_embeddings,
    load_example_meta,
    load_models,
    split_models,
    subset_accuracy,
    write_correctness,
    write_models,
)
from .exceptions import OODSelectError, OptimizationFailed
from .selector import (
    OptimizerConfig,
    SelectionResult,
    recommend_size,
    select_subset,
    sweep,
)
from .stats import (
    bootstrap_prevalence_shift,
    model_count_stability,
    normalized_jaccard_sequence,
)

EXIT_OK, EXIT_INVALID, EXIT_OPTIM = 0, 2, 3

DEFAULTS = {
    "correctness": None,
    "models": None,
    "examples": None,
    "embeddings": None,
    "id_embeddings": None,
    "split_mode": "random",
    "split_ratios": "0.6,0.2,0.2",
    "seed": 0,
    "size": 100,
    "sizes": "100,500,1000",
    "steps": 2000,
    "lr0": 0.05,
    "lambda0": 0.0,
    "lambda_max": 1.0,
    "restarts": 8,
    "init_scale": 0.01,
    "clip_eps": DEFAULT_CLIP_EPS,
    "weight_floor": 1e-6,
    "metric": "pearson",
    "distance_metric": "centroid_euclidean",
    "threshold": -0.3,
    "jobs": 1,
    "out": ".",
    # prevalence / stability
    "selection": None,
    "attribute": "label",
    "resamples": 1000,
    "rel_threshold": 0.01,
    "orderings": 32,
    "window": 25,
    # synth
    "n_models": 300,
    "n_aligned": 1400,
    "n_inverted": 500,
    "n_noise": 100,
    "slope": 10.0,
    "n_families": 0,
    # theory
    "decay_sizes": "16,32,64,128,256,512",
    "trials": 200,
    "witness_trials": 100000,
}

_INT = {"seed", "size", "steps", "restarts", "jobs", "resamples", "orderings", "window",
        "n_models", "n_aligned", "n_inverted", "n_noise", "n_families", "trials", "witness_trials"}
_FLOAT = {"lr0", "lambda0", "lambda_max", "init_scale", "clip_eps", "weight_floor",
          "threshold", "rel_threshold", "slope"}
_PATHS = ("correctness", "models", "examples", "embeddings", "id_embeddings", "selection")


class ConfigError(OODSelectError):
    pass


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def _coerce(key, value):
    if value is None:
        return None
    try:
        if key in _INT:
            return int(value)
        if key in _FLOAT:
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None
    return str(value)


def _int_list(key, text):
    try:
        vals = [int(v) for v in str(text).replace(" ", "").split(",") if v]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise ConfigError(f"{key} is empty")
    return vals


def _float_list(key, text):
    try:
        return [float(v) for v in str(text).split(",")]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated numbers, got {text!r}") from None


def resolve_config(args):
    """Merge defaults < config file < flags into a plain dict."""
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(read_config_file(args.config))
    for key in DEFAULTS:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    cfg = {k: _coerce(k, v) for k, v in cfg.items()}
    if cfg["metric"] not in ("pearson", "spearman"):
        raise ConfigError(f"metric must be pearson or spearman, got {cfg['metric']!r}")
    if cfg["split_mode"] not in ("random", "family_disjoint"):
        raise ConfigError(f"unknown split mode {cfg['split_mode']!r}")
    if cfg["jobs"] < 1:
        raise ConfigError("jobs must be >= 1")
    return cfg


def _require_paths(cfg, *keys):
    for key in keys:
        if cfg[key] is None:
            raise ConfigError(f"missing required path: {key}")
    for key in _PATHS:
        if cfg[key] is not None and not Path(cfg[key]).is_file():
            raise ConfigError(f"{key} file does not exist: {cfg[key]}")


def _optimizer_config(cfg, size):
    return OptimizerConfig(
        target_size=size,
        steps=cfg["steps"],
        lr0=cfg["lr0"],
        lambda0=cfg["lambda0"],
        lambda_max=cfg["lambda_max"],
        restarts=cfg["restarts"],
        seed=cfg["seed"],
        clip_eps=cfg["clip_eps"],
        init_scale=cfg["init_scale"],
        weight_floor=cfg["weight_floor"],
    )


def _load_inputs(cfg):
    _require_paths(cfg, "correctness", "models")
    matrix = load_correctness(cfg["correctness"])
    models = load_models(cfg["models"], cfg["clip_eps"]).reindex(matrix.model_ids)
    if not models.is_split():
        ratios = _float_list("split_ratios", cfg["split_ratios"])
        models = split_models(models, cfg["split_mode"], ratios, cfg["seed"])
    return matrix, models


def _envelope(command, cfg, payload):
    doc = {"command": command, "created": datetime.now(timezone.utc).isoformat(), "config": cfg}
    doc.update(payload)
    return doc


def _write_json(path, doc):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _out_dir(cfg):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt_r(rep):
    return "nan" if rep is None else f"{rep.r:.4f}"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_fit(cfg):
    matrix, models = _load_inputs(cfg)
    config = _optimizer_config(cfg, cfg["size"])
    result = select_subset(matrix, models, config, kind=cfg["metric"], n_jobs=cfg["jobs"])
    doc = _envelope("fit", cfg, {"selection": result.to_dict()})
    _write_json(_out_dir(cfg) / f"selection_S{config.target_size}.json", doc)
    test = result.report_test
    print(
        f"S={config.target_size} train_r={_fmt_r(result.report_train)} "
        f"val_r={_fmt_r(result.report_val)} test_r={_fmt_r(test)} "
        f"regime={test.regime if test else 'n/a'}"
    )
    return EXIT_OK


def cmd_sweep(cfg):
    matrix, models = _load_inputs(cfg)
    sizes = _int_list("sizes", cfg["sizes"])
    ood_emb = id_emb = None
    if cfg["embeddings"] and cfg["id_embeddings"]:
        ood_emb = load_embeddings(cfg["embeddings"])
        id_emb = load_embeddings(cfg["id_embeddings"])
    config = _optimizer_config(cfg, sizes[0])
    report = sweep(
        matrix, models, sizes, config, kind=cfg["metric"], n_jobs=cfg["jobs"],
        ood_embeddings=ood_emb, id_embeddings=id_emb, distance_metric=cfg["distance_metric"],
    )
    if all(e.oodselect is None for e in report.entries):
        raise OptimizationFailed("every sweep entry failed: " + "; ".join(e.error or "" for e in report.entries))
    recommended = recommend_size(report, cfg["threshold"])
    out = _out_dir(cfg)
    (out / "sweep.csv").write_text(report.to_csv(), encoding="utf-8")
    doc = _envelope("sweep", cfg, {"sweep": report.to_dict(), "recommended_size": recommended})
    _write_json(out / "sweep.json", doc)
    for e in report.entries:
        if e.oodselect is None:
            print(f"S={e.S} failed: {e.error}")
        else:
            r = e.oodselect.reports
            print(f"S={e.S} train_r={_fmt_r(r['train'])} val_r={_fmt_r(r['val'])} test_r={_fmt_r(r['test'])}")
    print(f"recommended_size={recommended}")
    return EXIT_OK


def _load_selection(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"selection file does not exist: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    return SelectionResult.from_dict(doc.get("selection", doc))


def cmd_consistency(cfg, selections):
    if len(selections) < 2:
        raise ConfigError("consistency needs at least two selection files")
    results = [_load_selection(p) for p in selections]
    sizes = [r.size for r in results]
    if any(a >= b for a, b in zip(sizes[:-1], sizes[1:])):
        raise ConfigError(f"selection sizes must be strictly increasing, got {sizes}")
    universe = {r.n_examples for r in results}
    if len(universe) != 1:
        raise ConfigError("selections come from matrices of different widths")
    res = normalized_jaccard_sequence(
        [r.subset for r in results], universe.pop(), seed=cfg["seed"], details=True
    )
    doc = _envelope("consistency", cfg, {
        "selections": [str(p) for p in selections],
        "sizes": sizes,
        "normalized_jaccard": res.normalized,
        "mean_jaccard": res.mean,
        "random_lower_bound": res.lower,
        "nested_upper_bound": res.upper,
    })
    _write_json(_out_dir(cfg) / "consistency.json", doc)
    print(f"normalized_jaccard={res.normalized:.4f} random_lower_bound={res.lower:.4f}")
    return EXIT_OK


def _ood_accuracy(cfg, matrix):
    if cfg["selection"] is None:
        return matrix.z.mean(axis=1), None
    sel = _load_selection(cfg["selection"])
    cols = matrix.example_index(sorted(sel.subset))
    return subset_accuracy(matrix.z, cols), sel


def cmd_stability(cfg):
    matrix, models = _load_inputs(cfg)
    ood_acc, sel = _ood_accuracy(cfg, matrix)
    res = model_count_stability(
        models.id_accuracy, ood_acc, rel_threshold=cfg["rel_threshold"],
        n_orderings=cfg["orderings"], window=cfg["window"], seed=cfg["seed"], eps=cfg["clip_eps"],
    )
    doc = _envelope("stability", cfg, {
        "subset_size": None if sel is None else sel.size,
        "n_models": len(models),
        "stable_n": res.n,
        "converged": res.converged,
        "per_ordering": list(res.per_ordering),
    })
    _write_json(_out_dir(cfg) / "stability.json", doc)
    print(f"stable_n={res.n} converged={res.converged}")
    return EXIT_OK


def cmd_prevalence(cfg):
    _require_paths(cfg, "examples", "selection")
    meta = load_example_meta(cfg["examples"])
    sel = _load_selection(cfg["selection"])
    attr = cfg["attribute"]

    def value(m):
        if attr == "label":
            return m.label
        if attr not in m.attributes:
            raise ConfigError(f"attribute {attr!r} not in {cfg['examples']}")
        return m.attributes[attr]

    by_id = {m.example_id: value(m) for m in meta}
    missing = sorted(sel.subset - by_id.keys())
    if missing:
        raise ConfigError(f"{len(missing)} selected examples lack metadata, e.g. {missing[0]!r}")
    full = [by_id[k] for k in sorted(by_id)]
    sub = [by_id[k] for k in sorted(sel.subset)]
    res = bootstrap_prevalence_shift(sub, full, n_resamples=cfg["resamples"], seed=cfg["seed"], n_jobs=cfg["jobs"])
    doc = _envelope("prevalence", cfg, {
        "attribute": attr,
        "categories": {k: {**v, "ci": list(v["ci"])} for k, v in res.items()},
    })
    _write_json(_out_dir(cfg) / "prevalence.json", doc)
    for k, v in res.items():
        print(f"{attr}={k} delta={v['delta']:+.4f} p={v['p']:.4f}")
    return EXIT_OK


def cmd_synth(cfg):
    spec = synth.PlantedSpec(
        n_models=cfg["n_models"], n_aligned=cfg["n_aligned"], n_inverted=cfg["n_inverted"],
        n_noise=cfg["n_noise"], slope=cfg["slope"], seed=cfg["seed"], n_families=cfg["n_families"],
    )
    matrix, models, truth = synth.generate_planted(spec)
    out = _out_dir(cfg)
    write_correctness(matrix, out / "correctness.csv")
    write_models(models, out / "models.csv")
    doc = _envelope("synth", cfg, {"spec": spec.to_dict(), "truth": truth.to_dict()})
    _write_json(out / "truth.json", doc)
    print(f"wrote {matrix.n_models} models x {matrix.n_examples} examples to {out}")
    return EXIT_OK


def cmd_theory(cfg):
    sizes = _int_list("decay_sizes", cfg["decay_sizes"])
    probes = {
        kind: synth.lemma_decay_probe(kind, sizes, trials=cfg["trials"], seed=cfg["seed"])
        for kind in ("new_model", "new_example")
    }
    witness = synth.nonsubmodularity_witness(trials=cfg["witness_trials"], seed=cfg["seed"])
    doc = _envelope("theory", cfg, {
        "decay": {k: p.to_dict() for k, p in probes.items()},
        "witness": None if witness is None else witness.to_dict(),
    })
    _write_json(_out_dir(cfg) / "theory.json", doc)
    for k, p in probes.items():
        print(f"{k}_slope={p.slope:.3f}")
    print("witness=" + ("found" if witness is not None else "none"))
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "sweep": cmd_sweep,
    "consistency": cmd_consistency,
    "stability": cmd_stability,
    "prevalence": cmd_prevalence,
    "synth": cmd_synth,
    "theory": cmd_theory,
}


def build_parser():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="flat key = value file; flags override it")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--metric", choices=("pearson", "spearman"))
    shared.add_argument("--threshold", type=float, help="AoTIL threshold for size recommendation")
    shared.add_argument("--sizes", help="comma-separated subset sizes")
    shared.add_argument("--split-mode", dest="split_mode", choices=("random", "family_disjoint"))
    shared.add_argument("--jobs", type=int)

    parser = argparse.ArgumentParser(prog="oodselect", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[shared])
        if name in ("fit", "sweep", "stability"):
            p.add_argument("--correctness")
            p.add_argument("--models")
        if name == "fit":
            p.add_argument("--size", type=int, help="subset size S")
        if name in ("fit", "sweep"):
            p.add_argument("--steps", type=int)
            p.add_argument("--restarts", type=int)
        if name == "sweep":
            p.add_argument("--embeddings", help="OOD embedding CSV")
            p.add_argument("--id-embeddings", dest="id_embeddings")
        if name in ("stability", "prevalence"):
            p.add_argument("--selection", help="selection JSON written by fit")
        if name == "prevalence":
            p.add_argument("--examples")
            p.add_argument("--attribute")
            p.add_argument("--resamples", type=int)
        if name == "synth":
            p.add_argument("--n-families", dest="n_families", type=int)
        if name == "theory":
            p.add_argument("--trials", type=int)
        if name == "consistency":
            p.add_argument("selections", nargs="+", help="selection JSONs in increasing S")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "consistency":
            return cmd_consistency(cfg, args.selections)
        return COMMANDS[args.command](cfg)
    except OptimizationFailed as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_OPTIM
    except (OODSelectError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
