"""Command-line entry point.

Every subcommand writes ``<stem>.manifest.json`` next to its main output with
the resolved configuration, SHA-256 digests of the inputs and library
versions. Exit codes: 0 success, 1 usage error, 2 data or model error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__
from .data import (
    Dataset,
    aggregate_venues,
    filter_low_activity_users,
    read_checkins,
    split_train_test,
    write_checkins,
)
from .errors import GeotopicsError
from .evaluation import compare_fixed_regions, compute_metrics, feature_contributions, load_regions
from .model import load_model, save_model
from .query import conditional_feature_distribution, default_grid, render_heatmap
from .sampling import Geometric, sample_checkins
from .similarity import SimilarityContext, geo_explore, grid_base_regions, model_base_regions
from .trainer import DEFAULT_KS, DEFAULT_LAMBDAS, EtaSolverConfig, TrainingConfig, grid_search, run_em
from .users import reduce_users

log = logging.getLogger("geotopics")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
_SUFFIXES = (".geotopics.json", ".manifest.json", ".jsonl", ".json", ".csv")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _stem(path: Path) -> Path:
    name = path.name
    for suf in _SUFFIXES:
        if name.endswith(suf) and len(name) > len(suf):
            return path.with_name(name[: -len(suf)])
    return path.with_suffix("")


def _sidecar(out: Path, kind: str) -> Path:
    stem = _stem(out)
    return stem.with_name(f"{stem.name}.{kind}.json")


def _dump_json(obj: Any, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(args, inputs: Sequence[str], outputs: Sequence[Path]) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    manifest = {
        "command": args.command,
        "config": config,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "versions": {"geotopics": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
    }
    _dump_json(manifest, _sidecar(Path(args.out), "manifest"))


def _load_data(path: str, user_groups: int) -> Dataset:
    """Raw check-ins (.jsonl) are filtered, aggregated and user-reduced; dataset files load as is."""
    if path.endswith(".jsonl"):
        records, malformed = read_checkins(path)
        if malformed:
            log.warning("%s: skipped %d malformed lines", path, malformed)
        ds = aggregate_venues(filter_low_activity_users(records))
        return reduce_users(ds, user_groups) if user_groups > 0 else ds
    return Dataset.load(path)


def _training_config(args) -> TrainingConfig:
    return TrainingConfig(
        k=args.k[0],
        lam=args.lam[0],
        max_em_iters=args.max_iters,
        em_rel_tol=args.tol,
        eta_solver=EtaSolverConfig(),
        seed=args.seed,
        init_scheme=args.init,
    )


def _pair(text: str, kind=float) -> tuple:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated values, got {text!r}")
    try:
        return tuple(kind(p) for p in parts)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _int_pair(text: str) -> tuple:
    return _pair(text, int)


# ---------------------------------------------------------------- commands


def cmd_ingest(args) -> None:
    ds = _load_data(args.input, args.user_groups)
    out = Path(args.out)
    ds.save(out)
    log.info("ingested %d venues", ds.M)
    _write_manifest(args, [args.input], [out])


def cmd_generate(args) -> None:
    model = load_model(args.model)
    records = sample_checkins(model, args.venues, Geometric(args.checkins_mean), seed=args.seed)
    out = Path(args.out)
    write_checkins(records, out)
    _write_manifest(args, [args.model], [out])


def cmd_train(args) -> None:
    ds = _load_data(args.data, args.user_groups)
    cfg = _training_config(args)
    out = Path(args.out)
    outputs = [out]
    if args.grid:
        model, report = grid_search(ds, args.k, args.lam, cfg)
        grid_path = _sidecar(out, "grid")
        _dump_json(report.to_json(), grid_path)
        outputs.append(grid_path)
        # the trace of the selected fit is regenerated on the same split
        train, _ = split_train_test(ds, cfg.train_fraction, cfg.seed)
        sel = replace(cfg, k=report.selected["k"], lam=report.selected["lambda"])
        _, trace = run_em(train, sel)
    else:
        if len(args.k) > 1 or len(args.lam) > 1:
            raise UsageError("several --k/--lambda values need --grid")
        model, trace = run_em(ds, cfg)
    save_model(model, out)
    trace_path = _sidecar(out, "trace")
    _dump_json([vars(r) for r in trace], trace_path)
    outputs.append(trace_path)
    _write_manifest(args, [args.data], outputs)


def cmd_query(args) -> None:
    model = load_model(args.model)
    if args.feature not in model.features:
        raise GeotopicsError(f"model has no feature {args.feature!r}")
    if args.at is not None:
        gamma = conditional_feature_distribution(model, args.feature, args.at)
        labels = model.domains.labels[args.feature]
        doc = {"location": list(args.at), "feature": args.feature, "gamma": dict(zip(labels, map(float, gamma)))}
        text = json.dumps(doc, indent=1, sort_keys=True)
        if args.out:
            Path(args.out).write_text(text + "\n", encoding="utf-8")
            _write_manifest(args, [args.model], [Path(args.out)])
        else:
            print(text)
        return
    if not args.out:
        raise UsageError("query needs --out for a heatmap (or --at for a point query)")
    grid = default_grid(model).with_resolution(*args.grid)
    layer = render_heatmap(model, args.feature, grid, args.mode)
    layer.to_csv(args.out)
    _write_manifest(args, [args.model], [Path(args.out)])


def _bases(choice: str, model):
    if choice == "model":
        return model_base_regions(model)
    if choice.startswith("grid:"):
        try:
            a = float(choice[5:])
        except ValueError:
            raise UsageError(f"bad --bases {choice!r}") from None
        return grid_base_regions(model, a)
    raise UsageError(f"--bases must be 'model' or 'grid:<a>', got {choice!r}")


def cmd_similar(args) -> None:
    ma, mb = load_model(args.model_a), load_model(args.model_b)
    for m in (ma, mb):
        if args.feature not in m.features:
            raise GeotopicsError(f"model has no feature {args.feature!r}")
    ga = default_grid(ma).with_resolution(*args.grid)
    gb = default_grid(mb).with_resolution(*args.grid)
    ctx = SimilarityContext(ma, mb, args.feature, ga, gb)
    match = geo_explore(ctx, _bases(args.bases, ma), _bases(args.bases, mb), R=args.R, measure=args.measure)
    doc = match.to_json()
    doc["feature"] = args.feature
    doc["bases"] = args.bases
    out = Path(args.out)
    _dump_json(doc, out)
    _write_manifest(args, [args.model_a, args.model_b], [out])


def cmd_ablate(args) -> None:
    ds = _load_data(args.data, args.user_groups)
    cfg = _training_config(args)
    report = feature_contributions(ds, cfg, seeds=args.seeds or None, workers=args.workers)
    out = Path(args.out)
    _dump_json(report.to_json(), out)
    _write_manifest(args, [args.data], [out])


def cmd_metrics(args) -> None:
    model = load_model(args.model)
    ds = _load_data(args.data, args.user_groups)
    report = compute_metrics(model, ds)
    out = Path(args.out)
    _dump_json(report.to_json(), out)
    _write_manifest(args, [args.model, args.data], [out])


def cmd_compare(args) -> None:
    ds = _load_data(args.data, args.user_groups)
    names, regions = load_regions(args.regions)
    cfg = _training_config(args)
    _, report = compare_fixed_regions(ds, regions, cfg)
    doc = report.to_json()
    doc["regions"] = names
    out = Path(args.out)
    _dump_json(doc, out)
    _write_manifest(args, [args.data, args.regions], [out])


# ------------------------------------------------------------------ parser


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("global")
    g.add_argument("--config", help="JSON file of option values; flags given on the command line win")
    g.add_argument("--seed", type=int, default=0, help="root random seed")
    g.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP threads (default: all)")
    g.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _training_flags(p: argparse.ArgumentParser, grid: bool) -> None:
    p.add_argument("--k", type=int, nargs="+", default=list(DEFAULT_KS) if grid else [10])
    p.add_argument("--lambda", dest="lam", type=float, nargs="+", default=list(DEFAULT_LAMBDAS) if grid else [1.0])
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-6, help="relative objective change that stops EM")
    p.add_argument("--init", choices=["kmeans++", "random"], default="kmeans++")
    p.add_argument("--user-groups", type=int, default=100, help="super-users for raw check-ins (0 disables)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="geotopics", description="Sparse geospatial topic models over venue check-ins.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("ingest", help="check-ins (.jsonl) -> dataset file")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--user-groups", type=int, default=100, help="number of super-users (0 disables)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("generate", help="sample synthetic check-ins from a model")
    p.add_argument("--model", required=True)
    p.add_argument("--venues", type=int, required=True)
    p.add_argument("--checkins-mean", type=float, default=10.0, help="mean check-ins per venue (geometric)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fit a model by EM, optionally over a (k, lambda) grid")
    p.add_argument("--data", required=True, help="check-ins (.jsonl) or dataset file")
    _training_flags(p, grid=False)
    p.add_argument("--grid", action="store_true", help="select (k, lambda) on an 80/20 split")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("query", help="location-conditional feature queries")
    p.add_argument("--model", required=True)
    p.add_argument("--feature", default="category")
    p.add_argument("--mode", choices=["likely", "distinctive"], default="likely")
    p.add_argument("--grid", type=_int_pair, default=(100, 100), metavar="NX,NY")
    p.add_argument("--at", type=_pair, default=None, metavar="LON,LAT")
    p.add_argument("--out")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("similar", help="best matching region pair across two cities")
    p.add_argument("--model-a", required=True)
    p.add_argument("--model-b", required=True)
    p.add_argument("--feature", default="category")
    p.add_argument("--bases", default="model", help="'model' or 'grid:<a>'")
    p.add_argument("--measure", choices=["jointsim", "condsim"], default="jointsim")
    p.add_argument("--R", type=int, default=5)
    p.add_argument("--grid", type=_int_pair, default=(100, 100), metavar="NX,NY")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_similar)

    p = sub.add_parser("ablate", help="log-likelihood drop per feature")
    p.add_argument("--data", required=True)
    _training_flags(p, grid=False)
    p.add_argument("--seeds", type=int, nargs="*", default=None, help="several seeds for the spread summary")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("metrics", help="entropy, JSD from city and per-venue likelihood")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--user-groups", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("compare", help="train with topic Gaussians fixed to external regions")
    p.add_argument("--data", required=True)
    p.add_argument("--regions", required=True, help="JSON list of {name, polygon}")
    _training_flags(p, grid=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    for sp_ in sub.choices.values():
        _common(sp_)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise GeotopicsError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    values = {}
    for key, val in doc.items():
        dest = "lam" if key == "lambda" else key.replace("-", "_")
        if dest not in known or dest in ("config", "help"):
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        values[dest] = val
    sub.set_defaults(**values)
    # a second parse lets explicit flags override the config values
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except GeotopicsError as exc:
        print(f"geotopics: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except UsageError as exc:
        print(f"geotopics {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GeotopicsError, OSError, ValueError) as exc:
        print(f"geotopics {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
