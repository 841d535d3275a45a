"""Command-line entry point: ``apttriage <command> ...``.

Exit status: 0 success, 1 usage error, 2 data error, 3 internal error.
Failures also print one JSON line on standard error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import TriageError
from .evaluation import (
    DEFAULT_GRID, DEFAULT_K, default_builder, evaluate_identification, evaluate_triage,
    evaluation_report, grid_tune, tune_and_train, derive_seed,
)
from .features.schema import default_schema, load_schema
from .iforest import DEFAULT_CONTAMINATION, DEFAULT_ESTIMATORS, DEFAULT_SUBSAMPLE
from .store import (
    Manifest, cache_features, iter_sample_paths, load_manifest, load_registry_with_metadata,
    save_registry,
)
from .triage import ForestParams, batch_triage, retrain_class, train_all

log = logging.getLogger("apttriage")

DEFAULT_SEED = 1337
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parse_grid(text: str) -> tuple[tuple[float, int], ...]:
    """``"0,0.05:50,100"`` -> every (contamination, n_estimators) pair."""
    try:
        left, right = text.split(":")
        cs = [float(c) for c in left.split(",") if c.strip()]
        ts = [int(t) for t in right.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"bad --grid {text!r}; expected e.g. 0,0.05:50,100") from None
    if not cs or not ts:
        raise UsageError(f"bad --grid {text!r}: empty axis")
    return tuple((c, t) for c in cs for t in ts)


def _grid_text(grid) -> str:
    cs = sorted({c for c, _ in grid})
    ts = sorted({t for _, t in grid})
    return ",".join(f"{c:g}" for c in cs) + ":" + ",".join(str(t) for t in ts)


# -- shared helpers ---------------------------------------------------------

def _schema(args):
    return load_schema(args.schema) if args.schema else default_schema()


def _vectors(manifest: Manifest, args, schema):
    cache_dir = None if args.no_cache else (args.cache or Path(args.manifest).parent / "cache")
    res = cache_features(manifest, schema, cache_dir)
    for i, exc in sorted(res.errors.items()):
        e = manifest.entries[i]
        kind = exc.kind if isinstance(exc, TriageError) else type(exc).__name__
        log.warning("skipping %s (%s): %s", e.path, kind, exc)
    log.info("features: %d extracted, %d cached, %d failed", res.extracted, res.hits, len(res.errors))
    return res


def _grouped(manifest: Manifest, res) -> dict[str, list]:
    out: dict[str, list] = {}
    for e, fv in zip(manifest, res.vectors):
        if fv is not None and e.is_apt:
            out.setdefault(e.label, []).append(fv)
    return dict(sorted(out.items()))


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _dump(doc) -> str:
    return json.dumps(doc, indent=2) + "\n"


# -- commands ---------------------------------------------------------------

def cmd_extract(args) -> int:
    schema = _schema(args)
    manifest = load_manifest(args.manifest)
    res = _vectors(manifest, args, schema)
    lines = []
    for i, (e, fv) in enumerate(zip(manifest, res.vectors)):
        rec = {"path": str(e.path), "label": e.label}
        if fv is None:
            exc = res.errors[i]
            rec["error"] = {"kind": exc.kind if isinstance(exc, TriageError) else type(exc).__name__,
                            "message": str(exc)}
        else:
            rec.update(sample_id=fv.sample_id, schema_version=fv.schema_version,
                       values=[float(v) for v in fv.values])
        lines.append(json.dumps(rec))
    _emit("".join(line + "\n" for line in lines), args.out)
    return EXIT_OK


def _forest_params(args, seed_tag: str) -> ForestParams:
    return ForestParams(args.contamination, args.estimators, args.subsample,
                        derive_seed(args.seed, seed_tag))


def cmd_train(args) -> int:
    schema = _schema(args)
    manifest = load_manifest(args.manifest)
    data = _grouped(manifest, _vectors(manifest, args, schema))
    if args.tune:
        grid = parse_grid(args.grid) if args.grid else DEFAULT_GRID
        reg = tune_and_train(data, grid, args.k, args.seed, args.lda_dims, args.subsample,
                             not args.no_siblings, schema_version=schema.digest)
    else:
        params = {name: _forest_params(args, name) for name in data}
        reg = train_all(data, args.lda_dims, params, schema_version=schema.digest,
                        passthrough=args.passthrough or len(data) == 1)
    save_registry(reg, args.out, {"seed": args.seed})
    log.info("saved %d classifiers to %s", len(reg.class_names), args.out)
    return EXIT_OK


def cmd_tune(args) -> int:
    schema = _schema(args)
    manifest = load_manifest(args.manifest)
    data = _grouped(manifest, _vectors(manifest, args, schema))
    grid = parse_grid(args.grid) if args.grid else DEFAULT_GRID
    probe = train_all(data, args.lda_dims, ForestParams(n_estimators=1, subsample_size=args.subsample),
                      schema_version=schema.digest, passthrough=len(data) == 1)
    Z = {name: probe.project(np.stack([v.values for v in vs])) for name, vs in data.items()}
    results = []
    for name, X in Z.items():
        sib = [z for other, W in Z.items() if other != name for z in W]
        res = grid_tune(X, np.asarray(sib) if sib else None, grid, args.k,
                        derive_seed(args.seed, "tune", name), args.subsample, name,
                        not args.no_siblings)
        results.append(res.to_dict())
    doc = {"grid": _grid_text(grid), "k": args.k, "seed": args.seed, "classes": results}
    _emit(_dump(doc), args.out)
    return EXIT_OK


def cmd_retrain(args) -> int:
    schema = _schema(args)
    reg, meta = load_registry_with_metadata(args.model)
    manifest = load_manifest(args.manifest)
    manifest = Manifest(tuple(e for e in manifest if e.label == args.class_name))
    if not len(manifest):
        raise UsageError(f"manifest has no rows labelled {args.class_name!r}")
    res = _vectors(manifest, args, schema)
    samples = [fv for fv in res.vectors if fv is not None]
    old = reg.classifiers.get(args.class_name)
    base = old.params if old is not None else ForestParams(seed=derive_seed(args.seed, args.class_name))
    params = ForestParams(
        base.contamination if args.contamination is None else args.contamination,
        base.n_estimators if args.estimators is None else args.estimators,
        base.subsample_size if args.subsample is None else args.subsample,
        base.seed,
    )
    new = retrain_class(reg, args.class_name, samples, params)
    save_registry(new, args.out, meta)
    log.info("retrained %r (registry version %d)", args.class_name, new.registry_version)
    return EXIT_OK


def cmd_triage(args) -> int:
    schema = _schema(args)
    reg, _ = load_registry_with_metadata(args.model)
    paths = iter_sample_paths(args.inputs)
    verdicts = batch_triage(reg, paths, schema)
    lines = []
    for v in verdicts:
        if args.format == "records":
            lines.append(json.dumps(v.to_record()))
        elif v.error is not None:
            lines.append(f"{v.source}\terror\t{v.error[0]}: {v.error[1]}")
        else:
            lines.append(f"{v.source}\t{'APT' if v.is_apt else 'non-APT'}\t{v.decision or '-'}")
    _emit("".join(line + "\n" for line in lines), args.out)
    return EXIT_OK


def _text_report(rep: dict) -> str:
    out = []
    for section in ("triage", "identification"):
        if section not in rep:
            continue
        cm, m = rep[section]["confusion_matrix"], rep[section]["metrics"]
        out.append(f"[{section}]")
        out.append("  tn={tn} fp={fp} fn={fn} tp={tp}".format(**cm))
        for key in ("accuracy", "precision", "recall", "f1"):
            out.append(f"  {key:<9} {m[key]:.4f}  ({m['percent'][key]}%)")
    for name, pc in rep.get("identification", {}).get("per_class", {}).items():
        cm, m = pc["confusion_matrix"], pc["metrics"]
        out.append(f"  {name}: tp={cm['tp']} fp={cm['fp']} fn={cm['fn']} tn={cm['tn']} "
                   f"precision={m['precision']:.4f} recall={m['recall']:.4f}")
    return "\n".join(out) + "\n"


def cmd_evaluate(args) -> int:
    schema = _schema(args)
    manifest = load_manifest(args.manifest)
    res = _vectors(manifest, args, schema)
    apt_X, apt_y, non_apt = [], [], []
    for e, fv in zip(manifest, res.vectors):
        if fv is None:
            continue
        if e.is_apt:
            apt_X.append(fv.values)
            apt_y.append(e.label)
        else:
            non_apt.append(fv.values)
    if args.non_apt:
        extra = load_manifest(args.non_apt)
        res2 = _vectors(extra, args, schema)
        non_apt += [fv.values for fv in res2.vectors if fv is not None]
    if not apt_X:
        raise UsageError("no usable APT samples in the manifest")
    grid = parse_grid(args.grid) if args.grid else DEFAULT_GRID
    builder = default_builder(grid, args.inner_k, args.lda_dims, args.subsample, not args.no_siblings)
    tri = evaluate_triage(builder, np.stack(apt_X), apt_y,
                          np.stack(non_apt) if non_apt else None, args.k, args.seed)
    ident = evaluate_identification(tri.folds, apt_y)
    rep = evaluation_report(tri, ident)
    rep["grid"] = _grid_text(grid)
    rep["non_apt_samples"] = len(non_apt)
    _emit(_dump(rep) if args.format == "records" else _text_report(rep), args.out)
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="apttriage", description="Static APT triage: feature extraction, "
                 "per-class isolation forests and cross-validated evaluation.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    ap.add_argument("-q", "--quiet", action="store_true", help="errors only")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    def common(p, manifest=True):
        p.add_argument("--schema", help="feature schema JSON (default: built-in schema)")
        if manifest:
            p.add_argument("--cache", type=Path, help="feature cache dir (default: <manifest dir>/cache)")
            p.add_argument("--no-cache", action="store_true", help="always re-extract")
        p.add_argument("--out", help="output file (default: stdout)")

    def forest(p, defaults=True):
        p.add_argument("--contamination", type=float,
                       default=DEFAULT_CONTAMINATION if defaults else None,
                       help=f"outlier fraction (default: {DEFAULT_CONTAMINATION})")
        p.add_argument("--estimators", type=int, default=DEFAULT_ESTIMATORS if defaults else None,
                       help=f"trees per forest (default: {DEFAULT_ESTIMATORS})")
        p.add_argument("--subsample", type=int, default=DEFAULT_SUBSAMPLE if defaults else None,
                       help=f"subsample size per tree (default: {DEFAULT_SUBSAMPLE})")

    def tuning(p):
        p.add_argument("--grid", help="contaminations:estimators, e.g. 0,0.05:50,100 "
                       f"(default: {_grid_text(DEFAULT_GRID)})")
        p.add_argument("--no-siblings", action="store_true",
                       help="tune on in-class folds only, without sibling-class negatives")

    def seed(p):
        p.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"RNG seed (default: {DEFAULT_SEED})")

    p = sub.add_parser("extract", help="extract feature vectors for a manifest")
    p.add_argument("manifest")
    common(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train the projection and one forest per class")
    p.add_argument("manifest")
    common(p)
    forest(p)
    tuning(p)
    seed(p)
    p.add_argument("--lda-dims", type=int, help="projection dims (default: classes - 1)")
    p.add_argument("--passthrough", action="store_true", help="skip the LDA projection")
    p.add_argument("--tune", action="store_true", help="grid-tune each class before training")
    p.add_argument("--k", type=int, default=DEFAULT_K, help=f"folds for --tune (default: {DEFAULT_K})")
    p.set_defaults(func=cmd_train)
    p._required_out = True

    p = sub.add_parser("tune", help="grid-tune every class and report the trace")
    p.add_argument("manifest")
    common(p)
    tuning(p)
    seed(p)
    p.add_argument("--subsample", type=int, default=DEFAULT_SUBSAMPLE,
                   help=f"subsample size per tree (default: {DEFAULT_SUBSAMPLE})")
    p.add_argument("--lda-dims", type=int, help="projection dims (default: classes - 1)")
    p.add_argument("--k", type=int, default=DEFAULT_K, help=f"folds (default: {DEFAULT_K})")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("retrain", help="retrain a single class, leaving the rest untouched")
    p.add_argument("manifest", help="manifest with the class's new sample set")
    p.add_argument("--model", required=True, help="input .aptreg container")
    p.add_argument("--class", dest="class_name", required=True, help="APT class to retrain")
    common(p)
    forest(p, defaults=False)
    seed(p)
    p.set_defaults(func=cmd_retrain)
    p._required_out = True

    p = sub.add_parser("triage", help="triage sample files or directories")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--model", required=True, help=".aptreg container")
    common(p, manifest=False)
    p.add_argument("--format", choices=("text", "records"), default="records",
                   help="records = one JSON object per line (default)")
    p.set_defaults(func=cmd_triage)

    p = sub.add_parser("evaluate", help="stratified k-fold evaluation of triage and identification")
    p.add_argument("manifest", help="APT manifest (non-APT rows count as negatives)")
    p.add_argument("--non-apt", help="extra manifest of non-APT samples")
    common(p)
    tuning(p)
    seed(p)
    p.add_argument("--k", type=int, default=DEFAULT_K, help=f"outer folds (default: {DEFAULT_K})")
    p.add_argument("--inner-k", type=int, default=5, help="folds for per-class tuning (default: 5)")
    p.add_argument("--subsample", type=int, default=DEFAULT_SUBSAMPLE,
                   help=f"subsample size per tree (default: {DEFAULT_SUBSAMPLE})")
    p.add_argument("--lda-dims", type=int, help="projection dims (default: classes - 1)")
    p.add_argument("--format", choices=("text", "records"), default="records",
                   help="records = JSON report (default); text = summary")
    p.set_defaults(func=cmd_evaluate)
    return ap


def _error_line(kind: str, message: str, code: int) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit": code}) + "\n")


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        sub = parser._subparsers._group_actions[0].choices[args.cmd]
        if getattr(sub, "_required_out", False) and not args.out:
            raise UsageError(f"apttriage {args.cmd}: --out is required")
    except UsageError as exc:
        _error_line("UsageError", str(exc), EXIT_USAGE)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    level = logging.ERROR if args.quiet else (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        _error_line("UsageError", str(exc), EXIT_USAGE)
        return EXIT_USAGE
    except TriageError as exc:
        _error_line(exc.kind, str(exc), EXIT_DATA)
        return EXIT_DATA
    except (OSError, ValueError) as exc:
        _error_line(type(exc).__name__, str(exc), EXIT_DATA)
        return EXIT_DATA
    except Exception as exc:  # pragma: no cover - last resort
        log.debug("internal error", exc_info=True)
        _error_line(type(exc).__name__, str(exc), EXIT_INTERNAL)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
