"""Command-line interface.

Exit codes: 0 success, 2 input or schema error, 3 protocol violation,
4 numeric failure (1 for any other audit error).

Global flags may also come from the environment: ``SHIFTAUDIT_CONFIG``,
``SHIFTAUDIT_SEED``, ``SHIFTAUDIT_OUT``, ``SHIFTAUDIT_THREADS`` and
``SHIFTAUDIT_QUIET``. Explicit flags win.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from importlib import resources
from pathlib import Path

from . import __version__
from .errors import AuditError, ProtocolViolation, SchemaError, TrainingDiverged


EXIT_OK, EXIT_ERROR, EXIT_INPUT, EXIT_PROTOCOL, EXIT_NUMERIC = 0, 1, 2, 3, 4


def _env_flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    def d(value):
        return argparse.SUPPRESS if suppress else value

    env = os.environ.get
    parser.add_argument("--config", default=d(env("SHIFTAUDIT_CONFIG")),
                        help="TOML config, or 'quickstart' for the bundled example")
    parser.add_argument("--seed", type=int, default=d(_int_env("SHIFTAUDIT_SEED")),
                        help="random seed (audit: run this single seed)")
    parser.add_argument("--out", default=d(env("SHIFTAUDIT_OUT")), help="output file or directory")
    parser.add_argument("--threads", type=int, default=d(_int_env("SHIFTAUDIT_THREADS")),
                        help="worker threads; results do not depend on it")
    parser.add_argument("--quiet", action="store_true",
                        default=d(_env_flag("SHIFTAUDIT_QUIET")), help="suppress progress output")


def _int_env(name: str):
    raw = os.environ.get(name)
    if raw in (None, ""):
        return None
    try:
        return int(raw)
    except ValueError:
        raise SchemaError(f"{name}: not an integer: {raw!r}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SchemaError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="shiftaudit", description="Audit feature-importance explanations "
                     "across seeds, domains and methods.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        _global_flags(p, suppress=True)
        return p

    p = add("ingest", "validate a match CSV and write canonical records plus exclusions")
    p.add_argument("input")
    p.add_argument("--adjudication", help="three-referee CSV whose adjudicated counts override the input")

    p = add("adjudicate", "resolve three-referee counts (majority, else median)")
    p.add_argument("input")

    p = add("split", "match-level train/val/test partition")
    p.add_argument("input")
    p.add_argument("--ratios", type=int, nargs=3, default=[8, 1, 1], metavar=("TRAIN", "VAL", "TEST"))

    p = add("synth", "generate a synthetic domain as an ingest CSV")
    p.add_argument("--preset", choices=["elite", "linear"], default="elite")
    p.add_argument("--matches", type=int, default=1000)
    p.add_argument("--domain", default="synth")
    p.add_argument("--noise-std", type=float)
    p.add_argument("--coupling", type=float)
    p.add_argument("--shift", choices=["none", "reversal"], default="none")
    p.add_argument("--damping", type=float, default=0.7)
    p.add_argument("--inflation", type=float, default=1.5)

    p = add("train", "train one model on the elite training split of a match CSV")
    p.add_argument("input")
    p.add_argument("--model", choices=["dt", "rf", "mlp"], default="rf")
    p.add_argument("--role", choices=["elite", "target"], default="elite",
                   help="provenance of the input; target data cannot be trained on")
    p.add_argument("--split-seed", type=int, default=0)

    for name, help_ in (("explain", "global Shapley importance of a saved model on a domain"),
                        ("cis", "counterfactual impact scores of a saved model on a domain")):
        p = add(name, help_)
        p.add_argument("model")
        p.add_argument("input", help="match CSV of the domain to explain")
        p.add_argument("--reference", required=True,
                       help="elite match CSV; its training split supplies the reference rows")
        p.add_argument("--reference-role", choices=["elite", "target"], default="elite")
        p.add_argument("--split-seed", type=int, default=0)
        p.add_argument("--domain", help="label for the output rows")
        if name == "explain":
            p.add_argument("--background-size", type=int, default=100)
            p.add_argument("--n-permutations", type=int, default=200)
            p.add_argument("--per-sample", help="also write per-sample attributions to this CSV")

    p = add("audit", "run experiments 1-5 from a config")
    p.add_argument("config_path", nargs="?", help="config file (same as --config)")

    p = add("render", "draw an SVG from an audit CSV")
    p.add_argument("input")
    p.add_argument("--kind", choices=["bars", "heatmap", "box"], required=True)
    p.add_argument("--model")
    p.add_argument("--method")
    p.add_argument("--title")
    return parser


# --------------------------------------------------------------------------- helpers


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


def _need_out(args) -> Path:
    if not args.out:
        raise SchemaError(f"{args.command}: --out is required")
    return Path(args.out)


def _config_path(value: str) -> Path:
    if value == "quickstart":
        return Path(str(resources.files("shiftaudit") / "configs" / "quickstart.toml"))
    return Path(value)


def _load_cfg(args):
    from .config import load_config, with_overrides

    path = getattr(args, "config_path", None) or args.config
    if not path:
        raise SchemaError("no config given (use --config)")
    cfg = load_config(_config_path(path))
    return with_overrides(cfg, seeds=None if args.seed is None else (args.seed,),
                          threads=args.threads, output_dir=args.out)


def _elite_split(path, role: str, split_seed: int, schema):
    from .dataset import expand_split, ingest_matches, split_matches

    records, exclusions = ingest_matches(path, schema)
    for e in exclusions:
        _warn(f"{path}: excluded {e.match_id} ({e.reason})")
    try:
        part = split_matches(records, seed=split_seed)
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from None
    return expand_split(records, part, schema, label=Path(path).stem, role=role)


def _domain_rows(path, label, schema):
    from .dataset import TARGET, expand_perspectives, ingest_matches

    records, exclusions = ingest_matches(path, schema)
    for e in exclusions:
        _warn(f"{path}: excluded {e.match_id} ({e.reason})")
    if not records:
        raise SchemaError(f"{path}: no usable matches")
    # inference only, so the tag is irrelevant to the protocol checks
    return expand_perspectives(records, schema, label or Path(path).stem, TARGET, "all")


# --------------------------------------------------------------------------- commands


def cmd_ingest(args) -> int:
    from .dataset import FeatureSchema, ingest_matches, read_adjudication, write_exclusions, write_matches

    out = _need_out(args)
    out.mkdir(parents=True, exist_ok=True)
    adjudicated = None
    if args.adjudication:
        adjudicated = read_adjudication(args.adjudication)
    schema = FeatureSchema()
    records, exclusions = ingest_matches(args.input, schema, adjudicated)
    write_matches(records, out / "matches.csv", schema)
    write_exclusions(exclusions, out / "exclusions.csv")
    for e in exclusions:
        _warn(f"excluded {e.match_id or '<blank>'}: {e.reason}")
    _say(args, f"{len(records)} records written, {len(exclusions)} excluded")
    return EXIT_OK


def cmd_adjudicate(args) -> int:
    from .dataset import read_adjudication

    out = _need_out(args)
    resolved = read_adjudication(args.input)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["match_id", "perspective", "event", "count"])
        for (mid, side, event), count in sorted(resolved.items()):
            w.writerow([mid, side, event, count])
    _say(args, f"{len(resolved)} adjudicated counts written")
    return EXIT_OK


def cmd_split(args) -> int:
    from .dataset import FeatureSchema, ingest_matches, split_matches

    out = _need_out(args)
    records, _ = ingest_matches(args.input, FeatureSchema())
    try:
        part = split_matches(records, args.ratios, 0 if args.seed is None else args.seed)
    except ValueError as exc:
        raise SchemaError(str(exc)) from None
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["match_id", "split"])
        for name, ids in part.parts().items():
            for mid in ids:
                w.writerow([mid, name])
    _say(args, " ".join(f"{k}={len(v)}" for k, v in part.parts().items()))
    return EXIT_OK


def cmd_synth(args) -> int:
    from .dataset import write_matches
    from .synth import PRESETS, apply_shift, generate_domain, reversal_shift

    out = _need_out(args)
    kw = {k: v for k, v in (("noise_std", args.noise_std), ("coupling", args.coupling)) if v is not None}
    try:
        spec = PRESETS[args.preset](domain=args.domain, seed=args.seed or 0, **kw)
        if args.shift == "reversal":
            spec = apply_shift(spec, reversal_shift(spec.p, args.damping, args.inflation, source=spec))
        records = generate_domain(spec, args.matches)
    except ValueError as exc:
        raise SchemaError(str(exc)) from None
    out.parent.mkdir(parents=True, exist_ok=True)
    write_matches(records, out)
    out.with_suffix(".spec.json").write_text(spec.to_json() + "\n", encoding="utf-8")
    _say(args, f"{len(records)} matches written to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .dataset import FeatureSchema
    from .models import DT_DEFAULTS, RF_DEFAULTS, MlpParams, evaluate, save_model
    from .models.mlp import train_mlp
    from .models.tree import train_forest, train_tree

    out = _need_out(args)
    params = {"dt": DT_DEFAULTS, "rf": RF_DEFAULTS, "mlp": MlpParams()}[args.model]
    if args.config:
        from .config import load_config

        params = getattr(load_config(_config_path(args.config)), args.model)
    split = _elite_split(args.input, args.role, args.split_seed, FeatureSchema())
    seed = args.seed or 0
    if args.model == "dt":
        model = train_tree(split.train, params, seed)
    elif args.model == "rf":
        model = train_forest(split.train, params, seed, threads=args.threads or 1)
    else:
        model = train_mlp(split.train, split.val, params, seed)
    save_model(model, out)
    e = evaluate(model, split.test)
    _say(args, f"{args.model} seed {seed}: test MAE {e.mae:.4f}, RMSE {e.rmse:.4f} (n={e.n})")
    return EXIT_OK


def _reference(args, schema):
    split = _elite_split(args.reference, args.reference_role, args.split_seed, schema)
    return split.train


def cmd_explain(args) -> int:
    from .attribution import draw_background, explain, global_importance, write_attributions
    from .dataset import FeatureSchema
    from .models import load_model
    from .report import write_csv

    out = _need_out(args)
    schema = FeatureSchema()
    model = load_model(args.model)
    seed = args.seed or 0
    bg = draw_background(_reference(args, schema), args.background_size, seed)
    ds = _domain_rows(args.input, args.domain, schema)
    attr = explain(model, ds.features, bg, args.n_permutations, seed, args.threads or 1)
    imp = global_importance(attr, ds.label, seed, schema.feature_names)
    write_csv(out, ["feature", "importance", "normalized", "domain", "model", "method", "seed"],
              [(f, v, nv, ds.label, model.kind, attr.method, seed)
               for f, v, nv in zip(schema.feature_names, imp.values, imp.normalized())])
    if args.per_sample:
        ids = [f"{m}:{side}" for m, side in zip(ds.match_ids, ds.perspectives)]
        write_attributions(args.per_sample, attr, ids, schema.feature_names, ds.label, seed)
    _say(args, f"importance for {len(ds)} rows written to {out}")
    return EXIT_OK


def cmd_cis(args) -> int:
    from .cis import build_targets, cis_scores
    from .dataset import FeatureSchema, compute_stats
    from .models import load_model
    from .report import write_csv

    out = _need_out(args)
    schema = FeatureSchema()
    model = load_model(args.model)
    targets = build_targets(compute_stats(_reference(args, schema)), schema)
    ds = _domain_rows(args.input, args.domain, schema)
    res = cis_scores(model, ds, targets)
    write_csv(out, ["feature", "raw", "normalized", "domain", "model", "degenerate"],
              [(f, r, nv, res.domain, res.model, int(res.degenerate))
               for f, r, nv in zip(schema.feature_names, res.raw, res.normalized)])
    if res.degenerate:
        _warn("no counterfactual changed any prediction; normalized scores are all zero")
    _say(args, f"CIS for {len(ds)} rows written to {out}")
    return EXIT_OK


def cmd_audit(args) -> int:
    from .audit import run_audit

    cfg = _load_cfg(args)
    out = cfg.resolve(cfg.output_dir) if args.out is None else Path(args.out)
    res = run_audit(cfg, out)
    _say(args, f"audit {res.record.config_hash[:12]} finished in {res.record.timing['total']:.1f} s; "
               f"reports in {out}")
    return EXIT_OK


def cmd_render(args) -> int:
    from .report import render_csv

    out = _need_out(args)
    svg = render_csv(args.input, args.kind, args.model, args.method, args.title)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg, encoding="utf-8")
    _say(args, f"{args.kind} figure written to {out}")
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest, "adjudicate": cmd_adjudicate, "split": cmd_split, "synth": cmd_synth,
    "train": cmd_train, "explain": cmd_explain, "cis": cmd_cis, "audit": cmd_audit,
    "render": cmd_render,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ProtocolViolation as exc:
        print(f"protocol violation: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except AuditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
