"""Command line entry point: ``sdlab <subcommand> [--profile P | --config FILE]``.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from .config import PROFILES, ConfigError, load_config, profile
from .harness import FAMILIES, ArtifactIndex, StageError, run_pipeline
from .reports import REPORT_KINDS, MissingArtifactError, emit_report

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

# subcommand -> pipeline stage it runs up to
_TARGETS = {
    "distill": "distill",
    "prune": "prune",
    "stability": "stability",
    "landscape": "landscape",
    "hessian": "hessian",
    "run": "reports",
}


def _common(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", help="experiment config (JSON)")
    src.add_argument("--profile", choices=sorted(PROFILES), help="built-in config (default: quick)")
    p.add_argument("--seed", type=int, help="override init_seed and the distillation seed")
    p.add_argument("--output-dir", help="override output_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdlab", description="Pruning with distilled data: experiments and reports.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "distill": "distill a synthetic dataset and evaluate it",
        "prune": "find masks by IMP or distilled pruning",
        "stability": "linear interpolation between differently-ordered runs",
        "landscape": "loss over the plane through three trained models",
        "hessian": "diagonal Hessian statistics per subnetwork",
        "run": "the whole pipeline plus every report",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        _common(p)
        if name == "prune":
            p.add_argument("--mode", choices=("imp", "distilled"), required=True)
    rp = sub.add_parser("report", help="emit reports from an existing run directory")
    _common(rp)
    rp.add_argument("--kind", choices=REPORT_KINDS + ("all",), default="all")
    return parser


def resolve_config(args):
    cfg = load_config(args.config) if args.config else profile(args.profile or "quick")
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg = replace(cfg, init_seed=args.seed, distill=replace(cfg.distill, seed=args.seed))
    if args.output_dir:
        cfg = replace(cfg, output_dir=args.output_dir)
    return cfg


def _summary(index: ArtifactIndex) -> dict:
    counts: dict[str, int] = {}
    for e in index.entries:
        counts[e.kind] = counts.get(e.kind, 0) + 1
    return {"output_dir": str(index.root), "status": index.status, "artifacts": counts}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "report":
        try:
            index = ArtifactIndex.load(cfg.output_dir)
        except (OSError, ValueError, KeyError) as exc:
            print(f"config error: no readable index in {cfg.output_dir}: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        kinds = REPORT_KINDS if args.kind == "all" else (args.kind,)
        try:
            files = [str(f) for k in kinds for f in emit_report(index, k)]
        except MissingArtifactError as exc:
            print(f"report failed: {exc}", file=sys.stderr)
            return EXIT_STAGE
        print(json.dumps({"written": files}, indent=1))
        return EXIT_OK

    families = (args.mode,) if args.command == "prune" else FAMILIES
    try:
        index = run_pipeline(cfg, until=_TARGETS[args.command], families=families)
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    print(json.dumps(_summary(index), indent=1, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
