"""Command-line entry point: ``voicemorph <verb> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 backend error. On
failure a one-line JSON error record is written to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .errors import VoiceMorphError
from .runner import Run, UsageError, dumps, exit_code_for


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("UsageError", message, 1)
        sys.exit(1)


def _emit_error(kind: str, message: str, code: int, **extra) -> None:
    rec = {"error": kind, "message": message, "exit_code": code}
    rec.update(extra)
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)


def _global_flags() -> argparse.ArgumentParser:
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", metavar="PATH", help="JSON run configuration")
    g.add_argument("--seed", type=int, help="master seed")
    g.add_argument("--workers", type=int, help="parallel morph jobs")
    g.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    g.add_argument("--output", metavar="DIR", help="run directory")
    g.add_argument("-v", "--verbose", action="store_true")
    return g


def build_parser() -> argparse.ArgumentParser:
    g = _global_flags()
    ap = _Parser(prog="voicemorph", description=__doc__.splitlines()[0], parents=[g])
    sub = ap.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[g], help="scan a corpus into manifest.jsonl")
    p.add_argument("--root", help="corpus root directory")
    p.add_argument("--metadata", help="speaker table (default ROOT/SPEAKERS.TXT)")

    for verb, text in (("morph", "generate morphs for the sampled pairs"),
                       ("evaluate", "score morphs and write the metric report")):
        p = sub.add_parser(verb, parents=[g], help=text)
        p.add_argument("--strategy", help="slerp | lerp | linear_average | P+T mix")
        p.add_argument("--alpha", type=float)
        if verb == "morph":
            p.add_argument("--n-pairs", type=int)
            p.add_argument("--protocol", choices=["v1", "v2"])

    sub.add_parser("calibrate", parents=[g], help="impostor trials and FAR thresholds")

    p = sub.add_parser("ablate", parents=[g], help="morph + evaluate several strategies")
    p.add_argument("--strategies", help="comma-separated strategy list")

    sub.add_parser("report", parents=[g], help="print all reports as one table")

    p = sub.add_parser("make-toy-corpus", parents=[g],
                       help="render a LibriSpeech-shaped corpus with the toy backend")
    p.add_argument("root")
    p.add_argument("--female", type=int, default=3)
    p.add_argument("--male", type=int, default=3)
    p.add_argument("--clips", type=int, default=2)
    p.add_argument("--clip-seconds", type=float, default=6.0)
    return ap


def _overrides(args) -> dict:
    cfg = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.workers is not None:
        cfg["workers"] = args.workers
    if getattr(args, "root", None) and args.verb == "ingest":
        cfg["corpus_root"] = os.path.abspath(args.root)
    if getattr(args, "metadata", None):
        cfg["metadata_file"] = os.path.abspath(args.metadata)
    if getattr(args, "n_pairs", None) is not None:
        cfg["n_pairs"] = args.n_pairs
    if getattr(args, "protocol", None):
        cfg["protocol"] = args.protocol
    if getattr(args, "strategy", None) or getattr(args, "alpha", None) is not None:
        from .interpolation import FusionStrategy

        base = dict(cfg.get("strategy") or {})
        if args.strategy:
            try:
                base.update(FusionStrategy.parse(args.strategy).to_dict())
            except ValueError as exc:
                raise UsageError(str(exc)) from exc
        if args.alpha is not None:
            base["alpha"] = args.alpha
        cfg["strategy"] = base
    return cfg


def run(argv=None) -> int:
    """Execute one command and return its exit code."""
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    logging.captureWarnings(True)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "make-toy-corpus":
            from .toy_corpus import write_toy_corpus

            voices = write_toy_corpus(args.root, args.female, args.male, args.clips,
                                      args.clip_seconds, args.seed or 0)
            print(dumps({"root": args.root, "speakers": len(voices)}), end="")
            return 0
        overrides = _overrides(args)
        out = args.output or overrides.get("output")
        if not out:
            raise UsageError("no run directory given (--output or config 'output')")
        r = Run.open(out, overrides, force=args.force)
        if args.verb == "ingest":
            result = r.ingest()
        elif args.verb == "morph":
            result = r.morph()
        elif args.verb == "calibrate":
            result = r.calibrate()
        elif args.verb == "evaluate":
            result = r.evaluate().to_dict()
        elif args.verb == "ablate":
            names = args.strategies.split(",") if args.strategies else None
            result = [rep.to_dict() for rep in r.ablate(names)]
        else:
            print(r.report(), end="")
            return 0
        print(dumps(result), end="")
        return 0
    except VoiceMorphError as exc:
        code = exit_code_for(exc)
        extra = {}
        if getattr(exc, "diagnostics", ""):
            extra["diagnostics"] = exc.diagnostics
        _emit_error(type(exc).__name__, str(exc), code, **extra)
        return code
    except KeyError as exc:
        _emit_error("DataError", f"unknown identifier {exc}", 2)
        return 2
    except OSError as exc:
        _emit_error("DataError", str(exc), 2)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
