"""``adsa`` command line: compare, ablate, locality, memory.

Failures print a JSON object ``{"error": ..., "message": ...}`` to stderr
and exit nonzero (2 for usage errors, 1 otherwise).
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .kv_cache import CachePolicy
from .model import ModelConfig


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("usage", message, 2)


def _fail(kind: str, message: str, code: int):
    json.dump({"error": kind, "message": message}, sys.stderr)
    sys.stderr.write("\n")
    sys.exit(code)


def default_spec() -> harness.ExperimentSpec:
    """Small grid that runs in a few seconds."""
    return harness.ExperimentSpec(
        model=ModelConfig(vocab_size=64, d_model=32, n_heads=2, n_layers=2, seq_capacity=256),
        policies=[
            CachePolicy(capacity=256, name="dense"),
            CachePolicy(0, 32, 0, 64, "window", name="window"),
            CachePolicy(8, 24, 0, 64, "window_prefix", name="window_prefix"),
            CachePolicy(8, 24, 32, 64, "adsa", name="adsa"),
        ],
        length=128,
    )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment spec")
    common.add_argument("--out", type=Path, help="output directory (default: spec out_dir)")
    common.add_argument("--seed", type=int, help="sampling seed; replaces the config's seeds")
    common.add_argument("--capture-weights", action="store_true",
                        help="record attention weights and emit histogram.csv")
    common.add_argument("--policy", action="append", default=[], metavar="NAME=n,m,K,C",
                        help="policy to run (repeatable); replaces the config's grid")
    common.add_argument("--length", type=int, help="tokens to generate")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="adsa", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("compare", parents=[common], help="run the policy grid against dense")
    sub.add_parser("ablate", parents=[common], help="prefix/select/local removal study")
    sub.add_parser("locality", parents=[common], help="attention-distance histogram")
    sub.add_parser("memory", parents=[common], help="accounted memory versus batch size")
    return p


def _spec_from_args(args) -> harness.ExperimentSpec:
    spec = harness.ExperimentSpec.load(args.config) if args.config else default_spec()
    changes = {}
    if args.policy:
        changes["policies"] = [harness.parse_policy(t) for t in args.policy]
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    if args.capture_weights:
        changes["capture_weights"] = True
    if args.length is not None:
        changes["length"] = args.length
    return replace(spec, **changes) if changes else spec


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = _spec_from_args(args)
        out = args.out or Path(spec.out_dir)
        if args.command == "compare":
            summary = harness.run_compare(spec, out)
        elif args.command == "ablate":
            summary = harness.run_ablation(spec, out)
        elif args.command == "locality":
            summary = harness.run_locality(spec, out)
        else:
            summary = harness.run_memory(spec, out)
    except (ValueError, TypeError, KeyError, json.JSONDecodeError) as exc:
        _fail("invalid_input", str(exc), 1)
    except OSError as exc:
        _fail("io", str(exc), 1)
    print(json.dumps({"ok": True, "command": args.command, "out": str(out),
                      "kind": summary["kind"]}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
