"""Command line entry point: ``cladapt run|report|gen-stream|inspect``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .checkpoint import CheckpointError, describe, load_checkpoint
from .data import DataError, StreamSpec, generate_synthetic_stream, save_stream
from .harness import emit_report, run_experiment
from .model import ConfigError


def _cmd_run(args) -> int:
    manifest = run_experiment(args.config)
    print(json.dumps({"config_hash": manifest.config_hash,
                      "artifacts": len(manifest.artifacts),
                      "cost": manifest.cost}, indent=2))
    return 0


def _cmd_report(args) -> int:
    for name in emit_report(args.results_dir):
        print(name)
    return 0


def _cmd_gen_stream(args) -> int:
    try:
        raw = yaml.safe_load(Path(args.spec).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read stream spec {args.spec}: {exc}") from None
    spec = StreamSpec.from_dict(raw)
    exps = generate_synthetic_stream(spec)
    save_stream(exps, args.out)
    for e in exps:
        print(f"{e.name}: train={len(e.train_y)} test={len(e.test_y)} shape={e.sample_shape}")
    return 0


def _cmd_inspect(args) -> int:
    print(describe(load_checkpoint(args.checkpoint)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cladapt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.set_defaults(func=_cmd_run)
    r = sub.add_parser("report", help="rebuild tables and trend CSV from a results directory")
    r.add_argument("results_dir")
    r.set_defaults(func=_cmd_report)
    r = sub.add_parser("gen-stream", help="generate a synthetic stream into a CLSTRM file")
    r.add_argument("spec")
    r.add_argument("out")
    r.set_defaults(func=_cmd_gen_stream)
    r = sub.add_parser("inspect", help="print a checkpoint's architecture and parameters")
    r.add_argument("checkpoint")
    r.set_defaults(func=_cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
