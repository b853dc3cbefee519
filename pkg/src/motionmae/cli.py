"""Command-line entry point: ``motionmae <subcommand>``.

Thread count is controlled only through the ``MOTIONMAE_NUM_THREADS``
environment variable, read at import time.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from . import lgi_former as E
from .config import load_config
from .errors import MotionMAEError
from .pretrain import DESK_DECODER, DecoderConfig

log = logging.getLogger("motionmae")

RUN_MODES = ("pretrain", "finetune", "eval", "reconstruct")


def _cmd_run(args) -> int:
    from .runner import run

    rc = load_config(args.config)
    if rc.mode != args.command:
        raise MotionMAEError(f"{args.config} is a {rc.mode!r} config; run it with `motionmae {rc.mode}`")
    summary = run(rc)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _flops_cfg(args) -> E.EncoderConfig:
    over = {}
    if args.variant:
        over.update(E.VARIANTS[args.variant])
    if args.region:
        over["region"] = tuple(args.region)
    if args.grid:
        over["grid"] = tuple(args.grid)
    if args.dim:
        over["dim"] = args.dim
    if args.depth:
        over["depth"] = args.depth
    return E.preset(args.preset, **over)


def _cmd_flops(args) -> int:
    from .runner import flops_report

    if args.config:
        rc = load_config(args.config)
        cfg, rho = rc.encoder, rc.rho
        dec = rc.decoder if args.decoder else None
    else:
        cfg, rho = _flops_cfg(args), args.rho
        dec = (DESK_DECODER if args.preset == "desk" else DecoderConfig()) if args.decoder else None
    if dec is not None and rho is None:
        raise MotionMAEError("--decoder counts a pre-training pass; give --rho as well")
    rep = flops_report(cfg, rho, dec, args.convention, args.num_classes)
    print(rep.to_json())
    if not args.json_only:
        print(rep.table(), file=sys.stderr)
    return 0


def _cmd_selftest(args) -> int:
    from .acceptance import run_all

    only = None if not args.only else {int(c) for c in args.only.split(",")}
    results = run_all(only=only, skip=set() if not args.quick else {7})
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="motionmae", description="Masked appearance+motion video autoencoder toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug")
    sub = p.add_subparsers(dest="command", required=True)
    for mode in RUN_MODES:
        s = sub.add_parser(mode, help=f"run a {mode} config")
        s.add_argument("config", help="path to a JSON run config")
        s.set_defaults(func=_cmd_run)

    f = sub.add_parser("flops", help="parameter and FLOP report (JSON on stdout, table on stderr)")
    f.add_argument("--config", help="take the model from a run config instead of the flags below")
    f.add_argument("--preset", default="base", choices=sorted(E.PRESETS))
    f.add_argument("--variant", choices=sorted(E.VARIANTS))
    f.add_argument("--region", type=int, nargs=3, metavar=("T", "H", "W"))
    f.add_argument("--grid", type=int, nargs=3, metavar=("T", "H", "W"))
    f.add_argument("--dim", type=int)
    f.add_argument("--depth", type=int)
    f.add_argument("--rho", type=float, help="count encoder cost at pre-training (masked) length")
    f.add_argument("--decoder", action="store_true", help="include the reconstruction decoder")
    f.add_argument("--num-classes", type=int, help="include a classification head")
    f.add_argument("--convention", default="mac", choices=("mac", "2mac"),
                   help="mac: 1 multiply-accumulate = 1 FLOP (default); 2mac: = 2 FLOPs")
    f.add_argument("--json-only", action="store_true")
    f.set_defaults(func=_cmd_flops)

    t = sub.add_parser("selftest", help="run the acceptance suite; exit 1 on any failure")
    t.add_argument("--only", help="comma-separated criterion numbers, e.g. 1,2,8")
    t.add_argument("--quick", action="store_true", help="skip the desk-scale learning run (criterion 7)")
    t.set_defaults(func=_cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (MotionMAEError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
