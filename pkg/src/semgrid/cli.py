"""Command-line interface.

Subcommands: ``infer2d`` (single-image CRF segmentation), ``map3d`` (the
incremental mapping loop over a frame manifest), ``eval`` (metrics over
prediction/truth directories), ``export`` (PLY maps from a grid snapshot).

Exit codes: 0 success, 1 usage error, 2 input error, 3 incomplete evaluation.
"""

from __future__ import annotations

import argparse
import sys

from semgrid.core import SemgridError
from semgrid.pipeline import (
    MODELS,
    cmd_eval,
    cmd_export,
    cmd_infer2d,
    load_pipeline_config,
    run_map3d,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_INCOMPLETE = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semgrid")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="key=value config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--iterations", type=int, help="override inference iterations")
        p.add_argument("--backend", choices=["lattice", "exact"], help="pairwise backend")

    p = sub.add_parser("infer2d", help="run the 2D CRF on one image")
    common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--unary", required=True, help="UNRY probability map")
    p.add_argument("--truth", help="optional palette-colored truth image")
    p.add_argument("--model", choices=list(MODELS), default="hier")
    p.add_argument("--dump-superpixels", action="store_true",
                   help="also write the superpixel map as 16-bit PGM")

    p = sub.add_parser("map3d", help="incremental 3D semantic mapping")
    common(p)
    p.add_argument("--manifest", required=True, help="frame manifest file")
    p.add_argument("--stride", type=int, help="process every k-th frame")
    p.add_argument("--state-in", help="resume from a grid snapshot")
    p.add_argument("--state-out", help="write the final grid snapshot here")
    p.add_argument("--frames", help="a:b manifest slice (end exclusive)")

    p = sub.add_parser("eval", help="score predictions against truth images")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pred", required=True, help="directory of predicted label images")
    p.add_argument("--truth", required=True, help="directory of truth label images")

    p = sub.add_parser("export", help="export PLY maps from a grid snapshot")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--state", required=True, help="grid snapshot (.npz)")
    p.add_argument("--archive", help="optional evicted-cell archive")
    return parser


def _parse_frames(arg):
    if arg is None:
        return None
    a, _, b = arg.partition(":")
    return (int(a) if a else 0, int(b) if b else None)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE

    try:
        overrides = {}
        if getattr(args, "iterations", None) is not None:
            overrides["iterations"] = args.iterations
        if getattr(args, "backend", None) is not None:
            overrides["backend"] = args.backend
        if getattr(args, "stride", None) is not None:
            overrides["stride"] = args.stride
        config = load_pipeline_config(args.config, overrides)

        if args.command == "infer2d":
            return cmd_infer2d(config, args.image, args.unary, args.out,
                               model=args.model, truth_path=args.truth,
                               dump_superpixels=args.dump_superpixels)
        if args.command == "map3d":
            run_map3d(config, args.manifest, args.out,
                      state_in=args.state_in, state_out=args.state_out,
                      frame_range=_parse_frames(args.frames))
            return EXIT_OK
        if args.command == "eval":
            return cmd_eval(config, args.pred, args.truth, args.out)
        if args.command == "export":
            return cmd_export(config, args.state, args.out, archive_path=args.archive)
        return EXIT_USAGE
    except (SemgridError, OSError, ValueError) as exc:
        print(f"semgrid {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
