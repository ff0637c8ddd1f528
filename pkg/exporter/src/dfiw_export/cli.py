"""Exporter command line: checkpoint conversion and fixture generation."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .convert import (
    DEFAULT_CHANNEL_ORDER,
    DEFAULT_MEANS_BGR,
    convert_checkpoint,
    file_sha256,
    make_test_checkpoint,
)
from .dfiw import write_dfiw
from .fixtures import generate_fixtures


def cmd_export(args) -> int:
    if not Path(args.checkpoint).is_file():
        print(f"checkpoint not found: {args.checkpoint}", file=sys.stderr)
        return 2
    model = convert_checkpoint(args.checkpoint, channel_order=args.channel_order,
                               means=tuple(args.means))
    write_dfiw(model, args.out)
    print(f"wrote {len(model.layers)} conv layers -> {args.out}")
    print(f"source sha256: {file_sha256(args.checkpoint)}")
    return 0


def cmd_fixtures(args) -> int:
    for p in [args.weights, *args.images]:
        if not Path(p).is_file():
            print(f"input not found: {p}", file=sys.stderr)
            return 2
    identity = args.source or f"{args.weights} sha256:{file_sha256(args.weights)}"
    written = generate_fixtures(args.weights, args.images, args.out, source_identity=identity)
    print(f"wrote {len(written)} activation dumps -> {args.out}")
    return 0


def cmd_make_test_checkpoint(args) -> int:
    make_test_checkpoint(args.out, seed=args.seed)
    print(f"wrote random VGG-19-topology checkpoint -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dfiw-export",
        description="Convert a pretrained VGG-19 conv-stack checkpoint to DFIW "
                    "and generate golden activation fixtures.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_exp = sub.add_parser("export", help="convert a torch checkpoint to a DFIW file")
    p_exp.add_argument("--checkpoint", required=True,
                       help="torch .pth checkpoint (torchvision or conv<b>_<i> keys)")
    p_exp.add_argument("--out", required=True, help="output DFIW path")
    p_exp.add_argument("--channel-order", choices=["rgb", "bgr"],
                       default=DEFAULT_CHANNEL_ORDER,
                       help="input channel convention of the source model")
    p_exp.add_argument("--means", type=float, nargs=3, default=list(DEFAULT_MEANS_BGR),
                       metavar=("M0", "M1", "M2"),
                       help="channel means in network order (default: classic "
                            "[0,255]-scale BGR means)")
    p_exp.set_defaults(func=cmd_export)

    p_fix = sub.add_parser("fixtures", help="dump golden activations for a set of images")
    p_fix.add_argument("--weights", required=True, help="DFIW file")
    p_fix.add_argument("--images", required=True, nargs="+", help="input images")
    p_fix.add_argument("--out", required=True, help="output fixture directory")
    p_fix.add_argument("--source", default="",
                       help="source-model identity to pin in the manifest "
                            "(defaults to the weight file's sha256)")
    p_fix.set_defaults(func=cmd_fixtures)

    p_mk = sub.add_parser(
        "make-test-checkpoint",
        help="write a random checkpoint with the exact VGG-19 conv topology "
             "(offline stand-in for the published model)",
    )
    p_mk.add_argument("--out", required=True)
    p_mk.add_argument("--seed", type=int, default=0)
    p_mk.set_defaults(func=cmd_make_test_checkpoint)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
