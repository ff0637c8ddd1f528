"""Command-line entry point.

Every command that writes an output also writes `<output>.manifest`, a
UTF-8 key=value file recording the resolved parameters, paths, seed, and
tool version, so any run can be reproduced bit-for-bit.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .gradcheck import run_gradcheck
from .imgio import load_image_rgb, load_mask, save_image_rgb
from .inpaint import DATASET_STRENGTHS, inpaint
from .neighbors import (
    AttributeQuery,
    build_index,
    load_attribute_table,
    load_index,
    save_index,
)
from .network import load_weights
from .optimizer import LbfgsConfig, write_trace_csv
from .reconstruct import INIT_INPUT, INIT_INPUT_PLUS_NOISE, ReconstructionConfig, TvConfig, transform
from .report import render_trace_figure, trace_figure_path

log = logging.getLogger("featmorph")

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


def write_manifest(out_path: str, entries: dict) -> str:
    manifest_path = f"{out_path}.manifest"
    lines = [f"{key}={format_value(value)}" for key, value in entries.items()]
    Path(manifest_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest_path


def format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def read_manifest(path: str) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            out[key] = value
    return out


def _require_file(parser: argparse.ArgumentParser, path: str | None, what: str) -> None:
    if path is not None and not Path(path).is_file():
        parser.error(f"{what} not found: {path}")


def parse_attr_spec(parser, spec: str, names: tuple[str, ...]) -> AttributeQuery:
    """Spec syntax: comma list of name=+1|-1; the source set is the negation."""
    targets = np.zeros(len(names), dtype=bool)
    care = np.zeros(len(names), dtype=bool)
    for item in spec.split(","):
        item = item.strip()
        if not item:
            continue
        name, sep, value = item.partition("=")
        name = name.strip()
        if name not in names:
            parser.error(
                f"unknown attribute {name!r}; valid names from the index: "
                f"{', '.join(names) if names else '(none)'}"
            )
        if not sep or value.strip() not in ("+1", "1", "-1"):
            parser.error(f"attribute spec {item!r} must be name=+1 or name=-1")
        idx = names.index(name)
        care[idx] = True
        targets[idx] = value.strip() in ("+1", "1")
    if not care.any():
        parser.error("target attribute spec selects no attributes")
    return AttributeQuery(targets, care)


def _load_net(parser, args):
    _require_file(parser, args.weights, "weights file")
    return load_weights(args.weights, require_vgg19=not args.any_arch)


def _lbfgs_config(args) -> LbfgsConfig:
    return LbfgsConfig(max_iterations=args.iters, gradient_tolerance=args.tolerance)


def _write_trace(args, result) -> None:
    if args.trace:
        write_trace_csv(result.trace, args.trace)
        render_trace_figure(result.trace, trace_figure_path(args.trace))


# ---------------------------------------------------------------------------
# Commands


def cmd_build_index(parser, args) -> int:
    _require_file(parser, args.attrs, "attribute table")
    net = _load_net(parser, args)
    images_dir = Path(args.images)
    if not images_dir.is_dir():
        parser.error(f"image directory not found: {args.images}")
    paths = sorted(
        str(p) for p in images_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS
    )
    if not paths:
        log.warning("image directory %s is empty; writing an empty index", args.images)
    table = load_attribute_table(args.attrs) if args.attrs else None
    index = build_index(paths, net, attribute_table=table, jobs=args.jobs)
    save_index(index, args.out)
    write_manifest(
        args.out,
        {
            "command": "build-index",
            "version": __version__,
            "images": args.images,
            "attrs": args.attrs or "",
            "weights": args.weights,
            "out": args.out,
            "jobs": args.jobs,
            "records": len(index),
            "rejects": len(index.rejects),
            "attributes": ",".join(index.attribute_names),
        },
    )
    print(f"indexed {len(index)} images ({len(index.rejects)} rejected) -> {args.out}")
    return 0


def cmd_transform(parser, args) -> int:
    _require_file(parser, args.input, "input image")
    net = _load_net(parser, args)
    index = None
    query = None
    if args.beta > 0:
        if not args.index or not args.target_attrs:
            parser.error("--index and --target-attrs are required when --beta > 0")
        _require_file(parser, args.index, "index file")
        index = load_index(args.index)
        query = parse_attr_spec(parser, args.target_attrs, index.attribute_names)
    elif args.index:
        _require_file(parser, args.index, "index file")
        index = load_index(args.index)

    image = load_image_rgb(args.input)
    cfg = ReconstructionConfig(
        tv=TvConfig(lam=args.tv_lambda, exponent=args.tv_exponent),
        lbfgs=_lbfgs_config(args),
        strength_beta=args.beta,
        init=args.init,
        seed=args.seed,
    )
    exclude = _self_exclusion(index, args.input)
    result = transform(image, index, query, args.k, cfg, net, exclude_ids=exclude)
    save_image_rgb(result.image, args.out)
    _write_trace(args, result.lbfgs)
    write_manifest(
        args.out,
        {
            "command": "transform",
            "version": __version__,
            "input": args.input,
            "output": args.out,
            "weights": args.weights,
            "index": args.index or "",
            "target_attrs": args.target_attrs or "",
            "k": args.k,
            "beta": float(args.beta),
            "lambda": float(args.tv_lambda),
            "tv_exponent": float(args.tv_exponent),
            "iterations_max": args.iters,
            "gradient_tolerance": float(args.tolerance),
            "init": args.init,
            "seed": args.seed,
            "jobs": args.jobs,
            "trace": args.trace or "",
            "alpha": float(result.alpha),
            "k_used": result.k_used,
            "status": result.lbfgs.status,
            "iterations_run": result.lbfgs.iterations,
            "final_objective": float(result.lbfgs.value),
        },
    )
    print(f"transform done ({result.lbfgs.status}, {result.lbfgs.iterations} iterations) -> {args.out}")
    return 0


def cmd_inpaint(parser, args) -> int:
    _require_file(parser, args.input, "input image")
    _require_file(parser, args.mask, "mask image")
    _require_file(parser, args.index, "index file")
    net = _load_net(parser, args)
    index = load_index(args.index)
    beta = args.beta if args.beta is not None else DATASET_STRENGTHS[args.dataset]

    image = load_image_rgb(args.input)
    mask = load_mask(args.mask)
    cfg = ReconstructionConfig(
        tv=TvConfig(lam=args.tv_lambda, exponent=args.tv_exponent),
        lbfgs=_lbfgs_config(args),
        strength_beta=beta,
        init=args.init,
        seed=args.seed,
    )
    exclude = _self_exclusion(index, args.input)
    result = inpaint(
        image, mask, index, args.k, cfg, net,
        exclude_ids=exclude, composite=args.composite,
    )
    save_image_rgb(result.image, args.out)
    _write_trace(args, result.lbfgs)
    write_manifest(
        args.out,
        {
            "command": "inpaint",
            "version": __version__,
            "input": args.input,
            "mask": args.mask,
            "output": args.out,
            "weights": args.weights,
            "index": args.index,
            "k": args.k,
            "beta": float(beta),
            "dataset": args.dataset,
            "composite": args.composite,
            "lambda": float(args.tv_lambda),
            "tv_exponent": float(args.tv_exponent),
            "iterations_max": args.iters,
            "gradient_tolerance": float(args.tolerance),
            "init": args.init,
            "seed": args.seed,
            "jobs": args.jobs,
            "trace": args.trace or "",
            "alpha": float(result.alpha),
            "neighbors": result.neighbor_ids,
            "status": result.lbfgs.status,
            "iterations_run": result.lbfgs.iterations,
        },
    )
    print(f"inpaint done ({result.lbfgs.status}, {result.lbfgs.iterations} iterations) -> {args.out}")
    return 0


def cmd_gradcheck(parser, args) -> int:
    report = run_gradcheck(seed=args.seed, corrupt=args.self_test_corrupt)
    for check in report.checks:
        flag = "PASS" if check.passed else "FAIL"
        print(f"{flag} {check.name}: max rel error {check.max_rel_error:.3e}")
    if not report.passed:
        print("gradient check FAILED")
        return 1
    print("gradient check passed")
    return 0


def _self_exclusion(index, input_path: str) -> tuple[int, ...]:
    """Exclude index records that are the input image itself."""
    if index is None:
        return ()
    target = Path(input_path).resolve()
    return tuple(
        rec.id for rec in index.records if Path(rec.path).resolve() == target
    )


# ---------------------------------------------------------------------------
# Parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--weights", required=True, help="DFIW weight file")
    p.add_argument("--jobs", type=int, default=1, help="cap on internal parallelism")
    p.add_argument(
        "--any-arch",
        action="store_true",
        help="accept any conv<block>_<i> weight stack instead of requiring VGG-19",
    )


def _add_reconstruction(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda", dest="tv_lambda", type=float, default=0.001,
                   help="smoothness weight (default 0.001)")
    p.add_argument("--tv-exponent", type=float, default=2.0,
                   help="smoothness exponent (default 2)")
    p.add_argument("--iters", type=int, default=500,
                   help="max optimizer iterations (default 500)")
    p.add_argument("--tolerance", type=float, default=1e-6,
                   help="relative gradient-norm stop tolerance (default 1e-6)")
    p.add_argument("--init", choices=[INIT_INPUT, INIT_INPUT_PLUS_NOISE],
                   default=INIT_INPUT, help="optimizer initialisation")
    p.add_argument("--seed", type=int, default=0, help="seed for noise init")
    p.add_argument("--trace", help="write the optimizer trace CSV (and a "
                                   "matching .png convergence figure) here")
    p.add_argument("--out", required=True, help="output PNG path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="featmorph",
        description="Edit images by moving them along convnet feature directions.",
    )
    parser.add_argument("--version", action="version", version=f"featmorph {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_index = sub.add_parser("build-index", help="index a directory of images")
    p_index.add_argument("--images", required=True, help="directory of images")
    p_index.add_argument("--attrs", help="CSV attribute table (optional)")
    p_index.add_argument("--out", required=True, help="output index file")
    _add_common(p_index)
    p_index.set_defaults(func=cmd_build_index)

    p_tr = sub.add_parser("transform", help="apply an attribute edit to an image")
    p_tr.add_argument("--input", required=True, help="input image")
    p_tr.add_argument("--index", help="dataset index file")
    p_tr.add_argument("--target-attrs",
                      help="edit spec: comma list of name=+1|-1; the source set is the negation")
    p_tr.add_argument("--k", type=int, default=100,
                      help="neighbors per set (default 100)")
    p_tr.add_argument("--beta", type=float, default=0.4,
                      help="transformation strength (default 0.4)")
    _add_common(p_tr)
    _add_reconstruction(p_tr)
    p_tr.set_defaults(func=cmd_transform)

    p_in = sub.add_parser("inpaint", help="fill a masked region")
    p_in.add_argument("--input", required=True, help="input image (masked region may hold anything)")
    p_in.add_argument("--mask", required=True, help="8-bit grayscale PNG; >=128 means missing")
    p_in.add_argument("--index", required=True, help="index built on unmasked images")
    p_in.add_argument("--k", type=int, default=100, help="neighbors (default 100)")
    p_in.add_argument("--beta", type=float, default=None,
                      help="strength; defaults per --dataset (faces 1.6, shoes 2.8)")
    p_in.add_argument("--dataset", choices=sorted(DATASET_STRENGTHS), default="faces",
                      help="dataset family choosing the default strength")
    p_in.add_argument("--composite", action=argparse.BooleanOptionalAction, default=True,
                      help="copy known pixels from the input into the output (default on)")
    _add_common(p_in)
    _add_reconstruction(p_in)
    p_in.set_defaults(func=cmd_inpaint)

    p_gc = sub.add_parser("gradcheck", help="finite-difference check of all backward kernels")
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.add_argument("--self-test-corrupt", action="store_true", help=argparse.SUPPRESS)
    p_gc.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(parser, args)
    except Exception as exc:  # argparse errors exit(2) before reaching here
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
