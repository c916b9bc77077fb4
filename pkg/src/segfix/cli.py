"""Command-line entry point.

Exit codes: 0 success, 2 input/parse failure, 3 validation failure,
4 numerical abort. Outputs are computed in full before anything is written,
and every file is written through a temporary file and an atomic rename.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import pnm
from .errors import ModelFormatError, NumericalError, ShapeError, ValidationError
from .experiments import (
    MaskSpec,
    activation_delta,
    apply_mask,
    influence_region,
    k_capture_csv,
    k_capture_stats,
    mask_footprint,
    mean_iou,
)
from .fixations import (
    FixationSet,
    KStrategy,
    ShiftPolicy,
    backtrack,
    density_map,
    fixations_to_json,
    outlier_filter,
    seed_segmentation,
)
from .modelio import dumps, load_model, write_bytes_atomic
from .network import forward, predict_segmentation, upsample_nearest
from .toy import toy_network, write_toy_dataset
from .trainer import (
    config_to_dict,
    fine_tune,
    format_log,
    load_config,
    load_dataset,
    read_manifest,
    tail_layers,
)

EXIT_OK, EXIT_INPUT, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("segfix")


class CommandError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _resolved(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def _write_all(files: dict[str, bytes]):
    for path, data in files.items():
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
    for path, data in files.items():
        write_bytes_atomic(path, data)


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode("utf-8")


def _load(args):
    net = load_model(args.model)
    image = pnm.read_image(args.image)
    return net, image


def cmd_predict(args):
    net, image = _load(args)
    record = forward(net, image)
    labels = predict_segmentation(record)
    if args.upsample:
        labels = upsample_nearest(labels, *image.shape[1:])
    meta = {
        "classes": [f"class_{i}" for i in range(net.num_classes)],
        "height": int(labels.shape[0]),
        "width": int(labels.shape[1]),
        "upsampled": bool(args.upsample),
    }
    _write_all({args.out_labels: pnm.encode_pgm(labels), args.out_labels + ".json": _json_bytes(meta)})


def cmd_fixate(args):
    net, image = _load(args)
    if not 0 <= args.label < net.num_classes:
        raise CommandError(f"label {args.label} outside [0, {net.num_classes})", EXIT_VALIDATION)
    strategy = KStrategy.parse(args.k_strategy)
    record = forward(net, image)
    seeds = seed_segmentation(record, args.label)
    if not seeds:
        print(f"warning: label {args.label} is never predicted; no fixations", file=sys.stderr)
    fs = backtrack(net, record, seeds, strategy, ShiftPolicy(args.shift), args.label, args.threads)
    if args.filter_outliers and fs.points:
        fs = FixationSet(fs.label, outlier_filter(fs.points))
    files = {args.out_json: fixations_to_json([fs]).encode("utf-8")}
    if args.density is not None:
        dens = density_map(fs.points, *image.shape[1:], args.density)
        out = args.density_out or os.path.splitext(args.out_json)[0] + "_density.pgm"
        files[out] = pnm.encode_gray(dens)
    _write_all(files)


def cmd_train(args):
    try:
        cfg = load_config(args.config)
    except ValidationError as exc:
        raise CommandError(f"{args.config}: {exc}", EXIT_INPUT) from None
    if args.seed is not None:
        cfg = replace(cfg, rng_seed=args.seed)
    print("train config: " + json.dumps(config_to_dict(cfg), sort_keys=True), file=sys.stderr)
    if not cfg.model or not cfg.output_model or not cfg.dataset:
        raise CommandError("config must set model, output_model and dataset", EXIT_VALIDATION)
    net = load_model(cfg.model)
    tail_layers(net, cfg.trainable_tail_layers)
    samples = load_dataset(cfg.dataset) if cfg.max_iter > 0 else []
    result = fine_tune(net, samples, cfg, workers=args.threads)
    _write_all({cfg.output_model: dumps(result.net), cfg.log: format_log(result.log).encode("utf-8")})
    if result.aborted:
        raise CommandError(f"training aborted at {result.aborted}; last finite model written", EXIT_NUMERICAL)


def cmd_eval(args):
    net = load_model(args.model)
    preds, gts = [], []
    for img_path, gt_path in read_manifest(args.manifest):
        image = pnm.read_image(img_path)
        gt = pnm.read_labels(gt_path)
        labels = predict_segmentation(forward(net, image))
        if args.upsample:
            labels = upsample_nearest(labels, *image.shape[1:])
        if labels.shape != gt.shape:
            raise ShapeError(f"{gt_path}: ground truth shape {gt.shape} vs prediction {labels.shape}")
        preds.append(labels)
        gts.append(gt)
    num = args.num_labels or net.num_classes
    report = mean_iou(preds, gts, num, args.ignore_label)
    files = {}
    if args.out_csv:
        files[args.out_csv] = report.to_csv().encode("utf-8")
    if args.out_json:
        files[args.out_json] = report.to_json().encode("utf-8")
    _write_all(files)
    print(f"mean IOU {report.mean!r}")


def cmd_kstats(args):
    net, image = _load(args)
    fractions = [float(x) for x in args.fractions.split(",")]
    record = forward(net, image)
    seeds = seed_segmentation(record, args.label)
    table = k_capture_stats(net, record, seeds, fractions)
    _write_all({args.out_csv: k_capture_csv(table, net).encode("utf-8")})


def _rect(text: str):
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad rectangle {text!r}") from None
    if len(vals) != 4:
        raise argparse.ArgumentTypeError(f"rectangle needs row0,col0,row1,col1: {text!r}")
    return vals


def cmd_mask_delta(args):
    net, image = _load(args)
    spec = MaskSpec(tuple(args.rect or ()), args.fill)
    try:
        masked = apply_mask(image, spec)
    except ValueError as exc:
        raise CommandError(str(exc), EXIT_VALIDATION) from None
    rec = forward(net, image)
    rec_m = forward(net, masked)
    delta = activation_delta(rec, rec_m, args.label)[0]
    mask = spec.indicator(*image.shape[1:])
    foot = mask_footprint(net, rec, mask)
    reach = influence_region(net, image.shape, mask)
    lo, hi = float(delta.min()), float(delta.max())
    span = hi - lo
    gray = (delta - lo) / span if span > 0 else np.zeros_like(delta)
    meta = {
        "label": args.label,
        "rects": [list(r) for r in spec.rects],
        "fill": spec.fill,
        "min": lo,
        "max": hi,
        "pgm_scale": "gray = 255 * (delta - min) / (max - min)",
        "footprint": foot.astype(int).tolist(),
        "influence": reach.astype(int).tolist(),
        "delta": delta.tolist(),
    }
    _write_all({args.out_pgm: pnm.encode_gray(gray), args.out_pgm + ".json": _json_bytes(meta)})


def cmd_gen_toy(args):
    if args.kind == "net":
        net = toy_network(args.classes, args.seed, args.width)
        _write_all({args.out: dumps(net)})
    else:
        write_toy_dataset(args.out, args.train, args.test, args.classes, args.size, args.seed)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="segfix", description=__doc__.split("\n")[0], formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.set_defaults(func=func)
        p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
        return p

    p = command("predict", cmd_predict, "write the predicted label map of one image")
    p.add_argument("--model", required=True, help="model container")
    p.add_argument("--image", required=True, help="input PGM/PPM")
    p.add_argument("--out-labels", required=True, help="output label map (PGM); metadata goes to <path>.json")
    p.add_argument("--upsample", action="store_true", help="upsample labels to the image size")

    p = command("fixate", cmd_fixate, "backtrack fixations for one label")
    p.add_argument("--model", required=True, help="model container")
    p.add_argument("--image", required=True, help="input PGM/PPM")
    p.add_argument("--label", type=int, required=True, help="label to explain")
    p.add_argument("--k-strategy", default="fixed:1", help="fixed:K | fraction:X[:CAP] | resolution:K[:CAP]")
    p.add_argument("--shift", choices=[s.value for s in ShiftPolicy], default="full", help="spatial shift policy")
    p.add_argument("--out-json", required=True, help="fixation JSON output")
    p.add_argument("--density", type=float, default=None, help="also write a density map with this bandwidth (pixels)")
    p.add_argument("--density-out", default=None, help="density PGM path (default <out-json stem>_density.pgm)")
    p.add_argument("--filter-outliers", action="store_true", help="drop outlying fixations first")

    p = command("train", cmd_train, "fine-tune a model from a key=value config")
    p.add_argument("--config", required=True, help="training config file")
    p.add_argument("--seed", type=int, default=None, help="override rng_seed from the config")

    p = command("eval", cmd_eval, "mean IOU of a model over a manifest")
    p.add_argument("--model", required=True, help="model container")
    p.add_argument("--manifest", required=True, help="image<TAB>ground truth manifest")
    p.add_argument("--num-labels", type=int, default=None, help="label count (default: model classes)")
    p.add_argument("--ignore-label", type=int, default=255, help="ground-truth value to skip")
    p.add_argument("--no-upsample", dest="upsample", action="store_false", help="compare at score resolution")
    p.add_argument("--out-csv", default=None, help="per-label CSV report")
    p.add_argument("--out-json", default=None, help="JSON report")

    p = command("kstats", cmd_kstats, "K needed to capture activation fractions, per layer")
    p.add_argument("--model", required=True, help="model container")
    p.add_argument("--image", required=True, help="input PGM/PPM")
    p.add_argument("--label", type=int, required=True, help="label whose pixels seed the trace")
    p.add_argument("--fractions", default="10,50,90", help="comma-separated percents")
    p.add_argument("--out-csv", required=True, help="CSV output")

    p = command("mask-delta", cmd_mask_delta, "score change caused by masking image regions")
    p.add_argument("--model", required=True, help="model container")
    p.add_argument("--image", required=True, help="input PGM/PPM")
    p.add_argument("--label", type=int, required=True, help="score channel to compare")
    p.add_argument("--rect", type=_rect, action="append", default=None, help="row0,col0,row1,col1 (half-open), repeatable")
    p.add_argument("--fill", type=float, default=0.0, help="value written into masked pixels")
    p.add_argument("--out-pgm", required=True, help="delta map PGM; sidecar JSON at <path>.json")

    p = command("gen-toy", cmd_gen_toy, "write a toy model or synthetic dataset")
    p.add_argument("--kind", choices=["net", "dataset"], required=True, help="what to generate")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out", required=True, help="model path (net) or directory (dataset)")
    p.add_argument("--classes", type=int, default=3, help="number of classes, background included")
    p.add_argument("--width", type=int, default=8, help="hidden channels of the toy net")
    p.add_argument("--train", type=int, default=200, help="training images")
    p.add_argument("--test", type=int, default=50, help="test images")
    p.add_argument("--size", type=int, default=32, help="image side length")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    print("config: " + json.dumps(_resolved(args), sort_keys=True), file=sys.stderr)
    try:
        args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (OSError, ModelFormatError, pnm.PNMError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
