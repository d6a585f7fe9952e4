"""Command-line entry points: ``grid``, ``embed``, ``bench`` and ``kitti-dry-run``.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

import argparse
import glob
import json
import math
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import bench as benchmod
from .backbone import PyramidShapeError, StereoFeatures, extract_handcrafted, load_pyramid, read_pnm
from .embedding import VARIANTS, embed
from .geometry import Proposal3D
from .kitti import (CalibError, LabelParseError, NoiseSpec, label_to_proposal, parse_calib,
                    parse_labels, proposal_from_json, proposal_to_json, read_proposals)
from .sampling import PARTS, STRATEGIES, CarShapeModel, SamplingConfig, band_counts, generate_grid, \
    grid_to_world
from .tensor import TensorFormatError, write_tensor

DEFAULT_BOX = Proposal3D((0.0, 0.9, 10.0), 3.9, 1.6, 1.5, 0.0)


class DataError(Exception):
    """Reported on stderr with exit code 1."""


def atomic_write_text(path, text):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    return str(v)


def format_tsv(columns, rows):
    lines = ["\t".join(columns)]
    for r in rows:
        lines.append("\t".join(_fmt(r.get(c, "")) for c in columns))
    return "\n".join(lines) + "\n"


def parse_box(text):
    """``x,y,z,l,w,h,yaw`` (camera frame, geometric centre, metres and radians)."""
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"malformed box {text!r}: values must be numbers") from None
    if len(vals) != 7:
        raise argparse.ArgumentTypeError(f"malformed box {text!r}: expected 7 comma-separated values")
    if not all(math.isfinite(v) for v in vals) or min(vals[3:6]) <= 0:
        raise argparse.ArgumentTypeError(f"malformed box {text!r}: need finite values and positive dims")
    return Proposal3D(tuple(vals[:3]), vals[3], vals[4], vals[5], vals[6])


def _csv_choice(choices):
    def parse(text):
        items = tuple(t.strip() for t in text.split(",") if t.strip())
        bad = [t for t in items if t not in choices]
        if bad or not items:
            raise argparse.ArgumentTypeError(
                f"invalid choice {','.join(bad) or text!r}; expected a comma list from {', '.join(choices)}")
        return items
    return parse


# ---------------------------------------------------------------------------
# grid


def cmd_grid(args, out=None):
    out = out or sys.stdout
    cfg = SamplingConfig(args.strategy, args.resl)
    box = args.box
    grid = generate_grid(box, CarShapeModel(), cfg)
    world = grid_to_world(grid, box)
    lines = []
    for i in range(len(grid)):
        lines.append(json.dumps({
            "index": i,
            "local": [float(v) for v in grid.local[i]],
            "world": [float(v) for v in world[i]],
            "part": PARTS[grid.part[i]],
            "region": "outer" if grid.outer[i] else "inner",
            "x_band": int(grid.x_band[i]), "y_band": int(grid.y_band[i]),
        }))
    text = "".join(line + "\n" for line in lines)
    if args.out:
        atomic_write_text(args.out, text)
    print(f"strategy {cfg.strategy} resl {cfg.resl}: {len(grid)} points "
          f"({int(grid.outer.sum())} outer, {int((~grid.outer).sum())} inner)", file=out)
    for part in PARTS:
        nx, ny = band_counts(grid, part)
        print(f"{part}\tx {{{nx[0]},{nx[1]},{nx[2]}}}\ty {{{ny[0]},{ny[1]},{ny[2]}}}", file=out)
    if not args.out:
        out.write(text)
    return 0


# ---------------------------------------------------------------------------
# embed


def _read_text(path):
    try:
        with open(path) as f:
            return f.read()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from None


def _load_calib(path):
    try:
        return parse_calib(_read_text(path))
    except CalibError as exc:
        raise DataError(f"{path}: {exc}") from None


def _read_image(path):
    try:
        return read_pnm(path)
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from None
    except ValueError as exc:
        raise DataError(str(exc)) from None


def _load_feature_dir(directory, rig):
    pyramids = []
    for side in ("left", "right"):
        paths = [os.path.join(directory, f"{side}_l{j}.fct") for j in (1, 2, 3)]
        for p in paths:
            if not os.path.exists(p):
                raise DataError(f"{p}: missing feature file")
        try:
            pyramids.append(load_pyramid(paths, rig))
        except (TensorFormatError, PyramidShapeError) as exc:
            raise DataError(f"{directory}: {side} pyramid: {exc}") from None
    try:
        return StereoFeatures(*pyramids)
    except PyramidShapeError as exc:
        raise DataError(f"{directory}: {exc}") from None


def cmd_embed(args, out=None):
    out = out or sys.stdout
    rig = _load_calib(args.calib).rig()
    if args.features:
        feats = _load_feature_dir(args.features, rig)
    else:
        left, right = (_read_image(p) for p in args.images)
        if left.shape != right.shape:
            raise DataError(f"{args.images[0]} and {args.images[1]} differ in size")
        feats = StereoFeatures(extract_handcrafted(left), extract_handcrafted(right))
    try:
        proposals = read_proposals(args.proposals)
    except OSError as exc:
        raise DataError(f"{args.proposals}: {exc.strerror or exc}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{args.proposals}: malformed proposal line ({exc})") from None
    os.makedirs(args.out, exist_ok=True)
    cfg = SamplingConfig(args.strategy)
    shape = CarShapeModel()
    for i, (box, _) in enumerate(proposals):
        grid = generate_grid(box, shape, cfg)
        fce = embed(grid_to_world(grid, box), rig, feats, args.variant)
        write_tensor(os.path.join(args.out, f"fce_{i:04d}.fct"), fce.to_tensor())
    print(f"wrote {len(proposals)} {args.variant} embeddings to {args.out}", file=out)
    return 0


# ---------------------------------------------------------------------------
# bench

BENCH_COLUMNS = ("strategy", "variant", "mean_iou", "frac_iou50", "frac_iou70")


def cmd_bench(args, out=None):
    out = out or sys.stdout
    base = benchmod.BenchConfig()
    sched = base.schedule if args.steps is None else replace(base.schedule, steps=args.steps)
    cfg = benchmod.BenchConfig(n_scenes=args.n, seed=args.seed, strategies=args.strategies,
                               variants=args.variants, iterations=args.iterations, schedule=sched,
                               finetune_steps=base.finetune_steps if args.finetune_steps is None
                               else args.finetune_steps)
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    rows, records = benchmod.run_bench(cfg, log=log)
    cols = list(BENCH_COLUMNS)
    cols += [f"mean_iou_iter{j + 1}" for j in range(cfg.iterations)]
    if cfg.iterations > 1:
        cols.append("frac_iter2_ge_iter1")
    cols += ["proposal_mean_iou", "n_eval", "train_seconds", "status"]
    os.makedirs(args.out, exist_ok=True)
    atomic_write_text(os.path.join(args.out, "metrics.tsv"), format_tsv(cols, rows))
    atomic_write_text(os.path.join(args.out, "scenes.jsonl"),
                      "".join(json.dumps(r) + "\n" for r in records))
    out.write(format_tsv(cols, rows))
    return 0


# ---------------------------------------------------------------------------
# kitti-dry-run

DRY_RUN_COLUMNS = ("file", "status", "n_labels", "n_cars", "baseline_m", "rig_ok", "roundtrip_ok",
                   "images", "n_proposals", "grid_ms", "embed_ms", "valid_fraction", "error")


def rig_invariants_ok(rig):
    for cam in (rig.left, rig.right):
        k, e = cam.intrinsics, cam.extrinsics
        if not (k.fx > 0 and k.fy > 0):
            return False
        r = e.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1) > 1e-9:
            return False
    return rig.baseline > 0


def _find_image(image_dir, sub, stem):
    for ext in (".pgm", ".ppm"):
        p = os.path.join(image_dir, sub, stem + ext)
        if os.path.exists(p):
            return p
    return None


def dry_run_file(calib_path, label_dir, image_dir=None, seed=0, strategy="non_uniform",
                 variant="enhanced"):
    """Processes one calib/label pair; returns a report row (never raises on data errors)."""
    stem = os.path.splitext(os.path.basename(calib_path))[0]
    row = {"file": stem, "status": "ok", "error": ""}
    try:
        calib = parse_calib(_read_text(calib_path))
        label_path = os.path.join(label_dir, stem + ".txt")
        labels = parse_labels(_read_text(label_path))
    except (CalibError, LabelParseError, DataError) as exc:
        row.update(status="error", error=str(exc).replace("\t", " "))
        return row
    rig = calib.rig()
    cars = [lab for lab in labels if lab.type == "Car"]
    row.update(n_labels=len(labels), n_cars=len(cars), baseline_m=calib.baseline,
               rig_ok=rig_invariants_ok(rig))
    proposals = [label_to_proposal(lab, NoiseSpec(), seed=seed + i) for i, lab in enumerate(cars)]
    text = "".join(proposal_to_json(p) + "\n" for p in proposals)
    back = [proposal_from_json(line)[0] for line in text.splitlines()]
    row["roundtrip_ok"] = all(
        np.array_equal(a.center, b.center) and (a.length, a.width, a.height, a.yaw)
        == (b.length, b.width, b.height, b.yaw) for a, b in zip(proposals, back))

    left_p = right_p = None
    if image_dir:
        left_p, right_p = _find_image(image_dir, "image_2", stem), _find_image(image_dir, "image_3", stem)
    try:
        if left_p and right_p:
            feats = StereoFeatures(extract_handcrafted(read_pnm(left_p)),
                                   extract_handcrafted(read_pnm(right_p)))
            row["images"] = "real"
        else:
            # no images: a flat frame sized from the principal point still exercises the geometry
            k = rig.left.intrinsics
            flat = np.full((max(64, round(2 * k.cy)), max(64, round(2 * k.cx))), 0.5)
            pyr = extract_handcrafted(flat)
            feats = StereoFeatures(pyr, pyr)
            row["images"] = "placeholder"
    except ValueError as exc:
        row.update(status="error", error=str(exc))
        return row

    cfg = SamplingConfig(strategy)
    shape = CarShapeModel()
    grid_s = embed_s = 0.0
    valid = []
    for box in proposals:
        t0 = time.perf_counter()
        grid = generate_grid(box, shape, cfg)
        world = grid_to_world(grid, box)
        t1 = time.perf_counter()
        fce = embed(world, rig, feats, variant)
        t2 = time.perf_counter()
        grid_s += t1 - t0
        embed_s += t2 - t1
        valid.append(fce.valid.mean())
    n = len(proposals)
    row.update(n_proposals=n,
               grid_ms=1e3 * grid_s / n if n else float("nan"),
               embed_ms=1e3 * embed_s / n if n else float("nan"),
               valid_fraction=float(np.mean(valid)) if n else float("nan"))
    return row


def cmd_kitti_dry_run(args, out=None):
    out = out or sys.stdout
    calibs = sorted(glob.glob(os.path.join(args.calib_dir, "*.txt")))
    if not calibs:
        raise DataError(f"{args.calib_dir}: no calibration files (*.txt)")
    rows = [dry_run_file(p, args.label_dir, args.image_dir, args.seed) for p in calibs]
    text = format_tsv(DRY_RUN_COLUMNS, rows)
    if args.out:
        atomic_write_text(args.out, text)
    out.write(text)
    failed = [r for r in rows if r["status"] != "ok"]
    for r in failed:
        print(f"{r['file']}: {r['error']}", file=sys.stderr)
    return 1 if len(failed) == len(rows) else 0


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="fce3d", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("grid", help="write a latent sampling grid as JSON-lines")
    g.add_argument("--strategy", choices=STRATEGIES, default="non_uniform")
    g.add_argument("--resl", type=int, default=10)
    g.add_argument("--box", type=parse_box, default=DEFAULT_BOX,
                   help="x,y,z,l,w,h,yaw in camera coordinates (default: a car 10 m ahead)")
    g.add_argument("--out", help="output file (default: stdout after the band counts)")
    g.set_defaults(func=cmd_grid)

    e = sub.add_parser("embed", help="write one embedding tensor per proposal")
    e.add_argument("--calib", required=True, help="KITTI calibration file")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--features", help="directory with {left,right}_l{1,2,3}.fct")
    src.add_argument("--images", nargs=2, metavar=("LEFT", "RIGHT"), help="PGM/PPM stereo pair")
    e.add_argument("--proposals", required=True, help="JSON-lines proposals")
    e.add_argument("--variant", choices=VARIANTS, default="enhanced")
    e.add_argument("--strategy", choices=STRATEGIES, default="non_uniform")
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(func=cmd_embed)

    b = sub.add_parser("bench", help="synthetic sampling-strategy ablation")
    b.add_argument("--n", type=int, default=200, help="number of scenes")
    b.add_argument("--seed", type=int, default=7)
    b.add_argument("--strategies", type=_csv_choice(STRATEGIES), default=STRATEGIES)
    b.add_argument("--variants", type=_csv_choice(VARIANTS), default=("enhanced",))
    b.add_argument("--iterations", type=int, default=2)
    b.add_argument("--steps", type=int, default=None, help="training steps for the first-stage head")
    b.add_argument("--finetune-steps", type=int, default=None,
                   help="training steps for each later-stage head")
    b.add_argument("--out", required=True, help="output directory")
    b.add_argument("-v", "--verbose", action="store_true")
    b.set_defaults(func=cmd_bench)

    k = sub.add_parser("kitti-dry-run", help="parse KITTI files and time grid + embedding")
    k.add_argument("--calib-dir", required=True)
    k.add_argument("--label-dir", required=True)
    k.add_argument("--image-dir", help="directory with image_2/ and image_3/ PGM/PPM files")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--out", help="report TSV (default: stdout only)")
    k.set_defaults(func=cmd_kitti_dry_run)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "bench":
        if args.n < 0:
            parser.error("--n must be >= 0")
        if args.iterations < 1:
            parser.error("--iterations must be >= 1")
    if args.command == "grid" and args.resl < 2:
        parser.error("--resl must be >= 2")
    try:
        return args.func(args)
    except BrokenPipeError:
        # reader went away (e.g. piped into head); not an error of ours
        sys.stdout = open(os.devnull, "w")
        return 0
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
