"""Sampling-strategy ablation on synthetic scenes.

Scenes are split into a training part and an evaluation part. Every
(strategy, variant) pair trains its own head from the same initial weights on
the same proposals and is then run as a cascade on the held-out scenes, so
the only thing that differs between rows is how points are placed and
embedded.

Each cascade iteration has its own head. Stage 1 trains on noisy proposals
drawn at several noise scales; stage k starts from stage k-1 and is
fine-tuned on the raw proposals plus the same proposals after stages
1..k-1, so it learns the small corrections that later iterations face. A
single head reused across iterations re-applies its own noise and lowers
IoU on the second pass.
"""

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .detector import (RESIDUAL_CLIP, HeadConfig, HeadParams, TrainingDivergedError, TrainingSet,
                       TrainSchedule, apply_residuals, cascade_detect, encode_residuals,
                       forward_batch, head_inputs, train_toy)
from .embedding import VARIANTS, embed
from .geometry import box_iou_3d
from .kitti import NoiseSpec, box_to_label, label_to_proposal
from .sampling import STRATEGIES, CarShapeModel, SamplingConfig, generate_grid, grid_to_world
from .synthetic import make_scene, scene_features

TRAIN_NOISE_SCALES = (1.0, 1.0, 0.5, 0.25)


def thread_count(default=1):
    """Worker cap from ``FCE3D_THREADS`` (at least 1)."""
    raw = os.environ.get("FCE3D_THREADS", "")
    try:
        return max(1, int(raw)) if raw.strip() else default
    except ValueError:
        return default


def parallel_map(fn, items, workers=None):
    workers = thread_count() if workers is None else workers
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class BenchConfig:
    n_scenes: int = 200
    seed: int = 7
    strategies: tuple = STRATEGIES
    variants: tuple = ("enhanced",)
    iterations: int = 2
    train_fraction: float = 0.6
    eval_proposals: int = 2
    train_proposals: int = 16
    noise: NoiseSpec = NoiseSpec()
    schedule: TrainSchedule = TrainSchedule(steps=600, step_size=3e-3, batch_size=64,
                                            weight_decay=0.1)
    finetune_steps: int = 400
    channels: int = 8

    def __post_init__(self):
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ValueError(f"unknown strategy {s!r}; expected one of {STRATEGIES}")
        for v in self.variants:
            if v not in VARIANTS:
                raise ValueError(f"unknown variant {v!r}; expected one of {VARIANTS}")
        if self.n_scenes < 0:
            raise ValueError("n_scenes must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class SceneData:
    index: int
    seed: int
    features: object
    truth: object
    rig: object
    proposals: list = field(default_factory=list)


def scene_seed(seed, index):
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _build_scene(args):
    seed, index, channels = args
    s = scene_seed(seed, index)
    scene = make_scene(s)
    return SceneData(index, s, scene_features(scene, channels), scene.boxes[0], scene.rig)


def build_scenes(cfg, workers=None):
    jobs = [(cfg.seed, i, cfg.channels) for i in range(cfg.n_scenes)]
    scenes = parallel_map(_build_scene, jobs, workers)
    n_train = int(round(cfg.train_fraction * len(scenes)))
    train, held = scenes[:n_train], scenes[n_train:]
    for sc in train:
        label = box_to_label(sc.truth)
        sc.proposals = [
            label_to_proposal(label, cfg.noise.scaled(TRAIN_NOISE_SCALES[j % len(TRAIN_NOISE_SCALES)]),
                              seed=sc.seed + 7919 * (j + 1))
            for j in range(cfg.train_proposals)]
    for sc in held:
        label = box_to_label(sc.truth)
        sc.proposals = [label_to_proposal(label, cfg.noise, seed=sc.seed + 104729 * (j + 1))
                        for j in range(cfg.eval_proposals)]
    return train, held


def _inputs(box, sc, sampling, variant, shape):
    grid = generate_grid(box, shape, sampling)
    fce = embed(grid_to_world(grid, box), sc.rig, sc.features, variant)
    return head_inputs(fce, grid)


def training_set(scenes, strategy, variant, shape=None, proposals=None):
    """Head inputs and targets for every proposal of every scene.

    ``proposals`` optionally replaces ``sc.proposals`` (one list per scene).
    """
    shape = shape or CarShapeModel()
    sampling = SamplingConfig(strategy)
    xs, targets, props, truths = [], [], [], []
    for i, sc in enumerate(scenes):
        for p in (sc.proposals if proposals is None else proposals[i]):
            xs.append(_inputs(p, sc, sampling, variant, shape))
            targets.append(encode_residuals(p, sc.truth))
            props.append(p)
            truths.append(sc.truth)
    # float32 storage halves memory; the head computes in float64
    return TrainingSet(np.stack(xs).astype(np.float32), np.stack(targets), props, truths)


def _concat(a, b):
    return TrainingSet(np.concatenate([a.x, b.x]), np.concatenate([a.targets, b.targets]),
                       a.proposals + b.proposals, a.truths + b.truths)


def train_cascade(scenes, strategy, variant, head, schedule, finetune_steps, shape=None):
    """One parameter set per iteration of ``head``."""
    raw = training_set(scenes, strategy, variant, shape)
    stages = [train_toy(raw, head, schedule, init=HeadParams.init(head, schedule.seed))]
    current = [list(sc.proposals) for sc in scenes]
    for k in range(1, head.iterations):
        data = raw if k == 1 else training_set(scenes, strategy, variant, shape, current)
        pred = forward_batch(data.x, stages[-1], head)
        flat = [apply_residuals(p, np.clip(pred[i, :7], -RESIDUAL_CLIP, RESIDUAL_CLIP))
                for i, p in enumerate(data.proposals)]
        pos = 0
        for i in range(len(current)):
            n = len(current[i])
            current[i] = flat[pos:pos + n]
            pos += n
        refined = training_set(scenes, strategy, variant, shape, current)
        sched = replace(schedule, steps=finetune_steps, seed=schedule.seed + k)
        stages.append(train_toy(_concat(raw, refined), head, sched, init=stages[-1]))
    return stages


def evaluate(scenes, stages, head, strategy, variant, shape=None):
    """Runs the cascade; returns one record per held-out proposal."""
    shape = shape or CarShapeModel()
    sampling = SamplingConfig(strategy)
    head = replace(head, variant=variant)
    records = []
    for sc in scenes:
        for k, p in enumerate(sc.proposals):
            det = cascade_detect(p, sc.rig, sc.features, shape, sampling, stages, head)
            box, conf = det.box, det.confidence
            ious = [box_iou_3d(b, sc.truth) for b in det.trace]
            records.append({
                "scene": sc.index, "scene_seed": sc.seed, "proposal": k,
                "strategy": strategy, "variant": variant,
                "proposal_iou": box_iou_3d(p, sc.truth),
                **{f"iou_iter{j + 1}": v for j, v in enumerate(ious)},
                "confidence": conf,
                "box": {"center": [float(c) for c in box.center],
                        "dims": [box.length, box.width, box.height], "yaw": box.yaw},
            })
    return records


def summarize(records, strategy, variant, iterations, status="ok", train_seconds=float("nan")):
    row = {"strategy": strategy, "variant": variant, "status": status,
           "n_eval": len(records), "train_seconds": train_seconds}
    if not records:
        for key in ("mean_iou", "frac_iou50", "frac_iou70", "proposal_mean_iou"):
            row[key] = float("nan")
        for j in range(iterations):
            row[f"mean_iou_iter{j + 1}"] = float("nan")
        if iterations > 1:
            row["frac_iter2_ge_iter1"] = float("nan")
        return row
    last = np.array([r[f"iou_iter{iterations}"] for r in records])
    row["mean_iou"] = float(last.mean())
    row["frac_iou50"] = float((last >= 0.5).mean())
    row["frac_iou70"] = float((last >= 0.7).mean())
    for j in range(iterations):
        row[f"mean_iou_iter{j + 1}"] = float(np.mean([r[f"iou_iter{j + 1}"] for r in records]))
    if iterations > 1:
        row["frac_iter2_ge_iter1"] = float(np.mean(
            [r["iou_iter2"] >= r["iou_iter1"] for r in records]))
    row["proposal_mean_iou"] = float(np.mean([r["proposal_iou"] for r in records]))
    return row


def run_bench(cfg, log=None, workers=None):
    """Returns ``(rows, records)``: one metrics row per (strategy, variant)."""
    log = log or (lambda msg: None)
    t0 = time.perf_counter()
    train, held = build_scenes(cfg, workers)
    log(f"built {len(train)} training and {len(held)} evaluation scenes "
        f"in {time.perf_counter() - t0:.1f}s")
    rows, records = [], []
    if not held:
        return rows, records
    head = HeadConfig(channels=cfg.channels, iterations=cfg.iterations)
    for strategy in cfg.strategies:
        for variant in cfg.variants:
            t1 = time.perf_counter()
            try:
                stages = train_cascade(train, strategy, variant, replace(head, variant=variant),
                                       cfg.schedule, cfg.finetune_steps)
            except TrainingDivergedError as exc:
                log(f"{strategy}/{variant}: {exc}")
                rows.append(summarize([], strategy, variant, cfg.iterations, status="diverged"))
                continue
            dt = time.perf_counter() - t1
            recs = evaluate(held, stages, head, strategy, variant)
            row = summarize(recs, strategy, variant, cfg.iterations, train_seconds=dt)
            log(f"{strategy}/{variant}: mean IoU {row['mean_iou']:.4f} (train {dt:.1f}s)")
            rows.append(row)
            records.extend(recs)
    return rows, records
