import os
import time
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fce3d.bench import BenchConfig, build_scenes, evaluate, summarize, train_cascade
from fce3d.detector import HeadConfig
from fce3d.geometry import Camera, Extrinsics, Intrinsics, LevelAffine, StereoRig

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")
KITTI_DIR = os.path.join(FIXTURES, "kitti")


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def small_rotation(rng, scale=0.05):
    """Rotation within a few degrees of identity (keeps points in front)."""
    w = rng.normal(scale=scale, size=3)
    k = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    theta = np.linalg.norm(w)
    return np.eye(3) + np.sin(theta) / theta * k + (1 - np.cos(theta)) / theta**2 * k @ k


def random_rig(rng):
    def cam():
        k = Intrinsics(rng.uniform(200, 900), rng.uniform(200, 900),
                       rng.uniform(100, 600), rng.uniform(50, 300))
        return Camera(k, Extrinsics(small_rotation(rng), rng.normal(scale=0.3, size=3)))
    affines = tuple(LevelAffine(rng.uniform(0.05, 0.5), rng.uniform(0.05, 0.5),
                                rng.uniform(-1, 1), rng.uniform(-1, 1)) for _ in range(3))
    return StereoRig(cam(), cam(), affines)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ABLATION_HEADS = (("uniform", "enhanced"), ("non_uniform", "enhanced"), ("non_uniform", "original"))


@pytest.fixture(scope="session")
def ablation():
    """The 200-scene ablation (seed 7), run once per session.

    Returns ``(rows, records, seconds)`` keyed by (strategy, variant).
    """
    cfg = BenchConfig(n_scenes=200, seed=7)
    t0 = time.perf_counter()
    train, held = build_scenes(cfg)
    head = HeadConfig(channels=cfg.channels, iterations=2)
    rows, records = {}, {}
    for strategy, variant in ABLATION_HEADS:
        stages = train_cascade(train, strategy, variant, replace(head, variant=variant),
                               cfg.schedule, cfg.finetune_steps)
        records[strategy, variant] = evaluate(held, stages, head, strategy, variant)
        rows[strategy, variant] = summarize(records[strategy, variant], strategy, variant, 2)
    return rows, records, time.perf_counter() - t0
