"""Feature-consistency embedding of latent grid points.

Each world point is projected into both views at the three pyramid levels and
sampled bilinearly. Per point, with elementwise operations over channels::

    lt = left_1 - right_1               # texture difference
    ms = (left_2 + right_2) / 2         # middle-level semantics
    hs = (left_3 + right_3) / 2         # high-level semantics

    original = exp(-lt**2 * ms**2)
    enhanced = exp(-lt**2 * ms**2) * exp(-lt**2 * hs**2)

Values are 1 where the two views agree and decay towards 0 as the texture
difference grows, with the semantic magnitude acting as the RBF bandwidth.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import project_unchecked
from .tensor import Tensor3, bilinear_sample

VARIANTS = ("original", "enhanced")
_TINY = np.finfo(np.float64).tiny


@dataclass(frozen=True, eq=False)
class PointFeatures:
    """Sampled features for N points.

    ``left[j]`` / ``right[j]`` are ``[N, C]`` samples at level ``j + 1``;
    ``lt``, ``ms`` and ``hs`` are the derived ``[N, C]`` quantities and
    ``valid`` marks points usable in both views.
    """

    left: tuple
    right: tuple
    lt: np.ndarray
    ms: np.ndarray
    hs: np.ndarray
    valid: np.ndarray


@dataclass(frozen=True, eq=False)
class FceSpace:
    values: np.ndarray  # [N, C], in (0, 1]
    valid: np.ndarray   # [N] bool
    variant: str

    def __len__(self):
        return self.values.shape[0]

    @property
    def channels(self):
        return self.values.shape[1]

    def to_tensor(self):
        """``(C + 1) x N x 1`` tensor; the last channel holds validity (1/0)."""
        stacked = np.concatenate([self.values, self.valid[:, None].astype(np.float64)], axis=1)
        return Tensor3(stacked.T[:, :, None])

    @classmethod
    def from_tensor(cls, tensor, variant="enhanced"):
        data = tensor.data[:, :, 0]
        return cls(data[:-1].T.copy(), data[-1] > 0.5, variant)


def point_features(points, rig, feats):
    """Projects, samples and combines features for world points.

    A point is valid when it has positive depth in both cameras and its
    level-1 projection lands inside the image in at least one view.
    Out-of-image samples are clamped to the border.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    samples = {}
    in_front = np.ones(len(pts), dtype=bool)
    inside_any = np.zeros(len(pts), dtype=bool)
    for side in ("left", "right"):
        pyramid = feats.side(side)
        per_level = []
        for j in (1, 2, 3):
            uv, depth = project_unchecked(pts, rig, side, j)
            fmap = pyramid[j]
            if j == 1:
                in_front &= depth > 0
                inside_any |= ((uv[:, 0] >= -0.5) & (uv[:, 0] <= fmap.width - 0.5)
                               & (uv[:, 1] >= -0.5) & (uv[:, 1] <= fmap.height - 0.5))
            uv = np.where(np.isfinite(uv), uv, 0.0)
            per_level.append(bilinear_sample(fmap, uv[:, 0], uv[:, 1]))
        samples[side] = tuple(per_level)
    left, right = samples["left"], samples["right"]
    lt = left[0] - right[0]
    ms = (left[1] + right[1]) / 2.0
    hs = (left[2] + right[2]) / 2.0
    return PointFeatures(left, right, lt, ms, hs, in_front & inside_any)


def rbf_original(lt, ms):
    return np.exp(-(lt ** 2) * (ms ** 2))


def rbf_enhanced(lt, ms, hs):
    return rbf_original(lt, ms) * np.exp(-(lt ** 2) * (hs ** 2))


def _finish(values, pf, variant):
    # invalid points take the RBF's no-information value exp(0)
    values = np.where(pf.valid[:, None], values, 1.0)
    values = np.maximum(values, _TINY)
    values.setflags(write=False)
    return FceSpace(values, pf.valid.copy(), variant)


def embed_original(points, rig, feats):
    """Single-RBF embedding using the middle-level semantics only."""
    pf = points if isinstance(points, PointFeatures) else point_features(points, rig, feats)
    return _finish(rbf_original(pf.lt, pf.ms), pf, "original")


def embed_enhanced(points, rig, feats):
    """Two-RBF embedding using middle- and high-level semantics."""
    pf = points if isinstance(points, PointFeatures) else point_features(points, rig, feats)
    return _finish(rbf_enhanced(pf.lt, pf.ms, pf.hs), pf, "enhanced")


def embed(points, rig, feats, variant="enhanced"):
    if variant == "original":
        return embed_original(points, rig, feats)
    if variant == "enhanced":
        return embed_enhanced(points, rig, feats)
    raise ValueError(f"unknown embedding variant {variant!r}; expected one of {VARIANTS}")
