"""KITTI object-devkit calibration and label files, plus noisy proposals.

Calibration files hold lines ``KEY: v1 v2 ...``; only ``P2`` and ``P3`` (the
rectified left/right colour cameras, 3x4 row-major) are required. Label files
hold 15 whitespace-separated fields per object::

    type truncated occluded alpha x1 y1 x2 y2 h w l x y z rotation_y [score]

KITTI locates a box by its bottom-centre; :class:`~fce3d.geometry.Proposal3D`
uses the geometric centre, so conversion moves the point up by ``h / 2``
(towards negative camera y).
"""

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .geometry import Camera, Extrinsics, Intrinsics, Proposal3D, StereoRig


class CalibError(ValueError):
    pass


class LabelParseError(ValueError):
    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")


@dataclass(frozen=True, eq=False)
class KittiCalib:
    P2: np.ndarray
    P3: np.ndarray

    def __post_init__(self):
        left, right = _factor(self.P2, "P2"), _factor(self.P3, "P3")
        if not self.baseline > 0:
            raise CalibError(f"right-camera baseline must be positive, got {self.baseline:.6g} m")
        object.__setattr__(self, "_cams", (left, right))

    @property
    def baseline(self):
        return float((self.P2[0, 3] - self.P3[0, 3]) / self.P2[0, 0])

    @property
    def left(self):
        return self._cams[0]

    @property
    def right(self):
        return self._cams[1]

    def rig(self, level_affines=None):
        if level_affines is None:
            return StereoRig(self.left, self.right)
        return StereoRig(self.left, self.right, level_affines)


def _factor(p, key):
    """Splits a rectified projection ``K [I | t]`` into intrinsics and extrinsics."""
    fx, fy = p[0, 0], p[1, 1]
    if not (fx > 0 and fy > 0):
        raise CalibError(f"{key}: focal lengths must be positive (fx={fx}, fy={fy})")
    k = Intrinsics(float(fx), float(fy), float(p[0, 2]), float(p[1, 2]))
    t = np.linalg.solve(k.matrix, p[:, 3])
    return Camera(k, Extrinsics(np.eye(3), t))


def parse_calib(text):
    """Parses calibration text into a :class:`KittiCalib`.

    Raises:
      CalibError: a required key is missing, has the wrong number of floats,
        holds non-finite values, or the implied baseline is not positive.
    """
    entries = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or ":" not in line:
            continue
        key, _, rest = line.partition(":")
        entries[key.strip()] = rest.split()
    mats = {}
    for key in ("P2", "P3"):
        if key not in entries:
            raise CalibError(f"missing key {key}")
        vals = entries[key]
        if len(vals) != 12:
            raise CalibError(f"{key}: expected 12 floats, got {len(vals)}")
        try:
            arr = np.array([float(v) for v in vals])
        except ValueError as exc:
            raise CalibError(f"{key}: {exc}") from None
        if not np.all(np.isfinite(arr)):
            raise CalibError(f"{key}: non-finite value")
        mats[key] = arr.reshape(3, 4)
    return KittiCalib(mats["P2"], mats["P3"])


def format_calib(calib):
    def row(p):
        return " ".join(f"{v:.12e}" for v in p.ravel())
    return f"P2: {row(calib.P2)}\nP3: {row(calib.P3)}\n"


@dataclass(frozen=True)
class KittiLabel:
    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox: tuple  # (x1, y1, x2, y2) pixels
    dimensions: tuple  # (h, w, l) metres
    location: tuple  # (x, y, z) bottom centre, camera frame
    rotation_y: float
    score: float = None

    @property
    def dont_care(self):
        return self.type == "DontCare"


def parse_labels(text):
    """Parses label text; ``DontCare`` rows are kept (see ``dont_care``)."""
    labels = []
    for n, raw in enumerate(text.splitlines(), start=1):
        f = raw.split()
        if not f:
            continue
        if len(f) not in (15, 16):
            raise LabelParseError(n, f"expected 15 or 16 fields, got {len(f)}")
        try:
            nums = [float(v) for v in f[1:]]
        except ValueError as exc:
            raise LabelParseError(n, str(exc)) from None
        if not all(math.isfinite(v) for v in nums):
            raise LabelParseError(n, "non-finite value")
        lab = KittiLabel(
            type=f[0], truncated=nums[0], occluded=int(nums[1]), alpha=nums[2],
            bbox=tuple(nums[3:7]), dimensions=tuple(nums[7:10]),
            location=tuple(nums[10:13]), rotation_y=nums[13],
            score=nums[14] if len(nums) == 15 else None)
        if not lab.dont_care:
            if abs(lab.rotation_y) > math.pi + 1e-6:
                raise LabelParseError(n, f"rotation_y {lab.rotation_y} outside [-pi, pi]")
            if lab.type == "Car" and min(lab.dimensions) <= 0:
                raise LabelParseError(n, f"Car dimensions must be positive, got {lab.dimensions}")
        labels.append(lab)
    return labels


def _g(v):
    return f"{v:.2f}"


def format_label(lab):
    fields = [lab.type, _g(lab.truncated), str(lab.occluded), _g(lab.alpha),
              *(_g(v) for v in lab.bbox), *(_g(v) for v in lab.dimensions),
              *(_g(v) for v in lab.location), _g(lab.rotation_y)]
    if lab.score is not None:
        fields.append(_g(lab.score))
    return " ".join(fields)


def format_labels(labels):
    return "".join(format_label(lab) + "\n" for lab in labels)


def label_to_box(label):
    """Exact (noise-free) conversion of a label to a centre-based box."""
    h, w, l = label.dimensions
    x, y, z = label.location
    return Proposal3D((x, y - h / 2.0, z), l, w, h, label.rotation_y)


def box_to_label(box, type="Car", score=None):
    x, y, z = box.center
    return KittiLabel(type, 0.0, 0, 0.0, (0.0, 0.0, 0.0, 0.0),
                      (box.height, box.width, box.length),
                      (x, y + box.height / 2.0, z), box.yaw, score)


@dataclass(frozen=True)
class NoiseSpec:
    """Gaussian proposal noise: centre in metres, dims as log-ratio, yaw in radians."""

    sigma_x: float = 0.3
    sigma_y: float = 0.1
    sigma_z: float = 0.5
    sigma_dims: float = 0.05
    sigma_yaw: float = math.radians(5.0)

    def scaled(self, k):
        return NoiseSpec(self.sigma_x * k, self.sigma_y * k, self.sigma_z * k,
                         self.sigma_dims * k, self.sigma_yaw * k)


ZERO_NOISE = NoiseSpec(0.0, 0.0, 0.0, 0.0, 0.0)


def perturbation(noise, rng):
    """One draw ``(dx, dy, dz, dlog_l, dlog_w, dlog_h, dyaw)``."""
    z = rng.standard_normal(7)
    s = np.array([noise.sigma_x, noise.sigma_y, noise.sigma_z,
                  noise.sigma_dims, noise.sigma_dims, noise.sigma_dims, noise.sigma_yaw])
    return z * s


def perturb_box(box, noise, rng):
    d = perturbation(noise, rng)
    return Proposal3D(
        center=np.asarray(box.center) + d[:3],
        length=box.length * math.exp(d[3]),
        width=box.width * math.exp(d[4]),
        height=box.height * math.exp(d[5]),
        yaw=box.yaw + d[6],
    )


def label_to_proposal(label, noise=NoiseSpec(), seed=0):
    """A noisy proposal around a ``Car`` label, reproducible from ``seed``."""
    if label.type != "Car":
        raise ValueError(f"proposals are generated for Car labels only, got {label.type!r}")
    box = label_to_box(label)
    return perturb_box(box, noise, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# JSON-lines proposals


def proposal_to_json(box, score=None):
    obj = {"center": list(box.center), "dims": [box.length, box.width, box.height],
           "yaw": box.yaw}
    if score is not None:
        obj["score"] = float(score)
    return json.dumps(obj)


def proposal_from_json(line):
    obj = json.loads(line)
    l, w, h = obj["dims"]
    return Proposal3D(tuple(obj["center"]), l, w, h, obj["yaw"]), obj.get("score")


def write_proposals(path, boxes, scores=None):
    scores = scores if scores is not None else [None] * len(boxes)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as f:
        for box, s in zip(boxes, scores):
            f.write(proposal_to_json(box, s) + "\n")
    os.replace(tmp, path)


def read_proposals(path):
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                out.append(proposal_from_json(line))
    return out


def read_calib_file(path):
    with open(path) as f:
        return parse_calib(f.read())


def read_label_file(path):
    with open(path) as f:
        return parse_labels(f.read())
