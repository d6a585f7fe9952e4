"""Camera models, oriented boxes, projection, and rotated-box IoU.

Conventions:
  * Camera/world frame is right-down-forward (x right, y down, z forward), as
    in the rectified KITTI camera frame.
  * A box's local frame has x along its length, y along its width and z up.
    Yaw rotates about the vertical (camera y) axis; at yaw 0 the length runs
    along camera x and the width along camera z.
"""

import math
from dataclasses import dataclass, field

import numpy as np


class BehindCameraError(ValueError):
    """A point has non-positive depth in the camera it is projected into."""

    def __init__(self, index, depth):
        self.index = int(index)
        self.depth = float(depth)
        super().__init__(f"point {self.index} is behind the camera (depth {self.depth:.6g})")


def wrap_angle(angle):
    """Maps angles into (-pi, pi]."""
    a = np.mod(np.asarray(angle, dtype=np.float64) + math.pi, 2.0 * math.pi) - math.pi
    a = np.where(a <= -math.pi, a + 2.0 * math.pi, a)
    return float(a) if np.ndim(a) == 0 else a


def yaw_matrix(yaw):
    """Rotation about the camera y axis taking box-frame axes to camera axes."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Extrinsics:
    """World-to-camera transform ``X_cam = R @ X + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9, rtol=0.0):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation must have determinant +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def compose(self, other):
        """Returns the transform applying ``other`` first, then ``self``."""
        return Extrinsics(self.rotation @ other.rotation,
                          self.rotation @ other.translation + self.translation)

    @property
    def camera_center(self):
        return -self.rotation.T @ self.translation

    @property
    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __eq__(self, other):
        if not isinstance(other, Extrinsics):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    __hash__ = None


@dataclass(frozen=True)
class LevelAffine:
    """Image-pixel to feature-cell map ``u_f = scale_u * u + offset_u``."""

    scale_u: float
    scale_v: float
    offset_u: float = 0.0
    offset_v: float = 0.0

    def __post_init__(self):
        if not (self.scale_u > 0 and self.scale_v > 0):
            raise ValueError("level scale factors must be positive")

    @classmethod
    def for_stride(cls, stride):
        # cell k pools pixels [k*s, (k+1)*s), whose centre is pixel k*s + (s-1)/2
        offset = -(stride - 1) / (2.0 * stride)
        return cls(1.0 / stride, 1.0 / stride, offset, offset)

    @property
    def matrix(self):
        return np.array([[self.scale_u, 0.0, self.offset_u],
                         [0.0, self.scale_v, self.offset_v],
                         [0.0, 0.0, 1.0]])


DEFAULT_STRIDES = (4, 8, 16)


def default_level_affines():
    return tuple(LevelAffine.for_stride(s) for s in DEFAULT_STRIDES)


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    extrinsics: Extrinsics = field(default_factory=Extrinsics)


@dataclass(frozen=True)
class StereoRig:
    left: Camera
    right: Camera
    level_affines: tuple = field(default_factory=default_level_affines)

    def __post_init__(self):
        affines = tuple(self.level_affines)
        if len(affines) != 3:
            raise ValueError(f"a stereo rig needs exactly 3 level affines, got {len(affines)}")
        object.__setattr__(self, "level_affines", affines)

    @classmethod
    def rectified(cls, fx, fy, cx, cy, baseline, level_affines=None):
        """Rectified pair with the world frame at the left camera."""
        k = Intrinsics(fx, fy, cx, cy)
        left = Camera(k, Extrinsics())
        right = Camera(k, Extrinsics(np.eye(3), [-baseline, 0.0, 0.0]))
        return cls(left, right, level_affines or default_level_affines())

    def camera(self, side):
        if side == "left":
            return self.left
        if side == "right":
            return self.right
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")

    @property
    def baseline(self):
        return float(np.linalg.norm(self.left.extrinsics.camera_center
                                    - self.right.extrinsics.camera_center))


@dataclass(frozen=True)
class Proposal3D:
    """Oriented box: geometric centre (camera frame), dimensions and yaw."""

    center: tuple
    length: float
    width: float
    height: float
    yaw: float = 0.0

    def __post_init__(self):
        c = tuple(float(x) for x in np.asarray(self.center, dtype=np.float64).reshape(3))
        if not all(math.isfinite(x) for x in c):
            raise ValueError("box centre must be finite")
        if not (self.length > 0 and self.width > 0 and self.height > 0):
            raise ValueError(
                f"box dimensions must be positive, got L={self.length} W={self.width} H={self.height}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "length", float(self.length))
        object.__setattr__(self, "width", float(self.width))
        object.__setattr__(self, "height", float(self.height))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def dims(self):
        return np.array([self.length, self.width, self.height])

    @property
    def volume(self):
        return self.length * self.width * self.height

    def replace(self, **changes):
        fields = dict(center=self.center, length=self.length, width=self.width,
                      height=self.height, yaw=self.yaw)
        fields.update(changes)
        return Proposal3D(**fields)

    def bev_corners(self):
        """Footprint corners in the camera (x, z) ground plane, counter-clockwise."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.length / 2.0, self.width / 2.0
        local = [(-hl, -hw), (hl, -hw), (hl, hw), (-hl, hw)]
        pts = [(self.center[0] + c * a + s * b, self.center[2] - s * a + c * b) for a, b in local]
        return np.array(_ccw(pts))


@dataclass(frozen=True)
class LatentPoint:
    local: tuple
    part: str = "body"
    region: str = "outer"


def local_to_world(local, box):
    """Places normalised box coordinates in the camera frame.

    Args:
      local: ``[3]`` or ``[N, 3]`` array of (x, y, z) in [0, 1], or a
        :class:`LatentPoint`.
      box: the :class:`Proposal3D` defining the frame.

    Returns:
      Array with the same leading shape as ``local`` holding camera-frame
      points. Local z = 0 is the bottom face (largest camera y).
    """
    if isinstance(local, LatentPoint):
        local = local.local
    pts = np.asarray(local, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    a = (pts[:, 0] - 0.5) * box.length
    b = (pts[:, 1] - 0.5) * box.width
    up = (pts[:, 2] - 0.5) * box.height
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    out = np.empty_like(pts)
    out[:, 0] = box.center[0] + c * a + s * b
    out[:, 1] = box.center[1] - up
    out[:, 2] = box.center[2] - s * a + c * b
    return out[0] if single else out


def world_to_local(points, box):
    """Inverse of :func:`local_to_world`."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    d = pts - np.asarray(box.center)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    a = c * d[:, 0] - s * d[:, 2]
    b = s * d[:, 0] + c * d[:, 2]
    return np.stack([a / box.length + 0.5, b / box.width + 0.5,
                     -d[:, 1] / box.height + 0.5], axis=1)


def camera_depths(points, camera):
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    ext = camera.extrinsics
    return pts @ ext.rotation[2] + ext.translation[2]


def project_unchecked(points, rig, side, level):
    """Projects points to level-``level`` feature coordinates without raising.

    Returns:
      ``(uv, depth)`` with ``uv`` of shape ``[N, 2]`` (column, row) and the
      camera-frame depth ``[N]``. Rows with ``depth <= 0`` are meaningless.
    """
    cam = rig.camera(side)
    aff = rig.level_affines[level - 1] if 1 <= level <= 3 else None
    if aff is None:
        raise ValueError(f"level must be 1, 2 or 3, got {level}")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    xc = pts @ cam.extrinsics.rotation.T + cam.extrinsics.translation
    depth = xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        x = xc[:, 0] / depth
        y = xc[:, 1] / depth
    k = cam.intrinsics
    u = aff.scale_u * (k.fx * x + k.cx) + aff.offset_u
    v = aff.scale_v * (k.fy * y + k.cy) + aff.offset_v
    return np.stack([u, v], axis=1), depth


def project(points, rig, side, level=1):
    """Projects camera/world points to feature-map coordinates of one view.

    Applies the view's extrinsics, perspective division, intrinsics and the
    level affine, in that order.

    Raises:
      BehindCameraError: for the first point whose depth is not positive.
    """
    single = np.ndim(points) == 1
    uv, depth = project_unchecked(points, rig, side, level)
    bad = np.flatnonzero(~(depth > 0))
    if bad.size:
        raise BehindCameraError(bad[0], depth[bad[0]])
    return uv[0] if single else uv


def image_to_feature(uv, affine):
    uv = np.asarray(uv, dtype=np.float64)
    return np.stack([affine.scale_u * uv[..., 0] + affine.offset_u,
                     affine.scale_v * uv[..., 1] + affine.offset_v], axis=-1)


# ---------------------------------------------------------------------------
# IoU


def _ccw(pts):
    pts = [tuple(p) for p in pts]
    area2 = sum(x0 * y1 - x1 * y0 for (x0, y0), (x1, y1) in zip(pts, pts[1:] + pts[:1]))
    return pts if area2 >= 0 else pts[::-1]


def polygon_area(pts):
    if len(pts) < 3:
        return 0.0
    pts = np.asarray(pts, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_convex(subject, clip):
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW ``clip``."""
    out = [tuple(p) for p in subject]
    clip = [tuple(p) for p in clip]
    for (ax, ay), (bx, by) in zip(clip, clip[1:] + clip[:1]):
        if not out:
            break
        inp, out = out, []
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_cross_point(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_cross_point(prev, cur, sp, sc))
            prev, sp = cur, sc
    return out


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection_area(a, b):
    return polygon_area(clip_convex(a.bev_corners(), b.bev_corners()))


def box_iou_bev(a, b):
    """Bird's-eye-view IoU of two yaw-rotated footprints."""
    inter = bev_intersection_area(a, b)
    union = a.length * a.width + b.length * b.width - inter
    if inter <= 0.0 or union <= 0.0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def vertical_overlap(a, b):
    lo = max(a.center[1] - a.height / 2.0, b.center[1] - b.height / 2.0)
    hi = min(a.center[1] + a.height / 2.0, b.center[1] + b.height / 2.0)
    return max(hi - lo, 0.0)


def box_iou_3d(a, b):
    """Volumetric IoU: footprint intersection times vertical overlap."""
    dz = vertical_overlap(a, b)
    if dz <= 0.0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    union = a.volume + b.volume - inter
    if inter <= 0.0 or union <= 0.0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))
