"""Three-level stereo feature pyramids.

The handcrafted extractor stands in for a trained CNN. The grey image is
smoothed with Gaussians of increasing scale ``sigma_k = sigma * 2**k`` and
each scale contributes, in order,

  blur, relu(+d/dx), relu(-d/dx), relu(+d/dy), relu(-d/dy), relu(+dog), relu(-dog)

where derivatives are scale-normalised and ``dog`` is the difference between
the next coarser blur and this one. Channels are taken from scale 0 upwards
until C are filled. Rectification keeps every channel non-negative, like
post-activation CNN features, so the pooled semantic levels act as positive
RBF bandwidths. Level 1 averages each ``stride x stride`` cell; levels 2 and 3
halve the resolution with 2x2 average pooling and then apply a 3x3 box filter.
"""

import re
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .tensor import Tensor3, read_tensor

DEFAULT_CHANNELS = 8
# puts exp(-lt^2 * ms^2) in its working range for images in [0, 1]
DEFAULT_GAIN = 16.0


class PyramidShapeError(ValueError):
    pass


@dataclass(frozen=True)
class FeaturePyramid:
    levels: tuple
    image_size: tuple  # (height, width) of the source image

    def __post_init__(self):
        levels = tuple(self.levels)
        if len(levels) != 3:
            raise PyramidShapeError(f"a pyramid has exactly 3 levels, got {len(levels)}")
        chans = [lvl.channels for lvl in levels]
        if len(set(chans)) != 1:
            raise PyramidShapeError(f"channel counts differ across levels: {chans}")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "image_size", tuple(int(x) for x in self.image_size))

    @property
    def channels(self):
        return self.levels[0].channels

    def __getitem__(self, level):
        """1-based level access: ``pyramid[1]`` is the finest map."""
        return self.levels[level - 1]


@dataclass(frozen=True)
class StereoFeatures:
    left: FeaturePyramid
    right: FeaturePyramid

    def __post_init__(self):
        ls = [lvl.shape for lvl in self.left.levels]
        rs = [lvl.shape for lvl in self.right.levels]
        if ls != rs:
            raise PyramidShapeError(f"left/right pyramid shapes differ: {ls} vs {rs}")

    def side(self, side):
        return self.left if side == "left" else self.right


def to_gray(image):
    data = image.data if isinstance(image, Tensor3) else np.asarray(image, dtype=np.float64)
    if data.ndim == 2:
        return data
    if data.shape[0] == 1:
        return data[0]
    if data.shape[0] == 3:
        return 0.299 * data[0] + 0.587 * data[1] + 0.114 * data[2]
    raise ValueError(f"images must have 1 or 3 channels, got {data.shape[0]}")


def avg_pool(x, k):
    """k x k average pooling over the last two axes (trailing remainder dropped)."""
    h, w = x.shape[-2] // k, x.shape[-1] // k
    x = x[..., : h * k, : w * k]
    return x.reshape(x.shape[:-2] + (h, k, w, k)).mean(axis=(-3, -1))


def box3(x):
    """3x3 mean filter with edge replication over the last two axes."""
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(x, pad, mode="edge")
    h, w = x.shape[-2:]
    acc = np.zeros_like(x)
    for dy in range(3):
        for dx in range(3):
            acc += p[..., dy:dy + h, dx:dx + w]
    return acc / 9.0


def _blur(gray, sigma, order=(0, 0)):
    return ndimage.gaussian_filter(gray, sigma, order=order, mode="nearest")


def jet_channels(gray, channels, sigma):
    """Full-resolution channel stack ``[C, H, W]`` described in the module docstring."""
    out = []
    k = 0
    while len(out) < channels:
        sk = sigma * 2 ** k
        g = _blur(gray, sk)
        gx = sk * _blur(gray, sk, (0, 1))
        gy = sk * _blur(gray, sk, (1, 0))
        dog = _blur(gray, 2 * sk) - g
        for ch in (g, gx, -gx, gy, -gy, dog, -dog):
            out.append(ch if ch is g else np.maximum(ch, 0.0))
        k += 1
    return np.stack(out[:channels])


def extract_handcrafted(image, channels=DEFAULT_CHANNELS, stride=4, gain=DEFAULT_GAIN, sigma=None):
    """Builds a deterministic feature pyramid from a 1- or 3-channel image.

    Args:
      image: :class:`Tensor3` (or array) with values roughly in [0, 1].
      channels: channel count C shared by all three levels (>= 3).
      stride: level-1 stride; levels 2 and 3 use 2x and 4x this.
      gain: scale applied to every feature.
      sigma: finest Gaussian scale in pixels, ``stride / 2`` by default.

    Returns:
      A :class:`FeaturePyramid` with level shapes
      ``(C, H // s, W // s)``, ``(C, H // 2s, W // 2s)``, ``(C, H // 4s, W // 4s)``.
    """
    if channels < 3:
        raise ValueError(f"need at least 3 channels, got {channels}")
    gray = to_gray(image)
    h, w = gray.shape
    if h // stride < 4 or w // stride < 4:
        raise ValueError(f"image {h}x{w} is too small for stride {stride}")
    sigma = stride / 2.0 if sigma is None else sigma
    level1 = gain * avg_pool(jet_channels(gray, channels, sigma), stride)
    level2 = box3(avg_pool(level1, 2))
    level3 = box3(avg_pool(level2, 2))
    return FeaturePyramid((Tensor3(level1), Tensor3(level2), Tensor3(level3)), (h, w))


def extract_stereo(left_image, right_image, channels=DEFAULT_CHANNELS):
    return StereoFeatures(extract_handcrafted(left_image, channels),
                          extract_handcrafted(right_image, channels))


def expected_level_dims(image_size, affine):
    """Feature-map (height, width) candidates for an image under a level affine."""
    h, w = image_size
    hs, ws = h * affine.scale_v, w * affine.scale_u
    return {(int(np.floor(hs + 1e-9)), int(np.floor(ws + 1e-9))),
            (int(np.ceil(hs - 1e-9)), int(np.ceil(ws - 1e-9)))}


def load_pyramid(paths, rig, image_size=None):
    """Loads three tensor files as a pyramid and checks them against ``rig``.

    Args:
      paths: level-1, level-2 and level-3 file paths.
      rig: a :class:`~fce3d.geometry.StereoRig` supplying the level affines.
      image_size: (height, width) of the source image. Inferred from level 1
        when omitted.

    Raises:
      PyramidShapeError: a level's spatial size disagrees with its affine, or
        the channel counts differ across levels.
    """
    paths = list(paths)
    if len(paths) != 3:
        raise PyramidShapeError(f"need 3 level files, got {len(paths)}")
    tensors = [read_tensor(p) for p in paths]
    chans = [t.channels for t in tensors]
    if len(set(chans)) != 1:
        raise PyramidShapeError(f"channel counts differ across levels: {chans}")
    if image_size is None:
        a1 = rig.level_affines[0]
        image_size = (round(tensors[0].height / a1.scale_v), round(tensors[0].width / a1.scale_u))
    for j, (t, aff) in enumerate(zip(tensors, rig.level_affines), start=1):
        ok = expected_level_dims(image_size, aff)
        if (t.height, t.width) not in ok:
            raise PyramidShapeError(
                f"level {j} has spatial size {t.height}x{t.width}, expected one of "
                f"{sorted(ok)} for image {image_size[0]}x{image_size[1]}")
    return FeaturePyramid(tuple(tensors), image_size)


# ---------------------------------------------------------------------------
# Binary PGM (P5) / PPM (P6) images, maxval 255.

_PNM_HEADER = re.compile(rb"\A(P[56])\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+"
                         rb"(?:#[^\n]*\s+)*(\d+)\s")


def read_pnm(path):
    """Reads a binary PGM/PPM as a Tensor3 with values in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    m = _PNM_HEADER.match(raw)
    if not m:
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    c = 1 if magic == b"P5" else 3
    body = raw[m.end():]
    if len(body) != c * h * w:
        raise ValueError(f"{path}: expected {c * h * w} pixel bytes, found {len(body)}")
    pix = np.frombuffer(body, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1)
    return Tensor3(pix.astype(np.float64) / 255.0)


def write_pnm(path, image):
    data = image.data if isinstance(image, Tensor3) else np.asarray(image, dtype=np.float64)
    if data.ndim == 2:
        data = data[None]
    c, h, w = data.shape
    if c not in (1, 3):
        raise ValueError(f"PNM images need 1 or 3 channels, got {c}")
    pix = np.clip(np.rint(data * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header + pix.tobytes())
