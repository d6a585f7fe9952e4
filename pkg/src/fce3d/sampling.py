"""Latent sampling grids for 3D proposals.

Three strategies are supported:

``uniform``
    A plain ``resl x resl x resl`` lattice over the box.
``non_uniform``
    Shape-prior sampling: a two-part car model (lower body, upper cabin), each
    part split into three bands along length and width. Bands next to the box
    contour get more points than the inner band.
``extreme``
    Like ``non_uniform`` but with no points in the inner width band.

Per-band counts at ``resl = 10``:

=========  ===========  ============  ============  ============
strategy   body x       body y        cabin x       cabin y
=========  ===========  ============  ============  ============
uniform    (2, 6, 2)    (1, 8, 1)     (3, 4, 3)     (2, 6, 2)
non_unif.  (3, 4, 3)    (4, 2, 4)     (4, 2, 4)     (4, 3, 3)
extreme    (3, 4, 3)    (5, 0, 5)     (4, 2, 4)     (5, 0, 5)
=========  ===========  ============  ============  ============

The uniform counts are not inputs: they are what the lattice ``k / (resl-1)``
yields when classified against the band boundaries.
"""

from dataclasses import dataclass, field

import numpy as np

from .geometry import LatentPoint, local_to_world

STRATEGIES = ("uniform", "non_uniform", "extreme")
PARTS = ("body", "cabin")
BODY, CABIN = 0, 1

TABLE_COUNTS = {
    "uniform": {"body": ((2, 6, 2), (1, 8, 1)), "cabin": ((3, 4, 3), (2, 6, 2))},
    "non_uniform": {"body": ((3, 4, 3), (4, 2, 4)), "cabin": ((4, 2, 4), (4, 3, 3))},
    "extreme": {"body": ((3, 4, 3), (5, 0, 5)), "cabin": ((4, 2, 4), (5, 0, 5))},
}


class GridConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CarShapeModel:
    """Two-cube car model, as fractions of the box length/width/height.

    The body is the lower part of the box and the cabin the upper part. Each
    inner cube is centred in the footprint; e.g. a body inner length ratio of
    0.6 puts the inner x band at [0.2, 0.8].
    """

    body_inner_width_ratio: float = 0.8
    body_inner_length_ratio: float = 0.6
    cabin_inner_width_ratio: float = 0.6
    cabin_inner_length_ratio: float = 0.4
    body_height_fraction: float = 0.55

    def __post_init__(self):
        for name in ("body_inner_width_ratio", "body_inner_length_ratio",
                     "cabin_inner_width_ratio", "cabin_inner_length_ratio",
                     "body_height_fraction"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise GridConfigError(f"{name} must lie in (0, 1), got {value}")

    def x_bounds(self, part):
        r = self.body_inner_length_ratio if part == "body" else self.cabin_inner_length_ratio
        lo = (1.0 - r) / 2.0
        return lo, 1.0 - lo

    def y_bounds(self, part):
        r = self.body_inner_width_ratio if part == "body" else self.cabin_inner_width_ratio
        lo = (1.0 - r) / 2.0
        return lo, 1.0 - lo

    def z_bounds(self, part):
        f = self.body_height_fraction
        return (0.0, f) if part == "body" else (f, 1.0)


def _split(total, weights):
    """Largest-remainder apportionment of ``total`` over ``weights``."""
    weights = np.asarray(weights, dtype=np.float64)
    raw = total * weights / weights.sum()
    base = np.floor(raw).astype(int)
    order = np.argsort(-(raw - base), kind="stable")
    for i in order[: total - base.sum()]:
        base[i] += 1
    return tuple(int(x) for x in base)


@dataclass(frozen=True)
class SamplingConfig:
    """Strategy, per-axis resolution and per-part band counts.

    ``counts[part] = ((nx1, nx2, nx3), (ny1, ny2, ny3))``; ``z_counts`` gives the
    number of z slices in (body, cabin). Both are ignored by ``uniform``.
    """

    strategy: str = "non_uniform"
    resl: int = 10
    counts: dict = field(default=None)
    z_counts: tuple = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise GridConfigError(
                f"unknown strategy {self.strategy!r}; expected one of {', '.join(STRATEGIES)}")
        if int(self.resl) != self.resl or self.resl < 2:
            raise GridConfigError(f"resl must be an integer >= 2, got {self.resl}")
        object.__setattr__(self, "resl", int(self.resl))
        counts = self.counts
        if counts is None:
            counts = default_counts(self.strategy, self.resl)
        counts = {p: (tuple(int(n) for n in counts[p][0]), tuple(int(n) for n in counts[p][1]))
                  for p in PARTS}
        object.__setattr__(self, "counts", counts)
        zc = self.z_counts
        if zc is None:
            zc = _split(self.resl, (0.55, 0.45))
        object.__setattr__(self, "z_counts", tuple(int(n) for n in zc))
        self.validate()

    def validate(self):
        r = self.resl
        for part in PARTS:
            nx, ny = self.counts[part]
            for axis, ns in (("x", nx), ("y", ny)):
                if len(ns) != 3 or any(n < 0 for n in ns):
                    raise GridConfigError(f"{part} {axis} counts must be 3 non-negative ints, got {ns}")
                if sum(ns) != r:
                    raise GridConfigError(
                        f"{part} {axis} counts {ns} sum to {sum(ns)}, expected resl={r}")
        if len(self.z_counts) != 2 or min(self.z_counts) < 1 or sum(self.z_counts) != r:
            raise GridConfigError(f"z counts {self.z_counts} must be two positive ints summing to {r}")


def default_counts(strategy, resl=10):
    """Band counts for a strategy, scaled from the ``resl = 10`` table."""
    table = TABLE_COUNTS[strategy]
    if resl == 10:
        return {p: table[p] for p in PARTS}
    out = {}
    for part in PARTS:
        nx, ny = table[part]
        if strategy == "extreme":
            lo, hi = _split(resl, (1, 1))
            ny_scaled = (lo, 0, hi)
        else:
            ny_scaled = _split(resl, ny)
        out[part] = (_split(resl, nx), ny_scaled)
    return out


def piecewise_linspace(segments):
    """Concatenates linspaces over adjacent segments without repeating joints.

    Every segment ``(lo, hi, n)`` contributes ``n`` points. All segments but
    the last drop their right endpoint (``linspace(lo, hi, n + 1)[:-1]``); the
    last one keeps both (``linspace(lo, hi, n)``).

    >>> piecewise_linspace([(0.0, 1.0, 2)]).tolist()
    [0.0, 1.0]
    """
    segments = list(segments)
    parts = []
    prev_hi = None
    for i, (lo, hi, n) in enumerate(segments):
        if n < 0:
            raise GridConfigError(f"segment {i} has negative count {n}")
        if hi < lo:
            raise GridConfigError(f"segment {i} is descending: ({lo}, {hi})")
        if prev_hi is not None and lo < prev_hi:
            raise GridConfigError(f"segment {i} starts at {lo}, before previous end {prev_hi}")
        prev_hi = hi
        if i == len(segments) - 1:
            parts.append(np.linspace(lo, hi, n))
        else:
            parts.append(np.linspace(lo, hi, n + 1)[:-1])
    out = np.concatenate(parts) if parts else np.zeros(0)
    if np.any(np.diff(out) <= 0):
        raise GridConfigError("segments do not produce strictly increasing coordinates")
    return out


def band_index(coords, bounds):
    """0 below ``bounds[0]``, 1 in ``[bounds[0], bounds[1])``, 2 at or above."""
    coords = np.asarray(coords)
    return (coords >= bounds[0]).astype(np.int8) + (coords >= bounds[1]).astype(np.int8)


@dataclass(frozen=True, eq=False)
class SampleGrid:
    """Ordered latent points with labels.

    Attributes:
      local: ``[N, 3]`` normalised coordinates in [0, 1].
      part: ``[N]`` int, 0 for body and 1 for cabin.
      outer: ``[N]`` bool, True outside the part's inner cube footprint.
      x_band, y_band: ``[N]`` band indices in {0, 1, 2}.
      config: the :class:`SamplingConfig` used.
      shape: the :class:`CarShapeModel` used.
    """

    local: np.ndarray
    part: np.ndarray
    outer: np.ndarray
    x_band: np.ndarray
    y_band: np.ndarray
    config: SamplingConfig
    shape: CarShapeModel

    def __len__(self):
        return self.local.shape[0]

    def __iter__(self):
        for i in range(len(self)):
            yield self.point(i)

    def point(self, i):
        return LatentPoint(tuple(self.local[i]), PARTS[self.part[i]],
                           "outer" if self.outer[i] else "inner")

    @property
    def outer_fraction(self):
        return float(self.outer.mean()) if len(self) else 0.0

    def permuted(self, order):
        order = np.asarray(order)
        return SampleGrid(self.local[order], self.part[order], self.outer[order],
                          self.x_band[order], self.y_band[order], self.config, self.shape)


def _part_axes(strategy, part, shape, cfg):
    """Returns (xs, ys_edge, ys_middle, zs) for one part."""
    r = cfg.resl
    uniform = np.linspace(0.0, 1.0, r)
    if strategy == "uniform":
        f = shape.body_height_fraction
        zs = uniform[uniform < f] if part == "body" else uniform[uniform >= f]
        return uniform, uniform, uniform, zs
    nx, ny = cfg.counts[part]
    x0, x1 = shape.x_bounds(part)
    y0, y1 = shape.y_bounds(part)
    xs = piecewise_linspace([(0.0, x0, nx[0]), (x0, x1, nx[1]), (x1, 1.0, nx[2])])
    ys = piecewise_linspace([(0.0, y0, ny[0]), (y0, y1, ny[1]), (y1, 1.0, ny[2])])
    f = shape.body_height_fraction
    zs = piecewise_linspace([(0.0, f, cfg.z_counts[0]), (f, 1.0, cfg.z_counts[1])])
    zs = zs[: cfg.z_counts[0]] if part == "body" else zs[cfg.z_counts[0]:]
    return xs, uniform, ys, zs


def generate_grid(box=None, shape=None, cfg=None):
    """Builds the latent grid of a proposal.

    Points are ordered by part (body first), then z, then x, then y. Within a
    part, x values in the two edge bands are paired with ``resl`` uniform y
    values and x values in the middle band with the part's banded y values, so
    every z slice holds ``resl**2`` points and the grid holds ``resl**3``.

    ``box`` is accepted for API symmetry; latent coordinates do not depend on
    it (see :func:`grid_to_world`).
    """
    shape = shape or CarShapeModel()
    cfg = cfg or SamplingConfig()
    locs, parts, xb, yb = [], [], [], []
    for pid, part in enumerate(PARTS):
        xs, ys_edge, ys_mid, zs = _part_axes(cfg.strategy, part, shape, cfg)
        xbands = band_index(xs, shape.x_bounds(part))
        for z in zs:
            for x, xband in zip(xs, xbands):
                ys = ys_mid if xband == 1 else ys_edge
                n = ys.size
                locs.append(np.column_stack([np.full(n, x), ys, np.full(n, z)]))
                parts.append(np.full(n, pid, dtype=np.int8))
                xb.append(np.full(n, xband, dtype=np.int8))
                yb.append(band_index(ys, shape.y_bounds(part)))
    local = np.concatenate(locs)
    x_band = np.concatenate(xb)
    y_band = np.concatenate(yb)
    outer = ~((x_band == 1) & (y_band == 1))
    for arr in (local, x_band, y_band, outer):
        arr.setflags(write=False)
    part = np.concatenate(parts)
    part.setflags(write=False)
    return SampleGrid(local, part, outer, x_band, y_band, cfg, shape)


def band_counts(grid, part):
    """Distinct coordinates per band for one part of a grid.

    Returns:
      ``((nx1, nx2, nx3), (ny1, ny2, ny3))``: distinct x values per x band, and
      distinct y values per y band among points in the middle x band.
    """
    pid = PARTS.index(part)
    sel = grid.part == pid
    xs = grid.local[sel, 0]
    xband = grid.x_band[sel]
    nx = tuple(int(np.unique(xs[xband == k]).size) for k in range(3))
    mid = sel & (grid.x_band == 1)
    ys = grid.local[mid, 1]
    yband = grid.y_band[mid]
    ny = tuple(int(np.unique(ys[yband == k]).size) for k in range(3))
    return nx, ny


def grid_to_world(grid, box):
    """Camera-frame positions of every grid point, in grid order."""
    return local_to_world(grid.local, box)
