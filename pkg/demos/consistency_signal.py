"""Where the stereo-consistency signal lives on a rendered scene.

Renders a few seeded one-box scenes and compares three pairs of point sets:

* the box surface actually seen by the left camera, against the same points
  moved 0.5 m along the ground,
* the outer points of a grid on the true box, against the same grid on a box
  moved 0.5 m,
* the outer points against the inner points of the true grid.

Seen surface points carry a clear signal. Grid averages carry much less,
because most grid points lie on hidden faces or inside the car, where left
and right views see unrelated texture whether or not the box is aligned.
"""

import math
import sys

import numpy as np

from fce3d.embedding import embed
from fce3d.synthetic import (make_scene, mean_consistency, scene_features, surface_consistency_gap,
                             visible_surface_points)


def compare(seed):
    scene = make_scene(seed)
    feats = scene_features(scene)
    box = scene.boxes[0]
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0, 2 * math.pi)
    shift = 0.5 * np.array([math.cos(theta), 0.0, math.sin(theta)])

    surface = visible_surface_points(scene)
    on = embed(surface, scene.rig, feats).values.mean()
    off = embed(surface + shift, scene.rig, feats).values.mean()
    moved = box.replace(center=np.asarray(box.center) + shift)
    aligned = mean_consistency(box, scene.rig, feats)
    displaced = mean_consistency(moved, scene.rig, feats)
    gap = surface_consistency_gap(scene, feats=feats)
    return len(surface), on, off, aligned, displaced, gap, box.center[2]


def main(n=10):
    print(" seed  depth  seen-pts  surface  moved   | grid-outer  moved   | outer-inner")
    wins_surface = wins_grid = wins_gap = 0
    for seed in range(n):
        count, on, off, aligned, displaced, gap, depth = compare(seed)
        wins_surface += on > off
        wins_grid += aligned > displaced
        wins_gap += gap > 0
        print(f" {seed:4d} {depth:6.1f} {count:9d}  {on:.4f}  {off:.4f}  |  {aligned:.4f}   "
              f"{displaced:.4f}  |  {gap:+.4f}")
    print(f"\nseen surface beats moved surface in {wins_surface}/{n} scenes")
    print(f"aligned grid beats moved grid in    {wins_grid}/{n} scenes")
    print(f"outer-minus-inner gap positive in   {wins_gap}/{n} scenes")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 10)
