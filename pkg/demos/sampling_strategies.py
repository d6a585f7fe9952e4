"""How the three grid strategies spend their 1000 points.

Prints the per-band counts for each car part, the share of points that land
near the surface, and one z-slice of the body (x across, y up) so the
denser outer layers of the non-uniform grid are visible.
"""

import numpy as np

from fce3d.geometry import Proposal3D
from fce3d.sampling import (STRATEGIES, CarShapeModel, SamplingConfig, band_counts, generate_grid,
                            grid_to_world)


def cross_section(grid, part=0, width=41, height=21):
    """ASCII picture of the x-y points in the first z-slice of one part."""
    sel = grid.part == part
    z0 = grid.local[sel, 2].min()
    pts = grid.local[sel & np.isclose(grid.local[:, 2], z0)]
    canvas = [[" "] * width for _ in range(height)]
    for x, y, _ in pts:
        canvas[height - 1 - round(y * (height - 1))][round(x * (width - 1))] = "o"
    return "\n".join("  |" + "".join(row) + "|" for row in canvas)


def main():
    shape = CarShapeModel()
    for strategy in STRATEGIES:
        grid = generate_grid(None, shape, SamplingConfig(strategy))
        print(f"{strategy}: {len(grid)} points, {grid.outer_fraction:.3f} near the surface")
        for part in ("body", "cabin"):
            nx, ny = band_counts(grid, part)
            print(f"  {part:5s} x bands {nx}  y bands {ny}")
        print(cross_section(grid))
        print()

    # the same grid placed on a proposal: local coordinates scale with the box
    box = Proposal3D((1.0, 1.6, 15.0), 4.2, 1.7, 1.5, 0.3)
    grid = generate_grid(box, shape, SamplingConfig("non_uniform"))
    pts = grid_to_world(grid, box)
    print("non_uniform grid on a box at depth 15 m spans "
          f"x [{pts[:, 0].min():.2f}, {pts[:, 0].max():.2f}], "
          f"y [{pts[:, 1].min():.2f}, {pts[:, 1].max():.2f}], "
          f"z [{pts[:, 2].min():.2f}, {pts[:, 2].max():.2f}]")


if __name__ == "__main__":
    main()
