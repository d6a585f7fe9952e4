"""Read a KITTI calibration and label pair and turn the cars into proposals.

Defaults to the small hand-transcribed fixtures shipped with the tests; pass
a calib file and a label file to use real KITTI data instead.
"""

import os
import sys

import numpy as np

from fce3d.backbone import StereoFeatures, extract_handcrafted
from fce3d.embedding import embed
from fce3d.geometry import box_iou_3d
from fce3d.kitti import (NoiseSpec, label_to_box, label_to_proposal, proposal_to_json,
                         read_calib_file, read_label_file)
from fce3d.sampling import CarShapeModel, SamplingConfig, generate_grid, grid_to_world

FIXTURES = os.path.join(os.path.dirname(__file__), "..", "tests", "fixtures", "kitti")


def main(calib_path, label_path):
    calib = read_calib_file(calib_path)
    rig = calib.rig()
    k = rig.left.intrinsics
    print(f"left camera fx={k.fx:.2f} fy={k.fy:.2f} cx={k.cx:.2f} cy={k.cy:.2f}, "
          f"stereo baseline {calib.baseline:.3f} m")

    labels = read_label_file(label_path)
    cars = [lab for lab in labels if lab.type == "Car"]
    print(f"{len(labels)} labels, {len(cars)} cars\n")

    # without images, a flat grey frame still exercises projection and sampling
    flat = extract_handcrafted(np.full((round(2 * k.cy), round(2 * k.cx)), 0.5))
    feats = StereoFeatures(flat, flat)
    sampling = SamplingConfig("non_uniform")
    for i, lab in enumerate(cars):
        truth = label_to_box(lab)
        proposal = label_to_proposal(lab, NoiseSpec(), seed=i)
        grid = generate_grid(proposal, CarShapeModel(), sampling)
        fce = embed(grid_to_world(grid, proposal), rig, feats)
        print(f"car {i}: depth {truth.center[2]:5.1f} m, noisy proposal IoU "
              f"{box_iou_3d(proposal, truth):.3f}, {fce.valid.mean():.0%} of grid points visible")
        print("  " + proposal_to_json(proposal))


if __name__ == "__main__":
    if len(sys.argv) == 3:
        main(sys.argv[1], sys.argv[2])
    else:
        main(os.path.join(FIXTURES, "calib", "000001.txt"),
             os.path.join(FIXTURES, "label_2", "000001.txt"))
