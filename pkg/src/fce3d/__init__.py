"""Shape-prior non-uniform sampling and feature-consistency embedding for stereo 3D boxes."""

from .backbone import FeaturePyramid, StereoFeatures, extract_handcrafted, extract_stereo
from .detector import HeadConfig, HeadParams, TrainSchedule, cascade_detect, train_toy
from .embedding import FceSpace, embed, embed_enhanced, embed_original
from .geometry import (BehindCameraError, Camera, Extrinsics, Intrinsics, LevelAffine, Proposal3D,
                       StereoRig, box_iou_3d, box_iou_bev, project)
from .kitti import KittiCalib, KittiLabel, NoiseSpec, parse_calib, parse_labels
from .sampling import CarShapeModel, SampleGrid, SamplingConfig, generate_grid, grid_to_world
from .synthetic import (SyntheticScene, make_benchmark, make_scene, render_stereo,
                        visible_surface_points)
from .tensor import Tensor3, bilinear_sample, read_tensor, write_tensor

__version__ = "0.1.0"

__all__ = [
    "FeaturePyramid",
    "StereoFeatures",
    "extract_handcrafted",
    "extract_stereo",
    "HeadConfig",
    "HeadParams",
    "TrainSchedule",
    "cascade_detect",
    "train_toy",
    "FceSpace",
    "embed",
    "embed_enhanced",
    "embed_original",
    "BehindCameraError",
    "Camera",
    "Extrinsics",
    "Intrinsics",
    "LevelAffine",
    "Proposal3D",
    "StereoRig",
    "box_iou_3d",
    "box_iou_bev",
    "project",
    "KittiCalib",
    "KittiLabel",
    "NoiseSpec",
    "parse_calib",
    "parse_labels",
    "CarShapeModel",
    "SampleGrid",
    "SamplingConfig",
    "generate_grid",
    "grid_to_world",
    "SyntheticScene",
    "make_benchmark",
    "make_scene",
    "render_stereo",
    "visible_surface_points",
    "Tensor3",
    "bilinear_sample",
    "read_tensor",
    "write_tensor",
]
