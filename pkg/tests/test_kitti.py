import glob
import math
import os

import numpy as np
import pytest

from fce3d.geometry import Proposal3D
from fce3d.kitti import (ZERO_NOISE, CalibError, LabelParseError, NoiseSpec,
                         box_to_label, format_calib, format_labels, label_to_box, label_to_proposal,
                         parse_calib, parse_labels, perturbation, proposal_from_json,
                         proposal_to_json, read_calib_file, read_label_file, read_proposals,
                         write_proposals)

from conftest import KITTI_DIR

CAR = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59"


def p_line(key, fx, cx, cy, tx, n=12):
    vals = [fx, 0, cx, tx, 0, fx, cy, 0, 0, 0, 1, 0][:n]
    return f"{key}: " + " ".join(f"{v:.6e}" for v in vals)


def calib_text(tx3=-387.5744, n3=12):
    return "\n".join([p_line("P2", 721.5377, 609.5593, 172.854, 44.85728),
                      p_line("P3", 721.5377, 609.5593, 172.854, tx3, n3)]) + "\n"


def calib_files():
    return sorted(glob.glob(os.path.join(KITTI_DIR, "calib", "*.txt")))


# --- calibration -----------------------------------------------------------

def test_intrinsics_from_fixture():
    calib = read_calib_file(os.path.join(KITTI_DIR, "calib", "000001.txt"))
    k = calib.left.intrinsics
    assert (k.fx, k.fy, k.cx, k.cy) == (721.5377, 721.5377, 609.5593, 172.854)
    assert calib.baseline == pytest.approx(0.5327, abs=1e-3)


def test_equal_projections_have_no_baseline():
    text = calib_text(tx3=44.85728)
    with pytest.raises(CalibError, match="baseline"):
        parse_calib(text)


def test_wrong_float_count_names_key():
    with pytest.raises(CalibError, match="P3"):
        parse_calib(calib_text(n3=11))


def test_missing_key():
    with pytest.raises(CalibError, match="P3"):
        parse_calib(p_line("P2", 700, 600, 170, 0) + "\n")


def test_non_finite_and_non_numeric():
    with pytest.raises(CalibError):
        parse_calib(calib_text().replace("6.095593e+02", "nan", 1))
    with pytest.raises(CalibError):
        parse_calib(calib_text().replace("6.095593e+02", "abc", 1))


def test_baseline_sign_and_rig():
    calib = parse_calib(calib_text())
    assert calib.baseline == pytest.approx((44.85728 + 387.5744) / 721.5377)
    rig = calib.rig()
    assert rig.baseline == pytest.approx(calib.baseline)
    # the right camera sits to the right (+x) of the left one
    assert rig.right.extrinsics.camera_center[0] > rig.left.extrinsics.camera_center[0]


@pytest.mark.parametrize("path", calib_files())
def test_fixture_rigs_satisfy_geometry_invariants(path):
    calib = read_calib_file(path)
    for cam in (calib.rig().left, calib.rig().right):
        r = cam.extrinsics.rotation
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-9)
        assert abs(np.linalg.det(r) - 1) < 1e-9
        assert cam.intrinsics.fx > 0 and cam.intrinsics.fy > 0
    assert 0.4 < calib.baseline < 0.7


def test_projection_matrices_reconstruct(tmp_path):
    calib = read_calib_file(calib_files()[0])
    for p, cam in ((calib.P2, calib.left), (calib.P3, calib.right)):
        e = cam.extrinsics
        rebuilt = cam.intrinsics.matrix @ np.hstack([e.rotation, e.translation[:, None]])
        np.testing.assert_allclose(rebuilt, p, atol=1e-9)
    again = parse_calib(format_calib(calib))
    np.testing.assert_array_equal(again.P2, calib.P2)


# --- labels ----------------------------------------------------------------

def test_empty_label_file():
    assert parse_labels("") == []
    assert parse_labels("\n\n") == []


def test_single_car_line():
    (lab,) = parse_labels(CAR + "\n")
    assert lab.type == "Car" and lab.occluded == 0
    assert lab.dimensions == (1.65, 1.67, 3.64)
    assert lab.location == (-0.65, 1.71, 46.70)
    assert lab.rotation_y == -1.59
    assert lab.bbox == (587.01, 173.33, 614.12, 200.12)
    assert lab.score is None


def test_text_in_numeric_field_cites_line():
    with pytest.raises(LabelParseError, match="line 1"):
        parse_labels(CAR.replace("46.70", "far"))


def test_field_count_error_cites_line():
    with pytest.raises(LabelParseError, match="line 2"):
        parse_labels(CAR + "\nCar 0 0 0\n")


def test_car_dims_and_rotation_checked():
    with pytest.raises(LabelParseError):
        parse_labels(CAR.replace("1.65 1.67", "-1.65 1.67"))
    with pytest.raises(LabelParseError):
        parse_labels(CAR.replace("-1.59", "4.00"))


def test_dont_care_kept_and_flagged():
    labels = read_label_file(os.path.join(KITTI_DIR, "label_2", "000001.txt"))
    flags = [lab.dont_care for lab in labels]
    assert sum(flags) == 4 and len(labels) == 7


def test_score_column():
    (lab,) = parse_labels(CAR + " 0.93")
    assert lab.score == pytest.approx(0.93)


@pytest.mark.parametrize("path", sorted(glob.glob(os.path.join(KITTI_DIR, "label_2", "*.txt"))))
def test_reserialised_labels_match_printed_values(path):
    text = open(path).read()
    out = format_labels(parse_labels(text))
    for a, b in zip(text.splitlines(), out.splitlines()):
        fa, fb = a.split(), b.split()
        assert fa[0] == fb[0]
        np.testing.assert_allclose([float(v) for v in fa[1:]], [float(v) for v in fb[1:]], atol=5e-3)


# --- frame conversion ------------------------------------------------------

def test_bottom_centre_moves_up_by_half_height():
    (lab,) = parse_labels(CAR)
    box = label_to_box(lab)
    assert box.center == pytest.approx((-0.65, 1.71 - 1.65 / 2, 46.70))
    assert (box.length, box.width, box.height) == (3.64, 1.67, 1.65)
    assert box.yaw == -1.59


def test_label_box_roundtrip(rng):
    for _ in range(20):
        box = Proposal3D(rng.normal(size=3) * 10, *rng.uniform(1, 5, 3), rng.uniform(-3, 3))
        back = label_to_box(box_to_label(box))
        np.testing.assert_allclose(back.center, box.center, atol=1e-12)
        np.testing.assert_allclose(back.dims, box.dims, atol=0)
        assert back.yaw == pytest.approx(box.yaw)


# --- proposals -------------------------------------------------------------

def test_zero_noise_is_exact():
    (lab,) = parse_labels(CAR)
    assert label_to_proposal(lab, ZERO_NOISE, seed=5) == label_to_box(lab)


def test_seeded_proposals_reproduce():
    (lab,) = parse_labels(CAR)
    assert label_to_proposal(lab, seed=11) == label_to_proposal(lab, seed=11)
    assert label_to_proposal(lab, seed=11) != label_to_proposal(lab, seed=12)


def test_only_cars_get_proposals():
    (lab,) = parse_labels(CAR.replace("Car", "Pedestrian"))
    with pytest.raises(ValueError):
        label_to_proposal(lab)


def test_noise_means_are_unbiased():
    noise = NoiseSpec()
    draws = np.stack([perturbation(noise, np.random.default_rng(s)) for s in range(10000)])
    sigmas = np.array([noise.sigma_x, noise.sigma_y, noise.sigma_z, *[noise.sigma_dims] * 3,
                       noise.sigma_yaw])
    se = sigmas / math.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0)) < 3 * se)
    np.testing.assert_allclose(draws.std(axis=0), sigmas, rtol=0.05)


def test_default_noise_levels():
    n = NoiseSpec()
    assert (n.sigma_x, n.sigma_z, n.sigma_dims) == (0.3, 0.5, 0.05)
    assert n.sigma_yaw == pytest.approx(math.radians(5))


def test_json_lines_roundtrip(tmp_path, rng):
    boxes = [Proposal3D(rng.normal(size=3) * 10, *rng.uniform(1, 5, 3), rng.uniform(-3, 3))
             for _ in range(20)]
    scores = list(rng.random(20))
    path = tmp_path / "p.jsonl"
    write_proposals(path, boxes, scores)
    back = read_proposals(path)
    assert [b for b, _ in back] == boxes
    assert [s for _, s in back] == scores
    box, score = proposal_from_json(proposal_to_json(boxes[0]))
    assert box == boxes[0] and score is None
