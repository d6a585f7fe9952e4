import json
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest

from fce3d.backbone import extract_handcrafted, write_pnm
from fce3d.cli import main
from fce3d.kitti import KittiCalib, ZERO_NOISE, NoiseSpec, box_to_label, format_calib, \
    label_to_proposal, write_proposals
from fce3d.synthetic import make_scene, render_stereo
from fce3d.tensor import read_tensor, write_tensor

from conftest import KITTI_DIR


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def rig_calib(rig):
    k = rig.left.intrinsics.matrix
    p2 = np.hstack([k, np.zeros((3, 1))])
    p3 = np.hstack([k, (k @ rig.right.extrinsics.translation)[:, None]])
    return KittiCalib(p2, p3)


# --- grid ------------------------------------------------------------------

def test_grid_non_uniform_thousand_lines(tmp_path, capsys):
    out = tmp_path / "g.jsonl"
    code, stdout, _ = run(["grid", "--strategy", "non_uniform", "--resl", 10, "--out", out], capsys)
    assert code == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 1000
    rec = json.loads(lines[0])
    assert set(rec) == {"index", "local", "world", "part", "region", "x_band", "y_band"}
    assert "body\tx {3,4,3}\ty {4,2,4}" in stdout
    assert "cabin\tx {4,2,4}\ty {4,3,3}" in stdout


def test_grid_extreme_prints_zero_inner(capsys):
    code, stdout, _ = run(["grid", "--strategy", "extreme", "--resl", 10], capsys)
    assert code == 0
    assert "body\tx {3,4,3}\ty {5,0,5}" in stdout
    assert "(1000 outer, 0 inner)" in stdout
    assert len([ln for ln in stdout.splitlines() if ln.startswith("{")]) == 1000


def test_grid_box_places_points(capsys):
    code, stdout, _ = run(["grid", "--box", "1,2,20,4,2,1.5,0"], capsys)
    recs = [json.loads(ln) for ln in stdout.splitlines() if ln.startswith("{")]
    world = np.array([r["world"] for r in recs])
    np.testing.assert_allclose(world.min(axis=0), [-1, 1.25, 19], atol=1e-9)
    np.testing.assert_allclose(world.max(axis=0), [3, 2.75, 21], atol=1e-9)


def test_grid_is_deterministic(capsys):
    a = run(["grid"], capsys)[1]
    b = run(["grid"], capsys)[1]
    assert a == b


@pytest.mark.parametrize("argv", [
    ["grid", "--strategy", "random"],
    ["grid", "--box", "1,2,3"],
    ["grid", "--box", "1,2,3,4,5,-1,0"],
    ["grid", "--resl", "1"],
    ["bench", "--n", "-1", "--out", "x"],
    ["bench", "--strategies", "uniform,bogus", "--out", "x"],
    ["embed", "--calib", "c"],
    [],
])
def test_usage_errors_exit_2(argv, capsys):
    with pytest.raises(SystemExit) as err:
        main(argv)
    assert err.value.code == 2


def test_module_entry_point_usage_error():
    proc = subprocess.run([sys.executable, "-m", "fce3d", "grid", "--strategy", "nope"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "invalid choice" in proc.stderr


# --- embed -----------------------------------------------------------------

@pytest.fixture(scope="module")
def embed_fixture(tmp_path_factory):
    d = tmp_path_factory.mktemp("embed")
    scene = make_scene(21)
    left, right = render_stereo(scene)
    write_pnm(d / "left.pgm", left)
    write_pnm(d / "right.pgm", right)
    (d / "calib.txt").write_text(format_calib(rig_calib(scene.rig)))
    label = box_to_label(scene.boxes[0])
    boxes = [label_to_proposal(label, ZERO_NOISE)] + [
        label_to_proposal(label, NoiseSpec(), seed=s) for s in range(3)]
    write_proposals(d / "props.jsonl", boxes)
    return d


def embed_args(d, variant, out):
    return ["embed", "--calib", d / "calib.txt", "--images", d / "left.pgm", d / "right.pgm",
            "--proposals", d / "props.jsonl", "--variant", variant, "--out", out]


def test_embed_values_in_range_and_ordered(embed_fixture, tmp_path, capsys):
    d = embed_fixture
    for variant in ("original", "enhanced"):
        assert run(embed_args(d, variant, tmp_path / variant), capsys)[0] == 0
    files = sorted(os.listdir(tmp_path / "enhanced"))
    assert files == [f"fce_{i:04d}.fct" for i in range(4)]
    for name in files:
        enh = read_tensor(tmp_path / "enhanced" / name).data
        org = read_tensor(tmp_path / "original" / name).data
        assert enh.shape == (9, 1000, 1)
        vals_e, vals_o = enh[:-1], org[:-1]
        assert np.all(vals_e > 0) and np.all(vals_e <= 1)
        assert np.all(vals_e <= vals_o)
        np.testing.assert_array_equal(enh[-1], org[-1])


def test_embed_from_feature_files(embed_fixture, tmp_path, capsys):
    d = embed_fixture
    from fce3d.backbone import read_pnm
    feat_dir = tmp_path / "feats"
    feat_dir.mkdir()
    for side in ("left", "right"):
        pyr = extract_handcrafted(read_pnm(d / f"{side}.pgm"))
        for j in (1, 2, 3):
            write_tensor(feat_dir / f"{side}_l{j}.fct", pyr[j])
    code, _, _ = run(["embed", "--calib", d / "calib.txt", "--features", feat_dir,
                      "--proposals", d / "props.jsonl", "--out", tmp_path / "a"], capsys)
    assert code == 0
    run(embed_args(d, "enhanced", tmp_path / "b"), capsys)
    a = read_tensor(tmp_path / "a" / "fce_0000.fct").data
    b = read_tensor(tmp_path / "b" / "fce_0000.fct").data
    np.testing.assert_allclose(a, b, atol=1e-4)


def test_embed_missing_calib_names_path(embed_fixture, tmp_path, capsys):
    args = embed_args(embed_fixture, "enhanced", tmp_path / "o")
    missing = tmp_path / "nowhere" / "calib.txt"
    args[2] = missing
    code, _, err = run(args, capsys)
    assert code == 1
    assert str(missing) in err


def test_embed_bad_inputs_exit_1(embed_fixture, tmp_path, capsys):
    d = embed_fixture
    (tmp_path / "bad.jsonl").write_text('{"center": [0, 0]}\n')
    args = embed_args(d, "enhanced", tmp_path / "o")
    args[args.index(d / "props.jsonl")] = tmp_path / "bad.jsonl"
    code, _, err = run(args, capsys)
    assert code == 1 and "bad.jsonl" in err
    (tmp_path / "c.txt").write_text("P2: 1 2 3\n")
    args = embed_args(d, "enhanced", tmp_path / "o")
    args[2] = tmp_path / "c.txt"
    code, _, err = run(args, capsys)
    assert code == 1 and "c.txt" in err
    code, _, err = run(["embed", "--calib", d / "calib.txt", "--features", tmp_path,
                        "--proposals", d / "props.jsonl", "--out", tmp_path / "o"], capsys)
    assert code == 1 and "left_l1.fct" in err


# --- bench -----------------------------------------------------------------

def test_bench_zero_scenes(tmp_path, capsys):
    code, stdout, _ = run(["bench", "--n", 0, "--out", tmp_path], capsys)
    assert code == 0
    assert (tmp_path / "metrics.tsv").read_text().count("\n") == 1
    assert (tmp_path / "scenes.jsonl").read_text() == ""
    assert stdout.startswith("strategy\tvariant\tmean_iou\tfrac_iou50\tfrac_iou70")


def test_small_bench_outputs(tmp_path, capsys):
    code, stdout, _ = run(["bench", "--n", 5, "--seed", 3, "--strategies", "uniform,extreme",
                           "--steps", 3, "--finetune-steps", 2, "--out", tmp_path], capsys)
    assert code == 0
    lines = (tmp_path / "metrics.tsv").read_text().splitlines()
    header = lines[0].split("\t")
    assert header[:5] == ["strategy", "variant", "mean_iou", "frac_iou50", "frac_iou70"]
    assert {"mean_iou_iter1", "mean_iou_iter2", "frac_iter2_ge_iter1"} <= set(header)
    rows = [dict(zip(header, ln.split("\t"))) for ln in lines[1:]]
    assert [r["strategy"] for r in rows] == ["uniform", "extreme"]
    assert all(r["status"] == "ok" for r in rows)
    recs = [json.loads(ln) for ln in (tmp_path / "scenes.jsonl").read_text().splitlines()]
    # 5 scenes, 3 train and 2 held out with 2 proposals each, for 2 strategies
    assert len(recs) == 8
    assert {"iou_iter1", "iou_iter2", "proposal_iou", "box"} <= set(recs[0])
    assert not [f for f in os.listdir(tmp_path) if ".tmp" in f]


# --- kitti-dry-run -----------------------------------------------------------

def dry_run(capsys, calib_dir, label_dir, *extra):
    return run(["kitti-dry-run", "--calib-dir", calib_dir, "--label-dir", label_dir, *extra], capsys)


def parse_report(text):
    lines = text.strip().splitlines()
    header = lines[0].split("\t")
    return [dict(zip(header, ln.split("\t"))) for ln in lines[1:]]


def test_dry_run_fixtures(tmp_path, capsys):
    report = tmp_path / "r.tsv"
    code, stdout, _ = dry_run(capsys, os.path.join(KITTI_DIR, "calib"),
                              os.path.join(KITTI_DIR, "label_2"), "--out", report)
    assert code == 0
    rows = parse_report(report.read_text())
    assert len(rows) >= 5
    for r in rows:
        assert r["status"] == "ok" and r["rig_ok"] == "True" and r["roundtrip_ok"] == "True"
        assert r["images"] == "placeholder"
        if int(r["n_proposals"]):
            assert float(r["embed_ms"]) > 0
        else:
            assert r["embed_ms"] == "nan"


@pytest.fixture
def kitti_copy(tmp_path):
    d = tmp_path / "kitti"
    shutil.copytree(KITTI_DIR, d)
    return d


def test_dry_run_single_pair(kitti_copy, capsys):
    for p in (kitti_copy / "calib").iterdir():
        if p.name != "000002.txt":
            p.unlink()
    code, stdout, _ = dry_run(capsys, kitti_copy / "calib", kitti_copy / "label_2")
    assert code == 0 and len(parse_report(stdout)) == 1


def test_dry_run_isolates_corrupt_calib(kitti_copy, capsys):
    (kitti_copy / "calib" / "000003.txt").write_text("P2: 1 2 3\nP3: garbage\n")
    code, stdout, err = dry_run(capsys, kitti_copy / "calib", kitti_copy / "label_2")
    assert code == 0
    rows = {r["file"]: r for r in parse_report(stdout)}
    assert rows["000003"]["status"] == "error" and "P2" in rows["000003"]["error"]
    assert sum(r["status"] == "ok" for r in rows.values()) == len(rows) - 1
    assert "000003" in err


def test_dry_run_all_failing_exits_1(kitti_copy, capsys):
    for p in (kitti_copy / "calib").iterdir():
        p.write_text("nothing useful\n")
    code, _, _ = dry_run(capsys, kitti_copy / "calib", kitti_copy / "label_2")
    assert code == 1


def test_dry_run_missing_label_is_row_error(kitti_copy, capsys):
    (kitti_copy / "label_2" / "000004.txt").unlink()
    code, stdout, _ = dry_run(capsys, kitti_copy / "calib", kitti_copy / "label_2")
    assert code == 0
    rows = {r["file"]: r for r in parse_report(stdout)}
    assert rows["000004"]["status"] == "error" and "000004.txt" in rows["000004"]["error"]


def test_dry_run_empty_directory(tmp_path, capsys):
    code, _, err = dry_run(capsys, tmp_path, tmp_path)
    assert code == 1 and "no calibration files" in err


def test_dry_run_with_images(kitti_copy, tmp_path, capsys):
    rng = np.random.default_rng(0)
    for sub in ("image_2", "image_3"):
        (kitti_copy / sub).mkdir()
        write_pnm(kitti_copy / sub / "000001.pgm", rng.random((96, 320)))
    code, stdout, _ = dry_run(capsys, kitti_copy / "calib", kitti_copy / "label_2",
                              "--image-dir", kitti_copy)
    assert code == 0
    rows = {r["file"]: r for r in parse_report(stdout)}
    assert rows["000001"]["images"] == "real"
    assert rows["000002"]["images"] == "placeholder"
