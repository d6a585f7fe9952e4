import math

import numpy as np
import pytest

from fce3d.detector import (HeadConfig, HeadParams, HeadShapeError, TrainingDivergedError,
                            TrainingSet, TrainSchedule, apply_residuals,
                            cascade_detect, encode_residuals, forward, forward_batch, head_inputs,
                            load_params, loss, loss_terms, mean_loss, save_params, smooth_l1,
                            train_toy)
from fce3d.embedding import FceSpace
from fce3d.geometry import Proposal3D, yaw_matrix
from fce3d.sampling import generate_grid
from fce3d.synthetic import make_scene, scene_features

from oracles import gradient_error

CFG = HeadConfig(channels=4, point_widths=(6, 5), head_widths=(5, 4))


def random_params(cfg, rng, scale=0.7):
    return HeadParams([rng.normal(scale=scale, size=s) for s in cfg.layer_shapes],
                      [rng.normal(scale=scale, size=s[1]) for s in cfg.layer_shapes])


def random_box(rng):
    return Proposal3D(rng.normal(size=3) + [0, 0, 20], *rng.uniform(1, 4, 3), rng.uniform(-3, 3))


def toy_set(rng, cfg, n=6, points=20):
    x = rng.normal(size=(n, points, cfg.input_dim))
    props = [random_box(rng) for _ in range(n)]
    truths = [apply_residuals(p, rng.normal(scale=0.2, size=7)) for p in props]
    targets = np.stack([encode_residuals(p, t) for p, t in zip(props, truths)])
    return TrainingSet(x, targets, props, truths)


# --- configuration ---------------------------------------------------------

def test_default_config():
    cfg = HeadConfig()
    assert cfg.input_dim == 8 + 1 + 3
    assert cfg.layer_shapes == [(12, 32), (32, 64), (64, 32), (32, 8)]
    assert cfg.iterations == 2


def test_config_validation():
    with pytest.raises(HeadShapeError):
        HeadConfig(point_widths=(32, 0))
    with pytest.raises(HeadShapeError):
        HeadConfig(point_widths=(32, 64), head_widths=(32, 16))


def test_param_shape_check(rng):
    p = random_params(CFG, rng)
    p.weights[1] = p.weights[1][:, :-1]
    with pytest.raises(HeadShapeError, match="layer 1"):
        p.check(CFG)


# --- forward ---------------------------------------------------------------

def test_zero_params_give_zero_residuals_and_even_confidence(rng):
    fce = FceSpace(rng.uniform(0.1, 1, (30, 8)), np.ones(30, bool), "enhanced")
    grid = generate_grid()
    sub = grid.permuted(np.arange(30))
    res, conf = forward(fce, sub, HeadParams.zeros(HeadConfig()))
    np.testing.assert_array_equal(res, 0.0)
    assert conf == 0.5


def test_size_mismatch(rng):
    fce = FceSpace(rng.uniform(0.1, 1, (30, 8)), np.ones(30, bool), "enhanced")
    with pytest.raises(HeadShapeError):
        forward(fce, generate_grid(), HeadParams.zeros(HeadConfig()))


def test_permutation_invariance_is_bitwise(rng):
    p = random_params(CFG, rng)
    x = rng.normal(size=(3, 50, CFG.input_dim))
    perm = rng.permutation(50)
    np.testing.assert_array_equal(forward_batch(x, p, CFG), forward_batch(x[:, perm], p, CFG))


def test_duplicated_point_pools_like_single_point(rng):
    p = random_params(CFG, rng)
    one = rng.normal(size=(1, 1, CFG.input_dim))
    many = np.repeat(one, 1000, axis=1)
    np.testing.assert_array_equal(forward_batch(one, p, CFG), forward_batch(many, p, CFG))


def test_head_inputs_layout(rng):
    fce = FceSpace(np.full((1000, 8), 0.8), np.r_[np.ones(999, bool), False], "enhanced")
    grid = generate_grid()
    x = head_inputs(fce, grid)
    assert x.shape == (1000, 12)
    np.testing.assert_allclose(x[:, 8], np.r_[np.ones(999), 0.0])
    np.testing.assert_allclose(x[:, 9:], grid.local - 0.5)


# --- residual coding -------------------------------------------------------

def test_zero_residuals_identity(rng):
    b = random_box(rng)
    c = apply_residuals(b, np.zeros(7))
    assert c.center == b.center and c.yaw == b.yaw and np.all(c.dims == b.dims)


def test_log_length_doubles():
    b = Proposal3D((0, 0, 10), 2, 1, 1, 0.3)
    assert apply_residuals(b, [0, 0, 0, math.log(2), 0, 0, 0]).length == pytest.approx(4.0)


def test_shift_is_in_box_frame():
    b = Proposal3D((0, 0, 10), 2, 1, 1, math.pi / 2)
    # +x in the box frame runs along the length, which points to -z at a quarter turn
    np.testing.assert_allclose(apply_residuals(b, [1, 0, 0, 0, 0, 0, 0]).center, [0, 0, 9], atol=1e-12)
    # +z in the box frame is up, i.e. -y in the camera frame
    np.testing.assert_allclose(apply_residuals(b, [0, 0, 1, 0, 0, 0, 0]).center, [0, -1, 10], atol=1e-12)


def test_inverse_composition(rng):
    for _ in range(50):
        b = random_box(rng)
        r = rng.normal(scale=0.5, size=7)
        c = apply_residuals(b, r)
        # undo the shift in c's frame, and negate the log-dims and yaw
        world_shift = yaw_matrix(b.yaw) @ np.array([r[0], -r[2], r[1]])
        back = yaw_matrix(c.yaw).T @ -world_shift
        inv = np.array([back[0], back[2], -back[1], -r[3], -r[4], -r[5], -r[6]])
        d = apply_residuals(c, inv)
        np.testing.assert_allclose(d.center, b.center, atol=1e-9)
        np.testing.assert_allclose(d.dims, b.dims, atol=1e-9)
        assert math.cos(d.yaw - b.yaw) == pytest.approx(1.0, abs=1e-12)


def test_encode_then_apply_reaches_target(rng):
    for _ in range(50):
        p, t = random_box(rng), random_box(rng)
        got = apply_residuals(p, encode_residuals(p, t))
        np.testing.assert_allclose(got.center, t.center, atol=1e-9)
        np.testing.assert_allclose(got.dims, t.dims, atol=1e-9)
        assert got.yaw == pytest.approx(t.yaw, abs=1e-9)


def test_dims_stay_positive(rng):
    b = random_box(rng)
    for r in rng.normal(scale=20, size=(50, 7)):
        c = apply_residuals(b, np.clip(r, -5, 5))
        assert min(c.dims) > 0


# --- loss ------------------------------------------------------------------

def test_perfect_prediction_leaves_bce_floor(rng):
    p, t = random_box(rng), random_box(rng)
    target = encode_residuals(p, t)
    for label, logit in ((1, 40.0), (0, -40.0)):
        _, res, bce, _ = loss_terms(np.r_[target, logit][None], target[None], [label])
        assert res == 0.0
        assert bce < 1e-15
        assert loss(np.r_[target, logit], t, p, label) == pytest.approx(bce)


def test_quadratic_zone_scales_by_four():
    t = np.zeros((1, 7))
    e = np.full((1, 7), 0.2)
    _, r1, _, _ = loss_terms(np.c_[e, [[0.0]]], t, [0])
    _, r2, _, _ = loss_terms(np.c_[2 * e, [[0.0]]], t, [0])
    assert r2 == pytest.approx(4 * r1, rel=1e-12)
    assert smooth_l1(np.array(3.0)) == pytest.approx(2.5)


def test_gradients_match_finite_differences(rng):
    assert gradient_error(CFG, rng)[0] < 1e-4


def test_gradients_three_point_layers(rng):
    cfg = HeadConfig(channels=3, point_widths=(4, 6, 5), head_widths=(5, 3))
    assert gradient_error(cfg, rng, points=7, batch=3)[0] < 1e-4


def test_loss_wrapper_returns_gradients(rng):
    params = random_params(CFG, rng)
    x = rng.normal(size=(1, 5, CFG.input_dim))
    p, t = random_box(rng), random_box(rng)
    pred, cache = forward_batch(x, params, CFG, keep=True)
    total, grads, gx = loss(pred[0], t, p, 1, params, CFG, cache, want_input=True)
    assert total >= 0
    assert gx.shape == x.shape
    assert [g.shape for g in grads.weights] == [w.shape for w in params.weights]


# --- training --------------------------------------------------------------

def test_single_sample_loss_decreases(rng):
    data = toy_set(rng, CFG, n=1)
    hist = []
    train_toy(data, CFG, TrainSchedule(steps=10, step_size=1e-3, optimizer="gd"), history=hist)
    assert all(b < a for a, b in zip(hist, hist[1:]))


def test_training_lowers_mean_loss(rng):
    data = toy_set(rng, CFG, n=8)
    sched = TrainSchedule(steps=200, step_size=1e-2)
    init = HeadParams.init(CFG, sched.seed)
    trained = train_toy(data, CFG, sched)
    assert mean_loss(data, trained, CFG) < mean_loss(data, init, CFG)


def test_training_is_deterministic(rng):
    data = toy_set(rng, CFG)
    sched = TrainSchedule(steps=30, step_size=1e-2, batch_size=3, seed=4, weight_decay=0.1)
    a, b = train_toy(data, CFG, sched), train_toy(data, CFG, sched)
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)


@pytest.mark.parametrize("optimizer", ["gd", "adam"])
def test_zero_step_size_keeps_params(rng, optimizer):
    data = toy_set(rng, CFG)
    init = random_params(CFG, rng)
    out = train_toy(data, CFG, TrainSchedule(steps=5, step_size=0.0, optimizer=optimizer,
                                             weight_decay=0.5), init=init)
    np.testing.assert_array_equal(out.flat(), init.flat())


def test_divergence_is_reported(rng):
    data = toy_set(rng, CFG)
    with pytest.raises(TrainingDivergedError) as err:
        train_toy(data, CFG, TrainSchedule(steps=50, step_size=1e4, optimizer="gd"))
    assert err.value.step >= 0 and "step" in str(err.value)


def test_empty_dataset(rng):
    empty = TrainingSet(np.zeros((0, 5, CFG.input_dim)), np.zeros((0, 7)), [], [])
    with pytest.raises(ValueError):
        train_toy(empty, CFG)


def test_weight_decay_shrinks_weights_only(rng):
    data = toy_set(rng, CFG)
    init = random_params(CFG, rng)
    # from the same start, one plain step and one decayed step differ by exactly the decay
    sched = TrainSchedule(steps=1, step_size=0.1, optimizer="gd")
    plain = train_toy(data, CFG, sched, init=init)
    decayed = train_toy(data, CFG, TrainSchedule(steps=1, step_size=0.1, optimizer="gd",
                                                 weight_decay=1.0), init=init)
    for w0, wp, wd in zip(init.weights, plain.weights, decayed.weights):
        np.testing.assert_allclose(wd, wp - 0.1 * w0, atol=1e-12)
    for bp, bd in zip(plain.biases, decayed.biases):
        np.testing.assert_array_equal(bp, bd)


def test_params_roundtrip_through_files(tmp_path, rng):
    p = random_params(HeadConfig(), rng)
    save_params(tmp_path / "head", p)
    manifest = (tmp_path / "head" / "manifest.txt").read_text().splitlines()
    assert manifest[0] == "FCEHEAD v1"
    assert manifest[1] == "layer0.weight 12 32"
    q = load_params(tmp_path / "head")
    for a, b in zip(p.arrays(), q.arrays()):
        np.testing.assert_array_equal(b, a.astype(np.float32).astype(np.float64))


def test_bad_manifest(tmp_path, rng):
    save_params(tmp_path / "h", random_params(CFG, rng))
    (tmp_path / "h" / "manifest.txt").write_text("SOMETHING ELSE\n")
    with pytest.raises(HeadShapeError):
        load_params(tmp_path / "h")


# --- cascade ---------------------------------------------------------------

@pytest.fixture(scope="module")
def scene():
    sc = make_scene(3)
    return sc, scene_features(sc)


def test_zero_iterations(scene):
    sc, feats = scene
    box = sc.boxes[0].replace(center=np.array(sc.boxes[0].center) + 0.3)
    det = cascade_detect(box, sc.rig, feats, head=HeadConfig(iterations=0))
    assert det.box == box and det.confidence == 0.5 and det.trace == ()


def test_zero_params_fixed_point(scene):
    sc, feats = scene
    box = sc.boxes[0].replace(yaw=0.4)
    det = cascade_detect(box, sc.rig, feats, head=HeadConfig(iterations=3))
    assert len(det.trace) == 3
    assert all(b == box for b in det.trace)
    assert det.confidence == 0.5


def test_cascade_uses_one_head_per_iteration(scene, rng):
    sc, feats = scene
    head = HeadConfig(iterations=2)
    shift = HeadParams.zeros(head)
    shift.biases[-1][0] = 0.5  # +0.5 m along the length every time it is used
    det = cascade_detect(sc.boxes[0], sc.rig, feats, params=[shift, HeadParams.zeros(head)],
                         head=head)
    d1 = np.linalg.norm(np.subtract(det.trace[0].center, sc.boxes[0].center))
    d2 = np.linalg.norm(np.subtract(det.trace[1].center, det.trace[0].center))
    assert d1 == pytest.approx(0.5) and d2 == 0.0
    det = cascade_detect(sc.boxes[0], sc.rig, feats, params=shift, head=head)
    assert np.linalg.norm(np.subtract(det.box.center, sc.boxes[0].center)) == pytest.approx(1.0)


def test_cascade_survives_points_behind_camera(scene):
    sc, feats = scene
    near = Proposal3D((0, 1, 0.5), 3.9, 1.6, 1.5, 0.3)  # straddles the image plane
    det = cascade_detect(near, sc.rig, feats)
    assert det.box == near
