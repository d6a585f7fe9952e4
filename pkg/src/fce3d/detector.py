"""Point-set regression head, box residual coding, training and the cascade.

The head is a small PointNet: a shared per-point MLP, a max-pool over points,
and an MLP on the pooled vector. Its 8 outputs are

    (dx, dy, dz, dlog_l, dlog_w, dlog_h, dyaw, confidence_logit)

where the centre shift is expressed in the proposal's own frame (x along the
length, y along the width, z up).

Gradients are accumulated in reverse over the fixed layer graph. Because the
max-pool routes each pooled channel to a single point, the backward pass only
revisits those winning points.
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .embedding import embed
from .geometry import Proposal3D, box_iou_3d, wrap_angle, yaw_matrix
from .sampling import CarShapeModel, SamplingConfig, generate_grid, grid_to_world
from .tensor import read_tensor, write_tensor

N_OUT = 8
N_RESIDUALS = 7
INPUT_SCALE = 5.0
RESIDUAL_CLIP = 5.0  # guards exp() of log-size residuals against untrained heads
MANIFEST_HEADER = "FCEHEAD v1"


class HeadShapeError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"training diverged at step {step} (loss {loss:.6g})")


@dataclass(frozen=True)
class HeadConfig:
    """Layer sizes of the head.

    ``head_widths[0]`` is the pooled feature width and must equal
    ``point_widths[-1]``; the remaining entries are hidden layers of the
    pooled MLP, followed by the fixed 8-wide output layer.
    """

    channels: int = 8
    point_widths: tuple = (32, 64)
    head_widths: tuple = (64, 32)
    iterations: int = 2
    leak: float = 0.01
    variant: str = "enhanced"

    def __post_init__(self):
        widths = tuple(self.point_widths) + tuple(self.head_widths)
        if not widths or min(widths) < 1 or self.channels < 1:
            raise HeadShapeError("layer widths and channel count must be positive")
        if self.head_widths[0] != self.point_widths[-1]:
            raise HeadShapeError(
                f"pooled width {self.head_widths[0]} != last point width {self.point_widths[-1]}")
        if self.iterations < 0:
            raise HeadShapeError("iterations must be >= 0")

    @property
    def input_dim(self):
        return self.channels + 1 + 3

    @property
    def layer_shapes(self):
        point = [self.input_dim, *self.point_widths]
        head = [*self.head_widths, N_OUT]
        return list(zip(point[:-1], point[1:])) + list(zip(head[:-1], head[1:]))

    @property
    def n_point_layers(self):
        return len(self.point_widths)


@dataclass(eq=False)
class HeadParams:
    """Weights ``[fan_in, fan_out]`` and biases ``[fan_out]`` per layer."""

    weights: list
    biases: list

    @classmethod
    def zeros(cls, cfg):
        return cls([np.zeros(s) for s in cfg.layer_shapes],
                   [np.zeros(s[1]) for s in cfg.layer_shapes])

    @classmethod
    def init(cls, cfg, seed=0):
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for fan_in, fan_out in cfg.layer_shapes:
            ws.append(rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in))
            bs.append(np.zeros(fan_out))
        ws[-1] *= 0.1
        return cls(ws, bs)

    def copy(self):
        return HeadParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def names(self):
        out = []
        for i in range(len(self.weights)):
            out += [f"layer{i}.weight", f"layer{i}.bias"]
        return out

    def arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec):
        arrays, pos = [], 0
        for a in self.arrays():
            arrays.append(np.asarray(vec[pos:pos + a.size], dtype=np.float64).reshape(a.shape))
            pos += a.size
        return HeadParams(arrays[0::2], arrays[1::2])

    def check(self, cfg):
        shapes = cfg.layer_shapes
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise HeadShapeError(f"expected {len(shapes)} layers, got {len(self.weights)}")
        for i, ((fi, fo), w, b) in enumerate(zip(shapes, self.weights, self.biases)):
            if w.shape != (fi, fo) or b.shape != (fo,):
                raise HeadShapeError(
                    f"layer {i}: weight {w.shape} / bias {b.shape}, expected ({fi}, {fo}) / ({fo},)")


def save_params(directory, params):
    """Writes one tensor file per array plus a ``manifest.txt``."""
    os.makedirs(directory, exist_ok=True)
    lines = [MANIFEST_HEADER]
    for name, arr in zip(params.names(), params.arrays()):
        lines.append(f"{name} {' '.join(str(d) for d in arr.shape)}")
        write_tensor(os.path.join(directory, f"{name}.fct"), arr.reshape((1,) * (3 - arr.ndim) + arr.shape))
    tmp = os.path.join(directory, "manifest.txt.tmp")
    with open(tmp, "w") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp, os.path.join(directory, "manifest.txt"))


def load_params(directory):
    with open(os.path.join(directory, "manifest.txt")) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or lines[0] != MANIFEST_HEADER:
        raise HeadShapeError(f"{directory}: manifest must start with {MANIFEST_HEADER!r}")
    arrays = []
    for ln in lines[1:]:
        name, *dims = ln.split()
        shape = tuple(int(d) for d in dims)
        arr = read_tensor(os.path.join(directory, f"{name}.fct")).data
        if arr.size != int(np.prod(shape)):
            raise HeadShapeError(f"{name}: file holds {arr.size} values, manifest says {shape}")
        arrays.append(arr.reshape(shape))
    return HeadParams(arrays[0::2], arrays[1::2])


# ---------------------------------------------------------------------------
# Forward / backward


def head_inputs(fce, grid):
    """Per-point inputs: embedding values, validity flag, centred latent coords."""
    if len(fce) != len(grid):
        raise HeadShapeError(f"embedding has {len(fce)} points, grid has {len(grid)}")
    # inconsistency 1 - fce, stretched so it is not swamped by the coordinates
    z = INPUT_SCALE * (1.0 - fce.values)
    return np.concatenate([z, fce.valid[:, None].astype(np.float64), grid.local - 0.5], axis=1)


def _leaky(x, leak):
    return np.where(x > 0, x, leak * x)


def _dleaky(x, leak):
    return np.where(x > 0, 1.0, leak)


def forward_batch(x, params, cfg, keep=False):
    """Runs the head on ``x`` of shape ``[B, N, input_dim]``.

    Returns ``[B, 8]`` outputs, plus a cache for :func:`backward_batch` when
    ``keep`` is set.
    """
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] != cfg.input_dim:
        raise HeadShapeError(f"expected inputs [B, N, {cfg.input_dim}], got {x.shape}")
    if x.shape[1] == 0:
        raise HeadShapeError("cannot pool over zero points")
    leak = cfg.leak
    npl = cfg.n_point_layers
    ws, bs = params.weights, params.biases
    h = x
    for i in range(npl - 1):
        h = _leaky(h @ ws[i] + bs[i], leak)
    z = h @ ws[npl - 1] + bs[npl - 1]
    # leaky-relu is monotone, so max-pool commutes with it
    idx = z.argmax(axis=1)
    zmax = np.take_along_axis(z, idx[:, None, :], axis=1)[:, 0, :]
    pooled = _leaky(zmax, leak)
    acts, pre = [pooled], []
    h = pooled
    for i in range(npl, len(ws)):
        zi = h @ ws[i] + bs[i]
        pre.append(zi)
        h = _leaky(zi, leak) if i < len(ws) - 1 else zi
        acts.append(h)
    out = h
    if not keep:
        return out
    return out, {"x": x, "idx": idx, "zmax": zmax, "acts": acts, "pre": pre}


def backward_batch(dout, params, cfg, cache, want_input=False):
    """Reverse pass for :func:`forward_batch`.

    Returns ``(grad_params, grad_x)``; ``grad_x`` is None unless requested.
    """
    leak = cfg.leak
    npl = cfg.n_point_layers
    ws, bs = params.weights, params.biases
    gw = [None] * len(ws)
    gb = [None] * len(ws)
    acts, pre = cache["acts"], cache["pre"]

    g = dout
    for k, i in enumerate(range(len(ws) - 1, npl - 1, -1)):
        li = i - npl
        if i < len(ws) - 1:
            g = g * _dleaky(pre[li], leak)
        gw[i] = acts[li].T @ g
        gb[i] = g.sum(axis=0)
        g = g @ ws[i].T
    # g: gradient w.r.t. pooled vector [B, K]; route to the argmax points
    g = g * _dleaky(cache["zmax"], leak)
    x, idx = cache["x"], cache["idx"]
    b_ix = np.arange(x.shape[0])[:, None]
    xg = x[b_ix, idx]                          # [B, K, D] winning points' inputs
    # recompute the winners' hidden activations
    hs, zs = [xg], []
    h = xg
    for i in range(npl - 1):
        zi = h @ ws[i] + bs[i]
        zs.append(zi)
        h = _leaky(zi, leak)
        hs.append(h)
    last = npl - 1
    # pooled channel k depends only on output column k of the last point layer
    gw[last] = np.einsum("bkd,bk->dk", hs[last], g)
    gb[last] = g.sum(axis=0)
    gh = g[:, :, None] * ws[last].T[None, :, :]  # [B, K, fan_in] per winner
    for i in range(npl - 2, -1, -1):
        gz = gh * _dleaky(zs[i], leak)
        gw[i] = np.einsum("bkd,bkh->dh", hs[i], gz)
        gb[i] = gz.sum(axis=(0, 1))
        gh = gz @ ws[i].T
    gx = None
    if want_input:
        gx = np.zeros_like(x, dtype=np.float64)
        np.add.at(gx, (np.broadcast_to(b_ix, idx.shape), idx), gh)
    return HeadParams(gw, gb), gx


def forward(fce, grid, params, cfg=None):
    """Residuals (7-vector) and confidence for one proposal's embedding."""
    cfg = cfg or HeadConfig(channels=fce.channels)
    params.check(cfg)
    out = forward_batch(head_inputs(fce, grid)[None], params, cfg)[0]
    return out[:N_RESIDUALS], _sigmoid(out[N_RESIDUALS])


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


# ---------------------------------------------------------------------------
# Residual coding


def encode_residuals(proposal, target):
    """Residuals that :func:`apply_residuals` maps ``proposal`` onto ``target``."""
    d = np.asarray(target.center) - np.asarray(proposal.center)
    local = yaw_matrix(proposal.yaw).T @ d
    return np.array([
        local[0], local[2], -local[1],
        math.log(target.length / proposal.length),
        math.log(target.width / proposal.width),
        math.log(target.height / proposal.height),
        wrap_angle(target.yaw - proposal.yaw),
    ])


def apply_residuals(box, residuals):
    r = np.asarray(residuals, dtype=np.float64)
    shift = yaw_matrix(box.yaw) @ np.array([r[0], -r[2], r[1]])
    return Proposal3D(
        center=np.asarray(box.center) + shift,
        length=box.length * math.exp(r[3]),
        width=box.width * math.exp(r[4]),
        height=box.height * math.exp(r[5]),
        yaw=box.yaw + r[6],
    )


# ---------------------------------------------------------------------------
# Loss


def smooth_l1(x, beta=1.0):
    ax = np.abs(x)
    return np.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)


def _dsmooth_l1(x, beta=1.0):
    return np.where(np.abs(x) < beta, x / beta, np.sign(x))


def _softplus(x):
    return np.logaddexp(0.0, x)


def loss_terms(pred, targets, labels):
    """Summed smooth-L1 residual loss and BCE-with-logits, averaged over the batch.

    Args:
      pred: ``[B, 8]`` head outputs.
      targets: ``[B, 7]`` encoded residual targets.
      labels: ``[B]`` 0/1 confidence targets.

    Returns:
      ``(total, residual_term, bce_term, dpred)`` with ``dpred = dtotal/dpred``.
    """
    pred = np.atleast_2d(pred)
    targets = np.atleast_2d(targets)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.float64))
    n = pred.shape[0]
    diff = pred[:, :N_RESIDUALS] - targets
    logit = pred[:, N_RESIDUALS]
    res = smooth_l1(diff).sum() / n
    bce = (_softplus(logit) - labels * logit).sum() / n
    dpred = np.empty_like(pred, dtype=np.float64)
    dpred[:, :N_RESIDUALS] = _dsmooth_l1(diff) / n
    dpred[:, N_RESIDUALS] = (_sigmoid(logit) - labels) / n
    return res + bce, res, bce, dpred


def loss(pred, target_box, proposal_box, label, params=None, cfg=None, cache=None,
         want_input=False):
    """Loss of one prediction against the ground-truth box.

    When ``params``, ``cfg`` and the forward ``cache`` are given, also returns
    parameter gradients (and input gradients if ``want_input``).
    """
    target = encode_residuals(proposal_box, target_box)
    total, _, _, dpred = loss_terms(np.asarray(pred)[None], target[None], [label])
    if cache is None:
        return total
    grads, gx = backward_batch(dpred, params, cfg, cache, want_input)
    return total, grads, gx


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainSchedule:
    """Optimiser settings.

    ``optimizer`` is ``"gd"`` (plain fixed-step gradient descent) or ``"adam"``
    (fixed base step with per-parameter scaling).
    """

    steps: int = 300
    step_size: float = 1e-3
    batch_size: int = 0  # 0 = full batch
    optimizer: str = "adam"
    seed: int = 0
    label_iou: float = 0.5
    divergence_loss: float = 1e6
    weight_decay: float = 0.0  # decoupled, applied to weights but not biases


@dataclass(frozen=True, eq=False)
class TrainingSet:
    """Precomputed head inputs ``x [S, N, D]`` with targets and boxes."""

    x: np.ndarray
    targets: np.ndarray
    proposals: list
    truths: list

    def __len__(self):
        return self.x.shape[0]


def confidence_labels(pred, proposals, truths, threshold=0.5):
    out = np.empty(len(proposals))
    for i, (p, t) in enumerate(zip(proposals, truths)):
        refined = apply_residuals(p, np.clip(pred[i, :N_RESIDUALS], -RESIDUAL_CLIP, RESIDUAL_CLIP))
        out[i] = 1.0 if box_iou_3d(refined, t) >= threshold else 0.0
    return out


def mean_loss(data, params, cfg, schedule=TrainSchedule(), chunk=64):
    total = 0.0
    for s in range(0, len(data), chunk):
        sl = slice(s, s + chunk)
        pred = forward_batch(data.x[sl], params, cfg)
        labels = confidence_labels(pred, data.proposals[sl], data.truths[sl], schedule.label_iou)
        t, _, _, _ = loss_terms(pred, data.targets[sl], labels)
        total += t * pred.shape[0]
    return total / len(data)


def train_toy(data, cfg, schedule=TrainSchedule(), init=None, history=None):
    """Fits head parameters to a :class:`TrainingSet`.

    Confidence labels are recomputed each step from the IoU between the
    refined proposal and its ground truth.

    Raises:
      ValueError: empty dataset.
      TrainingDivergedError: the batch loss exceeded ``divergence_loss``.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    params = (init or HeadParams.init(cfg, schedule.seed)).copy()
    params.check(cfg)
    rng = np.random.default_rng(schedule.seed)
    arrays = params.arrays()
    m = [np.zeros_like(a) for a in arrays]
    v = [np.zeros_like(a) for a in arrays]
    b1, b2, eps = 0.9, 0.999, 1e-8
    n = len(data)
    bs = schedule.batch_size or n
    for step in range(schedule.steps):
        sel = np.sort(rng.choice(n, size=bs, replace=False)) if bs < n else np.arange(n)
        x = data.x[sel]
        pred, cache = forward_batch(x, params, cfg, keep=True)
        labels = confidence_labels(pred, [data.proposals[i] for i in sel],
                                   [data.truths[i] for i in sel], schedule.label_iou)
        total, _, _, dpred = loss_terms(pred, data.targets[sel], labels)
        if not np.isfinite(total) or total > schedule.divergence_loss:
            raise TrainingDivergedError(step, float(total))
        if history is not None:
            history.append(float(total))
        grads, _ = backward_batch(dpred, params, cfg, cache)
        for k, (a, g) in enumerate(zip(arrays, grads.arrays())):
            if schedule.weight_decay and k % 2 == 0:  # arrays alternate weight, bias
                a *= 1.0 - schedule.step_size * schedule.weight_decay
            if schedule.optimizer == "adam":
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                mh = m[k] / (1 - b1 ** (step + 1))
                vh = v[k] / (1 - b2 ** (step + 1))
                a -= schedule.step_size * mh / (np.sqrt(vh) + eps)
            elif schedule.optimizer == "gd":
                a -= schedule.step_size * g
            else:
                raise ValueError(f"unknown optimizer {schedule.optimizer!r}")
    return params


# ---------------------------------------------------------------------------
# Cascade


@dataclass(frozen=True)
class Detection:
    box: Proposal3D
    confidence: float
    trace: tuple = field(default=())


def cascade_detect(initial, rig, feats, shape=None, cfg=None, params=None, head=None):
    """Iteratively resamples, embeds and refines a proposal.

    Args:
      initial: starting :class:`Proposal3D`.
      rig, feats: camera rig and stereo feature pyramids.
      shape: :class:`CarShapeModel` (default model if None).
      cfg: :class:`SamplingConfig` for the grid (non-uniform default).
      params: :class:`HeadParams`, or a sequence with one entry per
        iteration (the last entry is reused if the sequence is short).
      head: :class:`HeadConfig`; its ``iterations`` and ``variant`` drive the
        loop.

    Returns:
      A :class:`Detection` whose ``trace`` holds the box after each iteration.
      With zero iterations the box is the input and the confidence is 0.5.
    """
    shape = shape or CarShapeModel()
    cfg = cfg or SamplingConfig()
    head = head or HeadConfig(channels=feats.left.channels)
    if params is None:
        params = HeadParams.zeros(head)
    stages = [params] if isinstance(params, HeadParams) else list(params)
    if not stages:
        raise ValueError("params sequence is empty")
    for p in stages:
        p.check(head)
    box = initial
    conf = 0.5
    trace = []
    for it in range(head.iterations):
        grid = generate_grid(box, shape, cfg)
        fce = embed(grid_to_world(grid, box), rig, feats, head.variant)
        residuals, conf = forward(fce, grid, stages[min(it, len(stages) - 1)], head)
        box = apply_residuals(box, np.clip(residuals, -RESIDUAL_CLIP, RESIDUAL_CLIP))
        trace.append(box)
    return Detection(box, float(conf), tuple(trace))
