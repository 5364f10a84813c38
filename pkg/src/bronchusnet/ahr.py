"""Hard-region supervision for airway segmentation.

The hard region is the part of the ground-truth airway that a plain
intensity threshold misses: everything outside the main trachea, grown by
one voxel. Coarser copies of it (repeated stride-2 max pooling) supervise
the lower-resolution decoder levels, each through its own Dice term.

No network is trained here. :func:`optimize_logits_demo` fits a free logit
per voxel under the full multi-level loss, which is enough to exercise the
loss family and its gradients end to end.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .metrics import dice_score
from .volgrid import as_mask, dilate26, maxpool_stride2

DICE_EPS = 1.0


@dataclass
class SupervisionPyramid:
    """Hard-region targets per decoder level; ``levels[h - 1]`` is pooled ``h`` times."""

    base: np.ndarray
    levels: list[np.ndarray] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.levels)


@dataclass
class LossReport:
    total: float
    dice_full: float
    hr_terms: list[float]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def hard_region(gt_mask, trachea_mask) -> np.ndarray:
    """``dilate26(gt - trachea)``: airway voxels outside the trachea, grown by one voxel."""
    gt = as_mask(gt_mask)
    tr = as_mask(trachea_mask)
    if gt.shape != tr.shape:
        raise ValueError(f"dims differ: {gt.shape} vs {tr.shape}")
    return dilate26(gt & (1 - tr))


def build_pyramid(y_hr, H: int) -> SupervisionPyramid:
    if H < 1:
        raise ValueError(f"need at least one level, got H={H}")
    base = as_mask(y_hr)
    levels = []
    cur = base
    for _ in range(H):
        cur = maxpool_stride2(cur)
        levels.append(cur)
    return SupervisionPyramid(base=base, levels=levels)


def dice_loss(pred, target, eps: float = DICE_EPS) -> tuple[float, np.ndarray]:
    """Soft Dice loss ``1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)`` and its gradient."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"dims differ: {p.shape} vs {t.shape}")
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise ValueError("predictions must lie in [0, 1]")
    inter = 2.0 * float((p * t).sum()) + eps
    denom = float(p.sum()) + float(t.sum()) + eps
    loss = 1.0 - inter / denom
    grad = -(2.0 * t * denom - inter) / denom**2
    return loss, grad


def _seg_terms(pred_full, pred_hr, gt, pyramid):
    if len(pred_hr) != pyramid.depth:
        raise ValueError(f"got {len(pred_hr)} hard-region predictions for {pyramid.depth} levels")
    dice_full, g_full = dice_loss(pred_full, gt)
    hr_terms, g_hr = [], []
    for h, (p, target) in enumerate(zip(pred_hr, pyramid.levels), start=1):
        if np.shape(p) != target.shape:
            raise ValueError(f"level {h}: prediction {np.shape(p)} vs target {target.shape}")
        loss, g = dice_loss(p, target)
        hr_terms.append(loss)
        g_hr.append(g)
    return dice_full, hr_terms, g_full, g_hr


def seg_loss(pred_full, pred_hr, gt, pyramid: SupervisionPyramid) -> LossReport:
    """Whole-airway Dice plus one hard-region Dice per decoder level."""
    dice_full, hr_terms, _, _ = _seg_terms(pred_full, pred_hr, gt, pyramid)
    return LossReport(total=dice_full + float(sum(hr_terms)), dice_full=dice_full, hr_terms=hr_terms)


def seg_loss_grad(pred_full, pred_hr, gt, pyramid: SupervisionPyramid):
    """Like :func:`seg_loss`, also returning the gradient w.r.t. every prediction."""
    dice_full, hr_terms, g_full, g_hr = _seg_terms(pred_full, pred_hr, gt, pyramid)
    report = LossReport(total=dice_full + float(sum(hr_terms)), dice_full=dice_full, hr_terms=hr_terms)
    return report, g_full, g_hr


# Max operators with argmax routing for the backward pass.

def _pool_forward(x):
    pads = [(0, d % 2) for d in x.shape]
    xp = np.pad(x, pads, constant_values=-np.inf)
    nx, ny, nz = (d // 2 for d in xp.shape)
    blocks = xp.reshape(nx, 2, ny, 2, nz, 2).transpose(0, 2, 4, 1, 3, 5).reshape(nx, ny, nz, 8)
    arg = blocks.argmax(axis=3)
    return np.take_along_axis(blocks, arg[..., None], axis=3)[..., 0], arg


def _pool_backward(g, arg, in_shape):
    nx, ny, nz = g.shape
    blocks = np.zeros((nx, ny, nz, 8))
    np.put_along_axis(blocks, arg[..., None], g[..., None], axis=3)
    full = blocks.reshape(nx, ny, nz, 2, 2, 2).transpose(0, 3, 1, 4, 2, 5).reshape(2 * nx, 2 * ny, 2 * nz)
    return full[: in_shape[0], : in_shape[1], : in_shape[2]]


_OFFSETS = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)])


def _dilate_forward(x):
    xp = np.pad(x, 1, constant_values=0.0)
    nx, ny, nz = x.shape
    stack = np.stack([xp[1 + i: 1 + i + nx, 1 + j: 1 + j + ny, 1 + k: 1 + k + nz] for i, j, k in _OFFSETS])
    arg = stack.argmax(axis=0)
    return np.take_along_axis(stack, arg[None], axis=0)[0], arg


def _dilate_backward(g, arg):
    nx, ny, nz = g.shape
    out = np.zeros((nx + 2, ny + 2, nz + 2))
    gx, gy, gz = np.indices(g.shape)
    off = _OFFSETS[arg]
    np.add.at(out, (gx + 1 + off[..., 0], gy + 1 + off[..., 1], gz + 1 + off[..., 2]), g)
    return out[1:-1, 1:-1, 1:-1]


def hard_region_predictions(prob, trachea, H: int):
    """Inflate the predicted hard region exactly as the targets are built.

    The prediction outside the trachea is dilated once, then max-pooled
    ``h`` times for level ``h``. A perfect binary prediction therefore
    reproduces the target pyramid exactly. Returns the level predictions and
    a closure mapping their gradients back onto ``prob``.
    """
    outside = 1.0 - np.asarray(trachea, dtype=np.float64)
    q = prob * outside
    d, d_arg = _dilate_forward(q)
    levels, args, shapes = [], [], []
    cur = d
    for _ in range(H):
        shapes.append(cur.shape)
        cur, arg = _pool_forward(cur)
        levels.append(cur)
        args.append(arg)

    def backward(grads):
        g = np.zeros(levels[-1].shape)
        for h in range(H - 1, -1, -1):
            g = _pool_backward(g + grads[h], args[h], shapes[h])
        return _dilate_backward(g, d_arg) * outside

    return levels, backward


def optimize_logits_demo(
    gt,
    trachea,
    H: int,
    steps: int,
    lr: float,
    optimizer: str = "adam",
) -> tuple[list[float], np.ndarray]:
    """Fit free per-voxel logits to ``gt`` under the multi-level hard-region loss.

    Every level reads the sigmoid of one shared logit volume (see
    :func:`hard_region_predictions`). Dice gradients shrink with volume
    size, so the default update is Adam, whose per-coordinate scaling makes
    ``lr`` a logit step size; ``optimizer="sgd"`` gives plain gradient
    descent.

    Returns the hard Dice score of ``sigmoid(logits) > 0.5`` after every
    step and the final probability volume.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if optimizer not in ("adam", "sgd"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    gt = as_mask(gt)
    trachea = as_mask(trachea)
    pyramid = build_pyramid(hard_region(gt, trachea), H)

    logits = np.zeros(gt.shape)
    m = np.zeros_like(logits)
    v = np.zeros_like(logits)
    b1, b2, eps = 0.9, 0.999, 1e-8
    trajectory = []
    for t in range(1, steps + 1):
        prob = 1.0 / (1.0 + np.exp(-logits))
        pred_hr, back = hard_region_predictions(prob, trachea, H)
        _, g_full, g_hr = seg_loss_grad(prob, pred_hr, gt, pyramid)
        g = (g_full + back(g_hr)) * prob * (1.0 - prob)
        if optimizer == "sgd":
            logits -= lr * g
        else:
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            logits -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        prob = 1.0 / (1.0 + np.exp(-logits))
        trajectory.append(dice_score(prob > 0.5, gt))
    return trajectory, prob


def demo_report(gt, trachea, prob, H: int) -> LossReport:
    """Loss breakdown of a probability volume produced by :func:`optimize_logits_demo`."""
    gt = as_mask(gt)
    trachea = as_mask(trachea)
    pyramid = build_pyramid(hard_region(gt, trachea), H)
    pred_hr, _ = hard_region_predictions(prob, trachea, H)
    return seg_loss(prob, pred_hr, gt, pyramid)
