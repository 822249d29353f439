"""Weighted multitask loss: alpha * weighted BCE (2D) + beta * MSE (3D)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    l2d: float
    l3d: float


class NonFiniteLossError(FloatingPointError):
    pass


def loss_graph(m2d: Tensor, m3d: Tensor, y2d, y3d, alpha=1.0, beta=3.0, w_nochange=0.05, w_change=0.95):
    """Differentiable loss terms; returns ``(total, l2d, l3d)`` Tensors.

    ``m2d`` is (N, 2, H, W) sigmoid scores, ``y2d`` the (N, H, W) binary
    target; both channels are supervised against the one-hot target, halved,
    and weighted per pixel by the target's class weight.
    """
    y2d = np.asarray(y2d)
    y3d = np.asarray(y3d, dtype=np.float64)
    if m2d.shape[0] != y2d.shape[0] or m2d.shape[2:] != y2d.shape[1:] or m3d.shape != y3d.shape:
        raise ValueError(f"prediction/target shapes differ: {m2d.shape}/{y2d.shape}, {m3d.shape}/{y3d.shape}")
    onehot = np.stack([y2d == 0, y2d == 1], axis=1).astype(np.float64)
    weight = np.where(y2d == 1, w_change, w_nochange)[:, None]
    p = ag.clip(m2d, PROB_EPS, 1.0 - PROB_EPS)
    bce = -(onehot * ag.log(p) + (1.0 - onehot) * ag.log(1.0 - p))
    l2d = ag.mean(ag.sum_(bce * (0.5 * weight), axis=1))
    err = m3d - y3d
    l3d = ag.mean(err * err)
    total = l2d * alpha + l3d * beta
    return total, l2d, l3d


def loss(pred, y2d, y3d, tc) -> LossBreakdown:
    """Loss of a PredictionPair (arrays) under a TrainConfig."""
    total, l2d, l3d = loss_graph(
        ag.as_tensor(pred.m2d), ag.as_tensor(pred.m3d), y2d, y3d, tc.alpha, tc.beta, tc.w_nochange, tc.w_change
    )
    out = LossBreakdown(float(total.data), float(l2d.data), float(l3d.data))
    for name in ("l2d", "l3d", "total"):
        if not np.isfinite(getattr(out, name)):
            raise NonFiniteLossError(f"non-finite loss term {name}")
    return out
