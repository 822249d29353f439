"""Central finite-difference check of the analytic gradients.

The finite-difference side only ever evaluates the loss value; it never
touches the backward closures, so it is an independent oracle for them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .losses import loss_graph
from .model import BNState, ModelConfig, ParamSet, forward_graph, grad, init_params, tiny_config


# central stencils: offsets (in units of h) and weights, divided by h
STENCILS = {
    2: ((1, -1), (0.5, -0.5)),
    4: ((2, 1, -1, -2), (-1 / 12, 8 / 12, -8 / 12, 1 / 12)),
}


def central_difference(f, x0: np.ndarray, h: float = 1e-4, indices=None, order: int = 2) -> np.ndarray:
    """Central-difference derivative of ``f`` along each requested coordinate.

    ``order=2`` is the two-point (f(x+h) - f(x-h)) / 2h rule; ``order=4`` the
    five-point rule, whose truncation error is O(h^4) instead of O(h^2).
    """
    offsets, weights = STENCILS[order]
    x = np.array(x0, dtype=np.float64, copy=True)
    idx = range(x.size) if indices is None else indices
    out = np.zeros(x.size)
    for i in idx:
        orig = x[i]
        acc = 0.0
        for k, c in zip(offsets, weights):
            x[i] = orig + k * h
            acc += c * f(x)
        x[i] = orig
        out[i] = acc / h
    return out


def relative_errors(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|); coordinates where both are below ``floor``
    get 0."""
    a, n = np.abs(analytic), np.abs(numeric)
    denom = np.maximum(a, n)
    err = np.zeros_like(denom)
    keep = denom >= floor
    err[keep] = np.abs(analytic - numeric)[keep] / denom[keep]
    return err


@dataclass
class GradCheckResult:
    max_rel_err: float
    worst_index: int
    worst_name: str
    n_params: int
    analytic: np.ndarray
    numeric: np.ndarray


def full_loss_fn(params: ParamSet, x1, x2, y2d, y3d, alpha=1.0, beta=3.0):
    """Loss as a function of leaf tensors (training-mode batch norm)."""
    cfg = params.cfg

    def fn(w):
        bn = BNState(params.buffers, training=True)
        m2d, m3d, _ = forward_graph(x1, x2, w, cfg, bn)
        total, _, _ = loss_graph(m2d, m3d, y2d, y3d, alpha, beta)
        return total

    return fn


def check_model_gradients(
    params: ParamSet, x1, x2, y2d, y3d, alpha=1.0, beta=3.0, h: float = 1e-4, order: int = 4
) -> GradCheckResult:
    fn = full_loss_fn(params, x1, x2, y2d, y3d, alpha, beta)
    _, analytic = grad(fn, params)

    def value(vec):
        w = {k: ag.Tensor(v) for k, v in params.with_flat(vec).arrays.items()}
        return float(fn(w).data)

    numeric = central_difference(value, params.flat(), h, order=order)
    err = relative_errors(analytic, numeric)
    worst = int(np.argmax(err))
    name, idx = params.index_of(worst)
    return GradCheckResult(float(err[worst]), worst, f"{name}{[int(i) for i in idx]}", params.size, analytic, numeric)


def tiny_problem(seed: int = 0, cfg: ModelConfig | None = None):
    """One 16x16 sample cut from a synthetic tile, plus fresh tiny params."""
    from .augment import plain_sample
    from .data_core import SynthSpec, synthesize_tile

    cfg = cfg or tiny_config()
    tile = synthesize_tile(SynthSpec(seed=seed, n_tiles=1), 0)
    sample = plain_sample(tile, cfg.input_size, h_scale=35.0)
    params = init_params(cfg, seed)
    return params, sample


def run_gradcheck(seed: int = 0, cfg: ModelConfig | None = None, h: float = 1e-4, order: int = 4) -> GradCheckResult:
    params, s = tiny_problem(seed, cfg)
    return check_model_gradients(params, s.x1[None], s.x2[None], s.y2d[None], s.y3d[None], h=h, order=order)
