"""Optimisation: AdamW steps on the weighted multitask loss, the epoch
loop, and bit-exact checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .augment import AugSpec, make_sample
from .data_core import DatasetManifest, read_tile
from .losses import LossBreakdown, NonFiniteLossError, loss, loss_graph
from .model import BNState, ModelConfig, NonFiniteGradientError, ParamSet, forward_graph, grad, init_params, param_specs

log = logging.getLogger(__name__)

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "LossBreakdown",
    "OptimizerState",
    "TrainConfig",
    "load_checkpoint",
    "loss",
    "save_checkpoint",
    "train_loop",
    "train_step",
]

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
CKPT_MAGIC = b"MTCK"
CKPT_VERSION = 1
DECAY_KINDS = ("conv", "linear", "pe")


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    beta: float = 3.0
    w_nochange: float = 0.05
    w_change: float = 0.95
    lr: float = 1e-4
    batch_size: int = 15
    epochs: int = 300
    weight_decay: float = 0.01
    seed: int = 0
    checkpoint_every: int = 0  # steps; 0 disables intermediate checkpoints
    max_steps: int = 0  # 0 = no cap
    augment: bool = True
    eval_split: str = "val"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not (0 < self.w_nochange < 1 and 0 < self.w_change < 1):
            raise ValueError("class weights must lie in (0, 1)")
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        """Desk-scale overrides for overfitting a handful of tiles with the
        tiny model: 500 full-batch steps on 8 tiles, no augmentation, with
        the elevation term weighted up so cRMSE converges alongside F1."""
        base = dict(lr=2e-3, batch_size=8, epochs=500, beta=10.0, augment=False, eval_split="")
        base.update(kw)
        return cls(**base)


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "OptimizerState":
        return cls(np.zeros(n), np.zeros(n), 0)


def _batch_arrays(batch):
    x1 = np.stack([s.x1 for s in batch])
    x2 = np.stack([s.x2 for s in batch])
    y2d = np.stack([s.y2d for s in batch])
    y3d = np.stack([s.y3d for s in batch])
    return x1, x2, y2d, y3d


def batch_loss_and_grad(params: ParamSet, batch, tc: TrainConfig):
    """Loss terms, flat gradient and batch-norm updates for one batch.

    The batch goes through the network in one pass (batch-norm statistics
    are pooled over the batch); the pixel-mean loss is then the average of
    the per-sample losses.
    """
    x1, x2, y2d, y3d = _batch_arrays(batch)
    parts = {}

    def fn(w):
        bn = BNState(params.buffers, training=True)
        m2d, m3d, _ = forward_graph(x1, x2, w, params.cfg, bn)
        total, l2d, l3d = loss_graph(m2d, m3d, y2d, y3d, tc.alpha, tc.beta, tc.w_nochange, tc.w_change)
        parts.update(l2d=float(l2d.data), l3d=float(l3d.data), bn=bn.updates)
        return total

    total, g = grad(fn, params)
    lb = LossBreakdown(total, parts["l2d"], parts["l3d"])
    for name in ("l2d", "l3d", "total"):
        if not math.isfinite(getattr(lb, name)):
            raise NonFiniteLossError(f"non-finite loss term {name}")
    return lb, g, parts["bn"]


def adamw_update(flat, g, opt: OptimizerState, lr, weight_decay, decay_mask):
    """One decoupled-weight-decay Adam update; returns (new_flat, new_state)."""
    step = opt.step + 1
    m = BETA1 * opt.m + (1 - BETA1) * g
    v = BETA2 * opt.v + (1 - BETA2) * g * g
    mhat = m / (1 - BETA1**step)
    vhat = v / (1 - BETA2**step)
    new = flat * np.where(decay_mask, 1.0 - lr * weight_decay, 1.0)
    new = new - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
    return new, OptimizerState(m, v, step)


def decay_mask(params: ParamSet) -> np.ndarray:
    return np.isin(params.kinds(), DECAY_KINDS)


def train_step(params: ParamSet, opt: OptimizerState, batch, tc: TrainConfig):
    """One AdamW step; returns (params', opt', LossBreakdown).  Inputs are
    not modified."""
    lb, g, bn_updates = batch_loss_and_grad(params, batch, tc)
    new_flat, new_opt = adamw_update(params.flat(), g, opt, tc.lr, tc.weight_decay, decay_mask(params))
    new_params = params.with_flat(new_flat)
    new_params.buffers.update({k: v.copy() for k, v in bn_updates.items()})
    return new_params, new_opt, lb


# ---------------------------------------------------------------- checkpoints


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    params: ParamSet
    opt: OptimizerState
    train_cfg: TrainConfig
    aug: AugSpec = field(default_factory=AugSpec)
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return _to_jsonable(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _aug_from_dict(d: dict) -> AugSpec:
    d = dict(d)
    d["scale"] = tuple(d["scale"])
    return AugSpec(**d)


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    buf_names = sorted(ck.params.buffers)
    header = {
        "model_cfg": ck.model_cfg.to_dict(),
        "train_cfg": _to_jsonable(ck.train_cfg),
        "aug": _to_jsonable(ck.aug),
        "step": int(ck.step),
        "opt_step": int(ck.opt.step),
        "rng_state": _to_jsonable(ck.rng_state),
        "extra": _to_jsonable(ck.extra),
        "n_params": int(ck.params.size),
        "buffers": [[k, int(ck.params.buffers[k].size)] for k in buf_names],
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    arrays = [ck.params.flat(), ck.opt.m, ck.opt.v] + [ck.params.buffers[k].ravel() for k in buf_names]
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    body = CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hdr)) + hdr + payload
    return body + struct.pack("<I", zlib.crc32(body))


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 20 or data[:4] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or too short)")
    version, hlen = struct.unpack_from("<IQ", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} unsupported (expected {CKPT_VERSION})")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError("checkpoint corrupted: checksum mismatch or truncated file")
    start = 16
    header = json.loads(data[start : start + hlen])
    off = start + hlen
    cfg = ModelConfig.from_dict(header["model_cfg"])
    n = header["n_params"]
    sizes = [n, n, n] + [s for _, s in header["buffers"]]
    if off + 8 * sum(sizes) + 4 != len(data):
        raise CheckpointError("checkpoint corrupted: payload length mismatch")
    arrs = []
    for s in sizes:
        arrs.append(np.frombuffer(data, dtype="<f8", count=s, offset=off).astype(np.float64))
        off += 8 * s
    params = ParamSet(cfg, {s.name: np.zeros(s.shape) for s in param_specs(cfg)}).with_flat(arrs[0])
    params.buffers = {k: a.copy() for (k, _), a in zip(header["buffers"], arrs[3:])}
    tc = header["train_cfg"]
    return Checkpoint(
        cfg,
        params,
        OptimizerState(arrs[1].copy(), arrs[2].copy(), header["opt_step"]),
        TrainConfig(**tc),
        _aug_from_dict(header["aug"]),
        header["step"],
        header["rng_state"],
        header["extra"],
    )


def save_checkpoint(ck: Checkpoint, path) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(ck))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read())


def new_checkpoint(cfg: ModelConfig, tc: TrainConfig, aug: AugSpec | None = None) -> Checkpoint:
    params = init_params(cfg, tc.seed)
    return Checkpoint(
        cfg, params, OptimizerState.zeros(params.size), tc, aug or AugSpec(target_size=cfg.input_size, seed=tc.seed),
        0, {"scheme": "counter", "seed": tc.seed}, {"log": [], "epoch_sums": [0.0, 0.0, 0.0, 0]},
    )


# ---------------------------------------------------------------- loop

LOG_FIELDS = ("epoch", "l2d", "l3d", "total", "F1", "IoU", "RMSE", "cRMSE")


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, zlib.crc32(b"shuffle")]).permutation(n)


def write_log_csv(rows, path) -> None:
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow(["" if r.get(k) is None else r[k] for k in LOG_FIELDS])


def train_loop(
    manifest: DatasetManifest,
    cfg: ModelConfig,
    tc: TrainConfig,
    aug: AugSpec | None = None,
    callbacks=(),
    out_dir=None,
    resume: Checkpoint | None = None,
    stop_at_step: int | None = None,
):
    """Train on the manifest's train split.

    Returns ``(checkpoint, log_rows)``.  Epoch e shuffles the train tiles
    with a stream derived from (seed, e) and each sample's augmentation
    stream from (aug seed, tile, e), so the run is a pure function of its
    inputs and can resume at any step.  ``callbacks`` are called as
    ``cb(event, checkpoint, info)`` with events "step" and "epoch".
    ``stop_at_step`` interrupts the run after that global step (used to
    produce resumable intermediate checkpoints).
    """
    from .metrics import evaluate_split

    ck = resume if resume is not None else new_checkpoint(cfg, tc, aug)
    if ck.model_cfg != cfg:
        raise ValueError("checkpoint model config does not match the requested config")
    if resume is not None:
        # the stored run defines the optimisation; only when to stop is taken from the caller
        ck.train_cfg = ck.train_cfg.replace(epochs=tc.epochs, max_steps=tc.max_steps,
                                            checkpoint_every=tc.checkpoint_every)
    tc, aug = ck.train_cfg, ck.aug
    train_ids = sorted(manifest.split("train"))
    if tc.epochs and not train_ids:
        raise ValueError("train split is empty")
    tiles = {tid: read_tile(manifest, tid) for tid in train_ids}
    manifest.check_h_scale(tiles.values())
    eval_ids = manifest.split(tc.eval_split) if tc.eval_split else []
    eval_tiles = {tid: read_tile(manifest, tid) for tid in eval_ids}
    n = len(train_ids)
    spe = math.ceil(n / tc.batch_size) if n else 0
    total_steps = spe * tc.epochs
    if tc.max_steps:
        total_steps = min(total_steps, tc.max_steps)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    ck.extra["h_scale"] = manifest.h_scale
    rows = ck.extra.setdefault("log", [])
    sums = ck.extra.setdefault("epoch_sums", [0.0, 0.0, 0.0, 0])
    while ck.step < total_steps:
        epoch, b = divmod(ck.step, spe)
        order = epoch_order(tc.seed, epoch, n)
        ids = [train_ids[i] for i in order[b * tc.batch_size : (b + 1) * tc.batch_size]]
        batch = [make_sample(tiles[t], aug, manifest.h_scale, epoch, train=tc.augment) for t in ids]
        try:
            params, opt, lb = train_step(ck.params, ck.opt, batch, tc)
        except NonFiniteGradientError as e:
            raise NonFiniteGradientError(e.index, e.name) from None
        ck.params, ck.opt, ck.step = params, opt, ck.step + 1
        sums[0] += lb.l2d
        sums[1] += lb.l3d
        sums[2] += lb.total
        sums[3] += 1
        for cb in callbacks:
            cb("step", ck, {"epoch": epoch, "loss": lb})
        # rows are logged at epoch boundaries only, so a run cut short by
        # max_steps and later resumed logs exactly what a straight run does
        epoch_done = ck.step % spe == 0
        if epoch_done:
            k = max(sums[3], 1)
            row = {"epoch": epoch, "l2d": sums[0] / k, "l3d": sums[1] / k, "total": sums[2] / k}
            if eval_ids:
                rep = evaluate_split(ck.params, manifest, tc.eval_split, eval_tiles)
                row.update(F1=rep.f1, IoU=rep.iou, RMSE=rep.rmse, cRMSE=rep.crmse)
            rows.append(row)
            sums[:] = [0.0, 0.0, 0.0, 0]
            log.info("epoch %d: %s", epoch, row)
            for cb in callbacks:
                cb("epoch", ck, row)
        ck.rng_state = {"scheme": "counter", "seed": tc.seed, "epoch": ck.step // spe if spe else 0}
        if out_dir and tc.checkpoint_every and ck.step % tc.checkpoint_every == 0:
            save_checkpoint(ck, os.path.join(out_dir, f"ckpt_{ck.step:06d}.mtck"))
        if stop_at_step is not None and ck.step >= stop_at_step:
            break
    if out_dir:
        save_checkpoint(ck, os.path.join(out_dir, "final.mtck"))
        write_log_csv(rows, os.path.join(out_dir, "metrics.csv"))
    return ck, rows
