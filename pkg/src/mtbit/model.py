"""The MTBIT network.

A shared (Siamese) residual CNN turns each epoch image into a feature map,
a spatial-attention tokenizer compresses each map into L tokens, a
transformer encoder mixes the 2L tokens of both epochs, a cross-attention
decoder projects each epoch's tokens back onto its pixel features, and two
3x3 convolutional heads map the feature difference to a two-channel change
score (sigmoid) and a normalised elevation change (tanh).

Arrays are channel-first: images are (N, B, H, W), features (N, C, H', W'),
tokens (N, L, C).
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor

DIFF_MODES = ("signed", "absolute")
FUSE_MODES = ("difference", "concat")
UPSAMPLE_MODES = ("bilinear", "learnable")
DECODER_PE_MODES = ("none", "shared", "per_layer")
BLOCK_TYPES = ("basic", "bottleneck")
ACTIVATIONS = ("relu", "gelu")


@dataclass(frozen=True)
class BackboneSpec:
    """Residual CNN layout: stem conv, optional max-pool, residual stages.

    ``stages`` holds one ``(width, n_blocks, stride)`` triple per stage.  For
    bottleneck blocks ``width`` is the inner width and the stage outputs
    ``4 * width`` channels.
    """

    stem_channels: int = 64
    stem_kernel: int = 7
    stem_stride: int = 2
    maxpool: bool = True
    stages: tuple = ((64, 2, 1), (128, 2, 1), (256, 2, 1), (512, 2, 1))
    block: str = "basic"
    activation: str = "relu"

    @property
    def stride(self) -> int:
        s = self.stem_stride * (2 if self.maxpool else 1)
        for _, _, st in self.stages:
            s *= st
        return s

    @property
    def out_channels(self) -> int:
        if not self.stages:
            return self.stem_channels
        width = self.stages[-1][0]
        return 4 * width if self.block == "bottleneck" else width

    @classmethod
    def resnet(cls, depth: int) -> "BackboneSpec":
        """Standard ResNet stage plan with all residual stages at stride 1.

        Total stride is 4 (stem + max-pool), matching the feature stride the
        tokenizer expects.
        """
        blocks = {18: (2, 2, 2, 2), 34: (3, 4, 6, 3), 50: (3, 4, 6, 3)}[depth]
        widths = (64, 128, 256, 512)
        return cls(
            stages=tuple((w, n, 1) for w, n in zip(widths, blocks)),
            block="bottleneck" if depth >= 50 else "basic",
        )

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        d = dict(d)
        d["stages"] = tuple(tuple(int(v) for v in st) for st in d.get("stages", ()))
        return cls(**d)


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 256
    bands: int = 3
    stride: int = 4
    channels: int = 32
    token_len: int = 4
    enc_depth: int = 1
    dec_depth: int = 8
    enc_heads: int = 8
    enc_head_dim: int = 8
    dec_heads: int = 8
    dec_head_dim: int = 16
    mlp_ratio: int = 2
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    diff_mode: str = "signed"
    fuse_mode: str = "difference"
    upsample_mode: str = "bilinear"
    decoder_pe: str = "shared"
    prenorm: bool = True

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            object.__setattr__(self, "backbone", BackboneSpec.from_dict(self.backbone))
        self.validate()

    def validate(self):
        dims = (
            self.input_size, self.bands, self.stride, self.channels, self.token_len,
            self.enc_heads, self.enc_head_dim, self.dec_heads, self.dec_head_dim, self.mlp_ratio,
        )
        if min(dims) < 1 or self.enc_depth < 0 or self.dec_depth < 0:
            raise ValueError("all model dimensions must be >= 1")
        if self.input_size % self.stride:
            raise ValueError(f"input size {self.input_size} not divisible by stride {self.stride}")
        if self.backbone.stride != self.stride:
            raise ValueError(f"backbone stride {self.backbone.stride} != configured stride {self.stride}")
        if self.backbone.block not in BLOCK_TYPES:
            raise ValueError(f"unknown block type {self.backbone.block!r}")
        if self.backbone.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.backbone.activation!r}")
        for name, value, allowed in (
            ("diff_mode", self.diff_mode, DIFF_MODES),
            ("fuse_mode", self.fuse_mode, FUSE_MODES),
            ("upsample_mode", self.upsample_mode, UPSAMPLE_MODES),
            ("decoder_pe", self.decoder_pe, DECODER_PE_MODES),
        ):
            if value not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {value!r}")

    @property
    def feature_size(self) -> int:
        return self.input_size // self.stride

    @property
    def head_in_channels(self) -> int:
        return 2 * self.channels if self.fuse_mode == "concat" else self.channels

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["backbone"]["stages"] = [list(s) for s in self.backbone.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


def paper_config() -> ModelConfig:
    """Selected configuration: encoder depth 1, 4 tokens, decoder depth 8,
    decoder head dim 16, signed difference, bilinear upsampling."""
    return ModelConfig()


def tiny_config(**overrides) -> ModelConfig:
    """Small configuration for gradient checks and desk-scale training.

    Inputs are 16x16 and the backbone keeps full resolution (stride 1), so
    no upsampling blur limits how sharply building edges can be fit.  The
    backbone uses GELU so the whole network is smooth and a central
    difference with step 1e-4 is a valid reference everywhere.
    """
    base = dict(
        input_size=16, bands=3, stride=1, channels=8, token_len=2, enc_depth=1, dec_depth=1,
        enc_heads=2, enc_head_dim=4, dec_heads=2, dec_head_dim=4, mlp_ratio=2,
        backbone=BackboneSpec(stem_channels=8, stem_kernel=3, stem_stride=1, maxpool=False,
                              stages=((8, 1, 1),), activation="gelu"),
    )
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------- parameters


class ParamSpec(NamedTuple):
    name: str
    shape: tuple
    kind: str  # conv | linear | bias | norm | pe


def _backbone_specs(cfg: ModelConfig) -> list[ParamSpec]:
    bb = cfg.backbone
    specs = []

    def conv(name, cout, cin, k):
        specs.append(ParamSpec(f"{name}.w", (cout, cin, k, k), "conv"))

    def bn(name, ch):
        specs.append(ParamSpec(f"{name}.gamma", (ch,), "norm"))
        specs.append(ParamSpec(f"{name}.beta", (ch,), "norm"))

    conv("backbone.stem.conv", bb.stem_channels, cfg.bands, bb.stem_kernel)
    bn("backbone.stem.bn", bb.stem_channels)
    cin = bb.stem_channels
    for si, (width, nblocks, stride) in enumerate(bb.stages):
        cout = 4 * width if bb.block == "bottleneck" else width
        for bi in range(nblocks):
            pre = f"backbone.stage{si}.block{bi}"
            st = stride if bi == 0 else 1
            if bb.block == "basic":
                conv(f"{pre}.conv1", width, cin, 3)
                bn(f"{pre}.bn1", width)
                conv(f"{pre}.conv2", width, width, 3)
                bn(f"{pre}.bn2", width)
            else:
                conv(f"{pre}.conv1", width, cin, 1)
                bn(f"{pre}.bn1", width)
                conv(f"{pre}.conv2", width, width, 3)
                bn(f"{pre}.bn2", width)
                conv(f"{pre}.conv3", cout, width, 1)
                bn(f"{pre}.bn3", cout)
            if st != 1 or cin != cout:
                conv(f"{pre}.down", cout, cin, 1)
                bn(f"{pre}.down_bn", cout)
            cin = cout
    specs.append(ParamSpec("backbone.proj.w", (cfg.channels, bb.out_channels, 1, 1), "conv"))
    specs.append(ParamSpec("backbone.proj.b", (cfg.channels,), "bias"))
    return specs


def _attention_layer_specs(pre, cfg, heads, dim, pe_shape) -> list[ParamSpec]:
    c = cfg.channels
    hid = cfg.mlp_ratio * c
    specs = [
        ParamSpec(f"{pre}.norm1.gamma", (c,), "norm"),
        ParamSpec(f"{pre}.norm1.beta", (c,), "norm"),
        ParamSpec(f"{pre}.wq", (c, heads * dim), "linear"),
        ParamSpec(f"{pre}.wk", (c, heads * dim), "linear"),
        ParamSpec(f"{pre}.wv", (c, heads * dim), "linear"),
    ]
    if pe_shape is not None:
        specs.append(ParamSpec(f"{pre}.pe", pe_shape, "pe"))
    specs += [
        ParamSpec(f"{pre}.we", (heads * dim, c), "linear"),
        ParamSpec(f"{pre}.norm2.gamma", (c,), "norm"),
        ParamSpec(f"{pre}.norm2.beta", (c,), "norm"),
        ParamSpec(f"{pre}.mlp.w1", (c, hid), "linear"),
        ParamSpec(f"{pre}.mlp.b1", (hid,), "bias"),
        ParamSpec(f"{pre}.mlp.w2", (hid, c), "linear"),
        ParamSpec(f"{pre}.mlp.b2", (c,), "bias"),
    ]
    return specs


def param_specs(cfg: ModelConfig) -> list[ParamSpec]:
    """Canonical ordered enumeration of every learnable tensor."""
    specs = _backbone_specs(cfg)
    specs.append(ParamSpec("tokenizer.w", (cfg.channels, cfg.token_len), "linear"))
    specs.append(ParamSpec("tokenizer.b", (cfg.token_len,), "bias"))
    # one encoding per token slot, shared by both epochs' halves of T*
    enc_pe = (cfg.enc_heads, cfg.token_len, cfg.enc_head_dim)
    for i in range(cfg.enc_depth):
        specs += _attention_layer_specs(f"encoder.{i}", cfg, cfg.enc_heads, cfg.enc_head_dim, enc_pe)
    n_pix = cfg.feature_size**2
    dec_pe = (cfg.dec_heads, n_pix, cfg.dec_head_dim)
    if cfg.decoder_pe == "shared" and cfg.dec_depth > 0:
        specs.append(ParamSpec("decoder.pe", dec_pe, "pe"))
    for i in range(cfg.dec_depth):
        layer_pe = dec_pe if cfg.decoder_pe == "per_layer" else None
        specs += _attention_layer_specs(f"decoder.{i}", cfg, cfg.dec_heads, cfg.dec_head_dim, layer_pe)
    cin = cfg.head_in_channels
    if cfg.upsample_mode == "learnable":
        specs.append(ParamSpec("upsample.w", (cin, cin, cfg.stride, cfg.stride), "conv"))
        specs.append(ParamSpec("upsample.b", (cin,), "bias"))
    specs += [
        ParamSpec("head2d.w", (2, cin, 3, 3), "conv"),
        ParamSpec("head2d.b", (2,), "bias"),
        ParamSpec("head3d.w", (1, cin, 3, 3), "conv"),
        ParamSpec("head3d.b", (1,), "bias"),
    ]
    return specs


def param_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s.shape) for s in param_specs(cfg)))


def bn_layers(cfg: ModelConfig) -> list[tuple[str, int]]:
    """Names and widths of the batch-norm layers (they own running stats)."""
    out = []
    for s in param_specs(cfg):
        if s.name.startswith("backbone.") and s.name.endswith(".gamma"):
            out.append((s.name[: -len(".gamma")], s.shape[0]))
    return out


class ParamSet:
    """Ordered named parameter arrays plus batch-norm running statistics.

    The flat view concatenates parameters in ``param_specs`` order; buffers
    (running mean/var) are not learnable and are kept out of it.
    """

    def __init__(self, cfg: ModelConfig, arrays: dict, buffers: dict | None = None):
        self.cfg = cfg
        self.specs = param_specs(cfg)
        missing = [s.name for s in self.specs if s.name not in arrays]
        if missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        self.arrays = {s.name: np.asarray(arrays[s.name], dtype=np.float64).reshape(s.shape) for s in self.specs}
        if buffers is None:
            buffers = {}
            for name, ch in bn_layers(cfg):
                buffers[f"{name}.mean"] = np.zeros(ch)
                buffers[f"{name}.var"] = np.ones(ch)
        self.buffers = {k: np.asarray(v, dtype=np.float64) for k, v in buffers.items()}

    def __getitem__(self, name):
        return self.arrays[name]

    def __len__(self):
        return len(self.specs)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    @property
    def size(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[s.name].ravel() for s in self.specs])

    def with_flat(self, vec: np.ndarray) -> "ParamSet":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ValueError(f"expected {self.size} values, got {vec.size}")
        arrays, off = {}, 0
        for s in self.specs:
            n = int(np.prod(s.shape))
            arrays[s.name] = vec[off : off + n].reshape(s.shape).copy()
            off += n
        return ParamSet(self.cfg, arrays, {k: v.copy() for k, v in self.buffers.items()})

    def copy(self) -> "ParamSet":
        return ParamSet(
            self.cfg, {k: v.copy() for k, v in self.arrays.items()}, {k: v.copy() for k, v in self.buffers.items()}
        )

    def index_of(self, flat_index: int) -> tuple[str, tuple]:
        """Map a flat coordinate back to (parameter name, element index)."""
        off = 0
        for s in self.specs:
            n = int(np.prod(s.shape))
            if flat_index < off + n:
                return s.name, np.unravel_index(flat_index - off, s.shape)
            off += n
        raise IndexError(flat_index)

    def slices(self) -> dict[str, slice]:
        out, off = {}, 0
        for s in self.specs:
            n = int(np.prod(s.shape))
            out[s.name] = slice(off, off + n)
            off += n
        return out

    def kinds(self) -> np.ndarray:
        """Per-coordinate parameter kind, aligned with ``flat()``."""
        return np.concatenate([np.full(int(np.prod(s.shape)), s.kind, dtype=object) for s in self.specs])

    def leaves(self) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=True) for k, v in self.arrays.items()}

    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.arrays.items()}


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamSet:
    """Fan-in scaled uniform initialisation.

    Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases and norm shifts 0,
    norm scales 1; positional encodings ~ N(0, 0.02^2).
    """
    rng = np.random.default_rng(seed)
    arrays = {}
    for s in param_specs(cfg):
        if s.kind == "norm":
            arrays[s.name] = np.ones(s.shape) if s.name.endswith("gamma") else np.zeros(s.shape)
        elif s.kind == "bias":
            arrays[s.name] = np.zeros(s.shape)
        elif s.kind == "pe":
            arrays[s.name] = 0.02 * rng.standard_normal(s.shape)
        else:
            if s.kind == "linear":
                fan_in = s.shape[0]
            elif s.name == "upsample.w":
                fan_in = s.shape[0]
            else:
                fan_in = int(np.prod(s.shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            arrays[s.name] = rng.uniform(-bound, bound, size=s.shape)
    return ParamSet(cfg, arrays)


# ---------------------------------------------------------------- forward pieces


class BNState:
    """Batch-norm mode for one forward pass.

    ``training=True`` normalises with batch statistics and records the
    updated running estimates in ``updates``; otherwise the stored running
    estimates are used.
    """

    def __init__(self, buffers: dict, training: bool, momentum: float = 0.1, eps: float = 1e-5):
        self.buffers = buffers
        self.training = training
        self.momentum = momentum
        self.eps = eps
        self.updates: dict[str, np.ndarray] = {}

    def __call__(self, name, x, w):
        gamma, beta = w[f"{name}.gamma"], w[f"{name}.beta"]
        if not self.training:
            return ag.batch_norm(x, gamma, beta, self.eps, (self.buffers[f"{name}.mean"], self.buffers[f"{name}.var"]))
        out, mu, var = ag.batch_norm(x, gamma, beta, self.eps)
        n = x.data.size // x.shape[1]
        unbiased = var * n / max(n - 1, 1)
        m = self.momentum
        self.updates[f"{name}.mean"] = (1 - m) * self.buffers[f"{name}.mean"] + m * mu
        self.updates[f"{name}.var"] = (1 - m) * self.buffers[f"{name}.var"] + m * unbiased
        return out


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 3 else x


def backbone_forward(x, w: dict, cfg: ModelConfig, bn: BNState) -> Tensor:
    """Residual CNN: (N, B, H, W) -> (N, C, H/s, W/s)."""
    bb = cfg.backbone
    act = ag.relu if bb.activation == "relu" else ag.gelu
    x = ag.as_tensor(x)
    if x.shape[1:] != (cfg.bands, cfg.input_size, cfg.input_size):
        raise ValueError(f"expected input (N, {cfg.bands}, {cfg.input_size}, {cfg.input_size}), got {x.shape}")
    h = ag.conv2d(x, w["backbone.stem.conv.w"], stride=bb.stem_stride, padding=bb.stem_kernel // 2)
    h = act(bn("backbone.stem.bn", h, w))
    if bb.maxpool:
        h = ag.max_pool2d(h, 3, 2, 1)
    cin = bb.stem_channels
    for si, (width, nblocks, stride) in enumerate(bb.stages):
        cout = 4 * width if bb.block == "bottleneck" else width
        for bi in range(nblocks):
            pre = f"backbone.stage{si}.block{bi}"
            st = stride if bi == 0 else 1
            if bb.block == "basic":
                y = act(bn(f"{pre}.bn1", ag.conv2d(h, w[f"{pre}.conv1.w"], stride=st, padding=1), w))
                y = bn(f"{pre}.bn2", ag.conv2d(y, w[f"{pre}.conv2.w"], padding=1), w)
            else:
                y = act(bn(f"{pre}.bn1", ag.conv2d(h, w[f"{pre}.conv1.w"]), w))
                y = act(bn(f"{pre}.bn2", ag.conv2d(y, w[f"{pre}.conv2.w"], stride=st, padding=1), w))
                y = bn(f"{pre}.bn3", ag.conv2d(y, w[f"{pre}.conv3.w"]), w)
            if st != 1 or cin != cout:
                h = bn(f"{pre}.down_bn", ag.conv2d(h, w[f"{pre}.down.w"], stride=st), w)
            h = act(h + y)
            cin = cout
    return ag.conv2d(h, w["backbone.proj.w"], w["backbone.proj.b"])


def tokenize(z: Tensor, w: dict, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Spatial-attention pooling of a feature map into L tokens.

    Returns ``(tokens (N, L, C), attention (N, P, L))`` where each attention
    column is a softmax over the P = H'W' positions.
    """
    n, c = z.shape[:2]
    zf = z.reshape(n, c, -1).transpose(0, 2, 1)
    logits = zf @ w["tokenizer.w"] + w["tokenizer.b"]
    attn = ag.softmax(logits, axis=1)
    tokens = attn.transpose(0, 2, 1) @ zf
    return tokens, attn


def _split_heads(t: Tensor, heads: int, dim: int) -> Tensor:
    n, m = t.shape[:2]
    return t.reshape(n, m, heads, dim).transpose(0, 2, 1, 3)


def _merge_heads(t: Tensor) -> Tensor:
    n, h, m, d = t.shape
    return t.transpose(0, 2, 1, 3).reshape(n, m, h * d)


def multihead_attention(q_in, kv_in, w, pre, heads, dim, pe=None, return_weights=False):
    """Concat_h(softmax(Q_h K_h^T / sqrt(d)) V_h + PE_h) W^E."""
    q = _split_heads(q_in @ w[f"{pre}.wq"], heads, dim)
    k = _split_heads(kv_in @ w[f"{pre}.wk"], heads, dim)
    v = _split_heads(kv_in @ w[f"{pre}.wv"], heads, dim)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dim))
    att = ag.softmax(scores, axis=-1)
    out = att @ v
    if pe is not None:
        out = out + pe
    out = _merge_heads(out) @ w[f"{pre}.we"]
    return (out, att) if return_weights else out


def _norm(x, w, name, cfg):
    if not cfg.prenorm:
        return x
    return ag.layer_norm(x, w[f"{name}.gamma"], w[f"{name}.beta"])


def _mlp(x, w, pre):
    h = ag.gelu(x @ w[f"{pre}.mlp.w1"] + w[f"{pre}.mlp.b1"])
    return h @ w[f"{pre}.mlp.w2"] + w[f"{pre}.mlp.b2"]


def encode(tokens: Tensor, w: dict, cfg: ModelConfig) -> Tensor:
    """Transformer encoder over the 2L concatenated tokens."""
    t = tokens
    for i in range(cfg.enc_depth):
        pre = f"encoder.{i}"
        u = _norm(t, w, f"{pre}.norm1", cfg)
        pe = w[f"{pre}.pe"]
        reps = t.shape[1] // pe.shape[1]
        if reps > 1:
            pe = ag.concat([pe] * reps, axis=1)
        t = t + multihead_attention(u, u, w, pre, cfg.enc_heads, cfg.enc_head_dim, pe)
        t = t + _mlp(_norm(t, w, f"{pre}.norm2", cfg), w, pre)
    return t


def decode(z: Tensor, s: Tensor, w: dict, cfg: ModelConfig) -> Tensor:
    """Cross-attention decoder: pixels of ``z`` query the tokens ``s``."""
    n, c, hh, ww = z.shape
    x = z.reshape(n, c, -1).transpose(0, 2, 1)
    for i in range(cfg.dec_depth):
        pre = f"decoder.{i}"
        if cfg.decoder_pe == "shared":
            pe = w["decoder.pe"]
        elif cfg.decoder_pe == "per_layer":
            pe = w[f"{pre}.pe"]
        else:
            pe = None
        # the same pre-norm is applied to queries and to keys/values
        xq = _norm(x, w, f"{pre}.norm1", cfg)
        sk = _norm(s, w, f"{pre}.norm1", cfg)
        x = x + multihead_attention(xq, sk, w, pre, cfg.dec_heads, cfg.dec_head_dim, pe)
        x = x + _mlp(_norm(x, w, f"{pre}.norm2", cfg), w, pre)
    return x.transpose(0, 2, 1).reshape(n, c, hh, ww)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) half-pixel-centred linear interpolation matrix."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[i, i0] += 1.0 - t
        m[i, i1] += t
    return m


def upsample(d: Tensor, w: dict, cfg: ModelConfig) -> Tensor:
    if cfg.upsample_mode == "learnable":
        return ag.conv_transpose2d(d, w["upsample.w"], w["upsample.b"], cfg.stride)
    h = bilinear_matrix(d.shape[2], cfg.input_size)
    return ag.as_tensor(h) @ d @ ag.as_tensor(np.ascontiguousarray(h.T))


def fuse(y1: Tensor, y2: Tensor, cfg: ModelConfig) -> Tensor:
    if y1.shape != y2.shape:
        raise ValueError(f"feature shapes differ: {y1.shape} vs {y2.shape}")
    if cfg.fuse_mode == "concat":
        return ag.concat([y1, y2], axis=1)
    d = y2 - y1
    return ag.abs_(d) if cfg.diff_mode == "absolute" else d


def heads_forward(y1: Tensor, y2: Tensor, w: dict, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Returns (m2d (N, 2, H, W) in (0,1), m3d (N, H, W) in (-1,1))."""
    d = upsample(fuse(y1, y2, cfg), w, cfg)
    m2d = ag.sigmoid(ag.conv2d(d, w["head2d.w"], w["head2d.b"], padding=1))
    pre3 = ag.conv2d(d, w["head3d.w"], w["head3d.b"], padding=1)
    m3d = ag.tanh(pre3.reshape(pre3.shape[0], pre3.shape[2], pre3.shape[3]))
    return m2d, m3d


# ---------------------------------------------------------------- full network


@dataclass
class PredictionPair:
    m2d: np.ndarray  # (N, 2, H, W)
    m3d: np.ndarray  # (N, H, W)


@dataclass
class ForwardTrace:
    attention: tuple  # per epoch, (N, L, H', W')
    tokens: np.ndarray  # T*, (N, 2L, C)
    encoded: np.ndarray  # S, (N, 2L, C)
    y1: np.ndarray
    y2: np.ndarray


def forward_graph(x1, x2, w: dict, cfg: ModelConfig, bn: BNState, trace: bool = False):
    """Differentiable forward pass on Tensors; returns (m2d, m3d, trace)."""
    x1, x2 = _as_batch(x1), _as_batch(x2)
    if x1.shape != x2.shape:
        raise ValueError(f"epoch images differ in shape: {x1.shape} vs {x2.shape}")
    n = x1.shape[0]
    feats = backbone_forward(np.concatenate([x1, x2], axis=0), w, cfg, bn)
    z1, z2 = feats[:n], feats[n:]
    t1, a1 = tokenize(z1, w, cfg)
    t2, a2 = tokenize(z2, w, cfg)
    tstar = ag.concat([t1, t2], axis=1)
    s = encode(tstar, w, cfg)
    ell = cfg.token_len
    y1 = decode(z1, s[:, :ell], w, cfg)
    y2 = decode(z2, s[:, ell:], w, cfg)
    m2d, m3d = heads_forward(y1, y2, w, cfg)
    tr = None
    if trace:
        fs = cfg.feature_size
        maps = tuple(a.data.transpose(0, 2, 1).reshape(n, ell, fs, fs).copy() for a in (a1, a2))
        tr = ForwardTrace(maps, tstar.data.copy(), s.data.copy(), y1.data.copy(), y2.data.copy())
    return m2d, m3d, tr


def forward(x1, x2, params: ParamSet, cfg: ModelConfig | None = None, trace: bool = False, training: bool = False):
    """Pure inference-style forward pass on arrays.

    Returns a PredictionPair, or ``(PredictionPair, ForwardTrace)`` when
    ``trace`` is set.  ``training=True`` uses batch statistics in the
    batch-norm layers (running estimates are left untouched).
    """
    cfg = cfg or params.cfg
    bn = BNState(params.buffers, training)
    m2d, m3d, tr = forward_graph(x1, x2, params.constants(), cfg, bn, trace)
    pair = PredictionPair(m2d.data, m3d.data)
    return (pair, tr) if trace else pair


# ---------------------------------------------------------------- gradients


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, index: int, name: str):
        super().__init__(f"non-finite gradient at flat index {index} ({name})")
        self.index = index
        self.name = name


def grad(loss_fn: Callable[[dict], Tensor], params: ParamSet) -> tuple[float, np.ndarray]:
    """Value and exact gradient of a scalar loss built from model ops.

    ``loss_fn`` receives a dict of leaf Tensors keyed by parameter name and
    must return a scalar Tensor.  The gradient is returned flat, aligned with
    ``params.flat()``.
    """
    leaves = params.leaves()
    out = loss_fn(leaves)
    if not isinstance(out, Tensor):
        out = ag.as_tensor(out)
    if out.data.size != 1:
        raise ValueError("loss must be a scalar")
    if out.requires_grad:
        out.backward()
    g = np.concatenate(
        [
            (leaves[s.name].grad if leaves[s.name].grad is not None else np.zeros(s.shape)).ravel()
            for s in params.specs
        ]
    )
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        name, idx = params.index_of(int(bad[0]))
        raise NonFiniteGradientError(int(bad[0]), f"{name}{[int(i) for i in idx]}")
    return float(out.data.reshape(())), g


# ---------------------------------------------------------------- attention export


def export_attention_maps(trace: ForwardTrace | None, path, sample: int = 0) -> list[str]:
    """Write each tokenizer attention map as an R32F raster.

    Layout: ``<path>/epoch1/attn_<l>.r32`` and ``<path>/epoch2/attn_<l>.r32``,
    one file per token index.  Returns the written paths.
    """
    from .data_core import write_raster

    if trace is None:
        raise ValueError("no forward trace available; run forward(..., trace=True)")
    written = []
    for e, maps in enumerate(trace.attention, start=1):
        d = os.path.join(path, f"epoch{e}")
        os.makedirs(d, exist_ok=True)
        for ell in range(maps.shape[1]):
            p = os.path.join(d, f"attn_{ell}.r32")
            write_raster(maps[sample, ell].astype(np.float32), p)
            written.append(p)
    return written
