"""Dataset format, tile validation, elevation normalisation and a synthetic
bitemporal scene generator.

On-disk layout::

    <root>/manifest.json
    <root>/<tile_id>/t1.img  t2.img  dsm1.r32  dsm2.r32  mask2d.msk  delta3d.r32

``.r32``/``.msk`` files hold a single raster: 4 magic bytes (``R32F`` or
``MSK8``), width and height as little-endian uint32, then the row-major
payload (little-endian float32, or one byte per mask value).  ``.img``
files are a one-byte band count followed by that many R32F rasters.
"""

from __future__ import annotations

import io
import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

MAGIC_F32 = b"R32F"
MAGIC_MASK = b"MSK8"
FORMAT_VERSION = 1

IMAGE_SIZE = 400
DSM_SIZE = 200
GSD_IMAGE = 0.5
GSD_DSM = 1.0
DH_MIN, DH_MAX = -30.0, 35.0
DH_THRESHOLD = 1.0
DEFAULT_H_SCALE = 35.0
TILE_FILES = ("t1.img", "t2.img", "dsm1.r32", "dsm2.r32", "mask2d.msk", "delta3d.r32")


class RasterError(ValueError):
    """Base class for raster decoding problems."""


class BadMagicError(RasterError):
    pass


class TruncatedRasterError(RasterError):
    pass


class NonFiniteRasterError(RasterError):
    pass


# ---------------------------------------------------------------- raster IO


def _encode_raster(r: np.ndarray) -> bytes:
    r = np.asarray(r)
    if r.ndim != 2:
        raise ValueError(f"raster must be 2-D, got shape {r.shape}")
    h, w = r.shape
    if r.dtype == np.uint8 or r.dtype == np.bool_:
        vals = r.astype(np.uint8)
        if vals.size and vals.max() > 1:
            raise ValueError("mask values must be 0 or 1")
        return MAGIC_MASK + struct.pack("<II", w, h) + vals.tobytes(order="C")
    vals = r.astype("<f4")
    if not np.isfinite(vals).all():
        raise NonFiniteRasterError("refusing to write a raster with NaN/Inf values")
    return MAGIC_F32 + struct.pack("<II", w, h) + vals.tobytes(order="C")


def _decode_raster(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    if len(buf) - offset < 12:
        raise TruncatedRasterError("file shorter than the 12-byte header")
    magic = buf[offset : offset + 4]
    if magic not in (MAGIC_F32, MAGIC_MASK):
        raise BadMagicError(f"unknown magic {magic!r}")
    w, h = struct.unpack_from("<II", buf, offset + 4)
    itemsize = 4 if magic == MAGIC_F32 else 1
    start = offset + 12
    end = start + w * h * itemsize
    if len(buf) < end:
        raise TruncatedRasterError(f"payload needs {w * h * itemsize} bytes, found {len(buf) - start}")
    if magic == MAGIC_F32:
        r = np.frombuffer(buf, dtype="<f4", count=w * h, offset=start).astype(np.float32).reshape(h, w)
        if not np.isfinite(r).all():
            raise NonFiniteRasterError("raster payload contains NaN/Inf")
    else:
        r = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=start).copy().reshape(h, w)
        if r.size and r.max() > 1:
            raise RasterError("mask payload contains values other than 0/1")
    return r, end


def write_raster(r: np.ndarray, path) -> None:
    """Write a float raster (R32F) or a binary mask (MSK8, uint8/bool input)."""
    data = _encode_raster(r)
    with open(path, "wb") as f:
        f.write(data)


def read_raster(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    r, end = _decode_raster(buf)
    if end != len(buf):
        raise RasterError(f"{len(buf) - end} trailing bytes after raster payload")
    return r


def write_image(bands: np.ndarray, path) -> None:
    bands = np.asarray(bands)
    if bands.ndim != 3 or not 1 <= bands.shape[0] <= 255:
        raise ValueError(f"image must be (B, H, W) with 1 <= B <= 255, got {bands.shape}")
    out = io.BytesIO()
    out.write(bytes([bands.shape[0]]))
    for b in bands:
        out.write(_encode_raster(b.astype(np.float32)))
    with open(path, "wb") as f:
        f.write(out.getvalue())


def read_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    if not buf:
        raise TruncatedRasterError("empty image file")
    n, off, planes = buf[0], 1, []
    for _ in range(n):
        r, off = _decode_raster(buf, off)
        if r.dtype != np.float32:
            raise RasterError("image planes must be R32F")
        planes.append(r)
    if off != len(buf):
        raise RasterError("trailing bytes after image planes")
    return np.stack(planes)


# ---------------------------------------------------------------- tiles


@dataclass
class TileMeta:
    tile_id: str
    gsd_image: float = GSD_IMAGE
    gsd_dsm: float = GSD_DSM
    bands: int = 3
    epoch_1: str = "2010"
    epoch_2: str = "2017"


@dataclass
class Tile:
    meta: TileMeta
    img1: np.ndarray  # (B, 400, 400) float32
    img2: np.ndarray
    dsm1: np.ndarray  # (200, 200) float32, metres
    dsm2: np.ndarray
    mask2d: np.ndarray  # (400, 400) uint8
    delta3d: np.ndarray  # (200, 200) float32, metres


def validate_tile(t: Tile, strict: bool = True) -> list[str]:
    """List schema violations; an empty list means the tile is valid.

    In non-strict mode the mask/elevation consistency check is reported as a
    ``warning:`` entry rather than a violation, and only violations are
    returned; warnings are available through ``validate_tile_report``.
    """
    violations, _ = validate_tile_report(t, strict)
    return violations


def validate_tile_report(t: Tile, strict: bool = True) -> tuple[list[str], list[str]]:
    v, warn = [], []
    for name in ("img1", "img2"):
        img = getattr(t, name)
        if img.ndim != 3 or img.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE):
            v.append(f"image size: {name} has shape {img.shape}, expected (B, {IMAGE_SIZE}, {IMAGE_SIZE})")
        elif img.shape[0] != t.meta.bands or img.shape[0] < 1:
            v.append(f"band count: {name} has {img.shape[0]} bands, meta says {t.meta.bands}")
    for name in ("dsm1", "dsm2", "delta3d"):
        r = getattr(t, name)
        if r.shape != (DSM_SIZE, DSM_SIZE):
            v.append(f"dsm size: {name} has shape {r.shape}, expected ({DSM_SIZE}, {DSM_SIZE})")
    if t.mask2d.shape != (IMAGE_SIZE, IMAGE_SIZE):
        v.append(f"mask size: mask2d has shape {t.mask2d.shape}, expected ({IMAGE_SIZE}, {IMAGE_SIZE})")
    for name in ("img1", "img2", "dsm1", "dsm2", "delta3d"):
        if not np.isfinite(getattr(t, name)).all():
            v.append(f"non-finite values in {name}")
    if not np.isin(t.mask2d, (0, 1)).all():
        v.append("mask values: mask2d contains values other than 0/1")
    if not np.isclose(t.meta.gsd_dsm, 2 * t.meta.gsd_image):
        v.append(f"gsd: dsm gsd {t.meta.gsd_dsm} != 2 x image gsd {t.meta.gsd_image}")
    d = t.delta3d
    if np.isfinite(d).all():
        if d.size and (d.min() < DH_MIN or d.max() > DH_MAX):
            v.append(f"dH range: values outside [{DH_MIN}, {DH_MAX}] m")
        if np.any((d != 0) & (np.abs(d) < DH_THRESHOLD)):
            v.append("sub-threshold dH: nonzero values with |dH| < 1 m")
    if t.mask2d.shape == (IMAGE_SIZE, IMAGE_SIZE) and d.shape == (DSM_SIZE, DSM_SIZE):
        blocks = t.mask2d.reshape(DSM_SIZE, 2, DSM_SIZE, 2).max(axis=(1, 3)).astype(bool)
        if not np.array_equal(blocks, d != 0):
            msg = f"mask/dH consistency: {int((blocks != (d != 0)).sum())} dsm pixels disagree"
            (v if strict else warn).append(msg if strict else "warning: " + msg)
    return v, warn


# ---------------------------------------------------------------- normalisation


def normalize_delta(v, h_scale: float):
    """Map metres to [-1, 1] by symmetric division; 0 stays 0."""
    if not h_scale > 0:
        raise ValueError("h_scale must be positive")
    v = np.asarray(v, dtype=np.float64)
    if np.any(np.abs(v) > h_scale):
        raise ValueError(f"|dH| exceeds h_scale={h_scale}")
    out = v / h_scale
    return float(out) if out.ndim == 0 else out


def denormalize_delta(u, h_scale: float):
    if not h_scale > 0:
        raise ValueError("h_scale must be positive")
    out = np.asarray(u, dtype=np.float64) * h_scale
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- manifest


@dataclass
class DatasetManifest:
    root: str
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)
    h_scale: float = DEFAULT_H_SCALE
    gsd_image: float = GSD_IMAGE
    gsd_dsm: float = GSD_DSM
    bands: int = 3
    epochs: tuple = ("2010", "2017")
    crs: str = "EPSG:3042"
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if not self.h_scale > 0:
            raise ValueError("h_scale must be positive")
        seen = set()
        for split in ("train", "val", "test"):
            ids = getattr(self, split)
            dup = seen.intersection(ids)
            if dup:
                raise ValueError(f"tile ids in more than one split: {sorted(dup)[:3]}")
            seen.update(ids)

    def split(self, name: str) -> list[str]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return list(getattr(self, name))

    def tile_dir(self, tile_id: str) -> str:
        return os.path.join(self.root, tile_id)

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("root")
        d["epochs"] = list(self.epochs)
        d["splits"] = {k: d.pop(k) for k in ("train", "val", "test")}
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def save(self) -> str:
        path = os.path.join(self.root, "manifest.json")
        with open(path, "w") as f:
            f.write(self.to_json())
        return path

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        path = os.path.join(root, "manifest.json") if os.path.isdir(root) else root
        with open(path) as f:
            d = json.load(f)
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported manifest format version {d.get('format_version')}")
        splits = d.pop("splits")
        d["epochs"] = tuple(d.get("epochs", ("2010", "2017")))
        return cls(root=os.path.dirname(os.path.abspath(path)), **splits, **d)

    def check_h_scale(self, tiles) -> None:
        """Raise unless h_scale covers every |dH| of the given tiles."""
        for t in tiles:
            m = float(np.abs(t.delta3d).max()) if t.delta3d.size else 0.0
            if m > self.h_scale:
                raise ValueError(f"tile {t.meta.tile_id}: |dH| {m} exceeds h_scale {self.h_scale}")


def write_tile(t: Tile, root) -> str:
    d = os.path.join(root, t.meta.tile_id)
    os.makedirs(d, exist_ok=True)
    write_image(t.img1, os.path.join(d, "t1.img"))
    write_image(t.img2, os.path.join(d, "t2.img"))
    write_raster(t.dsm1, os.path.join(d, "dsm1.r32"))
    write_raster(t.dsm2, os.path.join(d, "dsm2.r32"))
    write_raster(t.mask2d.astype(np.uint8), os.path.join(d, "mask2d.msk"))
    write_raster(t.delta3d, os.path.join(d, "delta3d.r32"))
    return d


def read_tile(manifest: DatasetManifest, tile_id: str) -> Tile:
    d = manifest.tile_dir(tile_id)
    missing = [f for f in TILE_FILES if not os.path.exists(os.path.join(d, f))]
    if missing:
        raise FileNotFoundError(f"tile {tile_id}: missing {', '.join(missing)}")
    img1 = read_image(os.path.join(d, "t1.img"))
    meta = TileMeta(
        tile_id, manifest.gsd_image, manifest.gsd_dsm, img1.shape[0], str(manifest.epochs[0]), str(manifest.epochs[1])
    )
    return Tile(
        meta,
        img1,
        read_image(os.path.join(d, "t2.img")),
        read_raster(os.path.join(d, "dsm1.r32")),
        read_raster(os.path.join(d, "dsm2.r32")),
        read_raster(os.path.join(d, "mask2d.msk")),
        read_raster(os.path.join(d, "delta3d.r32")),
    )


# ---------------------------------------------------------------- statistics


def dh_histogram(values, lo: float = DH_MIN, hi: float = DH_MAX, width: float = 1.0):
    """Counts of nonzero dH values in fixed bins [lo, lo+width), ... (last bin closed)."""
    edges = np.arange(lo, hi + width / 2, width)
    v = np.asarray(values, dtype=np.float64).ravel()
    v = v[v != 0]
    counts, _ = np.histogram(v, bins=edges)
    return edges, counts


@dataclass
class SplitStats:
    n_tiles: int
    n_pixels: int
    n_change: int
    change_pct: float
    nochange_pct: float
    edges: np.ndarray
    dh_counts: np.ndarray


def split_stats(manifest: DatasetManifest, tiles: dict | None = None) -> dict[str, SplitStats]:
    """Per split: share of changed 2D-mask pixels and the nonzero-dH histogram.

    ``tiles`` may supply already-loaded tiles by id; others are read from disk.
    """
    tiles = tiles or {}
    out = {}
    for name in ("train", "val", "test"):
        n_pix = n_chg = 0
        counts = None
        edges = None
        ids = manifest.split(name)
        for tid in ids:
            t = tiles.get(tid) or read_tile(manifest, tid)
            n_pix += t.mask2d.size
            n_chg += int(t.mask2d.sum())
            edges, c = dh_histogram(t.delta3d)
            counts = c if counts is None else counts + c
        if edges is None:
            edges, counts = dh_histogram([])
        pct = 100.0 * n_chg / n_pix if n_pix else 0.0
        out[name] = SplitStats(len(ids), n_pix, n_chg, pct, 100.0 - pct if n_pix else 0.0, edges, counts)
    return out


# ---------------------------------------------------------------- synthetic scenes


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the procedural bitemporal scene generator.

    Sizes are in DSM pixels (1 m); ``dh_ranges`` are closed intervals in
    metres from which each change's elevation difference is drawn.
    """

    seed: int = 0
    n_tiles: int = 8
    buildings: tuple = (4, 10)
    footprint: tuple = (12, 36)
    dh_ranges: tuple = ((-30.0, -1.0), (1.0, 35.0))
    change_fraction: tuple = (0.04, 0.05)
    noise: float = 0.02
    bands: int = 3
    split_fractions: tuple = (0.68, 0.09, 0.23)  # train, val, test
    max_retries: int = 200

    def __post_init__(self):
        if self.n_tiles < 1 or self.bands < 1:
            raise ValueError("n_tiles and bands must be >= 1")
        for name in ("buildings", "footprint", "change_fraction"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is empty")
        if self.footprint[0] < 2 or self.footprint[1] > DSM_SIZE // 2:
            raise ValueError("footprint must lie in [2, 100] dsm pixels")
        lo, hi = self.change_fraction
        if not (0 < lo and hi < 1):
            raise ValueError("change fraction must lie in (0, 1)")
        if not self.dh_ranges:
            raise ValueError("dh_ranges must not be empty")
        for a, b in self.dh_ranges:
            if a > b:
                raise ValueError(f"empty dH range [{a}, {b}]")
            if a < DH_MIN or b > DH_MAX or (a < DH_THRESHOLD and b > -DH_THRESHOLD):
                raise ValueError(f"dH range [{a}, {b}] must lie inside [-30,-1] or [1,35]")
        if len(self.split_fractions) != 3 or min(self.split_fractions) < 0 or not np.isclose(
            sum(self.split_fractions), 1.0
        ):
            raise ValueError("split_fractions must be three non-negative values summing to 1")


class SynthesisError(RuntimeError):
    pass


def _sample_dh(rng, ranges) -> float:
    widths = np.array([b - a for a, b in ranges], dtype=np.float64)
    p = widths / widths.sum() if widths.sum() > 0 else np.full(len(ranges), 1.0 / len(ranges))
    a, b = ranges[rng.choice(len(ranges), p=p)]
    return float(np.float32(rng.uniform(a, b))) if b > a else float(a)


def _terrain(rng) -> np.ndarray:
    noise = rng.standard_normal((DSM_SIZE, DSM_SIZE))
    smooth = ndimage.gaussian_filter(noise, sigma=25, mode="wrap")
    smooth /= smooth.std() + 1e-12
    yy, xx = np.mgrid[0:DSM_SIZE, 0:DSM_SIZE] / DSM_SIZE
    tilt = rng.uniform(-2, 2) * xx + rng.uniform(-2, 2) * yy
    return 40.0 + 1.5 * smooth + tilt


def _free(occ, y, x, h, w, margin=2) -> bool:
    y0, x0 = max(y - margin, 0), max(x - margin, 0)
    return not occ[y0 : y + h + margin, x0 : x + w + margin].any()


def _place(rng, occ, spec) -> tuple | None:
    for _ in range(50):
        h, w = rng.integers(spec.footprint[0], spec.footprint[1] + 1, size=2)
        y = int(rng.integers(0, DSM_SIZE - h + 1))
        x = int(rng.integers(0, DSM_SIZE - w + 1))
        if _free(occ, y, x, h, w):
            occ[y : y + h, x : x + w] = True
            return y, x, int(h), int(w)
    return None


def hillshade(dsm: np.ndarray, gsd: float, azimuth: float = 315.0, altitude: float = 45.0) -> np.ndarray:
    """Lambertian shaded relief in [0, 1] for a sun at (azimuth, altitude) degrees."""
    dy, dx = np.gradient(dsm, gsd)
    slope = np.arctan(np.hypot(dx, dy))
    aspect = np.arctan2(-dx, dy)
    az = np.deg2rad(360.0 - azimuth + 90.0)
    alt = np.deg2rad(altitude)
    shade = np.sin(alt) * np.cos(slope) + np.cos(alt) * np.sin(slope) * np.cos(az - aspect)
    return np.clip(shade, 0.0, 1.0)


def render_image(dsm: np.ndarray, rng, bands: int, noise: float, roof_tone: np.ndarray) -> np.ndarray:
    """Shaded, tinted, textured top view of a DSM at the image resolution.

    Brightness follows a hypsometric tint of height above local ground, so
    roofs of different height render in different tones; roof_tone adds a
    per-building material colour.
    """
    up = np.kron(dsm.astype(np.float64), np.ones((2, 2)))
    up = ndimage.uniform_filter(up, size=2, mode="nearest")
    shade = hillshade(up, GSD_IMAGE, azimuth=315.0 + rng.uniform(-10, 10), altitude=45.0 + rng.uniform(-5, 5))
    ground = ndimage.minimum_filter(up, size=81, mode="nearest")
    rel = np.clip((up - ground) / 40.0, 0.0, 1.0)
    tone = np.kron(roof_tone, np.ones((2, 2)))
    ramps = np.array([[0.35, 0.95], [0.45, 0.15], [0.25, 0.65], [0.5, 0.5]])
    out = np.empty((bands, IMAGE_SIZE, IMAGE_SIZE))
    for b in range(bands):
        lo, hi = ramps[b % len(ramps)]
        base = lo + (hi - lo) * rel
        out[b] = 0.55 * base + 0.25 * shade + 0.1 * tone + 0.1
    out += noise * rng.standard_normal(out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def synthesize_tile(spec: SynthSpec, index: int) -> Tile:
    """Build tile ``index`` of the dataset described by ``spec``.

    The per-tile random stream is derived from (seed, index) only, so any
    tile can be regenerated independently of the others.
    """
    rng = np.random.default_rng([spec.seed, index])
    for _ in range(spec.max_retries):
        tile = _try_tile(spec, index, rng)
        if tile is not None:
            return tile
    raise SynthesisError(f"tile {index}: change fraction target {spec.change_fraction} not reached")


def _try_tile(spec: SynthSpec, index: int, rng) -> Tile | None:
    terrain = _terrain(rng)
    occ = np.zeros((DSM_SIZE, DSM_SIZE), dtype=bool)
    b1 = np.zeros((DSM_SIZE, DSM_SIZE))
    tone1 = np.zeros((DSM_SIZE, DSM_SIZE))
    tone2 = np.zeros((DSM_SIZE, DSM_SIZE))
    delta = np.zeros((DSM_SIZE, DSM_SIZE))

    # unchanged buildings, present in both epochs
    for _ in range(int(rng.integers(spec.buildings[0], spec.buildings[1] + 1))):
        box = _place(rng, occ, spec)
        if box is None:
            break
        y, x, h, w = box
        b1[y : y + h, x : x + w] = rng.uniform(3.0, 25.0)
        tone1[y : y + h, x : x + w] = tone2[y : y + h, x : x + w] = rng.uniform(-1, 1)

    target = rng.uniform(*spec.change_fraction)
    n_total = DSM_SIZE * DSM_SIZE
    changed = 0
    for _ in range(100):
        if changed / n_total >= target:
            break
        dh = _sample_dh(rng, spec.dh_ranges)
        box = _place(rng, occ, spec)
        if box is None:
            return None
        y, x, h, w = box
        remaining = int(np.ceil(target * n_total)) - changed
        # shrink the footprint if it would overshoot the target too far
        hi_pixels = int(spec.change_fraction[1] * n_total) - changed
        if h * w > hi_pixels:
            occ[y : y + h, x : x + w] = False
            side = max(int(np.sqrt(max(remaining, 1))), spec.footprint[0])
            h = w = min(side, h, w)
            occ[y : y + h, x : x + w] = True
        delta[y : y + h, x : x + w] = dh
        tone = rng.uniform(-1, 1)
        if dh < 0:
            # demolished: a building of height |dh| exists only in epoch 1
            b1[y : y + h, x : x + w] = -dh
            tone1[y : y + h, x : x + w] = tone
        else:
            # new construction of height dh in epoch 2
            tone2[y : y + h, x : x + w] = tone
        changed += h * w
    frac = changed / n_total
    if not spec.change_fraction[0] <= frac <= spec.change_fraction[1]:
        return None

    delta32 = delta.astype(np.float32)
    dsm1 = terrain + b1
    dsm2 = dsm1 + delta32.astype(np.float64)
    mask = np.kron((delta32 != 0).astype(np.uint8), np.ones((2, 2), dtype=np.uint8))
    img1 = render_image(dsm1, rng, spec.bands, spec.noise, tone1)
    img2 = render_image(dsm2, rng, spec.bands, spec.noise, tone2)
    meta = TileMeta(f"tile_{index:04d}", bands=spec.bands)
    return Tile(meta, img1, img2, dsm1.astype(np.float32), dsm2.astype(np.float32), mask, delta32)


def _split_counts(n: int, fractions) -> list[int]:
    raw = np.asarray(fractions, dtype=np.float64) * n
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def generate_synthetic(spec: SynthSpec, root) -> DatasetManifest:
    """Write ``spec.n_tiles`` synthetic tiles and a manifest under ``root``.

    The output is a pure function of ``spec``: same spec, same bytes.
    """
    os.makedirs(root, exist_ok=True)
    tiles = [synthesize_tile(spec, i) for i in range(spec.n_tiles)]
    for t in tiles:
        bad = validate_tile(t, strict=True)
        if bad:
            raise SynthesisError(f"{t.meta.tile_id} failed validation: {bad}")
        write_tile(t, root)
    ids = [t.meta.tile_id for t in tiles]
    order = np.random.default_rng([spec.seed, zlib.crc32(b"splits")]).permutation(len(ids))
    n_train, n_val, _ = _split_counts(len(ids), spec.split_fractions)
    shuffled = [ids[i] for i in order]
    max_dh = max(float(np.abs(t.delta3d).max()) for t in tiles)
    manifest = DatasetManifest(
        root=os.path.abspath(root),
        train=sorted(shuffled[:n_train]),
        val=sorted(shuffled[n_train : n_train + n_val]),
        test=sorted(shuffled[n_train + n_val :]),
        h_scale=max_dh if max_dh > 0 else DEFAULT_H_SCALE,
        bands=spec.bands,
    )
    manifest.save()
    return manifest
