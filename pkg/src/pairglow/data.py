"""Synthetic paired scenes, boundary maps, dequantization and image I/O.

Scenes are a desk-scale stand-in for real street data: a sky/ground
split plus a handful of rectangles and discs, each with a class color
in the segmentation, a unique instance id, and a jittered, shaded,
noised rendering in the photo. The photo is strongly (but not fully)
predictable from the segmentation, which is what gives conditioning
something to learn.

The mandatory codecs are binary pixmaps: P6 for 8-bit RGB images and
P5 with a 16-bit maxval for instance-id grids, both lossless.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, UsageError

# class palette: sky, ground, building, vehicle, tree, sun, sign, figure
PALETTE = np.array([
    [70, 130, 180],
    [95, 70, 40],
    [128, 128, 128],
    [200, 40, 40],
    [30, 130, 50],
    [250, 215, 70],
    [40, 70, 200],
    [220, 130, 170],
], dtype=np.uint8)

N_CLASSES = len(PALETTE)

# photo rendering: per-instance color jitter and per-pixel noise (8-bit units)
INSTANCE_JITTER = 14.0
PIXEL_NOISE = 4.0
SHADING = 0.18


@dataclass
class PairedSample:
    """One scene: segmentation, photo, instance ids, optional boundary."""
    seg: np.ndarray        # 3 x H x W uint8, colors from PALETTE
    photo: np.ndarray      # 3 x H x W uint8
    instance_ids: np.ndarray  # H x W int32, nonnegative
    boundary: np.ndarray | None = None  # H x W in {0, 1}

    def with_boundary(self):
        if self.boundary is None:
            return PairedSample(self.seg, self.photo, self.instance_ids,
                                boundary_map(self.instance_ids))
        return self


def generate_scene(seed, size, n_classes=N_CLASSES) -> PairedSample:
    """Deterministic scene: sky/ground bands plus rectangles and discs."""
    if size < 8:
        raise ConfigError(f"size {size} is too small to place any object")
    if not 3 <= n_classes <= N_CLASSES:
        raise ConfigError(f"n_classes must be in [3, {N_CLASSES}], got {n_classes}")
    rng = np.random.default_rng(seed)
    cls = np.zeros((size, size), dtype=np.int32)
    inst = np.zeros((size, size), dtype=np.int32)

    horizon = int(size * rng.uniform(0.45, 0.7))
    cls[:horizon] = 0
    inst[:horizon] = 1
    cls[horizon:] = 1
    inst[horizon:] = 2

    next_id = 3
    for _ in range(int(rng.integers(3, 7))):
        klass = int(rng.integers(2, n_classes))
        _place_object(rng, cls, inst, klass, next_id, horizon)
        next_id += 1

    seg = PALETTE[cls].transpose(2, 0, 1).copy()
    photo = _render_photo(rng, cls, inst, size)
    return PairedSample(seg=seg, photo=photo, instance_ids=inst)


def _place_object(rng, cls, inst, klass, obj_id, horizon):
    size = cls.shape[0]
    lo = max(2, size // 8)

    def rect(rows, cols):
        r0, r1 = rows
        c0, c1 = cols
        r0, r1 = max(0, r0), min(size, r1)
        c0, c1 = max(0, c0), min(size, c1)
        if r1 > r0 and c1 > c0:
            cls[r0:r1, c0:c1] = klass
            inst[r0:r1, c0:c1] = obj_id

    def disc(cy, cx, radius):
        yy, xx = np.ogrid[:size, :size]
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
        cls[mask] = klass
        inst[mask] = obj_id

    if klass == 2:    # building: tall, sits on the horizon
        w = int(rng.integers(lo, max(lo + 1, size // 3)))
        h = int(rng.integers(max(3, size // 4), max(4, size // 2)))
        c0 = int(rng.integers(0, size - w + 1))
        rect((horizon - h, horizon), (c0, c0 + w))
    elif klass == 3:  # vehicle: wide, on the ground
        w = int(rng.integers(lo, max(lo + 1, size // 3)))
        h = max(2, w // 2)
        r0 = int(rng.integers(horizon, max(horizon + 1, size - h)))
        c0 = int(rng.integers(0, size - w + 1))
        rect((r0, r0 + h), (c0, c0 + w))
    elif klass == 4:  # tree: disc straddling the horizon
        r = int(rng.integers(2, max(3, size // 5)))
        cy = int(np.clip(horizon - r // 2, r, size - 1 - r))
        disc(cy, int(rng.integers(r, size - r)), r)
    elif klass == 5:  # sun: disc in the sky
        r = int(rng.integers(1, max(2, size // 6)))
        cy = int(rng.integers(0, max(1, horizon - r)) + r // 2)
        disc(min(cy, size - 1 - r), int(rng.integers(r, size - r)), r)
    elif klass == 6:  # sign: small square, upper half
        w = max(2, lo // 2 + 1)
        r0 = int(rng.integers(0, max(1, horizon)))
        c0 = int(rng.integers(0, size - w + 1))
        rect((r0, r0 + w), (c0, c0 + w))
    else:             # figure: thin and tall, on the ground
        w = max(1, size // 12)
        h = max(3, size // 5)
        r0 = int(rng.integers(max(0, horizon - h // 3), max(1, size - h)))
        c0 = int(rng.integers(0, size - w + 1))
        rect((r0, r0 + h), (c0, c0 + w))


def _render_photo(rng, cls, inst, size):
    base = PALETTE[cls].astype(np.float64)
    for obj_id in np.unique(inst):
        jitter = rng.normal(0.0, INSTANCE_JITTER, size=3)
        base[inst == obj_id] += jitter
    rows = np.linspace(0.0, 1.0, size).reshape(size, 1, 1)
    base *= 1.0 + SHADING * (0.5 - rows)
    base += rng.normal(0.0, PIXEL_NOISE, size=base.shape)
    return np.clip(np.rint(base), 0, 255).astype(np.uint8).transpose(2, 0, 1).copy()


# ---------------------------------------------------------------------------
# boundary maps


def boundary_map(instance_ids: np.ndarray) -> np.ndarray:
    """1 where any existing 4-neighbor carries a different instance id."""
    m = np.asarray(instance_ids)
    out = np.zeros(m.shape, dtype=np.uint8)
    out[:-1, :] |= (m[:-1, :] != m[1:, :])
    out[1:, :] |= (m[1:, :] != m[:-1, :])
    out[:, :-1] |= (m[:, :-1] != m[:, 1:])
    out[:, 1:] |= (m[:, 1:] != m[:, :-1])
    return out


def downsample_boundary(bmap: np.ndarray, factor: int, mode: str = "bilinear"):
    """Average over factor x factor cells; binary mode rethresholds at > 0."""
    if mode not in ("bilinear", "binary"):
        raise UsageError(f"mode must be 'bilinear' or 'binary', got {mode!r}")
    if factor < 1 or factor & (factor - 1):
        raise UsageError(f"factor must be a power of 2, got {factor}")
    h, w = bmap.shape
    if h % factor or w % factor:
        raise UsageError(f"factor {factor} does not divide {h}x{w}")
    avg = bmap.astype(np.float64).reshape(h // factor, factor,
                                          w // factor, factor).mean(axis=(1, 3))
    if mode == "binary":
        return (avg > 0).astype(np.uint8)
    return avg


# ---------------------------------------------------------------------------
# dequantization


def dequantize(image: np.ndarray, rng) -> np.ndarray:
    """8-bit k -> (k + u)/256 - 0.5 with u ~ U[0, 1)."""
    u = rng.random(image.shape)
    return (image.astype(np.float64) + u) / 256.0 - 0.5


def dequantize_center(image: np.ndarray) -> np.ndarray:
    """Deterministic bin-center variant used on inference paths."""
    return (image.astype(np.float64) + 0.5) / 256.0 - 0.5


def quantize(values: np.ndarray) -> np.ndarray:
    """Inverse of dequantize up to bin membership; clamps out-of-range."""
    k = np.floor((np.asarray(values, dtype=np.float64) + 0.5) * 256.0)
    return np.clip(k, 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# pixmap codecs


def write_image(path, image: np.ndarray):
    """Binary P6 pixmap from a 3 x H x W uint8 array."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3 or img.dtype != np.uint8:
        raise UsageError(f"write_image expects 3xHxW uint8, got {img.shape} {img.dtype}")
    _, h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.transpose(1, 2, 0).tobytes())


def read_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, pos = _token(raw, 0)
    if magic != b"P6":
        raise FormatError(f"not a P6 pixmap (magic {magic!r})", offset=0)
    w, pos = _int_token(raw, pos)
    h, pos = _int_token(raw, pos)
    maxval, pos = _int_token(raw, pos)
    if maxval != 255:
        raise FormatError(f"unsupported max value {maxval}", offset=pos)
    pos += 1  # single whitespace byte after the header
    need = w * h * 3
    if len(raw) - pos < need:
        raise FormatError(
            f"truncated payload: need {need} bytes, have {len(raw) - pos}",
            offset=len(raw))
    pix = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    return pix.reshape(h, w, 3).transpose(2, 0, 1).copy()


def write_instance_map(path, instance_ids: np.ndarray):
    """Binary P5 graymap, 16-bit big-endian, for instance ids."""
    m = np.asarray(instance_ids)
    if m.ndim != 2 or np.any(m < 0) or np.any(m > 65535):
        raise UsageError("instance map must be 2-D with ids in [0, 65535]")
    h, w = m.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(m.astype(">u2").tobytes())


def read_instance_map(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, pos = _token(raw, 0)
    if magic != b"P5":
        raise FormatError(f"not a P5 graymap (magic {magic!r})", offset=0)
    w, pos = _int_token(raw, pos)
    h, pos = _int_token(raw, pos)
    maxval, pos = _int_token(raw, pos)
    if maxval != 65535:
        raise FormatError(f"unsupported max value {maxval}", offset=pos)
    pos += 1
    need = w * h * 2
    if len(raw) - pos < need:
        raise FormatError(
            f"truncated payload: need {need} bytes, have {len(raw) - pos}",
            offset=len(raw))
    ids = np.frombuffer(raw, dtype=">u2", count=w * h, offset=pos)
    return ids.reshape(h, w).astype(np.int32)


def _token(raw: bytes, pos: int):
    """Next whitespace-delimited token, skipping # comments."""
    n = len(raw)
    while pos < n:
        b = raw[pos]
        if b in b" \t\r\n":
            pos += 1
        elif b == ord("#"):
            while pos < n and raw[pos] not in b"\r\n":
                pos += 1
        else:
            break
    if pos >= n:
        raise FormatError("unexpected end of header", offset=pos)
    start = pos
    while pos < n and raw[pos] not in b" \t\r\n":
        pos += 1
    return raw[start:pos], pos


def _int_token(raw: bytes, pos: int):
    tok, new_pos = _token(raw, pos)
    if not re.fullmatch(rb"\d+", tok):
        raise FormatError(f"expected an integer, got {tok!r}", offset=pos)
    return int(tok), new_pos


# ---------------------------------------------------------------------------
# on-disk dataset layout: <root>/pairs/<index>_seg.ppm etc.


def pair_paths(root, index):
    base = Path(root) / "pairs"
    stem = f"{index:05d}"
    return (base / f"{stem}_seg.ppm", base / f"{stem}_photo.ppm",
            base / f"{stem}_inst.pgm")


def save_pair(root, index, sample: PairedSample):
    seg_p, photo_p, inst_p = pair_paths(root, index)
    seg_p.parent.mkdir(parents=True, exist_ok=True)
    write_image(seg_p, sample.seg)
    write_image(photo_p, sample.photo)
    write_instance_map(inst_p, sample.instance_ids)


def load_pair(root, index) -> PairedSample:
    seg_p, photo_p, inst_p = pair_paths(root, index)
    return PairedSample(seg=read_image(seg_p), photo=read_image(photo_p),
                        instance_ids=read_instance_map(inst_p))


class PairDataset:
    """Reads the pairs/ directory written by save_pair / gen-data."""

    def __init__(self, root):
        self.root = Path(root)
        pairs_dir = self.root / "pairs"
        if not pairs_dir.is_dir():
            raise ConfigError(f"no pairs/ directory under {root}")
        self.indices = sorted(
            int(p.name.split("_")[0]) for p in pairs_dir.glob("*_seg.ppm"))
        if not self.indices:
            raise ConfigError(f"no samples found under {pairs_dir}")

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, i) -> PairedSample:
        return load_pair(self.root, self.indices[i])


def generate_dataset(root, n, size, seed, n_classes=N_CLASSES):
    """Write n deterministic scenes; sample i depends only on (seed, i)."""
    for i in range(n):
        save_pair(root, i, generate_scene([seed, i], size, n_classes))
