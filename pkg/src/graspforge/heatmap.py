"""Keypoint heatmaps: Gaussian rendering, bilinear lookup, corruption and export.

Coordinates: a heatmap pixel ``(row v, column u)`` has its centre at the
continuous position ``(u, v)``. Image coordinates map to heatmap coordinates by
multiplying with ``scale`` (1/4 for a 256 x 256 crop rendered at 64 x 64).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import BadChannel, DimensionMismatch, InvalidParameter, IoError, SchemaError

HEATMAP_SIZE = 64
IMAGE_TO_HEATMAP = 0.25
BINARY_MAGIC = b"GFHM"
BINARY_VERSION = 1
_HEADER = struct.Struct("<4sIIIIf")


@dataclass(frozen=True)
class HeatmapConfig:
    sigma: float = 2.0
    noise_sigma: float = 0.0
    dropout: float = 0.0
    jitter_sigma: float = 0.0
    seed: int = 0
    size: int = HEATMAP_SIZE

    def __post_init__(self):
        if not self.sigma > 0:
            raise InvalidParameter("heatmap sigma must be positive")
        if not 0.0 <= self.dropout <= 1.0:
            raise InvalidParameter("dropout probability must lie in [0, 1]")
        if self.noise_sigma < 0 or self.jitter_sigma < 0:
            raise InvalidParameter("noise levels must be nonnegative")

    def to_dict(self):
        return dict(self.__dict__)


class HeatmapStack:
    """Immutable (C, H, W) stack with values in [0, 1]."""

    def __init__(self, data, scale=IMAGE_TO_HEATMAP):
        a = np.clip(np.array(data, dtype=float), 0.0, 1.0)
        if a.ndim != 3:
            raise DimensionMismatch("heatmap stack must be (C, H, W)")
        a.setflags(write=False)
        self.data = a
        self.scale = float(scale)

    @property
    def channels(self):
        return self.data.shape[0]

    def __eq__(self, other):
        return isinstance(other, HeatmapStack) and self.scale == other.scale and np.array_equal(self.data, other.data)

    def sample(self, c, uv):
        return sample_bilinear(self, c, uv)


def render_gaussian(keypoints2d, cfg: HeatmapConfig = HeatmapConfig(), scale=IMAGE_TO_HEATMAP) -> HeatmapStack:
    """One Gaussian blob per keypoint, given in heatmap pixel coordinates (C, 2).

    Non-finite keypoints (e.g. behind the camera) render an empty channel.
    """
    kp = np.asarray(keypoints2d, dtype=float).reshape(-1, 2)
    g = np.arange(cfg.size, dtype=float)
    du = g[None, None, :] - kp[:, 0, None, None]
    dv = g[None, :, None] - kp[:, 1, None, None]
    with np.errstate(invalid="ignore"):
        h = np.exp(-(du**2 + dv**2) / (2.0 * cfg.sigma**2))
    h = np.where(np.isfinite(h), h, 0.0)
    return HeatmapStack(h, scale)


def render_from_image(uv_image, cfg: HeatmapConfig = HeatmapConfig(), scale=IMAGE_TO_HEATMAP) -> HeatmapStack:
    return render_gaussian(np.asarray(uv_image, dtype=float) * scale, cfg, scale)


def sample_bilinear(stack: HeatmapStack, c, uv):
    """Bilinear lookup of channel ``c`` at continuous heatmap coordinates ``uv`` (..., 2).

    Points outside ``[0, W-1] x [0, H-1]`` (or non-finite) return 0.
    """
    if not (0 <= int(c) < stack.channels) or int(c) != c:
        raise BadChannel(f"channel {c} not in [0, {stack.channels})")
    img = stack.data[int(c)]
    H, W = img.shape
    uv = np.asarray(uv, dtype=float)
    u, v = uv[..., 0], uv[..., 1]
    inside = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    us = np.where(inside, u, 0.0)
    vs = np.where(inside, v, 0.0)
    u0 = np.minimum(np.floor(us).astype(int), W - 2)
    v0 = np.minimum(np.floor(vs).astype(int), H - 2)
    fu, fv = us - u0, vs - v0
    val = ((1 - fu) * (1 - fv) * img[v0, u0] + fu * (1 - fv) * img[v0, u0 + 1]
           + (1 - fu) * fv * img[v0 + 1, u0] + fu * fv * img[v0 + 1, u0 + 1])
    out = np.where(inside, val, 0.0)
    return float(out) if out.ndim == 0 else out


def sample_channels(stack: HeatmapStack, uv):
    """Per-channel lookup: ``uv`` is (C, 2) (or (..., C, 2)), channel c sampled at uv[..., c, :]."""
    uv = np.asarray(uv, dtype=float)
    return np.stack([sample_bilinear(stack, c, uv[..., c, :]) for c in range(uv.shape[-2])], axis=-1)


def corrupt(stack: HeatmapStack, cfg: HeatmapConfig) -> HeatmapStack:
    """Seeded peak jitter, channel dropout and additive Gaussian noise, then clamping to [0, 1]."""
    rng = np.random.default_rng([int(cfg.seed), 0x4EA7])
    C = stack.channels
    shifts = rng.normal(0.0, cfg.jitter_sigma, (C, 2)) if cfg.jitter_sigma > 0 else np.zeros((C, 2))
    drop = rng.random(C) < cfg.dropout
    noise = rng.normal(0.0, cfg.noise_sigma, stack.data.shape) if cfg.noise_sigma > 0 else None
    out = np.array(stack.data)
    if cfg.jitter_sigma > 0:
        for c in range(C):
            # shifts are (du, dv); ndimage wants (rows, cols)
            out[c] = ndimage.shift(out[c], (shifts[c, 1], shifts[c, 0]), order=1, mode="constant", cval=0.0)
    out[drop] = 0.0
    if noise is not None:
        out = out + noise
    return HeatmapStack(np.clip(out, 0.0, 1.0), stack.scale)


def intensity_centroid(img):
    total = img.sum()
    if total <= 0:
        return np.array([np.nan, np.nan])
    v, u = np.indices(img.shape)
    return np.array([(u * img).sum() / total, (v * img).sum() / total])


# ---------------------------------------------------------------- export

def save_binary(stack: HeatmapStack, path):
    """Little-endian: magic "GFHM", u32 version, u32 C, u32 H, u32 W, f32 scale, then C*H*W f32 row-major."""
    C, H, W = stack.data.shape
    blob = _HEADER.pack(BINARY_MAGIC, BINARY_VERSION, C, H, W, stack.scale)
    blob += stack.data.astype("<f4").tobytes()
    p = Path(path)
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(blob)
    except OSError as exc:
        raise IoError(f"cannot write {p}: {exc.strerror or exc}") from exc
    return p


def load_binary(path) -> HeatmapStack:
    p = Path(path)
    try:
        blob = p.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {p}: {exc.strerror or exc}") from exc
    if len(blob) < _HEADER.size:
        raise SchemaError(f"{p}: truncated heatmap header")
    magic, version, C, H, W, scale = _HEADER.unpack_from(blob)
    if magic != BINARY_MAGIC:
        raise SchemaError(f"{p}: not a heatmap file (bad magic)")
    if version != BINARY_VERSION:
        from .errors import VersionError
        raise VersionError(f"{p}: heatmap format version {version}, expected {BINARY_VERSION}")
    n = C * H * W
    if len(blob) != _HEADER.size + 4 * n:
        raise SchemaError(f"{p}: payload size does not match header")
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size, count=n).reshape(C, H, W)
    return HeatmapStack(data.astype(float), float(scale))


def to_svg(stack: HeatmapStack, path=None, channels=None, cell=2, columns=7):
    """Grid of per-channel grayscale intensity images as an SVG document."""
    channels = range(stack.channels) if channels is None else list(channels)
    channels = list(channels)
    C = len(channels)
    H, W = stack.data.shape[1:]
    rows = (C + columns - 1) // columns
    pad = 4
    width = columns * (W * cell + pad) + pad
    height = rows * (H * cell + pad + 10) + pad
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">', f'<rect width="{width}" height="{height}" fill="black"/>']
    for n, c in enumerate(channels):
        ox = pad + (n % columns) * (W * cell + pad)
        oy = pad + (n // columns) * (H * cell + pad + 10)
        parts.append(f'<text x="{ox}" y="{oy + 8}" fill="white" font-size="8">{c}</text>')
        img = stack.data[c]
        vs, us = np.nonzero(img > 1e-3)
        for v, u in zip(vs, us):
            g = int(round(255 * img[v, u]))
            parts.append(f'<rect x="{ox + u * cell}" y="{oy + 10 + v * cell}" width="{cell}" height="{cell}" '
                         f'fill="rgb({g},{g},{g})"/>')
    parts.append("</svg>")
    svg = "\n".join(parts) + "\n"
    if path is not None:
        Path(path).write_text(svg)
    return svg
