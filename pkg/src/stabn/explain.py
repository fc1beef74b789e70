"""Heatmap overlays, temporal color bars, and binary PPM export."""

from __future__ import annotations

from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from .errors import InputError, StabnError

# anchors of the piecewise-linear map: blue -> cyan -> yellow -> red
JET_ANCHORS = np.array(
    [
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 0.0],
    ]
)


def _to_byte(x: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def colormap_jet_float(v) -> np.ndarray:
    """Map values in [0, 1] to RGB floats in [0, 1]; output shape is ``v.shape + (3,)``."""
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    pos = v * (len(JET_ANCHORS) - 1)
    lo = np.minimum(np.floor(pos).astype(int), len(JET_ANCHORS) - 2)
    frac = (pos - lo)[..., None]
    return JET_ANCHORS[lo] * (1.0 - frac) + JET_ANCHORS[lo + 1] * frac


def colormap_jet(v: float) -> Tuple[int, int, int]:
    """8-bit RGB for a single value; 0 is pure blue, 1 is pure red."""
    r, g, b = _to_byte(colormap_jet_float(v))
    return int(r), int(g), int(b)


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    # half-pixel centres, clamped at the borders
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def upsample_bilinear(maps: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Bilinearly resize the last two axes of ``maps`` to ``size``."""
    h, w = maps.shape[-2:]
    rows = _interp_matrix(size[0], h)
    cols = _interp_matrix(size[1], w)
    return rows @ maps @ cols.T


def grayscale_frames(video: np.ndarray) -> np.ndarray:
    """[C, T, H, W] in [0, 1] -> [T, H, W, 3] uint8 (channel mean replicated to RGB)."""
    gray = _to_byte(np.asarray(video, dtype=np.float64).mean(axis=0))
    return np.repeat(gray[..., None], 3, axis=-1)


def render_spatial(video: np.ndarray, spatial: np.ndarray, alpha: float = 0.5) -> List[np.ndarray]:
    """Overlay one sample's spatial attention on each of its frames.

    ``video`` is [C, T, H, W]; ``spatial`` is [T, H', W'] (or [1, T, H', W']).
    Returns T rasters of shape [H, W, 3], uint8.
    """
    if not 0.0 <= alpha <= 1.0:
        raise InputError(f"alpha must lie in [0, 1], got {alpha}")
    spatial = np.asarray(spatial, dtype=np.float64)
    if spatial.ndim == 4:
        spatial = spatial[0]
    c, t, h, w = video.shape
    if spatial.shape[0] != t:
        raise InputError(f"spatial attention has {spatial.shape[0]} frames, video has {t}")
    heat = colormap_jet_float(upsample_bilinear(spatial, (h, w)))
    gray = grayscale_frames(video).astype(np.float64) / 255.0
    blended = (1.0 - alpha) * gray + alpha * heat
    return [_to_byte(frame) for frame in blended]


def render_temporal(temporal: Sequence[float]) -> Tuple[List[Tuple[int, int, int]], str]:
    """Per-frame color swatches and the ``frame,weight`` CSV text for one sample."""
    weights = np.asarray(temporal, dtype=np.float64).reshape(-1)
    swatches = [colormap_jet(v) for v in weights]
    lines = ["frame,weight"] + [f"{i},{v:.6f}" for i, v in enumerate(weights)]
    return swatches, "\n".join(lines) + "\n"


def contact_sheet(
    video: np.ndarray,
    overlays: Sequence[np.ndarray],
    swatches: Sequence[Tuple[int, int, int]],
    strip_height: int = 6,
) -> np.ndarray:
    """Frames left to right: input row, temporal color bar, attention overlay row."""
    frames = grayscale_frames(video)
    t, h, w, _ = frames.shape
    top = np.concatenate(list(frames), axis=1)
    bar = np.concatenate(
        [np.broadcast_to(np.array(s, dtype=np.uint8), (strip_height, w, 3)) for s in swatches], axis=1
    )
    bottom = np.concatenate(list(overlays), axis=1)
    return np.ascontiguousarray(np.concatenate([top, bar, bottom], axis=0))


def encode_ppm(raster: np.ndarray) -> bytes:
    raster = np.asarray(raster)
    if raster.ndim != 3 or raster.shape[2] != 3:
        raise InputError(f"PPM raster must be [H, W, 3], got {raster.shape}")
    h, w = raster.shape[:2]
    if h == 0 or w == 0:
        raise InputError("PPM raster has a zero dimension")
    if raster.dtype != np.uint8:
        if raster.min() < 0 or raster.max() > 255:
            raise InputError("PPM channel values must lie in 0..255")
        raster = raster.astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(raster).tobytes()


def write_ppm(path: Union[str, Path], raster: np.ndarray) -> None:
    data = encode_ppm(raster)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise StabnError(f"cannot write {path}: {exc}") from exc
