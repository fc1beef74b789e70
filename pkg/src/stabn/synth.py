"""Synthetic moving-square clips with ground-truth action windows.

A bright square sits still, slides one pixel per frame in the class direction
for ``window_len`` frames, then sits still again. Only the motion direction
determines the label, so a model has to look at the right frames (and at the
square) to classify a clip.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Iterator, NamedTuple, Optional, Tuple, Union

import numpy as np

from .codec import Reader, encode_kv
from .errors import ConfigurationError, FormatError, InputError, StabnError

MAGIC = b"STVID"
VERSION = 1

# (row step, column step) per class index
DIRECTIONS = {0: (-1, 0), 1: (1, 0), 2: (0, -1), 3: (0, 1)}
DIRECTION_NAMES = ("up", "down", "left", "right")
_SPLIT_CODES = {"train": 0, "val": 1}
MAX_PLACEMENT_TRIES = 100


class GenerationError(StabnError):
    pass


@dataclass
class SynthConfig:
    num_classes: int = 4
    frames: int = 8
    size: int = 32
    channels: int = 1
    shape_size: int = 5
    window_len: int = 4
    noise_std: float = 0.1
    samples_train: int = 2000
    samples_val: int = 400
    seed: int = 42

    def validate(self) -> "SynthConfig":
        problems = []
        if self.num_classes not in (2, 4):
            problems.append(f"num_classes must be 2 or 4 (got {self.num_classes})")
        if self.frames < 1 or self.size < 1 or self.channels < 1:
            problems.append("frames, size and channels must be positive")
        if not 1 <= self.shape_size < self.size:
            problems.append(f"shape_size must lie in [1, size) (got {self.shape_size})")
        if not 1 <= self.window_len <= self.frames:
            problems.append(f"window_len must lie in [1, frames] (got {self.window_len})")
        if self.shape_size + self.window_len > self.size:
            problems.append("the square cannot travel window_len pixels inside the frame")
        if self.noise_std < 0:
            problems.append("noise_std must be >= 0")
        if self.samples_train < 0 or self.samples_val < 0:
            problems.append("sample counts must be >= 0")
        if problems:
            raise ConfigurationError("invalid synth config: " + "; ".join(problems))
        return self

    def to_dict(self) -> Dict[str, str]:
        return {f.name: repr(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: Dict[str, str]) -> "SynthConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                raise FormatError(f"dataset header lacks key {f.name!r}")
            kwargs[f.name] = float(d[f.name]) if f.type in ("float", float) else int(d[f.name])
        return cls(**kwargs)


class VideoSample(NamedTuple):
    video: np.ndarray  # [C, T, H, W] float32 in [0, 1]
    label: int
    window: Optional[Tuple[int, int]]  # [t0, t0 + L)
    bboxes: Optional[np.ndarray]  # [T, 4] as (x0, y0, x1, y1), half-open


@dataclass
class VideoDataset:
    config: SynthConfig
    split: str
    videos: np.ndarray  # [S, C, T, H, W] float32
    labels: np.ndarray  # [S] int64
    windows: Optional[np.ndarray] = None  # [S, 2] int64: (t0, L)
    bboxes: Optional[np.ndarray] = None  # [S, T, 4] int64

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> VideoSample:
        if not -len(self) <= i < len(self):
            raise InputError(f"sample index {i} out of range for {len(self)} samples")
        window = None
        if self.windows is not None:
            t0, length = (int(v) for v in self.windows[i])
            window = (t0, t0 + length)
        bboxes = self.bboxes[i] if self.bboxes is not None else None
        return VideoSample(self.videos[i], int(self.labels[i]), window, bboxes)

    @property
    def has_metadata(self) -> bool:
        return self.windows is not None and self.bboxes is not None

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.config.num_classes)


def sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, _SPLIT_CODES[split], index])


def render_sample(config: SynthConfig, split: str, index: int) -> VideoSample:
    """Draw sample ``index`` of ``split``; depends only on (seed, split, index)."""
    rng = sample_rng(config.seed, split, index)
    T, S, L, side = config.frames, config.size, config.window_len, config.shape_size
    label = index % config.num_classes
    dr, dc = DIRECTIONS[label]
    # every window frame is followed by a displaced frame unless L == T
    t0 = int(rng.integers(0, T - L)) if L < T else 0
    steps = np.clip(np.arange(T) - t0, 0, L)

    for _ in range(MAX_PLACEMENT_TRIES):
        r0, c0 = (int(v) for v in rng.integers(0, S - side + 1, size=2))
        rows, cols = r0 + dr * steps, c0 + dc * steps
        if rows.min() >= 0 and cols.min() >= 0 and rows.max() + side <= S and cols.max() + side <= S:
            break
    else:
        raise GenerationError(f"could not place a {side}px square for sample {index}")

    video = np.zeros((config.channels, T, S, S), dtype=np.float64)
    bboxes = np.empty((T, 4), dtype=np.int64)
    for t in range(T):
        r, c = int(rows[t]), int(cols[t])
        video[:, t, r : r + side, c : c + side] = 1.0
        bboxes[t] = (c, r, c + side, r + side)
    if config.noise_std > 0:
        video = np.clip(video + rng.normal(0.0, config.noise_std, video.shape), 0.0, 1.0)
    return VideoSample(video.astype(np.float32), label, (t0, t0 + L), bboxes)


def generate_split(config: SynthConfig, split: str) -> VideoDataset:
    count = config.samples_train if split == "train" else config.samples_val
    c, t, s = config.channels, config.frames, config.size
    videos = np.empty((count, c, t, s, s), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    windows = np.empty((count, 2), dtype=np.int64)
    bboxes = np.empty((count, t, 4), dtype=np.int64)
    for i in range(count):
        sample = render_sample(config, split, i)
        videos[i] = sample.video
        labels[i] = sample.label
        windows[i] = (sample.window[0], sample.window[1] - sample.window[0])
        bboxes[i] = sample.bboxes
    return VideoDataset(config, split, videos, labels, windows, bboxes)


def generate(config: SynthConfig) -> Tuple[VideoDataset, VideoDataset]:
    config.validate()
    return generate_split(config, "train"), generate_split(config, "val")


# -- on-disk format ----------------------------------------------------------


def encode_dataset(dataset: VideoDataset) -> bytes:
    if not dataset.has_metadata:
        raise InputError("only datasets with window/bbox metadata can be saved")
    cfg = dataset.config
    header = dict(cfg.to_dict())
    header["split"] = dataset.split
    parts = [MAGIC, bytes([VERSION]), encode_kv(header), struct.pack("<I", len(dataset))]
    for i in range(len(dataset)):
        t0, length = (int(v) for v in dataset.windows[i])
        parts.append(struct.pack("<HHH", int(dataset.labels[i]), t0, length))
        parts.append(dataset.bboxes[i].astype("<u2").tobytes())
        parts.append(dataset.videos[i].astype("<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_dataset(data: bytes, what: str = "dataset") -> VideoDataset:
    if len(data) < 4:
        raise FormatError(f"{what} is truncated")
    body, (stored_crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = Reader(body, what)
    r.expect_magic(MAGIC, VERSION)
    header = r.kv()
    split = header.pop("split", None)
    if split not in _SPLIT_CODES:
        raise FormatError(f"{what}: unknown split {split!r}")
    cfg = SynthConfig.from_dict(header)
    count = r.u32()
    c, t, s = cfg.channels, cfg.frames, cfg.size
    per_video = c * t * s * s
    record = 6 + 8 * t + 4 * per_video
    if len(body) - r.pos != count * record:
        raise FormatError(
            f"{what}: payload holds {len(body) - r.pos} bytes, expected {count * record} for {count} samples"
        )
    if zlib.crc32(body) != stored_crc:
        raise FormatError(f"{what}: CRC32 mismatch")
    videos = np.empty((count, c, t, s, s), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    windows = np.empty((count, 2), dtype=np.int64)
    bboxes = np.empty((count, t, 4), dtype=np.int64)
    for i in range(count):
        labels[i], windows[i, 0], windows[i, 1] = r.unpack("<HHH")
        bboxes[i] = np.frombuffer(r.take(8 * t), dtype="<u2").reshape(t, 4)
        videos[i] = np.frombuffer(r.take(4 * per_video), dtype="<f4").reshape(c, t, s, s)
    if labels.size and labels.max() >= cfg.num_classes:
        raise FormatError(f"{what}: label {labels.max()} exceeds {cfg.num_classes} classes")
    return VideoDataset(cfg, split, videos, labels, windows, bboxes)


def save_dataset(path: Union[str, Path], dataset: VideoDataset) -> int:
    """Write ``dataset``; returns the CRC32 stored in the trailer."""
    data = encode_dataset(dataset)
    Path(path).write_bytes(data)
    return struct.unpack("<I", data[-4:])[0]


def load_dataset(path: Union[str, Path]) -> VideoDataset:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read dataset {path}: {exc}") from exc
    return decode_dataset(data, str(path))


def file_checksum(path: Union[str, Path]) -> int:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError(f"{path} is truncated")
    return struct.unpack("<I", data[-4:])[0]


# -- batching ------------------------------------------------------------------


class Batch(NamedTuple):
    videos: np.ndarray  # [N, C, T, H, W] float64
    labels: np.ndarray
    indices: np.ndarray


def shuffled_order(n: int, rng: np.random.Generator) -> np.ndarray:
    """Fisher-Yates permutation of ``range(n)`` drawn from ``rng``."""
    order = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        order[i], order[j] = order[j], order[i]
    return order


def batch_iter(
    dataset: VideoDataset,
    batch_size: int,
    shuffle_seed: Union[None, int, np.random.Generator] = None,
) -> Iterator[Batch]:
    """Yield batches in seeded-shuffle order (sequential when no seed); the last may be short."""
    if batch_size < 1:
        raise InputError("batch_size must be >= 1")
    n = len(dataset)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        rng = shuffle_seed if isinstance(shuffle_seed, np.random.Generator) else np.random.default_rng(shuffle_seed)
        order = shuffled_order(n, rng)
    for lo in range(0, n, batch_size):
        idx = order[lo : lo + batch_size]
        yield Batch(dataset.videos[idx].astype(np.float64), dataset.labels[idx], idx)
