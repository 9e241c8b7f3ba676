"""Synthetic video tasks, split protocol, and dataset serialization.

Two families of clips, both rendered with antialiased signed-distance shapes
over low-frequency noise backgrounds:

* spatially dominant: the label is (shape, color) of the object, readable
  from any single frame; the motion is random and class-irrelevant.
* temporally demanding: the label is one of 8 wrap-around motion directions;
  every frame in isolation is uninformative (identical marginals), and
  reversing a clip in time maps class c to (c + 4) % 8 exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError

SHAPES = ("disc", "square")
# Fixed per-shape size: the shapes' total pixel masses are well separated,
# which keeps the task solvable by a linear readout of pooled frames.
SHAPE_RADII = {"disc": 8.0, "square": 4.5}
COLORS = np.array([
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
])
NUM_SPATIAL_CLASSES = len(SHAPES) * len(COLORS)
NUM_TEMPORAL_CLASSES = 8

MAGIC = b"VTLB"
FORMAT_VERSION = 1


def temporal_reversal_label(c: int) -> int:
    """Label of a time-reversed temporal-task clip."""
    return (c + NUM_TEMPORAL_CLASSES // 2) % NUM_TEMPORAL_CLASSES


# ---------------------------------------------------------------------------
# rendering


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Smooth low-frequency noise in [0.3, 0.45], shared by all frames."""
    coarse = rng.uniform(0.0, 1.0, size=(max(h // 8, 2), max(w // 8, 2), 3))
    bg = ndimage.zoom(coarse, (h / coarse.shape[0], w / coarse.shape[1], 1), order=1)
    return (0.3 + 0.15 * bg).astype(np.float64)


def _sdf(shape: str, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float,
         radius: float, extent: int) -> np.ndarray:
    # toroidal distance so objects wrap across edges seamlessly
    dy = (yy - cy + extent / 2) % extent - extent / 2
    dx = (xx - cx + extent / 2) % extent - extent / 2
    if shape == "disc":
        return np.sqrt(dy * dy + dx * dx) - radius
    if shape == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) - radius
    raise ConfigError(f"unknown shape {shape!r}")


def _render_clip(bg: np.ndarray, shape: str, color: np.ndarray, start: tuple,
                 velocity: tuple, t: int, radius: float) -> np.ndarray:
    h, w, _ = bg.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    frames = np.empty((t, h, w, 3), dtype=np.float32)
    cy, cx = start
    vy, vx = velocity
    for k in range(t):
        d = _sdf(shape, yy, xx, (cy + k * vy) % h, (cx + k * vx) % w, radius, h)
        alpha = np.clip(0.5 - d, 0.0, 1.0)[..., None]
        frames[k] = np.clip(bg * (1 - alpha) + color * alpha, 0.0, 1.0)
    return frames


# ---------------------------------------------------------------------------
# datasets


@dataclass
class VideoDataset:
    videos: np.ndarray  # [N, T, H, W, 3] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    num_classes: int
    task: str
    seed: int

    def __len__(self) -> int:
        return len(self.labels)

    def data_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.task.encode())
        h.update(struct.pack("<qq", self.seed, self.num_classes))
        h.update(np.ascontiguousarray(self.videos).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, index]))


def gen_spatial_task(n: int, seed: int = 0, t: int = 8, size: int = 32) -> VideoDataset:
    """Label = shape x color; motion is random and carries no label signal."""
    videos = np.empty((n, t, size, size, 3), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        rng = _sample_rng(seed, i)
        c = int(rng.integers(NUM_SPATIAL_CLASSES))
        shape = SHAPES[c // len(COLORS)]
        color = COLORS[c % len(COLORS)]
        bg = _background(rng, size, size)
        start = tuple(rng.uniform(0, size, size=2))
        speed = rng.uniform(0.0, 2.5)
        angle = rng.uniform(0, 2 * np.pi)
        vel = (speed * np.sin(angle), speed * np.cos(angle))
        videos[i] = _render_clip(bg, shape, color, start, vel, t, SHAPE_RADII[shape])
        labels[i] = c
    return VideoDataset(videos, labels, NUM_SPATIAL_CLASSES, "spatial", seed)


def gen_temporal_task(n: int, seed: int = 0, t: int = 8, size: int = 32) -> VideoDataset:
    """Label = motion direction (8 sectors); single frames are uninformative.

    Shape, color, start position and background are all label-independent, so
    the per-frame marginal distribution is identical across classes. Speed is
    fixed so direction is the only temporal signal.
    """
    videos = np.empty((n, t, size, size, 3), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    speed = 2.0
    for i in range(n):
        rng = _sample_rng(seed, i)
        c = int(rng.integers(NUM_TEMPORAL_CLASSES))
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        color = COLORS[int(rng.integers(len(COLORS)))]
        bg = _background(rng, size, size)
        start = tuple(rng.uniform(0, size, size=2))
        angle = 2 * np.pi * c / NUM_TEMPORAL_CLASSES
        vel = (speed * np.sin(angle), speed * np.cos(angle))
        videos[i] = _render_clip(bg, shape, color, start, vel, t, SHAPE_RADII[shape])
        labels[i] = c
    return VideoDataset(videos, labels, NUM_TEMPORAL_CLASSES, "temporal", seed)


def gen_image_task(n: int, seed: int = 0, size: int = 32) -> VideoDataset:
    """Single-frame version of the spatial task, for 2D pretraining."""
    ds = gen_spatial_task(n, seed=seed, t=1, size=size)
    return VideoDataset(ds.videos, ds.labels, ds.num_classes, "image", seed)


def reverse_time(ds: VideoDataset) -> VideoDataset:
    """Time-reverse every clip; for the temporal task, relabel accordingly."""
    videos = np.ascontiguousarray(ds.videos[:, ::-1])
    labels = ds.labels.copy()
    if ds.task == "temporal":
        labels = (labels + ds.num_classes // 2) % ds.num_classes
    return VideoDataset(videos, labels, ds.num_classes, ds.task, ds.seed)


# ---------------------------------------------------------------------------
# split protocol


def sample_split(labels: np.ndarray, fraction: float, seed: int = 0) -> np.ndarray:
    """Stratified low-label subset: at least one sample per class, and the
    subset for a smaller fraction is contained in any larger fraction's."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    picked = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        order = _sample_rng(seed, int(c)).permutation(len(idx))
        k = max(1, int(np.ceil(fraction * len(idx))))
        picked.append(idx[order[:k]])
    return np.sort(np.concatenate(picked))


# ---------------------------------------------------------------------------
# serialization

# Layout: MAGIC | u32 version | u64 header_len | JSON header | raw float32
# videos | raw int64 labels | u32 CRC32 of everything before it.


def write_dataset(path, ds: VideoDataset) -> None:
    header = json.dumps({
        "shape": list(ds.videos.shape), "num_classes": ds.num_classes,
        "task": ds.task, "seed": ds.seed}).encode()
    body = (MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header
            + np.ascontiguousarray(ds.videos, dtype=np.float32).tobytes()
            + np.ascontiguousarray(ds.labels, dtype=np.int64).tobytes())
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def read_dataset(path) -> VideoDataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 20 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a vtlab dataset (bad magic)")
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != struct.unpack("<I", raw[-4:])[0]:
        raise FormatError(f"{path}: checksum mismatch (truncated or corrupt)")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    header = json.loads(raw[16:16 + hlen])
    shape = tuple(header["shape"])
    n = int(np.prod(shape))
    off = 16 + hlen
    need = off + n * 4 + shape[0] * 8 + 4
    if len(raw) != need:
        raise FormatError(f"{path}: payload size mismatch ({len(raw)} != {need})")
    videos = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape).copy()
    labels = np.frombuffer(raw, dtype="<i8", count=shape[0], offset=off + n * 4).copy()
    return VideoDataset(videos, labels, header["num_classes"], header["task"],
                        header["seed"])


# ---------------------------------------------------------------------------
# single-frame probe


def frame_probe_accuracy(ds: VideoDataset, seed: int = 0, block: int = 4,
                         test_fraction: float = 0.25) -> float:
    """Linear readout from one block-averaged frame per clip.

    High accuracy means the task is solvable spatially; chance-level means
    the label lives in the temporal structure.
    """
    from sklearn.linear_model import LogisticRegression

    n, t, h, w, c = ds.videos.shape
    frames = ds.videos[:, t // 2]
    feats = frames.reshape(n, h // block, block, w // block, block, c)
    feats = feats.mean(axis=(2, 4)).reshape(n, -1)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    k = int(n * (1 - test_fraction))
    tr, te = order[:k], order[k:]
    clf = LogisticRegression(max_iter=2000)
    clf.fit(feats[tr], ds.labels[tr])
    return float(clf.score(feats[te], ds.labels[te]))
