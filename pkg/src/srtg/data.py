"""Synthetic moving-pattern clip generation and the binary dataset format.

Clips are float64 volumes (C, T, H, W) with a Gaussian blob moving on a
wrapping canvas. Classes differ by motion: per-class translation direction,
per-class oscillation phase, or forward-versus-reversed playback. In the
reversed-pair family the two classes share the same frame multiset and differ
only in frame order, so temporal structure carries all label information.

Every clip draws from its own generator seeded by (dataset seed, split,
clip index): generation order and worker sharding cannot change the data.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from srtg.config import ConfigError, SyntheticSpec

__all__ = ["Dataset", "DatasetFormatError", "generate", "save_dataset", "load_dataset"]

_MAGIC = b"SRTGDATA"
_VERSION = 1

_DIRECTIONS = [(0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (-1, -1), (1, -1), (-1, 1)]


class DatasetFormatError(RuntimeError):
    """Corrupt, truncated or wrong-version dataset file."""


@dataclass
class Dataset:
    clips: np.ndarray  # (n, C, T, H, W) float64
    labels: np.ndarray  # (n,) int64
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.clips.shape[0]


def _blob(height, width, cy, cx, sigma):
    ys = np.arange(height)[:, None]
    xs = np.arange(width)[None, :]
    return np.exp(-(((ys - cy) ** 2) + ((xs - cx) ** 2)) / (2.0 * sigma * sigma))


def _translate_clip(spec, rng, velocity):
    """Frame t is frame 0 rolled by t*velocity (wrapping), plus noise."""
    cy = float(rng.uniform(2, spec.height - 2))
    cx = float(rng.uniform(2, spec.width - 2))
    amp = float(rng.uniform(0.8, 1.2))
    base = amp * _blob(spec.height, spec.width, cy, cx, sigma=max(spec.height, spec.width) / 10)
    vy, vx = velocity
    clip = np.zeros((spec.channels, spec.frames, spec.height, spec.width))
    for t in range(spec.frames):
        frame = np.roll(base, (t * vy, t * vx), axis=(0, 1))
        clip[:, t] = frame
    if spec.noise > 0:
        clip += spec.noise * rng.standard_normal(clip.shape)
    return clip


def _oscillate_clip(spec, rng, phase):
    cy = float(rng.uniform(2, spec.height - 2))
    cx = float(rng.uniform(2, spec.width - 2))
    base = _blob(spec.height, spec.width, cy, cx, sigma=max(spec.height, spec.width) / 10)
    clip = np.zeros((spec.channels, spec.frames, spec.height, spec.width))
    for t in range(spec.frames):
        gain = 0.75 + 0.25 * np.sin(2.0 * np.pi * t / spec.frames + phase)
        clip[:, t] = gain * base
    if spec.noise > 0:
        clip += spec.noise * rng.standard_normal(clip.shape)
    return clip


def _make_clip(spec, label, rng):
    if spec.family == "translate":
        velocity = _DIRECTIONS[label % len(_DIRECTIONS)]
        speed = 1 + label // len(_DIRECTIONS)
        return _translate_clip(spec, rng, (velocity[0] * speed, velocity[1] * speed))
    if spec.family == "oscillate":
        return _oscillate_clip(spec, rng, 2.0 * np.pi * label / spec.num_classes)
    # reversed_pair: class 1 plays a class-0-style clip backwards, so the two
    # classes share frame multisets and only temporal order separates them
    speed = int(rng.integers(1, 3))
    clip = _translate_clip(spec, rng, (0, speed))
    if label == 1:
        clip = clip[:, ::-1].copy()
    return clip


def _split(spec: SyntheticSpec, split_id: int, count: int) -> Dataset:
    shape = (spec.channels, spec.frames, spec.height, spec.width)
    clips = np.zeros((count,) + shape)
    labels = np.zeros(count, dtype=np.int64)
    for idx in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, split_id, idx]))
        label = idx % spec.num_classes
        clips[idx] = _make_clip(spec, label, rng)
        labels[idx] = label
    meta = {
        "family": spec.family,
        "classes": spec.num_classes,
        "seed": spec.seed,
        "split": "train" if split_id == 0 else "val",
        "noise": spec.noise,
    }
    return Dataset(clips, labels, meta)


def generate(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Deterministic (train, val) datasets for the spec."""
    if spec.family == "translate" and spec.num_classes > 2 * len(_DIRECTIONS):
        raise ConfigError(f"translate family supports at most {2 * len(_DIRECTIONS)} classes")
    return _split(spec, 0, spec.train_clips), _split(spec, 1, spec.val_clips)


# ---------------------------------------------------------------------------
# on-disk format: magic, version, json header, raw clips, raw labels
# ---------------------------------------------------------------------------


def save_dataset(path, ds: Dataset):
    header = {
        "count": int(len(ds)),
        "shape": [int(v) for v in ds.clips.shape[1:]],
        "dtype": "float64",
        "meta": ds.meta,
    }
    hjson = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", _VERSION, len(hjson)))
        fh.write(hjson)
        fh.write(np.ascontiguousarray(ds.clips, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype="<i8").tobytes())


def load_dataset(path) -> Dataset:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise DatasetFormatError(f"cannot read dataset {path}: {e}") from e
    if raw[: len(_MAGIC)] != _MAGIC:
        raise DatasetFormatError(f"{path}: not a dataset file (bad magic)")
    off = len(_MAGIC)
    version, hlen = struct.unpack_from("<IQ", raw, off)
    off += struct.calcsize("<IQ")
    if version != _VERSION:
        raise DatasetFormatError(f"{path}: unsupported dataset version {version}")
    try:
        header = json.loads(raw[off : off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetFormatError(f"{path}: corrupt header") from e
    off += hlen
    count = header["count"]
    shape = tuple(header["shape"])
    nclip = count * int(np.prod(shape))
    expected = off + nclip * 8 + count * 8
    if len(raw) != expected:
        raise DatasetFormatError(
            f"{path}: truncated or padded payload ({len(raw)} bytes, expected {expected})"
        )
    clips = np.frombuffer(raw, dtype="<f8", count=nclip, offset=off).reshape((count,) + shape)
    off += nclip * 8
    labels = np.frombuffer(raw, dtype="<i8", count=count, offset=off)
    return Dataset(clips.copy(), labels.astype(np.int64), header.get("meta", {}))


def dataset_digest(ds: Dataset) -> str:
    """Content hash used by tests to compare datasets cheaply."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.clips, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(ds.labels, dtype="<i8").tobytes())
    return h.hexdigest()
