"""Multimodal dataset types, the MMSEQ binary container, and a synthetic
generator that plants synchronous and asynchronous cross-modal cues.

MMSEQ layout (all little-endian, bit-exact across platforms):

* 8-byte magic ``MMSEQ1\\x00\\x00``
* five unsigned 32-bit fields: n, t_k, d_l, d_v, d_a
* 32-bit float blocks, instance-major and row-major within an instance:
  language (n*t_k*d_l), visual (n*t_k*d_v), acoustic (n*t_k*d_a), labels (n)

Values are stored as 32-bit floats and widened exactly to float64 on load.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .autodiff_layers import RngStream
from .errors import ConfigError, DataError, FormatError, TruncationError

MMSEQ_MAGIC = b"MMSEQ1\x00\x00"
SPLITS = ("train", "validation", "test")

LABEL_MIN = -3.0
LABEL_MAX = 3.0


class ModelDims(NamedTuple):
    """Shared sequence length and per-modality feature dimensions."""

    t_k: int
    d_l: int
    d_v: int
    d_a: int


@dataclass
class MultimodalInstance:
    """One labeled utterance: aligned language/visual/acoustic sequences."""

    language: np.ndarray  # (t_k, d_l)
    visual: np.ndarray  # (t_k, d_v)
    acoustic: np.ndarray  # (t_k, d_a)
    label: float

    def __post_init__(self):
        self.language = np.ascontiguousarray(self.language, dtype=np.float64)
        self.visual = np.ascontiguousarray(self.visual, dtype=np.float64)
        self.acoustic = np.ascontiguousarray(self.acoustic, dtype=np.float64)
        for name, seq in (
            ("language", self.language),
            ("visual", self.visual),
            ("acoustic", self.acoustic),
        ):
            if seq.ndim != 2 or seq.shape[0] < 1 or seq.shape[1] < 1:
                raise DataError(f"{name} must be a (t_k, d) matrix, got shape {seq.shape}")
            if not np.isfinite(seq).all():
                raise DataError(f"{name} contains non-finite values")
        if not (self.language.shape[0] == self.visual.shape[0] == self.acoustic.shape[0]):
            raise DataError(
                "sequence-length mismatch across modalities: "
                f"language {self.language.shape[0]}, visual {self.visual.shape[0]}, "
                f"acoustic {self.acoustic.shape[0]}"
            )
        self.label = float(self.label)
        if not np.isfinite(self.label):
            raise DataError("label is not finite")
        if not (LABEL_MIN <= self.label <= LABEL_MAX):
            raise DataError(f"label {self.label} outside [{LABEL_MIN}, {LABEL_MAX}]")

    @property
    def dims(self) -> ModelDims:
        return ModelDims(
            self.language.shape[0],
            self.language.shape[1],
            self.visual.shape[1],
            self.acoustic.shape[1],
        )


class MultimodalDataset:
    """Ordered, dimension-homogeneous collection of instances.

    The per-modality sequences are also kept stacked as
    ``(n, t_k, d)`` arrays (``.language``, ``.visual``, ``.acoustic``) with
    labels in ``.labels``; datasets are immutable after construction.
    """

    def __init__(self, instances, split: str = "train"):
        instances = tuple(instances)
        if not instances:
            raise DataError("dataset must contain at least one instance")
        if split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
        dims = instances[0].dims
        for idx, inst in enumerate(instances):
            if inst.dims != dims:
                raise DataError(
                    f"instance {idx} has dims {inst.dims}, dataset expects {dims}"
                )
        self.instances = instances
        self.split = split
        self.language = np.stack([inst.language for inst in instances])
        self.visual = np.stack([inst.visual for inst in instances])
        self.acoustic = np.stack([inst.acoustic for inst in instances])
        self.labels = np.array([inst.label for inst in instances], dtype=np.float64)

    @classmethod
    def from_arrays(cls, language, visual, acoustic, labels, split: str = "train"):
        language = np.asarray(language, dtype=np.float64)
        visual = np.asarray(visual, dtype=np.float64)
        acoustic = np.asarray(acoustic, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.float64)
        if language.ndim != 3 or visual.ndim != 3 or acoustic.ndim != 3 or labels.ndim != 1:
            raise DataError("from_arrays expects three (n, t_k, d) arrays and (n,) labels")
        n = labels.shape[0]
        if not (language.shape[0] == visual.shape[0] == acoustic.shape[0] == n):
            raise DataError("instance counts differ across modalities/labels")
        instances = [
            MultimodalInstance(language[i], visual[i], acoustic[i], labels[i])
            for i in range(n)
        ]
        return cls(instances, split)

    @property
    def dims(self) -> ModelDims:
        return self.instances[0].dims

    def __len__(self) -> int:
        return len(self.instances)

    def __getitem__(self, idx: int) -> MultimodalInstance:
        return self.instances[idx]


# ---------------------------------------------------------------------------
# MMSEQ read/write


def write_mmseq(dataset: MultimodalDataset, path) -> None:
    """Write a dataset in the MMSEQ layout; two writes of the same dataset
    are byte-identical."""
    n = len(dataset)
    t_k, d_l, d_v, d_a = dataset.dims
    header = MMSEQ_MAGIC + struct.pack("<5I", n, t_k, d_l, d_v, d_a)
    body = b"".join(
        block.astype("<f4").tobytes()
        for block in (dataset.language, dataset.visual, dataset.acoustic, dataset.labels)
    )
    Path(path).write_bytes(header + body)


def read_mmseq(path, split: str = "train") -> MultimodalDataset:
    """Read and validate an MMSEQ file (inverse of :func:`write_mmseq`)."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MMSEQ_MAGIC):
        raise TruncationError(f"{path}: shorter than the 8-byte magic")
    if raw[: len(MMSEQ_MAGIC)] != MMSEQ_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 28:
        raise TruncationError(f"{path}: header truncated ({len(raw)} bytes)")
    n, t_k, d_l, d_v, d_a = struct.unpack_from("<5I", raw, 8)
    if min(n, t_k, d_l, d_v, d_a) < 1:
        raise FormatError(
            f"{path}: header fields must be positive, got "
            f"n={n} t_k={t_k} d_l={d_l} d_v={d_v} d_a={d_a}"
        )
    counts = (n * t_k * d_l, n * t_k * d_v, n * t_k * d_a, n)
    expected = 28 + 4 * sum(counts)
    if len(raw) != expected:
        raise TruncationError(
            f"{path}: file length {len(raw)} != header-implied length {expected}"
        )
    offset = 28
    blocks = []
    for count in counts:
        blocks.append(np.frombuffer(raw, dtype="<f4", count=count, offset=offset))
        offset += 4 * count
    for block in blocks:
        if not np.isfinite(block).all():
            raise DataError(f"{path}: non-finite float values")
    language = blocks[0].astype(np.float64).reshape(n, t_k, d_l)
    visual = blocks[1].astype(np.float64).reshape(n, t_k, d_v)
    acoustic = blocks[2].astype(np.float64).reshape(n, t_k, d_a)
    labels = blocks[3].astype(np.float64)
    return MultimodalDataset.from_arrays(language, visual, acoustic, labels, split)


# ---------------------------------------------------------------------------
# synthetic data with planted cross-modal cues


def synth_generate(
    n: int,
    t_k: int,
    d_l: int,
    d_v: int,
    d_a: int,
    async_fraction: float,
    noise_sigma: float,
    seed: int,
    split: str = "train",
) -> MultimodalDataset:
    """Generate standard-normal sequences with two planted signal components.

    * synchronous: the mean over steps of ``language[k,0]*visual[k,0]*acoustic[k,0]``
    * asynchronous: ``visual[k*,1]*acoustic[k*,1]`` at a single cue step k*,
      which is the final step for an ``async_fraction`` share of instances
      and a uniformly random step otherwise.

    The label is the clamped sum of both components plus Gaussian noise:
    ``clamp(s_sync + s_async + noise_sigma * N(0,1), -3, 3)``.  All draws come
    from one seeded stream in a fixed per-instance order (language, visual,
    acoustic, cue-placement uniform, cue step if needed, noise), so the same
    seed always produces the identical dataset.
    """
    if n < 1:
        raise ConfigError(f"need n >= 1 instances, got {n}")
    if t_k < 2:
        raise ConfigError(f"need t_k >= 2, got {t_k}")
    if min(d_l, d_v, d_a) < 2:
        raise ConfigError(
            f"feature dims must be >= 2, got d_l={d_l} d_v={d_v} d_a={d_a}"
        )
    if not (0.0 <= async_fraction <= 1.0):
        raise ConfigError(f"async_fraction must lie in [0, 1], got {async_fraction}")
    if noise_sigma < 0.0:
        raise ConfigError(f"noise_sigma must be >= 0, got {noise_sigma}")
    rng = RngStream(seed)
    instances = []
    for _ in range(n):
        language = rng.normal((t_k, d_l))
        visual = rng.normal((t_k, d_v))
        acoustic = rng.normal((t_k, d_a))
        if rng.random() < async_fraction:
            k_star = t_k - 1
        else:
            k_star = rng.integers(0, t_k)
        eps = noise_sigma * rng.normal()
        s_sync = float(np.mean(language[:, 0] * visual[:, 0] * acoustic[:, 0]))
        s_async = float(visual[k_star, 1] * acoustic[k_star, 1])
        label = float(np.clip(s_sync + s_async + eps, LABEL_MIN, LABEL_MAX))
        instances.append(MultimodalInstance(language, visual, acoustic, label))
    return MultimodalDataset(instances, split)
