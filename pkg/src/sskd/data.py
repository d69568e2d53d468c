"""Deterministic dataset provisioning.

Synthetic desk-scale data: each class is a fixed oriented grating (classes
share orientations within a frequency tier, so the class structure is
hierarchical) plus seeded Gaussian noise. Pixels are quantized to the u8
grid at generation time so the binary format round-trips bit-exactly.

Binary layout (little-endian): magic ``SKDS``, u16 version=1, u32 N, u16 C,
u16 H, u16 W, u16 num_classes, N*C*H*W u8 pixels, N u8 labels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ParseError, ValidationError
from .utils import seeded_rng

MAGIC = b"SKDS"
VERSION = 1
_HEADER = struct.Struct("<4sHIHHHH")


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValidationError(f"images must be (N,C,H,W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValidationError(
                f"{self.labels.shape[0]} labels for {self.images.shape[0]} images"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError(
                f"label {int(self.labels.max())} outside [0, {self.num_classes})"
            )
        counts = np.bincount(self.labels, minlength=self.num_classes)
        if counts.size and counts.max() - counts.min() > 1:
            raise ValidationError(
                f"classes must be balanced within one sample; counts {counts.tolist()}"
            )

    def __len__(self):
        return self.images.shape[0]

    @property
    def channels(self):
        return self.images.shape[1]

    @property
    def resolution(self):
        return self.images.shape[2], self.images.shape[3]


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 10
    samples_per_class: int = 200
    resolution: int = 32
    noise_std: float = 0.3
    seed: int = 1

    def __post_init__(self):
        if self.resolution < 8:
            raise ConfigError(f"resolution must be >= 8, got {self.resolution}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.num_classes < 2 or self.num_classes > 256:
            raise ConfigError(f"num_classes must be in [2, 256], got {self.num_classes}")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")


GRATING_AMPLITUDE = 0.35
ORIENTATIONS_PER_TIER = 5
BASE_CYCLES = 3.0
CYCLES_PER_TIER = 1.5


def class_template(cls, num_classes, resolution):
    """The noiseless grating for one class, on the u8 grid.

    Orientation cycles within a frequency tier of five classes; each tier
    raises the spatial frequency, giving a two-level class hierarchy.
    """
    n_orient = min(num_classes, ORIENTATIONS_PER_TIER)
    theta = np.pi * (cls % n_orient) / n_orient
    cycles = BASE_CYCLES + CYCLES_PER_TIER * (cls // n_orient)
    yy, xx = np.meshgrid(
        np.arange(resolution, dtype=np.float64),
        np.arange(resolution, dtype=np.float64),
        indexing="ij",
    )
    phase = 2.0 * np.pi * cycles * (xx * np.cos(theta) + yy * np.sin(theta)) / resolution
    img = 0.5 + GRATING_AMPLITUDE * np.sin(phase)
    return _quantize(img[None, :, :])


def _quantize(images):
    return (np.round(np.clip(images, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _make_split(spec, rng, split):
    res = spec.resolution
    n = spec.num_classes * spec.samples_per_class
    images = np.empty((n, 1, res, res), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    at = 0
    for cls in range(spec.num_classes):
        template = class_template(cls, spec.num_classes, res).astype(np.float64)
        noise = rng.normal(0.0, spec.noise_std, size=(spec.samples_per_class, 1, res, res))
        images[at : at + spec.samples_per_class] = _quantize(template[None] + noise)
        labels[at : at + spec.samples_per_class] = cls
        at += spec.samples_per_class
    return Dataset(images, labels, spec.num_classes, split=split)


def gen_synthetic(spec):
    """(train, test) datasets; the splits draw from disjoint noise streams."""
    train = _make_split(spec, seeded_rng(spec.seed, "synthetic", "train"), "train")
    test = _make_split(spec, seeded_rng(spec.seed, "synthetic", "test"), "test")
    return train, test


def save_binary(dataset, path):
    if dataset.num_classes > 256:
        raise ValidationError("binary format stores labels as u8; num_classes > 256")
    n, c, h, w = dataset.images.shape
    pixels = np.round(dataset.images * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, n, c, h, w, dataset.num_classes))
        f.write(pixels.tobytes())
        f.write(dataset.labels.astype(np.uint8).tobytes())


def load_binary(path, split="train"):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise ParseError(
            f"file too short for header: {len(blob)} < {_HEADER.size} bytes", offset=len(blob)
        )
    magic, version, n, c, h, w, num_classes = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise ParseError(f"unsupported version {version}", offset=4)
    pixel_bytes = n * c * h * w
    expected = _HEADER.size + pixel_bytes + n
    if len(blob) != expected:
        raise ParseError(
            f"expected {expected} bytes ({pixel_bytes} pixels + {n} labels), got {len(blob)}",
            offset=len(blob),
        )
    pixels = np.frombuffer(blob, dtype=np.uint8, count=pixel_bytes, offset=_HEADER.size)
    images = (pixels.astype(np.float32) / 255.0).reshape(n, c, h, w)
    labels = np.frombuffer(blob, dtype=np.uint8, offset=_HEADER.size + pixel_bytes).astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise ValidationError(
            f"label {int(labels.max())} outside [0, {num_classes}) in {path}"
        )
    return Dataset(images, labels, num_classes, split=split)


def batches(dataset, batch_size, shuffle_seed, epoch):
    """Shuffled (images, labels) slices; the final partial batch is kept.

    The permutation is a pure function of (shuffle_seed, epoch).
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    perm = seeded_rng(shuffle_seed, "batches", epoch).permutation(n)
    out = []
    for at in range(0, n, batch_size):
        idx = perm[at : at + batch_size]
        out.append((dataset.images[idx], dataset.labels[idx]))
    return out


def channel_stats(dataset):
    """Per-channel mean and std over one split (std floored away from 0)."""
    mean = dataset.images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = dataset.images.std(axis=(0, 2, 3), dtype=np.float64)
    return mean.astype(np.float32), np.maximum(std, 1e-6).astype(np.float32)
