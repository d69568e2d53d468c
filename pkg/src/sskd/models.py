"""Staged CNN construction: backbone stages, task head, and repartitioning.

A model is a flat list of units (stem + blocks) plus a head. The *partition*
groups consecutive units into stages; mimic losses attach to stage outputs.
Repartitioning only regroups units, so parameter names, values, and forward
behavior are untouched.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, UsageError
from .layers import Head, PlainBlock, ResidualBlock, Stem
from .tensor import Tensor
from .utils import seeded_rng

FAMILIES = ("plain-cnn", "residual-cnn")

HEAD_OWNER = "head"


@dataclass(frozen=True)
class ModelConfig:
    family: str
    input_hw: tuple
    input_channels: int
    num_classes: int
    stage_widths: tuple
    blocks_per_stage: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_hw", tuple(int(v) for v in self.input_hw))
        object.__setattr__(self, "stage_widths", tuple(int(v) for v in self.stage_widths))
        object.__setattr__(self, "blocks_per_stage", tuple(int(v) for v in self.blocks_per_stage))
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}; choose from {FAMILIES}")
        if len(self.stage_widths) != len(self.blocks_per_stage):
            raise ConfigError(
                f"stage_widths has {len(self.stage_widths)} entries but "
                f"blocks_per_stage has {len(self.blocks_per_stage)}"
            )
        if not self.stage_widths:
            raise ConfigError("at least one stage is required")
        if any(w < 1 for w in self.stage_widths) or any(b < 1 for b in self.blocks_per_stage):
            raise ConfigError("stage widths and block counts must be positive")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if min(self.input_hw) < 4 or self.input_channels < 1:
            raise ConfigError(f"bad input geometry {self.input_hw} x{self.input_channels}")

    @property
    def num_stages(self):
        return len(self.stage_widths)

    @property
    def stem_downsample(self):
        # Large inputs get an imagenet-style stem (stride-2 conv + pool).
        return min(self.input_hw) >= 128

    def canonical_text(self):
        return (
            f"family={self.family};input_hw={self.input_hw[0]}x{self.input_hw[1]};"
            f"input_channels={self.input_channels};num_classes={self.num_classes};"
            f"stage_widths={','.join(map(str, self.stage_widths))};"
            f"blocks_per_stage={','.join(map(str, self.blocks_per_stage))}"
        )

    def digest(self):
        return hashlib.sha256(self.canonical_text().encode()).digest()


@dataclass
class StageFeatures:
    """Per-stage outputs f_1..f_k for one forward pass; ``x`` is f_0."""

    x: Tensor
    features: list

    def __getitem__(self, i):
        return self.features[i]

    def __len__(self):
        return len(self.features)

    @property
    def final(self):
        return self.features[-1]


class StagedModel:
    def __init__(self, config, units, head, partition, natural_partition=None):
        self.config = config
        self.units = units
        self.head = head
        self.partition = [list(g) for g in partition]
        self.natural_partition = (
            [list(g) for g in natural_partition]
            if natural_partition is not None
            else [list(g) for g in partition]
        )
        # Per-channel input normalization, serialized with the model so a
        # checkpoint alone suffices for evaluation. None means identity.
        self.norm_mean = None
        self.norm_std = None
        self._check_partition()

    def _check_partition(self):
        flat = [i for group in self.partition for i in group]
        if flat != list(range(len(self.units))):
            raise ConfigError(f"partition {self.partition} does not cover units exactly once")
        if any(not g for g in self.partition):
            raise ConfigError("empty stage in partition")

    @property
    def num_stages(self):
        return len(self.partition)

    def owners(self):
        """Owner id -> list of Parameters, covering every parameter once."""
        table = {}
        for k, group in enumerate(self.partition, start=1):
            owner = f"stage{k}"
            table[owner] = [p for i in group for p in self.units[i].params()]
        table[HEAD_OWNER] = self.head.params()
        return table

    def parameters(self):
        return [p for unit in self.units for p in unit.params()] + self.head.params()

    def named_buffers(self):
        out = []
        for unit in self.units:
            out.extend(unit.buffers())
        out.extend(self.head.buffers())
        if self.norm_mean is not None:
            out.append(("norm.mean", self.norm_mean))
            out.append(("norm.std", self.norm_std))
        return out

    def set_normalization(self, mean, std):
        self.norm_mean = np.ascontiguousarray(mean, dtype=np.float32)
        self.norm_std = np.ascontiguousarray(std, dtype=np.float32)
        if self.norm_mean.shape != (self.config.input_channels,):
            raise ConfigError(
                f"normalization stats must have shape ({self.config.input_channels},)"
            )

    def bn_layers_of(self, owner):
        if owner == HEAD_OWNER:
            return self.head.bn_layers()
        k = self._owner_index(owner)
        return [bn for i in self.partition[k] for bn in self.units[i].bn_layers()]

    def params_of(self, owner):
        if owner == HEAD_OWNER:
            return self.head.params()
        k = self._owner_index(owner)
        return [p for i in self.partition[k] for p in self.units[i].params()]

    def _owner_index(self, owner):
        if not owner.startswith("stage"):
            raise UsageError(f"unknown owner {owner!r}")
        try:
            k = int(owner[len("stage"):]) - 1
        except ValueError:
            raise UsageError(f"unknown owner {owner!r}") from None
        if not 0 <= k < self.num_stages:
            raise UsageError(f"owner {owner!r} out of range for {self.num_stages} stages")
        return k

    def owner_ids(self):
        return [f"stage{k}" for k in range(1, self.num_stages + 1)] + [HEAD_OWNER]

    def stage_owner_ids(self):
        return [f"stage{k}" for k in range(1, self.num_stages + 1)]

    # -- forward ----------------------------------------------------------

    def _check_input(self, x):
        h, w = self.config.input_hw
        expect = (self.config.input_channels, h, w)
        if x.ndim != 4 or tuple(x.shape[1:]) != expect:
            raise DimensionError.mismatch("model input", x.shape, ("N",) + expect)

    def _normalize(self, x):
        # Inputs are data, never differentiated through; plain numpy is fine.
        if self.norm_mean is None:
            return x
        return Tensor(
            (x.data - self.norm_mean[None, :, None, None]) / self.norm_std[None, :, None, None]
        )

    def forward_stages(self, x, upto=None):
        """Run stages 1..upto, collecting each stage output."""
        upto = self.num_stages if upto is None else int(upto)
        if not 1 <= upto <= self.num_stages:
            raise UsageError(f"upto={upto} outside [1, {self.num_stages}]")
        self._check_input(x)
        feats = []
        cur = self._normalize(x)
        for group in self.partition[:upto]:
            for i in group:
                cur = self.units[i].forward(cur)
            feats.append(cur)
        return StageFeatures(x=x, features=feats)

    def forward_full(self, x):
        """Backbone then head: logits of shape (N, num_classes)."""
        return self.head.forward(self.forward_stages(x).final)

    # -- geometry ---------------------------------------------------------

    def stage_resolutions(self):
        """Spatial (H, W) of each stage output, from exact stride arithmetic."""
        h, w = self.config.input_hw
        out = []
        for group in self.partition:
            for i in group:
                f = self.units[i].spatial_factor()
                if h % f or w % f:
                    raise ConfigError(
                        f"resolution {h}x{w} not divisible by downsampling factor {f}"
                    )
                h, w = h // f, w // f
            out.append((h, w))
        return out

    def stage_channels(self):
        return [self.units[group[-1]].out_channels for group in self.partition]

    # -- modes ------------------------------------------------------------

    def set_inference(self):
        """Switch every batch-norm layer to running-statistics mode."""
        for unit in self.units:
            for bn in unit.bn_layers():
                bn.training = False
        for bn in self.head.bn_layers():
            bn.training = False

    def state_digest(self, include_buffers=True):
        """SHA-256 over all parameter (and buffer) bytes, in name order."""
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.value.data).tobytes())
        if include_buffers:
            for name, buf in self.named_buffers():
                h.update(name.encode())
                h.update(np.ascontiguousarray(buf).tobytes())
        return h.hexdigest()


def _build_units(config, rng):
    units = []
    natural = []
    widths = config.stage_widths
    blocks = config.blocks_per_stage
    block_cls = ResidualBlock if config.family == "residual-cnn" else PlainBlock
    c_prev = widths[0]
    for s in range(config.num_stages):
        group = []
        if s == 0:
            stem = Stem("stage1.stem", config.input_channels, widths[0], rng,
                        downsample=config.stem_downsample)
            group.append(len(units))
            units.append(stem)
        for b in range(blocks[s]):
            stride = 2 if (s > 0 and b == 0) else 1
            c_in = c_prev if b == 0 else widths[s]
            unit = block_cls(f"stage{s + 1}.block{b + 1}", c_in, widths[s], stride, rng)
            group.append(len(units))
            units.append(unit)
        c_prev = widths[s]
        natural.append(group)
    return units, natural


def build_model(config, seed):
    """Deterministically initialize a staged model from its config and seed."""
    if seed < 0:
        raise ConfigError(f"seed must be non-negative, got {seed}")
    rng = seeded_rng(seed, "model-init")
    units, natural = _build_units(config, rng)
    head = Head(HEAD_OWNER, config.stage_widths[-1], config.num_classes, rng)
    model = StagedModel(config, units, head, natural)
    model.stage_resolutions()  # surface geometry errors at build time
    names = [p.name for p in model.parameters()]
    assert len(names) == len(set(names)), "parameter names must be unique"
    return model


def _even_groups(n_items, n_groups):
    """Split ``n_items`` into contiguous groups, sizes as even as possible,
    larger groups first."""
    base, extra = divmod(n_items, n_groups)
    return [base + 1 if g < extra else base for g in range(n_groups)]


def repartition(model, n_stages):
    """The same units and head under a different stage grouping.

    Between 1 and the natural stage count, natural stages merge contiguously;
    above it, leading natural stages split in half at block boundaries (the
    stem rides with the first half). Parameters are shared, never copied.
    """
    n_stages = int(n_stages)
    natural = model.natural_partition
    k0 = len(natural)
    if n_stages < 1:
        raise ConfigError(f"n_stages must be >= 1, got {n_stages}")
    if n_stages == k0:
        groups = [list(g) for g in natural]
    elif n_stages < k0:
        sizes = _even_groups(k0, n_stages)
        groups = []
        at = 0
        for size in sizes:
            merged = [i for g in natural[at:at + size] for i in g]
            groups.append(merged)
            at += size
    elif n_stages <= 2 * k0:
        to_split = n_stages - k0
        groups = []
        for s, group in enumerate(natural):
            if s >= to_split:
                groups.append(list(group))
                continue
            blocks = list(group)
            lead = []
            if isinstance(model.units[blocks[0]], Stem):
                lead = [blocks.pop(0)]
            if len(blocks) < 2:
                raise ConfigError(
                    f"stage {s + 1} has {len(blocks)} block(s); cannot split in half"
                )
            cut = (len(blocks) + 1) // 2  # larger half first
            groups.append(lead + blocks[:cut])
            groups.append(blocks[cut:])
    else:
        raise ConfigError(
            f"n_stages={n_stages} unreachable: at most {2 * k0} by halving {k0} stages"
        )
    out = StagedModel(model.config, model.units, model.head, groups,
                      natural_partition=natural)
    out.norm_mean = model.norm_mean
    out.norm_std = model.norm_std
    return out
