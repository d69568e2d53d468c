"""Bit-exact model serialization and stage-feature export.

Checkpoint layout (little-endian): magic ``SSKD``, u16 version=1, a 32-byte
SHA-256 digest of the model-config text, then one record per tensor:
u16 name length, utf-8 name, u8 rank, u32 extents, float32 payload.
Records run to end-of-file; parameters come first in model walk order,
then batch-norm running stats and normalization constants. Adapters are
never part of a model, so inference checkpoints cannot contain them.

A small sidecar text file (``<path>.cfg``) carries the model config so a
checkpoint is loadable without outside knowledge; the binary digest guards
against mismatched pairs.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ParseError, UsageError, ValidationError
from .models import ModelConfig, StagedModel, build_model

MAGIC = b"SSKD"
VERSION = 1
DIGEST_BYTES = 32


def _named_tensors(model):
    for p in model.parameters():
        yield p.name, p.value.data
    for name, buf in model.named_buffers():
        yield name, buf


def _write_tensor(f, name, arr):
    encoded = name.encode("utf-8")
    if len(encoded) > 0xFFFF:
        raise UsageError(f"tensor name too long: {name[:32]}...")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    f.write(struct.pack("<H", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<B", arr.ndim))
    for extent in arr.shape:
        f.write(struct.pack("<I", extent))
    f.write(arr.tobytes())


def write_tensor_file(path, digest, tensors):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(digest)
        for name, arr in tensors:
            _write_tensor(f, name, arr)


def read_tensor_file(path):
    """Returns (digest, ordered dict name -> float32 array)."""
    blob = Path(path).read_bytes()
    header = len(MAGIC) + 2 + DIGEST_BYTES
    if len(blob) < header:
        raise ParseError(f"file shorter than header ({len(blob)} bytes)", offset=len(blob))
    if blob[:4] != MAGIC:
        raise ParseError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}", offset=0)
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise ParseError(f"unsupported version {version}", offset=4)
    digest = blob[6 : 6 + DIGEST_BYTES]
    at = header
    tensors = {}
    while at < len(blob):
        start = at
        if at + 2 > len(blob):
            raise ParseError("truncated record: name length", offset=start)
        (name_len,) = struct.unpack_from("<H", blob, at)
        at += 2
        if at + name_len + 1 > len(blob):
            raise ParseError("truncated record: name or rank", offset=start)
        name = blob[at : at + name_len].decode("utf-8")
        at += name_len
        rank = blob[at]
        at += 1
        if at + 4 * rank > len(blob):
            raise ParseError(f"truncated record: extents of {name!r}", offset=start)
        shape = struct.unpack_from(f"<{rank}I", blob, at) if rank else ()
        at += 4 * rank
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        nbytes = 4 * count
        if at + nbytes > len(blob):
            raise ParseError(
                f"truncated payload of {name!r}: need {nbytes} bytes, have {len(blob) - at}",
                offset=start,
            )
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=at).reshape(shape)
        at += nbytes
        if name in tensors:
            raise ParseError(f"duplicate tensor {name!r}", offset=start)
        tensors[name] = arr
    return digest, tensors


def save_checkpoint(model, path):
    """Serialize parameters + running stats; write the config sidecar."""
    path = Path(path)
    write_tensor_file(path, model.config.digest(), _named_tensors(model))
    sidecar = path.with_suffix(path.suffix + ".cfg")
    sidecar.write_text(model.config.canonical_text() + "\n")


def parse_model_config_text(text):
    fields = {}
    for part in text.strip().split(";"):
        key, _, value = part.partition("=")
        fields[key] = value
    try:
        h, w = fields["input_hw"].split("x")
        return ModelConfig(
            family=fields["family"],
            input_hw=(int(h), int(w)),
            input_channels=int(fields["input_channels"]),
            num_classes=int(fields["num_classes"]),
            stage_widths=tuple(int(v) for v in fields["stage_widths"].split(",")),
            blocks_per_stage=tuple(int(v) for v in fields["blocks_per_stage"].split(",")),
        )
    except (KeyError, ValueError) as exc:
        raise ParseError(f"malformed model-config text: {exc}") from exc


def load_checkpoint(path, model=None):
    """Load weights into ``model`` (or a model rebuilt from the sidecar).

    The header digest must match the model's config; every tensor name must
    match the model's registry exactly.
    """
    path = Path(path)
    digest, tensors = read_tensor_file(path)
    if model is None:
        sidecar = path.with_suffix(path.suffix + ".cfg")
        if not sidecar.exists():
            raise UsageError(
                f"no model given and sidecar {sidecar} missing; cannot rebuild architecture"
            )
        config = parse_model_config_text(sidecar.read_text())
        model = build_model(config, seed=0)
    if digest != model.config.digest():
        raise ValidationError(
            f"model-config digest mismatch: checkpoint {digest.hex()[:12]} vs "
            f"model {model.config.digest().hex()[:12]}"
        )
    expected = dict(_named_tensors(model))
    missing = [n for n in expected if n not in tensors and not n.startswith("norm.")]
    extra = [n for n in tensors if n not in expected and not n.startswith("norm.")]
    if missing or extra:
        raise ValidationError(
            f"tensor names do not match model: missing {missing[:3]}, unexpected {extra[:3]}"
        )
    for p in model.parameters():
        arr = tensors[p.name]
        if arr.shape != p.value.data.shape:
            raise ValidationError(
                f"shape mismatch for {p.name}: {arr.shape} vs {p.value.data.shape}"
            )
        p.value.data[...] = arr
    for name, buf in model.named_buffers():
        if name in tensors:
            buf[...] = tensors[name]
    if "norm.mean" in tensors and model.norm_mean is None:
        model.set_normalization(tensors["norm.mean"], tensors["norm.std"])
    model.set_inference()
    return model


def export_features(model, dataset, stage_index, path, batch_size=256):
    """Write flattened stage-``stage_index`` features plus labels.

    Same binary conventions as checkpoints: tensors ``features`` (N, D)
    and ``labels`` (N,), under the exporting model's config digest.
    """
    from .tensor import Tensor

    if not 1 <= stage_index <= model.num_stages:
        raise UsageError(f"stage {stage_index} outside [1, {model.num_stages}]")
    model.set_inference()
    rows = []
    for at in range(0, len(dataset), batch_size):
        x = Tensor(dataset.images[at : at + batch_size])
        feats = model.forward_stages(x, upto=stage_index)
        rows.append(feats.final.data.reshape(x.shape[0], -1))
    features = np.concatenate(rows, axis=0) if rows else np.zeros((0, 0), dtype=np.float32)
    labels = dataset.labels.astype(np.float32)
    write_tensor_file(path, model.config.digest(), [("features", features), ("labels", labels)])


def load_features(path):
    _, tensors = read_tensor_file(path)
    if "features" not in tensors or "labels" not in tensors:
        raise ParseError(f"{path} is not a feature export")
    return tensors["features"], tensors["labels"].astype(np.int64)
