"""Binary checkpoint format shared by training and evaluation.

Layout (all integers little-endian):

* magic ``PMAACKPT``, format version u32;
* record count u32, then per record: name length u32, UTF-8 name,
  shape as four u32, payload as float64 little-endian;
* metadata length u32, then UTF-8 ``key=value`` lines (epoch, best
  validation SSIM, optimizer step, and the model config snapshot).

Parameter records carry their registry names; optimizer moments are stored
under ``adamw/m/<name>`` and ``adamw/v/<name>``.  Loading a checkpoint back
into a freshly built model reproduces bit-identical parameters.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pmaa.model import ModelConfig, PmaaParams

__all__ = ["Checkpoint", "CheckpointError", "save_checkpoint", "load_checkpoint",
           "restore_params", "MOMENT_PREFIX"]

CHECKPOINT_MAGIC = b"PMAACKPT"
CHECKPOINT_VERSION = 1
MOMENT_PREFIX = "adamw/"

_U32 = struct.Struct("<I")
_SHAPE = struct.Struct("<4I")


class CheckpointError(ValueError):
    """Malformed checkpoint; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Checkpoint:
    """Everything needed to resume or evaluate: config, tensors, metadata."""

    config: ModelConfig
    records: dict[str, np.ndarray]
    epoch: int = 0
    best_ssim: float = float("-inf")
    step: int = 0
    extra: dict[str, str] = field(default_factory=dict)

    def parameter_records(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.records.items() if not k.startswith(MOMENT_PREFIX)}

    def moment_records(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.records.items() if k.startswith(MOMENT_PREFIX)}


def save_checkpoint(path, config: ModelConfig, records: dict[str, np.ndarray],
                    epoch: int, best_ssim: float, step: int = 0,
                    extra: dict[str, str] | None = None) -> None:
    chunks = [CHECKPOINT_MAGIC, _U32.pack(CHECKPOINT_VERSION), _U32.pack(len(records))]
    for name, arr in records.items():
        if arr.ndim != 4:
            raise ValueError(f"checkpoint record {name!r} must be rank-4, got {arr.ndim}")
        encoded = name.encode("utf-8")
        chunks.append(_U32.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_SHAPE.pack(*arr.shape))
        chunks.append(arr.astype("<f8").tobytes())

    meta = {"epoch": str(epoch), "best_ssim": repr(float(best_ssim)), "step": str(step)}
    meta.update(config.to_kv())
    if extra:
        meta.update(extra)
    meta_text = "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")
    chunks.append(_U32.pack(len(meta_text)))
    chunks.append(meta_text)
    Path(path).write_bytes(b"".join(chunks))


def _take(raw: bytes, offset: int, size: int, what: str) -> tuple[bytes, int]:
    if offset + size > len(raw):
        raise CheckpointError(f"truncated checkpoint while reading {what}", offset)
    return raw[offset:offset + size], offset + size


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    magic, offset = _take(raw, 0, len(CHECKPOINT_MAGIC), "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}", 0)
    version_bytes, offset = _take(raw, offset, 4, "version")
    version = _U32.unpack(version_bytes)[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}", 8)

    count_bytes, offset = _take(raw, offset, 4, "record count")
    count = _U32.unpack(count_bytes)[0]

    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        len_bytes, offset = _take(raw, offset, 4, "name length")
        name_len = _U32.unpack(len_bytes)[0]
        name_bytes, offset = _take(raw, offset, name_len, "record name")
        name = name_bytes.decode("utf-8")
        shape_bytes, offset = _take(raw, offset, _SHAPE.size, f"shape of {name!r}")
        shape = _SHAPE.unpack(shape_bytes)
        size = int(np.prod(shape)) * 8
        payload, offset = _take(raw, offset, size, f"payload of {name!r}")
        records[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)

    meta_len_bytes, offset = _take(raw, offset, 4, "metadata length")
    meta_len = _U32.unpack(meta_len_bytes)[0]
    meta_bytes, offset = _take(raw, offset, meta_len, "metadata")

    meta: dict[str, str] = {}
    for line in meta_bytes.decode("utf-8").splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        meta[key] = value

    epoch = int(meta.pop("epoch", "0"))
    best_ssim = float(meta.pop("best_ssim", "-inf"))
    step = int(meta.pop("step", "0"))
    config_kv = {k: v for k, v in meta.items() if k in ModelConfig._KV_FIELDS}
    extra = {k: v for k, v in meta.items() if k not in ModelConfig._KV_FIELDS}
    config = ModelConfig.from_kv(config_kv)
    return Checkpoint(config, records, epoch, best_ssim, step, extra)


def restore_params(params: PmaaParams, ckpt: Checkpoint) -> None:
    """Copy checkpoint parameter records into a freshly built tree.

    Raises on the first missing or shape-mismatched tensor.
    """
    recorded = ckpt.parameter_records()
    for name, param in params.named_parameters():
        if name not in recorded:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        arr = recorded[name]
        if arr.shape != param.shape:
            raise ValueError(
                f"checkpoint parameter {name!r} has shape {arr.shape}, model expects {param.shape}")
        param.data = arr.copy()
    unknown = set(recorded) - {name for name, _ in params.named_parameters()}
    if unknown:
        raise ValueError(f"checkpoint carries unknown parameters: {sorted(unknown)[:3]}")
