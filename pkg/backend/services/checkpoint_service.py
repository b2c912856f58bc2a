"""
Checkpoint file format, little-endian throughout:

    b"MMAC"  u32 version (=1)  u32 header_len  header (UTF-8 key=value lines)
    per parameter, in registration order:
        u16 name_len  name (UTF-8)  u8 rank  u32 dim × rank  f32 × prod(dims)

The header carries the flattened model config, the normalisation stats,
`parameters` (tensor count), `scalars` (value count) and any data.* keys.
"""

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from services import config_service, file_service
from services.errors import CheckpointError, ConfigError
from services.model_service import VisionModel, init_model_weights

logger = logging.getLogger(__name__)

MAGIC = b"MMAC"
VERSION = 1
_PREAMBLE = struct.Struct("<4sII")


@dataclass
class LoadedCheckpoint:
    model: VisionModel
    header: dict[str, str] = field(default_factory=dict)

    @property
    def data_info(self) -> dict[str, str]:
        return {k[len("data."):]: v for k, v in self.header.items() if k.startswith("data.")}


def build_header(model: VisionModel, data_info: dict[str, str] | None = None) -> dict[str, str]:
    header = config_service.flatten_model_config(model.cfg)
    if model.stats is not None:
        header.update(config_service.flatten_stats(model.stats))
    header["parameters"] = str(len(model.params))
    header["scalars"] = str(model.params.scalar_count())
    for key, value in (data_info or {}).items():
        header[f"data.{key}"] = str(value)
    return header


def encode_checkpoint(model: VisionModel, data_info: dict[str, str] | None = None) -> bytes:
    header = "".join(f"{k}={v}\n" for k, v in build_header(model, data_info).items()).encode("utf-8")
    chunks = [_PREAMBLE.pack(MAGIC, VERSION, len(header)), header]
    for param in model.params:
        name = param.name.encode("utf-8")
        shape = param.shape
        chunks.append(struct.pack(f"<H{len(name)}sB{len(shape)}I", len(name), name, len(shape), *shape))
        chunks.append(np.asarray(param.tensor.values, dtype="<f4").tobytes())
    return b"".join(chunks)


def save_checkpoint(path: str | Path, model: VisionModel, data_info: dict[str, str] | None = None) -> Path:
    out = file_service.write_bytes_atomic(path, encode_checkpoint(model, data_info))
    logger.info("checkpoint written to %s (%d tensors, %d scalars)",
                out, len(model.params), model.params.scalar_count())
    return out


class _Reader:
    def __init__(self, data: bytes, origin: str):
        self.data, self.origin, self.offset = data, origin, 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointError(f"{self.origin}: truncated while reading {what} at byte offset {self.offset}")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(data: bytes, origin: str = "<checkpoint>") -> LoadedCheckpoint:
    reader = _Reader(data, origin)
    magic, version, header_len = reader.unpack("<4sII", "preamble")
    if magic != MAGIC:
        raise CheckpointError(f"{origin}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"{origin}: unsupported checkpoint version {version}")
    try:
        header = config_service.parse_key_values(reader.take(header_len, "header").decode("utf-8"), origin)
        cfg = config_service.model_config_from_flat(header)
        stats = config_service.stats_from_flat(header)
    except (UnicodeDecodeError, ConfigError) as exc:
        raise CheckpointError(f"{origin}: invalid header: {exc}") from exc

    model = init_model_weights(cfg, seed=0)
    model.stats = stats
    if stats is None:
        logger.warning("%s carries no normalisation stats; inputs will not be normalised", origin)
    expected = model.params.names()
    declared = header.get("parameters")
    if declared is not None and declared != str(len(expected)):
        raise CheckpointError(f"{origin}: header declares {declared} tensors, config implies {len(expected)}")

    for want in expected:
        (name_len,) = reader.unpack("<H", "name length")
        name = reader.take(name_len, "parameter name").decode("utf-8", errors="replace")
        (rank,) = reader.unpack("<B", f"rank of '{name}'")
        dims = reader.unpack(f"<{rank}I", f"dims of '{name}'")
        if name != want:
            raise CheckpointError(f"{origin}: found parameter '{name}' where '{want}' was expected")
        if tuple(dims) != model.params[name].shape:
            raise CheckpointError(f"{origin}: '{name}' has shape {tuple(dims)}, "
                                  f"config implies {model.params[name].shape}")
        raw = reader.take(4 * math.prod(dims), f"values of '{name}'")
        model.params.replace(name, np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float64))
    if reader.offset != len(data):
        raise CheckpointError(f"{origin}: {len(data) - reader.offset} trailing bytes after the last parameter")
    return LoadedCheckpoint(model, header)


def load_checkpoint(path: str | Path) -> LoadedCheckpoint:
    loaded = decode_checkpoint(file_service.read_bytes(path), str(path))
    logger.info("loaded checkpoint %s (%d tensors)", path, len(loaded.model.params))
    return loaded
