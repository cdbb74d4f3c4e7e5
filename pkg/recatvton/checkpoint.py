"""Checkpoint files.

Layout: magic ``RCVT``, u32 version, u64 header length, UTF-8 JSON header,
float64 little-endian payload, u32 CRC32 over everything before it. The
header holds the run configuration, the training step, the optimizer step
and a manifest of (name, shape, offset) entries into the payload.
"""

from dataclasses import dataclass, field
import json
import logging
from pathlib import Path
import struct
from typing import Dict, Optional
import zlib
import numpy as np
from .constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from .denoiser import TinyUNetParams
from .errors import CrcMismatch, FormatError

logger = logging.getLogger(__name__)

_PREFIX = struct.Struct("<4sIQ")
_CRC = struct.Struct("<I")
_MOMENT_PREFIXES = ("adamw.m.", "adamw.v.")


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """Network weights plus, optionally, the AdamW moments to resume training."""

    config: Dict[str, object]
    step: int
    params: TinyUNetParams
    m: Optional[TinyUNetParams] = None
    v: Optional[TinyUNetParams] = None
    optimizer_step: int = 0
    extra: Dict[str, object] = field(default_factory=dict)

    def tensors(self) -> Dict[str, np.ndarray]:
        result = dict(self.params.items())
        for prefix, moments in zip(_MOMENT_PREFIXES, (self.m, self.v)):
            if moments is not None:
                result.update({prefix + name: value for name, value in moments.items()})
        return result


def checkpoint_to_bytes(checkpoint: Checkpoint) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, value in checkpoint.tensors().items():
        data = np.ascontiguousarray(value, dtype="<f8")
        manifest.append({"name": name, "shape": list(data.shape), "offset": offset})
        chunks.append(data.tobytes())
        offset += data.nbytes
    header = json.dumps({
        "config": checkpoint.config,
        "step": int(checkpoint.step),
        "optimizer_step": int(checkpoint.optimizer_step),
        "extra": checkpoint.extra,
        "tensors": manifest,
    }, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)) + header
    body += b"".join(chunks)
    return body + _CRC.pack(zlib.crc32(body))


def checkpoint_from_bytes(buffer: bytes) -> Checkpoint:
    """Parses a checkpoint.

    Raises:
        CrcMismatch: If the trailing CRC32 does not match the content.
        FormatError: On a bad magic, unknown version or inconsistent manifest.
    """
    if len(buffer) < _PREFIX.size + _CRC.size:
        raise FormatError(f"Checkpoint too short: {len(buffer)} bytes.")
    body, (crc,) = buffer[:-_CRC.size], _CRC.unpack(buffer[-_CRC.size:])
    if zlib.crc32(body) != crc:
        raise CrcMismatch("Checkpoint CRC32 does not match its content.")
    magic, version, header_len = _PREFIX.unpack_from(body, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"Bad checkpoint magic {magic!r}.")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"Unsupported checkpoint version {version}.")
    start = _PREFIX.size + header_len
    try:
        header = json.loads(body[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"Unreadable checkpoint header: {e}") from e
    payload = body[start:]

    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        begin = entry["offset"]
        end = begin + 8 * count
        if end > len(payload):
            raise FormatError(f"Tensor '{entry['name']}' runs past the payload.")
        tensors[entry["name"]] = (
            np.frombuffer(payload[begin:end], dtype="<f8").astype(np.float64).reshape(shape)
        )

    params = {k: v for k, v in tensors.items() if not k.startswith(_MOMENT_PREFIXES)}
    moments = []
    for prefix in _MOMENT_PREFIXES:
        part = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        moments.append(TinyUNetParams(part) if part else None)
    return Checkpoint(
        config=header["config"],
        step=header["step"],
        params=TinyUNetParams(params),
        m=moments[0],
        v=moments[1],
        optimizer_step=header.get("optimizer_step", 0),
        extra=header.get("extra", {}),
    )


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> Path:
    path = Path(path).expanduser()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_to_bytes(checkpoint))
    logger.info(f"Wrote checkpoint '{path}' (step {checkpoint.step}).")
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Loads a checkpoint file.

    Raises:
        FileNotFoundError: If the file does not exist.
        FormatError: If the file is malformed, see `checkpoint_from_bytes`.
    """
    path = Path(path).expanduser()
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: '{path}'")
    return checkpoint_from_bytes(path.read_bytes())
