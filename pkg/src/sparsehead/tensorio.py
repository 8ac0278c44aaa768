"""Binary formats: rank-4 tensor dumps and named-parameter checkpoints.

Tensor record: magic ``CT4\\0``, four little-endian uint32 dims (B, C, H, W),
then B*C*H*W little-endian float32 values, row-major.

Checkpoint: magic ``CEASC1\\0``, a little-endian uint32 blob count, then per
blob a uint16 name length, the UTF-8 name, and one tensor record. Arrays of
lower rank are stored padded to rank 4 and reshaped back by the loader's
caller (the head knows its parameter shapes).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContractViolation

TENSOR_MAGIC = b"CT4\0"
CHECKPOINT_MAGIC = b"CEASC1\0"


def tensor_bytes(x: np.ndarray) -> bytes:
    arr = np.asarray(x)
    if arr.ndim > 4:
        raise ContractViolation(f"cannot dump rank-{arr.ndim} arrays")
    shape = (1,) * (4 - arr.ndim) + arr.shape
    payload = np.ascontiguousarray(arr.reshape(shape), dtype="<f4")
    return TENSOR_MAGIC + struct.pack("<4I", *shape) + payload.tobytes()


def read_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    if buf[offset : offset + 4] != TENSOR_MAGIC:
        raise ContractViolation("bad tensor magic")
    dims = struct.unpack_from("<4I", buf, offset + 4)
    count = int(np.prod(dims))
    start = offset + 4 + 16
    end = start + 4 * count
    if end > len(buf):
        raise ContractViolation("truncated tensor record")
    data = np.frombuffer(buf[start:end], dtype="<f4").reshape(dims)
    return data.copy(), end


def dump_tensor(path: Path | str, x: np.ndarray) -> None:
    Path(path).write_bytes(tensor_bytes(x))


def load_tensor(path: Path | str) -> np.ndarray:
    data, _ = read_tensor(Path(path).read_bytes())
    return data


def checkpoint_bytes(params: dict[str, np.ndarray]) -> bytes:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(params))]
    for name, value in params.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ContractViolation(f"parameter name too long: {name!r}")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(tensor_bytes(value))
    return b"".join(chunks)


def read_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if buf[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ContractViolation("bad checkpoint magic")
    offset = len(CHECKPOINT_MAGIC)
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        name = buf[offset : offset + name_len].decode("utf-8")
        offset += name_len
        tensor, offset = read_tensor(buf, offset)
        out[name] = tensor
    return out


def save_checkpoint(path: Path | str, params: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path: Path | str) -> dict[str, np.ndarray]:
    return read_checkpoint(Path(path).read_bytes())
