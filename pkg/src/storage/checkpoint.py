"""Flat binary checkpoint format for score networks.

Byte layout (all little-endian, no padding)::

    offset  size  field
    0       4     magic b"VESN"
    4       4     uint32 format version (1)
    8       8     uint64 d
    16      8     uint64 m
    24      8     uint64 L
    32      8     uint64 seed
    40      ...   float64 weights, row-major, W_0 (m x (d+1)), W_1 ... W_L (m x m), W_{L+1} (d x m)

The total length is ``40 + 8 * (m (d+1) + L m^2 + d m)`` bytes.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import structlog

from ..score_net import ScoreNet


logger = structlog.get_logger(__name__)

MAGIC = b"VESN"
VERSION = 1

HEADER_DTYPE = np.dtype(
    [
        ("magic", "S4"),
        ("version", "<u4"),
        ("d", "<u8"),
        ("m", "<u8"),
        ("L", "<u8"),
        ("seed", "<u8"),
    ]
)


class CheckpointFormatError(ValueError):
    """Raised when a checkpoint file has a bad magic, version or length."""


def _weight_count(d: int, m: int, L: int) -> int:  # noqa: N803
    return m * (d + 1) + L * m * m + d * m


def encode_checkpoint(net: ScoreNet) -> bytes:
    header = np.zeros(1, dtype=HEADER_DTYPE)
    header["magic"] = MAGIC
    header["version"] = VERSION
    header["d"] = net.d
    header["m"] = net.m
    header["L"] = net.L
    header["seed"] = net.seed
    weights = np.concatenate([np.ascontiguousarray(W).ravel() for W in net.layers]).astype("<f8")
    return header.tobytes() + weights.tobytes()


def decode_checkpoint(payload: bytes) -> ScoreNet:
    if len(payload) < HEADER_DTYPE.itemsize:
        raise CheckpointFormatError(
            f"checkpoint truncated: {len(payload)} bytes, header needs {HEADER_DTYPE.itemsize}"
        )
    header = np.frombuffer(payload, dtype=HEADER_DTYPE, count=1)[0]
    if bytes(header["magic"]) != MAGIC:
        raise CheckpointFormatError(f"bad magic {bytes(header['magic'])!r}")
    if int(header["version"]) != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {int(header['version'])}")
    d, m, L = int(header["d"]), int(header["m"]), int(header["L"])  # noqa: N806
    expected = HEADER_DTYPE.itemsize + 8 * _weight_count(d, m, L)
    if len(payload) != expected:
        raise CheckpointFormatError(f"checkpoint has {len(payload)} bytes, header implies {expected}")

    flat = np.frombuffer(payload, dtype="<f8", offset=HEADER_DTYPE.itemsize).astype(np.float64)
    shapes = [(m, d + 1)] + [(m, m)] * L + [(d, m)]
    matrices = []
    offset = 0
    for rows, cols in shapes:
        matrices.append(flat[offset : offset + rows * cols].reshape(rows, cols))
        offset += rows * cols
    return ScoreNet(W0=matrices[0], hidden=tuple(matrices[1:-1]), W_last=matrices[-1], seed=int(header["seed"]))


def save_checkpoint(net: ScoreNet, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_checkpoint(net)
    path.write_bytes(payload)
    checksum = hashlib.sha256(payload).hexdigest()
    logger.info("checkpoint_saved", path=str(path), d=net.d, m=net.m, L=net.L, checksum=checksum)
    return path


def load_checkpoint(path: Path) -> ScoreNet:
    net = decode_checkpoint(path.read_bytes())
    logger.info("checkpoint_loaded", path=str(path), d=net.d, m=net.m, L=net.L)
    return net


__all__ = [
    "HEADER_DTYPE",
    "MAGIC",
    "VERSION",
    "CheckpointFormatError",
    "decode_checkpoint",
    "encode_checkpoint",
    "load_checkpoint",
    "save_checkpoint",
]
