"""Binary checkpoint files.

Layout (all integers little-endian)::

    magic      4 bytes  b"PFCK"
    version    u16
    head       u8       index into HEADS
    n_layers   u16
    layers     n_layers x (n_in u32, n_out u32, activation u8)
    k_total    u64
    params     k_total x f32
    mask       ceil(k_total / 8) bytes, bit i of byte j is entry 8j + i
    checksum   u64      blake2b-64 of every preceding byte
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointError
from ..nn import ACTIVATIONS, HEADS, Dense, Model, ParamPartition

MAGIC = b"PFCK"
VERSION = 1


def _checksum(blob: bytes) -> bytes:
    return hashlib.blake2b(blob, digest_size=8).digest()


def encode_checkpoint(model: Model, partition: ParamPartition | None = None) -> bytes:
    if partition is None:
        partition = ParamPartition.full(model)
    partition.check(model.k_total, require_nonempty=False)
    out = bytearray(MAGIC)
    out += struct.pack("<HBH", VERSION, HEADS.index(model.head), len(model.layers))
    for layer in model.layers:
        out += struct.pack("<IIB", layer.n_in, layer.n_out, ACTIVATIONS.index(layer.activation))
    out += struct.pack("<Q", model.k_total)
    out += np.asarray(model.params, dtype="<f4").tobytes()
    out += np.packbits(partition.mask, bitorder="little").tobytes()
    out += _checksum(bytes(out))
    return bytes(out)


def save_checkpoint(model: Model, partition: ParamPartition | None, path) -> Path:
    """Write ``model`` (stored at 32-bit precision) and its corruptible mask."""
    path = Path(path)
    path.write_bytes(encode_checkpoint(model, partition))
    return path


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated while reading {what} at byte offset {self.pos}")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(blob: bytes, path="<memory>") -> tuple[Model, ParamPartition]:
    r = _Reader(blob, path)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} is not supported (this build reads version {VERSION})")
    if len(blob) < 8 or _checksum(blob[:-8]) != blob[-8:]:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupted")
    head_code, n_layers = r.unpack("<BH", "header")
    if head_code >= len(HEADS):
        raise CheckpointError(f"{path}: unknown head code {head_code}")
    layers = []
    for i in range(n_layers):
        n_in, n_out, act = r.unpack("<IIB", f"layer {i}")
        if act >= len(ACTIVATIONS):
            raise CheckpointError(f"{path}: unknown activation code {act} in layer {i}")
        layers.append(Dense(n_in, n_out, ACTIVATIONS[act]))
    (k_total,) = r.unpack("<Q", "parameter count")
    if k_total != sum(layer.size for layer in layers):
        raise CheckpointError(f"{path}: parameter count {k_total} disagrees with the layer table")
    params = np.frombuffer(r.take(4 * k_total, "parameters"), dtype="<f4").astype(np.float64)
    nbytes = (k_total + 7) // 8
    bits = np.frombuffer(r.take(nbytes, "mask"), dtype=np.uint8)
    mask = np.unpackbits(bits, bitorder="little")[:k_total].astype(bool)
    r.take(8, "checksum")
    if r.pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.pos} unexpected trailing bytes")
    return Model(layers, HEADS[head_code], params), ParamPartition(mask)


def load_checkpoint(path) -> tuple[Model, ParamPartition]:
    """Read a checkpoint, validating its version and checksum.

    Raises:
        CheckpointError: naming the file and what is wrong with it.
    """
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), path)
