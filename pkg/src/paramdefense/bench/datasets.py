"""Toy classification datasets plus IDX and CSV ingestion.

Every dataset is split 80/20 into train and test rows by a seeded shuffle.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import DataFormatError, RejectedInputError
from ..nn import Batch

SYNTH_KINDS = ("synth_gaussians", "synth_moons", "synth_xor")
TRAIN_FRACTION = 0.8

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    name: str
    train: Batch
    test: Batch
    n_classes: int

    @property
    def n_features(self) -> int:
        return self.train.inputs.shape[1]

    def to_bytes(self) -> bytes:
        parts = [self.train.inputs, self.train.targets, self.test.inputs, self.test.targets]
        return b"".join(np.ascontiguousarray(p).tobytes() for p in parts)


def split(name: str, X: np.ndarray, y: np.ndarray, seed: int, n_classes: int | None = None) -> Dataset:
    """Seeded shuffle then an 80/20 train/test cut (both sides nonempty)."""
    m = X.shape[0]
    if m < 2:
        raise RejectedInputError("need at least 2 rows to split into train and test")
    y = np.asarray(y, dtype=np.int64)
    perm = np.random.default_rng(seed).permutation(m)
    n_train = min(m - 1, max(1, int(TRAIN_FRACTION * m)))
    tr, te = perm[:n_train], perm[n_train:]
    k = int(y.max()) + 1 if n_classes is None else n_classes
    return Dataset(name, Batch(X[tr], y[tr]), Batch(X[te], y[te]), k)


def synth_dataset(kind: str, count: int, noise: float = 0.1, seed: int = 0) -> Dataset:
    """Balanced two-class 2-D data.

    ``synth_gaussians`` places blobs at ``(-2, 0)`` and ``(2, 0)`` with standard
    deviation ``noise``; ``synth_moons`` draws two interleaved half circles;
    ``synth_xor`` puts points on the four corners of ``[-1, 1]^2`` labelled by
    the sign parity.  Gaussian noise of scale ``noise`` is added everywhere.
    """
    if kind not in SYNTH_KINDS:
        raise RejectedInputError(f"unknown dataset kind {kind!r}; expected one of {SYNTH_KINDS}")
    if count < 2 or count % 2:
        raise RejectedInputError(f"count must be an even number >= 2 for balanced classes, got {count}")
    if noise < 0:
        raise RejectedInputError("noise must be >= 0")
    rng = np.random.default_rng(seed)
    half = count // 2
    y = np.repeat([0, 1], half)
    if kind == "synth_gaussians":
        centers = np.array([[-2.0, 0.0], [2.0, 0.0]])
        X = centers[y].copy()
    elif kind == "synth_moons":
        t = rng.uniform(0.0, np.pi, count)
        X = np.where(
            (y == 0)[:, None],
            np.stack([np.cos(t), np.sin(t)], axis=1),
            np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1),
        )
    else:
        # alternate the two corners of each class so every corner is populated
        corners = np.array([[[1.0, 1.0], [-1.0, -1.0]], [[1.0, -1.0], [-1.0, 1.0]]])
        X = corners[y, np.arange(count) % 2]
    X = X + noise * rng.standard_normal((count, 2))
    return split(kind, X, y, seed, n_classes=2)


# ---------------------------------------------------------------------------
# IDX


def _idx_error(path, offset, msg):
    return DataFormatError(path, offset, msg)


def read_idx(path, expect: int | None = None) -> np.ndarray:
    """Parse an unsigned-byte IDX file into an array of its declared shape.

    ``expect`` pins the magic (``IDX_IMAGES`` or ``IDX_LABELS``).

    Raises:
        DataFormatError: with the byte offset where the file stops making sense.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 4:
        raise _idx_error(path, len(data), f"truncated header: {len(data)} of 4 magic bytes present")
    magic = struct.unpack(">I", data[:4])[0]
    if data[0] != 0 or data[1] != 0:
        raise _idx_error(path, 0, f"bad magic 0x{magic:08x}: first two bytes must be zero")
    if data[2] != 0x08:
        raise _idx_error(path, 0, f"bad magic 0x{magic:08x}: element type 0x{data[2]:02x} is not unsigned byte")
    ndim = data[3]
    if expect is not None and magic != expect:
        raise _idx_error(path, 0, f"bad magic 0x{magic:08x}: expected 0x{expect:08x}")
    if ndim == 0:
        raise _idx_error(path, 0, f"bad magic 0x{magic:08x}: zero dimensions")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise _idx_error(path, len(data), f"dimension table truncated: need {header} header bytes, file has {len(data)}")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    for i, d in enumerate(dims):
        if d == 0:
            raise _idx_error(path, 4 + 4 * i, f"dimension {i} has size zero")
    need = int(np.prod(dims, dtype=np.int64))
    have = len(data) - header
    if have < need:
        raise _idx_error(path, len(data), f"payload truncated: expected {need} bytes, found {have}")
    if have > need:
        raise _idx_error(path, header + need, f"{have - need} unexpected trailing bytes after payload")
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_idx(images_path, labels_path, seed: int = 0) -> Dataset:
    """Images scaled to ``[0, 1]`` and flattened, paired with their labels."""
    images = read_idx(images_path, IDX_IMAGES)
    labels = read_idx(labels_path, IDX_LABELS)
    if images.ndim != 3:
        raise _idx_error(images_path, 3, f"image file must have 3 dimensions, found {images.ndim}")
    if labels.ndim != 1:
        raise _idx_error(labels_path, 3, f"label file must have 1 dimension, found {labels.ndim}")
    if images.shape[0] != labels.shape[0]:
        raise _idx_error(
            labels_path, 4, f"label count {labels.shape[0]} does not match image count {images.shape[0]}"
        )
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return split(Path(images_path).name, X, labels.astype(np.int64), seed)


# ---------------------------------------------------------------------------
# CSV


def load_csv(path, schema=None, seed: int = 0) -> Dataset:
    """Numeric CSV with a header row; the last column is an integer class label.

    ``schema``, when given, is the expected list of header names.
    """
    path = Path(path)
    raw = path.read_bytes()
    offset = 0
    rows = []
    header = None
    for line in raw.splitlines(keepends=True):
        start = offset
        offset += len(line)
        text = line.decode("utf-8", errors="replace").strip()
        if not text:
            continue
        cells = next(csv.reader(io.StringIO(text)))
        if header is None:
            header = [c.strip() for c in cells]
            if len(header) < 2:
                raise DataFormatError(path, start, "header needs at least one feature column and a label column")
            if schema is not None and list(schema) != header:
                raise DataFormatError(path, start, f"header {header} does not match schema {list(schema)}")
            continue
        if len(cells) != len(header):
            raise DataFormatError(path, start, f"row {len(rows) + 1} has {len(cells)} cells, header has {len(header)}")
        values = []
        col_off = start
        for j, cell in enumerate(cells):
            try:
                v = float(cell)
            except ValueError:
                raise DataFormatError(
                    path, col_off, f"non-numeric cell {cell!r} in row {len(rows) + 1}, column {header[j]!r}"
                ) from None
            if not np.isfinite(v):
                raise DataFormatError(path, col_off, f"non-finite cell {cell!r} in row {len(rows) + 1}")
            values.append(v)
            col_off += len(cell.encode()) + 1
        label = values[-1]
        if label < 0 or label != int(label):
            raise DataFormatError(path, start, f"label {cells[-1]!r} in row {len(rows) + 1} is not a class index")
        rows.append(values)
    if not rows:
        raise DataFormatError(path, None, "no data rows")
    arr = np.array(rows, dtype=np.float64)
    return split(path.stem, arr[:, :-1], arr[:, -1].astype(np.int64), seed)
