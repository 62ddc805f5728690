"""Reader (and fixture writer) for the MNIST IDX binary format.

Layout, all header integers big-endian::

    images: 0x00000803, count, rows, cols, then count*rows*cols unsigned bytes
    labels: 0x00000801, count, then count unsigned bytes

Files ending in ``.gz`` are decompressed transparently.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import IngestionError
from .model import Dataset

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


def _read_bytes(path) -> bytes:
    path = Path(path)
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rb") as fh:
                return fh.read()
        return path.read_bytes()
    except FileNotFoundError:
        raise IngestionError("file not found", path=str(path)) from None
    except OSError as exc:
        raise IngestionError(f"cannot read file: {exc}", path=str(path)) from None


def _header(buf: bytes, n_ints: int, magic: int, path: str) -> tuple[int, ...]:
    need = 4 * n_ints
    if len(buf) < need:
        raise IngestionError(f"truncated header: need {need} bytes, file has {len(buf)}",
                             path=path, offset=len(buf))
    fields = struct.unpack(f">{n_ints}I", buf[:need])
    if fields[0] != magic:
        raise IngestionError(f"bad magic number 0x{fields[0]:08x}, expected 0x{magic:08x}",
                             path=path, offset=0)
    return fields[1:]


def read_idx_images(path) -> np.ndarray:
    """Return a ``(count, rows, cols)`` uint8 array."""
    buf = _read_bytes(path)
    count, rows, cols = _header(buf, 4, IMAGES_MAGIC, str(path))
    expected = 16 + count * rows * cols
    if len(buf) < expected:
        raise IngestionError(
            f"truncated pixel data: header promises {count} images of {rows}x{cols}",
            path=str(path), offset=len(buf))
    if len(buf) > expected:
        raise IngestionError("trailing bytes after the last image", path=str(path), offset=expected)
    return np.frombuffer(buf, dtype=np.uint8, offset=16).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    buf = _read_bytes(path)
    (count,) = _header(buf, 2, LABELS_MAGIC, str(path))
    expected = 8 + count
    if len(buf) < expected:
        raise IngestionError(f"truncated label data: header promises {count} labels",
                             path=str(path), offset=len(buf))
    if len(buf) > expected:
        raise IngestionError("trailing bytes after the last label", path=str(path), offset=expected)
    return np.frombuffer(buf, dtype=np.uint8, offset=8).astype(np.int64)


def load_mnist_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Load an image/label file pair as a Dataset with pixels scaled to [0, 1]."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IngestionError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}",
            path=str(labels_path), offset=4)
    if labels.size and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise IngestionError(f"label {labels[bad]} outside [0, {num_classes})",
                             path=str(labels_path), offset=8 + bad)
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(X, labels, num_classes)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    Path(path).write_bytes(struct.pack(">4I", IMAGES_MAGIC, count, rows, cols) + images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">2I", LABELS_MAGIC, labels.size) + labels.tobytes())
