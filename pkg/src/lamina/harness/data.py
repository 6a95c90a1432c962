"""Dataset loading: IDX files (MNIST) and small synthetic generators."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lamina.errors import ConfigError, FormatError
from lamina.numerics import Rng

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

_SPLIT_FILES = {
    "train": ("train-images", "train-labels"),
    "test": ("t10k-images", "t10k-labels"),
}


def _read_bytes(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(buf, expected_magic=None, path=None):
    """Parse an unsigned-byte IDX buffer into an array of its declared shape."""
    if len(buf) < 4:
        raise FormatError("file too short for an IDX magic number", offset=len(buf) if buf else 0, path=path)
    magic = struct.unpack(">I", buf[:4])[0]
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != 0x08:
        raise FormatError(f"bad IDX magic 0x{magic:08x} (only unsigned-byte data is supported)", 0, path)
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(f"expected magic 0x{expected_magic:08x}, found 0x{magic:08x}", 0, path)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError(f"header declares {ndim} dimensions but the file ends", len(buf), path)
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    size = int(np.prod(dims, dtype=np.int64))
    if len(buf) < header + size:
        raise FormatError(f"truncated data: need {size} bytes after the header", len(buf), path)
    if len(buf) > header + size:
        raise FormatError("trailing bytes after the declared data", header + size, path)
    return np.frombuffer(buf, dtype=np.uint8, count=size, offset=header).reshape(dims)


def read_idx(path, expected_magic=None):
    return parse_idx(_read_bytes(path), expected_magic, path=str(path))


def load_idx(images_path, labels_path):
    """Images flattened to ``[n, rows * cols]`` in [0, 1], and integer labels."""
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels", offset=4, path=str(labels_path)
        )
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return x, labels.astype(np.int64)


def find_idx_file(data_dir, stem):
    data_dir = Path(data_dir)
    kind = "idx3" if "images" in stem else "idx1"
    for name in (f"{stem}-{kind}-ubyte", f"{stem}.{kind}-ubyte"):
        for suffix in ("", ".gz"):
            candidate = data_dir / (name + suffix)
            if candidate.exists():
                return candidate
    raise FileNotFoundError(f"no {stem} IDX file in {data_dir}")


def load_mnist(data_dir, split="train"):
    images, labels = _SPLIT_FILES[split]
    return load_idx(find_idx_file(data_dir, images), find_idx_file(data_dir, labels))


def make_blobs(rng, n, n_classes=2, n_features=20, spread=4.0, std=1.0):
    """Gaussian clusters with well-separated random centres, balanced classes."""
    centres = rng.normal(0.0, spread, size=(n_classes, n_features))
    labels = np.arange(n) % n_classes
    labels = labels[rng.permutation(n)]
    x = centres[labels] + rng.normal(0.0, std, size=(n, n_features))
    return x, labels.astype(np.int64)


SYNTHETIC = {"blobs": make_blobs}


@dataclass
class DatasetSpec:
    """Where data comes from and how much of it to use.

    ``source`` is ``"mnist"`` (read from ``data_dir``) or a synthetic generator
    name. Subsets are seeded permutation prefixes.
    """

    source: str = "mnist"
    data_dir: str | None = None
    train_subset: int | None = 10000
    test_subset: int | None = 2000
    flatten: bool = True
    options: dict = field(default_factory=dict)


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int
    description: dict = field(default_factory=dict)

    @property
    def n_features(self):
        return self.x_train.shape[1]


def _prefix(rng, n, subset, what):
    if subset is None:
        return np.arange(n)
    if subset > n:
        raise ConfigError(f"{what} subset {subset} exceeds the {n} available samples")
    return np.sort(rng.permutation(n)[:subset])


def load_dataset(spec, seed=0):
    rng = Rng(seed).split("data")
    if spec.source == "mnist":
        data_dir = spec.data_dir or os.environ.get("LAMINA_DATA_DIR")
        if not data_dir:
            raise ConfigError("no MNIST directory given (use --data-dir or LAMINA_DATA_DIR)")
        x_train, y_train = load_mnist(data_dir, "train")
        x_test, y_test = load_mnist(data_dir, "test")
        tr = _prefix(rng.split("train"), len(y_train), spec.train_subset, "train")
        te = _prefix(rng.split("test"), len(y_test), spec.test_subset, "test")
        x_train, y_train, x_test, y_test = x_train[tr], y_train[tr], x_test[te], y_test[te]
        n_classes = 10
    elif spec.source in SYNTHETIC:
        opts = dict(spec.options)
        n_train = spec.train_subset or 1000
        n_test = spec.test_subset or 200
        x, y = SYNTHETIC[spec.source](rng.split("generate"), n_train + n_test, **opts)
        perm = rng.split("split").permutation(n_train + n_test)
        tr, te = perm[:n_train], perm[n_train:]
        x_train, y_train, x_test, y_test = x[tr], y[tr], x[te], y[te]
        n_classes = opts.get("n_classes", 2)
    else:
        raise ConfigError(f"unknown data source {spec.source!r}; expected 'mnist' or one of {sorted(SYNTHETIC)}")
    return Dataset(
        x_train,
        y_train,
        x_test,
        y_test,
        n_classes,
        {
            "source": spec.source,
            "train_size": int(len(y_train)),
            "test_size": int(len(y_test)),
        },
    )
