"""
In-memory image datasets and the IDX / CSV ingestion formats.

Images are float32 tensors of shape ``(n, c, h, w)`` scaled to [0, 1].
"""

import csv
import math
import struct
from pathlib import Path

import numpy as np
import torch

IDX_UBYTE = 0x08


class DataFormatError(ValueError):
    pass


class Dataset:
    """Images, integer labels and a train/test tag per sample.

    Reads of :attr:`labels` are counted in :attr:`label_reads` so callers can
    verify that a training routine never consumed ground truth.
    """

    def __init__(self, images, labels, num_classes, ids=None, splits=None):
        images = torch.as_tensor(images, dtype=torch.float32)
        labels = torch.as_tensor(labels, dtype=torch.long)
        if images.ndim != 4:
            raise DataFormatError(f"images must be (n, c, h, w), got shape {tuple(images.shape)}")
        if images.shape[0] < 1 or images.shape[0] != labels.shape[0]:
            raise DataFormatError("images and labels disagree on sample count")
        if images.min() < 0 or images.max() > 1:
            raise DataFormatError("pixel values outside [0, 1]")
        if labels.min() < 0 or labels.max() >= num_classes:
            raise DataFormatError(f"label out of range for {num_classes} classes")
        n = images.shape[0]
        self.images = images
        self._labels = labels
        self.num_classes = int(num_classes)
        self.ids = list(ids) if ids is not None else [str(i) for i in range(n)]
        self.splits = np.asarray(splits if splits is not None else ["train"] * n, dtype=object)
        if len(self.ids) != n or len(self.splits) != n:
            raise DataFormatError("ids/splits length does not match sample count")
        self.label_reads = 0

    def __len__(self):
        return self.images.shape[0]

    def __repr__(self):
        c, h, w = self.shape
        return f"Dataset(n={len(self)}, shape=({c}, {h}, {w}), K={self.num_classes})"

    @property
    def labels(self):
        self.label_reads += 1
        return self._labels

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    def split(self, name):
        """Sub-dataset holding only samples tagged ``name``."""
        idx = np.flatnonzero(self.splits == name)
        if idx.size == 0:
            raise KeyError(f"no samples in split {name!r}")
        return self.subset(idx)

    def subset(self, index):
        index = torch.as_tensor(np.asarray(index), dtype=torch.long)
        ix = index.tolist()
        return Dataset(
            self.images[index],
            self._labels[index],
            self.num_classes,
            ids=[self.ids[i] for i in ix],
            splits=self.splits[ix],
        )


def _read_idx(path):
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: file too short for IDX header")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype != IDX_UBYTE or ndim < 1:
        raise DataFormatError(f"{path}: bad magic number 0x{int.from_bytes(raw[:4], 'big'):08x}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataFormatError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = math.prod(dims)
    if len(raw) - head < count:
        raise DataFormatError(f"{path}: payload shorter than header shape {dims}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)


def read_idx_images(path):
    arr = _read_idx(path)
    if arr.ndim == 3:
        arr = arr[:, None]
    elif arr.ndim != 4:
        raise DataFormatError(f"{path}: image IDX must have 3 or 4 dimensions, got {arr.ndim}")
    return torch.from_numpy(arr.astype(np.float32) / 255.0)


def read_idx_labels(path):
    arr = _read_idx(path)
    if arr.ndim != 1:
        raise DataFormatError(f"{path}: label IDX must be one-dimensional")
    return torch.from_numpy(arr.astype(np.int64))


def write_idx(path, array):
    """Write a uint8 array as IDX (big-endian dimension header)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, IDX_UBYTE, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def write_idx_images(path, images):
    """Quantize a [0, 1] image batch to bytes and write it as IDX."""
    images = torch.as_tensor(images).detach().cpu()
    q = torch.round(images.clamp(0, 1) * 255).to(torch.uint8).numpy()
    if q.shape[1] == 1:
        q = q[:, 0]
    write_idx(path, q)


def _read_csv(path, shape):
    labels, pixels = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            try:
                values = [int(v) for v in row]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: non-integer field") from exc
            labels.append(values[0])
            pixels.append(values[1:])
    if not labels:
        raise DataFormatError(f"{path}: no rows")
    width = {len(p) for p in pixels}
    if len(width) != 1:
        raise DataFormatError(f"{path}: rows have differing pixel counts")
    (npix,) = width
    if shape is None:
        side = math.isqrt(npix)
        if side * side != npix:
            raise DataFormatError(f"{path}: cannot infer image shape from {npix} pixels")
        shape = (1, side, side)
    if math.prod(shape) != npix:
        raise DataFormatError(f"{path}: shape {shape} does not match {npix} pixels per row")
    arr = np.asarray(pixels)
    if arr.min() < 0 or arr.max() > 255:
        raise DataFormatError(f"{path}: pixel values must be bytes 0..255")
    images = torch.from_numpy(arr.astype(np.float32).reshape(-1, *shape) / 255.0)
    return images, torch.tensor(labels, dtype=torch.long)


def load_dataset(path, format, *, num_classes, labels_path=None, shape=None, split="train"):
    """Load an image dataset from IDX or CSV.

    For ``format="idx"`` ``path`` is the image file and ``labels_path`` the
    matching label file. For ``format="csv"`` each row is
    ``label,pixel0,pixel1,...`` with row-major byte pixels; ``shape`` gives
    ``(c, h, w)`` and defaults to a square single-channel image.
    """
    if format == "idx":
        if labels_path is None:
            raise ValueError("IDX ingestion needs labels_path")
        images = read_idx_images(path)
        labels = read_idx_labels(labels_path)
        if shape is not None and tuple(images.shape[1:]) != tuple(shape):
            raise DataFormatError(f"{path}: image shape {tuple(images.shape[1:])} != expected {tuple(shape)}")
        if images.shape[0] != labels.shape[0]:
            raise DataFormatError(f"{path}: {images.shape[0]} images but {labels.shape[0]} labels")
    elif format == "csv":
        images, labels = _read_csv(path, shape)
    else:
        raise ValueError(f"unknown dataset format {format!r}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DataFormatError(f"{path}: label out of range for {num_classes} classes")
    stem = Path(path).stem
    ids = [f"{stem}:{i}" for i in range(len(labels))]
    return Dataset(images, labels, num_classes, ids=ids, splits=[split] * len(labels))


def concat(datasets):
    first = datasets[0]
    return Dataset(
        torch.cat([d.images for d in datasets]),
        torch.cat([d._labels for d in datasets]),
        first.num_classes,
        ids=[i for d in datasets for i in d.ids],
        splits=np.concatenate([d.splits for d in datasets]),
    )
