"""Domain datasets, synthetic domain pairs, label-distribution resampling and
minibatch sampling."""
from __future__ import annotations

import bz2
import gzip
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
RUDX_MAGIC = b"RUDX1"
IMAGE_SHAPE = (1, 28, 28)


class DataFormatError(ValueError):
    """Raised when a dataset file does not follow its declared layout."""


@dataclass(frozen=True)
class DomainDataset:
    """An immutable collection of same-shaped instances with optional labels.

    ``instances`` has shape ``(N, *shape)`` (float32); ``labels`` is an int64
    array of length N or None for an unlabeled domain.
    """

    instances: np.ndarray
    labels: Optional[np.ndarray]
    label_domain_size: int
    name: str = "dataset"

    def __post_init__(self):
        x = np.ascontiguousarray(self.instances, dtype=np.float32)
        if x.ndim < 2:
            raise ValueError(f"instances must be at least 2-D, got shape {x.shape}")
        if self.label_domain_size < 1:
            raise ValueError("label_domain_size must be positive")
        y = self.labels
        if y is not None:
            y = np.ascontiguousarray(y, dtype=np.int64)
            if y.shape != (x.shape[0],):
                raise ValueError(
                    f"count mismatch: {x.shape[0]} instances but {y.shape} labels"
                )
            if y.size and (y.min() < 0 or y.max() >= self.label_domain_size):
                raise ValueError(
                    f"labels must lie in [0, {self.label_domain_size})"
                )
            y.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "instances", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.instances.shape[0]

    @property
    def shape(self) -> tuple:
        return self.instances.shape[1:]

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None

    def class_counts(self) -> np.ndarray:
        self._require_labels("class_counts")
        return np.bincount(self.labels, minlength=self.label_domain_size)

    def take(self, index: np.ndarray, name: Optional[str] = None) -> "DomainDataset":
        index = np.asarray(index, dtype=np.int64)
        return DomainDataset(
            self.instances[index],
            None if self.labels is None else self.labels[index],
            self.label_domain_size,
            name or self.name,
        )

    def unlabeled(self) -> "DomainDataset":
        return DomainDataset(self.instances, None, self.label_domain_size, self.name)

    def _require_labels(self, op: str):
        if self.labels is None:
            raise ValueError(f"{op} requires a labeled dataset ({self.name!r} is unlabeled)")


@dataclass
class Minibatch:
    inputs: np.ndarray
    labels: Optional[np.ndarray] = None
    origin_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        m = self.inputs.shape[0]
        if self.origin_mask is None:
            self.origin_mask = np.zeros(m, dtype=bool)
        if self.origin_mask.shape != (m,):
            raise ValueError("origin_mask length must equal the batch size")
        if self.labels is not None and self.labels.shape != (m,):
            raise ValueError("labels length must equal the batch size")

    def __len__(self) -> int:
        return self.inputs.shape[0]


# -- IDX ---------------------------------------------------------------------

def _open(path, mode="rb"):
    path = os.fspath(path)
    if path.endswith(".gz"):
        return gzip.open(path, mode)
    if path.endswith(".bz2"):
        return bz2.open(path, mode)
    return open(path, mode)


def _read_exact(buf: bytes, offset: int, n: int, path) -> bytes:
    chunk = buf[offset:offset + n]
    if len(chunk) != n:
        raise DataFormatError(f"{path}: truncated file (wanted {n} bytes at offset {offset})")
    return chunk


def read_idx_images(path) -> np.ndarray:
    """Read an IDX3 image file into a uint8 array of shape (N, rows, cols)."""
    with _open(path) as fh:
        buf = fh.read()
    magic, count, rows, cols = struct.unpack(">IIII", _read_exact(buf, 0, 16, path))
    if magic != IDX_IMAGE_MAGIC:
        raise DataFormatError(f"{path}: bad magic number 0x{magic:08x} for an image file")
    pixels = _read_exact(buf, 16, count * rows * cols, path)
    return np.frombuffer(pixels, dtype=np.uint8).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    with _open(path) as fh:
        buf = fh.read()
    magic, count = struct.unpack(">II", _read_exact(buf, 0, 8, path))
    if magic != IDX_LABEL_MAGIC:
        raise DataFormatError(f"{path}: bad magic number 0x{magic:08x} for a label file")
    return np.frombuffer(_read_exact(buf, 8, count, path), dtype=np.uint8).copy()


def write_idx_images(path, images: np.ndarray):
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("images must have shape (N, rows, cols)")
    n, rows, cols = images.shape
    with _open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray):
    labels = np.asarray(labels, dtype=np.uint8)
    with _open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def load_idx(image_path, label_path, num_classes: int = 10, name: Optional[str] = None) -> DomainDataset:
    """Load an IDX image/label pair as 1x28x28 grayscale images in [0, 1]."""
    images = read_idx_images(image_path)
    labels = read_idx_labels(label_path)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    if images.shape[1:] != IMAGE_SHAPE[1:]:
        raise DataFormatError(
            f"{image_path}: expected 28x28 images, got {images.shape[1]}x{images.shape[2]}"
        )
    x = (images.astype(np.float32) / 255.0).reshape(-1, *IMAGE_SHAPE)
    return DomainDataset(x, labels.astype(np.int64), num_classes,
                         name or Path(image_path).name.split(".")[0])


def _parse_libsvm_usps(path):
    images, labels = [], []
    with _open(path, "rb") as fh:
        for line in fh:
            parts = line.decode().split()
            if not parts:
                continue
            row = np.zeros(256, dtype=np.float32)
            for item in parts[1:]:
                idx, val = item.split(":")
                row[int(idx) - 1] = float(val)
            labels.append(int(float(parts[0])) - 1)
            images.append(row)
    x = (np.stack(images) + 1.0) / 2.0  # libsvm USPS pixels are in [-1, 1]
    return x.reshape(-1, 16, 16), np.asarray(labels)


def convert_usps(source_path, image_out, label_out, split: str = "train") -> int:
    """Rescale 16x16 USPS digits to 28x28 (bilinear) and store them as IDX.

    Accepts the libsvm text distribution (optionally .bz2) or the common HDF5
    layout with ``<split>/data`` and ``<split>/target``. Returns the count.
    """
    import torch
    import torch.nn.functional as F

    source_path = os.fspath(source_path)
    if source_path.endswith((".h5", ".hdf5")):
        try:
            import h5py
        except ImportError:
            raise ImportError("reading HDF5 USPS needs h5py (pip install 'artifact[usps]')") from None
        with h5py.File(source_path, "r") as fh:
            x = np.asarray(fh[split]["data"], dtype=np.float32).reshape(-1, 16, 16)
            y = np.asarray(fh[split]["target"], dtype=np.int64)
    else:
        x, y = _parse_libsvm_usps(source_path)
    if x.max() > 1.0 + 1e-6:
        x = x / 255.0
    t = torch.from_numpy(np.clip(x, 0.0, 1.0)).unsqueeze(1)
    up = F.interpolate(t, size=(28, 28), mode="bilinear", align_corners=False)
    pixels = np.rint(up.squeeze(1).clamp(0, 1).numpy() * 255).astype(np.uint8)
    write_idx_images(image_out, pixels)
    write_idx_labels(label_out, y)
    return len(y)


# -- binary container for flat datasets --------------------------------------

_UNLABELED = 0xFFFF


def save_rudx(ds: DomainDataset, path):
    """Serialize a flat-vector dataset: header then float32 rows then uint16 labels."""
    if len(ds.shape) != 1:
        raise ValueError("only flat (N, dim) datasets can be stored in the RUDX container")
    if ds.label_domain_size >= _UNLABELED:
        raise ValueError("label_domain_size too large for 16-bit labels")
    n, dim = ds.instances.shape
    labels = (np.full(n, _UNLABELED) if ds.labels is None else ds.labels).astype("<u2")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(RUDX_MAGIC)
        fh.write(struct.pack("<III", ds.label_domain_size, n, dim))
        fh.write(ds.instances.astype("<f4").tobytes())
        fh.write(labels.tobytes())
    os.replace(tmp, path)


def load_rudx(path, name: Optional[str] = None) -> DomainDataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:5] != RUDX_MAGIC:
        raise DataFormatError(f"{path}: not a RUDX1 container")
    k, n, dim = struct.unpack("<III", _read_exact(buf, 5, 12, path))
    off = 17
    x = np.frombuffer(_read_exact(buf, off, 4 * n * dim, path), dtype="<f4").reshape(n, dim)
    off += 4 * n * dim
    y = np.frombuffer(_read_exact(buf, off, 2 * n, path), dtype="<u2").astype(np.int64)
    if len(buf) != off + 2 * n:
        raise DataFormatError(f"{path}: trailing bytes after label block")
    labels = None if n and np.all(y == _UNLABELED) else y
    return DomainDataset(x.astype(np.float32), labels, k, name or Path(path).stem)


# -- synthetic domains --------------------------------------------------------

def rotation_matrix(dim: int, angle: float) -> np.ndarray:
    """Rotation by ``angle`` in the plane of the first two coordinates."""
    r = np.eye(dim)
    c, s = math.cos(angle), math.sin(angle)
    r[:2, :2] = [[c, -s], [s, c]]
    return r


def blob_means(num_classes: int, dim: int, radius: float = 4.0) -> np.ndarray:
    """Class means evenly spaced on a circle in the first two coordinates."""
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    means = np.zeros((num_classes, dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def make_synthetic_pair(
    num_classes: int,
    per_class: int,
    dim: int,
    shift=None,
    rotation_angle: float = 0.0,
    noise_sd: float = 0.1,
    seed: int = 0,
    radius: float = 4.0,
) -> tuple[DomainDataset, DomainDataset]:
    """Gaussian blobs for a source domain and its rotated-then-shifted target.

    Target instances are ``R @ mean + shift + noise`` with fresh noise, so the
    class-conditional target distribution is the source one pushed through
    the rigid map ``x -> R x + shift``.
    """
    if num_classes < 2 or per_class < 1 or dim < 2:
        raise ValueError("need num_classes >= 2, per_class >= 1, dim >= 2")
    shift = np.zeros(dim) if shift is None else np.asarray(shift, dtype=np.float64)
    if shift.shape == (2,) and dim > 2:
        shift = np.concatenate([shift, np.zeros(dim - 2)])
    if shift.shape != (dim,):
        raise ValueError(f"shift must have length {dim}")
    rng = np.random.default_rng(seed)
    means = blob_means(num_classes, dim, radius)
    target_means = means @ rotation_matrix(dim, rotation_angle).T + shift
    labels = np.repeat(np.arange(num_classes), per_class)
    xs = means[labels] + noise_sd * rng.standard_normal((labels.size, dim))
    xt = target_means[labels] + noise_sd * rng.standard_normal((labels.size, dim))
    return (
        DomainDataset(xs.astype(np.float32), labels, num_classes, "synthetic-source"),
        DomainDataset(xt.astype(np.float32), labels.copy(), num_classes, "synthetic-target"),
    )


# -- label-distribution resampling ------------------------------------------

def linear_decay_counts(counts: Iterable[int], start_ratio: float, end_ratio: float) -> np.ndarray:
    counts = np.asarray(list(counts), dtype=np.int64)
    k = counts.size
    steps = np.arange(k) / (k - 1) if k > 1 else np.zeros(1)
    ratios = start_ratio + (end_ratio - start_ratio) * steps
    # the epsilon keeps exact products such as 100 * 0.3 from flooring to 29
    return np.floor(counts * ratios + 1e-9).astype(np.int64)


def resample_linear_decay(ds: DomainDataset, start_ratio: float = 1.0, end_ratio: float = 0.3,
                          seed: int = 0) -> DomainDataset:
    """Keep floor(n_k * r_k) instances of class k, r_k interpolating linearly
    from ``start_ratio`` (class 0) to ``end_ratio`` (class K-1)."""
    ds._require_labels("resample_linear_decay")
    if not 0 < end_ratio <= start_ratio <= 1:
        raise ValueError("need 0 < end_ratio <= start_ratio <= 1")
    rng = np.random.default_rng(seed)
    keep_counts = linear_decay_counts(ds.class_counts(), start_ratio, end_ratio)
    keep = []
    for k, n_keep in enumerate(keep_counts):
        pool = np.flatnonzero(ds.labels == k)
        keep.append(np.sort(rng.choice(pool, size=n_keep, replace=False)))
    return ds.take(np.concatenate(keep), name=f"{ds.name}-decay")


def subset_partial(ds: DomainDataset, keep_classes) -> DomainDataset:
    """Restrict to the given classes; labels keep their source indices."""
    ds._require_labels("subset_partial")
    keep_classes = sorted(set(int(c) for c in keep_classes))
    if not keep_classes:
        raise ValueError("keep_classes must be nonempty")
    if keep_classes[0] < 0 or keep_classes[-1] >= ds.label_domain_size:
        raise ValueError(f"keep_classes must lie in [0, {ds.label_domain_size})")
    mask = np.isin(ds.labels, keep_classes)
    return ds.take(np.flatnonzero(mask), name=f"{ds.name}-partial{len(keep_classes)}")


def balance_source(ds: DomainDataset, seed: int = 0) -> DomainDataset:
    """Oversample minority classes (with replacement) up to the largest class.

    Classes with no instances at all cannot be resampled and stay absent.
    """
    ds._require_labels("balance_source")
    rng = np.random.default_rng(seed)
    counts = ds.class_counts()
    target = counts.max(initial=0)
    index = [np.arange(len(ds))]
    for k, n in enumerate(counts):
        if 0 < n < target:
            pool = np.flatnonzero(ds.labels == k)
            index.append(rng.choice(pool, size=target - n, replace=True))
    return ds.take(np.concatenate(index), name=ds.name)


# -- minibatches ---------------------------------------------------------------

def source_share(m: int, mix_ratio: float) -> int:
    """Number of source rows in a mixed batch: round-half-up of M * mix_ratio."""
    return int(math.floor(m * mix_ratio + 0.5))


def _draw(n_pool: int, size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(n_pool, size=size, replace=size > n_pool)


def sample_minibatch(target: DomainDataset, source: DomainDataset, m: int,
                     mix_ratio: float, rng: np.random.Generator) -> Minibatch:
    """Draw M target-side rows, ``round(M * mix_ratio)`` of them from the source.

    Source rows lose their labels and are flagged in ``origin_mask``. Rows are
    drawn without replacement whenever the pool is large enough.
    """
    if m < 1:
        raise ValueError("batch size must be >= 1")
    if not 0.0 <= mix_ratio <= 1.0:
        raise ValueError("mix_ratio must lie in [0, 1]")
    n_src = source_share(m, mix_ratio)
    n_tgt = m - n_src
    if n_tgt and len(target) == 0:
        raise ValueError("target pool is empty")
    if n_src and len(source) == 0:
        raise ValueError("source pool is empty")
    parts = []
    if n_tgt:
        parts.append(target.instances[_draw(len(target), n_tgt, rng)])
    if n_src:
        parts.append(source.instances[_draw(len(source), n_src, rng)])
    inputs = np.concatenate(parts)
    origin = np.concatenate([np.zeros(n_tgt, dtype=bool), np.ones(n_src, dtype=bool)])
    perm = rng.permutation(m)
    return Minibatch(inputs[perm], None, origin[perm])


def sample_rows(ds: DomainDataset, m: int, rng: np.random.Generator,
                from_source: bool = True) -> Minibatch:
    """Plain minibatch from a single pool, keeping labels when present."""
    if len(ds) == 0:
        raise ValueError(f"{ds.name!r} is empty")
    idx = _draw(len(ds), m, rng)
    labels = None if ds.labels is None else ds.labels[idx]
    return Minibatch(ds.instances[idx], labels, np.full(m, from_source))
