"""Image datasets: container type, binary file format, synthesis, augmentation.

Pixels are float32 in [0, 1] unless a dataset has been normalized, in
which case its ``pixel_min``/``pixel_max`` bounds record the new range.
Images use NCHW layout throughout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage

MAGIC = b"FADS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")  # magic, version, count, C, H, W, classes


class DatasetFormatError(ValueError):
    """Base class for malformed dataset files."""


class BadMagicError(DatasetFormatError):
    pass


class UnsupportedVersionError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class LabelRangeError(DatasetFormatError):
    pass


class PixelRangeError(DatasetFormatError):
    pass


@dataclass
class ImageDataset:
    """Immutable-by-convention image classification dataset.

    Args:
        images: float32 array of shape (N, C, H, W).
        labels: integer array of shape (N,) with values in [0, num_classes).
        num_classes: number of distinct label values the task allows.
        name: short identifier used in reports and CSV rows.
        pixel_min / pixel_max: inclusive bounds every pixel must satisfy.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    pixel_min: float = 0.0
    pixel_max: float = 1.0

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.images.shape[0] < 1:
            raise ValueError("dataset must contain at least one sample")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(
                f"labels shape {self.labels.shape} does not match "
                f"{self.images.shape[0]} images"
            )
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise LabelRangeError(
                f"labels must lie in [0, {self.num_classes}), got range "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < self.pixel_min - 1e-6 or hi > self.pixel_max + 1e-6:
            raise PixelRangeError(
                f"pixels must lie in [{self.pixel_min}, {self.pixel_max}], "
                f"got range [{lo}, {hi}]"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def subset(self, indices, name: Optional[str] = None) -> "ImageDataset":
        """A copy of the selected samples (shares no mutable state)."""
        indices = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            images=self.images[indices],
            labels=self.labels[indices],
            name=name if name is not None else self.name,
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


# -- binary format ---------------------------------------------------------------


def save_dataset(dataset: ImageDataset, path) -> None:
    """Write a dataset to the package's binary file format.

    Layout: ASCII magic "FADS"; little-endian u32 fields version, count,
    channels, height, width, num_classes; then per sample one u8 label
    followed by C*H*W float32 pixels in row-major (C, H, W) order.
    Pixels must lie in [0, 1] and labels in [0, 255].
    """
    if dataset.pixel_min < 0.0 or dataset.pixel_max > 1.0:
        raise PixelRangeError(
            "file format stores pixels in [0, 1]; normalize after loading instead"
        )
    if dataset.num_classes > 256 or dataset.labels.max() > 255:
        raise LabelRangeError("file format stores labels as u8 (0..255)")
    count, channels, height, width = dataset.images.shape
    record = np.dtype(
        [("label", "u1"), ("pixels", "<f4", (channels * height * width,))]
    )
    body = np.empty(count, dtype=record)
    body["label"] = dataset.labels.astype(np.uint8)
    body["pixels"] = dataset.images.reshape(count, -1)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, count, channels,
                              height, width, dataset.num_classes))
        fh.write(body.tobytes())


def load_dataset(path, name: Optional[str] = None) -> ImageDataset:
    """Read a dataset written by :func:`save_dataset`.

    Raises a specific :class:`DatasetFormatError` subclass for each
    failure mode: wrong magic, unsupported version, truncated payload,
    out-of-range labels, out-of-range pixels.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        if raw[:4] != MAGIC and len(raw) >= 4:
            raise BadMagicError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
        raise TruncatedFileError(
            f"header needs {_HEADER.size} bytes, file has {len(raw)}"
        )
    magic, version, count, channels, height, width, num_classes = \
        _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"unsupported format version {version}, expected {FORMAT_VERSION}"
        )
    if count < 1 or channels < 1 or height < 1 or width < 1 or num_classes < 1:
        raise DatasetFormatError("header dimensions must all be positive")
    pixels_per_image = channels * height * width
    record = np.dtype([("label", "u1"), ("pixels", "<f4", (pixels_per_image,))])
    payload = raw[_HEADER.size:]
    expected = count * record.itemsize
    if len(payload) < expected:
        raise TruncatedFileError(
            f"payload needs {expected} bytes for {count} samples, "
            f"found {len(payload)}"
        )
    if len(payload) > expected:
        raise DatasetFormatError(
            f"{len(payload) - expected} trailing bytes after {count} samples"
        )
    body = np.frombuffer(payload, dtype=record)
    labels = body["label"].astype(np.int64)
    images = np.ascontiguousarray(body["pixels"]).reshape(
        count, channels, height, width)
    if labels.max() >= num_classes:
        raise LabelRangeError(
            f"label {labels.max()} out of range for {num_classes} classes"
        )
    finite = np.isfinite(images)
    if not finite.all():
        raise PixelRangeError("pixels must be finite")
    lo, hi = float(images.min()), float(images.max())
    if lo < 0.0 or hi > 1.0:
        raise PixelRangeError(f"pixels must lie in [0, 1], got [{lo}, {hi}]")
    return ImageDataset(images, labels, num_classes,
                        name=name if name is not None else "dataset")


# -- synthetic generator -----------------------------------------------------------


def generate_synthetic(
    num_samples: int,
    image_size: int,
    num_classes: int = 2,
    noise_level: float = 0.3,
    channels: int = 1,
    seed: int = 0,
    name: str = "synthetic",
    signal_strength: float = 0.2,
) -> ImageDataset:
    """Class-conditional blob images, deterministic per seed.

    Every image carries a bright anchor blob at the centre; the class
    is encoded by a compact low-amplitude marker blob at a fixed
    class-specific position on a ring around the anchor.
    ``signal_strength`` sets the marker's base amplitude and therefore
    how far samples sit from the decision boundary; ``noise_level``
    scales per-sample marker amplitude spread, position jitter and
    background clutter.  At noise level zero every image of a class is
    identical and a nearest-centroid rule separates classes perfectly.

    Labels are balanced up to remainder and shuffled, so any contiguous
    slice of the dataset still mixes classes.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be positive")
    if image_size < 4:
        raise ValueError("image_size must be at least 4")
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    if noise_level < 0:
        raise ValueError("noise_level must be non-negative")
    if signal_strength <= 0:
        raise ValueError("signal_strength must be positive")
    rng = np.random.default_rng(seed)
    labels = np.arange(num_samples) % num_classes
    rng.shuffle(labels)

    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    radius = image_size / 4.0
    marker_r = image_size / 2.0 + radius * np.sin(angles)
    marker_c = image_size / 2.0 + radius * np.cos(angles)
    anchor_sigma = image_size / 4.0
    marker_sigma = image_size / 10.0
    centre = image_size / 2.0

    rows = np.arange(image_size, dtype=np.float64)[:, None]
    cols = np.arange(image_size, dtype=np.float64)[None, :]

    anchor_jit = rng.normal(0.0, noise_level * 1.5, size=(num_samples, 2))
    marker_jit = rng.normal(0.0, noise_level * 1.2, size=(num_samples, 2))
    # Per-sample marker strength: the spread controls how many samples sit
    # close to the decision boundary.
    spread = min(0.8, 2.0 * noise_level)
    amp = signal_strength * (1.0 + spread * rng.uniform(-1.0, 1.0, num_samples))
    coarse = rng.random((num_samples, 4, 4)) * (noise_level * 0.25)
    speckle = rng.normal(0.0, noise_level * 0.04,
                         size=(num_samples, image_size, image_size))

    reps = -(-image_size // 4)  # ceil division for the coarse upsample
    clutter = np.repeat(np.repeat(coarse, reps, axis=1), reps, axis=2)
    clutter = clutter[:, :image_size, :image_size] + speckle

    dr = rows[None, :, :] - (centre + anchor_jit[:, 0])[:, None, None]
    dc = cols[None, :, :] - (centre + anchor_jit[:, 1])[:, None, None]
    anchor = 0.55 * np.exp(
        -(dr * dr + dc * dc) / (2.0 * anchor_sigma * anchor_sigma))

    dr = rows[None, :, :] - (marker_r[labels] + marker_jit[:, 0])[:, None, None]
    dc = cols[None, :, :] - (marker_c[labels] + marker_jit[:, 1])[:, None, None]
    marker = amp[:, None, None] * np.exp(
        -(dr * dr + dc * dc) / (2.0 * marker_sigma * marker_sigma))

    frames = np.clip(anchor + marker + clutter, 0.0, 1.0).astype(np.float32)
    images = np.repeat(frames[:, None, :, :], channels, axis=1)
    return ImageDataset(images, labels, num_classes, name=name)


# -- augmentation -------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentOps:
    """Augmentation settings applied by :func:`augment`.

    Args:
        h_flip_prob: per-sample probability of a horizontal mirror.
        rotation_degrees: per-sample rotations drawn uniformly from
            [-rotation_degrees, +rotation_degrees]; 0 disables rotation.
        normalize: optional per-channel (mean, std) applied as
            (x - mean) / std after the geometric ops.
    """

    h_flip_prob: float = 0.0
    rotation_degrees: float = 0.0
    normalize: Optional[tuple[Sequence[float], Sequence[float]]] = None

    def __post_init__(self):
        if not 0.0 <= self.h_flip_prob <= 1.0:
            raise ValueError(f"h_flip_prob must lie in [0, 1], got {self.h_flip_prob}")
        if self.rotation_degrees < 0:
            raise ValueError("rotation_degrees must be non-negative")


def _norm_params(normalize, channels: int) -> tuple[np.ndarray, np.ndarray]:
    mean, std = normalize
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    std = np.atleast_1d(np.asarray(std, dtype=np.float64))
    if mean.size == 1:
        mean = np.full(channels, mean[0])
    if std.size == 1:
        std = np.full(channels, std[0])
    if mean.shape != (channels,) or std.shape != (channels,):
        raise ValueError(
            f"normalize needs scalar or {channels}-channel mean/std, "
            f"got shapes {mean.shape} and {std.shape}"
        )
    if np.any(std == 0.0):
        raise ValueError("normalize std must be nonzero for every channel")
    return mean, std


def augment(dataset: ImageDataset, ops: AugmentOps, seed: int = 0) -> ImageDataset:
    """Apply flips, rotations and normalization, returning a new dataset.

    Labels and image shapes are preserved.  With all settings at their
    identity values the returned images equal the input bit for bit.
    Rotation uses nearest-neighbour resampling on a fixed canvas with
    zero fill, so pixel bounds are preserved.
    """
    images = dataset.images.copy()
    labels = dataset.labels.copy()
    rng = np.random.default_rng(seed)

    if ops.h_flip_prob > 0.0:
        flips = rng.random(len(dataset)) < ops.h_flip_prob
        images[flips] = images[flips, :, :, ::-1]

    if ops.rotation_degrees > 0.0:
        angles = rng.uniform(-ops.rotation_degrees, ops.rotation_degrees,
                             size=len(dataset))
        for i, angle in enumerate(angles):
            images[i] = ndimage.rotate(
                images[i], angle, axes=(1, 2), reshape=False,
                order=0, mode="constant", cval=0.0,
            )

    pixel_min, pixel_max = dataset.pixel_min, dataset.pixel_max
    if ops.normalize is not None:
        mean, std = _norm_params(ops.normalize, images.shape[1])
        images = ((images - mean[None, :, None, None])
                  / std[None, :, None, None]).astype(np.float32)
        ends = np.concatenate([(pixel_min - mean) / std, (pixel_max - mean) / std])
        pixel_min, pixel_max = float(ends.min()), float(ends.max())

    return ImageDataset(images, labels, dataset.num_classes, name=dataset.name,
                        pixel_min=pixel_min, pixel_max=pixel_max)
