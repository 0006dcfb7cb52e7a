"""Preprocessing from raw volumes to fixed-size network inputs.

Pipeline per volume: standardize -> resample to a uniform spacing -> slice ->
clip/normalize each slice to [-1, 1] -> pad/crop to a square size.  Binary
brain and vessel masks are merged into a 3-class label image (vessel over
brain over background) and one-hot encoded on demand.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateInput, InvalidLabel

log = logging.getLogger(__name__)

N_CLASSES = 3
BACKGROUND, BRAIN, VESSEL = 0, 1, 2


@dataclass
class Volume:
    data: np.ndarray
    spacing_mm: tuple

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != self.data.ndim:
            raise ValueError(f"spacing {self.spacing_mm} does not match a {self.data.ndim}D array")
        if any(s <= 0 for s in self.spacing_mm):
            raise ValueError(f"spacing must be positive, got {self.spacing_mm}")
        if not np.isfinite(self.data).all():
            raise ValueError("volume contains non-finite values")


@dataclass
class PreprocConfig:
    target_spacing_mm: float = 0.5
    lo_pct: float = 0.5
    hi_pct: float = 99.5
    size: int = 64
    pad_value: float = -1.0


def standardize(vol: Volume) -> Volume:
    """Zero mean, unit (population) standard deviation."""
    std = vol.data.std()
    if not std > 0:
        raise DegenerateInput("cannot standardize a constant volume")
    data = (vol.data - vol.data.mean()) / std
    # second pass removes the O(eps) residue of the first
    data = (data - data.mean()) / data.std()
    return Volume(data, vol.spacing_mm)


def resample(vol: Volume, target_spacing_mm, order=1) -> Volume:
    """Linear-interpolation resampling onto a uniform grid.

    Output samples sit at ``i * target_spacing`` from the first input voxel,
    covering the input extent ``(n - 1) * spacing`` to within one output voxel.
    """
    target = np.broadcast_to(np.asarray(target_spacing_mm, dtype=np.float64), (vol.data.ndim,))
    if np.any(target <= 0):
        raise ValueError(f"target spacing must be positive, got {target_spacing_mm}")
    spacing = np.asarray(vol.spacing_mm)
    if np.allclose(spacing, target, rtol=0, atol=1e-12):
        return Volume(vol.data.copy(), tuple(target))
    extent = (np.asarray(vol.data.shape) - 1) * spacing
    out_shape = np.floor(extent / target + 1e-9).astype(int) + 1
    coords = np.meshgrid(*[np.arange(n) * t / s for n, t, s in zip(out_shape, target, spacing)], indexing="ij")
    data = ndimage.map_coordinates(vol.data, coords, order=order, mode="nearest")
    return Volume(data, tuple(target))


def clip_normalize(image, lo_pct=0.5, hi_pct=99.5):
    """Clip to the [lo_pct, hi_pct] percentiles and map the clip range onto [-1, 1]."""
    if not 0 <= lo_pct < hi_pct <= 100:
        raise ValueError(f"need 0 <= lo_pct < hi_pct <= 100, got {lo_pct}, {hi_pct}")
    image = np.asarray(image, dtype=np.float64)
    lo, hi = np.percentile(image, [lo_pct, hi_pct])
    if hi <= lo:
        log.warning("degenerate clip interval [%g, %g]; returning zeros", lo, hi)
        return np.zeros_like(image)
    out = (np.clip(image, lo, hi) - lo) / (hi - lo) * 2.0 - 1.0
    return np.clip(out, -1.0, 1.0)


def pad_crop(image, size, pad_value=-1.0):
    """Symmetric constant padding / centre cropping to ``size x size``.

    An odd surplus is split with the extra row/column on the bottom/right for
    padding and trimmed from the bottom/right for cropping.
    """
    if size <= 0:
        raise ValueError(f"size must be positive, got {size}")
    image = np.asarray(image)
    out = image
    for axis in (0, 1):
        n = out.shape[axis]
        if n < size:
            before = (size - n) // 2
            widths = [(0, 0), (0, 0)]
            widths[axis] = (before, size - n - before)
            out = np.pad(out, widths, mode="constant", constant_values=pad_value)
        elif n > size:
            start = (n - size) // 2
            out = np.take(out, np.arange(start, start + size), axis=axis)
    return out


def combine_masks(brain_mask, vessel_mask):
    """Merge binary masks into one label image; vessels win over brain."""
    label = np.zeros(np.shape(brain_mask), dtype=np.uint8)
    label[np.asarray(brain_mask, dtype=bool)] = BRAIN
    label[np.asarray(vessel_mask, dtype=bool)] = VESSEL
    return label


def one_hot(label):
    """(H, W) labels in {0, 1, 2} -> (3, H, W) indicator array."""
    label = np.asarray(label)
    if label.size and (label.min() < 0 or label.max() >= N_CLASSES or not np.all(label == np.round(label))):
        raise InvalidLabel(f"labels must be integers in [0, {N_CLASSES - 1}]")
    label = label.astype(np.int64)
    return (np.arange(N_CLASSES).reshape((-1,) + (1,) * label.ndim) == label[None]).astype(np.float32)


def preprocess_volume(image, spacing_mm, cfg: PreprocConfig, brain_mask=None, vessel_mask=None):
    """Full pipeline for one (slices, H, W) volume.

    Returns normalized slices of shape (n, size, size) and, when masks are
    given, label slices of the same shape.
    """
    vol = resample(standardize(Volume(image, spacing_mm)), cfg.target_spacing_mm)
    label = None
    if brain_mask is not None:
        label_vol = Volume(combine_masks(brain_mask, vessel_mask), spacing_mm)
        label = resample(label_vol, cfg.target_spacing_mm, order=0).data.round().astype(np.uint8)
    slices, labels = [], []
    for k in range(vol.data.shape[0]):
        s = clip_normalize(vol.data[k], cfg.lo_pct, cfg.hi_pct)
        slices.append(pad_crop(s, cfg.size, cfg.pad_value))
        if label is not None:
            labels.append(pad_crop(label[k], cfg.size, BACKGROUND))
    images = np.stack(slices).astype(np.float32)
    return images, (np.stack(labels).astype(np.uint8) if label is not None else None)
