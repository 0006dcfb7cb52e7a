"""Projection panels and mask overlays for a finished inference run."""

import logging
from pathlib import Path

import numpy as np

from . import io

log = logging.getLogger(__name__)


def mip(volume, axis=0):
    """Maximum intensity projection (bright-vessel view)."""
    return np.asarray(volume).max(axis=axis)


def min_ip(volume, axis=0):
    """Minimum intensity projection (dark-vessel view)."""
    return np.asarray(volume).min(axis=axis)


def slice_levels(n):
    """Top, middle and bottom slice indices of an ``n``-slice stack."""
    if n <= 0:
        return []
    return sorted({0, n // 2, n - 1})


def volume_figures(image, label, out_dir, vid, lo=-1.0, hi=1.0):
    """Write MIP/mIP panels and overlay panels for one volume; return the paths."""
    out_dir = Path(out_dir)
    image = np.asarray(image)
    paths = [io.save_png(out_dir / f"{vid}_mip.png", mip(image), lo, hi),
             io.save_png(out_dir / f"{vid}_minip.png", min_ip(image), lo, hi)]
    if label is None:
        log.warning("no mask for %s; overlay panels skipped", vid)
        return paths
    label = np.asarray(label)
    panels = [io.overlay(image[k], label[k] == 1, label[k] == 2) for k in slice_levels(len(image))]
    paths.append(io.save_png(out_dir / f"{vid}_overlay.png", np.concatenate(panels, axis=1)))
    return paths


def run_figures(image_dir, pred_dir, out_dir):
    """Figures for every volume in ``image_dir`` that has a prediction in ``pred_dir``.

    A prediction container whose image volume is missing is skipped with a
    warning.
    """
    image_dir = Path(image_dir)
    written = []
    for pred_stem in io.list_stems(pred_dir, "_pred"):
        vid = pred_stem.name[: -len("_pred")]
        image_stem = image_dir / vid
        if not image_stem.with_suffix(".json").exists():
            log.warning("no image volume for %s; skipped", vid)
            continue
        image, _ = io.load_array(image_stem)
        try:
            label, _ = io.load_array(pred_stem)
        except (OSError, ValueError, KeyError) as exc:
            log.warning("unreadable mask for %s (%s); overlay skipped", vid, exc)
            label = None
        written += volume_figures(image, label, out_dir, vid)
    return written
