"""On-disk container: raw little-endian arrays with a JSON sidecar.

An array stored under stem ``p`` lives in ``p.raw`` (bytes) and ``p.json``
(dtype, shape and free-form metadata such as spacing, domain and seed).
Float data is always written as ``<f4`` and masks as ``u1``.
"""

import json
import os
from pathlib import Path

import numpy as np
from PIL import Image

DTYPES = {"float32": "<f4", "uint8": "u1"}


def _stem(path):
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".raw", ".json") else path


def save_array(path, array, **meta):
    """Write ``array`` to ``<path>.raw`` + ``<path>.json`` and return the stem."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    array = np.asarray(array)
    if array.dtype == np.bool_ or array.dtype == np.uint8:
        kind = "uint8"
    else:
        kind = "float32"
    data = np.ascontiguousarray(array, dtype=DTYPES[kind])
    tmp = stem.with_suffix(".raw.tmp")
    data.tofile(tmp)
    os.replace(tmp, stem.with_suffix(".raw"))
    sidecar = {**meta, "dtype": kind, "shape": list(data.shape)}
    write_json(stem.with_suffix(".json"), sidecar)
    return stem


def load_array(path):
    """Return ``(array, meta)`` for an array saved by :func:`save_array`."""
    stem = _stem(path)
    meta = json.loads(stem.with_suffix(".json").read_text())
    data = np.fromfile(stem.with_suffix(".raw"), dtype=DTYPES[meta["dtype"]])
    return data.reshape(meta["shape"]), meta


def list_stems(directory, suffix=""):
    directory = Path(directory)
    if not directory.exists():
        return []
    return sorted(p.with_suffix("") for p in directory.glob(f"*{suffix}.json"))


def write_json(path, obj):
    """Atomically write ``obj`` as pretty JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))
    os.replace(tmp, path)


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (Path,)):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def to_uint8(image, lo=None, hi=None):
    image = np.asarray(image, dtype=np.float64)
    lo = image.min() if lo is None else lo
    hi = image.max() if hi is None else hi
    if hi <= lo:
        return np.zeros(image.shape, dtype=np.uint8)
    return np.clip(np.round((image - lo) / (hi - lo) * 255), 0, 255).astype(np.uint8)


def save_png(path, image, lo=None, hi=None):
    """Save a 2D grayscale array (or an HxWx3 uint8 array) as PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image = np.asarray(image)
    if image.ndim == 3 and image.dtype == np.uint8:
        Image.fromarray(image, mode="RGB").save(path)
    else:
        Image.fromarray(to_uint8(image, lo, hi), mode="L").save(path)
    return path


def overlay(image, brain=None, vessel=None, alpha=0.45):
    """Gray image with brain in red and vessels in green."""
    gray = to_uint8(image).astype(np.float64)
    rgb = np.stack([gray] * 3, axis=-1)
    for mask, color in ((brain, (255, 0, 0)), (vessel, (0, 255, 0))):
        if mask is None:
            continue
        m = np.asarray(mask, dtype=bool)
        rgb[m] = (1 - alpha) * rgb[m] + alpha * np.asarray(color, dtype=np.float64)
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)
