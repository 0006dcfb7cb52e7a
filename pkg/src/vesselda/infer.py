"""Averaged-mask inference and batch prediction over stored volumes."""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from . import io
from .errors import NotReady, ShapeError
from .metrics import aggregate, label_metrics
from .nets import DOMAINS, VesselDAModel, flip

log = logging.getLogger(__name__)


@dataclass
class InferenceResult:
    x_rec: np.ndarray
    x_trans: np.ndarray
    prob_rec: np.ndarray
    prob_trans: np.ndarray
    final_mask: np.ndarray


def average_argmax(prob_a, prob_b, axis=0):
    """Argmax over classes of the mean of two probability maps.

    ``np.argmax`` returns the first maximum, so exact ties resolve to the
    lowest class index.
    """
    avg = (np.asarray(prob_a) + np.asarray(prob_b)) / 2
    return np.argmax(avg, axis=axis).astype(np.uint8)


def _as_batch(x, size):
    x = torch.as_tensor(np.asarray(x, dtype=np.float32))
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1:] != (1, size, size):
        raise ShapeError(f"expected images of size {size}x{size}, got {tuple(x.shape)}")
    return x


@torch.no_grad()
def infer(model: VesselDAModel, x, domain="target", require_trained=True):
    """Segment images of a known domain.

    ``x`` is (H, W) or (N, H, W).  The reconstruction pass (true label) and the
    translation pass (flipped label) each produce class probabilities; the
    final mask is the argmax of their average.
    """
    if require_trained and int(model.trained_phase) < 2:
        raise NotReady("model has not completed Phase 2 training")
    model.eval()
    single = np.ndim(x) == 2
    xb = _as_batch(x, model.cfg.size)
    d = DOMAINS[domain] if isinstance(domain, str) else int(domain)
    label = torch.full((xb.shape[0],), d, dtype=torch.long)
    x_rec, f_rec = model.synthesize(model.encode(xb, label))
    x_tr, f_tr = model.synthesize(model.encode(xb, flip(label)))
    p_rec = F.softmax(model.G.segment(f_rec), dim=1).numpy()
    p_tr = F.softmax(model.G.segment(f_tr), dim=1).numpy()
    final = average_argmax(p_rec, p_tr, axis=1)
    res = InferenceResult(x_rec[:, 0].numpy(), x_tr[:, 0].numpy(), p_rec, p_tr, final)
    if single:
        res = InferenceResult(res.x_rec[0], res.x_trans[0], p_rec[0], p_tr[0], final[0])
    return res


def infer_volume(model, images, domain, batch_size=16, require_trained=True):
    masks = []
    for start in range(0, len(images), batch_size):
        masks.append(infer(model, images[start:start + batch_size], domain, require_trained).final_mask)
    return np.concatenate(masks) if masks else np.zeros((0,) + tuple(np.shape(images)[1:]), dtype=np.uint8)


def infer_batch(model, stems, out_dir, write_png=True, batch_size=16):
    """Predict every stored volume in ``stems`` and write masks plus a report.

    Each stem names an image container with a ``domain`` entry in its
    sidecar; an optional ``<stem>_label`` container provides ground truth.
    Failures are recorded per file and do not stop the batch.
    """
    out_dir = Path(out_dir)
    per_volume, errors, outputs = {}, {}, []
    for stem in stems:
        stem = Path(stem)
        vid = stem.name
        try:
            images, meta = io.load_array(stem)
            mask = infer_volume(model, images, meta["domain"], batch_size)
            pred_stem = io.save_array(out_dir / f"{vid}_pred", mask, domain=meta["domain"], source=str(stem))
            outputs.append(str(pred_stem))
            label_stem = stem.with_name(f"{vid}_label")
            if label_stem.with_suffix(".json").exists():
                gt, _ = io.load_array(label_stem)
                per_volume[vid] = label_metrics(mask, gt)
            if write_png:
                for k in _figure_slices(len(images)):
                    io.save_png(out_dir / "png" / f"{vid}_s{k:02d}.png",
                                io.overlay(images[k], mask[k] == 1, mask[k] == 2))
        except (OSError, KeyError, ValueError) as exc:
            log.error("inference failed for %s: %s", stem, exc)
            errors[vid] = f"{type(exc).__name__}: {exc}"
    report = {"volumes": sorted(per_volume), "outputs": outputs, "errors": errors}
    if per_volume:
        report["metrics"] = aggregate(per_volume).to_dict()
    io.write_json(out_dir / "report.json", report)
    return report


def _figure_slices(n):
    if n == 0:
        return []
    return sorted({0, n // 2, n - 1})
