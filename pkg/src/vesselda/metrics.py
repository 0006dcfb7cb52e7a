"""Overlap and topology metrics: Dice, precision, recall, clDice.

Skeletons come from two-subiteration parallel thinning (Guo & Hall, 1989)
with 8-connected foreground.  Every iteration applies the first subiteration
(peels south/east border pixels) to the whole image, then the second (peels
north/west border pixels); iterations repeat until nothing changes.  The
deletion rules are precomputed as 256-entry lookup tables indexed by the
8-neighbourhood code, so the result is deterministic and scan-order free.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyReport, ShapeError

log = logging.getLogger(__name__)

# neighbour bit k in circular order starting east, counter-clockwise
_OFFSETS = [(0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1)]


def _build_thinning_luts():
    first = np.zeros(256, dtype=bool)
    second = np.zeros(256, dtype=bool)
    for code in range(256):
        x = [bool((code >> k) & 1) for k in range(8)]
        # exactly one 8-connected run of foreground around the pixel
        crossing = sum(1 for i in (0, 2, 4, 6) if not x[i] and (x[i + 1] or x[(i + 2) % 8]))
        n1 = sum(1 for k in (1, 3, 5, 7) if x[k] or x[k - 1])
        n2 = sum(1 for k in (1, 3, 5, 7) if x[k] or x[(k + 1) % 8])
        base = crossing == 1 and 2 <= min(n1, n2) <= 3
        first[code] = base and not ((x[1] or x[2] or not x[7]) and x[0])
        second[code] = base and not ((x[5] or x[6] or not x[3]) and x[4])
    return first, second


_THIN_LUTS = _build_thinning_luts()


def _neighbour_codes(padded):
    h, w = padded.shape[0] - 2, padded.shape[1] - 2
    code = np.zeros((h, w), dtype=np.int64)
    for k, (dy, dx) in enumerate(_OFFSETS):
        code |= padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w].astype(np.int64) << k
    return code


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return pred, gt


def skeletonize(mask):
    """Thin a 2D mask (or each slice of a stack) to a one-pixel-wide skeleton."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 3:
        return np.stack([skeletonize(m) for m in mask])
    if mask.ndim != 2:
        raise ShapeError(f"expected a 2D mask, got {mask.ndim}D")
    img = np.pad(mask, 1)
    core = img[1:-1, 1:-1]
    changed = True
    while changed:
        changed = False
        for lut in _THIN_LUTS:
            delete = core & lut[_neighbour_codes(img)]
            if delete.any():
                core[delete] = False
                changed = True
    return core.copy()


def dice(pred, gt):
    pred, gt = _check_pair(pred, gt)
    denom = pred.sum() + gt.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, gt).sum() / denom)


def precision_recall(pred, gt, flags=None):
    """Return (precision, recall).

    Empty-set conventions: both empty -> (1, 1); an empty prediction with a
    nonempty ground truth gives precision 0 and appends a flag to ``flags``.
    """
    pred, gt = _check_pair(pred, gt)
    inter = np.logical_and(pred, gt).sum()
    n_pred, n_gt = pred.sum(), gt.sum()
    if n_pred == 0 and n_gt == 0:
        return 1.0, 1.0
    if n_pred == 0:
        if flags is not None:
            flags.append("precision_undefined_empty_prediction")
        precision = 0.0
    else:
        precision = float(inter / n_pred)
    if n_gt == 0:
        if flags is not None:
            flags.append("recall_undefined_empty_ground_truth")
        recall = 0.0
    else:
        recall = float(inter / n_gt)
    return precision, recall


def cldice(pred, gt, flags=None, skel_pred=None, skel_gt=None):
    """Harmonic mean of topology precision and topology sensitivity."""
    pred, gt = _check_pair(pred, gt)
    if not pred.any() and not gt.any():
        return 1.0
    skel_pred = skeletonize(pred) if skel_pred is None else skel_pred
    skel_gt = skeletonize(gt) if skel_gt is None else skel_gt
    t_prec = np.logical_and(skel_pred, gt).sum() / skel_pred.sum() if skel_pred.any() else 0.0
    t_sens = np.logical_and(skel_gt, pred).sum() / skel_gt.sum() if skel_gt.any() else 0.0
    if t_prec + t_sens == 0:
        if flags is not None and not (pred.any() and gt.any()):
            flags.append("cldice_empty_mask")
        return 0.0
    return float(2 * t_prec * t_sens / (t_prec + t_sens))


def vessel_metrics(pred_vessel, gt_vessel, region=None, flags=None):
    """All four metrics for one binary pair, restricted to ``region`` if given."""
    pred, gt = _check_pair(pred_vessel, gt_vessel)
    if region is not None:
        region = np.asarray(region, dtype=bool)
        pred = pred & region
        gt = gt & region
    p, r = precision_recall(pred, gt, flags)
    return {"dice": dice(pred, gt), "precision": p, "recall": r, "cldice": cldice(pred, gt, flags)}


def label_metrics(pred_label, gt_label):
    """Per-class metrics for 3-class label volumes.

    Vessel metrics are evaluated inside the ground-truth brain; brain metrics
    use the union of brain and vessel classes.
    """
    pred_label = np.asarray(pred_label)
    gt_label = np.asarray(gt_label)
    if pred_label.shape != gt_label.shape:
        raise ShapeError(f"shape mismatch {pred_label.shape} vs {gt_label.shape}")
    flags = []
    brain_gt = gt_label >= 1
    vessels = vessel_metrics(pred_label == 2, gt_label == 2, region=brain_gt, flags=flags)
    bflags = []
    p, r = precision_recall(pred_label >= 1, brain_gt, bflags)
    brain = {"dice": dice(pred_label >= 1, brain_gt), "precision": p, "recall": r}
    return {"vessels": vessels, "brain": brain, "flags": sorted(set(flags + bflags))}


@dataclass
class MetricsReport:
    per_volume: dict
    summary: dict
    flags: dict = field(default_factory=dict)
    std_definition: str = "population"

    def to_dict(self):
        return {
            "per_volume": self.per_volume,
            "summary": self.summary,
            "flags": self.flags,
            "std_definition": self.std_definition,
        }

    def table(self):
        return format_table(self.summary)


def format_pct(mean, std):
    """Render a fraction pair as Table-1 style percentages, e.g. '70.4 ± 2.4'."""
    return f"{100 * mean:.1f} ± {100 * std:.1f}"


def aggregate(per_volume):
    """Mean and population std over volumes for every class/metric pair.

    ``per_volume`` maps volume id -> output of :func:`label_metrics`.
    """
    if not per_volume:
        raise EmptyReport("no volumes to aggregate")
    summary = {}
    flags = {}
    for vid, res in per_volume.items():
        if res.get("flags"):
            flags[vid] = list(res["flags"])
    classes = [c for c in next(iter(per_volume.values())) if c != "flags"]
    for cls in classes:
        summary[cls] = {}
        for metric in next(iter(per_volume.values()))[cls]:
            values = np.array([res[cls][metric] for res in per_volume.values()], dtype=np.float64)
            mean, std = float(values.mean()), float(values.std())
            summary[cls][metric] = {"mean": mean, "std": std, "text": format_pct(mean, std), "n": len(values)}
    return MetricsReport(per_volume=per_volume, summary=summary, flags=flags)


def format_table(summary, column="Ours"):
    metrics = ("dice", "precision", "recall", "cldice")
    names = {"dice": "Dice", "precision": "Precision", "recall": "Recall", "cldice": "clDice"}
    lines = [f"{'':<10} {'':<8} {column:>14}"]
    for metric in metrics:
        for cls in ("vessels", "brain"):
            if cls in summary and metric in summary[cls]:
                lines.append(f"{names[metric]:<10} {cls.capitalize():<8} {summary[cls][metric]['text']:>14}")
    return "\n".join(lines) + "\n"
