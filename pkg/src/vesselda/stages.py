"""Pipeline stages operating on directories of stored arrays.

Each stage reads its inputs from disk, writes its outputs under ``out_dir``
and returns a dict of summary metrics.  The CLI wraps every stage with
locking and a run manifest.
"""

import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import io
from .checkpoint import load_checkpoint, model_hash, phase1_handoff, save_checkpoint
from .config import RunConfig
from .errors import ConfigError
from .figures import run_figures
from .infer import infer_batch, infer_volume
from .losses import PerceptualMetric, loss_R
from .metrics import aggregate, format_table, label_metrics
from .nets import DOMAINS, VesselDAModel
from .phase1 import MixedDomainSampler, discriminator_accuracy, sample_generator, train_phase1
from .phase2 import Phase2Data, cycle, reconstruct, reconstruction_vs_random, train_phase2, translation_checks
from .preproc import one_hot, preprocess_volume
from .sato import segment_volume
from .synthgen import SPLIT_NAMES, SplitCounts, make_split, source_spec, target_spec

log = logging.getLogger(__name__)

TRAIN_SPLITS = ("S_labeled", "T_unlabeled", "T_labeled")
SPLIT_FILE = "split.json"


def _seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)


def read_split(directory):
    path = Path(directory) / SPLIT_FILE
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run synth/preprocess first")
    return json.loads(path.read_text())


# ---------------------------------------------------------------- synth


def synth_stage(cfg: RunConfig, out_dir):
    s = cfg.synthgen
    counts = SplitCounts(s.source_train, s.target_unlabeled, s.target_labeled, s.val, s.test_source, s.test_target)
    src = source_spec(image_size=cfg.image_size, **s.source)
    tgt = target_spec(image_size=cfg.image_size, **s.target)
    split = make_split(src, tgt, counts, seed=cfg.seed, slices_per_volume=s.slices_per_volume)
    out_dir = Path(out_dir)
    membership = {}
    for name, vols in split.items():
        membership[name] = []
        for v in vols:
            meta = {"domain": v.domain, "split": name, "seed": v.seed, "volume_id": v.volume_id,
                    "spacing_mm": [0.5] + list(v.slices[0].spacing_mm)}
            io.save_array(out_dir / v.volume_id, v.image, **meta)
            io.save_array(out_dir / f"{v.volume_id}_brain", v.brain_mask, **meta)
            io.save_array(out_dir / f"{v.volume_id}_vessel", v.vessel_mask, **meta)
            membership[name].append(v.volume_id)
    io.write_json(out_dir / SPLIT_FILE, membership)
    return {"volumes": {k: len(v) for k, v in membership.items()}}


# ---------------------------------------------------------------- preprocess


def preprocess_stage(cfg: RunConfig, in_dir, out_dir):
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    membership = read_split(in_dir)
    n_slices = 0
    for name in SPLIT_NAMES:
        for vid in membership.get(name, []):
            image, meta = io.load_array(in_dir / vid)
            brain, _ = io.load_array(in_dir / f"{vid}_brain")
            vessel, _ = io.load_array(in_dir / f"{vid}_vessel")
            images, labels = preprocess_volume(image, meta["spacing_mm"], cfg.preproc, brain, vessel)
            io.save_array(out_dir / vid, images, **meta)
            io.save_array(out_dir / f"{vid}_label", labels, **meta)
            n_slices += len(images)
    io.write_json(out_dir / SPLIT_FILE, membership)
    return {"slices": n_slices}


def load_images(data_dir, splits, with_labels=False):
    """Slices (and optionally label slices) of every volume in ``splits``, by domain."""
    data_dir = Path(data_dir)
    membership = read_split(data_dir)
    images, labels = {"source": [], "target": []}, {"source": [], "target": []}
    for name in splits:
        for vid in membership.get(name, []):
            x, meta = io.load_array(data_dir / vid)
            images[meta["domain"]].extend(x)
            if with_labels:
                labels[meta["domain"]].extend(io.load_array(data_dir / f"{vid}_label")[0])
    return (images, labels) if with_labels else images


# ---------------------------------------------------------------- phase 1


def phase1_stage(cfg: RunConfig, data_dir, out_dir):
    _seed_everything(cfg.seed)
    out_dir = Path(out_dir)
    images = load_images(data_dir, TRAIN_SPLITS)
    records = []

    def on_log(rec):
        records.append(rec)
        log.info("phase1 %s", rec)

    def on_checkpoint(state):
        torch.save(state.state_dict(), out_dir / "train_state.pt")
        io.write_json(out_dir / "metrics.json", records)
        if state.iteration % cfg.phase1.sample_every == 0 or state.iteration == cfg.phase1.iterations:
            save_grid(sample_generator(state, 16, seed=cfg.seed), out_dir / f"samples_{state.iteration:06d}.png")

    out_dir.mkdir(parents=True, exist_ok=True)
    state = train_phase1(cfg.net, cfg.phase1, images, on_checkpoint=on_checkpoint, on_log=on_log)
    io.write_json(out_dir / "metrics.json", records)
    # discriminator statistics on real slices never used for training
    held_out = load_images(data_dir, ("val", "test_source", "test_target"))
    if not any(held_out.values()):
        held_out = images
    with torch.no_grad():
        real = MixedDomainSampler(held_out, seed=cfg.seed).sample(64)
        state.model.D.eval()
        d_real = float(state.model.D(real).mean())
        d_fake = float(state.model.D(sample_generator(state, 64, seed=cfg.seed + 1)).mean())
        d_acc = discriminator_accuracy(state, real, seed=cfg.seed + 1)
    model = phase1_handoff(state)
    ks = [r["ks"] for r in records if "ks" in r]
    summary = {"ks_init": ks[0], "ks_final": ks[-1], "d_real_mean": d_real, "d_fake_mean": d_fake,
               "d_accuracy": d_acc, "lr_halvings": state.lr_halvings,
               "losses_finite": all(np.isfinite(r[k]) for r in records for k in ("loss_D", "loss_G", "r1") if k in r)}
    save_checkpoint(out_dir / "ckpt", model, state.iteration, cfg.seed, cfg.to_dict(), summary=summary)
    return summary


def save_grid(images, path, cols=8):
    x = images.detach().cpu().numpy()[:, 0]
    rows = [np.concatenate(list(x[i:i + cols]), axis=1) for i in range(0, len(x) - len(x) % cols or len(x), cols)]
    io.save_png(path, np.concatenate(rows, axis=0), -1.0, 1.0)


# ---------------------------------------------------------------- phase 2


def phase2_data(cfg: RunConfig, data_dir):
    images, labels = load_images(data_dir, ("S_labeled", "T_labeled"), with_labels=True)
    unlabeled = load_images(data_dir, ("T_unlabeled",))
    if not images["source"]:
        raise ConfigError("Phase 2 needs labelled source volumes")
    onehot = lambda ls: np.stack([one_hot(l) for l in ls]) if ls else np.zeros((0, 3, 1, 1), np.float32)
    return Phase2Data(
        np.stack(images["source"]), onehot(labels["source"]),
        np.stack(unlabeled["target"]) if unlabeled["target"] else [],
        np.stack(images["target"]) if images["target"] else None,
        onehot(labels["target"]) if labels["target"] else None,
        seed=cfg.seed, labeled_fraction=cfg.phase2.labeled_fraction,
    )


def make_validation(cfg: RunConfig, data_dir, n_recon=16):
    """Validation callback: vessel Dice on the validation volumes plus image losses."""
    images, labels = load_images(data_dir, ("val",), with_labels=True)
    vols = [(np.stack(images[d]), np.stack(labels[d]), d) for d in ("target", "source") if images[d]]
    perceptual = PerceptualMetric()

    def evaluate(model: VesselDAModel):
        dices, mses, cycles = [], [], []
        for x, y, domain in vols:
            pred = infer_volume(model, x, domain, cfg.infer.batch_size, require_trained=False)
            dices.append(label_metrics(pred, y)["vessels"]["dice"])
            xb = torch.as_tensor(x[:n_recon])[:, None]
            d = torch.full((len(xb),), DOMAINS[domain], dtype=torch.long)
            mses.append(float(((reconstruct(model, xb, d) - xb) ** 2).mean()))
            cycles.append(float(loss_R(xb, cycle(model, xb, d), perceptual, cfg.phase2.lambda_mse,
                                       cfg.phase2.lambda_perc)))
        if not vols:
            return {}
        return {"score": float(np.mean(dices)), "val_vessel_dice": float(np.mean(dices)),
                "val_rec_mse": float(np.mean(mses)), "val_cycle_loss_R": float(np.mean(cycles))}

    return evaluate


def phase2_stage(cfg: RunConfig, phase1_ckpt, data_dir, out_dir):
    _seed_everything(cfg.seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, manifest = load_checkpoint(phase1_ckpt, expected_hash=model_hash(VesselDAModel(cfg.net)))
    if manifest["trained_phase"] < 1:
        raise ConfigError(f"{phase1_ckpt} is not a Phase 1 checkpoint")
    data = phase2_data(cfg, data_dir)
    evaluate = make_validation(cfg, data_dir)
    records = []

    def on_log(rec):
        records.append(rec)
        log.info("phase2 %s", rec)

    def on_checkpoint(state):
        io.write_json(out_dir / "metrics.json", records)

    state = train_phase2(model, cfg.phase2, data, evaluate=evaluate, on_log=on_log, on_checkpoint=on_checkpoint)
    io.write_json(out_dir / "metrics.json", records)
    evals = [r["eval"] for r in records if r.get("eval")]
    summary = {"best_val_score": None if state.best is None else state.best_score, "lr_halvings": state.lr_halvings}
    if evals:
        summary.update({"val_first": evals[0], "val_last": evals[-1]})
    summary["trained_checks"] = trained_checks(cfg, model, data_dir)
    save_checkpoint(out_dir / "ckpt", model, state.iteration, cfg.seed, cfg.to_dict(),
                    phase1_checkpoint=str(phase1_ckpt), summary=summary)
    return summary


def trained_checks(cfg: RunConfig, model, data_dir, n=20):
    """Post-training diagnostics on ``n`` held-out test slices per check."""
    images, labels = load_images(data_dir, ("test_source", "test_target"), with_labels=True)
    out = {}
    xs, ds = [], []
    for dom in ("source", "target"):
        xs += images[dom][: n // 2]
        ds += [DOMAINS[dom]] * len(images[dom][: n // 2])
    if xs:
        x = torch.as_tensor(np.stack(xs))[:, None]
        out.update(reconstruction_vs_random(model, x, torch.tensor(ds), seed=cfg.seed))
    if images["source"]:
        x = torch.as_tensor(np.stack(images["source"][:n]))[:, None]
        lab = np.stack(labels["source"][:n])
        out.update(translation_checks(model, x, lab == 2, lab >= 1, cfg.sato))
    return out


# ---------------------------------------------------------------- inference, baseline, evaluation


def volume_stems(data_dir, splits=None):
    data_dir = Path(data_dir)
    try:
        membership = read_split(data_dir)
    except FileNotFoundError:
        membership = None
    if membership is None or splits is None:
        return [s for s in io.list_stems(data_dir) if not s.name.endswith(("_label", "_pred", "_brain", "_vessel"))
                and s.name not in ("split", "manifest", "report")]
    return [data_dir / vid for name in splits for vid in membership.get(name, [])]


def infer_stage(cfg: RunConfig, ckpt, in_dir, out_dir, splits=None):
    model, _ = load_checkpoint(ckpt)
    report = infer_batch(model, volume_stems(in_dir, splits), out_dir, cfg.infer.write_png, cfg.infer.batch_size)
    return _report_summary(report)


def _report_summary(report):
    out = {"n_volumes": len(report.get("outputs", [])), "errors": len(report.get("errors", {}))}
    if "metrics" in report:
        out["vessel_dice"] = report["metrics"]["summary"]["vessels"]["dice"]["mean"]
        out["vessel_cldice"] = report["metrics"]["summary"]["vessels"]["cldice"]["mean"]
    return out


def sato_stage(cfg: RunConfig, in_dir, out_dir, splits=None, polarity=None):
    """Sato baseline; brain labels are copied from the ground truth when available."""
    out_dir = Path(out_dir)
    per_volume, errors, outputs = {}, {}, []
    for stem in volume_stems(in_dir, splits):
        vid = stem.name
        try:
            image, meta = io.load_array(stem)
            pol = polarity or ("bright" if meta.get("domain") == "source" else "dark")
            label_stem = stem.with_name(f"{vid}_label")
            gt = io.load_array(label_stem)[0] if label_stem.with_suffix(".json").exists() else None
            brain = gt >= 1 if gt is not None else None
            vessel = segment_volume(image, replace(cfg.sato, polarity=pol), brain)
            pred = np.zeros(image.shape, dtype=np.uint8)
            if brain is not None:
                pred[brain] = 1
            pred[vessel] = 2
            outputs.append(str(io.save_array(out_dir / f"{vid}_pred", pred, domain=meta.get("domain"),
                                             source=str(stem), polarity=pol)))
            if gt is not None:
                per_volume[vid] = label_metrics(pred, gt)
        except (OSError, KeyError, ValueError) as exc:
            log.error("sato failed for %s: %s", stem, exc)
            errors[vid] = f"{type(exc).__name__}: {exc}"
    report = {"volumes": sorted(per_volume), "outputs": outputs, "errors": errors}
    if per_volume:
        report["metrics"] = aggregate(per_volume).to_dict()
    io.write_json(out_dir / "report.json", report)
    return _report_summary(report)


def evaluate_stage(pred_dir, gt_dir, out_path):
    """Match ``<vid>_pred`` (or ``<vid>_label``) in ``pred_dir`` against ``<vid>_label`` in ``gt_dir``."""
    pred_dir, gt_dir, out_path = Path(pred_dir), Path(gt_dir), Path(out_path)
    per_volume = {}
    for gt_stem in io.list_stems(gt_dir, "_label"):
        vid = gt_stem.name[: -len("_label")]
        pred_stem = pred_dir / f"{vid}_pred"
        if not pred_stem.with_suffix(".json").exists():
            pred_stem = pred_dir / f"{vid}_label"
        if not pred_stem.with_suffix(".json").exists():
            continue
        per_volume[vid] = label_metrics(io.load_array(pred_stem)[0], io.load_array(gt_stem)[0])
    report = aggregate(per_volume)
    io.write_json(out_path, report.to_dict())
    out_path.with_suffix(".txt").write_text(format_table(report.summary))
    return {cls: {m: v["mean"] for m, v in metrics.items()} for cls, metrics in report.summary.items()}


def figures_stage(image_dir, pred_dir, out_dir):
    return {"figures": len(run_figures(image_dir, pred_dir, out_dir))}
