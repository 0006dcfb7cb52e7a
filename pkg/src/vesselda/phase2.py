"""Phase 2: encoder training with intra-domain and cyclic inter-domain passes.

Three configurations alternate:

* ``"2.1"``  reconstruction: ``x -> G(E(x, d))`` with the true label;
* ``"2.2"``  source cycle:   ``x_s -> G(E(x_s, T)) -> G(E(., S))``;
* ``"2.3"``  target cycle:   ``x_t -> G(E(x_t, S)) -> G(E(., T))``.

Gradient routing: the reconstruction/cycle loss updates only the encoder;
the segmentation loss (computed only for labelled samples) updates the
encoder and the generator (label branch at ``lr_branch``, synthesis layers at
``synthesis_lr_mult * lr_branch``).  The discriminator is never touched and
every call to :func:`phase2_step` performs exactly one optimizer step, even
for a two-pass cycle.
"""

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
from torch import autograd

from .errors import ShapeError, TrainingDiverged
from .losses import PerceptualMetric, loss_R, loss_S
from .nets import SOURCE, TARGET, VesselDAModel, flip
from .phase1 import requires_grad

log = logging.getLogger(__name__)

CONFIGS = ("2.1", "2.2", "2.3")


@dataclass
class Phase2Config:
    iterations: int = 5000
    batch_size: int = 4
    lr_e: float = 1e-3
    lr_branch: float = 1e-3
    synthesis_lr_mult: float = 0.1
    betas: tuple = (0.9, 0.99)
    lambda_mse: float = 1.0
    lambda_perc: float = 0.8
    lambda_dice: float = 1.0
    lambda_ce: float = 1.0
    schedule: tuple = ("2.1", "2.2", "2.3")
    warmup_steps: int = 500
    last_pass_only: bool = False
    labeled_fraction: float = 0.5
    eval_every: int = 500
    log_every: int = 50
    checkpoint_every: int = 1000
    max_lr_halvings: int = 2
    keep_best: bool = True
    seed: int = 0

    def __post_init__(self):
        self.schedule = tuple(str(s) for s in self.schedule)
        self.betas = tuple(float(b) for b in self.betas)
        if set(self.schedule) != set(CONFIGS) or any(s not in CONFIGS for s in self.schedule):
            raise ValueError(f"schedule must cover exactly {CONFIGS}, got {self.schedule}")
        for name in ("lambda_mse", "lambda_perc", "lambda_dice", "lambda_ce", "warmup_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.iterations <= 0 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be positive")


class Phase2Data:
    """Training pools for Phase 2.

    ``labeled`` pools hold (images, one-hot labels); ``unlabeled`` pools hold
    images only.  Unlabelled target images are exposed without labels.
    """

    def __init__(self, source_images, source_onehot, target_unlabeled, target_images=None, target_onehot=None,
                 seed=0, labeled_fraction=0.5):
        as_t = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float32))
        self.src_x = as_t(source_images)[:, None]
        self.src_y = as_t(source_onehot)
        self.tu_x = as_t(target_unlabeled)[:, None] if len(target_unlabeled) else None
        has_tl = target_images is not None and len(target_images) > 0
        self.tl_x = as_t(target_images)[:, None] if has_tl else None
        self.tl_y = as_t(target_onehot) if has_tl else None
        self.labeled_fraction = labeled_fraction
        self.rng = np.random.default_rng(seed)
        self.size = self.src_x.shape[-1]

    def _source(self):
        i = self.rng.integers(len(self.src_x))
        return self.src_x[i], self.src_y[i], True

    def _target(self):
        use_labeled = self.tl_x is not None and (self.tu_x is None or self.rng.random() < self.labeled_fraction)
        if use_labeled:
            i = self.rng.integers(len(self.tl_x))
            return self.tl_x[i], self.tl_y[i], True
        if self.tu_x is None:
            raise ValueError("no target images available")
        i = self.rng.integers(len(self.tu_x))
        return self.tu_x[i], torch.zeros(3, self.size, self.size), False

    def sample(self, config_id, n):
        items = []
        for _ in range(n):
            if config_id == "2.2":
                dom = SOURCE
            elif config_id == "2.3":
                dom = TARGET
            else:
                dom = int(self.rng.integers(2))
            x, y, lab = self._source() if dom == SOURCE else self._target()
            items.append((x, y, lab, dom))
        return {
            "image": torch.stack([it[0] for it in items]),
            "onehot": torch.stack([it[1] for it in items]),
            "labeled": torch.tensor([it[2] for it in items]),
            "domain": torch.tensor([it[3] for it in items]),
        }


def reconstruct(model: VesselDAModel, x, d, return_features=False):
    """Intra-domain pass: ``G(E(x, d))``."""
    img, feats = model.synthesize(model.encode(x, d))
    if img.shape != x.shape:
        raise ShapeError(f"reconstruction shape {tuple(img.shape)} != input {tuple(x.shape)}")
    return (img, feats) if return_features else img


def translate(model: VesselDAModel, x, d, return_features=False):
    """Inter-domain pass: reconstruction with the flipped label."""
    return reconstruct(model, x, flip(torch.as_tensor(d)), return_features)


def cycle(model: VesselDAModel, x, d):
    """Translate to the opposite domain and back."""
    return translate(model, translate(model, x, d), flip(torch.as_tensor(d)))


def _subset(feats, mask):
    return [f[mask] for f in feats]


@dataclass
class Phase2State:
    model: VesselDAModel
    optimizer: torch.optim.Optimizer
    perceptual: PerceptualMetric
    cfg: Phase2Config
    iteration: int = 0
    lr_halvings: int = 0
    history: list = field(default_factory=list)
    snapshot: dict = None
    best: dict = None
    best_score: float = -math.inf

    @classmethod
    def create(cls, model: VesselDAModel, cfg: Phase2Config):
        torch.manual_seed(cfg.seed)
        model.E.w_avg.copy_(model.G.w_avg)
        requires_grad(model.D, False)
        requires_grad(model.G.mapping, False)
        model.eval()
        G = model.G
        groups = [
            {"params": list(model.E.parameters()), "lr": cfg.lr_e, "name": "E"},
            {"params": list(G.label_branch.parameters()), "lr": cfg.lr_branch, "name": "branch"},
            {"params": G.synthesis_parameters(), "lr": cfg.lr_branch * cfg.synthesis_lr_mult, "name": "synthesis"},
        ]
        opt = torch.optim.Adam(groups, betas=cfg.betas)
        state = cls(model=model, optimizer=opt, perceptual=PerceptualMetric(), cfg=cfg)
        state.save_snapshot()
        return state

    def e_params(self):
        return self.optimizer.param_groups[0]["params"]

    def g_params(self):
        return self.optimizer.param_groups[1]["params"] + self.optimizer.param_groups[2]["params"]

    def state_dict(self):
        return {"model": self.model.state_dict(), "optimizer": self.optimizer.state_dict(),
                "iteration": self.iteration, "torch_rng": torch.get_rng_state()}

    def load_state_dict(self, sd):
        self.model.load_state_dict(sd["model"])
        self.optimizer.load_state_dict(sd["optimizer"])
        self.iteration = sd["iteration"]
        torch.set_rng_state(sd["torch_rng"])

    def save_snapshot(self):
        self.snapshot = copy.deepcopy(self.state_dict())

    def rollback(self):
        self.load_state_dict(copy.deepcopy(self.snapshot))

    def optimizer_steps(self):
        """Adam step counter of the encoder parameters."""
        p = self.e_params()[0]
        st = self.optimizer.state.get(p, {})
        return int(st["step"]) if "step" in st else 0


def compute_losses(state: Phase2State, batch, config_id):
    """Forward pass for one configuration; returns (L_R, L_S or None, outputs)."""
    cfg, model = state.cfg, state.model
    x, d = batch["image"], batch["domain"]
    labeled = batch["labeled"].bool()
    if config_id == "2.1":
        x_hat, feats = reconstruct(model, x, d, return_features=True)
        supervised = [feats]
    elif config_id in ("2.2", "2.3"):
        x_mid, feats_mid = translate(model, x, d, return_features=True)
        x_in = x_mid.detach() if cfg.last_pass_only else x_mid
        x_hat, feats = reconstruct(model, x_in, d, return_features=True)
        supervised = [feats] if cfg.last_pass_only else [feats_mid, feats]
    else:
        raise ValueError(f"unknown configuration {config_id!r}")
    l_r = loss_R(x, x_hat, state.perceptual, cfg.lambda_mse, cfg.lambda_perc)
    l_s = None
    if labeled.any() and (cfg.lambda_dice > 0 or cfg.lambda_ce > 0):
        y = batch["onehot"][labeled]
        terms = [loss_S(model.G.segment(_subset(f, labeled)), y, cfg.lambda_dice, cfg.lambda_ce) for f in supervised]
        l_s = sum(terms) / len(terms)
    return l_r, l_s, x_hat


def phase2_step(state: Phase2State, batch, config_id):
    """One optimizer update for one configuration.

    L_R reaches only the encoder; L_S reaches encoder and generator.
    """
    model = state.model
    requires_grad(model.G.label_branch, True)
    for p in model.G.synthesis_parameters():
        p.requires_grad_(True)
    l_r, l_s, _ = compute_losses(state, batch, config_id)
    e_params, g_params = state.e_params(), state.g_params()
    total_e = l_r if l_s is None else l_r + l_s
    grads_e = autograd.grad(total_e, e_params, retain_graph=l_s is not None, allow_unused=True)
    grads_g = autograd.grad(l_s, g_params, allow_unused=True) if l_s is not None else [None] * len(g_params)
    scalars = {"config": config_id, "loss_R": l_r.item(), "loss_S": None if l_s is None else l_s.item()}
    if not math.isfinite(scalars["loss_R"]) or (l_s is not None and not math.isfinite(scalars["loss_S"])):
        it = state.iteration
        state.rollback()
        raise TrainingDiverged(f"non-finite loss at iteration {it}; rolled back to {state.iteration}")
    for p, g in zip(e_params, grads_e):
        p.grad = g
    for p, g in zip(g_params, grads_g):
        p.grad = g
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.iteration += 1
    return scalars


def warmup_label_branch(model: VesselDAModel, data: Phase2Data, steps, lr, batch_size=4, lambda_dice=1.0,
                        lambda_ce=1.0):
    """Train only the label branch on reconstructions of labelled images."""
    if steps <= 0:
        return []
    opt = torch.optim.Adam(model.G.label_branch.parameters(), lr=lr)
    history = []
    for _ in range(steps):
        batch = data.sample("2.1", batch_size)
        labeled = batch["labeled"].bool()
        if not labeled.any():
            continue
        with torch.no_grad():
            _, feats = reconstruct(model, batch["image"][labeled], batch["domain"][labeled], return_features=True)
            stack = model.G.feature_stack(feats)
        loss = loss_S(model.G.label_branch(stack), batch["onehot"][labeled], lambda_dice, lambda_ce)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(loss.item())
    return history


def schedule_at(cfg: Phase2Config, iteration):
    return cfg.schedule[iteration % len(cfg.schedule)]


def train_phase2(model: VesselDAModel, cfg: Phase2Config, data: Phase2Data, evaluate=None, on_log=None,
                 on_checkpoint=None):
    """Run Phase 2 and return the final state.

    ``evaluate(model) -> dict`` is called at iteration 0, every
    ``eval_every`` steps and at the end; its ``"score"`` entry (higher is
    better) selects the retained model when ``keep_best`` is set.
    """
    state = Phase2State.create(model, cfg)

    def run_eval():
        if evaluate is None:
            return
        with torch.no_grad():
            res = evaluate(model)
        rec = {"iteration": state.iteration, "eval": res}
        state.history.append(rec)
        if on_log:
            on_log(rec)
        score = res.get("score")
        if cfg.keep_best and score is not None and score > state.best_score and state.iteration > 0:
            state.best_score = score
            state.best = copy.deepcopy(model.state_dict())

    base_lrs = [g["lr"] for g in state.optimizer.param_groups]
    run_eval()
    if cfg.warmup_steps:
        losses = warmup_label_branch(model, data, cfg.warmup_steps, cfg.lr_branch, cfg.batch_size,
                                     cfg.lambda_dice, cfg.lambda_ce)
        rec = {"iteration": 0, "warmup_steps": len(losses), "warmup_final_loss": losses[-1] if losses else None}
        state.history.append(rec)
        if on_log:
            on_log(rec)
        state.save_snapshot()
    while state.iteration < cfg.iterations:
        config_id = schedule_at(cfg, state.iteration)
        batch = data.sample(config_id, cfg.batch_size)
        try:
            scalars = phase2_step(state, batch, config_id)
        except TrainingDiverged as exc:
            if state.lr_halvings >= cfg.max_lr_halvings:
                raise
            state.lr_halvings += 1
            for group, lr in zip(state.optimizer.param_groups, base_lrs):
                group["lr"] = lr * 0.5 ** state.lr_halvings
            log.warning("%s; halving learning rates", exc)
            continue
        it = state.iteration
        if it % cfg.log_every == 0:
            rec = {"iteration": it, **scalars}
            state.history.append(rec)
            if on_log:
                on_log(rec)
        if it % cfg.checkpoint_every == 0 or it == cfg.iterations:
            state.save_snapshot()
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            run_eval()
        if on_checkpoint and (it % cfg.checkpoint_every == 0 or it == cfg.iterations):
            on_checkpoint(state)
    if cfg.keep_best and state.best is not None:
        model.load_state_dict(state.best)
    model.trained_phase.fill_(2)
    return state


@torch.no_grad()
def reconstruction_vs_random(model: VesselDAModel, x, d, seed=0):
    """Mean per-image L2 error of ``G(E(x, d))`` and of a random-latent rendering."""
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(x.shape[0], model.cfg.z_dim, generator=gen)
    rand_img, _ = model.G.synthesize(model.G.broadcast(model.G.mapping(z)), return_features=False)
    err = lambda y: float((y - x).flatten(1).norm(dim=1).mean())
    return {"rec_l2": err(reconstruct(model, x, d)), "random_l2": err(rand_img)}


@torch.no_grad()
def translation_checks(model: VesselDAModel, x_source, vessel, brain, sato_config=None):
    """Properties of source-to-target translations of labelled source slices.

    Returns the fraction of slices whose translated vessel region is darker
    than the surrounding brain (target polarity acquired), and the vessel
    Dice between each input mask and a dark-polarity Sato segmentation of its
    own translation versus that of a shuffled translation.
    """
    from .metrics import dice
    from .sato import SatoConfig, segment_sato

    d = torch.full((x_source.shape[0],), SOURCE, dtype=torch.long)
    xt = translate(model, x_source, d)[:, 0].numpy()
    vessel = np.asarray(vessel, dtype=bool)
    brain = np.asarray(brain, dtype=bool)
    tissue = brain & ~vessel
    darker = [xt[i][vessel[i]].mean() < xt[i][tissue[i]].mean() for i in range(len(xt)) if vessel[i].any()]
    cfg = replace(sato_config or SatoConfig(), polarity="dark")
    masks = [segment_sato(xt[i], cfg, brain[i]) for i in range(len(xt))]
    paired = float(np.mean([dice(masks[i], vessel[i]) for i in range(len(xt))]))
    shifted = np.roll(np.arange(len(xt)), 1)
    shuffled = float(np.mean([dice(masks[j], vessel[i]) for i, j in enumerate(shifted)]))
    return {"target_polarity_fraction": float(np.mean(darker)) if darker else None,
            "content_dice_paired": paired, "content_dice_shuffled": shuffled}


def config_dict(cfg):
    return asdict(cfg)
