"""Phase 1: adversarial training of the generator and discriminator.

Non-saturating logistic losses, lazy R1 on real images and an exponential
moving average of the generator weights.  The generator never sees domain
labels; batches mix both domains with equal probability.
"""

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy import stats
from torch import autograd
from torch.nn import functional as F

from .errors import TrainingDiverged
from .nets import Generator, NetConfig, VesselDAModel

log = logging.getLogger(__name__)


@dataclass
class Phase1Config:
    iterations: int = 20000
    batch_size: int = 4
    lr_g: float = 2e-3
    lr_d: float = 2e-3
    betas: tuple = (0.0, 0.99)
    r1_gamma: float = 10.0
    r1_interval: int = 16
    ema_decay: float = 0.999
    checkpoint_every: int = 1000
    log_every: int = 100
    sample_every: int = 5000
    max_lr_halvings: int = 2
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        for name in ("iterations", "lr_g", "lr_d", "r1_interval", "checkpoint_every", "log_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.ema_decay < 1 or self.r1_gamma < 0:
            raise ValueError("ema_decay must be in (0, 1) and r1_gamma >= 0")


def requires_grad(module, flag):
    for p in module.parameters():
        p.requires_grad_(flag)


@torch.no_grad()
def accumulate(ema, model, decay):
    ema_params = dict(ema.named_parameters())
    for name, p in model.named_parameters():
        ema_params[name].mul_(decay).add_(p.detach(), alpha=1 - decay)
    ema_buffers = dict(ema.named_buffers())
    for name, b in model.named_buffers():
        ema_buffers[name].copy_(b)


class MixedDomainSampler:
    """Draws batches whose elements pick a domain uniformly, then an image uniformly."""

    def __init__(self, images_by_domain: dict, seed=0):
        self.pools = {d: torch.as_tensor(np.asarray(imgs, dtype=np.float32)) for d, imgs in images_by_domain.items()
                      if len(imgs)}
        if not self.pools:
            raise ValueError("no training images")
        self.domains = sorted(self.pools)
        self.rng = np.random.default_rng(seed)

    def sample(self, n):
        picks = self.rng.integers(len(self.domains), size=n)
        out = []
        for k in picks:
            pool = self.pools[self.domains[k]]
            out.append(pool[self.rng.integers(len(pool))])
        return torch.stack(out)[:, None]

    def all_images(self):
        return torch.cat([self.pools[d] for d in self.domains])[:, None]


@dataclass
class Phase1State:
    model: VesselDAModel
    g_ema: Generator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    cfg: Phase1Config
    iteration: int = 0
    lr_halvings: int = 0
    history: list = field(default_factory=list)
    snapshot: dict = None
    last_r1: float = 0.0

    @classmethod
    def create(cls, net_cfg: NetConfig, cfg: Phase1Config):
        torch.manual_seed(cfg.seed)
        model = VesselDAModel(net_cfg)
        g_ema = copy.deepcopy(model.G).eval()
        requires_grad(g_ema, False)
        # lazy R1 rescales Adam hyper-parameters as in the reference recipe
        c = cfg.r1_interval / (cfg.r1_interval + 1)
        opt_g = torch.optim.Adam(model.G.parameters(), lr=cfg.lr_g, betas=cfg.betas)
        opt_d = torch.optim.Adam(model.D.parameters(), lr=cfg.lr_d * c,
                                 betas=(cfg.betas[0] ** c, cfg.betas[1] ** c))
        state = cls(model=model, g_ema=g_ema, opt_g=opt_g, opt_d=opt_d, cfg=cfg)
        state.save_snapshot()
        return state

    def state_dict(self):
        return {
            "model": self.model.state_dict(),
            "g_ema": self.g_ema.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "iteration": self.iteration,
            "lr_halvings": self.lr_halvings,
            "torch_rng": torch.get_rng_state(),
        }

    def load_state_dict(self, sd):
        self.model.load_state_dict(sd["model"])
        self.g_ema.load_state_dict(sd["g_ema"])
        self.opt_g.load_state_dict(sd["opt_g"])
        self.opt_d.load_state_dict(sd["opt_d"])
        self.iteration = sd["iteration"]
        torch.set_rng_state(sd["torch_rng"])

    def save_snapshot(self):
        self.snapshot = copy.deepcopy(self.state_dict())

    def rollback(self):
        halvings = self.lr_halvings
        self.load_state_dict(copy.deepcopy(self.snapshot))
        self.lr_halvings = halvings


def _check_finite(state, **losses):
    bad = [k for k, v in losses.items() if not math.isfinite(float(v))]
    if bad:
        it = state.iteration
        state.rollback()
        raise TrainingDiverged(f"non-finite {', '.join(bad)} at iteration {it}; rolled back to {state.iteration}")


def d_step(state: Phase1State, real):
    """One discriminator update; the generator is untouched."""
    G, D, cfg = state.model.G, state.model.D, state.cfg
    requires_grad(G, False)
    requires_grad(D, True)
    z = torch.randn(real.shape[0], G.cfg.z_dim)
    with torch.no_grad():
        fake = G(z, noise=True)
    loss_d = F.softplus(D(fake)).mean() + F.softplus(-D(real)).mean()
    state.opt_d.zero_grad(set_to_none=True)
    loss_d.backward()
    r1 = torch.zeros(())
    if cfg.r1_gamma > 0 and state.iteration % cfg.r1_interval == 0:
        real_r = real.detach().requires_grad_(True)
        pred = D(real_r)
        (grad,) = autograd.grad(pred.sum(), real_r, create_graph=True)
        r1 = grad.pow(2).sum(dim=(1, 2, 3)).mean()
        (cfg.r1_gamma / 2 * r1 * cfg.r1_interval).backward()
        state.last_r1 = r1.item()
    _check_finite(state, loss_D=loss_d.item(), r1=r1.item())
    state.opt_d.step()
    return loss_d.item(), r1.item()


def g_step(state: Phase1State, batch_size):
    """One generator update; the discriminator is untouched."""
    G, D = state.model.G, state.model.D
    requires_grad(G, True)
    requires_grad(D, False)
    z = torch.randn(batch_size, G.cfg.z_dim)
    loss_g = F.softplus(-D(G(z, noise=True))).mean()
    state.opt_g.zero_grad(set_to_none=True)
    loss_g.backward()
    _check_finite(state, loss_G=loss_g.item())
    state.opt_g.step()
    requires_grad(D, True)
    return loss_g.item()


def phase1_step(state: Phase1State, real):
    """D update (logistic + lazy R1), then G update, then EMA."""
    state.model.train()
    loss_d, r1 = d_step(state, real)
    loss_g = g_step(state, real.shape[0])
    accumulate(state.g_ema, state.model.G, state.cfg.ema_decay)
    state.iteration += 1
    return {"loss_D": loss_d, "loss_G": loss_g, "r1": r1}


@torch.no_grad()
def sample_generator(state_or_generator, n, seed=0):
    """``n`` images from the EMA generator with stochastic noise disabled."""
    G = state_or_generator.g_ema if isinstance(state_or_generator, Phase1State) else state_or_generator
    size = G.cfg.size
    if n == 0:
        return torch.zeros(0, 1, size, size)
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(n, G.cfg.z_dim, generator=gen)
    G.eval()
    return G(z, noise=False)


def ks_distance(generated, real):
    """Two-sample Kolmogorov-Smirnov statistic between pixel-intensity samples."""
    a = np.asarray(generated, dtype=np.float64).ravel()
    b = np.asarray(real, dtype=np.float64).ravel()
    return float(stats.ks_2samp(a, b).statistic)


def evaluate_ks(state, sampler, n=64, seed=12345):
    fake = sample_generator(state, n, seed).numpy()
    real = sampler.all_images().numpy()
    return ks_distance(fake, real)


@torch.no_grad()
def discriminator_accuracy(state, real, n_fake=None, seed=4321):
    D = state.model.D
    D.eval()
    fake = sample_generator(state, n_fake or real.shape[0], seed)
    acc = 0.5 * ((D(real) > 0).float().mean() + (D(fake) < 0).float().mean())
    return float(acc)


def train_phase1(net_cfg: NetConfig, cfg: Phase1Config, images_by_domain: dict, on_checkpoint=None, on_log=None):
    """Run Phase 1 to completion and return the final state.

    ``on_checkpoint(state)`` is called at every checkpoint interval and at the
    end; ``on_log(record)`` receives every logged metrics record.
    """
    state = Phase1State.create(net_cfg, cfg)
    sampler = MixedDomainSampler(images_by_domain, seed=cfg.seed)
    base_lrs = [[g["lr"] for g in opt.param_groups] for opt in (state.opt_g, state.opt_d)]
    record = {"iteration": 0, "ks": evaluate_ks(state, sampler)}
    state.history.append(record)
    if on_log:
        on_log(record)
    while state.iteration < cfg.iterations:
        real = sampler.sample(cfg.batch_size)
        try:
            scalars = phase1_step(state, real)
        except TrainingDiverged as exc:
            if state.lr_halvings >= cfg.max_lr_halvings:
                raise
            state.lr_halvings += 1
            # rollback restored the optimizer's own lr, so rescale from the base values
            for opt, lrs in zip((state.opt_g, state.opt_d), base_lrs):
                for group, lr in zip(opt.param_groups, lrs):
                    group["lr"] = lr * 0.5 ** state.lr_halvings
            log.warning("%s; halving learning rates (%d/%d)", exc, state.lr_halvings, cfg.max_lr_halvings)
            continue
        it = state.iteration
        if it % cfg.log_every == 0 or it == cfg.iterations:
            record = {"iteration": it, **scalars, "r1": state.last_r1}
            if it == cfg.iterations:
                record["ks"] = evaluate_ks(state, sampler)
            state.history.append(record)
            if on_log:
                on_log(record)
        if it % cfg.checkpoint_every == 0 or it == cfg.iterations:
            state.save_snapshot()
            if on_checkpoint:
                on_checkpoint(state)
    return state


def config_dict(cfg):
    return asdict(cfg)
