"""Reconstruction and segmentation losses used in Phase 2."""

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ShapeError


class PerceptualMetric(nn.Module):
    """Learned-perceptual-style distance over a fixed random conv extractor.

    Each layer's activations are unit-normalized along channels; the distance
    is the layer-weighted sum of spatially averaged squared differences.  The
    extractor weights are buffers drawn from a fixed seed, so they never
    receive gradients and are identical across runs.
    """

    def __init__(self, channels=(16, 32, 64, 64), seed=1234, layer_weights=None, in_ch=1):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        dims = [in_ch, *channels]
        for k, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            w = torch.randn(b, a, 3, 3, generator=gen) * (2.0 / (a * 9)) ** 0.5
            self.register_buffer(f"w{k}", w)
        self.n_layers = len(channels)
        weights = torch.ones(self.n_layers) if layer_weights is None else torch.as_tensor(layer_weights, dtype=torch.float32)
        self.register_buffer("layer_weights", weights / weights.sum())

    def features(self, x):
        feats = []
        for k in range(self.n_layers):
            w = getattr(self, f"w{k}").to(x.dtype)
            x = F.gelu(F.conv2d(x, w, padding=1, stride=1 if k == 0 else 2))
            feats.append(x)
        return feats

    @staticmethod
    def _unit(f, eps=1e-10):
        return f * torch.rsqrt(f.pow(2).sum(dim=1, keepdim=True) + eps)

    def forward(self, x, y):
        """Per-sample distances, shape (N,)."""
        if x.shape != y.shape:
            raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
        total = x.new_zeros(x.shape[0])
        weights = self.layer_weights.to(x.dtype)
        for k, (fx, fy) in enumerate(zip(self.features(x), self.features(y))):
            d = (self._unit(fx) - self._unit(fy)).pow(2).sum(dim=1).mean(dim=(1, 2))
            total = total + weights[k] * d
        return total


def loss_R(x, x_hat, perceptual=None, lambda_mse=1.0, lambda_perc=0.8):
    """Reconstruction / cycle loss: weighted MSE plus perceptual distance."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    loss = lambda_mse * (x - x_hat).pow(2).mean()
    if lambda_perc and perceptual is not None:
        loss = loss + lambda_perc * perceptual(x, x_hat).mean()
    return loss


def soft_dice(probs, target, eps=1e-5):
    """Per-class soft Dice with sums over batch and pixels, shape (C,)."""
    dims = (0, 2, 3)
    inter = (probs * target).sum(dims)
    denom = probs.sum(dims) + target.sum(dims)
    return (2 * inter + eps) / (denom + eps)


def loss_S(logits, target, lambda_dice=1.0, lambda_ce=1.0, eps=1e-5):
    """Segmentation loss: (1 - class-averaged soft Dice) plus mean cross-entropy.

    ``target`` is one-hot with the same (N, C, H, W) shape as ``logits``.
    """
    if logits.shape != target.shape or logits.ndim != 4:
        raise ShapeError(f"shape mismatch {tuple(logits.shape)} vs {tuple(target.shape)}")
    target = target.to(logits.dtype)
    log_p = F.log_softmax(logits, dim=1)
    ce = -(target * log_p).sum(dim=1).mean()
    dice_loss = 1 - soft_dice(log_p.exp(), target, eps).mean()
    return lambda_dice * dice_loss + lambda_ce * ce
