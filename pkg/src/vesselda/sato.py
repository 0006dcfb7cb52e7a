"""Multiscale Hessian line filter (Sato et al., 1998) and threshold baseline.

For each scale the Hessian of the Gaussian-smoothed image is formed from
Gaussian-derivative convolutions and its eigenvalues are sorted in
descending order.  For a bright line the cross-section eigenvalue(s) are
strongly negative and the along-line eigenvalue is close to zero.  With
``lc = min(-l2, -l3)`` (3D) or ``lc = -l2`` (2D) the line measure is

    lc * exp(-l1**2 / (2 * (a * lc)**2)),   a = alpha1 if l1 <= 0 else alpha2

and zero wherever ``lc <= 0``.  Responses are multiplied by sigma**2 and the
maximum over scales is kept.  Dark lines are handled by negating the image.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from .errors import ConfigError


def geometric_scales(lo=1.0, hi=4.0, n=4):
    return tuple(float(s) for s in np.geomspace(lo, hi, n))


@dataclass
class SatoConfig:
    scales_px: tuple = geometric_scales()
    polarity: str = "bright"
    normalize: bool = True
    threshold: object = "otsu"
    alpha1: float = 0.5
    alpha2: float = 2.0

    def __post_init__(self):
        self.scales_px = tuple(float(s) for s in self.scales_px)
        if not self.scales_px or any(s <= 0 for s in self.scales_px):
            raise ConfigError(f"scales must be positive, got {self.scales_px}")
        if list(self.scales_px) != sorted(self.scales_px):
            raise ConfigError(f"scales must be sorted ascending, got {self.scales_px}")
        if self.polarity not in ("bright", "dark"):
            raise ConfigError(f"polarity must be 'bright' or 'dark', got {self.polarity!r}")
        if not (self.threshold == "otsu" or isinstance(self.threshold, (int, float))):
            raise ConfigError(f"threshold must be a number or 'otsu', got {self.threshold!r}")


def derivative_kernels(sigma, truncate=4.0):
    """Sampled Gaussian kernels of derivative order 0, 1, 2 (correlation form).

    The samples are corrected so the discrete moments are exact: order 0 sums
    to 1; order 1 sums to 0 with first moment 1; order 2 sums to 0 with second
    moment 2.  Constants therefore have an exactly zero Hessian and x**2 has
    second derivative 2.
    """
    radius = max(1, int(truncate * sigma + 0.5))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (t / sigma) ** 2)
    k0 = g / g.sum()
    k1 = t * g
    k1 /= (t * k1).sum()
    k2 = (t ** 2 / sigma ** 2 - 1) * g
    k2 -= k2.mean()
    k2 /= 0.5 * (t ** 2 * k2).sum()
    return k0, k1, k2


def hessian(image, sigma):
    """Per-pixel Hessian of ``image`` at Gaussian scale ``sigma``.

    Returns an array of shape ``image.shape + (ndim, ndim)``; off-diagonal
    entries are computed once and shared, so the field is exactly symmetric.
    """
    image = np.asarray(image, dtype=np.float64)
    # derivatives ignore offsets; removing one first keeps constants exactly zero
    image = image - image.flat[0] if image.size else image
    kernels = derivative_kernels(sigma)
    nd = image.ndim
    H = np.empty(image.shape + (nd, nd))
    for i in range(nd):
        for j in range(i, nd):
            order = [0] * nd
            order[i] += 1
            order[j] += 1
            d = image
            for axis, o in enumerate(order):
                d = ndimage.correlate1d(d, kernels[o], axis=axis, mode="nearest")
            H[..., i, j] = d
            H[..., j, i] = d
    return H


def _sorted_eigenvalues(H):
    """Eigenvalues in descending order along the last axis."""
    if H.shape[-1] == 2:
        a, b, c = H[..., 0, 0], H[..., 0, 1], H[..., 1, 1]
        mean = 0.5 * (a + c)
        root = np.sqrt(0.25 * (a - c) ** 2 + b * b)
        return np.stack([mean + root, mean - root], axis=-1)
    return np.linalg.eigvalsh(H)[..., ::-1]


def line_measure(eigvals, alpha1=0.5, alpha2=2.0):
    """Bright-line measure from descending-sorted Hessian eigenvalues."""
    l1 = eigvals[..., 0]
    if eigvals.shape[-1] == 2:
        lc = -eigvals[..., 1]
    else:
        lc = np.minimum(-eigvals[..., 1], -eigvals[..., 2])
    out = np.zeros(l1.shape)
    ok = lc > 0
    alpha = np.where(l1 <= 0, alpha1, alpha2)
    lc_ok = lc[ok]
    # near-zero lc can overflow the ratio; exp(-inf) = 0 is the right limit
    with np.errstate(over="ignore", divide="ignore", under="ignore", invalid="ignore"):
        ratio = np.nan_to_num(l1[ok] / (alpha[ok] * lc_ok), nan=0.0, posinf=np.inf, neginf=-np.inf)
        out[ok] = lc_ok * np.exp(-0.5 * ratio * ratio)
    return out


def vesselness(image, config=None, return_scale=False):
    """Max-over-scales line response, >= 0 everywhere.

    With ``return_scale`` also returns the per-pixel maximizing scale
    (0 where the response is 0).
    """
    config = config or SatoConfig()
    image = np.asarray(image, dtype=np.float64)
    if config.polarity == "dark":
        image = -image
    best = np.zeros(image.shape)
    best_scale = np.zeros(image.shape)
    for sigma in config.scales_px:
        r = line_measure(_sorted_eigenvalues(hessian(image, sigma)), config.alpha1, config.alpha2)
        if config.normalize:
            r = r * sigma ** 2
        better = r > best
        best = np.where(better, r, best)
        best_scale = np.where(better, sigma, best_scale)
    return (best, best_scale) if return_scale else best


def segment_sato(image, config=None, brain_mask=None):
    """Binary vessel mask: response above the threshold, inside the brain if given."""
    config = config or SatoConfig()
    response = vesselness(image, config)
    region = np.ones(response.shape, dtype=bool) if brain_mask is None else np.asarray(brain_mask, dtype=bool)
    if config.threshold == "otsu":
        values = response[region]
        if values.size == 0 or values.min() == values.max():
            return np.zeros(response.shape, dtype=bool)
        thr = threshold_otsu(values)
    else:
        thr = float(config.threshold)
    return (response > thr) & region


def segment_volume(volume, config=None, brain_mask=None):
    """Slice-wise 2D segmentation of a (n, H, W) stack."""
    volume = np.asarray(volume)
    masks = [segment_sato(volume[k], config, None if brain_mask is None else brain_mask[k])
             for k in range(volume.shape[0])]
    return np.stack(masks)
