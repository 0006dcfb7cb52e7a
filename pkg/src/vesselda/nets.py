"""Generator, discriminator and conditional encoder.

The generator is a small style-modulated convolutional network: a learned
4x4 constant is upsampled level by level to the output resolution, each
convolution is modulated by one row of an extended latent code (W+), and a
skip-style image head accumulates the output. A pointwise label branch reads
the concatenation of every synthesis feature map and emits per-pixel class
logits.

The encoder inverts the generator: it sees an image plus a constant channel
carrying the domain label (-1 source, +1 target) and predicts a W+ code and
feature maps that are blended into the two finest synthesis layers through a
learned gate.
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ShapeError

SOURCE = 0
TARGET = 1
DOMAINS = {"source": SOURCE, "target": TARGET}


def flip(domain):
    """Return the opposite domain label (works on ints and tensors)."""
    return 1 - domain


@dataclass
class NetConfig:
    size: int = 64
    z_dim: int = 128
    w_dim: int = 128
    n_mapping: int = 4
    channel_base: int = 1024
    channel_max: int = 64
    branch_hidden: tuple = (256, 128)
    n_classes: int = 3
    n_inject: int = 2
    mbstd_group: int = 4

    def __post_init__(self):
        self.branch_hidden = tuple(self.branch_hidden)
        if self.size < 8 or self.size & (self.size - 1):
            raise ShapeError(f"size must be a power of two >= 8, got {self.size}")

    def channels(self, res):
        return int(min(self.channel_max, self.channel_base // res))

    @property
    def resolutions(self):
        return [2 ** i for i in range(2, int(math.log2(self.size)) + 1)]

    @property
    def n_layers(self):
        return 1 + 2 * (len(self.resolutions) - 1)

    @property
    def num_ws(self):
        return self.n_layers + 1


class EqualLinear(nn.Module):
    def __init__(self, in_dim, out_dim, bias=True, bias_init=0.0, lr_mul=1.0, activation=False):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_dim, in_dim).div_(lr_mul))
        self.bias = nn.Parameter(torch.full((out_dim,), float(bias_init))) if bias else None
        self.scale = lr_mul / math.sqrt(in_dim)
        self.lr_mul = lr_mul
        self.activation = activation

    def forward(self, x):
        bias = self.bias * self.lr_mul if self.bias is not None else None
        out = F.linear(x, self.weight * self.scale, bias)
        if self.activation:
            out = F.leaky_relu(out, 0.2) * math.sqrt(2)
        return out


class EqualConv2d(nn.Module):
    def __init__(self, in_ch, out_ch, kernel_size, bias=True, activation=False):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_ch)) if bias else None
        self.scale = 1 / math.sqrt(in_ch * kernel_size ** 2)
        self.padding = kernel_size // 2
        self.activation = activation

    def forward(self, x):
        out = F.conv2d(x, self.weight * self.scale, self.bias, padding=self.padding)
        if self.activation:
            out = F.leaky_relu(out, 0.2) * math.sqrt(2)
        return out


class MappingNetwork(nn.Module):
    def __init__(self, z_dim, w_dim, n_layers, lr_mul=0.01):
        super().__init__()
        self.z_dim = z_dim
        dims = [z_dim] + [w_dim] * n_layers
        self.net = nn.Sequential(
            *[EqualLinear(a, b, lr_mul=lr_mul, activation=True) for a, b in zip(dims[:-1], dims[1:])]
        )

    def forward(self, z):
        if z.ndim != 2 or z.shape[1] != self.z_dim:
            raise ShapeError(f"expected z of shape (N, {self.z_dim}), got {tuple(z.shape)}")
        z = z * torch.rsqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-8)
        return self.net(z)


class ModulatedConv2d(nn.Module):
    """Style-modulated convolution with weight demodulation.

    Modulation is applied to the activations rather than the weights, which is
    equivalent and lets every sample share a single dense convolution.
    """

    def __init__(self, in_ch, out_ch, kernel_size, w_dim, demodulate=True, upsample=False):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel_size, kernel_size))
        self.scale = 1 / math.sqrt(in_ch * kernel_size ** 2)
        self.affine = EqualLinear(w_dim, in_ch, bias_init=1.0)
        self.demodulate = demodulate
        self.upsample = upsample
        self.padding = kernel_size // 2

    def forward(self, x, w):
        styles = self.affine(w)
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        weight = self.weight * self.scale
        out = F.conv2d(x * styles[:, :, None, None], weight, padding=self.padding)
        if self.demodulate:
            # sum_{i,k} (w_oik * s_i)^2 == (w^2 summed over k) @ s^2
            wsq = weight.pow(2).sum(dim=(2, 3))
            dcoefs = torch.rsqrt(styles.pow(2) @ wsq.t() + 1e-8)
            out = out * dcoefs[:, :, None, None]
        return out


class StyledLayer(nn.Module):
    def __init__(self, in_ch, out_ch, w_dim, upsample=False):
        super().__init__()
        self.conv = ModulatedConv2d(in_ch, out_ch, 3, w_dim, upsample=upsample)
        self.noise_strength = nn.Parameter(torch.zeros(()))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.out_ch = out_ch

    def forward(self, x, w, noise=False):
        out = self.conv(x, w)
        if noise:
            n = torch.randn(out.shape[0], 1, out.shape[2], out.shape[3], device=out.device, dtype=out.dtype)
            out = out + n * self.noise_strength
        return F.leaky_relu(out + self.bias[None, :, None, None], 0.2) * math.sqrt(2)


class ToImage(nn.Module):
    def __init__(self, in_ch, w_dim):
        super().__init__()
        self.conv = ModulatedConv2d(in_ch, 1, 1, w_dim, demodulate=False)
        self.bias = nn.Parameter(torch.zeros(1))

    def forward(self, x, w):
        return self.conv(x, w) + self.bias[None, :, None, None]


class LabelBranch(nn.Module):
    """Three pointwise layers mapping a per-pixel feature vector to class logits."""

    def __init__(self, in_ch, hidden=(256, 128), n_classes=3):
        super().__init__()
        dims = [in_ch, *hidden]
        layers = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Conv2d(a, b, 1), nn.LeakyReLU(0.2)]
        layers.append(nn.Conv2d(dims[-1], n_classes, 1))
        self.net = nn.Sequential(*layers)
        self.in_ch = in_ch

    def forward(self, features):
        if features.ndim != 4 or features.shape[1] != self.in_ch:
            raise ShapeError(f"expected features (N, {self.in_ch}, H, W), got {tuple(features.shape)}")
        return self.net(features)


class Generator(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.mapping = MappingNetwork(cfg.z_dim, cfg.w_dim, cfg.n_mapping)
        res = cfg.resolutions
        self.const = nn.Parameter(torch.randn(1, cfg.channels(4), 4, 4))
        layers = [StyledLayer(cfg.channels(4), cfg.channels(4), cfg.w_dim)]
        to_images = [ToImage(cfg.channels(4), cfg.w_dim)]
        for r in res[1:]:
            layers.append(StyledLayer(cfg.channels(r // 2), cfg.channels(r), cfg.w_dim, upsample=True))
            layers.append(StyledLayer(cfg.channels(r), cfg.channels(r), cfg.w_dim))
            to_images.append(ToImage(cfg.channels(r), cfg.w_dim))
        self.layers = nn.ModuleList(layers)
        self.to_images = nn.ModuleList(to_images)
        # first (upsampling) layer of each of the finest resolution levels
        self.inject_layers = [len(layers) - 2 * (k + 1) for k in range(cfg.n_inject)][::-1]
        self.feature_dim = sum(layer.out_ch for layer in layers)
        self.label_branch = LabelBranch(self.feature_dim, cfg.branch_hidden, cfg.n_classes)
        self.register_buffer("w_avg", torch.zeros(cfg.w_dim))

    @property
    def num_ws(self):
        return self.cfg.num_ws

    def inject_channels(self):
        return {i: self.layers[i].out_ch for i in self.inject_layers}

    def synthesis_parameters(self):
        """Parameters of the image pathway (excludes mapping network and label branch)."""
        params = [self.const]
        for module in (self.layers, self.to_images):
            params += list(module.parameters())
        return params

    def broadcast(self, w):
        return w[:, None, :].expand(-1, self.num_ws, -1)

    @torch.no_grad()
    def update_w_avg(self, n=4096, seed=0):
        gen = torch.Generator().manual_seed(seed)
        z = torch.randn(n, self.cfg.z_dim, generator=gen).to(self.const)
        self.w_avg.copy_(self.mapping(z).mean(0))

    def synthesize(self, wplus, injected=None, skip=None, noise=False, return_features=True):
        """Render images from an extended latent code.

        Parameters
        ----------
        wplus : Tensor (N, L, w_dim)
        injected : dict[int, Tensor], optional
            Encoder feature maps keyed by synthesis-layer index.
        skip : DynamicSkip, optional
            Gate used to blend injected maps with synthesized ones.

        Returns
        -------
        image : Tensor (N, 1, H, W) clamped to [-1, 1]
        features : list of per-layer feature maps (None if not requested)
        """
        cfg = self.cfg
        if wplus.ndim != 3 or wplus.shape[1:] != (self.num_ws, cfg.w_dim):
            raise ShapeError(f"expected W+ of shape (N, {self.num_ws}, {cfg.w_dim}), got {tuple(wplus.shape)}")
        injected = injected or {}
        for idx, feat in injected.items():
            if idx not in self.inject_layers:
                raise ShapeError(f"layer {idx} does not accept injected features; valid: {self.inject_layers}")
            if feat.shape[:2] != (wplus.shape[0], self.layers[idx].out_ch):
                raise ShapeError(f"injected map for layer {idx} has shape {tuple(feat.shape)}")
        x = self.const.expand(wplus.shape[0], -1, -1, -1)
        feats = []
        img = None
        li = 0
        for level, res in enumerate(cfg.resolutions):
            n_here = 1 if level == 0 else 2
            for _ in range(n_here):
                x = self.layers[li](x, wplus[:, li], noise=noise)
                if li in injected:
                    if skip is None:
                        raise ShapeError("injected features given without a skip module")
                    x = skip(li, x, injected[li])
                feats.append(x)
                li += 1
            y = self.to_images[level](x, wplus[:, li])
            img = y if img is None else F.interpolate(img, scale_factor=2, mode="bilinear", align_corners=False) + y
        return img.clamp(-1.0, 1.0), (feats if return_features else None)

    def feature_stack(self, feats):
        size = self.cfg.size
        up = [f if f.shape[-1] == size else F.interpolate(f, size=(size, size), mode="bilinear", align_corners=False)
              for f in feats]
        return torch.cat(up, dim=1)

    def segment(self, feats):
        return self.label_branch(self.feature_stack(feats))

    def forward(self, z, truncation=1.0, noise=False):
        w = self.mapping(z)
        if truncation != 1.0:
            w = self.w_avg + truncation * (w - self.w_avg)
        img, _ = self.synthesize(self.broadcast(w), noise=noise, return_features=False)
        return img


def downsample2x(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(dim=(3, 5))


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, downsample=True):
        super().__init__()
        self.conv1 = EqualConv2d(in_ch, in_ch, 3, activation=True)
        self.conv2 = EqualConv2d(in_ch, out_ch, 3, activation=True)
        self.skip = EqualConv2d(in_ch, out_ch, 1, bias=False)
        self.downsample = downsample

    def forward(self, x):
        out = self.conv2(self.conv1(x))
        skip = self.skip(x)
        if self.downsample:
            out = downsample2x(out)
            skip = downsample2x(skip)
        return (out + skip) / math.sqrt(2)


class Discriminator(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        res = cfg.resolutions[::-1]
        self.from_image = EqualConv2d(1, cfg.channels(cfg.size), 1, activation=True)
        self.blocks = nn.ModuleList([ResBlock(cfg.channels(r), cfg.channels(r // 2)) for r in res[:-1]])
        c4 = cfg.channels(4)
        self.final_conv = EqualConv2d(c4 + 1, c4, 3, activation=True)
        self.final_linear = nn.Sequential(EqualLinear(c4 * 16, c4, activation=True), EqualLinear(c4, 1))

    def _mbstd(self, x):
        n, c, h, w = x.shape
        group = next(g for g in range(min(self.cfg.mbstd_group, n), 0, -1) if n % g == 0)
        y = x.reshape(group, -1, c, h, w)
        y = torch.sqrt(y.var(dim=0, unbiased=False) + 1e-8).mean(dim=(1, 2, 3))
        y = y.reshape(-1, 1, 1, 1).repeat(group, 1, h, w)
        return torch.cat([x, y], dim=1)

    def forward(self, image):
        size = self.cfg.size
        if image.ndim != 4 or image.shape[1:] != (1, size, size):
            raise ShapeError(f"expected images (N, 1, {size}, {size}), got {tuple(image.shape)}")
        x = self.from_image(image)
        for block in self.blocks:
            x = block(x)
        x = self.final_conv(self._mbstd(x))
        return self.final_linear(x.flatten(1)).squeeze(1)


class DynamicSkip(nn.Module):
    """Sigmoid gate blending encoder maps into generator maps per pixel and channel."""

    def __init__(self, channels: dict):
        super().__init__()
        self.gates = nn.ModuleDict({str(i): nn.Conv2d(2 * c, c, 1) for i, c in channels.items()})

    def forward(self, idx, gen_feat, enc_feat):
        gate = torch.sigmoid(self.gates[str(idx)](torch.cat([gen_feat, enc_feat], dim=1)))
        return gate * enc_feat + (1 - gate) * gen_feat


@dataclass
class EncoderOutput:
    wplus: torch.Tensor
    injected: dict = field(default_factory=dict)


class Encoder(nn.Module):
    def __init__(self, cfg: NetConfig, inject_channels: dict):
        super().__init__()
        self.cfg = cfg
        size = cfg.size
        self.stem = EqualConv2d(2, cfg.channels(size), 3, activation=True)
        self.top = ResBlock(cfg.channels(size), cfg.channels(size), downsample=False)
        res = cfg.resolutions[::-1]
        self.down = nn.ModuleList([ResBlock(cfg.channels(r), cfg.channels(r // 2)) for r in res[:-1]])
        c4 = cfg.channels(4)
        self.latent_head = EqualLinear(c4 * 16, cfg.num_ws * cfg.w_dim)
        # injection layer index -> spatial resolution of that layer's output
        self.inject_res = {}
        for idx in sorted(inject_channels):
            level = (idx + 1) // 2
            self.inject_res[idx] = 2 ** (level + 2)
        self.inject_heads = nn.ModuleDict({
            str(i): EqualConv2d(cfg.channels(self.inject_res[i]), c, 3) for i, c in inject_channels.items()
        })
        self.skip = DynamicSkip(inject_channels)
        self.register_buffer("w_avg", torch.zeros(cfg.w_dim))

    def forward(self, image, label) -> EncoderOutput:
        size = self.cfg.size
        if image.ndim != 4 or image.shape[1:] != (1, size, size):
            raise ShapeError(f"expected images (N, 1, {size}, {size}), got {tuple(image.shape)}")
        label = torch.as_tensor(label, device=image.device)
        if label.ndim == 0:
            label = label.expand(image.shape[0])
        if label.shape != (image.shape[0],):
            raise ShapeError(f"expected one domain label per image, got {tuple(label.shape)}")
        plane = (2.0 * label.to(image.dtype) - 1.0)[:, None, None, None].expand_as(image)
        x = self.top(self.stem(torch.cat([image, plane], dim=1)))
        by_res = {size: x}
        for block in self.down:
            x = block(x)
            by_res[x.shape[-1]] = x
        delta = self.latent_head(x.flatten(1)).view(-1, self.cfg.num_ws, self.cfg.w_dim)
        injected = {i: self.inject_heads[str(i)](by_res[r]) for i, r in self.inject_res.items()}
        return EncoderOutput(self.w_avg + delta, injected)


class VesselDAModel(nn.Module):
    """Registry of the three learnable components: one G, one D, one E."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.G = Generator(cfg)
        self.D = Discriminator(cfg)
        self.E = Encoder(cfg, self.G.inject_channels())
        # 0 untrained, 1 after Phase 1, 2 after Phase 2
        self.register_buffer("trained_phase", torch.zeros((), dtype=torch.long))

    def components(self):
        return {"G": self.G, "D": self.D, "E": self.E}

    def map_latent(self, z):
        return self.G.mapping(z)

    def discriminate(self, image):
        return self.D(image)

    def encode(self, image, label):
        return self.E(image, label)

    def synthesize(self, enc: EncoderOutput, return_features=True):
        return self.G.synthesize(enc.wplus, enc.injected, skip=self.E.skip, return_features=return_features)

    def label_branch(self, features):
        return self.G.label_branch(features)

    def parameter_counts(self):
        return {name: sum(p.numel() for p in m.parameters()) for name, m in self.components().items()}


def architecture_hash(cfg: NetConfig, modules: dict) -> str:
    """Hash of the architecture config plus every parameter name and shape."""
    payload = {"config": asdict(cfg)}
    for name, module in sorted(modules.items()):
        payload[name] = [(k, list(v.shape)) for k, v in module.state_dict().items()]
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]
