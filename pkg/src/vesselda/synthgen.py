"""Synthetic dual-domain vascular phantoms.

Source-domain slices mimic angiography: thick vessels, brighter than the
surrounding tissue, clustered near the centre of the brain ellipse.
Target-domain slices mimic venography: thin vessels, darker than the tissue,
biased toward the periphery.  Both share the same generative recipe:

* brain: a filled ellipse at mid-gray with a blurred-noise texture;
* vessels: random-walk centerlines with bounded turning angle and occasional
  branching, rendered as tubes with a Gaussian cross-section;
* distractors: unlabelled blobs with the vessel polarity (iron-rich nuclei
  in venograms, flow artefacts in angiograms) and an optional thin rim of the
  same polarity just inside the brain outline (susceptibility artefact);
* everything is clipped to the brain ellipse.

Every sample is a pure function of its :class:`PhantomSpec` (including the
seed), so generation can be parallelised freely.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .nets import DOMAINS


@dataclass(frozen=True)
class PhantomSpec:
    domain: str = "source"
    image_size: int = 64
    n_vessels: tuple = (3, 5)
    radius_range_px: tuple = (1.6, 2.8)
    vessel_polarity: str = "bright"
    # placement of walk seeds as a fraction of the ellipse radius
    placement: tuple = (0.0, 0.45)
    # semi-axes as fractions of image_size, and an optional explicit
    # (cy, cx, a, b, angle) tuple overriding the random draw
    brain_axes: tuple = ((0.34, 0.42), (0.28, 0.38))
    brain_shape: tuple = None
    brain_level: float = 100.0
    vessel_contrast: float = 80.0
    noise_level: float = 6.0
    texture_sigma: float = 2.0
    walk_length: tuple = (25, 55)
    step_px: float = 0.75
    max_turn_deg: float = 14.0
    branch_prob: float = 0.03
    n_distractors: tuple = (0, 0)
    distractor_radius_px: tuple = (2.0, 4.0)
    distractor_contrast: float = 0.0
    rim_contrast: float = 0.0
    rim_width_px: float = 1.2
    spacing_mm: tuple = (0.5, 0.5)
    seed: int = 0

    def validate(self):
        lo, hi = self.radius_range_px
        if lo <= 0 or lo > hi:
            raise ConfigError(f"invalid radius range {self.radius_range_px}")
        if self.image_size < 32:
            raise ConfigError(f"image_size must be >= 32, got {self.image_size}")
        if self.domain not in DOMAINS:
            raise ConfigError(f"unknown domain {self.domain!r}")
        if self.vessel_polarity not in ("bright", "dark"):
            raise ConfigError(f"unknown polarity {self.vessel_polarity!r}")
        if self.n_vessels[0] < 0 or self.n_vessels[0] > self.n_vessels[1]:
            raise ConfigError(f"invalid vessel count range {self.n_vessels}")
        if self.walk_length[0] < 1 or self.walk_length[0] > self.walk_length[1]:
            raise ConfigError(f"invalid walk length range {self.walk_length}")
        if self.n_distractors[0] < 0 or self.n_distractors[0] > self.n_distractors[1]:
            raise ConfigError(f"invalid distractor count range {self.n_distractors}")
        return self


def source_spec(**overrides):
    return replace(PhantomSpec(), **overrides).validate()


def target_spec(**overrides):
    base = PhantomSpec(
        domain="target",
        n_vessels=(4, 6),
        radius_range_px=(1.0, 1.7),
        vessel_polarity="dark",
        placement=(0.5, 0.85),
        vessel_contrast=55.0,
        noise_level=14.0,
        texture_sigma=1.2,
        walk_length=(20, 45),
        max_turn_deg=18.0,
        n_distractors=(3, 6),
        distractor_radius_px=(1.2, 2.5),
        distractor_contrast=50.0,
        rim_contrast=45.0,
    )
    return replace(base, **overrides).validate()


@dataclass
class LabeledSample:
    image: np.ndarray
    brain_mask: np.ndarray
    vessel_mask: np.ndarray
    domain: str
    seed: int = 0
    spacing_mm: tuple = (0.5, 0.5)

    def label_image(self):
        """Single 3-class label: vessel > brain > background precedence."""
        label = np.zeros(self.image.shape, dtype=np.uint8)
        label[self.brain_mask] = 1
        label[self.vessel_mask] = 2
        return label


@dataclass
class PhantomVolume:
    """A stack of phantom slices that share one brain outline."""

    volume_id: str
    domain: str
    seed: int
    slices: list = field(default_factory=list)

    @property
    def image(self):
        return np.stack([s.image for s in self.slices])

    @property
    def brain_mask(self):
        return np.stack([s.brain_mask for s in self.slices])

    @property
    def vessel_mask(self):
        return np.stack([s.vessel_mask for s in self.slices])


@dataclass
class SplitCounts:
    source_train: int = 45
    target_unlabeled: int = 17
    target_labeled: int = 3
    val: int = 4
    test_source: int = 4
    test_target: int = 4

    def validate(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ConfigError(f"split count {name} must be >= 0, got {value}")
        return self


SPLIT_NAMES = ("S_labeled", "T_unlabeled", "T_labeled", "val", "test_source", "test_target")


@dataclass
class DatasetSplit:
    S_labeled: list
    T_unlabeled: list
    T_labeled: list
    val: list
    test_source: list
    test_target: list

    def items(self):
        return [(name, getattr(self, name)) for name in SPLIT_NAMES]

    def training_images(self):
        """All training slices (images only) from S, T_U and T_L."""
        return [(s.image, s.domain) for v in self.S_labeled + self.T_unlabeled + self.T_labeled for s in v.slices]

    def labeled_training_samples(self):
        return [s for v in self.S_labeled + self.T_labeled for s in v.slices]


def _ellipse_frame(shape, cy, cx, a, b, angle):
    yy, xx = np.mgrid[0:shape, 0:shape].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return np.sqrt((u / a) ** 2 + (v / b) ** 2)


def random_brain_shape(spec, rng):
    size = spec.image_size
    (a_lo, a_hi), (b_lo, b_hi) = spec.brain_axes
    a = rng.uniform(a_lo, a_hi) * size
    b = rng.uniform(b_lo, b_hi) * size
    cy = size / 2 - 0.5 + rng.uniform(-0.04, 0.04) * size
    cx = size / 2 - 0.5 + rng.uniform(-0.04, 0.04) * size
    angle = rng.uniform(-0.35, 0.35)
    return (cy, cx, a, b, angle)


def _walk(rng, start, heading, length, radius, spec, inside, depth, points):
    """Append (y, x, r) centerline points of one random walk and its branches."""
    turn = np.deg2rad(spec.max_turn_deg)
    pos = np.array(start, dtype=np.float64)
    for _ in range(int(length)):
        if not inside(pos):
            break
        points.append((pos[0], pos[1], radius))
        heading += rng.uniform(-turn, turn)
        pos = pos + spec.step_px * np.array([np.sin(heading), np.cos(heading)])
        if depth < 2 and rng.random() < spec.branch_prob:
            side = rng.choice([-1.0, 1.0])
            child_heading = heading + side * np.deg2rad(rng.uniform(30, 60))
            child_radius = max(spec.radius_range_px[0], 0.75 * radius)
            _walk(rng, pos, child_heading, length / 2, child_radius, spec, inside, depth + 1, points)


def _distractors(spec, rng, cy, cx, a, b, angle):
    """Unlabelled elongated blobs inside the brain, as a (size, size) profile."""
    size = spec.image_size
    out = np.zeros((size, size))
    n = rng.integers(spec.n_distractors[0], spec.n_distractors[1] + 1)
    if n == 0 or spec.distractor_contrast == 0:
        return out
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c, s = np.cos(angle), np.sin(angle)
    for _ in range(n):
        frac, theta = np.sqrt(rng.uniform(0, 0.6)), rng.uniform(0, 2 * np.pi)
        u, v = frac * a * np.cos(theta), frac * b * np.sin(theta)
        py, px = cy + s * u + c * v, cx + c * u - s * v
        r = rng.uniform(*spec.distractor_radius_px)
        elong = rng.uniform(1.0, 1.8)
        phi = rng.uniform(0, np.pi)
        du = np.cos(phi) * (xx - px) + np.sin(phi) * (yy - py)
        dv = -np.sin(phi) * (xx - px) + np.cos(phi) * (yy - py)
        out = np.maximum(out, np.exp(-((du / (r * elong)) ** 2 + (dv / r) ** 2)))
    return spec.distractor_contrast * out


def generate_sample(spec: PhantomSpec) -> LabeledSample:
    """Render one labelled phantom slice; deterministic in ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    cy, cx, a, b, angle = spec.brain_shape if spec.brain_shape is not None else random_brain_shape(spec, rng)
    rho = _ellipse_frame(size, cy, cx, a, b, angle)
    brain = rho <= 1.0
    soft_brain = 1.0 / (1.0 + np.exp((rho - 1.0) * min(a, b) * 2.0))

    def inside(p):
        dy, dx = p[0] - cy, p[1] - cx
        c, s = np.cos(angle), np.sin(angle)
        u, v = c * dx + s * dy, -s * dx + c * dy
        return (u / a) ** 2 + (v / b) ** 2 <= 0.95 ** 2

    points = []
    n_vessels = rng.integers(spec.n_vessels[0], spec.n_vessels[1] + 1)
    for _ in range(n_vessels):
        frac = rng.uniform(*spec.placement)
        theta = rng.uniform(0, 2 * np.pi)
        u, v = frac * a * np.cos(theta), frac * b * np.sin(theta)
        c, s = np.cos(angle), np.sin(angle)
        start = (cy + s * u + c * v, cx + c * u - s * v)
        heading = rng.uniform(0, 2 * np.pi)
        length = rng.integers(spec.walk_length[0], spec.walk_length[1] + 1)
        radius = rng.uniform(*spec.radius_range_px)
        _walk(rng, start, heading, length, radius, spec, inside, 0, points)

    vessel = np.zeros((size, size), dtype=bool)
    profile = np.zeros((size, size))
    if points:
        pts = np.asarray(points)
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        d2 = (yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2
        r = pts[:, 2]
        vessel = (d2 <= r ** 2).any(axis=-1)
        # Gaussian cross-section with std r/sqrt(2): exp(-1) at the tube wall
        profile = np.exp(-d2 / (r ** 2)).max(axis=-1)
    vessel &= brain

    texture = ndimage.gaussian_filter(rng.standard_normal((size, size)), spec.texture_sigma)
    texture /= texture.std() + 1e-12
    sign = 1.0 if spec.vessel_polarity == "bright" else -1.0
    white = 0.2 * spec.noise_level * rng.standard_normal((size, size))
    clutter = _distractors(spec, rng, cy, cx, a, b, angle)
    if spec.rim_contrast:
        depth = (1.0 - rho) * min(a, b)
        clutter = clutter + spec.rim_contrast * np.exp(-((depth - 1.5) / spec.rim_width_px) ** 2)
    image = soft_brain * (
        spec.brain_level
        + spec.noise_level * texture
        + sign * (spec.vessel_contrast * profile + clutter)
        + white
    )
    # skull-stripped look: exactly zero outside the head support
    image[soft_brain < 1e-3] = 0.0
    return LabeledSample(
        image=image.astype(np.float32),
        brain_mask=brain,
        vessel_mask=vessel,
        domain=spec.domain,
        seed=spec.seed,
        spacing_mm=tuple(spec.spacing_mm),
    )


def derive_seed(*keys):
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def generate_volume(spec: PhantomSpec, volume_id, seed, n_slices):
    """A volume of ``n_slices`` phantoms sharing a brain outline that tapers toward the ends."""
    rng = np.random.default_rng(seed)
    cy, cx, a, b, angle = random_brain_shape(spec, rng)
    slices = []
    for k in range(n_slices):
        t = (k - (n_slices - 1) / 2) / max(n_slices / 2, 1)
        scale = 1.0 - 0.15 * t * t
        shape = (cy, cx, a * scale, b * scale, angle)
        slices.append(generate_sample(replace(spec, brain_shape=shape, seed=derive_seed(seed, k))))
    return PhantomVolume(volume_id=volume_id, domain=spec.domain, seed=seed, slices=slices)


def make_split(source, target, counts=None, seed=0, slices_per_volume=8):
    """Build disjoint source/target volume splits mirroring the 45/17/3/4/4+4 setup.

    Every volume gets its own seed derived from ``(seed, global index)``; the
    index order of the splits is fixed so membership is reproducible.
    """
    counts = (counts or SplitCounts()).validate()
    plan = [
        ("S_labeled", source, counts.source_train),
        ("T_unlabeled", target, counts.target_unlabeled),
        ("T_labeled", target, counts.target_labeled),
        ("val", target, counts.val),
        ("test_source", source, counts.test_source),
        ("test_target", target, counts.test_target),
    ]
    out = {}
    index = 0
    for name, spec, n in plan:
        vols = []
        for _ in range(n):
            vseed = derive_seed(seed, index)
            vid = f"{spec.domain[:3]}{index:04d}"
            vols.append(generate_volume(spec, vid, vseed, slices_per_volume))
            index += 1
        out[name] = vols
    return DatasetSplit(**out)


def masked_means(sample: LabeledSample):
    """Mean intensity inside vessels and inside brain tissue excluding vessels."""
    tissue = sample.brain_mask & ~sample.vessel_mask
    vessel_mean = sample.image[sample.vessel_mask].mean() if sample.vessel_mask.any() else np.nan
    return float(vessel_mean), float(sample.image[tissue].mean())
