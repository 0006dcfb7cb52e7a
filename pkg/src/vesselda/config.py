"""Run configuration: nested per-module sections loaded from JSON.

Unknown keys are rejected with the line on which they appear, CLI overrides
(``section.key=value``) are merged before hashing, and the merged config is
what every manifest embeds.
"""

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace

from .errors import ConfigError
from .nets import NetConfig
from .phase1 import Phase1Config
from .phase2 import Phase2Config
from .preproc import PreprocConfig
from .sato import SatoConfig


@dataclass
class SynthSection:
    slices_per_volume: int = 8
    source_train: int = 45
    target_unlabeled: int = 17
    target_labeled: int = 3
    val: int = 4
    test_source: int = 4
    test_target: int = 4
    # PhantomSpec overrides per domain, e.g. {"noise_level": 4.0}
    source: dict = field(default_factory=dict)
    target: dict = field(default_factory=dict)


@dataclass
class InferSection:
    batch_size: int = 16
    write_png: bool = True


@dataclass
class MetricsSection:
    std: str = "population"


@dataclass
class RunConfig:
    seed: int = 0
    image_size: int = 64
    out_root: str = "runs"
    synthgen: SynthSection = field(default_factory=SynthSection)
    preproc: PreprocConfig = field(default_factory=PreprocConfig)
    net: NetConfig = field(default_factory=NetConfig)
    phase1: Phase1Config = field(default_factory=Phase1Config)
    phase2: Phase2Config = field(default_factory=Phase2Config)
    infer: InferSection = field(default_factory=InferSection)
    sato: SatoConfig = field(default_factory=SatoConfig)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    def to_dict(self):
        return asdict(self)

    def hash(self):
        return config_hash(self.to_dict())


SECTIONS = {f.name: f for f in fields(RunConfig)}

PRESETS = {
    "desk": {},
    # full-scale profile; supported but far outside desk budgets
    "full": {
        "image_size": 512,
        "phase1": {"iterations": 250000},
        "phase2": {"iterations": 50000},
    },
    # tiny profile for smoke tests and determinism checks
    "smoke": {
        "image_size": 32,
        "synthgen": {"slices_per_volume": 2, "source_train": 4, "target_unlabeled": 3, "target_labeled": 1,
                     "val": 1, "test_source": 1, "test_target": 1},
        "net": {"z_dim": 32, "w_dim": 32, "channel_base": 256, "channel_max": 16, "branch_hidden": [32, 16]},
        "phase1": {"iterations": 20, "log_every": 10, "checkpoint_every": 10, "sample_every": 20},
        "phase2": {"iterations": 6, "warmup_steps": 2, "log_every": 3, "eval_every": 3, "checkpoint_every": 3},
    },
}


def config_hash(d):
    blob = json.dumps(d, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _line_of(text, key):
    if not text:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _where(source, text, key):
    line = _line_of(text, key)
    return f"{source}:{line}" if line else source


def _build(cls, values, path, source, text):
    if not isinstance(values, dict):
        raise ConfigError(f"{_where(source, text, path.split('.')[-1])}: section {path!r} must be an object")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"{_where(source, text, key)}: unknown key {path + '.' if path else ''}{key!r}")
        default = known[key].default_factory() if callable(known[key].default_factory) else known[key].default
        if is_dataclass(default):
            kwargs[key] = _build(type(default), {**asdict(default), **value} if isinstance(value, dict) else value,
                                 f"{path}.{key}" if path else key, source, text)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: invalid section {path or '<root>'!r}: {exc}") from exc


def _merge(base, update):
    out = dict(base)
    for k, v in update.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def parse_override(item):
    """``"phase1.iterations=200"`` -> nested dict; values parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    dotted, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out = value
    for part in reversed(dotted.strip().split(".")):
        out = {part: out}
    return out


def load_config(path=None, overrides=(), preset="desk"):
    """Merge preset, optional JSON file and overrides into a :class:`RunConfig`."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    text, source = "", "<defaults>"
    values = dict(PRESETS[preset])
    if path is not None:
        source = str(path)
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"{source}: cannot read config: {exc}") from exc
        try:
            loaded = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{source}:1: top level must be an object")
        values = _merge(values, loaded)
    for item in overrides:
        values = _merge(values, parse_override(item))
    cfg = _build(RunConfig, values, "", source, text)
    return finalize(cfg)


def finalize(cfg: RunConfig):
    """Propagate the global seed and image size into the sections that use them."""
    cfg.net = replace(cfg.net, size=cfg.image_size)
    cfg.preproc = replace(cfg.preproc, size=cfg.image_size)
    cfg.phase1 = replace(cfg.phase1, seed=cfg.seed)
    cfg.phase2 = replace(cfg.phase2, seed=cfg.seed)
    if cfg.metrics.std != "population":
        raise ConfigError("metrics.std: only 'population' is supported")
    return cfg
