"""Run configuration: a strict JSON schema and the glue that builds a trainer from it.

Every section is a dataclass whose defaults are the documented defaults.
Unknown keys anywhere raise :class:`ConfigError` so a typo in an ablation file
fails loudly instead of silently falling back to a default.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError
from .geometry import Rect, SceneDomain
from .orchestrator import MODES, TrainConfig, Trainer
from .renderer import EPS_TRANSMITTANCE, TAU_OPACITY
from .scene import (AnchorSet, Dataset, build_dataset, generate_synthetic_scene, init_anchors,
                    make_cameras)
from .weighting import WeightingConfig

CONFIG_VERSION = 1


@dataclass
class SceneSection:
    seed: int = 0
    n_gt: int = 64
    domain: list[float] = field(default_factory=lambda: [0.0, 0.0, 1.0, 1.0])

    def validate(self):
        if self.n_gt < 1:
            raise ConfigError("scene.n_gt must be >= 1")
        if len(self.domain) != 4:
            raise ConfigError("scene.domain must be [x0, y0, x1, y1]")
        x0, y0, x1, y1 = self.domain
        if not (x1 > x0 and y1 > y0):
            raise ConfigError("scene.domain must have positive area")


@dataclass
class CameraSection:
    count: int = 40
    test_count: int = 10
    layout: str = "jittered_grid"
    resolution: int = 64
    zoom_range: list[float] = field(default_factory=lambda: [0.12, 0.2])

    def validate(self):
        if self.count < 1 or self.test_count < 0:
            raise ConfigError("cameras.count must be >= 1 and cameras.test_count >= 0")
        if self.layout not in ("jittered_grid", "random"):
            raise ConfigError(f"cameras.layout must be 'jittered_grid' or 'random', got {self.layout!r}")
        if self.resolution < 16:
            raise ConfigError("cameras.resolution must be >= 16")
        if len(self.zoom_range) != 2 or not 0 < self.zoom_range[0] <= self.zoom_range[1]:
            raise ConfigError("cameras.zoom_range must be [lo, hi] with 0 < lo <= hi")


@dataclass
class PartitionSection:
    nx: int = 4
    ny: int = 2
    rho: float = 0.1

    def validate(self):
        if self.nx < 1 or self.ny < 1:
            raise ConfigError("partition.nx and partition.ny must be >= 1")
        if self.rho < 0:
            raise ConfigError("partition.rho must be >= 0")


@dataclass
class AnchorSection:
    spacing: float = 0.125
    k_g: int = 2
    base_radius: float = 0.03

    def validate(self):
        if self.spacing <= 0 or self.base_radius <= 0:
            raise ConfigError("anchors.spacing and anchors.base_radius must be positive")
        if self.k_g < 1:
            raise ConfigError("anchors.k_g must be >= 1")


@dataclass
class TrainSection:
    """TrainConfig fields; the block count comes from the partition section."""

    n_workers: int = 4
    period: int = 50
    iterations: int = 2000
    mode: str = "full"
    seed: int = 0
    lambda_ssim: float = 0.2
    lambda_consistency: float = 50.0
    momentum: float = 0.9
    lr_decoder: float = 2e-3
    lr_feature: float = 5e-3
    lr_offset: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-15
    hidden: int = 64
    tracker_beta: float = 0.9
    grad_reduce: str = "sum"
    frustum_margin: float = 0.5
    shuffle: bool = True
    tau_opacity: float = TAU_OPACITY
    eps_transmittance: float = EPS_TRANSMITTANCE

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"train.mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class WeightingSection:
    lambda_w: float = 100.0
    sigma_w: float = 2.0
    w_cap: float = 2.0
    use_psnr: bool = True
    use_ssim: bool = True

    def validate(self):
        try:
            WeightingConfig(**asdict(self))
        except ContractError as exc:
            raise ConfigError(f"weighting: {exc}") from exc


@dataclass
class OutputSection:
    dir: str = "runs/default"
    checkpoint_every: int = 500

    def validate(self):
        if self.checkpoint_every < 1:
            raise ConfigError("output.checkpoint_every must be >= 1")


_SECTIONS = {
    "scene": SceneSection,
    "cameras": CameraSection,
    "partition": PartitionSection,
    "anchors": AnchorSection,
    "train": TrainSection,
    "weighting": WeightingSection,
    "output": OutputSection,
}

_FLOAT_LISTS = {("scene", "domain"), ("cameras", "zoom_range")}


def _coerce(section: str, name: str, ftype, raw):
    where = f"{section}.{name}"
    if (section, name) in _FLOAT_LISTS:
        if not isinstance(raw, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                                for v in raw):
            raise ConfigError(f"{where} must be a list of numbers")
        return [float(v) for v in raw]
    if ftype in ("bool", bool):
        if not isinstance(raw, bool):
            raise ConfigError(f"{where} must be true or false")
        return raw
    if ftype in ("int", int):
        if isinstance(raw, bool) or not isinstance(raw, int):
            raise ConfigError(f"{where} must be an integer")
        return raw
    if ftype in ("float", float):
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(raw)
    if ftype in ("str", str):
        if not isinstance(raw, str):
            raise ConfigError(f"{where} must be a string")
        return raw
    raise ConfigError(f"unsupported field type for {where}")  # pragma: no cover


@dataclass
class RunConfig:
    scene: SceneSection = field(default_factory=SceneSection)
    cameras: CameraSection = field(default_factory=CameraSection)
    partition: PartitionSection = field(default_factory=PartitionSection)
    anchors: AnchorSection = field(default_factory=AnchorSection)
    train: TrainSection = field(default_factory=TrainSection)
    weighting: WeightingSection = field(default_factory=WeightingSection)
    output: OutputSection = field(default_factory=OutputSection)

    def __post_init__(self):
        for name in _SECTIONS:
            getattr(self, name).validate()
        if self.train.mode == "single_block" and (self.partition.nx, self.partition.ny) != (1, 1):
            raise ConfigError("single_block mode needs partition.nx = partition.ny = 1")
        self.train_config()  # surfaces cross-field errors such as n_workers > n_blocks

    @property
    def n_blocks(self) -> int:
        return self.partition.nx * self.partition.ny

    @property
    def domain(self) -> SceneDomain:
        return SceneDomain(Rect(*self.scene.domain))

    def train_config(self) -> TrainConfig:
        return TrainConfig(n_blocks=self.n_blocks, weighting=WeightingConfig(**asdict(self.weighting)),
                           **asdict(self.train))

    # -- (de)serialisation -------------------------------------------------

    def to_dict(self) -> dict:
        d = {"version": CONFIG_VERSION}
        d.update({name: asdict(getattr(self, name)) for name in _SECTIONS})
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        doc = dict(doc)
        version = doc.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version!r}")
        unknown = sorted(set(doc) - set(_SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
        built = {}
        for name, kind in _SECTIONS.items():
            raw = doc.get(name, {})
            if not isinstance(raw, dict):
                raise ConfigError(f"section {name!r} must be an object")
            known = {f.name: f for f in fields(kind)}
            bad = sorted(set(raw) - set(known))
            if bad:
                raise ConfigError(f"unknown key(s) in {name}: {', '.join(bad)}")
            built[name] = kind(**{k: _coerce(name, k, known[k].type, v) for k, v in raw.items()})
        return cls(**built)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Apply dotted-path overrides such as ``{"train.momentum": 0.99}``."""
        doc = self.to_dict()
        for path, val in overrides.items():
            section, _, key = path.partition(".")
            if section not in _SECTIONS or not key:
                raise ConfigError(f"bad override path {path!r}")
            doc[section][key] = val
        return RunConfig.from_dict(doc)


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Same experiment under another seed; scene, cameras, anchors and training all follow."""
    return replace(cfg, scene=replace(cfg.scene, seed=int(seed)), train=replace(cfg.train, seed=int(seed)))


# ---------------------------------------------------------------------------
# building runs


@dataclass
class Experiment:
    config: RunConfig
    dataset: Dataset
    anchors: dict[int, AnchorSet]

    def trainer(self, threads: int = 1) -> Trainer:
        return Trainer(self.config.train_config(), self.dataset, copy.deepcopy(self.anchors), threads=threads)


def make_scene(cfg: RunConfig):
    """(ground truth, training cameras, test cameras), all derived from ``scene.seed``."""
    s, c = cfg.scene, cfg.cameras
    dom = cfg.domain
    gt = generate_synthetic_scene(s.seed, s.n_gt, dom)
    zoom = tuple(c.zoom_range)
    cams = make_cameras(c.count, dom, layout=c.layout, resolution=c.resolution, zoom_range=zoom,
                        seed=[s.seed, 0xCA3])
    test = make_cameras(c.test_count, dom, layout="random", resolution=c.resolution, zoom_range=zoom,
                        seed=[s.seed, 0x7E57], first_id=c.count)
    return gt, cams, test


def make_anchors(cfg: RunConfig, dataset: Dataset) -> dict[int, AnchorSet]:
    a = cfg.anchors
    centers = np.array([g.center for g in dataset.scene]).reshape(-1, 2)
    return init_anchors(dataset.blocks, centers, a.spacing, a.k_g, seed=cfg.scene.seed,
                        domain=dataset.domain, base_radius=a.base_radius)


def build_experiment(cfg: RunConfig, images=None) -> Experiment:
    gt, cams, test = make_scene(cfg)
    p = cfg.partition
    ds = build_dataset(gt, cams, test, cfg.domain, p.nx, p.ny, p.rho, seed=cfg.scene.seed, images=images)
    return Experiment(cfg, ds, make_anchors(cfg, ds))


# ---------------------------------------------------------------------------
# ablations


COMPARISON_METRICS = ("psnr", "ssim", "l1", "seam")


@dataclass
class AblationSpec:
    """Named config overrides evaluated over several seeds."""

    variants: dict[str, dict]
    seeds: list[int]
    metric: str = "psnr"

    def __post_init__(self):
        if len(self.variants) < 2:
            raise ConfigError("an ablation needs at least two variants")
        if len(self.seeds) < 2:
            raise ConfigError("an ablation needs at least two seeds")
        if self.metric not in COMPARISON_METRICS:
            raise ConfigError(f"metric must be one of {COMPARISON_METRICS}")

    @classmethod
    def from_dict(cls, doc: dict) -> "AblationSpec":
        extra = sorted(set(doc) - {"variants", "seeds", "metric"})
        if extra:
            raise ConfigError(f"unknown ablation key(s): {', '.join(extra)}")
        try:
            return cls({str(k): dict(v) for k, v in doc["variants"].items()},
                       [int(s) for s in doc["seeds"]], doc.get("metric", "psnr"))
        except (KeyError, TypeError, AttributeError) as exc:
            raise ConfigError(f"malformed ablation spec: {exc}") from exc

    def to_dict(self):
        return {"variants": self.variants, "seeds": self.seeds, "metric": self.metric}

    def configs(self, base: RunConfig):
        """Yield (variant name, seed, config) for every cell of the matrix."""
        for name, ov in self.variants.items():
            varied = base.with_overrides(ov)
            for s in self.seeds:
                yield name, s, with_seed(varied, s)


def with_mode(cfg: RunConfig, mode: str) -> RunConfig:
    """Switch training mode; ``single_block`` also collapses the partition to one block."""
    doc = cfg.to_dict()
    doc["train"]["mode"] = mode
    if mode == "single_block":
        doc["partition"].update(nx=1, ny=1)
        doc["train"]["n_workers"] = 1
    return RunConfig.from_dict(doc)
