"""The 2D world: synthetic ground truth, cameras, grid partition and anchors."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, PartitionError
from .geometry import Camera, Rect, SceneDomain
from .renderer import SplatBatch, composite

FEATURE_DIM = 32
SCENE_FILE_VERSION = 1


@dataclass
class GroundTruthGaussian:
    center: np.ndarray
    rotation: float
    scales: np.ndarray
    base_color: np.ndarray
    amplitude: np.ndarray
    axis: np.ndarray
    opacity: float

    def to_dict(self):
        return {
            "center": list(map(float, self.center)),
            "rotation": float(self.rotation),
            "scales": list(map(float, self.scales)),
            "base_color": list(map(float, self.base_color)),
            "amplitude": list(map(float, self.amplitude)),
            "axis": list(map(float, self.axis)),
            "opacity": float(self.opacity),
        }

    @classmethod
    def from_dict(cls, d):
        arr = lambda k: np.asarray(d[k], dtype=np.float64)  # noqa: E731
        return cls(arr("center"), float(d["rotation"]), arr("scales"), arr("base_color"),
                   arr("amplitude"), arr("axis"), float(d["opacity"]))


@dataclass
class Block:
    """One partition cell. ``core`` tiles the domain; ``extended`` adds the overlap band."""

    id: int
    ix: int
    iy: int
    core: Rect
    extended: Rect
    upper_closed: tuple[bool, bool] = (False, False)

    def owns(self, points) -> np.ndarray:
        """Core membership, lower-inclusive; the domain's far edges are closed."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        x, y = p[:, 0], p[:, 1]
        inx = (x >= self.core.x0) & ((x <= self.core.x1) if self.upper_closed[0] else (x < self.core.x1))
        iny = (y >= self.core.y0) & ((y <= self.core.y1) if self.upper_closed[1] else (y < self.core.y1))
        return inx & iny


@dataclass
class Anchor:
    id: int
    position: np.ndarray
    feature: np.ndarray
    offsets: np.ndarray
    base_radius: float


@dataclass
class AnchorSet:
    """Column storage for the anchors of one block."""

    ids: np.ndarray
    positions: np.ndarray
    features: np.ndarray
    offsets: np.ndarray
    base_radius: np.ndarray

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i) -> Anchor:
        return Anchor(int(self.ids[i]), self.positions[i], self.features[i], self.offsets[i],
                      float(self.base_radius[i]))

    def subset(self, mask) -> "AnchorSet":
        return AnchorSet(self.ids[mask], self.positions[mask], self.features[mask].copy(),
                         self.offsets[mask].copy(), self.base_radius[mask])

    @property
    def k_g(self):
        return self.offsets.shape[1]


@dataclass
class Dataset:
    domain: SceneDomain
    scene: list[GroundTruthGaussian]
    cameras: list[Camera]
    images: list[np.ndarray]
    blocks: list[Block]
    assignments: dict[int, list[int]]
    test_cameras: list[Camera] = field(default_factory=list)
    test_images: list[np.ndarray] = field(default_factory=list)
    seed: int = 0


# ---------------------------------------------------------------------------
# partition and view assignment


def partition(domain: SceneDomain, nx: int, ny: int, rho: float = 0.1) -> list[Block]:
    """Equal-area ``nx`` x ``ny`` grid; block ids run along x first."""
    if nx < 1 or ny < 1:
        raise ContractError("nx and ny must be >= 1")
    if not 0.0 <= rho <= 0.5:
        raise ContractError("rho must lie in [0, 0.5]")
    b = domain.bounds
    xs = [b.x0 + (b.x1 - b.x0) * i / nx for i in range(nx + 1)]
    ys = [b.y0 + (b.y1 - b.y0) * j / ny for j in range(ny + 1)]
    xs[-1], ys[-1] = b.x1, b.y1
    dx = rho * (b.x1 - b.x0) / nx
    dy = rho * (b.y1 - b.y0) / ny
    blocks = []
    for j in range(ny):
        for i in range(nx):
            core = Rect(xs[i], ys[j], xs[i + 1], ys[j + 1])
            ext = core.inflate(dx, dy).clip(b)
            blocks.append(Block(j * nx + i, i, j, core, ext, (i == nx - 1, j == ny - 1)))
    return blocks


def assign_views(cameras: list[Camera], blocks: list[Block]) -> dict[int, list[int]]:
    """Camera ``c`` goes to every block whose extended region its viewport touches."""
    out = {blk.id: [] for blk in blocks}
    for cam in cameras:
        hit = False
        for blk in blocks:
            if cam.viewport.intersects(blk.extended):
                out[blk.id].append(cam.id)
                hit = True
        if not hit:
            raise ContractError(f"camera {cam.id} sees no block")
    return out


# ---------------------------------------------------------------------------
# synthetic ground truth


def generate_synthetic_scene(seed: int, n_gt: int, domain: SceneDomain = SceneDomain()) -> list[GroundTruthGaussian]:
    if n_gt < 1:
        raise ContractError("n_gt must be >= 1")
    rng = np.random.default_rng(seed)
    b = domain.bounds
    out = []
    for _ in range(n_gt):
        center = np.array([rng.uniform(b.x0, b.x1), rng.uniform(b.y0, b.y1)])
        rot = rng.uniform(0.0, np.pi)
        scales = np.exp(rng.uniform(np.log(0.01), np.log(0.06), size=2))
        base = rng.uniform(0.0, 1.0, size=3)
        amp = rng.uniform(0.0, 0.25, size=3)
        ang = rng.uniform(0.0, 2.0 * np.pi)
        axis = np.array([np.cos(ang), np.sin(ang)])
        opacity = rng.uniform(0.5, 1.0)
        out.append(GroundTruthGaussian(center, rot, scales, base, amp, axis, opacity))
    return out


def view_directions(points, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Unit directions camera -> point and raw distances; coincident points get (1, 0)."""
    d = np.atleast_2d(np.asarray(points, dtype=np.float64)) - np.asarray(camera.center)
    dist = np.hypot(d[:, 0], d[:, 1])
    safe = dist > 1e-12
    unit = np.zeros_like(d)
    unit[safe] = d[safe] / dist[safe, None]
    unit[~safe] = (1.0, 0.0)
    return unit, dist


def ground_truth_splats(scene: list[GroundTruthGaussian], camera: Camera) -> SplatBatch:
    if not scene:
        return SplatBatch.empty()
    centers = np.array([g.center for g in scene])
    unit, _ = view_directions(centers, camera)
    colors = np.array([np.clip(g.base_color + g.amplitude * float(g.axis @ d), 0.0, 1.0)
                       for g, d in zip(scene, unit)])
    n = len(scene)
    keys = np.stack([np.zeros(n, int), np.arange(n), np.zeros(n, int)], axis=1)
    return SplatBatch(centers, np.array([g.rotation for g in scene]),
                      np.array([g.scales for g in scene]), colors,
                      np.array([g.opacity for g in scene]), keys)


def render_ground_truth(scene: list[GroundTruthGaussian], camera: Camera) -> np.ndarray:
    return composite(ground_truth_splats(scene, camera), camera)


def make_cameras(count: int, domain: SceneDomain, *, layout: str = "jittered_grid",
                 resolution: int = 64, zoom_range=(0.12, 0.2), seed: int = 0,
                 first_id: int = 0) -> list[Camera]:
    """Camera centers inside the domain; ``half_extent`` uniform in ``zoom_range``."""
    rng = np.random.default_rng(seed)
    b = domain.bounds
    if layout == "jittered_grid":
        rows = max(1, int(np.floor(np.sqrt(count))))
        cols = int(np.ceil(count / rows))
        cells = [(i, j) for j in range(rows) for i in range(cols)][:count]
        centers = [(b.x0 + (i + rng.uniform()) * b.width / cols,
                    b.y0 + (j + rng.uniform()) * b.height / rows) for i, j in cells]
    elif layout == "random":
        centers = [(rng.uniform(b.x0, b.x1), rng.uniform(b.y0, b.y1)) for _ in range(count)]
    else:
        raise ContractError(f"unknown camera layout {layout!r}")
    lo, hi = zoom_range
    return [Camera(first_id + k, (float(cx), float(cy)), float(rng.uniform(lo, hi)), resolution, resolution)
            for k, (cx, cy) in enumerate(centers)]


# ---------------------------------------------------------------------------
# anchors


def grid_points(domain: SceneDomain, spacing: float) -> np.ndarray:
    if spacing <= 0:
        raise ContractError("spacing must be positive")
    b = domain.bounds
    nx = max(1, int(round(b.width / spacing)))
    ny = max(1, int(round(b.height / spacing)))
    xs = b.x0 + (np.arange(nx) + 0.5) * b.width / nx
    ys = b.y0 + (np.arange(ny) + 0.5) * b.height / ny
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def init_anchors(blocks: list[Block], points, spacing: float, k_g: int, *, seed: int,
                 domain: SceneDomain = SceneDomain(), base_radius: float = 0.03) -> dict[int, AnchorSet]:
    """Anchors at ``points`` (e.g. GT centers) plus a regular grid, copied into every
    block whose extended region contains them. Copies start from identical values."""
    if k_g < 1:
        raise ContractError("k_g must be >= 1")
    seeds = np.zeros((0, 2)) if points is None else np.asarray(points, dtype=np.float64).reshape(-1, 2)
    pos = np.concatenate([seeds, grid_points(domain, spacing)], axis=0)
    rng = np.random.default_rng(seed)
    feats = rng.normal(0.0, 0.1, size=(len(pos), FEATURE_DIM))
    offs = rng.uniform(-0.5, 0.5, size=(len(pos), k_g, 2))
    ids = np.arange(len(pos))
    out = {}
    for blk in blocks:
        m = blk.extended.contains(pos)
        if not m.any():
            raise PartitionError(f"block {blk.id} received no anchors; reduce spacing")
        out[blk.id] = AnchorSet(ids[m], pos[m], feats[m].copy(), offs[m].copy(),
                                np.full(int(m.sum()), float(base_radius)))
    return out


# ---------------------------------------------------------------------------
# scene file


def scene_to_dict(scene, cameras, test_cameras, *, seed, domain: SceneDomain, nx, ny, rho):
    return {
        "version": SCENE_FILE_VERSION,
        "seed": int(seed),
        "domain": domain.bounds.as_list(),
        "partition": {"nx": int(nx), "ny": int(ny), "rho": float(rho)},
        "gaussians": [g.to_dict() for g in scene],
        "cameras": [c.to_dict() for c in cameras],
        "test_cameras": [c.to_dict() for c in test_cameras],
    }


def save_scene(path, doc: dict):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_scene(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != SCENE_FILE_VERSION:
        raise ContractError(f"unsupported scene file version {doc.get('version')!r}")
    doc["domain"] = SceneDomain(Rect(*doc["domain"]))
    doc["gaussians"] = [GroundTruthGaussian.from_dict(g) for g in doc["gaussians"]]
    doc["cameras"] = [Camera.from_dict(c) for c in doc["cameras"]]
    doc["test_cameras"] = [Camera.from_dict(c) for c in doc["test_cameras"]]
    return doc


def build_dataset(scene, cameras, test_cameras, domain: SceneDomain, nx, ny, rho, seed=0,
                  images=None) -> Dataset:
    blocks = partition(domain, nx, ny, rho)
    if images is None:
        images = [render_ground_truth(scene, c) for c in cameras]
    test_images = [render_ground_truth(scene, c) for c in test_cameras]
    return Dataset(domain, scene, cameras, images, blocks, assign_views(cameras, blocks),
                   test_cameras, test_images, seed)
