"""Axis-aligned rectangles and square-viewport cameras for the 2D world."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class Rect:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 >= self.x0 and self.y1 >= self.y0):
            raise ContractError(f"degenerate rectangle {self}")

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def height(self):
        return self.y1 - self.y0

    @property
    def area(self):
        return self.width * self.height

    def intersects(self, other: "Rect") -> bool:
        """Closed-set intersection test (touching edges count)."""
        return (self.x0 <= other.x1 and other.x0 <= self.x1
                and self.y0 <= other.y1 and other.y0 <= self.y1)

    def intersection(self, other: "Rect") -> "Rect | None":
        if not self.intersects(other):
            return None
        return Rect(max(self.x0, other.x0), max(self.y0, other.y0),
                    min(self.x1, other.x1), min(self.y1, other.y1))

    def contains(self, points, closed=True) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        x, y = p[:, 0], p[:, 1]
        if closed:
            return (x >= self.x0) & (x <= self.x1) & (y >= self.y0) & (y <= self.y1)
        return (x >= self.x0) & (x < self.x1) & (y >= self.y0) & (y < self.y1)

    def inflate(self, dx: float, dy: float) -> "Rect":
        return Rect(self.x0 - dx, self.y0 - dy, self.x1 + dx, self.y1 + dy)

    def clip(self, other: "Rect") -> "Rect":
        r = self.intersection(other)
        if r is None:
            raise ContractError(f"{self} does not meet {other}")
        return r

    def as_list(self):
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass(frozen=True)
class SceneDomain:
    bounds: Rect = Rect(0.0, 0.0, 1.0, 1.0)

    def __post_init__(self):
        if self.bounds.area <= 0.0:
            raise ContractError("scene domain must have positive area")

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.bounds.width, self.bounds.height))


@dataclass(frozen=True)
class Camera:
    """Square viewport ``center +/- half_extent`` sampled on a W x H pixel grid.

    Pixel ``(ix, iy)`` samples the world point at continuous pixel coordinate
    ``(ix, iy)``; images are stored row-major as ``(H, W, 3)``.
    """

    id: int
    center: tuple[float, float]
    half_extent: float
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if self.half_extent <= 0:
            raise ContractError("camera half_extent must be positive")
        if self.width < 8 or self.height < 8:
            raise ContractError("camera resolution must be at least 8x8")

    @property
    def viewport(self) -> Rect:
        cx, cy = self.center
        h = self.half_extent
        return Rect(cx - h, cy - h, cx + h, cy + h)

    @property
    def pixel_size(self) -> tuple[float, float]:
        return 2.0 * self.half_extent / self.width, 2.0 * self.half_extent / self.height

    def project(self, points) -> np.ndarray:
        """World points ``(..., 2)`` to continuous pixel coordinates."""
        p = np.asarray(points, dtype=np.float64)
        cx, cy = self.center
        h = self.half_extent
        px = (p[..., 0] - (cx - h)) / (2.0 * h) * self.width
        py = (p[..., 1] - (cy - h)) / (2.0 * h) * self.height
        return np.stack([px, py], axis=-1)

    def project_covariance(self, cov) -> np.ndarray:
        """World covariance ``(..., 2, 2)`` expressed in pixel units."""
        s = np.diag([self.width / (2.0 * self.half_extent), self.height / (2.0 * self.half_extent)])
        return s @ np.asarray(cov, dtype=np.float64) @ s

    def pixel_world(self, ix, iy):
        """World coordinates of pixel sample positions."""
        sx, sy = self.pixel_size
        cx, cy = self.center
        h = self.half_extent
        return cx - h + np.asarray(ix, dtype=np.float64) * sx, cy - h + np.asarray(iy, dtype=np.float64) * sy

    def pixel_window(self, region: Rect) -> tuple[int, int, int, int] | None:
        """Half-open pixel index box ``(x0, x1, y0, y1)`` whose samples lie in ``region``."""
        sx, sy = self.pixel_size
        cx, cy = self.center
        h = self.half_extent
        x0 = max(0, int(np.ceil((region.x0 - (cx - h)) / sx - 1e-9)))
        x1 = min(self.width, int(np.floor((region.x1 - (cx - h)) / sx + 1e-9)) + 1)
        y0 = max(0, int(np.ceil((region.y0 - (cy - h)) / sy - 1e-9)))
        y1 = min(self.height, int(np.floor((region.y1 - (cy - h)) / sy + 1e-9)) + 1)
        if x1 <= x0 or y1 <= y0:
            return None
        return x0, x1, y0, y1

    def to_dict(self):
        return {"id": self.id, "center": list(self.center), "half_extent": self.half_extent,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["id"]), tuple(float(c) for c in d["center"]), float(d["half_extent"]),
                   int(d["width"]), int(d["height"]))
