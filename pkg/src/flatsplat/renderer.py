"""Differentiable 2D splatting: anisotropic Gaussians alpha-composited front to back.

The compositor is a single fused op on the autodiff tape with a hand-written
backward pass; see :func:`composite` and :func:`composite_backward`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ContractError, NumericsError, ShapeError
from .geometry import Camera

TAU_OPACITY = 0.005
EPS_TRANSMITTANCE = 1e-4
MIN_SCALE = 1e-12


@dataclass
class NeuralGaussian2D:
    center: np.ndarray
    rotation: float
    scales: np.ndarray
    color: np.ndarray
    opacity: float
    key: tuple[int, int, int] = (0, 0, 0)

    def covariance(self) -> np.ndarray:
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        r = np.array([[c, -s], [s, c]])
        return r @ np.diag(np.asarray(self.scales, dtype=np.float64) ** 2) @ r.T


@dataclass
class SplatBatch:
    """Column-wise splat attributes; fields are arrays or tape Tensors.

    Shapes: means (N, 2), rotations (N,), scales (N, 2), colors (N, 3),
    opacities (N,), keys (N, 3) integer sort keys (block, anchor, slot).
    """

    means: object
    rotations: object
    scales: object
    colors: object
    opacities: object
    keys: np.ndarray

    def __len__(self):
        return len(self.keys)

    @classmethod
    def empty(cls):
        z = np.zeros
        return cls(z((0, 2)), z(0), z((0, 2)), z((0, 3)), z(0), np.zeros((0, 3), dtype=np.int64))

    @classmethod
    def from_gaussians(cls, gaussians):
        if not gaussians:
            return cls.empty()
        return cls(
            np.array([g.center for g in gaussians], dtype=np.float64),
            np.array([g.rotation for g in gaussians], dtype=np.float64),
            np.array([g.scales for g in gaussians], dtype=np.float64),
            np.array([g.color for g in gaussians], dtype=np.float64),
            np.array([g.opacity for g in gaussians], dtype=np.float64),
            np.array([g.key for g in gaussians], dtype=np.int64).reshape(-1, 3),
        )

    def fields(self):
        return (self.means, self.rotations, self.scales, self.colors, self.opacities)


def evaluate_gaussian(g: NeuralGaussian2D, x) -> float:
    """Unnormalised Gaussian density at world point ``x`` via the closed-form 2x2 inverse."""
    s = np.asarray(g.scales, dtype=np.float64)
    if np.any(s <= MIN_SCALE):
        raise NumericsError(f"gaussian scale too small: {s}")
    cov = g.covariance()
    a, b, d = cov[0, 0], cov[0, 1], cov[1, 1]
    det = a * d - b * b
    inv = np.array([[d, -b], [-b, a]]) / det
    r = np.asarray(x, dtype=np.float64) - np.asarray(g.center, dtype=np.float64)
    return float(np.exp(-0.5 * r @ inv @ r))


def project(camera: Camera, point) -> np.ndarray:
    return camera.project(point)


def check_sorted(keys: np.ndarray):
    keys = np.asarray(keys)
    if len(keys) < 2:
        return
    d = np.diff(keys, axis=0)
    nz = d != 0
    first = np.argmax(nz, axis=1)
    ok = nz.any(axis=1) & (d[np.arange(len(d)), first] > 0)
    if not ok.all():
        bad = int(np.argmin(ok))
        raise ContractError(f"splats not sorted by key at position {bad + 1}: "
                            f"{tuple(keys[bad])} then {tuple(keys[bad + 1])}")


def _pixel_grid(camera: Camera, window):
    x0, x1, y0, y1 = (0, camera.width, 0, camera.height) if window is None else window
    iy, ix = np.mgrid[y0:y1, x0:x1]
    wx, wy = camera.pixel_world(ix.ravel(), iy.ravel())
    return wx, wy, (y1 - y0, x1 - x0)


class _Forward:
    """Per-call forward intermediates reused by the backward pass."""

    def __init__(self, means, rot, scales, colors, opac, camera, window, tau, eps_t):
        n = len(means)
        self.wx, self.wy, self.hw = _pixel_grid(camera, window)
        if n and np.any(scales <= MIN_SCALE):
            raise NumericsError("gaussian scale collapsed below 1e-12")
        self.colors, self.opac = colors, opac
        self.scales = scales
        c = np.cos(rot)[:, None]
        s = np.sin(rot)[:, None]
        ex = self.wx[None, :] - means[:, 0:1]
        ey = self.wy[None, :] - means[:, 1:2]
        u = c * ex + s * ey
        v = -s * ex + c * ey
        inv1 = 1.0 / (scales[:, 0:1] ** 2)
        inv2 = 1.0 / (scales[:, 1:2] ** 2)
        q = u * u * inv1 + v * v * inv2
        g = np.exp(-0.5 * q)
        sigma = opac[:, None] * g
        inc = sigma >= tau
        sig_eff = np.where(inc, sigma, 0.0)
        om = 1.0 - sig_eff
        trans = np.empty_like(om)
        if n:
            trans[0] = 1.0
            np.cumprod(om[:-1], axis=0, out=trans[1:])
        live = trans >= eps_t
        used = inc & live
        wgt = np.where(used, sig_eff * trans, 0.0)
        self.c, self.s, self.u, self.v = c, s, u, v
        self.inv1, self.inv2 = inv1, inv2
        self.g, self.om, self.trans, self.used, self.wgt = g, om, trans, used, wgt
        self.image = (wgt.T @ colors).reshape(self.hw + (3,))

    def backward(self, grad_image):
        dcol = np.asarray(grad_image, dtype=np.float64).reshape(-1, 3)
        if dcol.shape[0] != self.wgt.shape[1]:
            raise ShapeError("image gradient does not match rendered window")
        n = self.wgt.shape[0]
        if n == 0:
            z = np.zeros
            return z((0, 2)), z(0), z((0, 2)), z((0, 3)), z(0)
        g_colors = self.wgt @ dcol
        cg = self.colors @ dcol.T                      # dL/dw per (splat, pixel)
        contrib = cg * self.wgt
        suffix = np.cumsum(contrib[::-1], axis=0)[::-1] - contrib   # later terms only
        d_sigma = np.where(self.used, cg * self.trans - suffix / self.om, 0.0)
        g_opac = np.sum(d_sigma * self.g, axis=1)
        dq = -0.5 * self.g * (d_sigma * self.opac[:, None])
        du = dq * 2.0 * self.u * self.inv1
        dv = dq * 2.0 * self.v * self.inv2
        s1 = self.scales[:, 0:1]
        s2 = self.scales[:, 1:2]
        g_s1 = np.sum(dq * (-2.0) * self.u * self.u * self.inv1 / s1, axis=1)
        g_s2 = np.sum(dq * (-2.0) * self.v * self.v * self.inv2 / s2, axis=1)
        g_rot = np.sum(du * self.v - dv * self.u, axis=1)
        dex = du * self.c - dv * self.s
        dey = du * self.s + dv * self.c
        g_means = -np.stack([dex.sum(axis=1), dey.sum(axis=1)], axis=1)
        return g_means, g_rot, np.stack([g_s1, g_s2], axis=1), g_colors, g_opac


def _validated_values(splats: SplatBatch):
    vals = [dc.value(f) for f in splats.fields()]
    n = len(splats.keys)
    expect = [(n, 2), (n,), (n, 2), (n, 3), (n,)]
    for v, shp, name in zip(vals, expect, ("means", "rotations", "scales", "colors", "opacities")):
        if v.shape != shp:
            raise ShapeError(f"{name} has shape {v.shape}, expected {shp}")
        if not np.isfinite(v).all():
            raise NumericsError(f"non-finite splat {name}")
    return vals


def composite(splats: SplatBatch, camera: Camera, window=None, *,
              tau: float = TAU_OPACITY, eps_t: float = EPS_TRANSMITTANCE):
    """Front-to-back alpha compositing over a black background.

    Terms with ``alpha * G < tau`` are skipped; a pixel stops accumulating once
    the transmittance in front of a splat drops below ``eps_t``. ``window`` is
    an optional half-open pixel box ``(x0, x1, y0, y1)``. Returns ``(h, w, 3)``.
    """
    check_sorted(splats.keys)
    vals = _validated_values(splats)
    fwd = _Forward(*vals, camera, window, tau, eps_t)
    return dc.custom("composite", fwd.image, splats.fields(), fwd.backward)


def composite_backward(splats: SplatBatch, camera: Camera, grad_image, window=None, *,
                       tau: float = TAU_OPACITY, eps_t: float = EPS_TRANSMITTANCE) -> dict:
    """Analytic gradients of ``sum(grad_image * composite(...))`` per splat attribute."""
    check_sorted(splats.keys)
    fwd = _Forward(*_validated_values(splats), camera, window, tau, eps_t)
    names = ("means", "rotations", "scales", "colors", "opacities")
    return dict(zip(names, fwd.backward(grad_image)))
