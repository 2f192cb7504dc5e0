"""Finite-difference checks of the differentiable pipeline.

``pipeline_gradcheck`` differentiates decode -> composite -> (L1 + SSIM) loss
on a tiny scene with respect to every decoder weight, anchor feature and
offset. ``primitive_gradchecks`` covers the individual tape ops.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .decoder import PARAM_NAMES, DecoderParams
from .geometry import Camera
from .metrics import l1_loss, ssim
from .orchestrator import build_splats
from .renderer import composite
from .scene import AnchorSet, FEATURE_DIM

PIPELINE_EPS = 1e-5
PIPELINE_TOL = 1e-4
PIPELINE_MAX_TOL = 1e-3
PIPELINE_MIN_FRAC = 0.99


@dataclass
class PipelineProblem:
    decoder: DecoderParams
    anchors: AnchorSet
    camera: Camera
    target: np.ndarray
    lambda_ssim: float = 0.2
    diagonal: float = float(np.sqrt(2.0))

    def point(self) -> dict[str, np.ndarray]:
        p = {"dec." + n: a.copy() for n, a in self.decoder.arrays().items()}
        p["feat"] = self.anchors.features.copy()
        p["offs"] = self.anchors.offsets.copy()
        return p

    def loss(self, p):
        dec = DecoderParams(*(p["dec." + n] for n in PARAM_NAMES))
        idx = np.arange(len(self.anchors))
        splats, _ = build_splats(dec, p["feat"], p["offs"], self.anchors, idx, 0, self.camera, self.diagonal)
        img = composite(splats, self.camera)
        return dc.add(l1_loss(img, self.target), dc.scale(dc.sub(1.0, ssim(img, self.target)), self.lambda_ssim))


def pipeline_problem(seed: int = 0, n_anchors: int = 4, k_g: int = 2, size: int = 16,
                     hidden: int = 64) -> PipelineProblem:
    """Anchors spread over a small viewport with large, clearly visible splats.

    The target image is random so the L1 residual never sits at a kink.
    """
    rng = np.random.default_rng(seed)
    cam = Camera(0, (0.5, 0.5), 0.1, size, size)
    pos = 0.5 + rng.uniform(-0.06, 0.06, size=(n_anchors, 2))
    anchors = AnchorSet(np.arange(n_anchors), pos, rng.normal(0, 0.3, size=(n_anchors, FEATURE_DIM)),
                        rng.uniform(-0.5, 0.5, size=(n_anchors, k_g, 2)), np.full(n_anchors, 0.05))
    dec = DecoderParams.init(rng, k_g, hidden)
    target = rng.uniform(0.0, 1.0, size=(size, size, 3))
    return PipelineProblem(dec, anchors, cam, target)


def pipeline_gradcheck(seed: int = 0) -> tuple[dc.GradCheckReport, float]:
    """Returns the report and the wall time in seconds."""
    prob = pipeline_problem(seed)
    t0 = time.perf_counter()
    rep = dc.grad_check(prob.loss, prob.point(), eps=PIPELINE_EPS, tol=PIPELINE_TOL,
                        max_tol=PIPELINE_MAX_TOL, min_frac=PIPELINE_MIN_FRAC)
    return rep, time.perf_counter() - t0


def _primitive_cases(rng):
    x = rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    w = rng.normal(size=(4, 2))
    idx = np.array([0, 2, 2, 1])
    return {
        "add/mul": (lambda p: dc.sum(dc.mul(dc.add(p["x"], 1.5), p["x"])), {"x": x}),
        "sub/div": (lambda p: dc.sum(dc.div(dc.sub(p["x"], 0.3), p["y"])), {"x": x, "y": pos}),
        "matmul": (lambda p: dc.sum(dc.square(dc.matmul(p["x"], p["w"]))), {"x": x, "w": w}),
        "sigmoid": (lambda p: dc.sum(dc.sigmoid(p["x"])), {"x": x}),
        "softplus": (lambda p: dc.sum(dc.softplus(p["x"])), {"x": x}),
        "exp/log": (lambda p: dc.sum(dc.log(dc.add(dc.exp(p["x"]), p["y"]))), {"x": x, "y": pos}),
        "relu": (lambda p: dc.sum(dc.mul(dc.relu(p["x"]), p["x"])), {"x": x}),
        "abs": (lambda p: dc.mean(dc.abs(p["x"])), {"x": x}),
        "mean/axis": (lambda p: dc.sum(dc.square(dc.mean(p["x"], axis=0))), {"x": x}),
        "take": (lambda p: dc.sum(dc.square(dc.take(p["x"], idx[:3]))), {"x": x}),
        "concat/reshape": (lambda p: dc.sum(dc.square(dc.reshape(dc.concat([p["x"], p["y"]], axis=1), (6, 4)))),
                           {"x": x, "y": pos}),
    }


def primitive_gradchecks(seed: int = 0) -> dict[str, dc.GradCheckReport]:
    rng = np.random.default_rng(seed)
    return {name: dc.grad_check(f, pt, eps=1e-6, tol=1e-6) for name, (f, pt) in _primitive_cases(rng).items()}


@dataclass
class SuiteResult:
    pipeline: dc.GradCheckReport
    pipeline_seconds: float
    primitives: dict[str, dc.GradCheckReport]

    @property
    def passed(self) -> bool:
        return self.pipeline.passed and all(r.passed for r in self.primitives.values())


def run_suite(seed: int = 0) -> SuiteResult:
    rep, secs = pipeline_gradcheck(seed)
    return SuiteResult(rep, secs, primitive_gradchecks(seed))
