"""Two-layer MLP Gaussian decoder, its momentum teacher, and the consistency loss."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ContractError, NumericsError, ShapeError
from .geometry import Camera
from .scene import FEATURE_DIM, view_directions

INPUT_DIM = FEATURE_DIM + 3
HEAD_WIDTH = 7  # rgb, opacity, rotation, 2 scales
PARAM_NAMES = ("w1", "b1", "w2", "b2")

_BLOB_MAGIC = b"FSDECODR"
_BLOB_VERSION = 1
_BLOB_HEADER = struct.Struct("<8sIII")


@dataclass
class DecoderParams:
    """Weights of one decoder; fields hold arrays, or Tensors while recording."""

    w1: object
    b1: object
    w2: object
    b2: object

    @classmethod
    def init(cls, rng: np.random.Generator, k_g: int, hidden: int = 64) -> "DecoderParams":
        out = k_g * HEAD_WIDTH
        w1 = rng.normal(0.0, np.sqrt(2.0 / INPUT_DIM), size=(INPUT_DIM, hidden))
        w2 = rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, out))
        return cls(w1, np.zeros(hidden), w2, np.zeros(out))

    @classmethod
    def zeros(cls, k_g: int, hidden: int = 64) -> "DecoderParams":
        out = k_g * HEAD_WIDTH
        return cls(np.zeros((INPUT_DIM, hidden)), np.zeros(hidden), np.zeros((hidden, out)), np.zeros(out))

    @property
    def k_g(self) -> int:
        return dc.value(self.b2).shape[0] // HEAD_WIDTH

    @property
    def hidden(self) -> int:
        return dc.value(self.b1).shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: dc.value(getattr(self, n)) for n in PARAM_NAMES}

    def copy(self) -> "DecoderParams":
        return DecoderParams(*(np.array(dc.value(getattr(self, n)), dtype=np.float64) for n in PARAM_NAMES))

    def on_tape(self, tape: dc.Tape, prefix: str = "dec.") -> "DecoderParams":
        return DecoderParams(*(tape.param(prefix + n, dc.value(getattr(self, n))) for n in PARAM_NAMES))


@dataclass
class DecoderInput:
    feature: np.ndarray
    distance: float
    direction: np.ndarray

    def __post_init__(self):
        if np.shape(self.feature) != (FEATURE_DIM,):
            raise ShapeError(f"feature must have length {FEATURE_DIM}")
        if abs(float(np.linalg.norm(self.direction)) - 1.0) > 1e-9:
            raise ContractError("direction must be a unit vector")

    def vector(self) -> np.ndarray:
        return np.concatenate([self.feature, [self.distance], self.direction])


@dataclass
class GaussianAttributes:
    """Activated decoder outputs for N anchors x k_g slots."""

    color: object      # (N, k, 3) in [0, 1]
    opacity: object    # (N, k) in (0, 1)
    rotation: object   # (N, k) radians
    scale: object      # (N, k, 2) positive, world units

    def flat(self):
        """All attributes concatenated per anchor, shape (N, 7k)."""
        n = dc.value(self.opacity).shape[0]
        parts = [dc.reshape(self.color, (n, -1)), dc.reshape(self.opacity, (n, -1)),
                 dc.reshape(self.rotation, (n, -1)), dc.reshape(self.scale, (n, -1))]
        return dc.concat(parts, axis=1)


@dataclass
class DecoderPair:
    student: DecoderParams
    teacher: DecoderParams
    momentum: float = 0.9

    @classmethod
    def from_student(cls, student: DecoderParams, momentum: float = 0.9) -> "DecoderPair":
        return cls(student, student.copy(), momentum)


def geometry_inputs(positions, camera: Camera, diagonal: float) -> np.ndarray:
    """Normalised distance and unit direction columns, shape (N, 3)."""
    unit, dist = view_directions(positions, camera)
    return np.concatenate([(dist / diagonal)[:, None], unit], axis=1)


def decoder_input_matrix(features, positions, camera: Camera, diagonal: float):
    """``[feature | distance | direction]`` rows; differentiable in ``features``."""
    return dc.concat([features, geometry_inputs(positions, camera, diagonal)], axis=1)


def decode(params: DecoderParams, inputs, base_radius) -> GaussianAttributes:
    """Map (N, 35) decoder inputs to activated Gaussian attributes.

    ``base_radius`` (scalar or (N,)) scales the softplus scale head into
    world units.
    """
    if isinstance(inputs, DecoderInput):
        inputs = inputs.vector()[None, :]
    x = inputs if isinstance(inputs, dc.Tensor) else np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != INPUT_DIM:
        raise ShapeError(f"decoder input must be (N, {INPUT_DIM}), got {x.shape}")
    n = x.shape[0]
    k = params.k_g
    hid = dc.relu(dc.add(dc.matmul(x, params.w1), params.b1))
    raw = dc.reshape(dc.add(dc.matmul(hid, params.w2), params.b2), (n, k, HEAD_WIDTH))
    if not np.isfinite(dc.value(raw)).all():
        raise NumericsError("decoder produced non-finite output")
    radius = np.broadcast_to(np.asarray(base_radius, dtype=np.float64), (n,)).reshape(n, 1, 1)
    color = dc.sigmoid(raw[:, :, 0:3])
    opacity = dc.sigmoid(raw[:, :, 3])
    rotation = raw[:, :, 4]
    scale = dc.mul(dc.softplus(raw[:, :, 5:7]), radius)
    return GaussianAttributes(color, opacity, rotation, scale)


def momentum_update(pair: DecoderPair) -> DecoderParams:
    """Teacher <- m * teacher + (1 - m) * student, elementwise, in place."""
    m = pair.momentum
    if not 0.0 <= m < 1.0:
        raise ContractError(f"momentum must lie in [0, 1), got {m}")
    for name in PARAM_NAMES:
        t = getattr(pair.teacher, name)
        s = dc.value(getattr(pair.student, name))
        if t.shape != s.shape:
            raise ShapeError(f"teacher/student shape mismatch for {name}")
        t[...] = m * t + (1.0 - m) * s
    return pair.teacher


def attribute_mse(student_flat, teacher_flat):
    """Mean squared difference; ``teacher_flat`` is treated as a constant."""
    t = dc.value(teacher_flat)
    if dc.value(student_flat).size == 0:
        raise ContractError("consistency loss needs a non-empty batch")
    if dc.value(student_flat).shape != t.shape:
        raise ShapeError("student/teacher attribute shapes differ")
    return dc.mean(dc.square(dc.sub(student_flat, t)))


def consistency_from_attributes(student: GaussianAttributes, teacher: GaussianAttributes):
    """Mean squared difference of flattened attributes; the teacher side is a constant."""
    return attribute_mse(student.flat(), teacher.flat())


def consistency_loss(pair: DecoderPair, inputs, base_radius, student: DecoderParams | None = None):
    """MSE between teacher and student decodings of the same inputs.

    Pass ``student`` (e.g. tape-bound params) to differentiate; gradients only
    ever reach the student because the teacher is decoded from plain arrays.
    """
    if isinstance(inputs, (list, tuple)):
        if not inputs:
            raise ContractError("consistency loss needs a non-empty batch")
        inputs = np.stack([i.vector() for i in inputs])
    if dc.value(inputs).shape[0] == 0:
        raise ContractError("consistency loss needs a non-empty batch")
    student = pair.student if student is None else student
    s_attr = decode(student, inputs, base_radius)
    t_attr = decode(pair.teacher.copy(), dc.value(inputs), base_radius)
    return consistency_from_attributes(s_attr, t_attr)


def frustum_filter(positions, camera: Camera, margin: float = 0.5) -> np.ndarray:
    """Indices of anchors inside the viewport inflated by ``margin * half_extent``."""
    if margin < 0:
        raise ContractError("margin must be >= 0")
    p = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    lim = camera.half_extent * (1.0 + margin)
    cx, cy = camera.center
    keep = (np.abs(p[:, 0] - cx) <= lim) & (np.abs(p[:, 1] - cy) <= lim)
    return np.flatnonzero(keep)


# ---------------------------------------------------------------------------
# binary checkpoint blob


def pack_decoder(params: DecoderParams) -> bytes:
    arrs = params.arrays()
    head = _BLOB_HEADER.pack(_BLOB_MAGIC, _BLOB_VERSION, params.k_g, params.hidden)
    return head + b"".join(np.ascontiguousarray(arrs[n], dtype="<f8").tobytes() for n in PARAM_NAMES)


def unpack_decoder(buf: bytes, offset: int = 0) -> tuple[DecoderParams, int]:
    magic, version, k_g, hidden = _BLOB_HEADER.unpack_from(buf, offset)
    if magic != _BLOB_MAGIC:
        raise ContractError("not a decoder blob")
    if version != _BLOB_VERSION:
        raise ContractError(f"unsupported decoder blob version {version}")
    pos = offset + _BLOB_HEADER.size
    shapes = [(INPUT_DIM, hidden), (hidden,), (hidden, k_g * HEAD_WIDTH), (k_g * HEAD_WIDTH,)]
    arrs = []
    for shp in shapes:
        n = int(np.prod(shp))
        arrs.append(np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shp))
        pos += 8 * n
    return DecoderParams(*arrs), pos


def pack_decoder_pair(pair: DecoderPair) -> bytes:
    return pack_decoder(pair.student) + pack_decoder(pair.teacher)


def unpack_decoder_pair(buf: bytes, momentum: float = 0.9) -> DecoderPair:
    student, pos = unpack_decoder(buf)
    teacher, _ = unpack_decoder(buf, pos)
    return DecoderPair(student, teacher, momentum)
