"""Small reverse-mode autodiff engine over float64 numpy arrays.

Every op accepts either plain arrays or :class:`Tensor` values. When none of
the inputs is a Tensor the op evaluates eagerly and returns an ndarray, so the
same model code serves both the recorded (training) path and the fast
forward-only path used by finite differences and evaluation.

    tape = Tape()
    w = tape.param("w", [1.0, 2.0])
    loss = dc.sum(dc.square(w))
    tape.backward(loss)["w"]      # -> array([2., 4.])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ContractError, NumericsError, ShapeError

__all__ = [
    "Tensor", "Tape", "AdamState", "GradCheckReport",
    "add", "sub", "mul", "div", "neg", "matmul", "relu", "sigmoid", "softplus",
    "exp", "log", "abs", "square", "sum", "mean", "concat", "take", "scale",
    "reshape", "transpose", "custom", "forward_op", "value", "adam_step",
    "grad_check",
]


class Tensor:
    """A value recorded on a :class:`Tape`."""

    __array_ufunc__ = None  # keep numpy from swallowing Tensor operands

    __slots__ = ("data", "tape", "index")

    def __init__(self, data: np.ndarray, tape: "Tape", index: int):
        self.data = data
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, index={self.index})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


@dataclass
class _Node:
    inputs: tuple
    vjp: Callable | None


class Tape:
    """Ordered record of primitive ops plus a registry of parameter slots."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.slots: dict[str, Tensor] = {}

    def param(self, name: str, value) -> Tensor:
        """Register a parameter slot; gradients are reported under ``name``."""
        if name in self.slots:
            raise ContractError(f"slot {name!r} already registered")
        arr = np.array(value, dtype=np.float64)
        _check_finite(arr, f"param {name}")
        t = self._push(arr, (), None)
        self.slots[name] = t
        return t

    def _push(self, data, inputs, vjp) -> Tensor:
        t = Tensor(data, self, len(self.nodes))
        self.nodes.append(_Node(inputs, vjp))
        return t

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` for every registered slot.

        Slots that the loss does not depend on receive exact zeros.
        """
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ContractError("loss is not recorded on this tape")
        if loss.data.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        grads: list = [None] * len(self.nodes)
        grads[loss.index] = np.ones_like(loss.data)
        for i in range(loss.index, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if inp is None or gi is None:
                    continue
                j = inp.index
                grads[j] = gi if grads[j] is None else grads[j] + gi
            grads[i] = None
        out = {}
        for name, t in self.slots.items():
            g = grads[t.index]
            out[name] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64)
        return out


# ---------------------------------------------------------------------------
# helpers


def value(x) -> np.ndarray:
    """Underlying float64 array of a Tensor or array-like."""
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _check_finite(arr, what):
    if isinstance(arr, Tensor):
        return  # validated when it was produced
    if not np.isfinite(arr).all():
        raise NumericsError(f"non-finite input to {what}")


def _tape_of(inputs) -> Tape | None:
    tape = None
    for x in inputs:
        if isinstance(x, Tensor):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ContractError("operands recorded on different tapes")
    return tape


def _emit(name, out, inputs, vjp):
    _check_finite(out, f"{name} output")
    tape = _tape_of(inputs)
    if tape is None:
        return out
    recorded = tuple(x if isinstance(x, Tensor) else None for x in inputs)
    return tape._push(out, recorded, vjp)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary_values(name, a, b):
    av, bv = value(a), value(b)
    _check_finite(av, name)
    _check_finite(bv, name)
    try:
        out_shape = np.broadcast_shapes(av.shape, bv.shape)
    except ValueError as exc:
        raise ShapeError(f"{name}: cannot combine shapes {av.shape} and {bv.shape}") from exc
    return av, bv, out_shape


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b):
    av, bv, _ = _binary_values("add", a, b)
    out = av + bv
    return _emit("add", out, (a, b),
                 lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv, _ = _binary_values("sub", a, b)
    out = av - bv
    return _emit("sub", out, (a, b),
                 lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv, _ = _binary_values("mul", a, b)
    out = av * bv
    return _emit("mul", out, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    av, bv, _ = _binary_values("div", a, b)
    out = av / bv
    _check_finite(out, "div output")
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * out / bv, bv.shape)))


def neg(x):
    xv = value(x)
    _check_finite(xv, "neg")
    return _emit("neg", -xv, (x,), lambda g: (-g,))


def scale(x, c: float):
    """Multiply by a Python scalar constant."""
    xv = value(x)
    _check_finite(xv, "scale")
    c = float(c)
    return _emit("scale", xv * c, (x,), lambda g: (g * c,))


def matmul(a, b):
    av, bv = value(a), value(b)
    _check_finite(av, "matmul")
    _check_finite(bv, "matmul")
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} @ {bv.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = av @ bv
    return _emit("matmul", out, (a, b), lambda g: (g @ bv.T, av.T @ g))


def relu(x):
    xv = value(x)
    _check_finite(xv, "relu")
    mask = xv > 0.0  # subgradient at 0 is 0
    return _emit("relu", np.where(mask, xv, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(xv):
    # tanh form is exact at 0 and stable at both tails
    return 0.5 * (1.0 + np.tanh(0.5 * xv))


def sigmoid(x):
    xv = value(x)
    _check_finite(xv, "sigmoid")
    out = _sigmoid(xv)
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x):
    xv = value(x)
    _check_finite(xv, "softplus")
    out = np.logaddexp(0.0, xv)
    return _emit("softplus", out, (x,), lambda g: (g * _sigmoid(xv),))


def exp(x):
    xv = value(x)
    _check_finite(xv, "exp")
    with np.errstate(over="ignore"):
        out = np.exp(xv)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log(x):
    xv = value(x)
    _check_finite(xv, "log")
    if np.any(xv <= 0.0):
        raise NumericsError("log of non-positive value")
    return _emit("log", np.log(xv), (x,), lambda g: (g / xv,))


def abs(x):  # noqa: A001 - mirrors numpy naming
    xv = value(x)
    _check_finite(xv, "abs")
    sgn = np.sign(xv)
    return _emit("abs", np.abs(xv), (x,), lambda g: (g * sgn,))


def square(x):
    xv = value(x)
    _check_finite(xv, "square")
    return _emit("square", xv * xv, (x,), lambda g: (2.0 * g * xv,))


def sum(x, axis=None, keepdims=False):  # noqa: A001
    xv = value(x)
    _check_finite(xv, "sum")
    out = np.sum(xv, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return _emit("sum", out, (x,), vjp)


def mean(x, axis=None, keepdims=False):
    xv = value(x)
    _check_finite(xv, "mean")
    n = xv.size if axis is None else np.prod([xv.shape[a] for a in np.atleast_1d(axis)])
    if n == 0:
        raise ShapeError("mean of empty tensor")
    out = np.mean(xv, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, xv.shape).copy(),)

    return _emit("mean", out, (x,), vjp)


def concat(xs: Sequence, axis=0):
    vals = [value(x) for x in xs]
    for v in vals:
        _check_finite(v, "concat")
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _emit("concat", out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)))


def take(x, idx):
    """Indexing / slicing; repeated fancy indices accumulate gradient."""
    xv = value(x)
    _check_finite(xv, "slice")
    try:
        out = xv[idx]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc}") from exc

    def vjp(g):
        full = np.zeros_like(xv)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("slice", np.array(out, dtype=np.float64), (x,), vjp)


def reshape(x, shape):
    xv = value(x)
    try:
        out = xv.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from exc
    return _emit("reshape", out, (x,), lambda g: (g.reshape(xv.shape),))


def transpose(x, axes=None):
    xv = value(x)
    out = np.transpose(xv, axes)
    inv = None if axes is None else np.argsort(axes)
    return _emit("transpose", out, (x,), lambda g: (np.transpose(g, inv),))


def custom(name: str, out: np.ndarray, inputs: Sequence, vjp: Callable):
    """Record a fused op whose vector-Jacobian product is supplied by the caller."""
    return _emit(name, out, tuple(inputs), vjp)


_OPS = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "matmul": matmul,
    "relu": relu, "sigmoid": sigmoid, "softplus": softplus, "exp": exp, "log": log,
    "abs": abs, "square": square, "sum": sum, "mean": mean, "scale": scale,
    "reshape": reshape, "transpose": transpose,
}


def forward_op(op: str, *inputs, **kwargs):
    """Apply a primitive by name. ``concat`` and ``slice`` take (list, axis) / (x, idx)."""
    if op == "concat":
        return concat(inputs[0] if len(inputs) == 1 else inputs, **kwargs)
    if op == "slice":
        return take(*inputs, **kwargs)
    try:
        fn = _OPS[op]
    except KeyError:
        raise ContractError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Per-slot Adam moments. ``lr`` may be one value or a per-slot mapping."""

    lr: float | Mapping[str, float]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def lr_for(self, name: str) -> float:
        if isinstance(self.lr, Mapping):
            return float(self.lr[name])
        return float(self.lr)


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Bias-corrected Adam update applied in place to ``params``."""
    for name, p in params.items():
        if np.shape(grads[name]) != p.shape:
            raise ShapeError(f"adam: grad shape {np.shape(grads[name])} != param shape {p.shape} for {name}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr_for(name) * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


# ---------------------------------------------------------------------------
# finite-difference gradient check


@dataclass
class GradCheckReport:
    max_rel_err: float
    frac_within_tol: float
    n_checked: int
    n_excluded: int
    passed: bool
    worst: tuple[str, int] | None = None
    rel_errs: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def pass_(self):
        return self.passed


def grad_check(f: Callable[[dict], object], point: Mapping[str, np.ndarray],
               eps: float = 1e-5, tol: float = 1e-6, *, max_tol: float | None = None,
               min_frac: float = 1.0, abs_floor: float = 1e-7) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` with central differences.

    ``f`` receives a dict of Tensors on the recorded pass and a dict of plain
    arrays on the finite-difference passes. Relative error per coordinate is
    ``|g - fd| / max(|g|, |fd|, abs_floor)``. Coordinates where both the tape
    gradient and the difference quotient are exactly zero (dead ReLU units)
    are excluded. The check passes when at least ``min_frac`` of the remaining
    coordinates are within ``tol`` and none exceeds ``max_tol`` (default ``tol``).
    """
    if not 0.0 < eps <= 1e-3:
        raise ContractError(f"eps must lie in (0, 1e-3], got {eps}")
    max_tol = tol if max_tol is None else max_tol
    base = {k: np.array(v, dtype=np.float64) for k, v in point.items()}

    tape = Tape()
    tensors = {k: tape.param(k, v) for k, v in base.items()}
    grads = tape.backward(f(tensors))

    rel_errs = {}
    all_errs = []
    n_excluded = 0
    worst, worst_err = None, -1.0
    for name, arr in base.items():
        errs = np.full(arr.shape, np.nan)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(value(f(base)))
            flat[i] = orig - eps
            fm = float(value(f(base)))
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            g = float(grads[name].reshape(-1)[i])
            if g == 0.0 and fd == 0.0:
                n_excluded += 1
                continue
            err = np.abs(g - fd) / max(np.abs(g), np.abs(fd), abs_floor)
            errs.reshape(-1)[i] = err
            all_errs.append(err)
            if err > worst_err:
                worst, worst_err = (name, i), err
        rel_errs[name] = errs
    all_errs = np.asarray(all_errs)
    if all_errs.size:
        max_err = float(all_errs.max())
        frac = float(np.mean(all_errs <= tol))
    else:
        max_err, frac = 0.0, 1.0
    passed = frac >= min_frac and max_err <= max_tol
    return GradCheckReport(max_err, frac, int(all_errs.size), n_excluded, passed, worst, rel_errs)
