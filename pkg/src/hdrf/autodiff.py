"""Reverse-mode automatic differentiation over dense float64 tensors.

Define-by-run: ops execute immediately on numpy arrays and, when a Tape is
active and an input requires gradients, append a backward rule to it. The
tape is rebuilt every iteration; tapes are cheap (a few dozen nodes per
training step) and this keeps the control flow trivial.

Also provides the Adam optimizer and a central-difference gradient checker.
"""

import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import (
    DeterminismError,
    DomainError,
    InputError,
    NumericError,
    ShapeError,
    TapeReuseError,
)

_STATE = threading.local()


def _stack() -> list:
    if not hasattr(_STATE, "stack"):
        _STATE.stack = []
    return _STATE.stack


def active_tape():
    """The innermost open Tape of the current thread, or None."""
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    """n-dimensional float64 array, optionally carrying a gradient slot.

    Values must be finite; NaN/Inf are rejected on construction and at op
    boundaries. Data is not copied when a float64 ndarray is passed in.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, *, _validate: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if _validate and not np.isfinite(np.sum(arr)):
            raise NumericError("non-finite values in tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of operations; context manager activates it."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _stack().pop()
        assert popped is self
        return False


def record(output: Tensor, inputs: tuple, backward_fn) -> Tensor:
    """Attach a backward rule for `output = f(inputs)` to the active tape.

    `backward_fn(d_out)` must return one gradient array (or None) per input.
    Custom ops elsewhere in the package register through this hook.
    """
    tape = active_tape()
    if tape is not None and output.requires_grad:
        tape.nodes.append(_Node(inputs, output, backward_fn))
    return output


def _check_finite(arr: np.ndarray, kind: str) -> None:
    if not np.isfinite(np.sum(arr)):
        raise NumericError(f"non-finite output of {kind}")


def _any_grad(*tensors) -> bool:
    return any(t.requires_grad for t in tensors)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape of a broadcast operand."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g if g.shape == shape else g.reshape(shape)


# ---------------------------------------------------------------------------
# primitive operations


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from exc
    _check_finite(data, "add")
    out = Tensor(data, _any_grad(a, b), _validate=False)

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from exc
    _check_finite(data, "mul")
    out = Tensor(data, _any_grad(a, b), _validate=False)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return record(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
    data = a.data @ b.data
    _check_finite(data, "matmul")
    out = Tensor(data, _any_grad(a, b), _validate=False)

    def backward(g):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return record(out, (a, b), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow becomes inf, rejected below
        data = np.exp(a.data)
    _check_finite(data, "exp")
    out = Tensor(data, a.requires_grad, _validate=False)
    return record(out, (a,), lambda g: (g * data,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value")
    data = np.log(a.data)
    _check_finite(data, "log")
    out = Tensor(data, a.requires_grad, _validate=False)
    return record(out, (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)
    out = Tensor(data, a.requires_grad, _validate=False)
    return record(out, (a,), lambda g: (g * (a.data > 0.0),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    data = np.logaddexp(a.data, 0.0)
    _check_finite(data, "softplus")
    out = Tensor(data, a.requires_grad, _validate=False)
    return record(out, (a,), lambda g: (g * expit(a.data),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = expit(a.data)
    out = Tensor(data, a.requires_grad, _validate=False)
    return record(out, (a,), lambda g: (g * data * (1.0 - data),))


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    data = np.sum(a.data)
    _check_finite(data, "sum")
    out = Tensor(data, a.requires_grad, _validate=False)
    return record(out, (a,), lambda g: (np.full(a.shape, float(g)),))


def mean_sq_err(a, b) -> Tensor:
    """Squared L2 difference summed over trailing axes, averaged over axis 0."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mean_sq_err: shapes differ ({a.shape} vs {b.shape})")
    n = a.shape[0] if a.data.ndim >= 1 else 1
    diff = a.data - b.data
    data = np.array(np.sum(diff * diff) / n)
    _check_finite(data, "mean_sq_err")
    out = Tensor(data, _any_grad(a, b), _validate=False)

    def backward(g):
        scaled = (2.0 * float(g) / n) * diff
        return (
            scaled if a.requires_grad else None,
            -scaled if b.requires_grad else None,
        )

    return record(out, (a, b), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise InputError("concat of an empty sequence")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    out = Tensor(data, _any_grad(*ts), _validate=False)
    ax = axis if axis >= 0 else data.ndim + axis
    sizes = [t.shape[ax] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[ax] = slice(lo, hi)
                grads.append(np.ascontiguousarray(g[tuple(index)]))
            else:
                grads.append(None)
        return tuple(grads)

    return record(out, tuple(ts), backward)


def broadcast(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = np.ascontiguousarray(np.broadcast_to(a.data, tuple(shape)))
    except ValueError as exc:
        raise ShapeError(f"broadcast: {a.shape} does not broadcast to {tuple(shape)}") from exc
    out = Tensor(data, a.requires_grad, _validate=False)
    return record(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: {a.shape} -> {tuple(shape)}") from exc
    out = Tensor(data, a.requires_grad, _validate=False)
    return record(out, (a,), lambda g: (g.reshape(a.shape),))


def take_column(a, j: int) -> Tensor:
    """Column j of a 2-d tensor, kept as an [n, 1] tensor."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"take_column expects a 2-d tensor, got {a.shape}")
    if not 0 <= j < a.shape[1]:
        raise InputError(f"column {j} out of range for shape {a.shape}")
    data = np.ascontiguousarray(a.data[:, j : j + 1])
    out = Tensor(data, a.requires_grad, _validate=False)

    def backward(g):
        full = np.zeros(a.shape)
        full[:, j : j + 1] = g
        return (full,)

    return record(out, (a,), backward)


_OPS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "exp": exp,
    "log": log,
    "relu": relu,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "sum": sum_all,
    "mean_sq_err": mean_sq_err,
    "concat": lambda *inputs, **kw: concat(inputs, **kw),
    "broadcast": broadcast,
}


def op_apply(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an operation by name; see _OPS for the supported kinds."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise InputError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward pass


def backward(tape: Tape, loss: Tensor, params=None) -> None:
    """Populate .grad for every requires_grad tensor reachable from `loss`.

    Gradients are overwritten, not accumulated across calls. A tape may be
    walked only once; re-running backward on it raises TapeReuseError.
    Tensors in `params` that the loss never touched receive zero gradients.
    """
    if loss.data.shape != ():
        raise ShapeError(f"loss must be a scalar, got shape {loss.data.shape}")
    if tape._consumed:
        raise TapeReuseError("backward was already run on this tape")
    tape._consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    owned: set[int] = set()  # keys whose array we allocated (safe for +=)
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        owned.discard(id(node.output))
        for t, ig in zip(node.inputs, node.backward(g)):
            if not t.requires_grad or ig is None:
                continue
            key = id(t)
            current = grads.get(key)
            if current is None:
                grads[key] = ig
            elif key in owned:
                current += ig
            else:
                # np.asarray: 0-d sums come back as immutable numpy scalars,
                # which would make the in-place += above silently rebind
                grads[key] = np.asarray(current + ig)
                owned.add(key)

    for node in tape.nodes:
        if node.output.requires_grad:
            leaves.setdefault(id(node.output), node.output)
        for t in node.inputs:
            if t.requires_grad:
                leaves.setdefault(id(t), t)
    if params is not None:
        for p in params:
            leaves.setdefault(id(p), p)
    for key, t in leaves.items():
        g = grads.get(key)
        t.grad = np.asarray(g, dtype=np.float64).reshape(t.shape) if g is not None else np.zeros(t.shape)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second moment estimates aligned with a fixed parameter list."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7

    @classmethod
    def for_params(cls, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7):
        return cls(
            m=[np.zeros(p.shape) for p in params],
            v=[np.zeros(p.shape) for p in params],
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(params, grads, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, applied to params in place."""
    if lr <= 0.0:
        raise InputError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and state must have matching lengths")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class FiniteDiffReport:
    max_rel_err: float
    rel_tol: float
    h: float
    n_coords: int
    passed: bool
    worst: tuple = field(default=())  # (param index, flat coord, analytic, numeric)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"gradient check {status}: max rel err {self.max_rel_err:.3e} "
            f"(tol {self.rel_tol:.1e}, {self.n_coords} coordinates, h={self.h:.1e})"
        )


def _scalar_eval(model_eval) -> float:
    out = model_eval()
    if isinstance(out, Tensor):
        if out.data.shape != ():
            raise ShapeError(f"model_eval must return a scalar, got shape {out.data.shape}")
        return float(out.data)
    return float(out)


def finite_diff_check(
    model_eval,
    params,
    h: float = 1e-5,
    rel_tol: float = 1e-5,
    abs_floor: float = 1e-8,
) -> FiniteDiffReport:
    """Compare analytic gradients against central differences, per coordinate.

    `model_eval` is a zero-argument callable returning the scalar loss; it must
    recompute from the live `params` tensors and be deterministic (two base
    evaluations must agree bitwise, else DeterminismError). Coordinates where
    both gradients are below `abs_floor` in magnitude count as matching.
    """
    if h <= 0.0:
        raise InputError(f"h must be positive, got {h}")
    base1 = _scalar_eval(model_eval)
    base2 = _scalar_eval(model_eval)
    if base1 != base2 or not math.isfinite(base1):
        raise DeterminismError(
            f"model_eval is not deterministic or non-finite ({base1!r} vs {base2!r})"
        )

    with Tape() as tape:
        loss = model_eval()
    if not isinstance(loss, Tensor):
        raise InputError("model_eval must return a Tensor for the analytic pass")
    backward(tape, loss, params=params)
    analytic = [p.grad.copy() for p in params]

    max_rel = 0.0
    worst = ()
    n_coords = 0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        a_flat = analytic[pi].reshape(-1)
        for ci in range(flat.size):
            n_coords += 1
            saved = flat[ci]
            flat[ci] = saved + h
            f_plus = _scalar_eval(model_eval)
            flat[ci] = saved - h
            f_minus = _scalar_eval(model_eval)
            flat[ci] = saved
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = a_flat[ci]
            denom = max(abs(a), abs(numeric))
            err = 0.0 if denom < abs_floor else abs(a - numeric) / denom
            if err > max_rel:
                max_rel = err
                worst = (pi, ci, float(a), float(numeric))
    return FiniteDiffReport(
        max_rel_err=max_rel,
        rel_tol=rel_tol,
        h=h,
        n_coords=n_coords,
        passed=max_rel <= rel_tol,
        worst=worst,
    )
