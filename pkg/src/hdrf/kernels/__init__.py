"""Hot-kernel backend selection.

Two interchangeable backends implement the kernel interface (dense layer
forward/backward, dense-over-two-inputs variants, compositing forward/
backward, positional encoding): a pure numpy fallback and a compiled one
whose fused elementwise passes and per-ray scans skip numpy's temporaries.
Matrix products go through numpy's BLAS in both. The compiled backend is
used when importable; set HDRF_BACKEND=native|python|auto to force a choice.

HDRF_THREADS caps the compiled kernels' OpenMP threads; unset, they run
single-threaded and leave the cores to BLAS (the kernels are memory-bound,
so oversubscribing BLAS's spinning workers costs more than it buys).
`python -m hdrf.bench` compares the backends.
"""

import math
import os

import numpy as np

from ..errors import InputError, NumericError
from ._python import ACT_LINEAR, ACT_RELU, ACT_SIGMOID, ACT_SOFTPLUS
from . import _python

__all__ = [
    "ACT_LINEAR",
    "ACT_RELU",
    "ACT_SIGMOID",
    "ACT_SOFTPLUS",
    "backend",
    "backends",
    "dense_forward",
    "dense_backward",
    "dense2_forward",
    "dense2_backward",
    "composite_forward",
    "composite_backward",
    "posenc",
]

_requested = os.environ.get("HDRF_BACKEND", "auto").strip().lower() or "auto"
if _requested not in {"auto", "native", "python"}:
    raise InputError(f"HDRF_BACKEND must be auto, native or python, got {_requested!r}")

_native = None
if _requested in ("auto", "native"):
    try:
        import importlib

        _native = importlib.import_module(__name__ + "._native")
    except ImportError:
        if _requested == "native":
            raise


def _omp_threads() -> int:
    raw = os.environ.get("HDRF_THREADS", "").strip()
    if raw:
        try:
            n = int(raw)
        except ValueError as exc:
            raise InputError(f"HDRF_THREADS must be a positive integer, got {raw!r}") from exc
        if n < 1:
            raise InputError(f"HDRF_THREADS must be >= 1, got {n}")
        return n
    return 1


def _c(arr) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=np.float64)


def _make_native_ops(native):
    from ._python import _matmul, _matmul_dw, _matmul_dx

    def _finish(y, b, act):
        total = native.bias_act(y, _c(b), act, _omp_threads())
        if total is None:
            # linear keeps a probe (unbounded output); relu is probed downstream
            if act == ACT_RELU:
                return y
            total = np.sum(y)
        if not math.isfinite(total):
            raise NumericError("non-finite values in dense layer output")
        return y

    def dense_forward(x, w, b, act):
        return _finish(_matmul(_c(x), _c(w)), b, act)

    def dense_backward(x, w, y, dy, act, need_dx=True):
        g = native.act_grad(_c(y), _c(dy), act, _omp_threads())
        db = g.sum(axis=0)
        dx = _matmul_dx(g, w) if need_dx else None
        dw = _matmul_dw(_c(x), g)
        return dx, dw, db

    def dense2_forward(x1, x2, w1, w2, b, act):
        y = _matmul(_c(x1), _c(w1))
        y += _matmul(_c(x2), _c(w2))
        return _finish(y, b, act)

    def dense2_backward(x1, x2, w1, w2, y, dy, act):
        g = native.act_grad(_c(y), _c(dy), act, _omp_threads())
        db = g.sum(axis=0)
        dx1 = _matmul_dx(g, w1)
        dw1 = _matmul_dw(_c(x1), g)
        dw2 = _matmul_dw(_c(x2), g)
        return dx1, dw1, dw2, db

    def composite_forward(sigma, values, deltas):
        return native.composite_forward(_c(sigma), _c(values), _c(deltas), _omp_threads())

    def composite_backward(values, deltas, weights, trans, tlast, d_out):
        return native.composite_backward(
            _c(values), _c(deltas), _c(weights), _c(trans), _c(tlast), _c(d_out), _omp_threads()
        )

    def posenc(x, levels, include_input):
        return native.posenc(_c(x), levels, bool(include_input), _omp_threads())

    return {
        "dense_forward": dense_forward,
        "dense_backward": dense_backward,
        "dense2_forward": dense2_forward,
        "dense2_backward": dense2_backward,
        "composite_forward": composite_forward,
        "composite_backward": composite_backward,
        "posenc": posenc,
    }


_PYTHON_OPS = {
    "dense_forward": _python.dense_forward,
    "dense_backward": _python.dense_backward,
    "dense2_forward": _python.dense2_forward,
    "dense2_backward": _python.dense2_backward,
    "composite_forward": _python.composite_forward,
    "composite_backward": _python.composite_backward,
    "posenc": _python.posenc,
}

_NATIVE_OPS = _make_native_ops(_native) if _native is not None else None
_BACKEND_NAME = "native" if _NATIVE_OPS is not None else "python"
_OPS = _NATIVE_OPS if _NATIVE_OPS is not None else _PYTHON_OPS


def backend() -> str:
    """Name of the selected backend ("native" or "python")."""
    return _BACKEND_NAME


def backends() -> dict:
    """All available backends, keyed by name (for the benchmark and tests)."""
    out = {"python": _PYTHON_OPS}
    if _NATIVE_OPS is not None:
        out["native"] = _NATIVE_OPS
    return out


dense_forward = _OPS["dense_forward"]
dense_backward = _OPS["dense_backward"]
dense2_forward = _OPS["dense2_forward"]
dense2_backward = _OPS["dense2_backward"]
composite_forward = _OPS["composite_forward"]
composite_backward = _OPS["composite_backward"]
posenc = _OPS["posenc"]
