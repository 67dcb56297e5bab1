"""Numpy implementations of the hot kernels.

This is the portable fallback; `hdrf.kernels._native` implements the same
interface with fused compiled loops. Both backends follow the same operation
order so results agree to the last few ulps.

Activation codes: 0 linear, 1 relu, 2 sigmoid, 3 softplus.
"""

import numpy as np
from scipy.special import expit

from ..errors import NumericError

ACT_LINEAR = 0
ACT_RELU = 1
ACT_SIGMOID = 2
ACT_SOFTPLUS = 3


def _check_finite(arr: np.ndarray, what: str) -> None:
    # Single reduction pass: any NaN/Inf in arr makes the sum non-finite.
    if not np.isfinite(np.sum(arr)):
        raise NumericError(f"non-finite values in {what}")


def _matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # rank-1 "matmul" (scalar input feature) is a broadcast, which BLAS
    # outer-product dispatch handles poorly
    if x.shape[1] == 1:
        return x * w[0]
    return x @ w


def _matmul_dx(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    if w.shape[0] == 1:
        return (g * w[0]).sum(axis=1, keepdims=True)
    return g @ w.T


def _matmul_dw(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    if x.shape[1] == 1:
        return (x * g).sum(axis=0, keepdims=True)
    return x.T @ g


def _apply_act(y: np.ndarray, act: int) -> None:
    if act == ACT_LINEAR:
        return
    if act == ACT_RELU:
        np.maximum(y, 0.0, out=y)
    elif act == ACT_SIGMOID:
        expit(y, out=y)
    elif act == ACT_SOFTPLUS:
        np.logaddexp(y, 0.0, out=y)
    else:
        raise ValueError(f"unknown activation code {act}")


def _act_grad(y: np.ndarray, dy: np.ndarray, act: int) -> np.ndarray:
    """d(loss)/d(pre-activation) from the activation *output* y and dy."""
    if act == ACT_LINEAR:
        return dy
    if act == ACT_RELU:
        return dy * (y > 0.0)
    if act == ACT_SIGMOID:
        return dy * y * (1.0 - y)
    if act == ACT_SOFTPLUS:
        # y = softplus(x) >= 0, and softplus'(x) = sigmoid(x) = 1 - exp(-y)
        return dy * (1.0 - np.exp(-y))
    raise ValueError(f"unknown activation code {act}")


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, act: int) -> np.ndarray:
    y = _matmul(x, w)
    y += b
    _apply_act(y, act)
    # relu output is probed downstream (a non-finite pre-activation implies
    # non-finite parameters, which the stage's other heads also see)
    if act != ACT_RELU:
        _check_finite(y, "dense layer output")
    return y


def dense_backward(x, w, y, dy, act, need_dx=True):
    g = _act_grad(y, dy, act)
    db = g.sum(axis=0)
    dx = _matmul_dx(g, w) if need_dx else None
    dw = _matmul_dw(x, g)
    return dx, dw, db


def dense2_forward(x1, x2, w1, w2, b, act):
    """Dense layer over two concatenated inputs without materializing the concat."""
    y = _matmul(x1, w1)
    y += _matmul(x2, w2)
    y += b
    _apply_act(y, act)
    if act != ACT_RELU:
        _check_finite(y, "dense layer output")
    return y


def dense2_backward(x1, x2, w1, w2, y, dy, act):
    """Gradient of dense2; the second input is treated as constant (no dx2)."""
    g = _act_grad(y, dy, act)
    db = g.sum(axis=0)
    dx1 = _matmul_dx(g, w1)
    dw1 = _matmul_dw(x1, g)
    dw2 = _matmul_dw(x2, g)
    return dx1, dw1, dw2, db


def composite_forward(sigma, values, deltas):
    """Quadrature weights and accumulated value along each ray.

    sigma, deltas: [R, S]; values: [R, S, C]. Returns (out [R, C],
    weights [R, S], trans [R, S], tlast [R]) where trans[i] is the
    transmittance *before* absorbing sample i and tlast is the leftover.
    """
    od = sigma * deltas
    alpha = -np.expm1(-od)
    acc = np.cumsum(od, axis=1)
    trans = np.empty_like(od)
    trans[:, 0] = 1.0
    np.exp(-acc[:, :-1], out=trans[:, 1:])
    tlast = np.exp(-acc[:, -1])
    weights = trans * alpha
    out = np.einsum("rs,rsc->rc", weights, values)
    _check_finite(out, "composited output")
    return out, weights, trans, tlast


def composite_backward(values, deltas, weights, trans, tlast, d_out):
    """Gradients of the composited value w.r.t. sigma and per-sample values."""
    g = np.einsum("rc,rsc->rs", d_out, values)
    d_values = weights[:, :, None] * d_out[:, None, :]
    wg = weights * g
    # suffix[i] = sum over samples strictly after i of w*g
    suffix = np.cumsum(wg[:, ::-1], axis=1)[:, ::-1] - wg
    t_next = np.empty_like(trans)
    t_next[:, :-1] = trans[:, 1:]
    t_next[:, -1] = tlast
    d_sigma = deltas * (t_next * g - suffix)
    return d_sigma, d_values


def posenc(x: np.ndarray, levels: int, include_input: bool) -> np.ndarray:
    """Sin/cos frequency bank per input component.

    Output layout per component p: [p (if include_input), sin(pi p), cos(pi p),
    sin(2 pi p), cos(2 pi p), ...]; frequencies double per level. Doubled
    angles use the recurrence sin(2a) = 2 sin a cos a, cos(2a) = cos^2 - sin^2,
    clipped to [-1, 1] each level to absorb rounding drift.
    """
    m, d = x.shape
    width = 2 * levels + (1 if include_input else 0)
    out = np.empty((m, d * width), dtype=np.float64)
    offset = 0
    if include_input:
        out[:, 0::width] = x
        offset = 1
    s = np.sin(np.pi * x)
    c = np.cos(np.pi * x)
    for level in range(levels):
        np.clip(s, -1.0, 1.0, out=s)
        np.clip(c, -1.0, 1.0, out=c)
        out[:, offset + 2 * level :: width] = s
        out[:, offset + 2 * level + 1 :: width] = c
        if level + 1 < levels:
            s, c = 2.0 * s * c, c * c - s * s
    return out
