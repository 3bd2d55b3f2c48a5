"""Float64 tensor kernels with hand-written vector-Jacobian products.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Spatial data
uses the ``(H, W, C)`` layout; token data uses ``(N, D)``.

Every differentiable op is registered together with its VJP, so

    out, rec = trace("conv2d_depthwise", x, w, b, stride=2, zero_pad=1)
    grads = backward(rec, upstream)

returns a dict keyed by the op's argument names (``x``, ``w``, ``b``, ...).
"""

from __future__ import annotations

import inspect
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from scipy.special import erf

from .errors import ShapeError, ValidationError

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def _check_grid(x: np.ndarray, name: str = "x") -> None:
    if x.ndim != 3 or min(x.shape) < 1:
        raise ShapeError(f"{name} must be an (H, W, C) grid with positive extents, got {x.shape}")


# ---------------------------------------------------------------------------
# forward kernels
# ---------------------------------------------------------------------------

def conv2d_pointwise(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """1x1 convolution: ``out[h, w, :] = w @ x[h, w, :] + b``."""
    _check_grid(x)
    if w.ndim != 2 or w.shape[1] != x.shape[2] or b.shape != (w.shape[0],):
        raise ShapeError(
            f"dimension mismatch: input {x.shape} vs weight {w.shape} / bias {b.shape}"
        )
    return x @ w.T + b


def _conv_out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d_depthwise(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, zero_pad: int = 1
) -> np.ndarray:
    """Channel-separable k x k cross-correlation with zero padding."""
    _check_grid(x)
    H, W, C = x.shape
    if w.ndim != 3 or w.shape[0] != C or w.shape[1] != w.shape[2] or b.shape != (C,):
        raise ShapeError(
            f"dimension mismatch: input {x.shape} vs weight {w.shape} / bias {b.shape}"
        )
    if stride < 1 or zero_pad < 0:
        raise ValidationError(f"stride must be >= 1 and zero_pad >= 0, got {stride}, {zero_pad}")
    k = w.shape[1]
    if k > H + 2 * zero_pad or k > W + 2 * zero_pad:
        raise ShapeError(f"kernel {k}x{k} larger than padded input {x.shape} (pad {zero_pad})")
    Ho = _conv_out_extent(H, k, stride, zero_pad)
    Wo = _conv_out_extent(W, k, stride, zero_pad)
    xp = np.pad(x, ((zero_pad, zero_pad), (zero_pad, zero_pad), (0, 0)))
    out = np.zeros((Ho, Wo, C))
    # fixed (i, j) accumulation order keeps results bitwise reproducible
    for i in range(k):
        for j in range(k):
            win = xp[i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride]
            out += win * w[:, i, j]
    return out + b


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)`` with the erf-based normal CDF."""
    return x * 0.5 * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def avgpool(x: np.ndarray, rho: int) -> np.ndarray:
    """Non-overlapping ``rho x rho`` mean pooling per channel."""
    _check_grid(x)
    H, W, C = x.shape
    if rho < 1 or H % rho or W % rho:
        raise ValidationError(f"pool size {rho} must divide grid extents {H}x{W}")
    return x.reshape(H // rho, rho, W // rho, rho, C).mean(axis=(1, 3))


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or w.ndim != 2 or w.shape[1] != x.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(
            f"dimension mismatch: input {x.shape} vs weight {w.shape} / bias {b.shape}"
        )
    return x @ w.T + b


def softmax_rows(x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"softmax_rows expects (N, V) with V >= 1, got {x.shape}")
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_targets(logits: np.ndarray, targets) -> np.ndarray:
    t = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or t.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} vs targets {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= logits.shape[1]):
        raise ValidationError(f"target id out of range [0, {logits.shape[1]})")
    return t


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, targets) -> float:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax."""
    t = _check_targets(logits, targets)
    if t.size == 0:
        raise ValidationError("cross_entropy needs at least one row")
    lp = log_softmax_rows(logits)
    return float(-lp[np.arange(t.size), t].mean())


# ---------------------------------------------------------------------------
# VJPs
# ---------------------------------------------------------------------------

def _pointwise_vjp(saved, g):
    x, w = saved["x"], saved["w"]
    return {
        "x": g @ w,
        "w": np.einsum("hwo,hwi->oi", g, x),
        "b": g.sum(axis=(0, 1)),
    }


def _depthwise_vjp(saved, g):
    x, w = saved["x"], saved["w"]
    stride, pad = saved["stride"], saved["zero_pad"]
    H, W, _ = x.shape
    k = w.shape[1]
    Ho, Wo = g.shape[:2]
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for i in range(k):
        for j in range(k):
            sl = (
                slice(i, i + stride * (Ho - 1) + 1, stride),
                slice(j, j + stride * (Wo - 1) + 1, stride),
            )
            gw[:, i, j] = (g * xp[sl]).sum(axis=(0, 1))
            gxp[sl] += g * w[:, i, j]
    return {"x": gxp[pad : pad + H, pad : pad + W], "w": gw, "b": g.sum(axis=(0, 1))}


def _gelu_vjp(saved, g):
    return {"x": g * gelu_grad(saved["x"])}


def _avgpool_vjp(saved, g):
    rho = saved["rho"]
    up = np.repeat(np.repeat(g, rho, axis=0), rho, axis=1)
    return {"x": up / (rho * rho)}


def _linear_vjp(saved, g):
    x, w = saved["x"], saved["w"]
    return {"x": g @ w, "w": g.T @ x, "b": g.sum(axis=0)}


def _softmax_vjp(saved, g):
    p = saved["out"]
    return {"x": p * (g - (g * p).sum(axis=1, keepdims=True))}


def _cross_entropy_vjp(saved, g):
    logits, t = saved["logits"], saved["targets"]
    p = softmax_rows(logits)
    p[np.arange(t.size), t] -= 1.0
    return {"logits": float(g) * p / t.size}


@dataclass(frozen=True)
class _OpDef:
    forward: Callable[..., Any]
    vjp: Callable[[dict, Any], dict]
    params: tuple[str, ...] = ()


_OPS: dict[str, _OpDef] = {
    "conv2d_pointwise": _OpDef(conv2d_pointwise, _pointwise_vjp, ("w", "b")),
    "conv2d_depthwise": _OpDef(conv2d_depthwise, _depthwise_vjp, ("w", "b")),
    "gelu": _OpDef(gelu, _gelu_vjp),
    "avgpool": _OpDef(avgpool, _avgpool_vjp),
    "linear": _OpDef(linear, _linear_vjp, ("w", "b")),
    "softmax_rows": _OpDef(softmax_rows, _softmax_vjp),
    "cross_entropy": _OpDef(cross_entropy, _cross_entropy_vjp),
}

OPS = tuple(_OPS)
DIFFERENTIABLE_INPUTS = {
    "conv2d_pointwise": ("x", "w", "b"),
    "conv2d_depthwise": ("x", "w", "b"),
    "gelu": ("x",),
    "avgpool": ("x",),
    "linear": ("x", "w", "b"),
    "softmax_rows": ("x",),
    "cross_entropy": ("logits",),
}


@dataclass(frozen=True)
class VJPRecord:
    """What ``backward`` needs to replay one forward op."""

    op: str
    saved: dict = field(repr=False)
    out_shape: tuple[int, ...]
    params: tuple[str, ...] = ()


def trace(op: str, *args, **kwargs) -> tuple[Any, VJPRecord]:
    """Run ``op`` forward and return ``(output, record)``."""
    try:
        spec = _OPS[op]
    except KeyError:
        raise ValidationError(f"unknown op {op!r}; known: {', '.join(_OPS)}") from None
    bound = inspect.signature(spec.forward).bind(*args, **kwargs)
    bound.apply_defaults()
    saved = dict(bound.arguments)
    out = spec.forward(*args, **kwargs)
    if op == "softmax_rows":
        saved["out"] = out
    if op == "cross_entropy":
        saved["targets"] = np.asarray(saved["targets"], dtype=np.int64)
    return out, VJPRecord(op, saved, np.shape(out), spec.params)


def backward(record: VJPRecord, upstream) -> dict[str, np.ndarray]:
    """Exact vector-Jacobian product of the recorded op."""
    if np.shape(upstream) != record.out_shape:
        raise ShapeError(
            f"upstream gradient shape {np.shape(upstream)} != output shape {record.out_shape}"
        )
    return _OPS[record.op].vjp(record.saved, upstream)


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if eps <= 0:
        raise ValidationError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n|`` scaled by the largest magnitude in either array."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


# grid <-> token sequence adapters (row-major raster order)

def tokens_to_grid(x: np.ndarray) -> np.ndarray:
    if x.ndim != 2:
        raise ShapeError(f"expected (N, D) tokens, got {x.shape}")
    n = x.shape[0]
    side = int(round(np.sqrt(n)))
    if side < 1 or side * side != n:
        raise ValidationError(f"token count {n} is not a perfect square")
    return x.reshape(side, side, x.shape[1])


def grid_to_tokens(x: np.ndarray) -> np.ndarray:
    _check_grid(x)
    return x.reshape(-1, x.shape[2])


def token_grid_roundtrip(x: np.ndarray) -> np.ndarray:
    return grid_to_tokens(tokens_to_grid(x))
