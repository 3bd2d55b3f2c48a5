"""Finite-difference checks for the tensor ops and projector variants."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .projector import VARIANTS, ProjectorSpec, build
from .tensor import DIFFERENTIABLE_INPUTS, backward, finite_diff_grad, max_relative_error, trace

OP_TOL = 1e-6
E2E_TOL = 1e-5
EPS = 1e-5


@dataclass
class CheckResult:
    target: str
    wrt: str
    rel_error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.rel_error <= self.tol


def _op_inputs(op: str, rng: np.random.Generator):
    """Random small arguments for ``op`` as (args, kwargs)."""
    H, W = rng.integers(2, 6, size=2)
    C = int(rng.integers(1, 5))
    if op == "conv2d_pointwise":
        co = int(rng.integers(1, 5))
        return [rng.standard_normal((H, W, C)), rng.standard_normal((co, C)), rng.standard_normal(co)], {}
    if op == "conv2d_depthwise":
        stride = int(rng.integers(1, 3))
        return [rng.standard_normal((H, W, C)), rng.standard_normal((C, 3, 3)), rng.standard_normal(C)], {
            "stride": stride, "zero_pad": 1,
        }
    if op == "gelu":
        return [rng.standard_normal((H, W, C)) * 2.0], {}
    if op == "avgpool":
        rho = int(rng.integers(1, 3))
        return [rng.standard_normal((rho * H, rho * W, C)), rho], {}
    if op == "linear":
        n, di, do = rng.integers(1, 6, size=3)
        return [rng.standard_normal((n, di)), rng.standard_normal((do, di)), rng.standard_normal(do)], {}
    if op == "softmax_rows":
        return [rng.standard_normal((int(H), int(W) + 1))], {}
    if op == "cross_entropy":
        n, v = int(H), int(W) + 1
        return [rng.standard_normal((n, v)), rng.integers(0, v, size=n)], {}
    raise ValidationError(f"unknown op {op!r}")


def check_op(op: str, seed: int = 0, tol: float = OP_TOL) -> list[CheckResult]:
    """Compare ``backward`` with central differences for every differentiable input."""
    if op not in DIFFERENTIABLE_INPUTS:
        raise ValidationError(f"unknown op {op!r}; choose from {sorted(DIFFERENTIABLE_INPUTS)}")
    rng = np.random.default_rng(seed)
    args, kwargs = _op_inputs(op, rng)
    out, rec = trace(op, *args, **kwargs)
    # project onto a random direction so the VJP sees a generic upstream
    proj = rng.standard_normal(np.shape(out))
    upstream = proj if np.ndim(out) else float(proj)
    grads = backward(rec, upstream)
    names = list(rec.saved)
    results = []
    for wrt in DIFFERENTIABLE_INPUTS[op]:
        i = names.index(wrt)

        def f(x, i=i):
            a = list(args)
            a[i] = x
            return float(np.sum(np.asarray(trace(op, *a, **kwargs)[0]) * proj))

        num = finite_diff_grad(f, args[i], EPS)
        results.append(CheckResult(op, wrt, max_relative_error(grads[wrt], num), tol))
    return results


def small_spec(variant: str, seed: int = 0) -> ProjectorSpec:
    return ProjectorSpec(variant=variant, d_v=3, d_t=4, grid_side=4, rho=2, seed=seed)


def check_variant(variant: str, seed: int = 0, tol: float = OP_TOL) -> list[CheckResult]:
    """Gradient of ``sum(R * P(f_v))`` w.r.t. the input and every parameter."""
    if variant not in VARIANTS:
        raise ValidationError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    spec = small_spec(variant, seed)
    p = build(spec)
    rng = np.random.default_rng(seed + 1)
    # nonzero biases/tables so every term is exercised
    for t in p.params.values():
        t += 0.1 * rng.standard_normal(t.shape)
    f_v = rng.standard_normal((spec.n_tokens_in, spec.d_v))
    out, vjp = p.forward_vjp(f_v)
    R = rng.standard_normal(out.shape)
    g_in, g_params = vjp(R)
    results = [CheckResult(variant, "f_v", max_relative_error(
        g_in, finite_diff_grad(lambda x: float(np.sum(p.forward(x) * R)), f_v, EPS)), tol)]
    for name, t in p.params.items():
        orig = t.copy()

        def f(x, t=t):
            t[...] = x
            return float(np.sum(p.forward(f_v) * R))

        num = finite_diff_grad(f, orig, EPS)
        t[...] = orig
        results.append(CheckResult(variant, name, max_relative_error(g_params[name], num), tol))
    return results


def check_pipeline(seed: int = 0, variant: str = "LDPv2", tol: float = E2E_TOL) -> list[CheckResult]:
    """Caption loss through vision stub -> projector -> LM, w.r.t. projector params."""
    from .toyvlm import ToyLMConfig, ToyVLM, ToyVLMConfig, VisionStubConfig

    cfg = ToyVLMConfig(
        vision=VisionStubConfig(image_side=16, patch=4, d_v=8, seed=seed),
        lm=ToyLMConfig(vocab=11, d_t=16, depth=1, heads=2, max_seq=32, seed=seed),
        variant=variant, projector_seed=seed,
    )
    model = ToyVLM(cfg)
    rng = np.random.default_rng(seed + 7)
    for t in model.projector.params.values():
        t += 0.1 * rng.standard_normal(t.shape)
    image = rng.standard_normal((16, 16, 3))
    caption = list(rng.integers(0, 11, size=4))
    _, grads = model.caption_loss(image, caption, need_grads=("projector",))
    results = []
    for name, t in model.projector.params.items():
        orig = t.copy()

        def f(x, t=t):
            t[...] = x
            return model.caption_loss(image, caption, need_grads=())[0]

        num = finite_diff_grad(f, orig, EPS)
        t[...] = orig
        results.append(CheckResult(f"pipeline/{variant}", name, max_relative_error(grads[f"projector.{name}"], num), tol))
    return results
