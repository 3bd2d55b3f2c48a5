"""Vision-to-language projectors: construction, forward/backward, accounting.

Five variants, in feature-flow order (PW = biased 1x1 conv, DW = biased 3x3
depthwise conv with zero padding 1):

``MLP2``         PW(d_v->d_t) -> GELU -> PW(d_t->d_t)
``LDPv1``        MLP2 -> residual[DW s1 -> PW -> GELU -> PW] -> DW s2 -> PW
``AvgPoolOnly``  MLP2 -> avgpool(rho)
``LearnablePE``  MLP2 -> avgpool(rho) -> + positional table
``LDPv2``        MLP2 -> avgpool(rho) -> f + DW s1(f)
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from . import tensorio
from .errors import ShapeError, ValidationError
from .tensor import backward, grid_to_tokens, tokens_to_grid, trace

VARIANTS = ("MLP2", "LDPv1", "AvgPoolOnly", "LearnablePE", "LDPv2")
POOLED = ("AvgPoolOnly", "LearnablePE", "LDPv2")
DW_KERNEL = 3


@dataclass(frozen=True)
class ProjectorSpec:
    variant: str = "LDPv2"
    d_v: int = 1024
    d_t: int = 2048
    grid_side: int = 24
    rho: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.d_v < 1 or self.d_t < 1 or self.grid_side < 1 or self.rho < 1:
            raise ValidationError("d_v, d_t, grid_side and rho must all be >= 1")
        if self.seed < 0:
            raise ValidationError("seed must be a non-negative integer")
        if self.variant in POOLED and self.grid_side % self.rho:
            raise ValidationError(
                f"grid_side {self.grid_side} not divisible by pooling kernel {self.rho}"
            )
        if self.variant == "LDPv1" and self.grid_side % 2:
            raise ValidationError("LDPv1 halves the grid with a stride-2 conv; grid_side must be even")

    @property
    def n_tokens_in(self) -> int:
        return self.grid_side**2

    @property
    def out_side(self) -> int:
        if self.variant == "MLP2":
            return self.grid_side
        if self.variant == "LDPv1":
            return self.grid_side // 2
        return self.grid_side // self.rho

    @property
    def n_tokens_out(self) -> int:
        return self.out_side**2

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ProjectorSpec":
        unknown = set(d) - {"variant", "d_v", "d_t", "grid_side", "rho", "seed"}
        if unknown:
            raise ValidationError(f"unknown spec keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ProjectorSpec":
        return cls.from_dict(json.loads(text))


# --- layers -----------------------------------------------------------------
# Each layer maps a grid to a grid; forward returns (y, ctx) and backward
# returns (grad_x, {param_name: grad}).


class _PW:
    def __init__(self, name, cin, cout):
        self.name, self.cin, self.cout = name, cin, cout

    def shapes(self):
        return {f"{self.name}.weight": (self.cout, self.cin), f"{self.name}.bias": (self.cout,)}

    def fan_in(self):
        return self.cin

    def forward(self, params, x):
        return trace("conv2d_pointwise", x, params[f"{self.name}.weight"], params[f"{self.name}.bias"])

    def backward(self, rec, g):
        gr = backward(rec, g)
        return gr["x"], {f"{self.name}.weight": gr["w"], f"{self.name}.bias": gr["b"]}


class _DW:
    def __init__(self, name, channels, stride):
        self.name, self.channels, self.stride = name, channels, stride

    def shapes(self):
        return {
            f"{self.name}.weight": (self.channels, DW_KERNEL, DW_KERNEL),
            f"{self.name}.bias": (self.channels,),
        }

    def fan_in(self):
        return DW_KERNEL * DW_KERNEL

    def forward(self, params, x):
        return trace(
            "conv2d_depthwise", x, params[f"{self.name}.weight"], params[f"{self.name}.bias"],
            stride=self.stride, zero_pad=1,
        )

    def backward(self, rec, g):
        gr = backward(rec, g)
        return gr["x"], {f"{self.name}.weight": gr["w"], f"{self.name}.bias": gr["b"]}


class _GELU:
    def shapes(self):
        return {}

    def forward(self, params, x):
        return trace("gelu", x)

    def backward(self, rec, g):
        return backward(rec, g)["x"], {}


class _Pool:
    def __init__(self, rho):
        self.rho = rho

    def shapes(self):
        return {}

    def forward(self, params, x):
        return trace("avgpool", x, self.rho)

    def backward(self, rec, g):
        return backward(rec, g)["x"], {}


class _PosTable:
    """Adds a learned (side*side, d) table to the token grid."""

    def __init__(self, name, side, channels):
        self.name, self.side, self.channels = name, side, channels

    def shapes(self):
        return {self.name: (self.side * self.side, self.channels)}

    def forward(self, params, x):
        return x + tokens_to_grid(params[self.name]), None

    def backward(self, ctx, g):
        return g, {self.name: grid_to_tokens(g).copy()}


class _Residual:
    """``y = x + inner(x)``."""

    def __init__(self, layers):
        self.layers = layers

    def shapes(self):
        out = {}
        for layer in self.layers:
            out.update(layer.shapes())
        return out

    def forward(self, params, x):
        y, ctxs = _run_forward(self.layers, params, x)
        return x + y, ctxs

    def backward(self, ctxs, g):
        gx, grads = _run_backward(self.layers, ctxs, g)
        return gx + g, grads


def _run_forward(layers, params, x):
    ctxs = []
    for layer in layers:
        x, ctx = layer.forward(params, x)
        ctxs.append(ctx)
    return x, ctxs


def _run_backward(layers, ctxs, g):
    grads = {}
    for layer, ctx in zip(reversed(layers), reversed(ctxs)):
        g, pg = layer.backward(ctx, g)
        for k, v in pg.items():
            grads[k] = grads[k] + v if k in grads else v
    return g, grads


def _layers_for(spec: ProjectorSpec):
    dv, dt = spec.d_v, spec.d_t
    mlp = [_PW("mlp.0", dv, dt), _GELU(), _PW("mlp.2", dt, dt)]
    if spec.variant == "MLP2":
        return mlp
    if spec.variant == "LDPv1":
        block = _Residual([_DW("block1.dw", dt, 1), _PW("block1.pw1", dt, dt), _GELU(), _PW("block1.pw2", dt, dt)])
        return mlp + [block, _DW("block2.dw", dt, 2), _PW("block2.pw", dt, dt)]
    pooled = mlp + [_Pool(spec.rho)]
    if spec.variant == "AvgPoolOnly":
        return pooled
    if spec.variant == "LearnablePE":
        return pooled + [_PosTable("pos_embed", spec.out_side, dt)]
    return pooled + [_Residual([_DW("peg", dt, 1)])]


def _iter_param_layers(layers):
    for layer in layers:
        if isinstance(layer, _Residual):
            yield from _iter_param_layers(layer.layers)
        elif layer.shapes():
            yield layer


class Projector:
    """A built projector: spec, named parameters, and trainable flags."""

    def __init__(self, spec: ProjectorSpec, params: dict[str, np.ndarray], trainable: dict[str, bool] | None = None):
        self.spec = spec
        self.layers = _layers_for(spec)
        expected = {}
        for layer in self.layers:
            expected.update(layer.shapes())
        if set(params) != set(expected):
            raise ValidationError(
                f"parameter names {sorted(params)} do not match {spec.variant} layout {sorted(expected)}"
            )
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name}: shape {params[name].shape} != expected {shape}")
        self.params = {name: np.asarray(params[name], dtype=np.float64) for name in expected}
        self.trainable = {name: True for name in self.params}
        if trainable:
            self.trainable.update(trainable)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.params.items()}

    def _check_input(self, f_v):
        f_v = np.asarray(f_v, dtype=np.float64)
        if f_v.ndim != 2 or f_v.shape[1] != self.spec.d_v:
            raise ShapeError(f"expected (N_v, {self.spec.d_v}) features, got {f_v.shape}")
        if f_v.shape[0] != self.spec.n_tokens_in:
            raise ValidationError(
                f"token count {f_v.shape[0]} does not match a {self.spec.grid_side}x{self.spec.grid_side} grid"
            )
        return tokens_to_grid(f_v)

    def forward(self, f_v: np.ndarray) -> np.ndarray:
        y, _ = _run_forward(self.layers, self.params, self._check_input(f_v))
        return grid_to_tokens(y)

    def forward_vjp(self, f_v: np.ndarray):
        """Forward pass plus a closure ``grad_out -> (grad_f_v, param_grads)``."""
        y, ctxs = _run_forward(self.layers, self.params, self._check_input(f_v))
        out = grid_to_tokens(y)

        def vjp(g_out):
            g_out = np.asarray(g_out, dtype=np.float64)
            if g_out.shape != out.shape:
                raise ShapeError(f"upstream gradient {g_out.shape} != output {out.shape}")
            gx, grads = _run_backward(self.layers, ctxs, g_out.reshape(y.shape))
            return grid_to_tokens(gx), grads

        return out, vjp

    __call__ = forward

    def save(self, directory) -> None:
        tensorio.save_dir(directory, self.params, {"spec": json.loads(self.spec.to_json())})

    @classmethod
    def load(cls, directory) -> "Projector":
        tensors, manifest = tensorio.load_dir(directory)
        return cls(ProjectorSpec.from_dict(manifest["spec"]), tensors)


def build(spec: ProjectorSpec) -> Projector:
    """Instantiate ``spec`` with seeded uniform(+-sqrt(1/fan_in)) weights and zero biases."""
    rng = np.random.default_rng(spec.seed)
    params = {}
    for layer in _iter_param_layers(_layers_for(spec)):
        for name, shape in layer.shapes().items():
            if name.endswith(".weight"):
                bound = np.sqrt(1.0 / layer.fan_in())
                params[name] = rng.uniform(-bound, bound, size=shape)
            else:
                # biases and the positional table start at zero
                params[name] = np.zeros(shape)
    return Projector(spec, params)


def closed_form_param_count(spec: ProjectorSpec) -> int:
    """Parameter count from layer arithmetic alone, without building tensors."""
    dv, dt = spec.d_v, spec.d_t
    pw = lambda cin, cout: cin * cout + cout  # noqa: E731
    dw = lambda c: c * DW_KERNEL * DW_KERNEL + c  # noqa: E731
    mlp = pw(dv, dt) + pw(dt, dt)
    extra = {
        "MLP2": 0,
        "AvgPoolOnly": 0,
        "LDPv2": dw(dt),
        "LearnablePE": spec.out_side**2 * dt,
        "LDPv1": 3 * pw(dt, dt) + 2 * dw(dt),
    }[spec.variant]
    return mlp + extra


def param_shapes(spec: ProjectorSpec) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes for ``spec`` without allocating weights."""
    shapes = {}
    for layer in _layers_for(spec):
        shapes.update(layer.shapes())
    return shapes


def param_count(p: Projector) -> int:
    return int(sum(t.size for t in p.params.values()))


def format_millions(n: int) -> str:
    """``6316032 -> '6.32M'`` with round-half-up at two decimals."""
    m = (Decimal(int(n)) / Decimal(10**6)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return f"{m}M"


def load_spec(path) -> ProjectorSpec:
    return ProjectorSpec.from_json(Path(path).read_text())
