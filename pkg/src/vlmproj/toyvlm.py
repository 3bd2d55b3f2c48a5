"""A toy vision-language pipeline: frozen vision stub, projector, causal LM.

Everything runs in float64 numpy with hand-written backward passes so the
whole chain can be gradient-checked.  The language model is a small
pre-norm transformer (RMS norm, learned absolute positions, GELU MLP).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContextOverflowError, ShapeError, ValidationError
from .projector import Projector, ProjectorSpec, build
from .tensor import backward, gelu, gelu_grad, linear, trace

RMS_EPS = 1e-6
VISUAL, TEXT = "visual", "text"


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def rms_norm(x, g):
    r = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + RMS_EPS)
    xhat = x * r
    return xhat * g, (xhat, r, g)


def rms_norm_vjp(ctx, gy):
    xhat, r, g = ctx
    gyg = gy * g
    gx = r * (gyg - xhat * (gyg * xhat).mean(axis=-1, keepdims=True))
    return gx, (gy * xhat).sum(axis=0)


def _split_heads(x, heads):
    T, d = x.shape
    return x.reshape(T, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, T, dh = x.shape
    return x.transpose(1, 0, 2).reshape(T, h * dh)


def _attend(q, k, v, causal, offset=0):
    """Scaled dot-product attention over (heads, T, dh) arrays.

    ``offset`` is the absolute position of the first query row, used to
    build the causal mask when queries are a suffix of the keys.
    """
    dh = q.shape[-1]
    s = q @ k.transpose(0, 2, 1) / np.sqrt(dh)
    if causal:
        tq, tk = s.shape[1], s.shape[2]
        mask = np.arange(tk)[None, :] > (np.arange(tq)[:, None] + offset)
        s = np.where(mask[None], -np.inf, s)
    s = s - s.max(axis=-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=-1, keepdims=True)
    return a @ v, a


# ---------------------------------------------------------------------------
# transformer block
# ---------------------------------------------------------------------------

def block_shapes(prefix, d, hidden):
    return {
        f"{prefix}.norm1": (d,),
        f"{prefix}.qkv.weight": (3 * d, d),
        f"{prefix}.qkv.bias": (3 * d,),
        f"{prefix}.proj.weight": (d, d),
        f"{prefix}.proj.bias": (d,),
        f"{prefix}.norm2": (d,),
        f"{prefix}.fc1.weight": (hidden, d),
        f"{prefix}.fc1.bias": (hidden,),
        f"{prefix}.fc2.weight": (d, hidden),
        f"{prefix}.fc2.bias": (d,),
    }


def block_forward(P, prefix, x, heads, causal):
    p = lambda n: P[f"{prefix}.{n}"]  # noqa: E731
    d = x.shape[1]
    h1, n1 = rms_norm(x, p("norm1"))
    qkv = linear(h1, p("qkv.weight"), p("qkv.bias"))
    q, k, v = (_split_heads(qkv[:, i * d : (i + 1) * d], heads) for i in range(3))
    o, a = _attend(q, k, v, causal)
    om = _merge_heads(o)
    x1 = x + linear(om, p("proj.weight"), p("proj.bias"))
    h2, n2 = rms_norm(x1, p("norm2"))
    u = linear(h2, p("fc1.weight"), p("fc1.bias"))
    gu = gelu(u)
    x2 = x1 + linear(gu, p("fc2.weight"), p("fc2.bias"))
    ctx = dict(h1=h1, n1=n1, q=q, k=k, v=v, a=a, om=om, h2=h2, n2=n2, u=u, gu=gu)
    return x2, ctx


def block_backward(P, prefix, ctx, g, heads):
    p = lambda n: P[f"{prefix}.{n}"]  # noqa: E731
    grads = {}
    # MLP branch
    grads[f"{prefix}.fc2.weight"] = g.T @ ctx["gu"]
    grads[f"{prefix}.fc2.bias"] = g.sum(axis=0)
    ggu = g @ p("fc2.weight")
    gu = ggu * gelu_grad(ctx["u"])
    grads[f"{prefix}.fc1.weight"] = gu.T @ ctx["h2"]
    grads[f"{prefix}.fc1.bias"] = gu.sum(axis=0)
    gh2 = gu @ p("fc1.weight")
    gx1_norm, grads[f"{prefix}.norm2"] = rms_norm_vjp(ctx["n2"], gh2)
    gx1 = g + gx1_norm
    # attention branch
    grads[f"{prefix}.proj.weight"] = gx1.T @ ctx["om"]
    grads[f"{prefix}.proj.bias"] = gx1.sum(axis=0)
    go = _split_heads(gx1 @ p("proj.weight"), heads)
    a, q, k, v = ctx["a"], ctx["q"], ctx["k"], ctx["v"]
    gv = a.transpose(0, 2, 1) @ go
    ga = go @ v.transpose(0, 2, 1)
    gs = a * (ga - (ga * a).sum(axis=-1, keepdims=True)) / np.sqrt(q.shape[-1])
    gq = gs @ k
    gk = gs.transpose(0, 2, 1) @ q
    gqkv = np.concatenate([_merge_heads(gq), _merge_heads(gk), _merge_heads(gv)], axis=1)
    grads[f"{prefix}.qkv.weight"] = gqkv.T @ ctx["h1"]
    grads[f"{prefix}.qkv.bias"] = gqkv.sum(axis=0)
    gh1 = gqkv @ p("qkv.weight")
    gx_norm, grads[f"{prefix}.norm1"] = rms_norm_vjp(ctx["n1"], gh1)
    return gx1 + gx_norm, grads


def _init_params(shapes, rng):
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        elif len(shape) == 1:
            params[name] = np.ones(shape)  # norm gains
        else:
            bound = np.sqrt(1.0 / shape[-1])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


# ---------------------------------------------------------------------------
# vision stub
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VisionStubConfig:
    image_side: int = 48
    patch: int = 4
    d_v: int = 8
    depth: int = 0
    heads: int = 1
    seed: int = 0
    frozen: bool = True

    def __post_init__(self):
        if self.patch < 1 or self.image_side < 1 or self.image_side % self.patch:
            raise ValidationError(f"patch {self.patch} must divide image_side {self.image_side}")
        if self.d_v < 1 or self.depth < 0 or self.heads < 1 or self.d_v % self.heads:
            raise ValidationError("need d_v >= 1, depth >= 0 and heads dividing d_v")

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch

    @property
    def n_tokens(self) -> int:
        return self.grid_side**2


class VisionStub:
    """Seeded patch embedding followed by ``depth`` bidirectional blocks."""

    def __init__(self, cfg: VisionStubConfig):
        self.cfg = cfg
        c, P = cfg, cfg.patch
        shapes = {"patch.weight": (c.d_v, P * P * 3), "patch.bias": (c.d_v,)}
        for i in range(c.depth):
            shapes.update(block_shapes(f"blocks.{i}", c.d_v, 4 * c.d_v))
        self.params = _init_params(shapes, np.random.default_rng(c.seed))

    def patches(self, image) -> np.ndarray:
        c = self.cfg
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (c.image_side, c.image_side, 3):
            raise ShapeError(f"expected image {(c.image_side, c.image_side, 3)}, got {image.shape}")
        n, P = c.grid_side, c.patch
        # (n, P, n, P, 3) -> (n, n, P, P, 3): patch (r, col) flattened row-major
        return image.reshape(n, P, n, P, 3).transpose(0, 2, 1, 3, 4).reshape(n * n, P * P * 3)

    def forward_vjp(self, image):
        x = linear(self.patches(image), self.params["patch.weight"], self.params["patch.bias"])
        ctxs = []
        for i in range(self.cfg.depth):
            x, ctx = block_forward(self.params, f"blocks.{i}", x, self.cfg.heads, causal=False)
            ctxs.append(ctx)
        patches = self.patches(image)

        def vjp(g):
            grads = {}
            for i in reversed(range(self.cfg.depth)):
                g, bg = block_backward(self.params, f"blocks.{i}", ctxs[i], g, self.cfg.heads)
                grads.update(bg)
            grads["patch.weight"] = g.T @ patches
            grads["patch.bias"] = g.sum(axis=0)
            return grads

        return x, vjp

    def __call__(self, image) -> np.ndarray:
        return self.forward_vjp(image)[0]


def encode_image(stub: VisionStub, image) -> np.ndarray:
    return stub(image)


# ---------------------------------------------------------------------------
# token sequences
# ---------------------------------------------------------------------------

@dataclass
class TokenSequence:
    embeddings: np.ndarray
    modality: list[str]
    ids: list[int | None] = field(default_factory=list)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        n = self.embeddings.shape[0]
        if len(self.modality) != n:
            raise ValidationError(f"{len(self.modality)} modality tags for {n} tokens")
        if not self.ids:
            self.ids = [None] * n
        if len(self.ids) != n:
            raise ValidationError(f"{len(self.ids)} ids for {n} tokens")
        for m, i in zip(self.modality, self.ids):
            if m not in (VISUAL, TEXT):
                raise ValidationError(f"unknown modality {m!r}")
            if m == VISUAL and i is not None:
                raise ValidationError("visual positions carry no token ids")

    def __len__(self):
        return len(self.modality)

    def to_json(self) -> str:
        return json.dumps(
            {"embeddings": self.embeddings.tolist(), "modality": self.modality, "ids": self.ids}
        )

    @classmethod
    def from_json(cls, text: str) -> "TokenSequence":
        d = json.loads(text)
        emb = np.asarray(d["embeddings"], dtype=np.float64).reshape(len(d["modality"]), -1)
        return cls(emb, d["modality"], d["ids"])


def concat_multimodal(H_v, H_q, text_ids=None) -> TokenSequence:
    """Visual tokens first, then text tokens."""
    H_v = np.asarray(H_v, dtype=np.float64)
    H_q = np.asarray(H_q, dtype=np.float64)
    if H_q.size == 0:
        H_q = H_q.reshape(0, H_v.shape[1])
    if H_v.ndim != 2 or H_q.ndim != 2 or H_v.shape[1] != H_q.shape[1]:
        raise ShapeError(f"width mismatch: visual {H_v.shape} vs text {H_q.shape}")
    ids = [None] * len(H_v) + (list(text_ids) if text_ids is not None else [None] * len(H_q))
    mod = [VISUAL] * len(H_v) + [TEXT] * len(H_q)
    # text positions without ids are allowed (pre-embedded text)
    return TokenSequence(np.concatenate([H_v, H_q], axis=0), mod, ids)


# ---------------------------------------------------------------------------
# language model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyLMConfig:
    vocab: int = 11
    d_t: int = 16
    depth: int = 1
    heads: int = 2
    max_seq: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.vocab < 2:
            raise ValidationError("vocab must be >= 2")
        if self.d_t < 1 or self.heads < 1 or self.d_t % self.heads:
            raise ValidationError(f"d_t {self.d_t} must be divisible by heads {self.heads}")
        if self.depth < 0 or self.max_seq < 1:
            raise ValidationError("depth must be >= 0 and max_seq >= 1")


class KVCache:
    def __init__(self, depth):
        self.k = [None] * depth
        self.v = [None] * depth
        self.length = 0


class ToyLM:
    def __init__(self, cfg: ToyLMConfig):
        self.cfg = cfg
        c = cfg
        shapes = {"tok_emb": (c.vocab, c.d_t), "pos_emb": (c.max_seq, c.d_t)}
        for i in range(c.depth):
            shapes.update(block_shapes(f"blocks.{i}", c.d_t, 4 * c.d_t))
        shapes.update({"norm": (c.d_t,), "head.weight": (c.vocab, c.d_t), "head.bias": (c.vocab,)})
        rng = np.random.default_rng(c.seed)
        self.params = _init_params(shapes, rng)
        self.params["tok_emb"] = rng.standard_normal((c.vocab, c.d_t))
        self.params["pos_emb"] = 0.1 * rng.standard_normal((c.max_seq, c.d_t))

    def embed(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab):
            raise ValidationError(f"token id out of range [0, {self.cfg.vocab})")
        return self.params["tok_emb"][ids]

    def _check_len(self, n):
        if n > self.cfg.max_seq:
            raise ContextOverflowError(f"sequence length {n} exceeds max_seq {self.cfg.max_seq}")

    def forward_vjp(self, embeddings):
        """Logits for every position plus ``vjp(g_logits) -> (g_embeddings, grads)``."""
        P, c = self.params, self.cfg
        e = np.asarray(embeddings, dtype=np.float64)
        if e.ndim != 2 or e.shape[1] != c.d_t:
            raise ShapeError(f"expected (N, {c.d_t}) embeddings, got {e.shape}")
        n = e.shape[0]
        self._check_len(n)
        x = e + P["pos_emb"][:n]
        ctxs = []
        for i in range(c.depth):
            x, ctx = block_forward(P, f"blocks.{i}", x, c.heads, causal=True)
            ctxs.append(ctx)
        h, nctx = rms_norm(x, P["norm"])
        logits = linear(h, P["head.weight"], P["head.bias"])

        def vjp(g):
            grads = {"head.weight": g.T @ h, "head.bias": g.sum(axis=0)}
            gx, grads["norm"] = rms_norm_vjp(nctx, g @ P["head.weight"])
            for i in reversed(range(c.depth)):
                gx, bg = block_backward(P, f"blocks.{i}", ctxs[i], gx, c.heads)
                grads.update(bg)
            gpos = np.zeros_like(P["pos_emb"])
            gpos[:n] = gx
            grads["pos_emb"] = gpos
            return gx, grads

        return logits, vjp

    def logits(self, embeddings) -> np.ndarray:
        return self.forward_vjp(embeddings)[0]

    # incremental decoding -------------------------------------------------

    def step(self, cache: KVCache, emb_rows) -> np.ndarray:
        """Feed new rows through the model, extending ``cache``; return their logits."""
        P, c = self.params, self.cfg
        e = np.atleast_2d(np.asarray(emb_rows, dtype=np.float64))
        start = cache.length
        self._check_len(start + e.shape[0])
        x = e + P["pos_emb"][start : start + e.shape[0]]
        d = c.d_t
        for i in range(c.depth):
            p = lambda nm: P[f"blocks.{i}.{nm}"]  # noqa: E731
            h1, _ = rms_norm(x, p("norm1"))
            qkv = linear(h1, p("qkv.weight"), p("qkv.bias"))
            q, k, v = (_split_heads(qkv[:, j * d : (j + 1) * d], c.heads) for j in range(3))
            if cache.k[i] is not None:
                k = np.concatenate([cache.k[i], k], axis=1)
                v = np.concatenate([cache.v[i], v], axis=1)
            cache.k[i], cache.v[i] = k, v
            o, _ = _attend(q, k, v, causal=True, offset=start)
            x = x + linear(_merge_heads(o), p("proj.weight"), p("proj.bias"))
            h2, _ = rms_norm(x, p("norm2"))
            x = x + linear(gelu(linear(h2, p("fc1.weight"), p("fc1.bias"))), p("fc2.weight"), p("fc2.bias"))
        cache.length = start + e.shape[0]
        h, _ = rms_norm(x, P["norm"])
        return linear(h, P["head.weight"], P["head.bias"])


def lm_logits(lm: ToyLM, seq: TokenSequence) -> np.ndarray:
    return lm.logits(seq.embeddings)


def generate(lm: ToyLM, prompt: TokenSequence, L: int, use_cache: bool = True) -> list[int]:
    """Greedy decoding of ``L`` ids; ties resolve to the lowest id."""
    if L < 1:
        raise ValidationError("L must be >= 1")
    if len(prompt) == 0:
        raise ValidationError("prompt must contain at least one token")
    if len(prompt) > lm.cfg.max_seq:
        raise ContextOverflowError(
            f"context overflow at generation step 1 of {L}: prompt has {len(prompt)} tokens, "
            f"max_seq {lm.cfg.max_seq}"
        )
    out: list[int] = []
    if use_cache:
        cache = KVCache(lm.cfg.depth)
        logits = lm.step(cache, prompt.embeddings)[-1]
        for i in range(1, L + 1):
            nxt = int(np.argmax(logits))
            out.append(nxt)
            if i == L:
                break
            if cache.length + 1 > lm.cfg.max_seq:
                raise ContextOverflowError(
                    f"context overflow at generation step {i + 1} of {L} (max_seq {lm.cfg.max_seq})"
                )
            logits = lm.step(cache, lm.embed([nxt]))[-1]
        return out
    emb = prompt.embeddings
    for i in range(1, L + 1):
        if emb.shape[0] > lm.cfg.max_seq:
            raise ContextOverflowError(
                f"context overflow at generation step {i} of {L} (max_seq {lm.cfg.max_seq})"
            )
        nxt = int(np.argmax(lm.logits(emb)[-1]))
        out.append(nxt)
        emb = np.concatenate([emb, lm.embed([nxt])], axis=0)
    return out


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyVLMConfig:
    vision: VisionStubConfig = field(default_factory=VisionStubConfig)
    lm: ToyLMConfig = field(default_factory=ToyLMConfig)
    variant: str = "LDPv2"
    rho: int = 2
    projector_seed: int = 0

    def projector_spec(self) -> ProjectorSpec:
        return ProjectorSpec(
            variant=self.variant, d_v=self.vision.d_v, d_t=self.lm.d_t,
            grid_side=self.vision.grid_side, rho=self.rho, seed=self.projector_seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToyVLMConfig":
        d = dict(d)
        vision = VisionStubConfig(**d.pop("vision", {}))
        lm = ToyLMConfig(**d.pop("lm", {}))
        return cls(vision=vision, lm=lm, **d)

    @classmethod
    def load(cls, path) -> "ToyVLMConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


COMPONENTS = ("vision", "projector", "lm")


class ToyVLM:
    """Vision stub -> projector -> causal LM, with visual tokens as a prefix."""

    def __init__(self, cfg: ToyVLMConfig | None = None):
        self.cfg = cfg or ToyVLMConfig()
        self.vision = VisionStub(self.cfg.vision)
        self.projector: Projector = build(self.cfg.projector_spec())
        self.lm = ToyLM(self.cfg.lm)

    def components(self):
        return {"vision": self.vision.params, "projector": self.projector.params, "lm": self.lm.params}

    def named_parameters(self):
        for comp, params in self.components().items():
            for name, t in params.items():
                yield f"{comp}.{name}", t

    def visual_tokens(self, image) -> np.ndarray:
        return self.projector(self.vision(image))

    def prompt_sequence(self, image, text_ids) -> TokenSequence:
        text_ids = list(text_ids)
        H_v = self.visual_tokens(image) if image is not None else np.zeros((0, self.cfg.lm.d_t))
        return concat_multimodal(H_v, self.lm.embed(text_ids), text_ids)

    def generate(self, image, text_ids, L: int, use_cache: bool = True) -> list[int]:
        return generate(self.lm, self.prompt_sequence(image, text_ids), L, use_cache=use_cache)

    def caption_loss(self, image, caption, need_grads=("projector", "lm")):
        """Mean next-token cross-entropy over caption positions.

        The caption is teacher-forced after the visual prefix; the last
        visual position predicts ``caption[0]``.  Returns ``(loss, grads)``
        where grads is keyed ``"<component>.<param>"`` for the requested
        components only.
        """
        caption = list(caption)
        if not caption:
            raise ValidationError("caption must be non-empty")
        f_v, vision_vjp = self.vision.forward_vjp(image)
        H_v, proj_vjp = self.projector.forward_vjp(f_v)
        H_q = self.lm.embed(caption[:-1])
        emb = np.concatenate([H_v, H_q], axis=0)
        logits, lm_vjp = self.lm.forward_vjp(emb)
        nv = H_v.shape[0]
        pred = logits[nv - 1 : nv - 1 + len(caption)]
        loss, rec = trace("cross_entropy", pred, caption)
        grads: dict[str, np.ndarray] = {}
        if not need_grads:
            return loss, grads
        g_pred = backward(rec, 1.0)["logits"]
        g_logits = np.zeros_like(logits)
        g_logits[nv - 1 : nv - 1 + len(caption)] = g_pred
        g_emb, lm_grads = lm_vjp(g_logits)
        if "lm" in need_grads:
            g_tok = np.zeros_like(self.lm.params["tok_emb"])
            np.add.at(g_tok, np.asarray(caption[:-1], dtype=np.int64), g_emb[nv:])
            lm_grads["tok_emb"] = g_tok
            grads.update({f"lm.{k}": v for k, v in lm_grads.items()})
        if "projector" in need_grads or "vision" in need_grads:
            g_fv, p_grads = proj_vjp(g_emb[:nv])
            if "projector" in need_grads:
                grads.update({f"projector.{k}": v for k, v in p_grads.items()})
            if "vision" in need_grads:
                grads.update({f"vision.{k}": v for k, v in vision_vjp(g_fv).items()})
        return loss, grads
