"""Cross-attention fusion of visual tokens with structural tokens.

Visual tokens are the queries; the padded structural sequence supplies keys and
values under an additive padding mask. Residuals are post-normalised:

    H_V = H_vis W_V,  H_S = S W_S
    H_cross = LN(H_V + MHA(H_V, H_S) W_O + b_O)
    H_fused = LN(H_cross + GELU(H_cross W_1 + b_1) W_2 + b_2)

``projector_backward`` differentiates the whole block by hand so the forward
equations can be checked against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from molgeom.errors import CacheMismatchError, DegenerateMaskError, SchemaError, ShapeError
from molgeom.numerics import gelu, gelu_grad, seeded_params
from molgeom.structok import StructuralSequence

LN_EPS = 1e-5
_MASKED = -1e8


@dataclass(frozen=True)
class ProjectorConfig:
    d_v: int = 64
    d_s: int = 64
    d_h: int = 32
    heads: int = 8
    d_ff: int | None = None
    seed: int = 0

    def __post_init__(self):
        if min(self.d_v, self.d_s, self.d_h, self.heads) < 1:
            raise SchemaError("projector dimensions must be >= 1")
        if self.d_h % self.heads:
            raise ShapeError(f"d_h={self.d_h} is not divisible by {self.heads} heads")
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_h)
        elif self.d_ff < 1:
            raise SchemaError("d_ff must be >= 1")

    @property
    def d_k(self) -> int:
        return self.d_h // self.heads

    @classmethod
    def full(cls, **overrides) -> ProjectorConfig:
        base = dict(d_v=2048, d_s=64, d_h=4096, heads=32, d_ff=None)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True, eq=False)
class ProjectorParams:
    w_v: np.ndarray
    w_s: np.ndarray
    w_q: np.ndarray  # (heads, d_h, d_k)
    w_k: np.ndarray
    w_vh: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    w_1: np.ndarray
    b_1: np.ndarray
    w_2: np.ndarray
    b_2: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    # concat-fusion baseline
    w_cat: np.ndarray
    b_cat: np.ndarray
    cfg: ProjectorConfig = field(default_factory=ProjectorConfig)

    @classmethod
    def init(cls, cfg: ProjectorConfig) -> ProjectorParams:
        s, h, dk = cfg.seed, cfg.heads, cfg.d_k
        per_head = lambda name: seeded_params(  # noqa: E731
            (h, cfg.d_h, dk), s, name, scale=cfg.d_h**-0.5
        )
        return cls(
            w_v=seeded_params((cfg.d_v, cfg.d_h), s, "proj.w_v"),
            w_s=seeded_params((cfg.d_s, cfg.d_h), s, "proj.w_s"),
            w_q=per_head("proj.w_q"),
            w_k=per_head("proj.w_k"),
            w_vh=per_head("proj.w_vh"),
            w_o=seeded_params((cfg.d_h, cfg.d_h), s, "proj.w_o"),
            b_o=seeded_params(cfg.d_h, s, "proj.b_o", scale=cfg.d_h**-0.5),
            ln1_g=np.ones(cfg.d_h, np.float32),
            ln1_b=np.zeros(cfg.d_h, np.float32),
            w_1=seeded_params((cfg.d_h, cfg.d_ff), s, "proj.w_1"),
            b_1=seeded_params(cfg.d_ff, s, "proj.b_1", scale=cfg.d_h**-0.5),
            w_2=seeded_params((cfg.d_ff, cfg.d_h), s, "proj.w_2"),
            b_2=seeded_params(cfg.d_h, s, "proj.b_2", scale=cfg.d_ff**-0.5),
            ln2_g=np.ones(cfg.d_h, np.float32),
            ln2_b=np.zeros(cfg.d_h, np.float32),
            w_cat=seeded_params((cfg.d_v + cfg.d_s, cfg.d_h), s, "proj.w_cat"),
            b_cat=np.zeros(cfg.d_h, np.float32),
            cfg=cfg,
        )

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.cfg
        return {
            "w_v": (c.d_v, c.d_h), "w_s": (c.d_s, c.d_h),
            "w_q": (c.heads, c.d_h, c.d_k), "w_k": (c.heads, c.d_h, c.d_k),
            "w_vh": (c.heads, c.d_h, c.d_k), "w_o": (c.d_h, c.d_h), "b_o": (c.d_h,),
            "ln1_g": (c.d_h,), "ln1_b": (c.d_h,),
            "w_1": (c.d_h, c.d_ff), "b_1": (c.d_ff,), "w_2": (c.d_ff, c.d_h), "b_2": (c.d_h,),
            "ln2_g": (c.d_h,), "ln2_b": (c.d_h,),
            "w_cat": (c.d_v + c.d_s, c.d_h), "b_cat": (c.d_h,),
        }  # fmt: skip

    def named(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "cfg"}

    @classmethod
    def from_named(cls, blocks: dict[str, np.ndarray], cfg: ProjectorConfig) -> ProjectorParams:
        """Rebuild parameters from named arrays, checking every shape against cfg."""
        template = cls.init(replace(cfg))
        expected = template.expected_shapes()
        missing = set(expected) - set(blocks)
        extra = set(blocks) - set(expected)
        if missing or extra:
            raise ShapeError(f"checkpoint blocks differ: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, shape in expected.items():
            if tuple(blocks[name].shape) != shape:
                raise ShapeError(f"{name}: checkpoint shape {blocks[name].shape}, config wants {shape}")
        return cls(**{k: np.asarray(v) for k, v in blocks.items()}, cfg=cfg)

    def astype(self, dtype) -> ProjectorParams:
        return replace(self, **{k: v.astype(dtype) for k, v in self.named().items()})

    def replace(self, **arrays) -> ProjectorParams:
        return replace(self, **arrays)


# --------------------------------------------------------------------------
# forward


def _dtype(params: ProjectorParams):
    return np.float64 if params.w_v.dtype == np.float64 else np.float32


def _ln_forward(z, g, b):
    mu = z.mean(axis=-1, keepdims=True)
    var = ((z - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (z - mu) * inv
    return xhat * g + b, (xhat, inv)


def _ln_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dz = inv * (
        dxhat - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dz, dg, db


def project_modalities(h_vis: np.ndarray, seq: StructuralSequence | np.ndarray, params: ProjectorParams):
    """Linear maps of both streams into the shared width d_h."""
    c = params.cfg
    s = seq.s if isinstance(seq, StructuralSequence) else np.asarray(seq)
    if h_vis.ndim != 2 or h_vis.shape[1] != c.d_v:
        raise ShapeError(f"visual tokens must be (N_v, {c.d_v}), got {h_vis.shape}")
    if s.ndim != 2 or s.shape[1] != c.d_s:
        raise ShapeError(f"structural tokens must be (L_max, {c.d_s}), got {s.shape}")
    x = h_vis.astype(np.float64)
    h_v = x @ params.w_v.astype(np.float64)
    h_s = s.astype(np.float64) @ params.w_s.astype(np.float64)
    dt = _dtype(params)
    return h_v.astype(dt), h_s.astype(dt)


def _check_mask(mask: np.ndarray, l_max: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (l_max,):
        raise ShapeError(f"mask length {mask.shape} does not match L_max={l_max}")
    if np.all(mask <= _MASKED):
        raise DegenerateMaskError("structural sequence is fully masked (L = 0)")
    return mask


def _attention(h_v, h_s, mask, params):
    """Per-head attention. Returns (concat output, per-head cache list)."""
    c = params.cfg
    scale = 1.0 / math.sqrt(c.d_k)
    heads = []
    outs = []
    for h in range(c.heads):
        wq = params.w_q[h].astype(np.float64)
        wk = params.w_k[h].astype(np.float64)
        wv = params.w_vh[h].astype(np.float64)
        q, k, v = h_v @ wq, h_s @ wk, h_s @ wv
        scores = q @ k.T * scale + mask
        scores -= scores.max(axis=-1, keepdims=True)
        a = np.exp(scores)
        a /= a.sum(axis=-1, keepdims=True)
        outs.append(a @ v)
        heads.append((q, k, v, a))
    return np.concatenate(outs, axis=1), heads


def attention_weights(h_v, h_s, mask, params) -> list[np.ndarray]:
    """Per-head attention matrices, each (N_v, L_max)."""
    mask = _check_mask(mask, h_s.shape[0])
    _, heads = _attention(h_v.astype(np.float64), h_s.astype(np.float64), mask, params)
    return [a for *_, a in heads]


def cross_attention(h_v, h_s, mask, params: ProjectorParams) -> np.ndarray:
    """Multi-head cross-attention output, concat(O_h) W_O + b_O, shape (N_v, d_h)."""
    if h_v.shape[1] != params.cfg.d_h or h_s.shape[1] != params.cfg.d_h:
        raise ShapeError("cross-attention inputs must both have width d_h")
    mask = _check_mask(mask, h_s.shape[0])
    o_cat, _ = _attention(h_v.astype(np.float64), h_s.astype(np.float64), mask, params)
    out = o_cat @ params.w_o.astype(np.float64) + params.b_o
    return out.astype(_dtype(params))


@dataclass
class ProjectorCache:
    params: ProjectorParams
    x: np.ndarray
    s: np.ndarray
    mask: np.ndarray
    h_v: np.ndarray
    h_s: np.ndarray
    heads: list
    o_cat: np.ndarray
    ln1: tuple
    h_cross: np.ndarray
    u: np.ndarray
    g: np.ndarray
    ln2: tuple
    out: np.ndarray


def _forward(h_vis, seq, params: ProjectorParams, mask=None) -> ProjectorCache:
    c = params.cfg
    if isinstance(seq, StructuralSequence):
        s, mask = seq.s, seq.mask if mask is None else mask
    else:
        s = np.asarray(seq)
        if mask is None:
            raise ShapeError("a raw structural matrix needs an explicit mask")
    if h_vis.ndim != 2 or h_vis.shape[1] != c.d_v:
        raise ShapeError(f"visual tokens must be (N_v, {c.d_v}), got {h_vis.shape}")
    if s.ndim != 2 or s.shape[1] != c.d_s:
        raise ShapeError(f"structural tokens must be (L_max, {c.d_s}), got {s.shape}")
    mask = _check_mask(mask, s.shape[0])
    p = {k: v.astype(np.float64) for k, v in params.named().items()}
    x = h_vis.astype(np.float64)
    sf = s.astype(np.float64)
    h_v = x @ p["w_v"]
    h_s = sf @ p["w_s"]
    o_cat, heads = _attention(h_v, h_s, mask, params)
    z1 = h_v + o_cat @ p["w_o"] + p["b_o"]
    h_cross, ln1 = _ln_forward(z1, p["ln1_g"], p["ln1_b"])
    u = h_cross @ p["w_1"] + p["b_1"]
    g = gelu(u)
    z2 = h_cross + g @ p["w_2"] + p["b_2"]
    out, ln2 = _ln_forward(z2, p["ln2_g"], p["ln2_b"])
    return ProjectorCache(params, x, sf, mask, h_v, h_s, heads, o_cat, ln1, h_cross, u, g, ln2, out)


def projector_forward(h_vis, seq, params: ProjectorParams, mask=None, return_cache: bool = False):
    """H_fused for visual tokens ``h_vis`` and a padded structural sequence.

    ``seq`` is a StructuralSequence, or a raw (L_max, d_s) matrix with ``mask``.
    """
    cache = _forward(h_vis, seq, params, mask)
    out = cache.out.astype(_dtype(params))
    return (out, cache) if return_cache else out


def projector_backward(upstream: np.ndarray | None, cache: ProjectorCache, params: ProjectorParams | None = None):
    """Gradients of ``sum(upstream * H_fused)`` for every parameter and input.

    With ``upstream=None`` the loss is ``0.5 * ||H_fused||^2``. Returns a dict
    keyed by parameter name plus ``"h_vis"`` and ``"s"``.
    """
    if params is not None and params is not cache.params:
        raise CacheMismatchError("cache was produced with different parameters")
    params = cache.params
    dy = cache.out if upstream is None else np.asarray(upstream, dtype=np.float64)
    if dy.shape != cache.out.shape:
        raise CacheMismatchError(f"upstream {dy.shape} does not match output {cache.out.shape}")
    p = {k: v.astype(np.float64) for k, v in params.named().items()}
    c = params.cfg
    grads: dict[str, np.ndarray] = {}

    dz2, grads["ln2_g"], grads["ln2_b"] = _ln_backward(dy, p["ln2_g"], cache.ln2)
    d_cross = dz2.copy()
    grads["w_2"] = cache.g.T @ dz2
    grads["b_2"] = dz2.sum(axis=0)
    du = (dz2 @ p["w_2"].T) * gelu_grad(cache.u)
    grads["w_1"] = cache.h_cross.T @ du
    grads["b_1"] = du.sum(axis=0)
    d_cross += du @ p["w_1"].T

    dz1, grads["ln1_g"], grads["ln1_b"] = _ln_backward(d_cross, p["ln1_g"], cache.ln1)
    dh_v = dz1.copy()
    grads["w_o"] = cache.o_cat.T @ dz1
    grads["b_o"] = dz1.sum(axis=0)
    do_cat = dz1 @ p["w_o"].T

    scale = 1.0 / math.sqrt(c.d_k)
    dh_s = np.zeros_like(cache.h_s)
    dwq, dwk, dwv = (np.zeros((c.heads, c.d_h, c.d_k)) for _ in range(3))
    for h, (q, k, v, a) in enumerate(cache.heads):
        do = do_cat[:, h * c.d_k : (h + 1) * c.d_k]
        da = do @ v.T
        dv = a.T @ do
        dscores = a * (da - (da * a).sum(axis=-1, keepdims=True))
        dq = dscores @ k * scale
        dk = dscores.T @ q * scale
        dwq[h] = cache.h_v.T @ dq
        dwk[h] = cache.h_s.T @ dk
        dwv[h] = cache.h_s.T @ dv
        dh_v += dq @ p["w_q"][h].T
        dh_s += dk @ p["w_k"][h].T + dv @ p["w_vh"][h].T
    grads["w_q"], grads["w_k"], grads["w_vh"] = dwq, dwk, dwv

    grads["w_v"] = cache.x.T @ dh_v
    grads["w_s"] = cache.s.T @ dh_s
    grads["h_vis"] = dh_v @ p["w_v"].T
    grads["s"] = dh_s @ p["w_s"].T
    grads["w_cat"] = np.zeros_like(p["w_cat"])
    grads["b_cat"] = np.zeros_like(p["b_cat"])
    return grads


def concat_baseline(h_vis, seq, params: ProjectorParams, mask=None) -> np.ndarray:
    """Ablation: mean of real structural rows, concatenated onto every visual
    token, then one linear map to d_h."""
    c = params.cfg
    if isinstance(seq, StructuralSequence):
        s, mask = seq.s, seq.mask if mask is None else mask
    else:
        s = np.asarray(seq)
    if h_vis.ndim != 2 or h_vis.shape[1] != c.d_v:
        raise ShapeError(f"visual tokens must be (N_v, {c.d_v}), got {h_vis.shape}")
    if s.ndim != 2 or s.shape[1] != c.d_s:
        raise ShapeError(f"structural tokens must be (L_max, {c.d_s}), got {s.shape}")
    mask = _check_mask(mask, s.shape[0])
    pooled = s[mask > _MASKED].astype(np.float64).mean(axis=0)
    x = np.concatenate(
        [h_vis.astype(np.float64), np.broadcast_to(pooled, (h_vis.shape[0], c.d_s))], axis=1
    )
    out = x @ params.w_cat.astype(np.float64) + params.b_cat
    return out.astype(_dtype(params))


def pooled_structure(seq: StructuralSequence) -> np.ndarray:
    return seq.s[seq.mask > _MASKED].astype(np.float64).mean(axis=0)
