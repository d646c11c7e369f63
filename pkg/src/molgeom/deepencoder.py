"""Dual-pathway image encoder forward pass.

patchify -> windowed local transformer -> 2x stride-2 conv compressor ->
global transformer -> channel concat of global tokens with local tokens
average-pooled onto the compressed grid.

The full-size configuration (1024 px, p=16, d=1024, 12 + 24 layers) is only
practical for shape tracing; desk-size configs run the same code paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from molgeom.errors import SchemaError, ShapeError
from molgeom.numerics import (
    NEG_INF,
    conv3x3_s2,
    gelu,
    layer_norm,
    seeded_params,
    window_partition,
    window_reverse,
)

COMPRESSION = 16  # two stride-2 convolutions


@dataclass(frozen=True)
class EncoderConfig:
    img: int = 128
    patch: int = 16
    window: int = 2
    d: int = 32
    local_layers: int = 2
    global_layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    pos_embed: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.img < 1 or self.patch < 1 or self.img % self.patch:
            raise ShapeError(f"image side {self.img} is not divisible by patch {self.patch}")
        if (self.img // self.patch) % 4:
            raise ShapeError("patch grid side must be divisible by 4 for 16x compression")
        if self.d < 1 or self.heads < 1 or self.d % self.heads:
            raise ShapeError(f"width {self.d} is not divisible by {self.heads} heads")
        if self.window < 1:
            raise ShapeError("window must be >= 1")
        if self.local_layers < 0 or self.global_layers < 0:
            raise SchemaError("layer counts must be >= 0")

    @classmethod
    def full(cls, **overrides) -> EncoderConfig:
        base = cls(img=1024, patch=16, window=14, d=1024, local_layers=12,
                   global_layers=24, heads=16)  # fmt: skip
        return replace(base, **overrides)

    @property
    def grid(self) -> int:
        return self.img // self.patch

    @property
    def n_tokens(self) -> int:
        return self.grid**2

    @property
    def m_tokens(self) -> int:
        return self.n_tokens // COMPRESSION


def shape_trace(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Tensor shapes at each stage, computed from the config alone."""
    n, m, d = cfg.n_tokens, cfg.m_tokens, cfg.d
    return {
        "image": (cfg.img, cfg.img, 3),
        "H_local": (n, d),
        "H_cmp": (m, d),
        "H_global": (m, d),
        "H_vis": (m, 2 * d),
    }


# --------------------------------------------------------------------------
# transformer pieces


def block_params(prefix: str, d: int, hidden: int, seed: int) -> dict[str, np.ndarray]:
    p = {
        "ln1_g": np.ones(d, np.float32),
        "ln1_b": np.zeros(d, np.float32),
        "w_qkv": seeded_params((d, 3 * d), seed, f"{prefix}.w_qkv"),
        "b_qkv": np.zeros(3 * d, np.float32),
        "w_o": seeded_params((d, d), seed, f"{prefix}.w_o"),
        "b_o": np.zeros(d, np.float32),
        "ln2_g": np.ones(d, np.float32),
        "ln2_b": np.zeros(d, np.float32),
        "w_1": seeded_params((d, hidden), seed, f"{prefix}.w_1"),
        "b_1": seeded_params(hidden, seed, f"{prefix}.b_1", scale=d**-0.5),
        "w_2": seeded_params((hidden, d), seed, f"{prefix}.w_2"),
        "b_2": seeded_params(d, seed, f"{prefix}.b_2", scale=hidden**-0.5),
    }
    return p


def self_attention(
    x: np.ndarray,
    p: dict,
    heads: int,
    key_mask: np.ndarray | None = None,
    attn_mask: np.ndarray | None = None,
):
    """Multi-head self-attention over the second-to-last axis.

    x: (..., n, d). key_mask: additive (..., n) mask over keys. attn_mask:
    additive (n, n) mask over (query, key) pairs, e.g. a causal mask.
    """
    xf = x.astype(np.float64)
    *lead, n, d = xf.shape
    dk = d // heads
    qkv = xf @ p["w_qkv"].astype(np.float64) + p["b_qkv"]
    qkv = qkv.reshape(*lead, n, 3, heads, dk)
    q = np.moveaxis(qkv[..., 0, :, :], -2, -3)  # (..., h, n, dk)
    k = np.moveaxis(qkv[..., 1, :, :], -2, -3)
    v = np.moveaxis(qkv[..., 2, :, :], -2, -3)
    scores = q @ np.swapaxes(k, -1, -2) / math.sqrt(dk)
    if key_mask is not None:
        scores = scores + key_mask[..., None, None, :]
    if attn_mask is not None:
        scores = scores + attn_mask
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    out = np.moveaxis(w @ v, -3, -2).reshape(*lead, n, d)
    return out @ np.asarray(p["w_o"], dtype=np.float64) + p["b_o"]


def mlp(x: np.ndarray, p: dict) -> np.ndarray:
    h = gelu(x.astype(np.float64) @ p["w_1"].astype(np.float64) + p["b_1"])
    return h @ p["w_2"].astype(np.float64) + p["b_2"]


def transformer_block(x: np.ndarray, p: dict, heads: int) -> np.ndarray:
    """Pre-norm block over (n, d) tokens with full attention."""
    x = x + self_attention(layer_norm(x, p["ln1_g"], p["ln1_b"]), p, heads)
    return (x + mlp(layer_norm(x, p["ln2_g"], p["ln2_b"]), p)).astype(np.float32)


def window_block(tokens: np.ndarray, p: dict, heads: int, side: int, window: int) -> np.ndarray:
    """Pre-norm block whose attention stays inside window x window tiles.

    Zero padding added to complete the last tiles is masked out as keys.
    """
    d = tokens.shape[1]
    normed = layer_norm(tokens, p["ln1_g"], p["ln1_b"]).reshape(side, side, d)
    windows, extent = window_partition(normed, window)
    valid, _ = window_partition(np.ones((side, side, 1), np.float32), window)
    n_win = windows.shape[0]
    windows = windows.reshape(n_win, window * window, d)
    key_mask = np.where(valid.reshape(n_win, window * window) > 0, 0.0, NEG_INF)
    attended = self_attention(windows, p, heads, key_mask)
    attended = window_reverse(attended.reshape(n_win, window, window, d), window, extent)
    x = tokens + attended.reshape(side * side, d)
    return (x + mlp(layer_norm(x, p["ln2_g"], p["ln2_b"]), p)).astype(np.float32)


# --------------------------------------------------------------------------
# encoder


class DeepEncoder:
    """Seeded encoder weights plus the four forward stages."""

    def __init__(self, cfg: EncoderConfig | None = None):
        self.cfg = cfg = cfg or EncoderConfig()
        d, p, s = cfg.d, cfg.patch, cfg.seed
        hidden = cfg.mlp_ratio * d
        self.patch_w = seeded_params((p * p * 3, d), s, "patch.w")
        self.patch_b = np.zeros(d, np.float32)
        self.pos = seeded_params((cfg.n_tokens, d), s, "patch.pos", scale=0.02)
        self.local_blocks = [block_params(f"local.{i}", d, hidden, s) for i in range(cfg.local_layers)]
        self.global_blocks = [block_params(f"global.{i}", d, hidden, s) for i in range(cfg.global_layers)]
        self.conv1_w = seeded_params((d, d, 3, 3), s, "compress.conv1.w")
        self.conv1_b = np.zeros(d, np.float32)
        self.conv2_w = seeded_params((d, d, 3, 3), s, "compress.conv2.w")
        self.conv2_b = np.zeros(d, np.float32)

    def check_image(self, img: np.ndarray) -> np.ndarray:
        img = np.asarray(img, dtype=np.float32)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ShapeError(f"expected (h, w, 3) image, got {img.shape}")
        if img.shape[0] % self.cfg.patch or img.shape[1] % self.cfg.patch:
            raise ShapeError(f"image {img.shape[:2]} is not divisible by patch {self.cfg.patch}")
        if img.shape[:2] != (self.cfg.img, self.cfg.img):
            raise ShapeError(f"expected {self.cfg.img}x{self.cfg.img} image, got {img.shape[:2]}")
        if not np.all(np.isfinite(img)):
            raise SchemaError("image has non-finite values")
        return img

    def patchify(self, img: np.ndarray) -> np.ndarray:
        """(img, img, 3) -> (N, d): linear patch embedding plus 2D position table."""
        img = self.check_image(img)
        p, g = self.cfg.patch, self.cfg.grid
        patches = img.reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4).reshape(g * g, p * p * 3)
        tokens = patches.astype(np.float64) @ self.patch_w.astype(np.float64) + self.patch_b
        if self.cfg.pos_embed:
            tokens = tokens + self.pos
        return tokens.astype(np.float32)

    def local_forward(self, tokens: np.ndarray) -> np.ndarray:
        n, d = tokens.shape
        side = math.isqrt(n)
        if side * side != n or d != self.cfg.d:
            raise ShapeError(f"local tower expects a square token grid of width {self.cfg.d}")
        x = np.asarray(tokens, dtype=np.float32)
        for p in self.local_blocks:
            x = window_block(x, p, self.cfg.heads, side, self.cfg.window)
        return x

    def compress(self, h_local: np.ndarray) -> np.ndarray:
        """(N, d) -> (N/16, d) via conv3x3/s2, GELU, conv3x3/s2."""
        n, d = h_local.shape
        side = math.isqrt(n)
        if side * side != n or side % 4:
            raise ShapeError(f"cannot compress {n} tokens; need a square grid with side % 4 == 0")
        grid = h_local.reshape(side, side, d)
        grid = gelu(conv3x3_s2(grid, self.conv1_w, self.conv1_b))
        grid = conv3x3_s2(grid, self.conv2_w, self.conv2_b)
        return grid.reshape(-1, d).astype(np.float32)

    def global_forward(self, h_cmp: np.ndarray) -> np.ndarray:
        if h_cmp.ndim != 2 or h_cmp.shape[1] != self.cfg.d:
            raise ShapeError(f"global tower expects width {self.cfg.d}, got {h_cmp.shape}")
        x = np.asarray(h_cmp, dtype=np.float32)
        for p in self.global_blocks:
            x = transformer_block(x, p, self.cfg.heads)
        return x

    @staticmethod
    def pool_local(h_local: np.ndarray) -> np.ndarray:
        """Average each 4x4 cell of the local grid (one cell per compressed token)."""
        n, d = h_local.shape
        side = math.isqrt(n)
        if side * side != n or side % 4:
            raise ShapeError(f"cannot pool {n} local tokens onto the compressed grid")
        cells = h_local.astype(np.float64).reshape(side // 4, 4, side // 4, 4, d)
        return cells.mean(axis=(1, 3)).reshape(-1, d).astype(np.float32)

    def fuse_local_global(self, h_global: np.ndarray, h_local: np.ndarray) -> np.ndarray:
        pooled = self.pool_local(h_local)
        if pooled.shape != h_global.shape:
            raise ShapeError(f"global {h_global.shape} vs pooled local {pooled.shape}")
        return np.concatenate([h_global, pooled], axis=1).astype(np.float32)

    def forward(self, img: np.ndarray, trace: dict | None = None) -> np.ndarray:
        tokens = self.patchify(img)
        h_local = self.local_forward(tokens)
        h_cmp = self.compress(h_local)
        h_global = self.global_forward(h_cmp)
        h_vis = self.fuse_local_global(h_global, h_local)
        if trace is not None:
            trace.update(
                image=tuple(np.shape(img)),
                H_local=h_local.shape,
                H_cmp=h_cmp.shape,
                H_global=h_global.shape,
                H_vis=h_vis.shape,
            )
        return h_vis

    __call__ = forward


def synthetic_image(size: int, seed: int) -> np.ndarray:
    """Seeded uniform [0, 1) RGB image; stands in for rendered molecules."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x1A6E])))
    return rng.random((size, size, 3)).astype(np.float32)
