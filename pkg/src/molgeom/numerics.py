"""Dense kernels shared by the encoder, projector and decoder.

Token blocks are 2D numpy arrays (rows = tokens). Grids are ``(h, w, c)``.
Kernels accumulate in float64 and return the input dtype, so float32 data
stays float32 and float64 data (gradient checks) stays float64.
"""

from __future__ import annotations

import math
import zlib
from typing import Sequence

import numpy as np
from scipy.special import erf

from molgeom.errors import DegenerateMaskError, ShapeError

NEG_INF = -1e9
_MASKED = NEG_INF / 2


def _out_dtype(*arrays) -> np.dtype:
    dt = np.result_type(*arrays)
    return dt if dt in (np.float32, np.float64) else np.dtype(np.float64)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = a.astype(np.float64) @ b.astype(np.float64)
    return out.astype(_out_dtype(a, b), copy=False)


def softmax_last_masked(logits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row softmax of ``logits + mask``; mask is an additive row vector.

    Raises DegenerateMaskError when every column is masked.
    """
    logits = np.asarray(logits)
    x = logits.astype(np.float64)
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (x.shape[-1],):
            raise ShapeError(f"mask length {mask.shape} does not match width {x.shape[-1]}")
        if np.all(mask <= _MASKED):
            raise DegenerateMaskError("every column is masked")
        x = x + mask
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=-1, keepdims=True)
    return out.astype(_out_dtype(logits), copy=False)


def layer_norm(x: np.ndarray, gain=None, bias=None, eps: float = 1e-5) -> np.ndarray:
    x = np.asarray(x)
    cols = x.shape[-1]
    gain = np.ones(cols) if gain is None else np.asarray(gain)
    bias = np.zeros(cols) if bias is None else np.asarray(bias)
    if gain.shape != (cols,) or bias.shape != (cols,):
        raise ShapeError(f"gain/bias must have length {cols}")
    xf = x.astype(np.float64)
    mu = xf.mean(axis=-1, keepdims=True)
    var = ((xf - mu) ** 2).mean(axis=-1, keepdims=True)
    y = (xf - mu) / np.sqrt(var + eps) * gain + bias
    return y.astype(_out_dtype(x), copy=False)


def normal_cdf(x):
    return 0.5 * (1.0 + erf(np.asarray(x, dtype=np.float64) / math.sqrt(2.0)))


def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    x = np.asarray(x)
    y = x.astype(np.float64) * normal_cdf(x)
    return y.astype(_out_dtype(x), copy=False) if x.ndim else float(y)


def gelu_grad(x):
    xf = np.asarray(x, dtype=np.float64)
    pdf = np.exp(-0.5 * xf * xf) / math.sqrt(2.0 * math.pi)
    return normal_cdf(xf) + xf * pdf


def conv3x3_s2(grid: np.ndarray, kernels: np.ndarray, bias=None) -> np.ndarray:
    """3x3 convolution, stride 2, zero padding 1.

    grid: (h, w, c_in); kernels: (c_out, c_in, 3, 3). Output is
    (ceil(h/2), ceil(w/2), c_out).
    """
    grid = np.asarray(grid)
    kernels = np.asarray(kernels)
    if grid.ndim != 3 or kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise ShapeError(f"bad conv shapes: grid {grid.shape}, kernels {kernels.shape}")
    h, w, c_in = grid.shape
    c_out = kernels.shape[0]
    if kernels.shape[1] != c_in:
        raise ShapeError(f"kernel expects {kernels.shape[1]} channels, grid has {c_in}")
    bias = np.zeros(c_out) if bias is None else np.asarray(bias, dtype=np.float64)
    if bias.shape != (c_out,):
        raise ShapeError(f"bias must have length {c_out}")
    ho, wo = (h + 1) // 2, (w + 1) // 2
    padded = np.zeros((2 * ho + 2, 2 * wo + 2, c_in))
    padded[1 : h + 1, 1 : w + 1] = grid
    kf = kernels.astype(np.float64)
    out = np.zeros((ho * wo, c_out))
    for dy in range(3):
        for dx in range(3):
            patch = padded[dy : dy + 2 * ho : 2, dx : dx + 2 * wo : 2]
            out += patch.reshape(-1, c_in) @ kf[:, :, dy, dx].T
    out += bias
    return out.reshape(ho, wo, c_out).astype(_out_dtype(grid, kernels), copy=False)


def window_partition(grid: np.ndarray, size: int):
    """Split (h, w, c) into non-overlapping size x size windows.

    Returns ``(windows, (h, w))`` with windows shaped (n, size, size, c), in
    row-major window order. The grid is zero-padded up to multiples of size.
    """
    if size < 1:
        raise ShapeError("window size must be >= 1")
    grid = np.asarray(grid)
    h, w, c = grid.shape
    hp = -(-h // size) * size
    wp = -(-w // size) * size
    padded = np.zeros((hp, wp, c), dtype=grid.dtype)
    padded[:h, :w] = grid
    windows = (
        padded.reshape(hp // size, size, wp // size, size, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(-1, size, size, c)
    )
    return windows, (h, w)


def window_reverse(windows: np.ndarray, size: int, extent: tuple[int, int]) -> np.ndarray:
    h, w = extent
    hp = -(-h // size) * size
    wp = -(-w // size) * size
    c = windows.shape[-1]
    grid = (
        windows.reshape(hp // size, wp // size, size, size, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(hp, wp, c)
    )
    return grid[:h, :w]


def _stream(seed: int, name: str) -> np.random.Generator:
    # Philox is counter-based; the name selects an independent key.
    key = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])
    return np.random.Generator(np.random.Philox(key))


def fan_in(shape: Sequence[int]) -> int:
    if len(shape) == 1:
        return shape[0]
    if len(shape) == 2:
        return shape[0]
    return int(np.prod(shape[1:]))


def seeded_params(shape, seed: int, name: str = "", scale: float | None = None, dtype=np.float32):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) draws, reproducible from (seed, name)."""
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    bound = scale if scale is not None else 1.0 / math.sqrt(max(1, fan_in(shape)))
    values = _stream(seed, name).uniform(-bound, bound, size=shape)
    return values.astype(dtype)
