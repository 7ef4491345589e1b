"""Array plumbing shared by every layer.

Tensors are plain ``numpy.ndarray`` objects (float64 by default), channel-first
(``N x C x H x W`` for batches, ``C x H x W`` for single maps).  This module
adds the pieces numpy does not ship: convolution geometry, zero-padded patch
extraction (im2col) with its exact adjoint (col2im), and a small portable PRNG
whose stream is fixed by algorithm rather than by numpy version.
"""
from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1


def as_float(x) -> np.ndarray:
    """View ``x`` as a float array: float32 input stays float32, anything else is float64."""
    x = np.asarray(x)
    if x.dtype == np.float32 or x.dtype == np.float64:
        return x
    return x.astype(np.float64)


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a contiguous float64 array."""
    return np.ascontiguousarray(x, dtype=np.float64)


def output_extent(size: int, k: int, padding: int, stride: int) -> int:
    """Number of sliding-window positions along one axis."""
    if k < 1 or stride < 1 or padding < 0:
        raise ValueError(f"invalid geometry k={k} stride={stride} padding={padding}")
    if size + 2 * padding < k:
        raise ValueError(f"window {k} larger than padded extent {size + 2 * padding}")
    return (size + 2 * padding - k) // stride + 1


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(padding, padding), (padding, padding)]
    return np.pad(x, widths)


def im2col(x: np.ndarray, k: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Gather every k x k window of a batch.

    ``x`` is ``N x C x H x W``; the result is ``N x L x C x k*k`` with
    ``L = H' * W'`` output locations in row-major order and the window taps
    flattened row-major.
    """
    n, c, h, w = x.shape
    ho = output_extent(h, k, padding, stride)
    wo = output_extent(w, k, padding, stride)
    xp = _pad(x, padding)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # N C Ho Wo k k -> N Ho Wo C k k
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c, k * k)
    return np.ascontiguousarray(cols)


def col2im(cols: np.ndarray, shape: tuple, k: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Scatter-add patches back onto a map; the adjoint of :func:`im2col`."""
    n, c, h, w = shape
    ho = output_extent(h, k, padding, stride)
    wo = output_extent(w, k, padding, stride)
    cols = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for di in range(k):
        for dj in range(k):
            out[:, :, di : di + stride * (ho - 1) + 1 : stride, dj : dj + stride * (wo - 1) + 1 : stride] += cols[:, :, di, dj]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(out)


def im2col_cm(x: np.ndarray, k: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Channel-major patch matrix ``N x (C*k*k) x L`` for GEMM convolution."""
    n, c, h, w = x.shape
    ho = output_extent(h, k, padding, stride)
    wo = output_extent(w, k, padding, stride)
    xp = _pad(x, padding)
    cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            cols[:, :, di, dj] = xp[:, :, di : di + stride * (ho - 1) + 1 : stride, dj : dj + stride * (wo - 1) + 1 : stride]
    return cols.reshape(n, c * k * k, ho * wo)


def col2im_cm(cols: np.ndarray, shape: tuple, k: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col_cm`."""
    n, c, h, w = shape
    ho = output_extent(h, k, padding, stride)
    wo = output_extent(w, k, padding, stride)
    cols = cols.reshape(n, c, k, k, ho, wo)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for di in range(k):
        for dj in range(k):
            out[:, :, di : di + stride * (ho - 1) + 1 : stride, dj : dj + stride * (wo - 1) + 1 : stride] += cols[:, :, di, dj]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(out)


def extract_patch(fmap: np.ndarray, center: tuple[int, int], k: int, padding: int, stride: int = 1) -> np.ndarray:
    """Flattened ``C x k*k`` window at output-grid position ``center``.

    Positions outside the map read as zero.
    """
    fmap = as_float(fmap)
    if fmap.ndim == 2:
        fmap = fmap[None]
    c, h, w = fmap.shape
    ho = output_extent(h, k, padding, stride)
    wo = output_extent(w, k, padding, stride)
    r, q = center
    if not (0 <= r < ho and 0 <= q < wo):
        raise ValueError(f"center {center} outside the {ho}x{wo} output grid")
    xp = _pad(fmap[None], padding)[0]
    r0, q0 = r * stride, q * stride
    return xp[:, r0 : r0 + k, q0 : q0 + k].reshape(c, k * k).copy()


def _check_same(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return a + b


def hadamard(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "hadamard")
    return a * b


def matmul(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def reshape(a, shape) -> np.ndarray:
    a = as_tensor(a)
    if math.prod(shape) != a.size:
        raise ValueError(f"reshape: cannot view {a.shape} as {tuple(shape)}")
    return a.reshape(shape)


def reduce_sum(a, axis=None):
    return as_tensor(a).sum(axis=axis)


def reduce_mean(a, axis=None):
    return as_tensor(a).mean(axis=axis)


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step: returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def derive_seeds(seed: int, n: int) -> list[int]:
    """``n`` child seeds from successive SplitMix64 outputs of ``seed``."""
    state, out = seed & MASK64, []
    for _ in range(n):
        state, z = splitmix64(state)
        out.append(z)
    return out


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class SeededRng:
    """xoshiro256++ seeded through SplitMix64.

    The stream depends only on the seed, so synthetic data and weight
    initialisation are reproducible bit-for-bit on any platform.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed & MASK64
        self.state = derive_seeds(self.seed, 4)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.state
        result = (_rotl((s0 + s3) & MASK64, 23) + s0) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.state = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """One uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        if n < 0:
            raise ValueError("n must be non-negative")
        u = np.fromiter((self.random() for _ in range(n)), dtype=np.float64, count=n)
        return low + (high - low) * u

    def normal(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Box-Muller on consecutive uniform pairs; both outputs of a pair are used."""
        if n < 0:
            raise ValueError("n must be non-negative")
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        rad = np.sqrt(-2.0 * np.log1p(-u[:, 0]))  # 1 - u1 lies in (0, 1]
        ang = 2.0 * np.pi * u[:, 1]
        z = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1).reshape(-1)[:n]
        return mean + std * z

    def integers(self, low: int, high: int) -> int:
        """Uniform integer in ``[low, high]`` inclusive."""
        if high < low:
            raise ValueError("empty integer range")
        return low + int(self.random() * (high - low + 1))


def rng_uniform(rng: SeededRng, n: int) -> np.ndarray:
    return rng.uniform(n)


def rng_normal(rng: SeededRng, n: int) -> np.ndarray:
    return rng.normal(n)
