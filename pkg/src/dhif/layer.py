"""Dynamic high-frequency convolution.

At every output location the layer looks at the k x k window of a
single-channel standardised copy of its input, maps it through an affine
projection R^{k^2} -> R^{k^4} and a squashing nonlinearity, and reads the
result as a bank of k^2 local filters ``W_f`` (one column per window tap).
The input window is filtered with the bank and the filtered window is added
back to the raw window before the ordinary ``C' x C x k^2`` convolution
contracts it:

    out[j] = sum_{c,i} (patch + patch @ W_f)[c, i] * W_j[c, i]

With a zero projection and zero bias the bank vanishes under ``tanh`` and
the layer is exactly a standard convolution.

Bank layout: the projection output ``v`` (length k^4) is reshaped row-major
to ``k^2 x k^2``, so ``W_f[m, i] = theta(v[m * k^2 + i])`` and column ``i``
is the kernel of filter ``i`` applied to the window tap ``m``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DumpParseError
from .nn import (
    NORM_EPS,
    ConvParams,
    Tape,
    _act_forward,
    _batched,
    activation_derivative,
    collapse_normalize,
    collapse_normalize_backward,
)
from .tensor import SeededRng, as_float, col2im, im2col, output_extent

NONLINEARITIES = ("tanh", "sigmoid", "leaky_relu", "gelu", "none")


@dataclass
class DhifParams:
    projection: np.ndarray  # k^2 x k^4
    projection_bias: np.ndarray  # k^4
    out_conv: ConvParams
    nonlinearity: str = "tanh"
    epsilon: float = NORM_EPS

    def __post_init__(self):
        k2 = self.k * self.k
        self.projection = as_float(self.projection)
        self.projection_bias = as_float(self.projection_bias)
        if self.projection.shape != (k2, k2 * k2):
            raise ValueError(f"projection must be {k2} x {k2 * k2}, got {self.projection.shape}")
        if self.projection_bias.shape != (k2 * k2,):
            raise ValueError(f"projection_bias must have length {k2 * k2}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")

    # the filter generator and the output conv share one sliding window
    @property
    def k(self) -> int:
        return self.out_conv.k

    @property
    def stride(self) -> int:
        return self.out_conv.stride

    @property
    def padding(self) -> int:
        return self.out_conv.padding

    @classmethod
    def init(cls, rng: SeededRng, c_in: int, c_out: int, k: int = 3, stride: int = 1,
             padding: Optional[int] = None, nonlinearity: str = "tanh", bias: bool = False) -> "DhifParams":
        """Kaiming output conv, zero projection: starts out as a plain convolution."""
        conv = ConvParams.kaiming(rng, c_in, c_out, k, stride, padding, bias=bias)
        k2 = k * k
        return cls(np.zeros((k2, k2 * k2)), np.zeros(k2 * k2), conv, nonlinearity)


@dataclass
class FilterBank:
    """Per-location kernels, ``H' x W' x k^2 x k^2`` indexed ``[r, c, m, i]``."""

    kernels: np.ndarray

    @property
    def k(self) -> int:
        return int(round(np.sqrt(self.kernels.shape[-1])))

    def filter(self, r: int, c: int, i: int) -> np.ndarray:
        """Filter ``i`` at location ``(r, c)`` as a k x k kernel."""
        k = self.k
        return self.kernels[r, c, :, i].reshape(k, k)


def _bank_from_norm(f_norm: np.ndarray, p: DhifParams):
    """Batched filter generation from ``N x H x W`` normalised maps."""
    k2 = p.k * p.k
    pn = im2col(f_norm[:, None], p.k, p.stride, p.padding)[:, :, 0, :]  # N L k2
    v = pn @ p.projection + p.projection_bias
    w = _act_forward(p.nonlinearity, v)
    bank = w.reshape(*w.shape[:2], k2, k2)
    return pn, v, w, bank


def generate_filter_bank(f_norm: np.ndarray, p: DhifParams) -> FilterBank:
    f_norm = as_float(f_norm)
    if f_norm.ndim != 2:
        raise ValueError(f"f_norm must be H x W, got {f_norm.shape}")
    h, w = f_norm.shape
    ho = output_extent(h, p.k, p.padding, p.stride)
    wo = output_extent(w, p.k, p.padding, p.stride)
    _, _, _, bank = _bank_from_norm(f_norm[None], p)
    k2 = p.k * p.k
    return FilterBank(np.ascontiguousarray(bank[0].reshape(ho, wo, k2, k2)))


def apply_filter_bank(x_patches: np.ndarray, bank: FilterBank) -> np.ndarray:
    """``filtered[r, c, ch, i] = sum_m patch[r, c, ch, m] * W_f[r, c, m, i]``."""
    x_patches = as_float(x_patches)
    kern = bank.kernels
    if x_patches.ndim != 4 or x_patches.shape[:2] != kern.shape[:2] or x_patches.shape[3] != kern.shape[2]:
        raise ValueError(f"patches {x_patches.shape} do not match bank {kern.shape}")
    return x_patches @ kern


def dhif_forward(x: np.ndarray, p: DhifParams):
    """Returns ``(out, tape)``; ``x`` may be ``C x H x W`` or a batch."""
    xb, single = _batched(x)
    n, c, h, w = xb.shape
    if c != p.out_conv.in_channels:
        raise ValueError(f"dhif: input has {c} channels, weights expect {p.out_conv.in_channels}")
    ho = output_extent(h, p.k, p.padding, p.stride)
    wo = output_extent(w, p.k, p.padding, p.stride)
    f_norm, norm_tape = collapse_normalize(xb, p.epsilon)
    pn, v, wv, bank = _bank_from_norm(f_norm, p)
    patches = im2col(xb, p.k, p.stride, p.padding)  # N L C k2
    combined = patches + patches @ bank
    cout = p.out_conv.out_channels
    wmat = p.out_conv.weights.reshape(cout, -1)
    out = combined.reshape(n, ho * wo, -1) @ wmat.T
    if p.out_conv.bias is not None:
        out = out + p.out_conv.bias
    out = out.transpose(0, 2, 1).reshape(n, cout, ho, wo)
    tape = Tape("dhif", norm_tape=norm_tape, pn=pn, v=v, wv=wv, bank=bank, patches=patches,
                combined=combined, shape=xb.shape, params=p, single=single, out_hw=(ho, wo))
    return (out[0] if single else out), tape


@dataclass
class DhifGrads:
    x: np.ndarray
    projection: np.ndarray
    projection_bias: np.ndarray
    weights: np.ndarray
    bias: Optional[np.ndarray] = None


def dhif_backward(grad_out: np.ndarray, tape: Tape) -> DhifGrads:
    """Exact gradients through the direct, filtered and filter-generation paths."""
    tape.consume("dhif")
    p: DhifParams = tape["params"]
    n, c, h, w = tape["shape"]
    k, k2 = p.k, p.k * p.k
    g, _ = _batched(grad_out)
    cout = p.out_conv.out_channels
    g = g.reshape(n, cout, -1).transpose(0, 2, 1)  # N L C'
    combined, patches, bank = tape["combined"], tape["patches"], tape["bank"]
    L = patches.shape[1]

    gflat = g.reshape(n * L, cout)
    gw = (gflat.T @ combined.reshape(n * L, -1)).reshape(p.out_conv.weights.shape)
    gb = gflat.sum(axis=0) if p.out_conv.bias is not None else None
    gcomb = (gflat @ p.out_conv.weights.reshape(cout, -1)).reshape(n, L, c, k2)

    # combined = patches + patches @ bank
    gpatch = gcomb + gcomb @ bank.swapaxes(-1, -2)
    gbank = patches.swapaxes(-1, -2) @ gcomb  # N L m i
    gv = gbank.reshape(n, L, k2 * k2) * activation_derivative(p.nonlinearity, tape["v"], tape["wv"])

    pn = tape["pn"]
    gproj = pn.reshape(-1, k2).T @ gv.reshape(-1, k2 * k2)
    gpbias = gv.sum(axis=(0, 1))
    gpn = gv @ p.projection.T  # N L k2
    gnorm = col2im(gpn[:, :, None, :], (n, 1, h, w), k, p.stride, p.padding)[:, 0]
    gx = col2im(gpatch, (n, c, h, w), k, p.stride, p.padding)
    gx += collapse_normalize_backward(gnorm, tape["norm_tape"])
    if tape["single"]:
        gx = gx[0]
    return DhifGrads(gx, gproj, gpbias, gw, gb)


def param_count(p: DhifParams) -> tuple[int, int]:
    """``(total, extra_vs_standard)`` learnable parameters."""
    cout, cin, k2 = p.out_conv.weights.shape
    extra = k2 * k2 * k2 + k2 * k2
    bias = cout if p.out_conv.bias is not None else 0
    return cout * cin * k2 + bias + extra, extra


def dump_filter_bank(bank: FilterBank, path) -> None:
    """Write ``r c i m value`` lines, one per coefficient."""
    kern = bank.kernels
    ho, wo, k2, _ = kern.shape
    with open(path, "w") as fh:
        for r in range(ho):
            for c in range(wo):
                for i in range(k2):
                    for m in range(k2):
                        fh.write(f"{r} {c} {i} {m} {float(kern[r, c, m, i])!r}\n")


def load_filter_bank(path) -> FilterBank:
    """Parse a dump back into a bank; malformed lines raise :class:`DumpParseError`."""
    entries = []
    with open(Path(path)) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise DumpParseError(lineno, f"expected 5 fields, got {len(parts)}")
            try:
                r, c, i, m = (int(t) for t in parts[:4])
                val = float(parts[4])
            except ValueError as exc:
                raise DumpParseError(lineno, str(exc)) from None
            if min(r, c, i, m) < 0:
                raise DumpParseError(lineno, "negative index")
            entries.append((r, c, i, m, val))
    if not entries:
        raise DumpParseError(0, "empty filter-bank dump")
    arr = np.array(entries)
    idx = arr[:, :4].astype(int)
    ho, wo, k2 = idx[:, 0].max() + 1, idx[:, 1].max() + 1, max(idx[:, 2].max(), idx[:, 3].max()) + 1
    k = int(round(np.sqrt(k2)))
    if k * k != k2:
        raise DumpParseError(len(entries), f"filter length {k2} is not a square")
    kern = np.full((ho, wo, k2, k2), np.nan)
    kern[idx[:, 0], idx[:, 1], idx[:, 3], idx[:, 2]] = arr[:, 4]
    if np.isnan(kern).any():
        raise DumpParseError(len(entries), "dump does not cover every (r, c, i, m) index")
    return FilterBank(kern)
