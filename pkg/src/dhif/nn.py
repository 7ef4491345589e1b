"""Baseline differentiable layers with hand-written backward passes.

Every forward returns ``(output, tape)``.  A tape carries what the matching
backward needs and can be consumed once.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import erf

from .errors import ContractError
from .tensor import SeededRng, as_float, col2im_cm, im2col_cm, output_extent

BN_EPS = 1e-5
NORM_EPS = 1e-5


class Tape(dict):
    """Single-use cache of forward activations."""

    def __init__(self, op: str, **cached):
        super().__init__(cached)
        self.op = op
        self.used = False

    def consume(self, op: str) -> "Tape":
        if self.op != op:
            raise ContractError(f"tape from {self.op!r} passed to {op!r} backward")
        if self.used:
            raise ContractError(f"{op} tape already consumed")
        self.used = True
        return self


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = as_float(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected C x H x W or N x C x H x W, got shape {x.shape}")
    return x, False


@dataclass
class ConvParams:
    weights: np.ndarray  # C' x C x k*k
    bias: Optional[np.ndarray] = None
    k: int = 3
    stride: int = 1
    padding: int = 1

    def __post_init__(self):
        self.weights = as_float(self.weights)
        if self.weights.ndim != 3 or self.weights.shape[2] != self.k * self.k:
            raise ValueError(f"weights must be C' x C x {self.k * self.k}, got {self.weights.shape}")
        if self.k < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError("invalid convolution geometry")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def kaiming(cls, rng: SeededRng, c_in: int, c_out: int, k: int = 3, stride: int = 1,
                padding: Optional[int] = None, bias: bool = False) -> "ConvParams":
        """He-normal init, std = sqrt(2 / fan_in), fan_in = C * k * k."""
        padding = k // 2 if padding is None else padding
        std = np.sqrt(2.0 / (c_in * k * k))
        w = rng.normal(c_out * c_in * k * k, std=std).reshape(c_out, c_in, k * k)
        return cls(w, np.zeros(c_out) if bias else None, k, stride, padding)


def _flat_padded(x: np.ndarray, pad: int) -> np.ndarray:
    """Zero-pad and flatten each map, with one spare row for shifted reads."""
    n, c, h, w = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    xf = np.zeros((n, c, (hp + 1) * wp), dtype=x.dtype)
    xf.reshape(n, c, hp + 1, wp)[:, :, pad : pad + h, pad : pad + w] = x
    return xf


def conv2d_forward(x: np.ndarray, p: ConvParams):
    """Standard 2-D convolution (cross-correlation) with zero padding.

    Stride-1 layers work on the flattened padded map, where tap ``(di, dj)``
    is a plain offset ``di * wp + dj``; outputs live on a grid of padded
    width whose trailing columns are discarded.  The k*k expansion is done
    on whichever side has fewer channels.  Other strides use an explicit
    im2col matrix.
    """
    xb, single = _batched(x)
    n, c, h, w = xb.shape
    if c != p.in_channels:
        raise ValueError(f"conv2d: input has {c} channels, weights expect {p.in_channels}")
    ho = output_extent(h, p.k, p.padding, p.stride)
    wo = output_extent(w, p.k, p.padding, p.stride)
    cout, k = p.out_channels, p.k
    taps = k * k
    if p.stride != 1:
        cols = im2col_cm(xb, k, p.stride, p.padding)
        out = (p.weights.reshape(cout, -1) @ cols).reshape(n, cout, ho, wo)
        tape = Tape("conv2d", cols=cols, shape=xb.shape, params=p, single=single)
    else:
        wp = w + 2 * p.padding
        m = ho * wp
        offs = [(t // k) * wp + t % k for t in range(taps)]
        xf = _flat_padded(xb, p.padding)
        acc = np.zeros((n, cout, m), dtype=xb.dtype)
        if c <= cout:
            wmat = p.weights.reshape(cout, c * taps)
            xext = np.empty((c, taps, m), dtype=xb.dtype)
            for i in range(n):
                for t, off in enumerate(offs):
                    xext[:, t] = xf[i, :, off : off + m]
                acc[i] = wmat @ xext.reshape(c * taps, m)
        else:
            stacked = p.weights.transpose(2, 0, 1).reshape(taps * cout, c)
            for i in range(n):
                y = (stacked @ xf[i]).reshape(taps, cout, -1)
                for t, off in enumerate(offs):
                    acc[i] += y[t, :, off : off + m]
        out = acc.reshape(n, cout, ho, wp)[:, :, :, :wo]
        tape = Tape("conv2d", xf=xf, shape=xb.shape, params=p, single=single, grid=(ho, wo, wp))
    if p.bias is not None:
        out = out + p.bias[:, None, None]
    out = np.ascontiguousarray(out)
    return (out[0] if single else out), tape


def conv2d_backward(grad_out: np.ndarray, tape: Tape):
    """Returns ``(grad_x, grad_weights, grad_bias)``; grad_bias is None without a bias.

    grad_x is the col2im adjoint of the forward patch gather.
    """
    tape.consume("conv2d")
    p, shape = tape["params"], tape["shape"]
    g, _ = _batched(grad_out)
    n, c, h, w = shape
    cout, k, pad = p.out_channels, p.k, p.padding
    gb = g.sum(axis=(0, 2, 3)) if p.bias is not None else None
    wmat = p.weights.reshape(cout, -1)
    if "cols" in tape:
        cols = tape["cols"]
        gm = g.reshape(n, cout, -1)
        gw = sum(gm[i] @ cols[i].T for i in range(n)).reshape(p.weights.shape)
        gx = col2im_cm(wmat.T @ gm, shape, k, p.stride, pad)
        return (gx[0] if tape["single"] else gx), gw, gb

    ho, wo, wp = tape["grid"]
    xf = tape["xf"]
    m = ho * wp
    taps = k * k
    offs = [(t // k) * wp + t % k for t in range(taps)]
    # gext[o, t, j] = g[o, j - off_t]: every tap's view of the output gradient,
    # so grad_w = gext @ xf^T and grad_xf = W^T @ gext are single GEMMs
    dt = xf.dtype
    gext = np.zeros((cout, taps, xf.shape[2]), dtype=dt)
    gi = np.zeros((cout, ho, wp), dtype=dt)
    gw = np.zeros((cout * taps, c), dtype=dt)
    gxf = np.empty_like(xf)
    wt = p.weights.transpose(0, 2, 1).reshape(cout * taps, c).T.copy()  # C x (C' taps)
    for i in range(n):
        gi[:, :, :wo] = g[i]
        gflat = gi.reshape(cout, m)
        for t, off in enumerate(offs):
            gext[:, t, off : off + m] = gflat
        ge = gext.reshape(cout * taps, -1)
        gw += ge @ xf[i].T
        gxf[i] = wt @ ge
    gw = gw.reshape(cout, taps, c).transpose(0, 2, 1).copy()
    gx = gxf.reshape(n, c, -1, wp)[:, :, pad : pad + h, pad : pad + w]
    gx = np.ascontiguousarray(gx)
    return (gx[0] if tape["single"] else gx), gw, gb


def collapse_normalize(x: np.ndarray, epsilon: float = NORM_EPS):
    """Channel mean followed by per-sample spatial standardisation.

    Returns ``(map, tape)`` where ``map`` is ``H x W`` (or ``N x H x W``).
    """
    xb, single = _batched(x)
    m = xb.mean(axis=1)
    d = m - m.mean(axis=(1, 2), keepdims=True)
    s = np.sqrt((d * d).mean(axis=(1, 2), keepdims=True))
    # a constant map leaves only summation roundoff in d; call that zero spread
    flat = s <= 16 * np.finfo(m.dtype).eps * np.abs(m).max(axis=(1, 2), keepdims=True)
    if flat.any():
        d = np.where(flat, 0.0, d).astype(m.dtype)
        s = np.where(flat, 0.0, s).astype(m.dtype)
    y = d / (s + epsilon)
    tape = Tape("collapse_normalize", d=d, s=s, eps=epsilon, channels=xb.shape[1], single=single)
    return (y[0] if single else y), tape


def collapse_normalize_backward(grad: np.ndarray, tape: Tape) -> np.ndarray:
    tape.consume("collapse_normalize")
    d, s, eps, c = tape["d"], tape["s"], tape["eps"], tape["channels"]
    g = as_float(grad)
    if tape["single"]:
        g = g[None]
    npx = d.shape[1] * d.shape[2]
    denom = s + eps
    gd = g / denom
    # d/dd of the std term; the std is not differentiable at zero spread
    safe_s = np.where(s > 0, s, 1.0)
    coeff = np.where(s > 0, -(g * d).sum(axis=(1, 2), keepdims=True) / (denom * denom) / (npx * safe_s), 0.0)
    gd = gd + coeff * d
    gm = gd - gd.mean(axis=(1, 2), keepdims=True)
    gx = np.repeat(gm[:, None] / c, c, axis=1)
    return gx[0] if tape["single"] else gx


# Elementwise activations.  Each returns (y, tape); backward returns grad_x.

LEAKY_SLOPE = 0.01


def _act_forward(name: str, x: np.ndarray):
    x = as_float(x)
    if name == "relu":
        y = np.maximum(x, 0.0)
    elif name == "tanh":
        y = np.tanh(x)
    elif name == "sigmoid":
        y = sigmoid(x)
    elif name == "leaky_relu":
        y = np.where(x > 0, x, LEAKY_SLOPE * x)
    elif name == "gelu":
        y = 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))
    elif name == "none":
        y = x.copy()
    else:
        raise ValueError(f"unknown activation {name!r}")
    return y


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = as_float(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation_derivative(name: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d act / dx given the input ``x`` and the already computed output ``y``."""
    if name == "relu":
        return (x > 0).astype(x.dtype)
    if name == "tanh":
        return 1.0 - y * y
    if name == "sigmoid":
        return y * (1.0 - y)
    if name == "leaky_relu":
        return np.where(x > 0, 1.0, LEAKY_SLOPE)
    if name == "gelu":
        return 0.5 * (1.0 + erf(x / np.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    if name == "none":
        return np.ones_like(x)
    raise ValueError(f"unknown activation {name!r}")


def activation_forward(name: str, x: np.ndarray):
    y = _act_forward(name, x)
    return y, Tape(name, x=as_float(x), y=y)


def activation_backward(name: str, grad: np.ndarray, tape: Tape) -> np.ndarray:
    tape.consume(name)
    return grad * activation_derivative(name, tape["x"], tape["y"])


def relu_forward(x):
    return activation_forward("relu", x)


def relu_backward(grad, tape):
    return activation_backward("relu", grad, tape)


def tanh_forward(x):
    return activation_forward("tanh", x)


def tanh_backward(grad, tape):
    return activation_backward("tanh", grad, tape)


def sigmoid_forward(x):
    return activation_forward("sigmoid", x)


def sigmoid_backward(grad, tape):
    return activation_backward("sigmoid", grad, tape)


@dataclass
class BnParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    momentum: float = 0.1
    epsilon: float = BN_EPS

    def __post_init__(self):
        self.gamma = as_float(self.gamma)
        self.beta = as_float(self.beta)
        c = self.gamma.shape[0]
        if self.running_mean is None:
            self.running_mean = np.zeros(c)
        if self.running_var is None:
            self.running_var = np.ones(c)
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @classmethod
    def fresh(cls, channels: int) -> "BnParams":
        return cls(np.ones(channels), np.zeros(channels))


def _channel_sum(x: np.ndarray) -> np.ndarray:
    n, c = x.shape[:2]
    return x.reshape(n, c, -1).sum(axis=2).sum(axis=0)


def batchnorm2d_forward(x: np.ndarray, p: BnParams, training: bool = True):
    """Batch normalisation over N, H, W.

    In training mode the running statistics are updated in place (unbiased
    variance, like most frameworks); in eval mode they are used as-is.
    """
    x = as_float(x)
    if x.ndim != 4 or x.shape[1] != p.gamma.shape[0]:
        raise ValueError(f"batchnorm2d: bad input shape {x.shape}")
    cnt = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        mu = _channel_sum(x) / cnt
        xhat = x - mu[:, None, None]
        var = _channel_sum(xhat * xhat) / cnt
        unbiased = var * cnt / max(cnt - 1, 1)
        p.running_mean = (1 - p.momentum) * p.running_mean + p.momentum * mu
        p.running_var = (1 - p.momentum) * p.running_var + p.momentum * unbiased
    else:
        mu, var = p.running_mean, p.running_var
        xhat = x - mu[:, None, None]
    inv = 1.0 / np.sqrt(var + p.epsilon)
    xhat *= inv[:, None, None]
    y = xhat * p.gamma[:, None, None]
    y += p.beta[:, None, None]
    return y, Tape("batchnorm2d", xhat=xhat, inv=inv, params=p, training=training)


def batchnorm2d_backward(grad: np.ndarray, tape: Tape):
    """Returns ``(grad_x, grad_gamma, grad_beta)``."""
    tape.consume("batchnorm2d")
    xhat, inv, p = tape["xhat"], tape["inv"], tape["params"]
    cnt = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    gbeta = _channel_sum(grad)
    ggamma = _channel_sum(grad * xhat)
    scale = (p.gamma * inv)[:, None, None]
    if tape["training"]:
        gx = grad - (gbeta / cnt)[:, None, None]
        gx -= xhat * (ggamma / cnt)[:, None, None]
        gx *= scale
    else:
        gx = grad * scale
    return gx, ggamma, gbeta


SMOOTH = 1.0


def soft_iou_loss(pred: np.ndarray, gt: np.ndarray, smooth: float = SMOOTH):
    """Soft-IoU loss ``1 - (sum pg + s) / (sum p + sum g - sum pg + s)``.

    Batched inputs (``N x H x W``) give the mean of the per-sample losses.
    Returns ``(loss, grad_pred)``.
    """
    pred = as_float(pred)
    gt = np.asarray(gt, dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise ValueError(f"soft_iou_loss: shape mismatch {pred.shape} vs {gt.shape}")
    single = pred.ndim == 2
    p = pred[None] if single else pred
    g = gt[None] if single else gt
    axes = tuple(range(1, p.ndim))
    inter = (p * g).sum(axis=axes)
    union = p.sum(axis=axes) + g.sum(axis=axes) - inter
    num, den = inter + smooth, union + smooth
    loss = float(np.mean(1.0 - num / den))
    # d(num/den)/dp = g/den - num*(1-g)/den^2
    shp = (-1,) + (1,) * (p.ndim - 1)
    dratio = g / den.reshape(shp) - (num / den**2).reshape(shp) * (1.0 - g)
    grad = -dratio / p.shape[0]
    return loss, (grad[0] if single else grad)
