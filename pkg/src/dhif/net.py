"""Residual blocks, the miniature encoder-decoder detector, and Adam."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .layer import DhifParams, dhif_backward, dhif_forward, param_count
from .nn import (
    BnParams,
    ConvParams,
    Tape,
    batchnorm2d_backward,
    batchnorm2d_forward,
    conv2d_backward,
    conv2d_forward,
    relu_backward,
    relu_forward,
    sigmoid,
)
from .tensor import SeededRng, as_float

BLOCK_ORDERS = ("dhif_first", "dhif_second")


def _conv_fwd(p, x):
    if isinstance(p, DhifParams):
        return dhif_forward(x, p)
    return conv2d_forward(x, p)


def _conv_bwd(p, g, tape, prefix: str, grads: dict) -> np.ndarray:
    if isinstance(p, DhifParams):
        d = dhif_backward(g, tape)
        grads[prefix + ".weights"] = d.weights
        grads[prefix + ".projection"] = d.projection
        grads[prefix + ".projection_bias"] = d.projection_bias
        if d.bias is not None:
            grads[prefix + ".bias"] = d.bias
        return d.x
    gx, gw, gb = conv2d_backward(g, tape)
    grads[prefix + ".weights"] = gw
    if gb is not None:
        grads[prefix + ".bias"] = gb
    return gx


def _conv_params(p, prefix: str) -> dict:
    out = {}
    conv = p.out_conv if isinstance(p, DhifParams) else p
    out[prefix + ".weights"] = conv.weights
    if conv.bias is not None:
        out[prefix + ".bias"] = conv.bias
    if isinstance(p, DhifParams):
        out[prefix + ".projection"] = p.projection
        out[prefix + ".projection_bias"] = p.projection_bias
    return out


def _cast(p, dtype) -> None:
    """Convert a parameter record's arrays to ``dtype`` in place."""
    if isinstance(p, DhifParams):
        p.projection = p.projection.astype(dtype)
        p.projection_bias = p.projection_bias.astype(dtype)
        _cast(p.out_conv, dtype)
    elif isinstance(p, ConvParams):
        p.weights = p.weights.astype(dtype)
        if p.bias is not None:
            p.bias = p.bias.astype(dtype)
    elif isinstance(p, BnParams):
        for name in ("gamma", "beta", "running_mean", "running_var"):
            setattr(p, name, getattr(p, name).astype(dtype))


def _bn_params(p: BnParams, prefix: str) -> dict:
    return {prefix + ".gamma": p.gamma, prefix + ".beta": p.beta}


class ResBlock:
    """``relu(shortcut(x) + bn2(conv2(relu(bn1(conv1(x))))))``.

    With ``dhif=True`` the first convolution is a DHiF layer; the
    ``dhif_second`` order swaps it into the second slot instead.
    """

    def __init__(self, rng: SeededRng, c_in: int, c_out: int, k: int = 3, dhif: bool = False,
                 nonlinearity: str = "tanh", order: str = "dhif_first"):
        if order not in BLOCK_ORDERS:
            raise ValueError(f"unknown block order {order!r}")
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.dhif, self.order = dhif, order
        first_dhif = dhif and order == "dhif_first"
        second_dhif = dhif and order == "dhif_second"
        self.conv1 = (DhifParams.init(rng, c_in, c_out, k, nonlinearity=nonlinearity) if first_dhif
                      else ConvParams.kaiming(rng, c_in, c_out, k))
        self.bn1 = BnParams.fresh(c_out)
        self.conv2 = (DhifParams.init(rng, c_out, c_out, k, nonlinearity=nonlinearity) if second_dhif
                      else ConvParams.kaiming(rng, c_out, c_out, k))
        self.bn2 = BnParams.fresh(c_out)
        if c_in != c_out:
            self.shortcut: Optional[tuple] = (ConvParams.kaiming(rng, c_in, c_out, 1, padding=0), BnParams.fresh(c_out))
        else:
            self.shortcut = None

    def astype(self, dtype) -> None:
        parts = [self.conv1, self.bn1, self.conv2, self.bn2]
        if self.shortcut is not None:
            parts.extend(self.shortcut)
        for p in parts:
            _cast(p, dtype)

    def params(self, prefix: str = "") -> dict:
        out = {}
        out.update(_conv_params(self.conv1, prefix + "conv1"))
        out.update(_bn_params(self.bn1, prefix + "bn1"))
        out.update(_conv_params(self.conv2, prefix + "conv2"))
        out.update(_bn_params(self.bn2, prefix + "bn2"))
        if self.shortcut is not None:
            out[prefix + "shortcut.weights"] = self.shortcut[0].weights
            out.update(_bn_params(self.shortcut[1], prefix + "shortcut_bn"))
        return out

    def buffers(self, prefix: str = "") -> dict:
        bns = [("bn1", self.bn1), ("bn2", self.bn2)]
        if self.shortcut is not None:
            bns.append(("shortcut_bn", self.shortcut[1]))
        out = {}
        for name, bn in bns:
            out[f"{prefix}{name}.running_mean"] = bn.running_mean
            out[f"{prefix}{name}.running_var"] = bn.running_var
        return out

    def set_buffers(self, values: dict, prefix: str = "") -> None:
        bns = {"bn1": self.bn1, "bn2": self.bn2}
        if self.shortcut is not None:
            bns["shortcut_bn"] = self.shortcut[1]
        for name, bn in bns.items():
            bn.running_mean = np.array(values[f"{prefix}{name}.running_mean"], dtype=bn.gamma.dtype)
            bn.running_var = np.array(values[f"{prefix}{name}.running_var"], dtype=bn.gamma.dtype)

    def forward(self, x: np.ndarray, training: bool = True):
        if x.shape[1] != self.c_in:
            raise ValueError(f"block expects {self.c_in} channels, got {x.shape[1]}")
        t = {}
        h, t["c1"] = _conv_fwd(self.conv1, x)
        h, t["b1"] = batchnorm2d_forward(h, self.bn1, training)
        h, t["r1"] = relu_forward(h)
        h, t["c2"] = _conv_fwd(self.conv2, h)
        h, t["b2"] = batchnorm2d_forward(h, self.bn2, training)
        if self.shortcut is not None:
            s, t["sc"] = conv2d_forward(x, self.shortcut[0])
            s, t["sb"] = batchnorm2d_forward(s, self.shortcut[1], training)
        else:
            s = x
        y, t["out"] = relu_forward(s + h)
        return y, Tape("res_block", **t)

    def backward(self, grad: np.ndarray, tape: Tape, prefix: str = ""):
        """Returns ``(grad_x, grads)`` with grads keyed like :meth:`params`."""
        t = tape.consume("res_block")
        grads: dict = {}
        g = relu_backward(grad, t["out"])
        gh, grads[prefix + "bn2.gamma"], grads[prefix + "bn2.beta"] = batchnorm2d_backward(g, t["b2"])
        gh = _conv_bwd(self.conv2, gh, t["c2"], prefix + "conv2", grads)
        gh = relu_backward(gh, t["r1"])
        gh, grads[prefix + "bn1.gamma"], grads[prefix + "bn1.beta"] = batchnorm2d_backward(gh, t["b1"])
        gx = _conv_bwd(self.conv1, gh, t["c1"], prefix + "conv1", grads)
        if self.shortcut is not None:
            gs, grads[prefix + "shortcut_bn.gamma"], grads[prefix + "shortcut_bn.beta"] = batchnorm2d_backward(g, t["sb"])
            gsx, grads[prefix + "shortcut.weights"], _ = conv2d_backward(gs, t["sc"])
            gx = gx + gsx
        else:
            gx = gx + g
        return gx, grads


def res_block_forward(x, block: ResBlock, training: bool = True):
    return block.forward(x, training)


def res_block_backward(grad, tape, block: ResBlock):
    return block.backward(grad, tape)


def maxpool2_forward(x: np.ndarray):
    n, c, h, w = x.shape
    v = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = v.argmax(axis=-1)
    out = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
    return out, Tape("maxpool2", idx=idx, shape=x.shape)


def maxpool2_backward(grad: np.ndarray, tape: Tape) -> np.ndarray:
    tape.consume("maxpool2")
    n, c, h, w = tape["shape"]
    g = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad.dtype)
    np.put_along_axis(g, tape["idx"][..., None], grad[..., None], axis=-1)
    return g.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def upsample2(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2_backward(grad: np.ndarray) -> np.ndarray:
    n, c, h, w = grad.shape
    return grad.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


@dataclass
class NetConfig:
    levels: int = 3
    channels: tuple = (8, 16, 32)
    dhif_levels: frozenset = frozenset()
    kernel_size: int = 3
    nonlinearity: str = "tanh"
    block_order: str = "dhif_first"
    in_channels: int = 1

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.dhif_levels = frozenset(int(l) for l in self.dhif_levels)
        if len(self.channels) != self.levels:
            raise ValueError(f"{self.levels} levels need {self.levels} channel counts, got {self.channels}")
        bad = [l for l in self.dhif_levels if not 1 <= l <= self.levels]
        if bad:
            raise ValueError(f"dhif levels {sorted(bad)} outside 1..{self.levels}")


class MiniDetector:
    """U-Net style detector: residual encoder levels with max-pool between them,
    a mirrored decoder with nearest upsampling and skip concatenation, and a
    1x1 conv + sigmoid head.  Encoder levels listed in ``cfg.dhif_levels``
    use DHiF residual blocks.
    """

    def __init__(self, cfg: NetConfig, seed: int = 0, dtype=np.float64):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = SeededRng(seed)
        ch, k = cfg.channels, cfg.kernel_size
        self.enc = []
        prev = cfg.in_channels
        for lvl in range(cfg.levels):
            self.enc.append(ResBlock(rng, prev, ch[lvl], k, dhif=(lvl + 1) in cfg.dhif_levels,
                                     nonlinearity=cfg.nonlinearity, order=cfg.block_order))
            prev = ch[lvl]
        # dec[l] fuses the upsampled level l+1 output with the level l skip
        self.dec = [ResBlock(rng, ch[l + 1] + ch[l], ch[l], k) for l in range(cfg.levels - 1)]
        self.head = ConvParams.kaiming(rng, ch[0], 1, 1, padding=0, bias=True)
        if self.dtype != np.float64:
            for _, b in self._blocks():
                b.astype(self.dtype)
            _cast(self.head, self.dtype)

    def _blocks(self):
        for i, b in enumerate(self.enc):
            yield f"enc{i + 1}.", b
        for i, b in enumerate(self.dec):
            yield f"dec{i + 1}.", b

    def params(self) -> dict:
        out = {}
        for prefix, b in self._blocks():
            out.update(b.params(prefix))
        out["head.weights"] = self.head.weights
        out["head.bias"] = self.head.bias
        return out

    def buffers(self) -> dict:
        out = {}
        for prefix, b in self._blocks():
            out.update(b.buffers(prefix))
        return out

    def set_buffers(self, values: dict) -> None:
        for prefix, b in self._blocks():
            b.set_buffers(values, prefix)

    def load(self, params: dict, buffers: dict) -> None:
        live = self.params()
        if set(live) != set(params):
            missing = sorted(set(live) ^ set(params))
            raise ValueError(f"checkpoint parameters do not match the network: {missing[:5]}")
        for name, arr in live.items():
            src = np.asarray(params[name], dtype=arr.dtype)
            if src.shape != arr.shape:
                raise ValueError(f"{name}: shape {src.shape} != {arr.shape}")
            arr[...] = src
        self.set_buffers(buffers)

    def n_params(self) -> int:
        return int(sum(a.size for a in self.params().values()))

    def dhif_layers(self) -> list:
        out = []
        for prefix, b in self._blocks():
            for name in ("conv1", "conv2"):
                p = getattr(b, name)
                if isinstance(p, DhifParams):
                    out.append((prefix + name, p))
        return out

    def extra_params(self) -> int:
        return sum(param_count(p)[1] for _, p in self.dhif_layers())

    def forward(self, images: np.ndarray, training: bool = True):
        """``images`` is ``N x C x H x W``; returns ``(probabilities N x H x W, tape)``."""
        x = np.asarray(images, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        step = 2 ** (self.cfg.levels - 1)
        if x.shape[2] % step or x.shape[3] % step:
            raise ValueError(f"spatial extents {x.shape[2:]} must be divisible by {step}")
        tapes = {"enc": [], "pool": [], "dec": []}
        skips = []
        h = x
        for lvl, block in enumerate(self.enc):
            h, t = block.forward(h, training)
            tapes["enc"].append(t)
            if lvl < self.cfg.levels - 1:
                skips.append(h)
                h, pt = maxpool2_forward(h)
                tapes["pool"].append(pt)
        for l in reversed(range(self.cfg.levels - 1)):
            up = upsample2(h)
            h, t = self.dec[l].forward(np.concatenate([up, skips[l]], axis=1), training)
            tapes["dec"].append(t)
        logits, tapes["head"] = conv2d_forward(h, self.head)
        prob = sigmoid(logits[:, 0])
        tapes["prob"] = prob
        return prob, Tape("detector", **tapes)

    def backward(self, grad_prob: np.ndarray, tape: Tape):
        """Returns ``(grad_images, grads)``."""
        t = tape.consume("detector")
        grads: dict = {}
        prob = t["prob"]
        glog = (grad_prob * prob * (1.0 - prob))[:, None]
        gh, grads["head.weights"], grads["head.bias"] = conv2d_backward(glog, t["head"])
        gskips = [None] * (self.cfg.levels - 1)
        n_dec = self.cfg.levels - 1
        for l in range(n_dec):
            # decoder tapes are stored in forward order, deepest level first
            gcat, g = self.dec[l].backward(gh, t["dec"][n_dec - 1 - l], f"dec{l + 1}.")
            grads.update(g)
            cu = self.cfg.channels[l + 1]
            gskips[l] = gcat[:, cu:]
            gh = upsample2_backward(gcat[:, :cu])
        for lvl in reversed(range(self.cfg.levels)):
            if lvl < self.cfg.levels - 1:
                gh = maxpool2_backward(gh, t["pool"][lvl]) + gskips[lvl]
            gh, g = self.enc[lvl].backward(gh, t["enc"][lvl], f"enc{lvl + 1}.")
            grads.update(g)
        return gh, grads


def detector_forward(image: np.ndarray, net: MiniDetector) -> np.ndarray:
    """Eval-mode probability map for one ``1 x H x W`` image."""
    prob, _ = net.forward(np.asarray(image)[None], training=False)
    return prob[0]


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        mhat = m / (1 - state.beta1**t)
        vhat = v / (1 - state.beta2**t)
        p -= lr * mhat / (np.sqrt(vhat) + state.eps)
