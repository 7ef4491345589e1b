"""Central finite-difference checks for every hand-written backward pass.

Each check builds a scalar objective ``L = sum(out * R)`` with a fixed random
``R`` (the loss check differentiates the loss itself), perturbs inputs and
parameters one coordinate at a time with step ``h`` and compares against the
analytic gradient.  The error of a group is the norm-relative error
``|g - g_fd| / max(|g|, |g_fd|, 1)`` over the checked coordinates; the
unit floor keeps groups whose exact gradient vanishes (a 1x1 conv of one
channel feeding batch norm is scale invariant) from comparing roundoff.  Groups
larger than ``max_coords`` are checked on a seeded random subset of
coordinates unless ``exhaustive`` is set.

ReLU and max-pool are not differentiable at their switching points.  In
network-level checks a coordinate whose +h or -h perturbation flips any ReLU
sign or max-pool winner is skipped; skipped counts are reported.
"""
from __future__ import annotations

import hashlib
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import net as _net
from .layer import DhifParams, dhif_backward, dhif_forward
from .net import MiniDetector, NetConfig, ResBlock
from .nn import (
    BnParams,
    ConvParams,
    batchnorm2d_backward,
    batchnorm2d_forward,
    collapse_normalize,
    collapse_normalize_backward,
    conv2d_backward,
    conv2d_forward,
    soft_iou_loss,
)
from .tensor import SeededRng

STEP = 1e-5
TOLERANCE = 1e-6


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1.0)
    return float(np.linalg.norm(a - b) / scale)


def _coords(size: int, limit: int | None, rng: np.random.Generator) -> np.ndarray:
    if limit is None or size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, limit, replace=False))


class PatternProbe:
    """Fingerprints the ReLU signs and max-pool winners of the last forward pass."""

    def __init__(self):
        self.digest = hashlib.sha1()

    def reset(self) -> bytes:
        d = self.digest.digest()
        self.digest = hashlib.sha1()
        return d


@contextmanager
def activation_pattern():
    probe = PatternProbe()
    relu, pool = _net.relu_forward, _net.maxpool2_forward

    def relu_probe(x):
        probe.digest.update(np.packbits(np.asarray(x) > 0).tobytes())
        return relu(x)

    def pool_probe(x):
        n, c, h, w = x.shape
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        probe.digest.update(win.argmax(axis=-1).astype(np.uint8).tobytes())
        return pool(x)

    _net.relu_forward, _net.maxpool2_forward = relu_probe, pool_probe
    try:
        yield probe
    finally:
        _net.relu_forward, _net.maxpool2_forward = relu, pool


def fd_gradient(f, arr: np.ndarray, coords: np.ndarray, h: float = STEP, probe=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (mutated in place, then restored).

    With a ``probe``, coordinates whose perturbation changes the activation
    pattern come back as NaN.
    """
    flat = arr.reshape(-1)
    out = np.empty(len(coords))
    if probe is not None:
        probe.reset()
        f()
        base = probe.reset()
    for n, i in enumerate(coords):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        same = probe is None or probe.reset() == base
        flat[i] = old - h
        fm = f()
        same = same and (probe is None or probe.reset() == base)
        flat[i] = old
        out[n] = (fp - fm) / (2 * h) if same else np.nan
    return out


def compare(f, named: dict, grads: dict, seed: int, max_coords: int | None, probe=None) -> dict:
    """Per-name relative errors; ``named`` maps names to the arrays ``f`` reads.

    The count of skipped (non-differentiable) coordinates is stored under ``"skipped"``.
    """
    rng = np.random.default_rng(seed)
    errs, skipped = {}, 0
    for name, arr in named.items():
        idx = _coords(arr.size, max_coords, rng)
        fd = fd_gradient(f, arr, idx, probe=probe)
        ok = ~np.isnan(fd)
        skipped += int((~ok).sum())
        errs[name] = rel_error(np.ravel(grads[name])[idx][ok], fd[ok])
    errs["skipped"] = skipped
    return errs


@dataclass
class GroupResult:
    name: str
    instances: int = 0
    max_error: float = 0.0
    worst: str = ""
    errors: list = field(default_factory=list)
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_error <= TOLERANCE

    def add(self, errs: dict, label: str) -> None:
        self.instances += 1
        errs = dict(errs)
        self.skipped += errs.pop("skipped", 0)
        for k, v in errs.items():
            self.errors.append(v)
            if v >= self.max_error:
                self.max_error, self.worst = v, f"{label}:{k}"


def _normal(rng: SeededRng, shape, std: float = 1.0) -> np.ndarray:
    n = int(np.prod(shape))
    return rng.normal(n, std=std).reshape(shape)


def check_conv(rng: SeededRng, k: int, c: int, cout: int, stride: int, seed: int, max_coords):
    x = _normal(rng, (2, c, 5 + k, 6))
    p = ConvParams(_normal(rng, (cout, c, k * k)), _normal(rng, (cout,)), k, stride, k // 2)
    r = _normal(rng, conv2d_forward(x, p)[0].shape)

    def f():
        return float((conv2d_forward(x, p)[0] * r).sum())

    _, tape = conv2d_forward(x, p)
    gx, gw, gb = conv2d_backward(r, tape)
    return compare(f, {"x": x, "weights": p.weights, "bias": p.bias},
                   {"x": gx, "weights": gw, "bias": gb}, seed, max_coords)


def check_bn(rng: SeededRng, c: int, seed: int, max_coords, training: bool = True):
    x = _normal(rng, (2, c, 3, 3), 2.0) + 0.5
    p = BnParams(1.0 + 0.1 * _normal(rng, (c,)), 0.1 * _normal(rng, (c,)))
    r = _normal(rng, x.shape)

    def f():
        q = BnParams(p.gamma, p.beta)  # fresh running stats so f has no side effects
        return float((batchnorm2d_forward(x, q, training)[0] * r).sum())

    _, tape = batchnorm2d_forward(x, BnParams(p.gamma, p.beta), training)
    gx, gg, gb = batchnorm2d_backward(r, tape)
    return compare(f, {"x": x, "gamma": p.gamma, "beta": p.beta},
                   {"x": gx, "gamma": gg, "beta": gb}, seed, max_coords)


def check_collapse(rng: SeededRng, c: int, seed: int, max_coords):
    x = _normal(rng, (c, 5, 4))
    r = _normal(rng, (5, 4))

    def f():
        return float((collapse_normalize(x)[0] * r).sum())

    _, tape = collapse_normalize(x)
    return compare(f, {"x": x}, {"x": collapse_normalize_backward(r, tape)}, seed, max_coords)


def check_loss(rng: SeededRng, seed: int, max_coords):
    pred = rng.uniform(2 * 36, 0.05, 0.95).reshape(2, 6, 6)
    gt = (rng.uniform(2 * 36) < 0.2).astype(np.float64).reshape(2, 6, 6)

    def f():
        return float(soft_iou_loss(pred, gt)[0])

    _, grad = soft_iou_loss(pred, gt)
    return compare(f, {"pred": pred}, {"pred": grad}, seed, max_coords)


def _random_dhif(rng: SeededRng, c: int, cout: int, k: int, proj_std: float,
                 nonlinearity: str = "tanh") -> DhifParams:
    p = DhifParams.init(rng, c, cout, k, nonlinearity=nonlinearity)
    if proj_std > 0:
        p.projection[...] = _normal(rng, p.projection.shape, proj_std)
        p.projection_bias[...] = _normal(rng, p.projection_bias.shape, proj_std)
    return p


def check_dhif(rng: SeededRng, k: int, c: int, cout: int, proj_std: float, seed: int, max_coords,
               nonlinearity: str = "tanh"):
    x = _normal(rng, (2, c, 5, 5))
    p = _random_dhif(rng, c, cout, k, proj_std, nonlinearity)
    r = _normal(rng, dhif_forward(x, p)[0].shape)

    def f():
        return float((dhif_forward(x, p)[0] * r).sum())

    _, tape = dhif_forward(x, p)
    g = dhif_backward(r, tape)
    return compare(f, {"x": x, "projection": p.projection, "projection_bias": p.projection_bias,
                       "weights": p.out_conv.weights},
                   {"x": g.x, "projection": g.projection, "projection_bias": g.projection_bias,
                    "weights": g.weights}, seed, max_coords)


def _perturb_block(rng: SeededRng, block: ResBlock, proj_std: float) -> None:
    for p in (block.conv1, block.conv2):
        if isinstance(p, DhifParams):
            p.projection[...] = _normal(rng, p.projection.shape, proj_std)
            p.projection_bias[...] = _normal(rng, p.projection_bias.shape, proj_std)
    bns = [block.bn1, block.bn2] + ([block.shortcut[1]] if block.shortcut else [])
    for bn in bns:
        bn.gamma[...] = 1.0 + 0.1 * _normal(rng, bn.gamma.shape)
        bn.beta[...] = 0.1 * _normal(rng, bn.beta.shape)


def check_block(rng: SeededRng, c: int, cout: int, dhif: bool, seed: int, max_coords,
                order: str = "dhif_first"):
    block = ResBlock(rng, c, cout, 3, dhif=dhif, order=order)
    _perturb_block(rng, block, 0.3)
    x = _normal(rng, (2, c, 5, 5))
    r = _normal(rng, (2, cout, 5, 5))

    def f():
        return float((block.forward(x, True)[0] * r).sum())

    _, tape = block.forward(x, True)
    gx, grads = block.backward(r, tape)
    named = {"x": x, **block.params()}
    grads = {"x": gx, **grads}
    with activation_pattern() as probe:
        return compare(f, named, grads, seed, max_coords, probe)


def check_mininet(rng: SeededRng, seed: int, max_coords):
    """2-level, 2-channel detector with a DHiF block at level 2 on 16x16 inputs."""
    net = MiniDetector(NetConfig(levels=2, channels=(2, 2), dhif_levels=frozenset({2})),
                       seed=rng.next_u64())
    for _, b in net._blocks():
        _perturb_block(rng, b, 0.3)
    x = rng.uniform(2 * 256).reshape(2, 1, 16, 16)
    gt = np.zeros((2, 16, 16))
    gt[:, 6:9, 7:10] = 1.0

    def f():
        return float(soft_iou_loss(net.forward(x, True)[0], gt)[0])

    prob, tape = net.forward(x, True)
    _, gp = soft_iou_loss(prob, gt)
    gx, grads = net.backward(gp, tape)
    with activation_pattern() as probe:
        return compare(f, {"x": x, **net.params()}, {"x": gx, **grads}, seed, max_coords, probe)


def kernel_sizes(full: bool) -> tuple:
    return (1, 3, 5) if full else (1, 3)


def run_suites(instances: int = 20, full: bool = False, seed: int = 0, max_coords: int | None = 24) -> list:
    """All groups; ``full`` widens kernel sizes to {1, 3, 5} and checks every coordinate."""
    if full:
        max_coords = None
    ks = kernel_sizes(full)
    rng = SeededRng(seed)
    groups = {n: GroupResult(n) for n in
              ("conv", "batchnorm", "collapse_normalize", "soft_iou_loss", "dhif", "res_block", "mininet")}
    for i in range(instances):
        s = seed * 1000 + i
        k = ks[i % len(ks)]
        c, cout = (1, 2, 4)[i % 3], (1, 3)[i % 2]
        groups["conv"].add(check_conv(rng, k, c, cout, 1 + (i % 4 == 3), s, max_coords), f"k{k}c{c}o{cout}")
        groups["batchnorm"].add(check_bn(rng, 1 + i % 3, s, max_coords), f"c{1 + i % 3}")
        groups["collapse_normalize"].add(check_collapse(rng, 1 + i % 3, s, max_coords), f"c{1 + i % 3}")
        groups["soft_iou_loss"].add(check_loss(rng, s, max_coords), f"i{i}")
        # half the DHiF instances start from the zero (standard-conv) init
        std = 0.0 if i % 2 == 0 else 0.1
        groups["dhif"].add(check_dhif(rng, k, c, cout, std, s, max_coords), f"k{k}c{c}o{cout}std{std}")
        groups["res_block"].add(check_block(rng, 1 + i % 2, 2, i % 3 != 0, s, max_coords,
                                            "dhif_second" if i % 5 == 4 else "dhif_first"), f"i{i}")
        groups["mininet"].add(check_mininet(rng, s, max_coords), f"i{i}")
    return list(groups.values())
