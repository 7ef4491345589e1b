"""Wall-time and parameter comparison of standard convolution and DHiF."""
from __future__ import annotations

import time

import numpy as np

from .layer import DhifParams, dhif_forward, param_count
from .net import MiniDetector, NetConfig
from .nn import ConvParams, conv2d_forward
from .tensor import SeededRng
from .train import measure_throughput


def best_time(fn, repeats: int) -> float:
    fn()
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_bench(batch: int = 16, height: int = 64, width: int = 64, channels: int = 16, k: int = 3,
              repeats: int = 5, seed: int = 0, net_channels: tuple = (8, 16, 32)) -> dict:
    """Per-op forward times at matched geometry plus detector throughput.

    The detector comparison pits the all-standard network against the one
    with DHiF blocks at levels 2 and 3.
    """
    if min(batch, height, width, channels, k, repeats) < 1:
        raise ValueError("bench sizes must all be >= 1")
    rng = SeededRng(seed)
    x = rng.normal(batch * channels * height * width).reshape(batch, channels, height, width)
    conv = ConvParams.kaiming(rng, channels, channels, k)
    dhif = DhifParams.init(rng, channels, channels, k)
    dhif.projection[...] = rng.normal(dhif.projection.size, std=0.1).reshape(dhif.projection.shape)
    t_conv = best_time(lambda: conv2d_forward(x, conv), repeats)
    t_dhif = best_time(lambda: dhif_forward(x, dhif), repeats)
    total, extra = param_count(dhif)

    levels = len(net_channels)
    if height % 2 ** (levels - 1) or width % 2 ** (levels - 1):
        raise ValueError(f"detector needs extents divisible by {2 ** (levels - 1)}")
    shape = (batch, 1, height, width)
    std = MiniDetector(NetConfig(levels=levels, channels=net_channels), seed=seed)
    dyn = MiniDetector(NetConfig(levels=levels, channels=net_channels,
                                 dhif_levels=frozenset({2, 3}) & frozenset(range(1, levels + 1))), seed=seed)
    ips_std = measure_throughput(std, shape, repeats)
    ips_dyn = measure_throughput(dyn, shape, repeats)
    return {
        "conv_seconds": t_conv,
        "dhif_seconds": t_dhif,
        "dhif_slowdown": t_dhif / t_conv,
        "conv_params": conv.weights.size,
        "dhif_params": total,
        "dhif_extra_params": extra,
        "net_params_standard": std.n_params(),
        "net_params_dhif": dyn.n_params(),
        "net_extra_params": dyn.n_params() - std.n_params(),
        "net_dhif_layers": len(dyn.dhif_layers()),
        "images_per_sec_standard": ips_std,
        "images_per_sec_dhif": ips_dyn,
        "throughput_reduction": 1.0 - ips_dyn / ips_std,
    }
