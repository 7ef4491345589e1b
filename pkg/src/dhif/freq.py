"""Discrete frequency response of small kernels and filter-bank summaries.

A zero-centred coefficient range lets a kernel suppress the DC component
while passing high frequencies.  The analyser measures that directly: the
DC gain ``|sum w|``, the Nyquist gain ``|sum w (-1)^(r+c)|`` and the full
magnitude response on an N x N grid (kernel zero-padded, row-column DFT by
explicit matrices so no FFT dependency is involved).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .layer import FilterBank, load_filter_bank


@dataclass
class FrequencyResponse:
    kernel: np.ndarray
    grid: np.ndarray  # N x N magnitudes
    dc_gain: float
    nyquist_gain: float
    coeff_sum: float


def dft_matrix(n: int) -> np.ndarray:
    j = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(j, j) / n)


def analyze_kernel(w: np.ndarray, n: int = 64) -> FrequencyResponse:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError(f"kernel must be square k x k, got {w.shape}")
    k = w.shape[0]
    if n < k:
        raise ValueError(f"grid size {n} smaller than kernel size {k}")
    if n % 2:
        raise ValueError(f"grid size {n} must be even")
    # only the first k columns of the DFT matrix touch the padded kernel
    f = dft_matrix(n)[:, :k]
    grid = np.abs(f @ w @ f.T)
    alt = (-1.0) ** np.add.outer(np.arange(k), np.arange(k))
    return FrequencyResponse(w, grid, abs(w.sum()), abs((w * alt).sum()), float(w.sum()))


def bank_kernels(bank: FilterBank) -> np.ndarray:
    """All filters as an ``(H'*W'*k^2) x k x k`` stack, ordered by (r, c, i)."""
    ho, wo, k2, _ = bank.kernels.shape
    k = bank.k
    # kernels[r, c, m, i]: column i is filter i
    return bank.kernels.transpose(0, 1, 3, 2).reshape(ho * wo * k2, k, k)


def kernel_gains(kernels: np.ndarray) -> dict:
    k = kernels.shape[-1]
    alt = (-1.0) ** np.add.outer(np.arange(k), np.arange(k))
    coeff = kernels.sum(axis=(1, 2))
    dc = np.abs(coeff)
    nyq = np.abs((kernels * alt).sum(axis=(1, 2)))
    return {"dc_gain": dc, "nyquist_gain": nyq, "coeff_sum": coeff, "highpass_ratio": nyq / (dc + 1e-12)}


def summarize_bank(bank: FilterBank) -> dict:
    """min / median / max of each per-filter gain."""
    stats = {}
    for name, vals in kernel_gains(bank_kernels(bank)).items():
        stats[name] = {"min": float(vals.min()), "median": float(np.median(vals)), "max": float(vals.max())}
    stats["filters"] = int(bank_kernels(bank).shape[0])
    return stats


def write_summary_csv(stats: dict, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity", "min", "median", "max"])
        for name in ("dc_gain", "nyquist_gain", "coeff_sum", "highpass_ratio"):
            s = stats[name]
            w.writerow([name, repr(s["min"]), repr(s["median"]), repr(s["max"])])


def analyze_bank(dump_path, out_csv=None) -> dict:
    """Summarise a filter-bank dump; optionally write the CSV summary."""
    stats = summarize_bank(load_filter_bank(dump_path))
    if out_csv is not None:
        write_summary_csv(stats, out_csv)
    return stats


def write_grid(resp: FrequencyResponse, path) -> None:
    """Magnitude grid as a whitespace-separated text matrix for plotting."""
    np.savetxt(Path(path), resp.grid, fmt="%.12g")
