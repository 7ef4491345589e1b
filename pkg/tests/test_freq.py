import numpy as np
import pytest

from dhif.freq import analyze_bank, analyze_kernel, bank_kernels, dft_matrix, kernel_gains, write_grid
from dhif.layer import DhifParams, FilterBank, dump_filter_bank, generate_filter_bank
from dhif.tensor import SeededRng

LAPLACIAN = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=float)


def test_laplacian():
    r = analyze_kernel(LAPLACIAN)
    assert r.dc_gain <= 1e-12 and r.coeff_sum == 0.0
    assert abs(r.grid[0, 0] - r.dc_gain) <= 1e-12
    # |sum w (-1)^(r+c)| = |-1 -1 -4 -1 -1| = 8
    assert abs(r.nyquist_gain - 8.0) <= 1e-12


def test_box_kernel():
    r = analyze_kernel(np.full((3, 3), 1 / 9))
    assert abs(r.dc_gain - 1) <= 1e-12
    assert abs(r.nyquist_gain - 1 / 9) <= 1e-12
    assert abs(r.grid[32, 32] - r.nyquist_gain) <= 1e-12


def test_delta_has_flat_spectrum():
    d = np.zeros((3, 3))
    d[1, 1] = 1
    assert np.allclose(analyze_kernel(d, 16).grid, 1.0, rtol=0, atol=1e-12)


def test_grid_matches_numpy_fft():
    w = np.random.default_rng(0).normal(size=(5, 5))
    pad = np.zeros((32, 32))
    pad[:5, :5] = w
    assert np.allclose(analyze_kernel(w, 32).grid, np.abs(np.fft.fft2(pad)), rtol=0, atol=1e-10)


def test_parseval_random_kernels():
    rng = np.random.default_rng(1)
    for _ in range(100):
        k = int(rng.choice([1, 3, 5, 7]))
        w = rng.normal(size=(k, k))
        r = analyze_kernel(w)
        assert abs((r.grid**2).mean() - (w**2).sum()) <= 1e-10 * max(1.0, (w**2).sum())


def test_mean_removed_kernels_have_no_dc():
    rng = np.random.default_rng(2)
    for _ in range(50):
        w = rng.normal(size=(3, 3))
        assert analyze_kernel(w - w.mean()).dc_gain <= 1e-12


def test_argument_checks():
    with pytest.raises(ValueError):
        analyze_kernel(np.ones((5, 5)), 4)
    with pytest.raises(ValueError):
        analyze_kernel(np.ones((3, 3)), 63)
    with pytest.raises(ValueError):
        analyze_kernel(np.ones((3, 2)))


def test_dft_matrix_is_unitary_up_to_scale():
    f = dft_matrix(8)
    assert np.allclose(f @ f.conj().T, 8 * np.eye(8))


def _dump(tmp_path, kernels):
    path = tmp_path / "bank.txt"
    dump_filter_bank(FilterBank(kernels), path)
    return path


def test_zero_bank(tmp_path):
    stats = analyze_bank(_dump(tmp_path, np.zeros((2, 2, 9, 9))))
    for name in ("dc_gain", "nyquist_gain", "coeff_sum"):
        assert stats[name]["min"] == stats[name]["max"] == 0.0


def test_laplacian_bank(tmp_path):
    kern = np.broadcast_to(LAPLACIAN.reshape(9, 1), (2, 3, 9, 9)).copy()
    out = tmp_path / "summary.csv"
    stats = analyze_bank(_dump(tmp_path, kern), out)
    assert stats["dc_gain"]["max"] == 0.0 and stats["filters"] == 54
    lines = out.read_text().splitlines()
    assert lines[0] == "quantity,min,median,max" and lines[1].startswith("dc_gain,0.0,0.0,0.0")


def test_bank_kernel_order_matches_filter_accessor():
    kern = np.random.default_rng(3).normal(size=(2, 3, 9, 9))
    bank = FilterBank(kern)
    stack = bank_kernels(bank)
    assert np.array_equal(stack[(1 * 3 + 2) * 9 + 4], bank.filter(1, 2, 4))


def test_tanh_banks_respect_range_bounds(tmp_path):
    p = DhifParams.init(SeededRng(0), 1, 1, 3)
    rng = np.random.default_rng(4)
    p.projection[...] = rng.normal(0, 2, p.projection.shape)
    p.projection_bias[...] = rng.normal(0, 2, p.projection_bias.shape)
    bank = generate_filter_bank(rng.normal(size=(8, 8)), p)
    gains = kernel_gains(bank_kernels(bank))
    assert np.all(np.abs(gains["coeff_sum"]) <= 9) and np.abs(bank.kernels).max() <= 1


def test_grid_text_output(tmp_path):
    r = analyze_kernel(LAPLACIAN, 8)
    write_grid(r, tmp_path / "g.txt")
    assert np.allclose(np.loadtxt(tmp_path / "g.txt"), r.grid, atol=1e-10)
