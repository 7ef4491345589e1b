import math

import numpy as np
import pytest

from dhif.errors import ContractError, DumpParseError
from dhif.gradcheck import check_dhif
from dhif.layer import (
    DhifParams,
    FilterBank,
    apply_filter_bank,
    dhif_backward,
    dhif_forward,
    dump_filter_bank,
    generate_filter_bank,
    load_filter_bank,
    param_count,
)
from dhif.nn import ConvParams, collapse_normalize, conv2d_forward
from dhif.tensor import SeededRng

TANH_HALF = 0.46211715726000974  # math.tanh(0.5)


def make(c, cout, k, rng=None, proj_std=0.0, nonlinearity="tanh", stride=1, padding=None):
    p = DhifParams.init(rng or SeededRng(0), c, cout, k, stride, padding, nonlinearity)
    if proj_std:
        g = np.random.default_rng(c * 100 + cout * 10 + k)
        p.projection[...] = g.normal(0, proj_std, p.projection.shape)
        p.projection_bias[...] = g.normal(0, proj_std, p.projection_bias.shape)
    return p


def straight_line_dhif(x, p):
    """Per-location loops over the layer definition, no shared code paths."""
    c, h, w = x.shape
    k, pad = p.k, p.padding
    k2 = k * k
    m = x.mean(axis=0)
    fn = (m - m.mean()) / (np.sqrt(((m - m.mean()) ** 2).mean()) + p.epsilon)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    fp = np.pad(fn, pad)
    wts = p.out_conv.weights
    out = np.zeros((wts.shape[0], h + 2 * pad - k + 1, w + 2 * pad - k + 1))
    for r in range(out.shape[1]):
        for col in range(out.shape[2]):
            z = fp[r : r + k, col : col + k].reshape(k2)
            v = [math.tanh(sum(z[a] * p.projection[a, b] for a in range(k2)) + p.projection_bias[b])
                 for b in range(k2 * k2)]
            wf = [[v[mm * k2 + i] for i in range(k2)] for mm in range(k2)]
            for j in range(wts.shape[0]):
                acc = 0.0
                for ch in range(c):
                    patch = xp[ch, r : r + k, col : col + k].reshape(k2)
                    for i in range(k2):
                        filt = sum(patch[mm] * wf[mm][i] for mm in range(k2))
                        acc += (patch[i] + filt) * wts[j, ch, i]
                out[j, r, col] = acc
    return out


def test_zero_projection_gives_zero_bank():
    fn = np.random.default_rng(0).normal(size=(5, 6))
    bank = generate_filter_bank(fn, make(1, 1, 3))
    assert bank.kernels.shape == (5, 6, 9, 9) and not bank.kernels.any()


def test_constant_input_shares_bias_bank():
    p = make(2, 1, 3, proj_std=0.5)
    fn, _ = collapse_normalize(np.full((2, 5, 5), 3.0))
    bank = generate_filter_bank(fn, p)
    expect = np.tanh(p.projection_bias).reshape(9, 9)
    assert np.allclose(bank.kernels, expect, rtol=0, atol=0)


def test_k1_single_filter_value():
    p = make(1, 1, 1)
    p.projection[...] = 1.0
    bank = generate_filter_bank(np.array([[0.5]]), p)
    assert bank.kernels.shape == (1, 1, 1, 1)
    assert abs(bank.kernels.item() - TANH_HALF) <= 1e-15


def test_apply_filter_bank_cases():
    patches = np.random.default_rng(1).normal(size=(2, 3, 4, 9))
    assert not apply_filter_bank(patches, FilterBank(np.zeros((2, 3, 9, 9)))).any()
    ident = FilterBank(np.broadcast_to(np.eye(9), (2, 3, 9, 9)).copy())
    assert np.array_equal(apply_filter_bank(patches, ident), patches)
    kern = np.zeros((1, 1, 4, 4))
    kern[0, 0, :, 0] = [0.5, -0.5, 0.25, -0.25]
    out = apply_filter_bank(np.ones((1, 1, 1, 4)), FilterBank(kern))
    assert out[0, 0, 0, 0] == 0.0
    with pytest.raises(ValueError):
        apply_filter_bank(np.ones((1, 1, 1, 9)), FilterBank(np.zeros((1, 1, 4, 4))))


def test_reduction_to_standard_conv_fuzz():
    rng = np.random.default_rng(2)
    for _ in range(50):
        k = int(rng.choice([1, 3, 5]))
        c, cout = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        h, w = int(rng.integers(k, 17)), int(rng.integers(k, 17))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, k // 2 + 1))
        p = make(c, cout, k, SeededRng(int(rng.integers(1 << 30))), stride=stride, padding=pad)
        x = rng.normal(size=(c, h, w))
        a, _ = dhif_forward(x, p)
        b, _ = conv2d_forward(x, p.out_conv)
        assert np.max(np.abs(a - b)) <= 1e-12


def test_constant_input_interior_formula():
    cval = 0.8
    p = make(2, 3, 3, proj_std=0.4)
    x = np.full((2, 6, 6), cval)
    out, _ = dhif_forward(x, p)
    B = np.tanh(p.projection_bias).reshape(9, 9)
    w = p.out_conv.weights
    expect = np.einsum("jci,i->j", cval * w, 1 + B.sum(axis=0))
    assert np.allclose(out[:, 2, 3], expect, rtol=0, atol=1e-12)


def test_matches_straight_line_oracle():
    x = np.random.default_rng(3).normal(size=(1, 4, 4))
    p = make(1, 2, 3, proj_std=0.3)
    out, _ = dhif_forward(x, p)
    assert np.max(np.abs(out - straight_line_dhif(x, p))) <= 1e-12
    x2 = np.random.default_rng(4).normal(size=(2, 5, 4))
    p2 = make(2, 3, 3, proj_std=0.5)
    assert np.max(np.abs(dhif_forward(x2, p2)[0] - straight_line_dhif(x2, p2))) <= 1e-12


def test_batch_is_per_sample():
    p = make(2, 2, 3, proj_std=0.3)
    x = np.random.default_rng(5).normal(size=(3, 2, 6, 6))
    batched, _ = dhif_forward(x, p)
    for i in range(3):
        assert np.allclose(batched[i], dhif_forward(x[i], p)[0], rtol=0, atol=1e-13)


def test_backward_zero_grad_and_tape_contract():
    p = make(2, 2, 3, proj_std=0.2)
    x = np.random.default_rng(6).normal(size=(2, 5, 5))
    out, tape = dhif_forward(x, p)
    g = dhif_backward(np.zeros_like(out), tape)
    for arr in (g.x, g.projection, g.projection_bias, g.weights):
        assert not arr.any()
    with pytest.raises(ContractError):
        dhif_backward(np.zeros_like(out), tape)


def test_projection_gradient_flows_from_zero_init():
    p = make(1, 1, 3)
    x = np.random.default_rng(7).normal(size=(1, 5, 5))
    out, tape = dhif_forward(x, p)
    g = dhif_backward(np.ones_like(out), tape)
    assert np.abs(g.projection).max() > 0 and np.abs(g.projection_bias).max() > 0


@pytest.mark.parametrize("proj_std", [0.0, 0.1])
@pytest.mark.parametrize("k,c,cout", [(1, 1, 1), (3, 2, 3), (5, 1, 1), (3, 4, 1)])
def test_gradients_finite_difference(k, c, cout, proj_std):
    errs = check_dhif(SeededRng(k * 7 + c), k, c, cout, proj_std, 0, 300)
    errs.pop("skipped")
    assert max(errs.values()) <= 1e-6


@pytest.mark.parametrize("nl", ["sigmoid", "leaky_relu", "gelu", "none"])
def test_gradients_other_nonlinearities(nl):
    errs = check_dhif(SeededRng(3), 3, 2, 2, 0.2, 0, None, nonlinearity=nl)
    errs.pop("skipped")
    assert max(errs.values()) <= 1e-6


def test_param_count():
    assert param_count(make(8, 8, 3)) == (1386, 810)
    assert param_count(make(3, 5, 1))[1] == 2
    assert param_count(make(2, 7, 3))[1] == param_count(make(4, 1, 3))[1] == 810


def test_filter_range_tanh_and_sigmoid():
    rng = np.random.default_rng(8)
    for nl, lo, hi in (("tanh", -1.0, 1.0), ("sigmoid", 0.0, 1.0)):
        p = make(1, 1, 3, nonlinearity=nl)
        p.projection[...] = rng.normal(0, 3, p.projection.shape)
        p.projection_bias[...] = rng.normal(0, 3, p.projection_bias.shape)
        x = rng.normal(0, 5, size=(100, 1, 10, 10))
        fn, _ = collapse_normalize(x)
        for i in range(len(fn)):
            b = generate_filter_bank(fn[i], p).kernels
            assert b.min() >= lo and b.max() <= hi


def test_location_specificity():
    p = make(1, 1, 3, proj_std=0.5)
    fn = np.random.default_rng(9).normal(size=(6, 6))
    bank = generate_filter_bank(fn, p).kernels
    assert not np.allclose(bank[1, 1], bank[3, 4])


def test_filter_and_output_windows_are_shared():
    p = make(2, 2, 3, stride=2, padding=0)
    assert (p.k, p.stride, p.padding) == (p.out_conv.k, p.out_conv.stride, p.out_conv.padding)
    x = np.random.default_rng(10).normal(size=(2, 7, 9))
    out, tape = dhif_forward(x, p)
    assert tape["bank"].shape[1] == out.shape[1] * out.shape[2] == tape["patches"].shape[1]


def test_rejects_bad_shapes():
    with pytest.raises(ValueError):
        DhifParams(np.zeros((9, 80)), np.zeros(81), ConvParams(np.zeros((1, 1, 9))))
    with pytest.raises(ValueError):
        DhifParams(np.zeros((9, 81)), np.zeros(81), ConvParams(np.zeros((1, 1, 9))), "relu6")
    with pytest.raises(ValueError):
        dhif_forward(np.ones((3, 5, 5)), make(2, 1, 3))
    with pytest.raises(ValueError):
        generate_filter_bank(np.ones((1, 5, 5)), make(1, 1, 3))


def test_dump_roundtrip(tmp_path):
    p = make(1, 1, 3, proj_std=0.5)
    bank = generate_filter_bank(np.random.default_rng(11).normal(size=(3, 4)), p)
    path = tmp_path / "bank.txt"
    dump_filter_bank(bank, path)
    first = path.read_text().splitlines()[0].split()
    assert first[:4] == ["0", "0", "0", "0"] and float(first[4]) == bank.kernels[0, 0, 0, 0]
    again = load_filter_bank(path)
    assert np.array_equal(again.kernels, bank.kernels)
    assert np.array_equal(again.filter(1, 2, 4), bank.kernels[1, 2, :, 4].reshape(3, 3))


@pytest.mark.parametrize("text,line", [("0 0 0 0 1.0\n0 0 0 x 2\n", 2), ("0 0 0 0\n", 1),
                                       ("0 0 0 0 0.5\n0 0 0 1 nan-ish\n", 2)])
def test_dump_parse_errors_name_the_line(tmp_path, text, line):
    path = tmp_path / "bad.txt"
    path.write_text(text)
    with pytest.raises(DumpParseError) as exc:
        load_filter_bank(path)
    assert exc.value.lineno == line and f"line {line}" in str(exc.value)


def test_dump_incomplete_coverage(tmp_path):
    path = tmp_path / "partial.txt"
    path.write_text("0 0 0 0 1.0\n0 0 1 1 1.0\n")
    with pytest.raises(DumpParseError):
        load_filter_bank(path)
