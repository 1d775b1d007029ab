import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from inbd.errors import BadKernel, ShapeMismatch
from inbd.model import (NEXT_RING, WRD_BETA, WRD_LOSS_WEIGHT, Backbone, CircularConv2d, INBDNet,
                        NetNextRing, SegNet, circular_conv2d, load_params, model_from_params,
                        next_ring_target, save_params, total_loss, wrd_beta, wrd_loss,
                        wrd_recurrence, wrd_target_row)
from inbd.training import finite_diff_check


def wrapped_conv_oracle(x, w, b=None):
    """Direct loops: angular index wraps modulo M, radial index out of range reads 0."""
    cin, n, m = x.shape
    cout, _, kh, kw = w.shape
    out = np.zeros((cout, n, m))
    for o in range(cout):
        for r in range(n):
            for c in range(m):
                s = 0.0 if b is None else b[o]
                for i in range(cin):
                    for dr in range(kh):
                        rr = r + dr - kh // 2
                        if not 0 <= rr < n:
                            continue
                        for dc in range(kw):
                            s += w[o, i, dr, dc] * x[i, rr, (c + dc - kw // 2) % m]
                out[o, r, c] = s
    return out


# --- circular convolution ---------------------------------------------------------------

@pytest.mark.parametrize("k", [(1, 1), (3, 3), (3, 5), (5, 3)])
def test_circular_conv_matches_loop_oracle(k):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 6, 7))
    w = rng.normal(size=(3, 2, *k))
    b = rng.normal(size=3)
    got = circular_conv2d(torch.tensor(x), torch.tensor(w), torch.tensor(b)).numpy()
    np.testing.assert_allclose(got, wrapped_conv_oracle(x, w, b), rtol=1e-12, atol=1e-12)


def test_circular_conv_identity_kernel_scales():
    x = torch.randn(1, 2, 5, 9, dtype=torch.float64)
    w = torch.zeros(2, 2, 1, 1, dtype=torch.float64)
    w[0, 0] = 2.0
    w[1, 1] = -0.5
    out = circular_conv2d(x, w)
    torch.testing.assert_close(out[:, 0], 2 * x[:, 0])
    torch.testing.assert_close(out[:, 1], -0.5 * x[:, 1])


def test_circular_conv_commutes_with_angular_shift():
    x = torch.randn(1, 3, 6, 10, dtype=torch.float64)
    w = torch.randn(4, 3, 3, 3, dtype=torch.float64)
    for s in (1, 3, 7):
        a = circular_conv2d(torch.roll(x, s, -1), w)
        torch.testing.assert_close(a, torch.roll(circular_conv2d(x, w), s, -1))


def test_circular_conv_rejects_even_kernels():
    with pytest.raises(BadKernel):
        circular_conv2d(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 2, 3))
    with pytest.raises(BadKernel):
        CircularConv2d(1, 1, 4)


def test_backbone_is_shift_equivariant():
    torch.manual_seed(0)
    net = Backbone(2, (3, 4, 5), circular=True).double()
    x = torch.randn(1, 2, 8, 16, dtype=torch.float64)
    for s in (4, 8, 12):  # multiples of the total pooling stride
        torch.testing.assert_close(net(torch.roll(x, s, -1)), torch.roll(net(x), s, -1))


# --- wedging ring detection -------------------------------------------------------------

def wrd_oracle(plus, minus, beta):
    m = len(plus)
    raw = [beta]
    for k in range(1, m):
        raw.append(raw[-1] + 1 / (1 + math.exp(-plus[k - 1])) - 1 / (1 + math.exp(-minus[k - 1])))
    top = max(raw)
    return np.array(raw), np.array([r - top for r in raw])


def test_wrd_zero_activity_is_flat():
    z = torch.zeros(1, 12, dtype=torch.float64)
    for beta in (0.0, 15.0, -15.0):
        raw, omega = wrd_recurrence(z, z, beta)
        assert torch.all(raw == beta) and torch.all(omega == 0)


def test_wrd_impulse_staircase():
    plus = torch.full((1, 10), -30.0, dtype=torch.float64)
    minus = plus.clone()
    plus[0, 2] = 30.0   # ring starts after angle 2
    minus[0, 6] = 30.0  # and ends after angle 6
    raw, omega = wrd_recurrence(plus, minus, -15.0)
    exp_raw, exp_omega = wrd_oracle(plus[0].tolist(), minus[0].tolist(), -15.0)
    np.testing.assert_allclose(raw[0].numpy(), exp_raw, rtol=0, atol=1e-12)
    np.testing.assert_allclose(omega[0].numpy(), exp_omega, rtol=0, atol=1e-12)
    np.testing.assert_allclose(omega[0].numpy(), [-1] * 3 + [0] * 4 + [-1] * 3, atol=1e-12)


def test_wrd_batch_beta():
    plus, minus = torch.randn(3, 8, dtype=torch.float64), torch.randn(3, 8, dtype=torch.float64)
    raw, _ = wrd_recurrence(plus, minus, torch.tensor([15.0, -15.0, 0.0], dtype=torch.float64))
    np.testing.assert_allclose(raw[:, 0].numpy(), [15, -15, 0])
    for b, beta in enumerate([15.0, -15.0, 0.0]):
        np.testing.assert_allclose(raw[b].numpy(), wrd_oracle(plus[b].tolist(),
                                                              minus[b].tolist(), beta)[0])


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 64), st.floats(-15, 15), st.integers(0, 2**31 - 1))
def test_wrd_max_zero_and_bounded_steps(m, beta, seed):
    g = torch.Generator().manual_seed(seed)
    plus = 4 * torch.randn(2, m, generator=g, dtype=torch.float64)
    minus = 4 * torch.randn(2, m, generator=g, dtype=torch.float64)
    raw, omega = wrd_recurrence(plus, minus, beta)
    assert torch.all(omega.max(dim=-1).values.abs() <= 1e-9)
    assert torch.all(torch.diff(omega, dim=-1).abs() <= 1)
    exp_raw, exp_omega = wrd_oracle(plus[0].tolist(), minus[0].tolist(), beta)
    np.testing.assert_allclose(omega[0].numpy(), exp_omega, atol=1e-9)


def test_wrd_loss_matches_scalar_bce():
    z = np.array([2.0, -1.0, 0.5, -3.0])
    row = np.array([3, 0, 3, 4])
    i = 2
    expected = 0.0
    for zk, ak in zip(z, row):
        p = 1 / (1 + math.exp(-zk))
        t = 1.0 if ak == i + 1 else 0.0
        expected -= t * math.log(p) + (1 - t) * math.log(1 - p)
    expected /= len(z)
    got = wrd_loss(torch.tensor(z[None]), row, i).item()
    assert got == pytest.approx(expected, rel=1e-12)


def test_wrd_constants():
    assert WRD_BETA == 15.0 and WRD_LOSS_WEIGHT == 0.01
    assert wrd_beta(np.array([3, 0, 0]), 2) == 15.0
    assert wrd_beta(np.array([0, 3, 3]), 2) == -15.0


# --- targets and loss -------------------------------------------------------------------

def test_next_ring_target_marks_rings_up_to_next():
    a = np.array([[2, 2, 3], [3, 3, 0], [4, 0, 0]])
    t = next_ring_target(a, 2).numpy()
    np.testing.assert_array_equal(t, [[1, 1, 1], [1, 1, 0], [0, 0, 0]])


def test_wrd_target_row_first_label_beyond_current_ring():
    a = np.array([[2, 2, 2, 2],
                  [3, 2, 0, 2],
                  [3, 4, 0, 2]])
    np.testing.assert_array_equal(wrd_target_row(a, 2), [3, 4, 0, 0])


def test_total_loss_matches_term_oracle():
    rng = np.random.default_rng(0)
    logits = torch.tensor(rng.normal(size=(1, 2, 4, 5)))
    a = rng.integers(0, 5, (4, 5))
    omega_raw = torch.tensor(rng.normal(size=(1, 5)))
    i = 2
    target = ((a >= 1) & (a <= i + 1)).astype(int)
    ce = 0.0
    for r in range(4):
        for c in range(5):
            z = logits[0, :, r, c].numpy()
            lse = math.log(math.exp(z[0]) + math.exp(z[1]))
            ce += lse - z[target[r, c]]
    ce /= 20
    row = wrd_target_row(a, i)
    expected = ce + 0.01 * wrd_loss(omega_raw, row, i).item()
    assert total_loss(logits, a, omega_raw, i).item() == pytest.approx(expected, rel=1e-12)


def test_total_loss_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        total_loss(torch.zeros(1, 2, 4, 5), np.zeros((4, 6), int), torch.zeros(1, 6), 1)


# --- network ----------------------------------------------------------------------------

def toy_net(widths=(3, 4)):
    torch.manual_seed(0)
    return INBDNet(widths=widths, wrd_channels=3).double()


def toy_patch(n=8, m=12, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(1, 7, n, m, generator=g, dtype=torch.float64)


def test_inbdnet_shapes_and_purity():
    net = toy_net()
    x = toy_patch()
    a, sig = net(x)
    b, _ = net(x.clone())
    assert a.shape == (1, 2, 8, 12) and sig.omega.shape == (1, 12)
    assert torch.equal(a, b)
    x2 = x.clone()
    x2[:, 6] = 123.0  # the omega input channel is recomputed, not read
    assert torch.equal(net(x2)[0], a)
    with pytest.raises(ShapeMismatch):
        net(torch.zeros(1, 5, 8, 12, dtype=torch.float64))


def test_inbdnet_shift_equivariant_without_wedging_signal():
    # the accumulated signal starts at angle 0, so exact equivariance only holds
    # when both detectors are identical and the signal is flat
    net = toy_net((3, 4, 5))
    with torch.no_grad():
        net.wrd.out.weight[1] = net.wrd.out.weight[0]
        net.wrd.out.bias[1] = net.wrd.out.bias[0]
    x = toy_patch(8, 16)
    base, sig = net(x)
    assert torch.all(sig.omega == 0)
    for s in (4, 8):
        shifted, _ = net(torch.roll(x, s, -1))
        torch.testing.assert_close(shifted, torch.roll(base, s, -1))


def test_total_loss_gradient_through_network():
    net = toy_net()
    x = toy_patch()
    rng = np.random.default_rng(1)
    a = np.sort(rng.integers(2, 5, (8, 12)), axis=0)
    a[-2:, ::3] = 0
    i = 2
    row = wrd_target_row(a, i)

    def loss():
        logits, sig = net(x, wrd_beta(row, i))
        return total_loss(logits, a, sig.omega_raw, i, wrd_row=row)

    err = finite_diff_check(loss, list(net.parameters()), epsilon=1e-6)
    assert err <= 1e-4


def test_wrd_loss_gradient_through_recurrence():
    rng = np.random.default_rng(2)
    plus = torch.tensor(rng.normal(size=(1, 12)), requires_grad=True)
    minus = torch.tensor(rng.normal(size=(1, 12)), requires_grad=True)
    row = rng.integers(0, 4, 12)

    def loss():
        raw, _ = wrd_recurrence(plus, minus, 0.0)
        return wrd_loss(raw, row, 2)

    assert finite_diff_check(loss, [plus, minus], epsilon=1e-5) <= 1e-4


def test_net_next_ring_adapter():
    net = INBDNet((4,), 3)
    out = NetNextRing(net)(np.zeros((7, 8, 12), np.float32), None, 1)
    assert out.shape == (2, 8, 12) and NEXT_RING == 1


# --- parameter files --------------------------------------------------------------------

@pytest.mark.parametrize("make", [lambda: INBDNet((4, 8), 5), lambda: SegNet((4, 8, 16))])
def test_params_round_trip(tmp_path, make):
    torch.manual_seed(3)
    net = make()
    path = tmp_path / "net.params"
    save_params(net, path)
    state = load_params(path)
    assert set(state) == set(net.state_dict())
    for k, v in net.state_dict().items():
        assert np.array_equal(state[k], v.numpy())
    rebuilt = model_from_params(path)
    assert type(rebuilt) is type(net)
    x = torch.rand(1, 7 if isinstance(net, INBDNet) else 3, 16, 16)
    with torch.no_grad():
        a, b = net.eval()(x), rebuilt.eval()(x)
    a, b = (a[0], b[0]) if isinstance(net, INBDNet) else (a, b)
    assert torch.equal(a, b)


def test_params_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.params"
    p.write_bytes(b"NOPE\x01\x00\x00\x00")
    with pytest.raises(ValueError):
        load_params(p)




def test_perfect_logits_give_near_zero_total_loss():
    a = np.array([[2, 2, 3], [3, 0, 0], [0, 0, 0]])
    inside = next_ring_target(a, 1).numpy()
    logits = torch.tensor(np.where(inside[None] == np.arange(2)[:, None, None], 50.0, -50.0))
    row = wrd_target_row(a, 1)
    omega_raw = torch.tensor(np.where(row == 2, 50.0, -50.0))[None]
    assert 0 <= total_loss(logits, a, omega_raw, 1).item() <= 2e-6
