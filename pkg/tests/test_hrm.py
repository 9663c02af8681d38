import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch.autograd import gradcheck

from rowlane.hrm import (
    HRM,
    ConfigError,
    HRMConfig,
    SEBlock,
    build_hrm_stack,
    horizontal_shuffle,
    horizontal_unshuffle,
)


def test_unshuffle_ordering():
    x = torch.tensor([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 1, 4)  # a, b, c, d
    y = horizontal_unshuffle(x, 2)
    assert y.shape == (1, 2, 1, 2)
    assert y[0, 0, 0].tolist() == [1.0, 3.0]
    assert y[0, 1, 0].tolist() == [2.0, 4.0]


def test_unshuffle_index_map():
    c, h, w, r = 3, 2, 6, 3
    x = torch.arange(c * h * w, dtype=torch.float64).reshape(1, c, h, w)
    y = horizontal_unshuffle(x, r)
    for ci in range(c):
        for hi in range(h):
            for wi in range(w):
                assert y[0, ci * r + wi % r, hi, wi // r] == x[0, ci, hi, wi]


def test_unshuffle_identity_ratio_one():
    x = torch.randn(2, 4, 3, 8)
    assert torch.equal(horizontal_unshuffle(x, 1), x)


def test_unshuffle_rejects_indivisible_width():
    with pytest.raises(ValueError):
        horizontal_unshuffle(torch.zeros(1, 1, 1, 5), 2)


def test_unshuffle_inverse_via_pixel_shuffle():
    # torch's pixel_shuffle with a (1, r) layout is an independent inverse route
    x = torch.randn(1, 4, 3, 8)
    y = horizontal_unshuffle(x, 2)
    b, cr, h, w = y.shape
    back = y.reshape(b, 4, 2, h, w).permute(0, 1, 3, 4, 2).reshape(b, 4, h, w * 2)
    assert torch.equal(back, x)
    assert torch.equal(horizontal_shuffle(y, 2), x)


@settings(max_examples=50, deadline=None)
@given(
    c=st.integers(1, 5),
    h=st.integers(1, 4),
    q=st.integers(1, 5),
    r=st.integers(1, 4),
)
def test_unshuffle_is_permutation(c, h, q, r):
    x = torch.randn(1, c, h, q * r)
    y = horizontal_unshuffle(x, r)
    assert y.shape == (1, c * r, h, q)
    assert torch.equal(torch.sort(y.flatten()).values, torch.sort(x.flatten()).values)
    assert torch.equal(horizontal_shuffle(y, r), x)


def test_se_zero_fc2_halves_input():
    se = SEBlock(16, 4)
    torch.nn.init.zeros_(se.fc2.weight)
    torch.nn.init.zeros_(se.fc2.bias)
    x = torch.randn(2, 16, 3, 5)
    torch.testing.assert_close(se(x), x / 2)


def test_se_shrinks_magnitudes_and_keeps_constant_channels():
    torch.manual_seed(0)
    se = SEBlock(16, 4)
    x = torch.randn(2, 16, 4, 6)
    assert torch.all(se(x).abs() <= x.abs())
    const = torch.randn(2, 16, 1, 1).expand(2, 16, 4, 6)
    out = se(const)
    assert torch.allclose(out, out[:, :, :1, :1].expand_as(out))


def test_se_rejects_bad_reduction():
    with pytest.raises(ConfigError):
        SEBlock(10, 4)


def test_hrm_shape_default_channels():
    m = HRM(HRMConfig(channels=96, ratio=2)).eval()
    assert m(torch.randn(1, 96, 64, 128)).shape == (1, 96, 64, 64)


@pytest.mark.parametrize("pos", ["none", "pre", "standard", "post"])
@pytest.mark.parametrize("ratio,kernel", [(2, 3), (4, 1), (1, 3)])
def test_hrm_shape_all_variants(pos, ratio, kernel):
    m = HRM(HRMConfig(channels=16, ratio=ratio, kernel=kernel, se_position=pos, se_reduction=4))
    m.eval()
    y = m(torch.randn(2, 16, 5, 8))
    assert y.shape == (2, 16, 5, 8 // ratio)


def test_post_se_is_channel_scale_of_plain_sum():
    torch.manual_seed(1)
    post = HRM(HRMConfig(channels=16, se_position="post", se_reduction=4, dropout_p=0)).eval()
    plain = HRM(HRMConfig(channels=16, se_position="none", se_reduction=4, dropout_p=0)).eval()
    plain.load_state_dict(post.state_dict(), strict=False)
    x = torch.randn(2, 16, 4, 8)
    a, b = post(x), plain(x)
    scale = post.se.gate(b)
    torch.testing.assert_close(a, b * scale)


def test_hrm_dropout_only_in_training():
    torch.manual_seed(0)
    m = HRM(HRMConfig(channels=8, se_position="none", dropout_p=0.5))
    x = torch.randn(2, 8, 3, 4)
    m.eval()
    assert torch.equal(m(x), m(x))
    m.train()
    assert not torch.equal(m(x), m(x))


def weight_gradcheck(module, *inputs):
    """gradcheck of module output w.r.t. every parameter at fixed inputs."""
    names = [n for n, _ in module.named_parameters()]
    weights = tuple(p.detach().clone().requires_grad_(True) for _, p in module.named_parameters())

    def fn(*ws):
        return torch.func.functional_call(module, dict(zip(names, ws)), inputs)

    return gradcheck(fn, weights, eps=1e-6, atol=1e-8, rtol=1e-4)


@pytest.mark.parametrize("pos", ["none", "pre", "standard", "post"])
def test_hrm_gradcheck_input_and_weights(pos):
    torch.manual_seed(0)
    cfg = HRMConfig(channels=8, ratio=2, se_position=pos, se_reduction=4, dropout_p=0)
    m = HRM(cfg).double().eval()
    x = torch.randn(1, 8, 4, 8, dtype=torch.float64, requires_grad=True)
    assert gradcheck(m, (x,), eps=1e-6, atol=1e-8, rtol=1e-4)
    assert weight_gradcheck(m, x.detach())


def test_two_stacked_hrms_gradcheck():
    torch.manual_seed(2)
    stack = torch.nn.Sequential(
        HRM(HRMConfig(channels=8, ratio=2, se_reduction=4, dropout_p=0)),
        HRM(HRMConfig(channels=8, ratio=4, kernel=1, se_reduction=4, dropout_p=0)),
    ).double().eval()
    x = torch.randn(1, 8, 4, 8, dtype=torch.float64, requires_grad=True)
    assert gradcheck(stack, (x,), eps=1e-6, atol=1e-8, rtol=1e-4)


def test_build_stack_width_64_three_shared():
    plan = build_hrm_stack(64, shared_count=3, n_lanes=4)
    assert plan.widths(64) == [64, 32, 16, 8, 4, 1]
    assert [s.kernel for s in plan.shared_stages] == [3, 3, 3]
    assert [(s.ratio, s.kernel) for s in plan.lane_stages] == [(2, 3), (4, 1)]


def test_build_stack_no_shared():
    plan = build_hrm_stack(64, shared_count=0, n_lanes=2)
    assert plan.shared_stages == []
    assert plan.widths(64)[-1] == 1
    assert plan.lane_stages[-1].kernel == 1


def test_build_stack_minimal():
    plan = build_hrm_stack(2, shared_count=0, n_lanes=1)
    assert len(plan.lane_stages) == 1
    assert (plan.lane_stages[0].ratio, plan.lane_stages[0].kernel) == (2, 1)


@pytest.mark.parametrize("width,shared", [(64, 6), (1, 0), (20, 0)])
def test_build_stack_rejects_impossible(width, shared):
    with pytest.raises(ConfigError):
        build_hrm_stack(width, shared_count=shared, n_lanes=2)
