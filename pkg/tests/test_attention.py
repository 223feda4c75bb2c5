import math

import pytest
import torch

import sapnet as S
from sapnet.attention import AttentionKind, ChannelAttention, reduced_width

from conftest import check_input_gradient, check_param_gradients, seeded_image


def scalar_sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def zeroed(block):
    with torch.no_grad():
        for p in block.parameters():
            p.zero_()
    return block


def test_reduced_width_rounds_up_and_floors_at_one():
    assert reduced_width(32, 16) == 2
    assert reduced_width(8, 16) == 1
    assert reduced_width(8, 3) == 3  # ceil(8/3)
    assert reduced_width(1, 16) == 1
    with pytest.raises(S.ConfigError):
        reduced_width(0, 16)


def test_cra_gate_with_zero_mlp_is_sigmoid_of_channel_means():
    # with every MLP weight zeroed only the descriptor skip survives:
    # gate_c = sigmoid(mean_c). Oracle: scalar sigmoid computed with math.exp.
    values = (0.5, -1.0, 3.0, 0.0)
    block = zeroed(ChannelAttention(4, AttentionKind.CRA, reduction=2)).double()
    x = torch.empty(1, 4, 6, 6, dtype=torch.float64)
    for c, v in enumerate(values):
        x[0, c] = v
    gate = block.gate(x)[0]
    for c, v in enumerate(values):
        assert abs(gate[c].item() - scalar_sigmoid(v)) < 1e-6


def test_cra_differs_from_se_on_constant_input():
    # same zeroed MLP: SE collapses to a 0.5 gate, CRA keeps sigmoid(mean)
    se = zeroed(ChannelAttention(4, AttentionKind.SE, reduction=2)).double()
    cra = zeroed(ChannelAttention(4, AttentionKind.CRA, reduction=2)).double()
    x = torch.full((1, 4, 5, 5), 3.0, dtype=torch.float64)
    diff = (se(x) - cra(x)).abs().max().item()
    assert diff > 0.1


def test_three_gated_kinds_disagree_with_random_weights():
    x = seeded_image((2, 8, 6, 5), seed=3).float()
    outs = {}
    for kind in (AttentionKind.SE, AttentionKind.CA, AttentionKind.CRA):
        torch.manual_seed(7)
        outs[kind] = ChannelAttention(8, kind, reduction=4)(x)
    assert not torch.allclose(outs[AttentionKind.SE], outs[AttentionKind.CA])
    assert not torch.allclose(outs[AttentionKind.SE], outs[AttentionKind.CRA])
    assert not torch.allclose(outs[AttentionKind.CA], outs[AttentionKind.CRA])


@pytest.mark.parametrize("kind", [AttentionKind.SE, AttentionKind.CA, AttentionKind.CRA])
def test_gate_strictly_inside_unit_interval(kind):
    for seed in range(5):
        torch.manual_seed(seed)
        block = ChannelAttention(6, kind, reduction=3)
        x = seeded_image((2, 6, 4, 7), seed=seed, lo=-2.0, hi=2.0).float()
        g = block.gate(x)
        assert g.shape == (2, 6)
        assert (g > 0).all() and (g < 1).all()


def test_none_kind_is_identity():
    block = ChannelAttention(5, AttentionKind.NONE)
    x = seeded_image((1, 5, 6, 6), seed=0).float()
    assert torch.equal(block(x), x)
    assert sum(p.numel() for p in block.parameters()) == 0


def test_output_shape_matches_input():
    block = ChannelAttention(8, AttentionKind.CRA, reduction=4)
    x = torch.rand(3, 8, 9, 5)
    assert block(x).shape == x.shape


@pytest.mark.parametrize("kind", [AttentionKind.SE, AttentionKind.CA, AttentionKind.CRA])
def test_gradients_match_finite_differences(kind):
    torch.manual_seed(11)
    block = ChannelAttention(8, kind, reduction=4).double()
    x = seeded_image((1, 8, 4, 4), seed=5, lo=-1.0, hi=1.0)

    check_input_gradient(lambda t: block(t).sum(), x)
    fixed = x.clone()
    check_param_gradients(lambda: block(fixed).sum(), block.parameters())


def test_channel_mismatch_raises_config_error():
    block = ChannelAttention(8, AttentionKind.SE)
    with pytest.raises(S.ConfigError):
        block(torch.rand(1, 4, 5, 5))


def test_non_finite_input_raises_numeric_error():
    block = ChannelAttention(4, AttentionKind.CRA)
    x = torch.rand(1, 4, 5, 5)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(S.NumericError):
        block(x)


def test_unknown_kind_rejected():
    with pytest.raises(S.ConfigError):
        ChannelAttention(4, "squeeze")
