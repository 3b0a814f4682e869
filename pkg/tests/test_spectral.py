import math

import mpmath
import pytest
import torch

from claresnet.nn_core import grad_check
from claresnet.spectral import (
    ClassifierHead,
    EncoderLayer,
    HierarchicalFusion,
    HybridPositionalEncoding,
    MslaConfig,
    MultiScaleLatentAttention,
    downsample_seq,
    latent_count,
    sinusoidal_table,
    upsample_nearest,
)

dbl = dict(dtype=torch.float64)
mpmath.mp.dps = 60


def latent_oracle(t):
    t_eff = max(t, 16)
    lp = int(mpmath.floor(16 * mpmath.log(mpmath.mpf(t_eff) / 16, 2)))
    return min(max(lp, 8), 64)


@pytest.mark.parametrize("t,expected", [(16, 8), (30, 14), (200, 58), (1024, 64), (1, 8), (64, 32)])
def test_latent_count_spot_values(t, expected):
    assert latent_count(t) == expected


def test_latent_count_exhaustive_against_high_precision():
    prev = 0
    for t in range(1, 4097):
        got = latent_count(t)
        assert got == latent_oracle(t), t
        assert 8 <= got <= 64 and got >= prev
        prev = got


def test_latent_count_rejects_zero():
    with pytest.raises(ValueError):
        latent_count(0)


def test_sinusoidal_start_values_and_range():
    table = sinusoidal_table(200, 128)
    assert torch.all(table[0, 0::2] == 0) and torch.all(table[0, 1::2] == 1)
    assert table.abs().max() <= 1
    # half-width normalizer: column pair i uses 10000^(2i/128)
    t, i = 37, 5
    assert table[t, 2 * i].item() == pytest.approx(math.sin(t / 10000 ** (2 * i / 128)), abs=1e-6)
    assert table[t, 2 * i + 1].item() == pytest.approx(math.cos(t / 10000 ** (2 * i / 128)), abs=1e-6)


def test_hybrid_pe_layout_and_capacity():
    pe = HybridPositionalEncoding(16, max_len=40)
    e = torch.zeros(2, 30, 16)
    out = pe(e)
    torch.testing.assert_close(out[0, :, :8], pe.sin_table[:30])
    torch.testing.assert_close(out[1, :, 8:], pe.learn_table[:30].detach())
    assert torch.equal(pe(e), out)
    assert pe.learn_table.requires_grad and not pe.sin_table.requires_grad
    with pytest.raises(ValueError):
        pe(torch.zeros(1, 41, 16))


def test_downsample_examples():
    e = torch.arange(4.0).view(1, 4, 1)
    assert downsample_seq(e, 1) is e
    torch.testing.assert_close(downsample_seq(e, 2), torch.tensor([[[0.5], [2.5]]]))
    e5 = torch.arange(5.0).view(1, 5, 1)
    torch.testing.assert_close(downsample_seq(e5, 2), torch.tensor([[[0.5], [2.5], [4.0]]]))
    e7 = torch.arange(7.0).view(1, 7, 1)
    torch.testing.assert_close(downsample_seq(e7, 4), torch.tensor([[[1.5], [5.0]]]))


def test_upsample_nearest():
    e = torch.tensor([[[1.0], [2.0], [3.0]]])
    torch.testing.assert_close(upsample_nearest(e, 2, 5)[0, :, 0], torch.tensor([1.0, 1, 2, 2, 3]))


def test_msla_config_validation():
    with pytest.raises(ValueError):
        MslaConfig(scales=(2, 4))
    with pytest.raises(ValueError):
        MslaConfig(scales=(4, 1, 2))


@pytest.mark.parametrize("t", [8, 30, 200])
def test_msla_shape(t):
    m = MultiScaleLatentAttention(32, MslaConfig(heads=4)).eval()
    assert m(torch.randn(2, t, 32)).shape == (2, t, 32)


def test_msla_latent_slices_for_t30():
    m = MultiScaleLatentAttention(16, MslaConfig(heads=2)).eval()
    seen = []
    for block in m.scales:
        block.register_forward_hook(lambda mod, inp, out: seen.append((inp[0].shape[1], inp[1].shape[1])))
    m(torch.randn(1, 30, 16))
    assert seen == [(30, 14), (15, 8), (8, 8)]
    assert [latent_count(-(-30 // s)) for s in (1, 2, 4)] == [14, 8, 8]


def test_msla_grad_check_tiny():
    m = MultiScaleLatentAttention(16, MslaConfig(heads=2)).double().eval()
    proj = torch.randn(1, 8, 16, **dbl)
    assert grad_check(lambda x: (m(x) * proj).sum(), torch.randn(1, 8, 16)) <= 1e-5


def test_encoder_layer_shape_and_stack():
    layers = [EncoderLayer(16, MslaConfig(heads=2)).eval() for _ in range(3)]
    h = torch.randn(2, 11, 16)
    for layer in layers:
        h = layer(h)
        assert h.shape == (2, 11, 16)
    assert torch.isfinite(h).all()


def _zero_non_norm(module):
    with torch.no_grad():
        for name, p in module.named_parameters():
            if "norm" not in name:
                p.zero_()


def test_encoder_layer_residual_path():
    layer = EncoderLayer(16, MslaConfig(heads=2)).eval()
    _zero_non_norm(layer)
    with torch.no_grad():
        layer.norm.bias.fill_(0.25)
    h = torch.randn(3, 9, 16)
    torch.testing.assert_close(layer(h), h + 0.25)


def test_encoder_stack_preserves_identity_information():
    layers = torch.nn.ModuleList(EncoderLayer(16, MslaConfig(heads=2)) for _ in range(3)).eval()
    _zero_non_norm(layers)
    h0 = torch.randn(2, 7, 16)
    h = h0
    for layer in layers:
        h = layer(h)
    torch.testing.assert_close(h, h0)


def test_encoder_layer_grad_check():
    layer = EncoderLayer(8, MslaConfig(heads=2)).double().eval()
    proj = torch.randn(1, 5, 8, **dbl)
    assert grad_check(lambda x: (layer(x) * proj).sum(), torch.randn(1, 5, 8)) <= 1e-5


def test_fusion_single_layer_and_shape():
    fusion = HierarchicalFusion(8, heads=2).double().eval()
    h = torch.randn(3, 6, 8, **dbl)
    s = h.mean(dim=1)
    a = fusion.attn
    expect = torch.nn.functional.layer_norm(s + s @ a.w_v @ a.w_o, (8,), fusion.norm.weight, fusion.norm.bias)
    torch.testing.assert_close(fusion([h]), expect)
    assert fusion([h, h, h]).shape == (3, 8)


def test_fusion_identical_layers():
    fusion = HierarchicalFusion(8, heads=2).double().eval()
    h = torch.randn(2, 4, 8, **dbl)
    torch.testing.assert_close(fusion([h, h, h]), fusion([h]))


def test_head_eval_determinism_and_softmax():
    head = ClassifierHead(16, 16).eval()
    f = torch.randn(5, 16)
    assert torch.equal(head(f), head(f))
    probs = torch.softmax(head(f).double(), dim=-1)
    assert probs.shape == (5, 16)
    assert (probs.sum(-1) - 1).abs().max() <= 1e-6
    head.train()
    assert not torch.equal(head(f), head(f))
