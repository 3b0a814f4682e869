import pytest
import torch

from claresnet.model import CLAReSNet, ModelConfig, parameter_count, parameter_report

TINY = dict(n_classes=3, embed_dim=16, base_channels=8, n_layers=2, heads=2)


def test_forward_shapes():
    model = CLAReSNet(ModelConfig(**TINY)).eval()
    x = torch.randn(2, 8, 7, 7)
    assert model(x).shape == (2, 3)
    assert model.embed(x).shape == (2, 16)
    states = model.encode(x)
    assert len(states) == 2 and all(s.shape == (2, 8, 16) for s in states)


@pytest.mark.parametrize("t,p", [(4, 7), (30, 9), (13, 11)])
def test_shape_stable_over_bands_and_patch(t, p):
    model = CLAReSNet(ModelConfig(**TINY)).eval()
    assert model(torch.randn(1, t, p, p)).shape == (1, 3)


def test_eval_deterministic_and_finite_on_many_inputs():
    torch.manual_seed(0)
    model = CLAReSNet(ModelConfig(**TINY)).eval()
    x = torch.randn(1000, 6, 7, 7) * 3
    with torch.no_grad():
        a = torch.cat([model(x[i:i + 250]) for i in range(0, 1000, 250)])
        b = torch.cat([model(x[i:i + 250]) for i in range(0, 1000, 250)])
    assert torch.equal(a, b)
    assert torch.isfinite(a).all()
    probs = torch.softmax(a.double(), -1)
    assert (probs.sum(-1) - 1).abs().max() <= 1e-6


def test_train_mode_is_stochastic():
    model = CLAReSNet(ModelConfig(**TINY)).train()
    x = torch.randn(4, 5, 7, 7)
    assert not torch.equal(model(x), model(x))


def test_too_many_bands_rejected():
    model = CLAReSNet(ModelConfig(**TINY, max_bands=8)).eval()
    with pytest.raises(ValueError):
        model(torch.randn(1, 9, 7, 7))


def test_config_round_trip_and_validation():
    cfg = ModelConfig(**TINY)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"depth": 3})
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=30, heads=8)


def test_parameter_report_full_config():
    model = CLAReSNet(ModelConfig())
    total = parameter_count(model)
    assert total == 15_436_653
    assert abs(total - 17.3e6) / 17.3e6 <= 0.20
    assert "15,436,653" in parameter_report(model)


def test_same_seed_same_weights():
    torch.manual_seed(5)
    a = CLAReSNet(ModelConfig(**TINY))
    torch.manual_seed(5)
    b = CLAReSNet(ModelConfig(**TINY))
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
