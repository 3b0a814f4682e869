import math

import numpy as np
import pytest
import torch
from torch import nn

from claresnet.datapipe import PatchSet
from claresnet.model import CLAReSNet, ModelConfig
from claresnet.training import (
    AdamW,
    Checkpoint,
    CheckpointFormatError,
    TrainConfig,
    adamw_step,
    checkpoint_bytes,
    checkpoint_from_bytes,
    cross_entropy,
    evaluate,
    history_csv,
    load_checkpoint,
    make_checkpoint,
    restore_train_state,
    save_checkpoint,
    train,
)


class TinyNet(nn.Module):
    """Band means through a linear head; fast enough for loop-level tests."""

    def __init__(self, n_bands=3, n_classes=2, bias=None):
        super().__init__()
        self.head = nn.Linear(n_bands, n_classes)
        if bias is not None:
            with torch.no_grad():
                self.head.weight.zero_()
                self.head.bias.copy_(torch.tensor(bias))

    def embed(self, x):
        return x.mean(dim=(2, 3))

    def forward(self, x):
        return self.head(self.embed(x))


def toy_sets(n=12, seed=0, const_val_label=None):
    rng = np.random.default_rng(seed)
    y = rng.integers(1, 3, size=n)
    x = rng.normal(size=(n, 3, 3, 3)).astype(np.float32) + y[:, None, None, None].astype(np.float32)
    origins = np.zeros((n, 2), dtype=np.int64)
    tr = PatchSet(x, y, origins)
    yv = y if const_val_label is None else np.full(n, const_val_label)
    return tr, PatchSet(x.copy(), yv, origins)


# --------------------------------------------------------------------------- loss


def test_cross_entropy_uniform_logits():
    loss = cross_entropy(torch.zeros(3, 4), torch.tensor([1, 2, 4]))
    assert loss.item() == pytest.approx(math.log(4), abs=1e-6)


def test_cross_entropy_hand_value():
    loss = cross_entropy(torch.tensor([[2.0, 1.0, 0.1]], dtype=torch.float64), torch.tensor([1]))
    assert loss.item() == pytest.approx(0.4170300162778335, abs=1e-12)
    binary = cross_entropy(torch.tensor([[1.0, 0.0]], dtype=torch.float64), torch.tensor([1]))
    assert binary.item() == pytest.approx(0.31326168751822286, abs=1e-12)


def test_cross_entropy_rejects_zero_label():
    with pytest.raises(ValueError):
        cross_entropy(torch.zeros(1, 3), torch.tensor([0]))


# --------------------------------------------------------------------------- optimizer


def test_adamw_first_step_hand_example():
    # first step moves by ~lr*sign(g); decay adds lr*wd*w
    w, m, v = adamw_step(1.0, 0.5, 0.0, 0.0, step=1, lr=0.1, weight_decay=0.01)
    assert w == pytest.approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.1 * 0.01, abs=1e-12)
    assert w == pytest.approx(0.899, abs=1e-7)
    assert m == pytest.approx(0.05) and v == pytest.approx(0.00025)


def test_adamw_class_matches_float64_reference():
    torch.manual_seed(1)
    params = {"w": nn.Parameter(torch.randn(3, 4, dtype=torch.float64)),
              "b": nn.Parameter(torch.randn(4, dtype=torch.float64))}
    opt = AdamW(params.items(), lr=0.05, weight_decay=0.1)
    ref = {k: (p.detach().numpy().copy(), np.zeros(p.shape), np.zeros(p.shape)) for k, p in params.items()}
    rng = np.random.default_rng(0)
    for step in range(1, 6):
        for k, p in params.items():
            g = rng.normal(size=p.shape)
            p.grad = torch.tensor(g)
            wd = 0.1 if p.dim() >= 2 else 0.0
            ref[k] = adamw_step(*ref[k][:1], g, *ref[k][1:], step=step, lr=0.05, weight_decay=wd)
        opt.step()
    for k, p in params.items():
        np.testing.assert_allclose(p.detach().numpy(), ref[k][0], rtol=0, atol=1e-12)


def test_adamw_no_decay_on_vectors():
    p = nn.Parameter(torch.ones(3))
    q = nn.Parameter(torch.ones(2, 2))
    opt = AdamW([("p", p), ("q", q)], lr=0.1, weight_decay=0.5)
    p.grad, q.grad = torch.zeros(3), torch.zeros(2, 2)
    opt.step()
    assert torch.equal(p.data, torch.ones(3))
    torch.testing.assert_close(q.data, torch.full((2, 2), 0.95))


def test_adamw_rejects_nonfinite_gradient():
    p = nn.Parameter(torch.ones(2))
    opt = AdamW([("layer.bias", p)])
    p.grad = torch.tensor([1.0, float("nan")])
    with pytest.raises(FloatingPointError, match="layer.bias"):
        opt.step()


def test_loss_decreases_on_fixed_batch():
    torch.manual_seed(0)
    cfg = ModelConfig(n_classes=3, embed_dim=16, base_channels=8, n_layers=1, heads=2)
    model = CLAReSNet(cfg).eval()  # fixed function apart from the weights
    opt = AdamW(model.named_parameters(), lr=1e-3)
    x = torch.randn(4, 6, 7, 7)
    y = torch.tensor([1, 2, 3, 1])
    losses = []
    for _ in range(5):
        loss = cross_entropy(model(x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert all(b < a for a, b in zip(losses, losses[1:]))


# --------------------------------------------------------------------------- checkpoints


def _small_ckpt():
    model = TinyNet()
    return Checkpoint(model_state={k: v.clone() for k, v in model.state_dict().items()},
                      epoch=3, best_val_acc=0.75, seed=7, metrics={"val_acc": 0.75},
                      extra={"note": [1, 2]}, tensors={"aux": torch.arange(5, dtype=torch.uint8)})


def test_checkpoint_bytes_round_trip():
    ckpt = _small_ckpt()
    buf = checkpoint_bytes(ckpt)
    back = checkpoint_from_bytes(buf)
    assert checkpoint_bytes(back) == buf
    assert back.epoch == 3 and back.best_val_acc == 0.75 and back.extra == {"note": [1, 2]}
    for k, v in ckpt.model_state.items():
        assert torch.equal(back.model_state[k], v)


def test_checkpoint_file_round_trip(tmp_path):
    ckpt = _small_ckpt()
    save_checkpoint(tmp_path / "a.ckpt", ckpt)
    assert checkpoint_bytes(load_checkpoint(tmp_path / "a.ckpt")) == checkpoint_bytes(ckpt)


@pytest.mark.parametrize("cut", [0, 3, 10, -1])
def test_checkpoint_truncation_rejected(cut):
    buf = checkpoint_bytes(_small_ckpt())
    with pytest.raises(CheckpointFormatError):
        checkpoint_from_bytes(buf[:cut])


def test_checkpoint_bad_magic():
    buf = checkpoint_bytes(_small_ckpt())
    with pytest.raises(CheckpointFormatError):
        checkpoint_from_bytes(b"XXXX" + buf[4:])


# --------------------------------------------------------------------------- loop


def test_early_stopping_after_patience():
    tr, va = toy_sets(const_val_label=1)
    model = TinyNet(bias=[5.0, -5.0])  # val accuracy is 1.0 from the first epoch
    cfg = TrainConfig(epochs=40, batch_train=4, lr=1e-4, early_stop_patience=3, augment=False)
    best, last, hist = train(model, tr, va, cfg)
    assert len(hist) == 4
    assert best.epoch == 1 and last.epoch == 4


def test_unbounded_patience_runs_all_epochs():
    tr, va = toy_sets(const_val_label=1)
    model = TinyNet(bias=[5.0, -5.0])
    cfg = TrainConfig(epochs=40, batch_train=6, early_stop_patience=10**9, augment=False)
    _, last, hist = train(model, tr, va, cfg)
    assert len(hist) == 40 and last.epoch == 40
    assert [r["epoch"] for r in hist] == list(range(1, 41))


def test_best_checkpoint_tracks_val_accuracy():
    tr, va = toy_sets(n=20)
    torch.manual_seed(0)
    cfg = TrainConfig(epochs=8, batch_train=4, lr=5e-2, augment=False)
    best, _, hist = train(TinyNet(), tr, va, cfg)
    accs = [r["val_acc"] for r in hist]
    assert best.best_val_acc == max(accs)
    assert best.epoch == accs.index(max(accs)) + 1


def test_resume_continues_exactly():
    tr, va = toy_sets(n=16)
    cfg = TrainConfig(epochs=6, batch_train=4, lr=1e-2, early_stop_patience=100, augment=True)

    torch.manual_seed(3)
    full = TinyNet()
    init = {k: v.clone() for k, v in full.state_dict().items()}
    _, last_full, hist_full = train(full, tr, va, cfg)

    torch.manual_seed(3)
    part = TinyNet()
    part.load_state_dict(init)
    _, mid, _ = train(part, tr, va, TrainConfig(**{**cfg.to_dict(), "epochs": 3}))
    mid = checkpoint_from_bytes(checkpoint_bytes(mid))
    resumed = TinyNet()
    state = restore_train_state(resumed, mid, cfg)
    assert state.optimizer.step_count == 3 * 4
    _, last_res, hist_res = train(resumed, tr, va, cfg, state=state)
    assert state.optimizer.step_count == 6 * 4
    assert hist_res == hist_full
    assert checkpoint_bytes(last_res) == checkpoint_bytes(last_full)


def test_empty_split_rejected():
    tr, va = toy_sets()
    empty = PatchSet(tr.patches[:0], tr.labels[:0], tr.origins[:0])
    with pytest.raises(ValueError):
        train(TinyNet(), empty, va, TrainConfig(epochs=1))


def test_evaluate_deterministic_and_normalized():
    tr, _ = toy_sets()
    model = TinyNet()
    model.train()
    p1, y1 = evaluate(model, tr, batch_size=5)
    p2, _ = evaluate(model, tr, batch_size=32)
    np.testing.assert_allclose(p1, p2, atol=1e-7)
    assert p1.dtype == np.float64 and np.all(np.abs(p1.sum(1) - 1) < 1e-12)
    assert np.array_equal(y1, tr.labels) and model.training


def test_history_csv_layout():
    rows = [{"epoch": 1, "train_loss": 0.5, "train_acc": 0.25, "val_loss": 0.1, "val_acc": 1.0}]
    text = history_csv(rows)
    assert text.splitlines() == ["epoch,train_loss,train_acc,val_loss,val_acc", "1,0.5,0.25,0.1,1.0"]


def test_make_checkpoint_holds_resume_data():
    from claresnet.training import new_train_state

    model = TinyNet()
    cfg = TrainConfig()
    ck = make_checkpoint(model, new_train_state(model, cfg), cfg)
    assert {"best_epoch", "since_best", "history", "shuffle_rng", "augment_rng"} <= set(ck.extra)
    assert "torch_rng" in ck.tensors


def test_train_config_round_trip_and_validation():
    cfg = TrainConfig(lr=3e-4, epochs=5)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1.0})
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
