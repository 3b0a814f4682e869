"""Cross-entropy training with AdamW, early stopping and checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F

from . import rng as rngs
from .datapipe import AugmentConfig, PatchSet, augment_batch, batch_iter

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CKP1"
CKPT_VERSION = 1
HISTORY_FIELDS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


class CheckpointFormatError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 40
    batch_train: int = 16
    batch_eval: int = 32
    early_stop_patience: int = 10
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.epochs < 1 or self.batch_train < 1 or self.batch_eval < 1:
            raise ValueError("epochs and batch sizes must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown train config field(s): {sorted(unknown)}")
        return cls(**doc)


# --------------------------------------------------------------------------- loss


def cross_entropy(logits, labels):
    """Mean negative log-likelihood; ``labels`` are 1-based class ids."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    n_classes = logits.shape[-1]
    if labels.numel() and (labels.min() < 1 or labels.max() > n_classes):
        raise ValueError(f"labels must lie in 1..{n_classes}")
    return F.cross_entropy(logits, labels - 1)


# --------------------------------------------------------------------------- optimizer


def adamw_step(w, g, m, v, step: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0):
    """One decoupled-decay Adam update for step ``step`` (1-based).

    Works on floats, numpy arrays or torch tensors; returns ``(w, m, v)``.
    """
    b1, b2 = betas
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    m_hat = m / (1 - b1 ** step)
    v_hat = v / (1 - b2 ** step)
    sqrt = math.sqrt if isinstance(v_hat, float) else (np.sqrt if isinstance(v_hat, np.ndarray) else torch.sqrt)
    w = w - lr * (m_hat / (sqrt(v_hat) + eps)) - lr * weight_decay * w
    return w, m, v


class AdamW:
    """AdamW over named parameters. Decay applies to tensors with ndim >= 2."""

    def __init__(self, named_params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        self.params = dict(named_params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.step_count = 0
        self.exp_avg = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.exp_avg_sq = {k: torch.zeros_like(p) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def decays(self, name: str) -> bool:
        return self.params[name].dim() >= 2

    @torch.no_grad()
    def step(self):
        self.step_count += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if not torch.isfinite(p.grad).all():
                raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
            wd = self.weight_decay if self.decays(name) else 0.0
            w, m, v = adamw_step(p, p.grad, self.exp_avg[name], self.exp_avg_sq[name],
                                 self.step_count, self.lr, self.betas, self.eps, wd)
            p.copy_(w)
            self.exp_avg[name] = m
            self.exp_avg_sq[name] = v

    def state_dict(self) -> dict:
        return {"step": self.step_count, "exp_avg": dict(self.exp_avg), "exp_avg_sq": dict(self.exp_avg_sq)}

    def load_state_dict(self, state: dict):
        self.step_count = int(state["step"])
        for key in ("exp_avg", "exp_avg_sq"):
            missing = set(self.params) - set(state[key])
            if missing:
                raise KeyError(f"optimizer state lacks {sorted(missing)[:3]}")
            getattr(self, key).update({k: state[key][k].clone() for k in self.params})


# --------------------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model_state: dict
    optim_state: dict | None = None
    epoch: int = 0
    best_val_acc: float = -1.0
    model_config: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    seed: int = 0
    metrics: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)  # auxiliary arrays (rng state etc.)


_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
    "uint8": (torch.uint8, "u1"),
}
_TORCH_TO_NAME = {v[0]: k for k, v in _DTYPES.items()}


def _named_tensors(ckpt: Checkpoint):
    out = [(f"model/{k}", t) for k, t in ckpt.model_state.items()]
    if ckpt.optim_state is not None:
        for key in ("exp_avg", "exp_avg_sq"):
            out += [(f"optim.{key}/{k}", t) for k, t in ckpt.optim_state[key].items()]
    out += [(f"aux/{k}", t) for k, t in ckpt.tensors.items()]
    return out


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = {
        "epoch": ckpt.epoch,
        "best_val_acc": ckpt.best_val_acc,
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "seed": ckpt.seed,
        "metrics": ckpt.metrics,
        "extra": ckpt.extra,
        "optim_step": None if ckpt.optim_state is None else ckpt.optim_state["step"],
    }
    table, payload, offset = [], io.BytesIO(), 0
    for name, t in _named_tensors(ckpt):
        t = t.detach().cpu().contiguous()
        if t.dtype not in _TORCH_TO_NAME:
            raise TypeError(f"cannot store {name} of dtype {t.dtype}")
        dname = _TORCH_TO_NAME[t.dtype]
        raw = t.numpy().astype(_DTYPES[dname][1], copy=False).tobytes()
        table.append({"name": name, "dtype": dname, "shape": list(t.shape), "offset": offset})
        payload.write(raw)
        offset += len(raw)
    meta_b = json.dumps(meta, sort_keys=True).encode()
    table_b = json.dumps(table).encode()
    head = CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(meta_b)) + meta_b
    return head + struct.pack("<Q", len(table_b)) + table_b + payload.getvalue()


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    try:
        return _parse_checkpoint(buf)
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, CheckpointFormatError):
            raise
        raise CheckpointFormatError(f"malformed checkpoint: {exc}") from exc


def _parse_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointFormatError("not a CKP1 checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<IQ", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    pos = 16
    meta = json.loads(buf[pos:pos + meta_len])
    pos += meta_len
    (table_len,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    table = json.loads(buf[pos:pos + table_len])
    base = pos + table_len
    groups: dict[str, dict] = {"model": {}, "optim.exp_avg": {}, "optim.exp_avg_sq": {}, "aux": {}}
    for entry in table:
        np_dtype = np.dtype(_DTYPES[entry["dtype"]][1])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        if start + count * np_dtype.itemsize > len(buf):
            raise CheckpointFormatError(f"tensor {entry['name']} truncated")
        arr = np.frombuffer(buf, dtype=np_dtype, count=count, offset=start).reshape(entry["shape"])
        group, name = entry["name"].split("/", 1)
        groups[group][name] = torch.from_numpy(arr.copy())
    optim = None
    if meta["optim_step"] is not None:
        optim = {"step": meta["optim_step"], "exp_avg": groups["optim.exp_avg"],
                 "exp_avg_sq": groups["optim.exp_avg_sq"]}
    return Checkpoint(groups["model"], optim, meta["epoch"], meta["best_val_acc"], meta["model_config"],
                      meta["train_config"], meta["seed"], meta["metrics"], meta["extra"], groups["aux"])


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


def snapshot(model) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


# --------------------------------------------------------------------------- loops


def _as_batch(patches: np.ndarray):
    return torch.from_numpy(np.ascontiguousarray(patches, dtype=np.float32))


@torch.no_grad()
def predict_logits(model, patches: np.ndarray, batch_size: int = 32, embed: bool = False):
    """Eval-mode forward in split order. Returns logits, or ``(logits, embeddings)``."""
    was_training = model.training
    model.eval()
    logits, embs = [], []
    try:
        for idx in batch_iter(len(patches), batch_size):
            f = model.embed(_as_batch(patches[idx]))
            logits.append(model.head(f))
            embs.append(f)
    finally:
        model.train(was_training)
    logits = torch.cat(logits)
    return (logits, torch.cat(embs)) if embed else logits


def evaluate(model, data: PatchSet, batch_size: int = 32):
    """Class probabilities (N, C) and the 1-based labels, in split order."""
    logits = predict_logits(model, data.patches, batch_size)
    return torch.softmax(logits.double(), dim=-1).numpy(), np.asarray(data.labels)


def _val_pass(model, data: PatchSet, batch_size: int):
    logits = predict_logits(model, data.patches, batch_size)
    labels = torch.as_tensor(data.labels)
    loss = cross_entropy(logits, labels).item()
    acc = (logits.argmax(dim=1) + 1 == labels).double().mean().item()
    return loss, acc


@dataclass
class TrainState:
    """Everything needed to resume: optimizer, progress and the random streams."""

    optimizer: AdamW
    epoch: int = 0
    best_val_acc: float = -1.0
    best_epoch: int = 0
    since_best: int = 0
    history: list = field(default_factory=list)
    shuffle_rng: np.random.Generator | None = None
    augment_rng: np.random.Generator | None = None


def new_train_state(model, cfg: TrainConfig) -> TrainState:
    opt = AdamW(model.named_parameters(), cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    return TrainState(opt, shuffle_rng=rngs.stream(cfg.seed, rngs.SHUFFLE),
                      augment_rng=rngs.stream(cfg.seed, rngs.AUGMENT))


def make_checkpoint(model, state: TrainState, cfg: TrainConfig, model_state=None, epoch=None,
                    metrics=None) -> Checkpoint:
    extra = {
        "best_epoch": state.best_epoch,
        "since_best": state.since_best,
        "history": state.history,
        "shuffle_rng": state.shuffle_rng.bit_generator.state,
        "augment_rng": state.augment_rng.bit_generator.state,
    }
    model_cfg = model.cfg.to_dict() if hasattr(model, "cfg") else {}
    return Checkpoint(
        model_state=snapshot(model) if model_state is None else model_state,
        optim_state=state.optimizer.state_dict(),
        epoch=state.epoch if epoch is None else epoch,
        best_val_acc=state.best_val_acc,
        model_config=model_cfg,
        train_config=cfg.to_dict(),
        seed=cfg.seed,
        metrics=metrics or {},
        extra=extra,
        tensors={"torch_rng": torch.get_rng_state()},
    )


def restore_train_state(model, ckpt: Checkpoint, cfg: TrainConfig) -> TrainState:
    model.load_state_dict(ckpt.model_state)
    state = new_train_state(model, cfg)
    state.optimizer.load_state_dict(ckpt.optim_state)
    state.epoch = ckpt.epoch
    state.best_val_acc = ckpt.best_val_acc
    state.best_epoch = ckpt.extra["best_epoch"]
    state.since_best = ckpt.extra["since_best"]
    state.history = [dict(row) for row in ckpt.extra["history"]]
    state.shuffle_rng.bit_generator.state = ckpt.extra["shuffle_rng"]
    state.augment_rng.bit_generator.state = ckpt.extra["augment_rng"]
    if "torch_rng" in ckpt.tensors:
        torch.set_rng_state(ckpt.tensors["torch_rng"])
    return state


def train(model, train_set: PatchSet, val_set: PatchSet, cfg: TrainConfig,
          state: TrainState | None = None, augment_cfg: AugmentConfig | None = None,
          on_epoch=None):
    """Train until ``cfg.epochs`` or early stopping.

    Returns ``(best, last, history)``: ``best`` is the checkpoint with the
    highest validation accuracy (ties keep the earlier one), or None when a
    resumed run never improves on the stored best; ``last`` is the resumable
    end state. ``on_epoch(best, last)`` is called after every epoch.
    """
    if len(train_set) == 0:
        raise ValueError("empty training split")
    if len(val_set) == 0:
        raise ValueError("empty validation split")
    state = state or new_train_state(model, cfg)
    augment_cfg = augment_cfg or AugmentConfig()
    opt = state.optimizer
    best = None
    while state.epoch < cfg.epochs and state.since_best < cfg.early_stop_patience:
        model.train()
        total_loss, correct = 0.0, 0
        for idx in batch_iter(len(train_set), cfg.batch_train, shuffle=True, rng=state.shuffle_rng):
            x = train_set.patches[idx]
            if cfg.augment:
                x = augment_batch(x, augment_cfg, state.augment_rng)
            y = torch.as_tensor(train_set.labels[idx])
            logits = model(_as_batch(x))
            loss = cross_entropy(logits, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += loss.item() * len(idx)
            correct += int((logits.detach().argmax(dim=1) + 1 == y).sum())
        val_loss, val_acc = _val_pass(model, val_set, cfg.batch_eval)
        state.epoch += 1
        row = {"epoch": state.epoch, "train_loss": total_loss / len(train_set),
               "train_acc": correct / len(train_set), "val_loss": val_loss, "val_acc": val_acc}
        state.history.append(row)
        log.info("epoch %d  train_loss %.4f  train_acc %.4f  val_loss %.4f  val_acc %.4f",
                 *(row[k] for k in HISTORY_FIELDS))
        if val_acc > state.best_val_acc:
            state.best_val_acc = val_acc
            state.best_epoch = state.epoch
            state.since_best = 0
            best = make_checkpoint(model, state, cfg, metrics={"val_acc": val_acc, "val_loss": val_loss})
        else:
            state.since_best += 1
        last = make_checkpoint(model, state, cfg)
        if on_epoch is not None:
            on_epoch(best, last)
    return best, make_checkpoint(model, state, cfg), state.history


def history_csv(history) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_FIELDS)
    for row in history:
        writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])
    return buf.getvalue()
