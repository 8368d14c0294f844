"""AdamW training with linear warmup and cosine decay."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import __version__
from .. import autodiff as ad
from ..blocks import ModelConfig, forward_classify, init_params, predict
from ..errors import ConfigError, TrainingDiverged
from ..rng import derive_seed, generator
from ..serialize import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    weight_decay: float = 0.05
    epochs: int = 30
    batch_size: int = 32
    warmup_epochs: int = 2
    cosine: bool = True
    seed: int = 0
    label_smoothing: float = 0.1
    augment: str = "dihedral"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("need lr >= 0, epochs >= 1, batch_size >= 1")
        if self.augment not in ("none", "dihedral"):
            raise ConfigError(f"unknown augmentation {self.augment!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def dihedral(images: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Apply one of the 8 square symmetries per image; code = 4 * flip + quarter turns."""
    out = np.empty_like(images)
    for i, code in enumerate(codes):
        img = images[i]
        if code >= 4:
            img = img[..., ::-1]
        out[i] = np.rot90(img, k=int(code) % 4, axes=(-2, -1))
    return out


def lr_at(step: int, total: int, warmup: int, cfg: TrainConfig) -> float:
    if warmup and step < warmup:
        return cfg.lr * (step + 1) / warmup
    if not cfg.cosine:
        return cfg.lr
    span = max(total - warmup, 1)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * (step - warmup) / span))


class AdamW:
    """Adam with decoupled weight decay on matrices (ndim >= 2)."""

    def __init__(self, params: dict, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            if p.ndim >= 2 and c.weight_decay:
                p -= (lr * c.weight_decay) * p
            p -= (lr / bc1) * m / (np.sqrt(v / bc2) + c.eps)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


def evaluate(params: dict, cfg: ModelConfig, images: np.ndarray, labels: np.ndarray) -> float:
    return accuracy(predict(images, params, cfg), labels)


@dataclass
class TrainResult:
    params: dict
    header: dict
    log: list = field(default_factory=list)

    def save(self, path) -> None:
        save_checkpoint(path, self.header, self.params)


def make_header(model: ModelConfig, tcfg: TrainConfig, step: int, dataset: dict | None) -> dict:
    return {
        "format": "fan-checkpoint/1",
        "version": __version__,
        "model": model.to_dict(),
        "train": asdict(tcfg),
        "seed": tcfg.seed,
        "step": step,
        "dataset": dataset,
    }


def load(path) -> tuple[ModelConfig, dict, dict]:
    header, params = load_checkpoint(path)
    return ModelConfig.from_dict(header["model"]), params, header


def train(model: ModelConfig, train_set, tcfg: TrainConfig, val_set=None,
          dataset_spec: dict | None = None, dtype=np.float32) -> TrainResult:
    """Train ``model`` on ``train_set``; deterministic given ``tcfg.seed``.

    Raises :class:`TrainingDiverged` (carrying the last finite parameters)
    if the loss stops being finite.
    """
    params = init_params(model, derive_seed(tcfg.seed, "init"), dtype=dtype)
    opt = AdamW(params, tcfg)
    images, labels = train_set.images.astype(dtype, copy=False), train_set.labels
    n = len(labels)
    steps_per_epoch = math.ceil(n / tcfg.batch_size)
    total = steps_per_epoch * tcfg.epochs
    warmup = steps_per_epoch * tcfg.warmup_epochs
    history = []
    step = 0
    for epoch in range(tcfg.epochs):
        order = generator(tcfg.seed, "shuffle", epoch).permutation(n)
        last_good = {k: v.copy() for k, v in params.items()}
        loss_sum, correct = 0.0, 0
        for b in range(steps_per_epoch):
            idx = order[b * tcfg.batch_size:(b + 1) * tcfg.batch_size]
            batch = images[idx]
            if tcfg.augment == "dihedral":
                batch = dihedral(batch, generator(tcfg.seed, "augment", epoch, b).integers(0, 8, len(idx)))
            tape = ad.GradTape()
            logits = forward_classify(batch, tape.params_from(params), model)
            loss = ad.cross_entropy(logits, labels[idx], tcfg.label_smoothing)
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}", last_good=last_good, epoch=epoch
                )
            grads = tape.backward(loss)
            # the tape's Vars alias ``params``; step in place after backward
            opt.step(params, grads, lr_at(step, total, warmup, tcfg))
            step += 1
            loss_sum += lv * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=-1) == labels[idx]))
        row = {"epoch": epoch + 1, "loss": loss_sum / n, "train_acc": correct / n}
        if val_set is not None:
            row["val_acc"] = evaluate(params, model, val_set.images.astype(dtype, copy=False), val_set.labels)
        history.append(row)
        log.info("epoch %d %s", epoch + 1, row)
    return TrainResult(params, make_header(model, tcfg, step, dataset_spec), history)
