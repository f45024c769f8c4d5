"""Standard training, DOA adversarial training and sliced adversarial training.

Phase 1 is momentum SGD with a step-decayed learning rate. Phase 2 (DOA) uses
Adam under one triangular learning-rate cycle and replaces every batch by its
ROA counterpart against the current model. :class:`AdversarialTrainer` keeps
the phase-2 state (optimizer, schedule, batch cursor) so training can be run
in fractional-epoch slices, which is how color optimization interleaves it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from signforge.attacks import AttackConfig, predict, roa_attack
from signforge.model.nets import Classifier, build_model

log = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    arch: str = "small_conv"
    phase1_epochs: int = 30
    phase1_lr: float = 0.03
    phase1_decay: float = 0.1
    phase1_decay_every: int = 15
    momentum: float = 0.9
    weight_decay: float = 5e-4
    phase2_epochs: int = 100
    phase2_optimizer: str = "adam"
    phase2_schedule: str = "cyclic"
    phase2_peak_lr: float = 0.01
    phase2_floor_lr: float = 2.5e-6
    batch_size: int = 64
    patch_coverage: float = 0.05
    # inner ROA used to generate adversarial batches
    inner_search: str = "gradient"
    inner_stride: int = 2
    inner_top_candidates: int = 8
    inner_steps: int = 5
    inner_step_size: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.phase1_epochs, self.phase2_epochs, self.batch_size) < 0 or self.batch_size == 0:
            raise TrainingError("epochs must be >= 0 and batch_size > 0")
        if not 0.0 < self.patch_coverage < 0.5:
            raise TrainingError("patch_coverage must be in (0, 0.5)")
        if self.phase2_optimizer != "adam" or self.phase2_schedule != "cyclic":
            raise TrainingError("phase 2 supports only adam + cyclic")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        params = dict(phase1_epochs=12, phase1_decay_every=8, phase2_epochs=25)
        params.update(overrides)
        return cls(**params)

    def inner_attack_config(self) -> AttackConfig:
        return AttackConfig(
            attack="roa", coverage=self.patch_coverage, m=1, stride=self.inner_stride, search=self.inner_search,
            top_candidates=self.inner_top_candidates, opt_steps=self.inner_steps, step_size=self.inner_step_size,
        )

    def hash(self) -> str:
        return config_hash(self)


def config_hash(cfg) -> str:
    doc = dataclasses.asdict(cfg) if dataclasses.is_dataclass(cfg) else cfg
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- data sources -----------------------------------------------------------------


class TensorSource:
    def __init__(self, x: torch.Tensor, y: torch.Tensor):
        if len(x) != len(y):
            raise TrainingError("images and labels differ in length")
        self.x, self.y = x, y

    def __len__(self):
        return len(self.x)

    def batch(self, idx):
        return self.x[idx], self.y[idx]


class RenderSource:
    """Renders a split of a :class:`SignDataset` on demand (for changing standards)."""

    def __init__(self, dataset, indices):
        self.dataset = dataset
        self.indices = np.asarray(indices)

    def __len__(self):
        return len(self.indices)

    def batch(self, idx):
        sel = self.indices[np.asarray(idx)]
        with torch.no_grad():
            return self.dataset.render(sel), self.dataset.labels(sel)


def as_source(data):
    if isinstance(data, (tuple, list)):
        return TensorSource(*data)
    return data


def _check_source(source, n_classes):
    if len(source) == 0:
        raise TrainingError("empty dataset")
    if isinstance(source, TensorSource):
        y = source.y
        if y.min() < 0 or y.max() >= n_classes:
            raise TrainingError(f"label out of range [1, {n_classes}]")


# -- phase 1 ----------------------------------------------------------------------


def phase1_scheduler(optimizer, config: TrainConfig):
    return torch.optim.lr_scheduler.StepLR(optimizer, step_size=config.phase1_decay_every, gamma=config.phase1_decay)


def _batches(n, batch_size, generator):
    perm = torch.randperm(n, generator=generator)
    return [perm[k : k + batch_size] for k in range(0, n, batch_size)]


def train_standard(model: Classifier, data, config: TrainConfig, epochs: int | None = None) -> Classifier:
    """Phase 1: momentum SGD, lr decayed by ``phase1_decay`` every ``phase1_decay_every`` epochs."""
    source = as_source(data)
    _check_source(source, model.n_classes)
    epochs = config.phase1_epochs if epochs is None else epochs
    opt = torch.optim.SGD(model.parameters(), lr=config.phase1_lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    sched = phase1_scheduler(opt, config)
    gen = torch.Generator().manual_seed(config.seed)
    model.train()
    for epoch in range(epochs):
        lr = opt.param_groups[0]["lr"]
        tot_loss, correct = 0.0, 0
        for idx in _batches(len(source), config.batch_size, gen):
            x, y = source.batch(idx)
            logits = model(x)
            loss = F.cross_entropy(logits, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot_loss += loss.item() * len(idx)
            correct += int((logits.argmax(1) == y).sum())
        sched.step()
        model.history.append({"phase": 1, "epoch": epoch, "lr": lr, "loss": tot_loss / len(source),
                              "train_acc": correct / len(source)})
        log.debug("phase1 epoch %d loss %.4f acc %.3f", epoch, tot_loss / len(source), correct / len(source))
    model.eval()
    return model


# -- phase 2 ----------------------------------------------------------------------


def roa_inner_attack(config: TrainConfig):
    cfg = config.inner_attack_config()

    def attack(model, x, y):
        return roa_attack(model, x, y, cfg).adv

    return attack


def triangular_lr(step: int, total: int, floor: float, peak: float) -> float:
    """One triangular cycle: floor -> peak at the midpoint -> floor at ``total``."""
    if total <= 1:
        return peak
    t = min(max(step / total, 0.0), 1.0)
    return floor + (peak - floor) * max(0.0, 1.0 - abs(2.0 * t - 1.0))


class AdversarialTrainer:
    """Phase-2 state that persists across fractional-epoch calls."""

    def __init__(self, model: Classifier, config: TrainConfig, n_samples: int, inner_attack=None,
                 total_epochs: float | None = None):
        if n_samples <= 0:
            raise TrainingError("empty dataset")
        self.model = model
        self.config = config
        self.n_samples = n_samples
        self.inner_attack = inner_attack or roa_inner_attack(config)
        self.batches_per_epoch = math.ceil(n_samples / config.batch_size)
        total_epochs = config.phase2_epochs if total_epochs is None else total_epochs
        self.total_steps = max(1, math.ceil(total_epochs * self.batches_per_epoch))
        floor, peak = config.phase2_floor_lr, config.phase2_peak_lr
        self.optimizer = torch.optim.Adam(model.parameters(), lr=peak)
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(
            self.optimizer, lambda s: triangular_lr(s, self.total_steps, floor, peak) / peak
        )
        self.generator = torch.Generator().manual_seed(config.seed + 1)
        self.epoch = -1
        self.cursor = 0
        self.order: list = []
        self.steps_done = 0
        self.visited: list[tuple[int, int]] = []  # (epoch, batch position)

    def _next_indices(self):
        if self.cursor >= len(self.order):
            self.order = _batches(self.n_samples, self.config.batch_size, self.generator)
            self.cursor = 0
            self.epoch += 1
        idx = self.order[self.cursor]
        self.visited.append((self.epoch, self.cursor))
        self.cursor += 1
        return idx

    def step(self, source) -> float:
        idx = self._next_indices()
        x, y = source.batch(idx)
        x_adv = self.inner_attack(self.model, x, y).detach()
        self.model.train()
        logits = self.model(x_adv)
        loss = F.cross_entropy(logits, y)
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.scheduler.step()
        self.steps_done += 1
        self.model.eval()
        return loss.item()

    def run_batches(self, source, n_batches: int) -> list[float]:
        if len(source) != self.n_samples:
            raise TrainingError("source size changed between calls")
        return [self.step(source) for _ in range(n_batches)]

    def train_fraction(self, source, fraction: float) -> list[float]:
        if not 0.0 < fraction <= 1.0:
            raise TrainingError(f"fraction must be in (0, 1], got {fraction}")
        return self.run_batches(source, math.ceil(fraction * self.batches_per_epoch))


def train_doa(model: Classifier, data, config: TrainConfig, inner_attack=None) -> Classifier:
    """Phase 2: ``phase2_epochs`` epochs of adversarial training on ROA examples."""
    source = as_source(data)
    _check_source(source, model.n_classes)
    trainer = AdversarialTrainer(model, config, len(source), inner_attack)
    for epoch in range(config.phase2_epochs):
        losses = trainer.run_batches(source, trainer.batches_per_epoch)
        model.history.append({"phase": 2, "epoch": epoch, "loss": float(np.mean(losses)),
                              "lr": trainer.optimizer.param_groups[0]["lr"]})
        log.debug("phase2 epoch %d loss %.4f", epoch, float(np.mean(losses)))
    return model


def train_fraction(trainer: AdversarialTrainer, data, fraction: float) -> Classifier:
    """Advance ``trainer`` by ceil(fraction * batches_per_epoch) adversarial batches."""
    trainer.train_fraction(as_source(data), fraction)
    return trainer.model


def doa_from_scratch(data, config: TrainConfig, n_classes: int, image_size: int, seed: int | None = None,
                     arch: str | None = None) -> Classifier:
    """Build a fresh model, then run phase 1 and phase 2 on ``data``."""
    seed = config.seed if seed is None else seed
    config = dataclasses.replace(config, seed=seed)
    model = build_model(arch or config.arch, n_classes, image_size, seed)
    train_standard(model, data, config)
    train_doa(model, data, config)
    return model


def evaluate_benign(model, x: torch.Tensor, y: torch.Tensor) -> float:
    if len(x) == 0:
        raise TrainingError("empty split")
    return float((predict(model, x) == y).float().mean())


# -- checkpoints --------------------------------------------------------------------


def save_checkpoint(model: Classifier, path, metadata: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "arch": model.arch,
            "n_classes": model.n_classes,
            "image_size": model.image_size,
            "state_dict": model.state_dict(),
            "history": model.history,
            "metadata": metadata or {},
        },
        path,
    )


def load_checkpoint(path) -> Classifier:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    model = build_model(blob["arch"], blob["n_classes"], blob["image_size"])
    model.load_state_dict(blob["state_dict"])
    model.history = list(blob.get("history", []))
    model.metadata = blob.get("metadata", {})
    model.eval()
    return model
