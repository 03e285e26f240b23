"""Adversarial training of binary heads and of the softmax baseline."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .attacks import AttackBudget, eval_budget, pgd_optimize, train_budget, untargeted_ce_attack
from .data import AugmentPolicy, ClassPartition, LabelledDataset, augment, class_partition, sample_training_pair
from .errors import ConfigurationError, NumericError, TrainingDiverged
from .evaluation import adversarial_auroc, clean_auroc, frozen, robust_accuracy, standard_accuracy
from .models import ARCHITECTURES, build_head, build_softmax

LOG_FLOOR = math.log(1e-12)


@dataclass
class TrainConfig:
    """Hyperparameters of one training run.

    For the softmax baseline ``eps_out`` is the training perturbation size and
    ``eps_in`` is unused. ``lr_drop_values``, when set, gives the absolute
    learning rate after each drop epoch and overrides ``lr_drop_factor``.
    """
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    lr_drop_epochs: list = field(default_factory=list)
    lr_drop_factor: float = 0.1
    lr_drop_values: Optional[list] = None
    weight_decay: float = 1e-4
    eps_out: float = 0.3
    eps_in: float = 0.0
    norm: str = "L2"
    inner_steps: int = 5
    inner_step_size: Optional[float] = None
    augment: str = "none"
    arch: str = "smallcnn"
    seed: int = 0
    steps_per_epoch: Optional[int] = None
    eval_interval: int = 1
    eval_eps: float = 0.3
    eval_steps: int = 10
    eval_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.eps_in < 0 or self.eps_out < 0 or self.eval_eps < 0:
            raise ConfigurationError("perturbation sizes must be >= 0")
        if any(not 0 <= e <= self.epochs for e in self.lr_drop_epochs):
            raise ConfigurationError("lr drop epochs must lie in [0, epochs]")
        if self.lr_drop_values is not None and len(self.lr_drop_values) != len(self.lr_drop_epochs):
            raise ConfigurationError("lr_drop_values needs one value per drop epoch")
        if self.arch not in ARCHITECTURES:
            raise ConfigurationError(f"unknown architecture {self.arch!r}; expected one of {ARCHITECTURES}")
        if self.eval_interval < 1:
            raise ConfigurationError("eval_interval must be >= 1")
        AugmentPolicy(self.augment)

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for i, e in enumerate(sorted(self.lr_drop_epochs)):
            if epoch > e:
                lr = self.lr_drop_values[i] if self.lr_drop_values is not None else lr * self.lr_drop_factor
        return lr

    def inner_budget(self, eps=None) -> AttackBudget:
        b = train_budget(self.eps_out if eps is None else eps, self.norm, self.inner_steps)
        if self.inner_step_size is not None:
            b = AttackBudget(b.norm, b.epsilon, b.steps, self.inner_step_size, False, 1)
        return b

    def eval_attack(self) -> AttackBudget:
        return eval_budget(self.eval_eps, self.norm, self.eval_steps)

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- losses

def _images(b):
    return b.images if hasattr(b, "images") else b


def log_d(head, x):
    """Floored ``log D_k(x)``."""
    return F.logsigmoid(head(x)).clamp_min(LOG_FLOOR)


def log_one_minus_d(head, x):
    """Floored ``log(1 - D_k(x))``."""
    return F.logsigmoid(-head(x)).clamp_min(LOG_FLOOR)


def bce_loss(head, in_batch, out_batch):
    """``-mean log D(x_in) - mean log(1 - D(x_out))``."""
    loss = -log_d(head, _images(in_batch)).mean() - log_one_minus_d(head, _images(out_batch)).mean()
    if not torch.isfinite(loss):
        raise NumericError("non-finite binary cross-entropy")
    return loss


def _worst_case(head, x, eps, budget, objective, generator=None):
    if eps == 0:
        return x
    with frozen(head):
        res = pgd_optimize(lambda z: objective(head, z), x, budget.with_epsilon(eps), "minimize", generator)
    return res.adversarial.detach()


def out_dist_at_loss(head, in_batch, out_batch, eps: float, inner_budget: AttackBudget, generator=None):
    """Negated out-distribution AT objective.

    Other-class samples are replaced by the point in their eps-ball that
    minimizes ``log(1 - D_k)``; gradients do not flow through that search.
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    x_out = _worst_case(head, _images(out_batch), eps, inner_budget, log_one_minus_d, generator)
    return bce_loss(head, in_batch, x_out)


def combined_at_loss(head, in_batch, out_batch, eps_in: float, eps_out: float, inner_budget: AttackBudget,
                     generator=None):
    """Negated combined objective: class-k samples are also perturbed, to minimize ``log D_k``."""
    if eps_in < 0 or eps_out < 0:
        raise ValueError("eps_in and eps_out must be >= 0")
    x_in = _worst_case(head, _images(in_batch), eps_in, inner_budget, log_d, generator)
    return out_dist_at_loss(head, x_in, out_batch, eps_out, inner_budget, generator)


# ---------------------------------------------------------------- checkpoint trail

@dataclass
class TrailEntry:
    epoch: int
    metrics: dict
    train_loss: float
    state: Optional[dict] = None
    path: Optional[str] = None

    def record(self) -> dict:
        return {"epoch": self.epoch, "metrics": self.metrics, "train_loss": self.train_loss, "path": self.path}


@dataclass
class CheckpointTrail:
    tag: str
    arch: str
    entries: list = field(default_factory=list)
    model: Optional[torch.nn.Module] = None  # the trained network, final epoch weights

    def append(self, entry: TrailEntry):
        if self.entries and entry.epoch <= self.entries[-1].epoch:
            raise ValueError("trail epochs must be strictly increasing")
        bad = [k for k, v in entry.metrics.items() if not math.isfinite(v)]
        if bad or not math.isfinite(entry.train_loss):
            raise NumericError(f"non-finite trail metrics at epoch {entry.epoch}: {bad or 'train_loss'}")
        self.entries.append(entry)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def records(self) -> list:
        return [e.record() for e in self.entries]


def early_stop_select(trail: CheckpointTrail, metric: str = "adv-auroc") -> TrailEntry:
    """Entry with the largest ``metric``; the earliest one wins ties."""
    if len(trail) == 0:
        raise ValueError("cannot select from an empty trail")
    best = trail[0]
    for e in trail.entries[1:]:
        if e.metrics[metric] > best.metrics[metric]:
            best = e
    return best


def _param_groups(model, weight_decay):
    decay = [p for p in model.parameters() if p.ndim > 1]
    rest = [p for p in model.parameters() if p.ndim <= 1]
    return [{"params": decay, "weight_decay": weight_decay}, {"params": rest, "weight_decay": 0.0}]


def _snapshot(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def seeded_init(builder, seed):
    """Build a module with its initial weights drawn from ``seed``, leaving the global RNG untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return builder()


class _Run:
    """Shared epoch loop, checkpointing and resume logic."""

    def __init__(self, model, cfg: TrainConfig, tag, evaluate, ckpt_dir=None, resume=False, rng_seed=()):
        self.model, self.cfg, self.tag, self.evaluate = model, cfg, tag, evaluate
        self.ckpt_dir = Path(ckpt_dir) if ckpt_dir is not None else None
        self.opt = torch.optim.SGD(_param_groups(model, cfg.weight_decay), lr=cfg.lr, momentum=cfg.momentum)
        self.rng = np.random.default_rng([cfg.seed, *rng_seed])
        self.trail = CheckpointTrail(tag, cfg.arch)
        self.start_epoch = 0
        if resume and self.ckpt_dir is not None and (self.ckpt_dir / f"{tag}_last.pt").is_file():
            self._load_last()

    def _load_last(self):
        blob = torch.load(self.ckpt_dir / f"{self.tag}_last.pt", weights_only=False)
        self.model.load_state_dict(blob["model"])
        self.opt.load_state_dict(blob["optimizer"])
        self.rng.bit_generator.state = blob["rng"]
        for rec in blob["trail"]:
            state = None
            if rec["path"] is not None:
                state = torch.load(rec["path"], weights_only=True)
            self.trail.append(TrailEntry(rec["epoch"], rec["metrics"], rec["train_loss"], state, rec["path"]))
        self.start_epoch = blob["epoch"]

    def _save(self, entry: TrailEntry, epoch):
        if self.ckpt_dir is None:
            return
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        name = f"{self.tag}_epoch_{epoch}"
        path = self.ckpt_dir / f"{name}.pt"
        torch.save(entry.state, path)
        entry.path = str(path)
        meta = {"tag": self.tag, "arch": self.cfg.arch, "epoch": epoch, "metrics": entry.metrics,
                "train_loss": entry.train_loss, "config": self.cfg.as_dict(),
                "config_hash": config_hash(self.cfg.as_dict())}
        (self.ckpt_dir / f"{name}.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    def _save_last(self, epoch):
        if self.ckpt_dir is None:
            return
        torch.save({"model": self.model.state_dict(), "optimizer": self.opt.state_dict(),
                    "rng": self.rng.bit_generator.state, "trail": self.trail.records(), "epoch": epoch},
                   self.ckpt_dir / f"{self.tag}_last.pt")

    def record(self, epoch, train_loss):
        metrics = self.evaluate(self.model)
        entry = TrailEntry(epoch, metrics, float(train_loss), _snapshot(self.model))
        self._save(entry, epoch)
        self.trail.append(entry)
        self._save_last(epoch)

    def fit(self, step, steps_per_epoch, initial_loss):
        cfg = self.cfg
        if self.start_epoch == 0:
            self.model.eval()
            try:
                loss0 = initial_loss()
            except NumericError as exc:
                raise TrainingDiverged(f"{self.tag}: {exc} before training", self.trail) from exc
            self.record(0, loss0)
        for epoch in range(self.start_epoch + 1, cfg.epochs + 1):
            for g in self.opt.param_groups:
                g["lr"] = cfg.lr_at(epoch)
            self.model.train()
            losses = []
            for _ in range(steps_per_epoch):
                try:
                    loss = step(self.rng)
                except NumericError as exc:
                    raise TrainingDiverged(f"{self.tag}: {exc} at epoch {epoch}", self.trail) from exc
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"{self.tag}: non-finite loss at epoch {epoch}", self.trail)
                self.opt.zero_grad(set_to_none=True)
                loss.backward()
                self.opt.step()
                losses.append(float(loss.detach()))
            if epoch % cfg.eval_interval == 0 or epoch == cfg.epochs:
                self.record(epoch, float(np.mean(losses)))
        return self.trail


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


def train_binary_head(part: ClassPartition, cfg: TrainConfig, eval_part: ClassPartition | None = None,
                      ckpt_dir=None, resume=False, head=None) -> CheckpointTrail:
    """Train ``d_k`` for ``part.k`` with the out-distribution (or combined, if ``eps_in > 0``) AT loss.

    Each step uses one paired batch: ``batch_size`` class-k samples and
    ``batch_size`` samples from the other-class mixture. Trail entries carry
    clean and adversarial AUROC on ``eval_part`` (or on ``part`` if omitted).
    """
    if len(part.in_dist) == 0 or len(part.out_dist) == 0:
        raise ValueError("partition must have samples on both sides")
    k = part.k
    shape = part.in_dist.image_shape
    if head is None:
        head = seeded_init(lambda: build_head(cfg.arch, shape, k), cfg.seed * 1000 + k)
    batch = min(cfg.batch_size, len(part.in_dist), len(part.out_dist))
    steps = cfg.steps_per_epoch or max(1, len(part.in_dist) // batch)
    policy = AugmentPolicy(cfg.augment)
    inner = cfg.inner_budget()
    scored = eval_part if eval_part is not None else part
    adv_budget = cfg.eval_attack()

    def evaluate(model):
        return {"clean-auroc": clean_auroc(model, scored),
                "adv-auroc": adversarial_auroc(model, scored, adv_budget, seed=cfg.eval_seed)}

    def loss_on(xin, xout):
        if cfg.eps_in > 0:
            return combined_at_loss(head, xin, xout, cfg.eps_in, cfg.eps_out, inner)
        return out_dist_at_loss(head, xin, xout, cfg.eps_out, inner)

    def step(rng):
        xin, xout = sample_training_pair(part, batch, rng)
        return loss_on(augment(xin.images, policy, rng), augment(xout.images, policy, rng))

    def initial_loss():
        xin, xout = sample_training_pair(part, batch, np.random.default_rng([cfg.seed, k, 999]))
        return float(loss_on(xin.images, xout.images).detach())

    run = _Run(head, cfg, f"head_{k}", evaluate, ckpt_dir, resume, rng_seed=(k,))
    trail = run.fit(step, steps, initial_loss)
    trail.model = head
    return trail


def train_all_heads(train: LabelledDataset, cfg: TrainConfig, eval_ds: LabelledDataset | None = None,
                    lr_overrides: dict | None = None, ckpt_dir=None, resume=False) -> list:
    """Train one head per class; ``lr_overrides`` maps class index to its starting learning rate."""
    trails = []
    for k in range(train.num_classes):
        c = cfg
        if lr_overrides and k in lr_overrides:
            c = TrainConfig.from_dict({**cfg.as_dict(), "lr": lr_overrides[k]})
        ev = class_partition(eval_ds, k) if eval_ds is not None else None
        trails.append(train_binary_head(class_partition(train, k), c, ev, ckpt_dir, resume))
    return trails


def train_softmax_baseline(ds: LabelledDataset, cfg: TrainConfig, eval_ds: LabelledDataset | None = None,
                           ckpt_dir=None, resume=False, model=None) -> CheckpointTrail:
    """Multi-class PGD adversarial training on untargeted cross-entropy examples at ``cfg.eps_out``."""
    if model is None:
        model = seeded_init(lambda: build_softmax(cfg.arch, ds.image_shape, ds.num_classes), cfg.seed * 1000 + 999)
    batch = min(cfg.batch_size, len(ds))
    steps = cfg.steps_per_epoch or max(1, len(ds) // batch)
    policy = AugmentPolicy(cfg.augment)
    inner = cfg.inner_budget()
    scored = eval_ds if eval_ds is not None else ds
    adv_budget = cfg.eval_attack()

    def evaluate(m):
        return {"clean-acc": standard_accuracy(m, scored),
                "adv-acc": robust_accuracy(m, scored, "ce", adv_budget, seed=cfg.eval_seed)}

    def loss_on(x, y):
        if cfg.eps_out > 0:
            with frozen(model):
                x = untargeted_ce_attack(model, x, y, inner).adversarial.detach()
        return F.cross_entropy(model(x), y)

    def step(rng):
        idx = rng.choice(len(ds), size=batch, replace=False)
        return loss_on(augment(ds.images[idx], policy, rng), ds.labels[idx])

    def initial_loss():
        idx = np.random.default_rng([cfg.seed, 999]).choice(len(ds), size=batch, replace=False)
        return float(loss_on(ds.images[idx], ds.labels[idx]).detach())

    run = _Run(model, cfg, "softmax", evaluate, ckpt_dir, resume, rng_seed=(10_000,))
    trail = run.fit(step, steps, initial_loss)
    trail.model = model
    return trail
