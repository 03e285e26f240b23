"""Accuracy, AUROC and robust evaluation."""
from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.stats import rankdata

from .attacks import AttackBudget, adaptive_generative_attack, pgd_optimize, untargeted_ce_attack
from .data import ClassPartition, LabelledDataset
from .errors import ConfigurationError

ATTACKS = ("ce", "adaptive")


@dataclass
class ScorePair:
    positive: np.ndarray
    negative: np.ndarray

    def __post_init__(self):
        self.positive = np.asarray(self.positive, dtype=np.float64).ravel()
        self.negative = np.asarray(self.negative, dtype=np.float64).ravel()
        if len(self.positive) == 0 or len(self.negative) == 0:
            raise ValueError("both sides of a ScorePair need at least one score")
        if not (np.isfinite(self.positive).all() and np.isfinite(self.negative).all()):
            raise ValueError("scores must be finite")


def auroc(scores) -> float:
    """P(positive > negative) with ties counted 1/2, via the Mann-Whitney rank sum."""
    if not isinstance(scores, ScorePair):
        scores = ScorePair(*scores)
    p, q = len(scores.positive), len(scores.negative)
    ranks = rankdata(np.concatenate([scores.positive, scores.negative]))
    u = ranks[:p].sum() - p * (p + 1) / 2.0
    return float(u / (p * q))


@contextmanager
def frozen(model):
    """Disable parameter gradients (input gradients still flow) and switch to eval mode."""
    was_training = model.training
    flags = [p.requires_grad for p in model.parameters()]
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        yield model
    finally:
        for p, f in zip(model.parameters(), flags):
            p.requires_grad_(f)
        model.train(was_training)


def _batches(n, size):
    for i in range(0, n, size):
        yield slice(i, i + size)


@torch.no_grad()
def predict(model, images, batch_size=512) -> torch.Tensor:
    model.eval()
    return torch.cat([model(images[s]).argmax(dim=1) for s in _batches(len(images), batch_size)])


def standard_accuracy(model, ds: LabelledDataset, batch_size=512) -> float:
    return float((predict(model, ds.images, batch_size) == ds.labels).double().mean())


def per_class_accuracy(pred, labels, num_classes) -> list:
    return [float((pred[labels == k] == k).double().mean()) if (labels == k).any() else float("nan")
            for k in range(num_classes)]


def attack_dataset(model, ds: LabelledDataset, attack: str, budget: AttackBudget, seed=0,
                   batch_size=512) -> torch.Tensor:
    """Adversarial copy of ``ds.images``. ``attack`` is ``ce`` or ``adaptive``."""
    if attack not in ATTACKS:
        raise ConfigurationError(f"unknown attack {attack!r}; expected one of {ATTACKS}")
    if attack == "adaptive" and not hasattr(model, "heads"):
        raise ConfigurationError("the adaptive attack needs per-head access (a GenerativeClassifier)")
    gen = torch.Generator(device=ds.images.device).manual_seed(seed)
    out = []
    with frozen(model):
        for s in _batches(len(ds), batch_size):
            x, y = ds.images[s], ds.labels[s]
            if attack == "ce":
                res = untargeted_ce_attack(model, x, y, budget, gen)
            else:
                res = adaptive_generative_attack(model.heads, model.calib + model.log_priors, x, y, budget, gen)
            out.append(res.adversarial)
    return torch.cat(out)


def robust_accuracy(model, ds: LabelledDataset, attack: str, budget: AttackBudget, seed=0,
                    batch_size=512) -> float:
    adv = attack_dataset(model, ds, attack, budget, seed, batch_size)
    return float((predict(model, adv, batch_size) == ds.labels).double().mean())


@torch.no_grad()
def head_scores(head, images, batch_size=512) -> np.ndarray:
    head.eval()
    return torch.cat([head(images[s]) for s in _batches(len(images), batch_size)]).double().cpu().numpy()


def clean_auroc(head, part: ClassPartition, batch_size=512) -> float:
    return auroc(ScorePair(head_scores(head, part.in_dist.images, batch_size),
                           head_scores(head, part.out_dist.images, batch_size)))


def attacked_head_scores(head, images, budget: AttackBudget, direction: str, seed=0, batch_size=512):
    head.eval()
    gen = torch.Generator(device=images.device).manual_seed(seed)
    vals = [pgd_optimize(head, images[s], budget, direction, gen).objective
            for s in _batches(len(images), batch_size)]
    return torch.cat(vals).double().cpu().numpy()


def adversarial_auroc(head, part: ClassPartition, budget: AttackBudget, seed=0, batch_size=512) -> float:
    """AUROC after pushing class-k samples down and other-class samples up within the budget."""
    with frozen(head):
        pos = attacked_head_scores(head, part.in_dist.images, budget, "minimize", seed, batch_size)
        neg = attacked_head_scores(head, part.out_dist.images, budget, "maximize", seed + 1, batch_size)
    return auroc(ScorePair(pos, neg))


@dataclass
class SweepCurve:
    attack: str
    budget: dict
    epsilons: list
    accuracies: list

    def rows(self):
        return list(zip(self.epsilons, self.accuracies))


def epsilon_sweep(model, ds: LabelledDataset, attack: str, eps_list, budget: AttackBudget, seed=0,
                  batch_size=512) -> SweepCurve:
    """Robust accuracy per epsilon; every point reuses the same attack seed."""
    eps_list = [float(e) for e in eps_list]
    if eps_list != sorted(eps_list):
        raise ValueError("eps_list must be sorted ascending")
    accs = [robust_accuracy(model, ds, attack, budget.with_epsilon(e), seed, batch_size) for e in eps_list]
    return SweepCurve(attack, budget.as_dict(), eps_list, accs)


@dataclass
class EvalReport:
    standard_accuracy: float
    robust_accuracy: dict  # "attack@eps" -> accuracy
    per_class_accuracy: list
    attack_configs: dict
    dataset_fingerprint: str
    wall_clock: float = 0.0
    sweeps: dict = field(default_factory=dict)

    def as_dict(self, include_time=False) -> dict:
        out = {"standard_accuracy": self.standard_accuracy, "robust_accuracy": self.robust_accuracy,
               "per_class_accuracy": self.per_class_accuracy, "attack_configs": self.attack_configs,
               "dataset_fingerprint": self.dataset_fingerprint,
               "sweeps": {k: {"epsilons": v.epsilons, "accuracies": v.accuracies, "attack": v.attack,
                              "budget": v.budget} for k, v in self.sweeps.items()}}
        if include_time:
            out["wall_clock"] = self.wall_clock
        return out


def evaluate(model, ds: LabelledDataset, attacks: dict, eps_list=(), seed=0, batch_size=512) -> EvalReport:
    """Standard accuracy plus robust accuracy for each ``{attack_id: (attack, budget)}``.

    If ``eps_list`` is given an epsilon sweep is also run for every attack.
    """
    start = time.perf_counter()
    pred = predict(model, ds.images, batch_size)
    report = EvalReport(float((pred == ds.labels).double().mean()), {},
                        per_class_accuracy(pred, ds.labels, ds.num_classes), {}, ds.fingerprint())
    for attack_id, (attack, budget) in attacks.items():
        key = f"{attack_id}@{budget.epsilon:g}"
        report.robust_accuracy[key] = robust_accuracy(model, ds, attack, budget, seed, batch_size)
        report.attack_configs[attack_id] = {"attack": attack, **budget.as_dict()}
        if len(eps_list):
            report.sweeps[attack_id] = epsilon_sweep(model, ds, attack, eps_list, budget, seed, batch_size)
    report.wall_clock = time.perf_counter() - start
    return report
