"""Projected gradient descent attacks.

Every attack here is a thin wrapper around :func:`pgd_optimize`, which
maximizes or minimizes a per-sample differentiable objective over
``B(x, eps) ∩ [0, 1]^d`` for an L2 or L-inf ball.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, NumericError

NORMS = ("L2", "Linf")


@dataclass(frozen=True)
class AttackBudget:
    norm: str = "L2"
    epsilon: float = 0.3
    steps: int = 20
    step_size: Optional[float] = None  # None -> 2.5 * epsilon / steps
    random_start: bool = False
    restarts: int = 1

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ConfigurationError(f"unknown norm {self.norm!r}; expected one of {NORMS}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")

    @property
    def alpha(self) -> float:
        if self.step_size is not None:
            return float(self.step_size)
        return 2.5 * self.epsilon / max(self.steps, 1)

    def with_epsilon(self, epsilon: float) -> "AttackBudget":
        return replace(self, epsilon=float(epsilon))

    def as_dict(self) -> dict:
        return {"norm": self.norm, "epsilon": self.epsilon, "steps": self.steps,
                "step_size": self.step_size, "random_start": self.random_start, "restarts": self.restarts}


def train_budget(epsilon: float, norm: str = "L2", steps: int = 5) -> AttackBudget:
    return AttackBudget(norm=norm, epsilon=epsilon, steps=steps, random_start=False)


def eval_budget(epsilon: float, norm: str = "L2", steps: int = 20, restarts: int = 1) -> AttackBudget:
    return AttackBudget(norm=norm, epsilon=epsilon, steps=steps, random_start=True, restarts=restarts)


@dataclass
class AttackResult:
    adversarial: torch.Tensor
    objective: torch.Tensor
    norms: torch.Tensor
    selected: Optional[torch.Tensor] = None  # adaptive attack: chosen class per sample


def _flat_norm(t: torch.Tensor, norm: str) -> torch.Tensor:
    flat = t.reshape(len(t), -1)
    if norm == "L2":
        return flat.norm(dim=1)
    return flat.abs().amax(dim=1)


def _per_sample(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return v.view(-1, *([1] * (like.ndim - 1)))


def project(delta: torch.Tensor, epsilon: float, norm: str = "L2") -> torch.Tensor:
    """Project a batch of perturbations onto the ``norm`` ball of radius ``epsilon``."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    if norm == "Linf":
        return delta.clamp(-epsilon, epsilon)
    if norm != "L2":
        raise ConfigurationError(f"unknown norm {norm!r}")
    n = _flat_norm(delta, "L2")
    scale = torch.where(n > epsilon, epsilon / n.clamp_min(1e-30), torch.ones_like(n))
    return delta * _per_sample(scale, delta)


def _random_start(x, budget, generator):
    eps = budget.epsilon
    if budget.norm == "Linf":
        noise = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) * 2 - 1
        delta = noise * eps
    else:
        g = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
        d = g[0].numel()
        r = torch.rand(len(x), generator=generator, dtype=x.dtype, device=x.device) ** (1.0 / d)
        delta = g / _per_sample(_flat_norm(g, "L2").clamp_min(1e-30), g) * _per_sample(r * eps, g)
    return (x + delta).clamp(0, 1)


def _direction(grad, norm):
    if norm == "Linf":
        return grad.sign()
    n = _flat_norm(grad, "L2")
    # zero-gradient samples take no step
    safe = torch.where(n > 0, n, torch.ones_like(n))
    return grad / _per_sample(safe, grad)


def pgd_optimize(objective: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                 budget: AttackBudget, direction: str = "maximize",
                 generator: Optional[torch.Generator] = None) -> AttackResult:
    """Run PGD on ``objective`` (maps a batch to per-sample values of shape ``(N,)``).

    Returns the best iterate per sample over all steps and restarts. The
    starting point of each restart counts as an iterate.
    """
    if direction not in ("maximize", "minimize"):
        raise ValueError(f"direction must be 'maximize' or 'minimize', got {direction!r}")
    sign = 1.0 if direction == "maximize" else -1.0
    x = x.detach()

    if budget.epsilon == 0 or budget.steps == 0:
        with torch.no_grad():
            value = objective(x).detach()
        return AttackResult(x.clone(), value, torch.zeros(len(x), dtype=x.dtype, device=x.device))

    best_x = None
    best_val = None
    for _ in range(budget.restarts):
        x_t = _random_start(x, budget, generator) if budget.random_start else x.clone()
        for t in range(budget.steps + 1):
            x_t.requires_grad_(True)
            with torch.enable_grad():
                value = objective(x_t)
                if t < budget.steps:
                    grad, = torch.autograd.grad(value.sum(), x_t)
            value = value.detach()
            x_t = x_t.detach()
            if best_x is None:
                best_x, best_val = x_t.clone(), value.clone()
            else:
                better = sign * value > sign * best_val
                best_val = torch.where(better, value, best_val)
                best_x[better] = x_t[better]
            if t == budget.steps:
                break
            bad = ~torch.isfinite(grad.reshape(len(grad), -1)).all(dim=1)
            if bad.any():
                i = int(torch.nonzero(bad)[0])
                raise NumericError(f"non-finite gradient for sample {i}", index=i)
            step = sign * budget.alpha * _direction(grad, budget.norm)
            delta = project(x_t + step - x, budget.epsilon, budget.norm)
            x_t = (x + delta).clamp(0, 1)

    return AttackResult(best_x, best_val, _flat_norm(best_x - x, budget.norm))


def untargeted_ce_attack(classifier: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                         y: torch.Tensor, budget: AttackBudget,
                         generator: Optional[torch.Generator] = None) -> AttackResult:
    """Maximize the cross-entropy of ``classifier(x + delta)`` against the true labels."""
    def ce(z):
        return F.cross_entropy(classifier(z), y, reduction="none")

    return pgd_optimize(ce, x, budget, "maximize", generator)


def adaptive_generative_attack(heads, calib, x: torch.Tensor, y: torch.Tensor, budget: AttackBudget,
                               generator: Optional[torch.Generator] = None) -> AttackResult:
    """Attack each non-true head separately, then keep the one with the largest calibrated score.

    ``heads`` is a sequence of callables returning ``d_k(x)`` of shape ``(N,)``;
    ``calib`` holds the per-class offsets that enter only the selection.
    Ties go to the lowest class index.
    """
    K = len(heads)
    if K < 2:
        raise ValueError(f"adaptive attack needs at least 2 heads, got {K}")
    calib = torch.as_tensor(calib, dtype=x.dtype, device=x.device)
    y = torch.as_tensor(y, device=x.device)

    candidates, scores = [], []
    for k, head in enumerate(heads):
        if bool((y == k).all()):
            # no sample uses head k as a non-true candidate
            candidates.append(x)
            scores.append(torch.full((len(x),), -torch.inf, dtype=x.dtype, device=x.device))
            continue
        res = pgd_optimize(head, x, budget, "maximize", generator)
        candidates.append(res.adversarial)
        scores.append(res.objective + calib[k])
    scores = torch.stack(scores, dim=1)
    scores[torch.arange(len(x)), y] = -torch.inf
    selected = scores.argmax(dim=1)
    stacked = torch.stack(candidates, dim=1)
    adv = stacked[torch.arange(len(x)), selected]
    return AttackResult(adv, scores[torch.arange(len(x)), selected],
                        _flat_norm(adv - x, budget.norm), selected)


def targeted_attack(model: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, t,
                    budget: AttackBudget, generator: Optional[torch.Generator] = None) -> AttackResult:
    """Maximize the class-``t`` score of ``model`` (a callable returning ``(N, K)`` scores).

    For the generative classifier the class-t score is ``d_t + c_t``, whose
    gradient is that of the head alone.
    """
    t = torch.as_tensor(t, device=x.device)
    if t.ndim == 0:
        t = t.expand(len(x))

    def score(z):
        out = model(z)
        if int(t.min()) < 0 or int(t.max()) >= out.shape[1]:
            raise ValueError(f"target class out of range for {out.shape[1]} classes")
        return out.gather(1, t.view(-1, 1)).squeeze(1)

    return pgd_optimize(score, x, budget, "maximize", generator)
