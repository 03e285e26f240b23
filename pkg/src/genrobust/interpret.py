"""Sample generation, counterfactuals and Fréchet distance.

Generated samples start from seed images drawn from a Gaussian fit to the
flattened pixels of one class, then get pushed toward that class by a
targeted L2 PGD attack with a large radius.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .attacks import AttackBudget, targeted_attack
from .errors import ConfigurationError, NumericError
from .evaluation import frozen, predict

SHRINKAGE = 1e-4
NEG_EIG_TOL = 1e-6
EXTRACTORS = ("flatten-pixels", "trained-classifier-penultimate", "external-inception")


@dataclass
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int
    shape: Optional[tuple] = None  # image shape the mean reshapes to, if any
    extractor_id: str = "flatten-pixels"

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.covariance = np.asarray(self.covariance, dtype=np.float64)
        d = len(self.mean)
        if self.covariance.shape != (d, d):
            raise ValueError(f"covariance shape {self.covariance.shape} does not match mean dimension {d}")
        if np.abs(self.covariance - self.covariance.T).max(initial=0.0) > 1e-8:
            raise ValueError("covariance is not symmetric")

    @property
    def dim(self) -> int:
        return len(self.mean)

    def save(self, path):
        np.savez(path, mean=self.mean, covariance=self.covariance,
                 header=np.array([self.dim, self.count]), extractor_id=np.array(self.extractor_id),
                 shape=np.array(self.shape if self.shape is not None else (), dtype=np.int64))

    @classmethod
    def load(cls, path) -> "GaussianStats":
        with np.load(path) as z:
            dim, count = (int(v) for v in z["header"])
            shape = tuple(int(s) for s in z["shape"]) or None
            stats = cls(z["mean"], z["covariance"], count, shape, str(z["extractor_id"]))
        if stats.dim != dim:
            raise ValueError(f"header dimension {dim} disagrees with stored mean ({stats.dim})")
        return stats


def fit_gaussian(features, shrinkage=SHRINKAGE, extractor_id="flatten-pixels", shape=None) -> GaussianStats:
    x = np.asarray(features, dtype=np.float64)
    x = x.reshape(len(x), -1)
    if len(x) < 2:
        raise ValueError(f"need at least 2 samples to fit a Gaussian, got {len(x)}")
    cov = np.cov(x, rowvar=False, ddof=1).reshape(x.shape[1], x.shape[1])
    cov = (cov + cov.T) / 2 + shrinkage * np.eye(x.shape[1])
    return GaussianStats(x.mean(axis=0), cov, len(x), shape, extractor_id)


def fit_class_gaussian(samples, shrinkage=SHRINKAGE) -> GaussianStats:
    """Mean and unbiased covariance of flattened pixels, plus ``shrinkage * I``."""
    samples = samples.images if hasattr(samples, "images") else samples
    arr = samples.detach().cpu().numpy() if isinstance(samples, torch.Tensor) else np.asarray(samples)
    return fit_gaussian(arr, shrinkage, shape=tuple(arr.shape[1:]))


def sample_seeds(stats: GaussianStats, n: int, rng: np.random.Generator) -> torch.Tensor:
    """``n`` Gaussian draws reshaped to the image shape and clamped to [0, 1]."""
    shape = stats.shape or (stats.dim,)
    if n == 0:
        return torch.empty((0, *shape), dtype=torch.float32)
    try:
        chol = np.linalg.cholesky(stats.covariance)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"covariance is not positive definite: {exc}") from exc
    z = rng.standard_normal((n, stats.dim))
    draws = np.clip(stats.mean + z @ chol.T, 0.0, 1.0)
    return torch.from_numpy(draws.astype(np.float32)).view(n, *shape)


def generation_budget(steps=10, step_size=1.0, epsilon=None) -> AttackBudget:
    """L2 budget for sample generation. ``epsilon`` defaults to ``steps * step_size``."""
    eps = steps * step_size if epsilon is None else epsilon
    return AttackBudget("L2", float(eps), int(steps), float(step_size), random_start=False)


def generate_class_samples(model, k: int, n: int, budget: AttackBudget, stats: GaussianStats | None = None,
                           rng: np.random.Generator | None = None, seeds: torch.Tensor | None = None):
    """Push Gaussian seeds toward class ``k`` with a targeted attack on ``model``.

    ``model`` returns ``(N, K)`` scores. Pass either ``stats`` (and ``rng``) to
    draw ``n`` fresh seeds, or the ``seeds`` themselves.
    """
    if seeds is None:
        if stats is None:
            raise ValueError("need class-k Gaussian stats or explicit seeds")
        seeds = sample_seeds(stats, n, rng if rng is not None else np.random.default_rng(0))
    if len(seeds) == 0:
        return seeds
    with frozen(model):
        return targeted_attack(model, seeds, k, budget).adversarial


@dataclass
class CounterfactualResult:
    images: torch.Tensor
    norms: torch.Tensor
    flipped: torch.Tensor


def counterfactual(model, x: torch.Tensor, target: int, budget: AttackBudget) -> CounterfactualResult:
    """Targeted attack of real inputs toward ``target``; reports perturbation size and whether the prediction flipped."""
    with frozen(model):
        res = targeted_attack(model, x, target, budget)
    flipped = predict(model, res.adversarial) == target
    return CounterfactualResult(res.adversarial, res.norms, flipped)


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((mat + mat.T) / 2)
    if w.min(initial=0.0) < -NEG_EIG_TOL:
        raise NumericError(f"matrix has eigenvalue {w.min():.3g} below -{NEG_EIG_TOL}")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the cross term is taken from the symmetric form
    ``(S_a^(1/2) S_b S_a^(1/2))^(1/2)``, which has the same eigenvalues.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    root_a = _sqrt_psd(a.covariance)
    inner = root_a @ b.covariance @ root_a
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    if w.min(initial=0.0) < -NEG_EIG_TOL:
        raise NumericError(f"cross-covariance product has eigenvalue {w.min():.3g}")
    cross = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = a.mean - b.mean
    d = diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2 * cross
    return float(max(d, 0.0))


# ---------------------------------------------------------------- feature extractors

class FeatureExtractor:
    extractor_id = "flatten-pixels"

    def __call__(self, images: torch.Tensor) -> np.ndarray:
        return images.detach().reshape(len(images), -1).double().cpu().numpy()


class PenultimateFeatures(FeatureExtractor):
    """Penultimate-layer activations of a (standardly trained) classifier with a ``features`` method."""

    extractor_id = "trained-classifier-penultimate"

    def __init__(self, model, batch_size=512):
        self.model = model
        self.batch_size = batch_size

    @torch.no_grad()
    def __call__(self, images):
        self.model.eval()
        feats = [self.model.features(images[i:i + self.batch_size]) for i in range(0, len(images), self.batch_size)]
        return torch.cat(feats).double().cpu().numpy()


class InceptionFeatures(FeatureExtractor):
    """Pool features of an Inception-v3 network loaded from local weights.

    The weights are not bundled; pass a state dict path compatible with
    ``torchvision.models.inception_v3``. Grayscale inputs are repeated to 3 channels.
    """

    extractor_id = "external-inception"

    def __init__(self, weights_path, batch_size=64):
        from torchvision.models import inception_v3

        net = inception_v3(weights=None, aux_logits=False, init_weights=False)
        try:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
        except FileNotFoundError as exc:
            raise ConfigurationError(f"inception weights not found at {weights_path}") from exc
        net.load_state_dict(state, strict=False)
        net.fc = torch.nn.Identity()
        self.net = net.eval()
        self.batch_size = batch_size

    @torch.no_grad()
    def __call__(self, images):
        out = []
        for i in range(0, len(images), self.batch_size):
            x = images[i:i + self.batch_size]
            if x.shape[1] == 1:
                x = x.repeat(1, 3, 1, 1)
            x = torch.nn.functional.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
            out.append(self.net(2 * x - 1))
        return torch.cat(out).double().cpu().numpy()


@dataclass(frozen=True)
class FIDScore:
    value: float
    extractor_id: str

    def __float__(self):
        return self.value


def fid(extractor: FeatureExtractor, set_a: torch.Tensor, set_b: torch.Tensor) -> FIDScore:
    if len(set_a) < 2 or len(set_b) < 2:
        raise ValueError("both sets need at least 2 samples")
    eid = extractor.extractor_id
    sa = fit_gaussian(extractor(set_a), extractor_id=eid)
    sb = fit_gaussian(extractor(set_b), extractor_id=eid)
    return FIDScore(frechet_distance(sa, sb), eid)
