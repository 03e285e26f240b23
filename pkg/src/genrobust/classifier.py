"""Bayes-rule composition of K binary heads.

Decision rule: ``argmax_k d_k(x) + c_k + log p(k)``. The offsets ``c_k`` absorb
the unknown log partition functions. Only their differences matter, so
they are reported centered (mean zero).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from scipy.special import log_softmax, softmax

from .data import LabelledDataset
from .errors import CalibrationWarning, NumericError


class GenerativeClassifier(nn.Module):
    def __init__(self, heads, calib=None, log_priors=None):
        super().__init__()
        if len(heads) < 2:
            raise ValueError(f"need at least 2 heads, got {len(heads)}")
        self.heads = nn.ModuleList(heads)
        K = len(heads)
        calib = torch.zeros(K, dtype=torch.float64) if calib is None else torch.as_tensor(calib, dtype=torch.float64)
        if log_priors is None:
            log_priors = torch.full((K,), -np.log(K), dtype=torch.float64)
        self.register_buffer("calib", calib.clone())
        self.register_buffer("log_priors", torch.as_tensor(log_priors, dtype=torch.float64).clone())
        if not torch.isfinite(self.calib).all():
            raise ValueError("calibration constants must be finite")

    @property
    def num_classes(self) -> int:
        return len(self.heads)

    def set_calibration(self, calib):
        calib = torch.as_tensor(np.asarray(calib), dtype=torch.float64)
        if calib.shape != (self.num_classes,) or not torch.isfinite(calib).all():
            raise ValueError("calibration must be a finite vector of length K")
        self.calib.copy_(calib)

    def head_outputs(self, x):
        outs = []
        for k, head in enumerate(self.heads):
            d = head(x)
            if not torch.isfinite(d).all():
                raise NumericError(f"head {k} produced a non-finite output", index=k)
            outs.append(d)
        return torch.stack(outs, dim=1)

    def forward(self, x):
        """Logits ``d_k(x) + c_k + log p(k)``, shape ``(N, K)``."""
        offset = (self.calib + self.log_priors).to(x.dtype)
        return self.head_outputs(x) + offset

    def logits(self, x):
        return self(x)

    def predict(self, x):
        # torch.argmax returns the first maximal index
        return self(x).argmax(dim=1)

    def posterior(self, x):
        return torch.softmax(self(x), dim=1)


def priors_from_counts(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    return np.log(counts / counts.sum())


@dataclass
class CalibrationConfig:
    lr: float = 0.01
    max_iter: int = 10_000
    tol: float = 1e-8
    holdout_fraction: float = 0.2
    patience: int = 1000
    seed: int = 0
    batch_size: int = 512


@torch.no_grad()
def collect_head_outputs(gc: GenerativeClassifier, images: torch.Tensor, batch_size=512) -> np.ndarray:
    gc.eval()
    outs = [gc.head_outputs(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    return torch.cat(outs).double().cpu().numpy()


def cross_entropy(scores: np.ndarray, labels: np.ndarray, calib) -> float:
    lp = log_softmax(scores + np.asarray(calib)[None, :], axis=1)
    return float(-lp[np.arange(len(labels)), labels].mean())


def fit_calibration(scores: np.ndarray, labels: np.ndarray, cfg: CalibrationConfig = CalibrationConfig()):
    """Full-batch gradient descent on the K offsets with early stopping on a holdout slice.

    ``scores`` are the uncalibrated logits (head outputs plus log-priors).
    Returns ``(calib, info)``; ``calib`` is centered.
    """
    labels = np.asarray(labels)
    n, K = scores.shape
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    n_hold = int(round(cfg.holdout_fraction * n)) if n >= 10 else 0
    hold, fit = perm[:n_hold], perm[n_hold:]
    onehot = np.eye(K)[labels[fit]]

    c = np.zeros(K)
    prev = cross_entropy(scores[fit], labels[fit], c)
    best_c = c.copy()
    best_hold = cross_entropy(scores[hold], labels[hold], c) if n_hold else prev
    since_best = 0
    it = 0
    for it in range(1, cfg.max_iter + 1):
        p = softmax(scores[fit] + c, axis=1)
        c = c - cfg.lr * (p - onehot).mean(axis=0)
        cur = cross_entropy(scores[fit], labels[fit], c)
        h = cross_entropy(scores[hold], labels[hold], c) if n_hold else cur
        if h < best_hold:
            best_hold, best_c, since_best = h, c.copy(), 0
        else:
            since_best += 1
        if prev - cur < cfg.tol or since_best >= cfg.patience:
            break
        prev = cur
    best_c = best_c - best_c.mean()
    return best_c, {"iterations": it, "holdout_size": int(n_hold), "holdout_ce": float(best_hold)}


def calibrate(gc: GenerativeClassifier, val: LabelledDataset, opt: CalibrationConfig = CalibrationConfig(),
              info: dict | None = None) -> np.ndarray:
    """Learn the calibration offsets on ``val`` with the heads frozen.

    Returns the centered offsets; does not modify ``gc``. Pass a dict as
    ``info`` to receive the before/after validation cross-entropy and any
    warnings.
    """
    counts = val.class_counts()
    warned = []
    if len(counts) < gc.num_classes or (counts[: gc.num_classes] == 0).any():
        missing = [k for k in range(gc.num_classes) if k >= len(counts) or counts[k] == 0]
        msg = f"classes {missing} absent from the validation set; their offsets are weakly determined"
        warnings.warn(msg, CalibrationWarning)
        warned.append(msg)
    scores = collect_head_outputs(gc, val.images, opt.batch_size) + gc.log_priors.cpu().numpy()[None, :]
    labels = val.labels.cpu().numpy()
    c, fit_info = fit_calibration(scores, labels, opt)
    if info is not None:
        info.update(fit_info)
        info["val_ce_before"] = cross_entropy(scores, labels, np.zeros(gc.num_classes))
        info["val_ce_after"] = cross_entropy(scores, labels, c)
        info["warnings"] = warned
    return c
