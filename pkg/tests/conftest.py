import numpy as np
import pytest
import torch

from genrobust.data import LabelledDataset


@pytest.fixture
def toy3():
    """3-class set with 10 samples per class on 1x2x2 images."""
    g = torch.Generator().manual_seed(0)
    x = torch.rand(30, 1, 2, 2, generator=g)
    y = torch.arange(3).repeat_interleave(10)
    return LabelledDataset(x, y, "train", 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class LinearScore(torch.nn.Module):
    """``w . x + b`` per sample, in float64."""

    def __init__(self, w, b=0.0):
        super().__init__()
        self.w = torch.nn.Parameter(torch.as_tensor(w, dtype=torch.float64))
        self.b = torch.nn.Parameter(torch.tensor(float(b), dtype=torch.float64))

    def forward(self, x):
        return x.reshape(len(x), -1) @ self.w.reshape(-1) + self.b


class TwoLayerHead(torch.nn.Module):
    def __init__(self, d, hidden=5, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.fc1 = torch.nn.Linear(d, hidden).double()
        self.fc2 = torch.nn.Linear(hidden, 1).double()

    def forward(self, x):
        return self.fc2(torch.tanh(self.fc1(x.reshape(len(x), -1)))).reshape(len(x))


# ---------------------------------------------------------------- acceptance log

ACCEPTANCE = {}


def record_criterion(name, ok, detail=""):
    """Store one acceptance verdict; the terminal summary prints one line per criterion."""
    ACCEPTANCE[name] = (bool(ok), detail)
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda s: (int(s.split()[0].rstrip("abcdef")), s)):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"criterion {name}: {'PASS' if ok else 'FAIL'}  {detail}")
