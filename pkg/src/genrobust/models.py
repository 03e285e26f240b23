"""Network architectures and the scalar-output binary head wrapper."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError

ARCHITECTURES = ("resnet18", "resnet18thin", "resnet18thinner", "smallcnn", "linear-toy", "mlp-toy")
RESNET_WIDTH = {"resnet18": 1.0, "resnet18thin": 0.75, "resnet18thinner": 0.5}


class BasicBlock(nn.Module):
    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(nn.Conv2d(in_planes, planes, 1, stride, bias=False),
                                          nn.BatchNorm2d(planes))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet18(nn.Module):
    """CIFAR-style ResNet18 (3x3 stem, no max-pool) with a channel width multiplier."""

    def __init__(self, in_channels=3, out_dim=1, width=1.0):
        super().__init__()
        planes = [max(1, int(round(p * width))) for p in (64, 128, 256, 512)]
        self.conv1 = nn.Conv2d(in_channels, planes[0], 3, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes[0])
        layers, in_planes = [], planes[0]
        for i, p in enumerate(planes):
            stride = 1 if i == 0 else 2
            layers += [BasicBlock(in_planes, p, stride), BasicBlock(p, p, 1)]
            in_planes = p
        self.layers = nn.Sequential(*layers)
        self.fc = nn.Linear(in_planes, out_dim)

    def features(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.layers(out)
        return F.adaptive_avg_pool2d(out, 1).flatten(1)

    def forward(self, x):
        return self.fc(self.features(x))


class SmallCNN(nn.Module):
    def __init__(self, in_channels=1, out_dim=1, channels=(16, 32), hidden=64):
        super().__init__()
        c1, c2 = channels
        self.conv = nn.Sequential(
            nn.Conv2d(in_channels, c1, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(c1, c2, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        )
        self.pool = nn.AdaptiveAvgPool2d(4)
        self.hidden = nn.Linear(c2 * 16, hidden)
        self.fc = nn.Linear(hidden, out_dim)

    def features(self, x):
        return F.relu(self.hidden(self.pool(self.conv(x)).flatten(1)))

    def forward(self, x):
        return self.fc(self.features(x))


class MLP(nn.Module):
    def __init__(self, in_features, out_dim=1, hidden=16):
        super().__init__()
        self.hidden = nn.Linear(in_features, hidden)
        self.fc = nn.Linear(hidden, out_dim)

    def features(self, x):
        return torch.tanh(self.hidden(x.flatten(1)))

    def forward(self, x):
        return self.fc(self.features(x))


class Linear(nn.Module):
    def __init__(self, in_features, out_dim=1):
        super().__init__()
        self.fc = nn.Linear(in_features, out_dim)

    def features(self, x):
        return x.flatten(1)

    def forward(self, x):
        return self.fc(x.flatten(1))


def build_network(arch: str, image_shape, out_dim: int) -> nn.Module:
    c = image_shape[0]
    if arch in RESNET_WIDTH:
        return ResNet18(c, out_dim, RESNET_WIDTH[arch])
    if arch == "smallcnn":
        return SmallCNN(c, out_dim)
    if arch == "mlp-toy":
        return MLP(math.prod(image_shape), out_dim)
    if arch == "linear-toy":
        return Linear(math.prod(image_shape), out_dim)
    raise ConfigurationError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")


class BinaryHead(nn.Module):
    """``d_k``: a network with one output node, read as an unnormalized log-density of class k."""

    def __init__(self, net: nn.Module, k: int, arch: str = "custom"):
        super().__init__()
        self.net = net
        self.k = k
        self.arch = arch

    def forward(self, x):
        return self.net(x).reshape(len(x))

    def prob(self, x):
        """``D_k(x) = sigmoid(d_k(x))``."""
        return torch.sigmoid(self(x))

    def features(self, x):
        return self.net.features(x)


class SoftmaxClassifier(nn.Module):
    def __init__(self, net: nn.Module, arch: str = "custom"):
        super().__init__()
        self.net = net
        self.arch = arch

    def forward(self, x):
        return self.net(x)

    def features(self, x):
        return self.net.features(x)

    def predict(self, x):
        return self(x).argmax(dim=1)


def build_head(arch: str, image_shape, k: int) -> BinaryHead:
    return BinaryHead(build_network(arch, image_shape, 1), k, arch)


def build_softmax(arch: str, image_shape, num_classes: int) -> SoftmaxClassifier:
    return SoftmaxClassifier(build_network(arch, image_shape, num_classes), arch)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
