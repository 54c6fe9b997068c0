"""CIFAR classifiers (ResNet18, VGG16, WRN28) with named activation taps.

Every model takes images in [0, 1] and owns its input normalization, so
callers never normalize. ``forward_taps`` returns the logits together with
the requested intermediate activations.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

ARCHITECTURES = ("VGG16", "RESNET18", "WRN28")

DATASET_STATS = {
    "CIFAR10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "CIFAR100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
}

# residual/conv stage outputs in bottom-to-top order, used by layer sweeps
STAGE_TAPS = {
    "RESNET18": ("stage1", "stage2", "stage3", "stage4"),
    "WRN28": ("stage1", "stage2", "stage3"),
    "VGG16": ("block1", "block2", "block3", "block4", "block5"),
}

DEFAULT_TAPS = {
    "RESNET18": ("stage2", "stage3", "stage4", "penultimate"),
    "WRN28": ("stage1", "stage2", "stage3", "penultimate"),
    "VGG16": ("block3", "block4", "block5", "penultimate"),
}


class Normalize(nn.Module):
    def __init__(self, mean, std):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


class TapModel(nn.Module):
    tap_names: tuple[str, ...] = ()

    def forward(self, x):
        return self.forward_taps(x, ())[0]

    def forward_taps(self, x, taps):
        raise NotImplementedError


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet18(TapModel):
    tap_names = ("stem", "stage1", "stage2", "stage3", "stage4", "penultimate")

    def __init__(self, num_classes=10, width=64, stats=DATASET_STATS["CIFAR10"]):
        super().__init__()
        self.norm = Normalize(*stats)
        self.stem = nn.Sequential(nn.Conv2d(3, width, 3, 1, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU())
        stages, cin = [], width
        for mult, stride in zip((1, 2, 4, 8), (1, 2, 2, 2)):
            cout = width * mult
            stages.append(nn.Sequential(BasicBlock(cin, cout, stride), BasicBlock(cout, cout, 1)))
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.fc = nn.Linear(cin, num_classes)

    def forward_taps(self, x, taps):
        acts = {}
        h = self.stem(self.norm(x))
        acts["stem"] = h
        for i, stage in enumerate(self.stages, 1):
            h = stage(h)
            acts[f"stage{i}"] = h
        h = F.adaptive_avg_pool2d(h, 1).flatten(1)
        acts["penultimate"] = h
        return self.fc(h), {t: acts[t] for t in taps}


_VGG16_CFG = (1, 1, "M", 2, 2, "M", 4, 4, 4, "M", 8, 8, 8, "M", 8, 8, 8, "M")


class VGG16(TapModel):
    tap_names = ("block1", "block2", "block3", "block4", "block5", "penultimate")

    def __init__(self, num_classes=10, width=64, stats=DATASET_STATS["CIFAR10"]):
        super().__init__()
        self.norm = Normalize(*stats)
        blocks, layers, cin = [], [], 3
        for c in _VGG16_CFG:
            if c == "M":
                layers.append(nn.MaxPool2d(2))
                blocks.append(nn.Sequential(*layers))
                layers = []
            else:
                cout = c * width
                layers += [nn.Conv2d(cin, cout, 3, 1, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU()]
                cin = cout
        self.blocks = nn.ModuleList(blocks)
        self.fc = nn.Linear(cin, num_classes)

    def forward_taps(self, x, taps):
        acts = {}
        h = self.norm(x)
        for i, block in enumerate(self.blocks, 1):
            h = block(h)
            acts[f"block{i}"] = h
        h = h.flatten(1)
        acts["penultimate"] = h
        return self.fc(h), {t: acts[t] for t in taps}


class WideBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride, bias=False)

    def forward(self, x):
        o = F.relu(self.bn1(x))
        y = self.conv2(F.relu(self.bn2(self.conv1(o))))
        return y + (x if self.shortcut is None else self.shortcut(o))


class WRN28(TapModel):
    """WideResNet-28-k (pre-activation, 4 blocks per stage)."""

    tap_names = ("stem", "stage1", "stage2", "stage3", "penultimate")

    def __init__(self, num_classes=10, width=10, stats=DATASET_STATS["CIFAR10"]):
        super().__init__()
        self.norm = Normalize(*stats)
        self.stem = nn.Conv2d(3, 16, 3, 1, 1, bias=False)
        stages, cin = [], 16
        for base, stride in ((16, 1), (32, 2), (64, 2)):
            cout = base * width
            blocks = [WideBlock(cin if j == 0 else cout, cout, stride if j == 0 else 1) for j in range(4)]
            stages.append(nn.Sequential(*blocks))
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.bn = nn.BatchNorm2d(cin)
        self.fc = nn.Linear(cin, num_classes)

    def forward_taps(self, x, taps):
        acts = {}
        h = self.stem(self.norm(x))
        acts["stem"] = h
        for i, stage in enumerate(self.stages, 1):
            h = stage(h)
            acts[f"stage{i}"] = h
        h = F.relu(self.bn(h))
        h = F.adaptive_avg_pool2d(h, 1).flatten(1)
        acts["penultimate"] = h
        return self.fc(h), {t: acts[t] for t in taps}


_BUILDERS = {"RESNET18": ResNet18, "VGG16": VGG16, "WRN28": WRN28}
FULL_WIDTH = {"RESNET18": 64, "VGG16": 64, "WRN28": 10}


def build_classifier(arch: str, num_classes: int = 10, width: int | None = None, dataset: str = "CIFAR10") -> TapModel:
    if arch not in _BUILDERS:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    width = FULL_WIDTH[arch] if width is None else width
    return _BUILDERS[arch](num_classes=num_classes, width=width, stats=DATASET_STATS[dataset])
