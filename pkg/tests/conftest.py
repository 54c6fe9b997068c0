import os
from pathlib import Path

import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

REPO = Path(__file__).resolve().parents[1]
os.environ.setdefault("RECONDETECT_CACHE", str(Path.home() / "cache" / "recondet"))


def cifar_available() -> bool:
    from recondet.harness.data import cache_root

    root = cache_root()
    return (root / "data" / "cifar10.npz").exists() or (root / "data" / "tfjs-cifar10").exists()


needs_cifar = pytest.mark.skipif(not cifar_available(), reason="CIFAR-10 cache not populated")


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


class ToyNet(torch.nn.Module):
    """Small CNN with the same tap interface as the zoo models."""

    tap_names = ("conv1", "conv2", "penultimate")

    def __init__(self, num_classes=3, channels=3, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.conv1 = torch.nn.Conv2d(channels, 6, 3, padding=1)
        self.conv2 = torch.nn.Conv2d(6, 8, 3, padding=1)
        self.fc = torch.nn.Linear(8, num_classes)

    def forward_taps(self, x, taps=()):
        a1 = torch.relu(self.conv1(x))
        a2 = torch.relu(self.conv2(a1))
        pen = a2.mean((2, 3))
        acts = {"conv1": a1, "conv2": a2, "penultimate": pen}
        return self.fc(pen), {t: acts[t] for t in taps}

    def forward(self, x):
        return self.forward_taps(x)[0]


class Wrapped(torch.nn.Module):
    """Mimics ClassifierModel: exposes ``.net`` and ``forward_taps``."""

    def __init__(self, net):
        super().__init__()
        self.net = net

    def forward(self, x):
        return self.net(x)

    def forward_taps(self, x, taps):
        return self.net.forward_taps(x, taps)


@pytest.fixture
def toy_net():
    return ToyNet().eval()
