"""CIFAR ingestion with checksum verification and seeded subsets.

Accepted sources inside ``<cache>/data`` (first match wins):

* ``cifar10.npz`` / ``cifar100.npz`` written by a previous ingest,
* the standard python pickles (``cifar-10-batches-py``, ``cifar-100-python``),
* the PNG sheets of the ``tfjs-cifar10`` npm package (``tfjs-cifar10/``),
* a torchvision download, when the network allows it.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..utils import generator

log = logging.getLogger(__name__)

CACHE_ENV = "RECONDETECT_CACHE"

PICKLE_MD5 = {
    "CIFAR10": {
        "cifar-10-batches-py/data_batch_1": "c99cafc152244af753f735de768cd75f",
        "cifar-10-batches-py/data_batch_2": "d4bba439e000b95fd0a9bffe97cbabec",
        "cifar-10-batches-py/data_batch_3": "54ebc095f3ab1f0389bbae665268c751",
        "cifar-10-batches-py/data_batch_4": "634d18415352ddfa80567beed471001a",
        "cifar-10-batches-py/data_batch_5": "482c414d41f54cd18b22e5b47cb7c3cb",
        "cifar-10-batches-py/test_batch": "40351d587109b95175f43aff81a1287e",
    },
    "CIFAR100": {
        "cifar-100-python/train": "16019d7e3df5f24257cddd939b257f8d",
        "cifar-100-python/test": "f0ef6b0ae62326f3e7ffdfab6717acfc",
    },
}

TFJS_SHA256 = {
    "data_batch_1.png": "9a148385817b16e1840832575ee46ccac2ced61a305f07d4804805773c64e9bc",
    "data_batch_2.png": "47d610b8eb06af0c885fc499afc396d55f3a029b865725720a4f10474aac9d6f",
    "data_batch_3.png": "ca5d6af61c1791820d0fa2b0a842a73ed48978b698d74c26531d2c80373d4c10",
    "data_batch_4.png": "b9342d4f3cc3db72a731ca8ceb196a37d61480ea2da598ed0b32b74339bd04a5",
    "data_batch_5.png": "183d6d9af763804a99e1a6d8af723b9cfe906a61276466041dea4511ce015144",
    "test_batch.png": "ca44572a4066ea28c710ad4dc633d2ce24469a5e869ede5cc69495b0ef4c7d09",
    "train_lables.json": "a3a0d804911c71de4b73015af980e237de5f82da7b1482a8efaf7adcc1722f45",
    "test_lables.json": "a5df9ed6f395827dd69906fe5ac740be70395ca9d841974d4351818628b48bb6",
}

SPLIT_SIZES = {"CIFAR10": (50000, 10000), "CIFAR100": (50000, 10000)}
NUM_CLASSES = {"CIFAR10": 10, "CIFAR100": 100}


class ChecksumError(RuntimeError):
    pass


@dataclass
class Split:
    images: torch.Tensor  # uint8 [N, 3, 32, 32]
    labels: torch.Tensor  # int64 [N]

    def __len__(self) -> int:
        return len(self.labels)

    def floats(self, idx=None) -> torch.Tensor:
        x = self.images if idx is None else self.images[idx]
        return x.float() / 255.0

    def subset_indices(self, size: int, seed: int) -> torch.Tensor:
        if size > len(self):
            raise ValueError(f"subset size {size} exceeds split size {len(self)}")
        return torch.randperm(len(self), generator=generator(seed))[:size]


@dataclass
class Splits:
    name: str
    train: Split
    test: Split

    @property
    def num_classes(self) -> int:
        return NUM_CLASSES[self.name]


def cache_root(override: str | os.PathLike | None = None) -> Path:
    if override is not None:
        return Path(override)
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "recondet"))


def _digest(path: Path, algo: str) -> str:
    h = hashlib.new(algo)
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _verify(path: Path, expected: str, algo: str) -> None:
    actual = _digest(path, algo)
    if actual != expected:
        raise ChecksumError(f"{path}: {algo} mismatch, expected {expected}, got {actual}")


def _from_pickles(root: Path, name: str):
    for rel, md5 in PICKLE_MD5[name].items():
        _verify(root / rel, md5, "md5")

    def read(rel):
        with open(root / rel, "rb") as f:
            d = pickle.load(f, encoding="latin1")
        key = "labels" if "labels" in d else "fine_labels"
        return np.asarray(d["data"], np.uint8).reshape(-1, 3, 32, 32), np.asarray(d[key], np.int64)

    rels = list(PICKLE_MD5[name])
    parts = [read(r) for r in rels[:-1]]
    test = read(rels[-1])
    train = (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))
    return train, test


def _from_tfjs(root: Path):
    from PIL import Image

    for fname, sha in TFJS_SHA256.items():
        _verify(root / fname, sha, "sha256")

    def sheet(fname):
        # one image per row, 1024 RGB pixels in row-major HWC order
        arr = np.asarray(Image.open(root / fname).convert("RGB"), np.uint8)
        return arr.reshape(-1, 32, 32, 3).transpose(0, 3, 1, 2)

    train_x = np.concatenate([sheet(f"data_batch_{i}.png") for i in range(1, 6)])
    test_x = sheet("test_batch.png")
    train_y = np.asarray(json.loads((root / "train_lables.json").read_text()), np.int64)
    test_y = np.asarray(json.loads((root / "test_lables.json").read_text()), np.int64)
    return (train_x, train_y), (test_x, test_y)


def _from_torchvision(root: Path, name: str):
    import torchvision.datasets as tvd

    cls = tvd.CIFAR10 if name == "CIFAR10" else tvd.CIFAR100
    cls(root, train=True, download=True)
    cls(root, train=False, download=True)
    return _from_pickles(root, name)


def ingest_dataset(name: str = "CIFAR10", cache_dir: str | os.PathLike | None = None) -> Splits:
    if name not in SPLIT_SIZES:
        raise ValueError(f"unknown dataset {name!r}")
    root = cache_root(cache_dir) / "data"
    root.mkdir(parents=True, exist_ok=True)
    npz = root / f"{name.lower()}.npz"
    sidecar = npz.with_suffix(".sha256")
    if npz.exists() and sidecar.exists():
        _verify(npz, sidecar.read_text().strip(), "sha256")
    else:
        if (root / list(PICKLE_MD5[name])[0]).exists():
            train, test = _from_pickles(root, name)
        elif name == "CIFAR10" and (root / "tfjs-cifar10" / "test_batch.png").exists():
            train, test = _from_tfjs(root / "tfjs-cifar10")
        else:
            log.info("no local %s copy under %s; trying torchvision download", name, root)
            train, test = _from_torchvision(root, name)
        np.savez(npz, train_x=train[0], train_y=train[1], test_x=test[0], test_y=test[1])
        sidecar.write_text(_digest(npz, "sha256"))
    with np.load(npz) as d:
        splits = Splits(
            name,
            Split(torch.from_numpy(d["train_x"]), torch.from_numpy(d["train_y"])),
            Split(torch.from_numpy(d["test_x"]), torch.from_numpy(d["test_y"])),
        )
    n_train, n_test = SPLIT_SIZES[name]
    if len(splits.train) != n_train or len(splits.test) != n_test:
        raise ChecksumError(f"{name}: expected {n_train}/{n_test} images, got {len(splits.train)}/{len(splits.test)}")
    return splits
