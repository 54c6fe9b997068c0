"""Layer activations and reconstruction-error features.

The reconstruction error of a sample at layer l is |M_l(x_r) - M_l(x_o)|,
pooled over the spatial dimensions to one value per channel; the per-layer
vectors are concatenated. Base and online variants run the identical code and
differ only in which checkpoint ``ExtractorSpec.model_ref`` points at.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .utils import config_hash

ROLES = ("VICTIM", "PRETRAINED")


@dataclass
class ExtractorSpec:
    model_ref: str
    role: str = "VICTIM"
    layer_ids: tuple[str, ...] = ("stage2", "stage3", "stage4", "penultimate")
    pooling: str = "avg"

    def __post_init__(self):
        self.layer_ids = tuple(self.layer_ids)
        if not self.layer_ids:
            raise ValueError("layer_ids must be non-empty")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}; expected one of {ROLES}")
        if self.pooling not in ("avg", "max"):
            raise ValueError(f"unknown pooling {self.pooling!r}")


class Extractor:
    """A loaded, read-only feature-extraction model bound to its spec."""

    def __init__(self, spec: ExtractorSpec, model: torch.nn.Module):
        unknown = [t for t in spec.layer_ids if t not in model.net.tap_names]
        if unknown:
            raise ValueError(f"layer ids {unknown} do not exist in {type(model.net).__name__}")
        self.spec = spec
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    @property
    def fingerprint(self) -> str:
        return config_hash({"model_ref": self.spec.model_ref, "layers": self.spec.layer_ids, "pooling": self.spec.pooling})

    @torch.no_grad()
    def taps(self, images: torch.Tensor, layer_ids=None) -> tuple[torch.Tensor, dict]:
        return self.model.forward_taps(images, tuple(layer_ids or self.spec.layer_ids))

    def feature_dim(self, image_shape=(3, 32, 32)) -> int:
        _, acts = self.taps(torch.zeros(1, *image_shape))
        return sum(a.shape[1] for a in acts.values())


@torch.no_grad()
def extract_activation(extractor: Extractor, images: torch.Tensor, layer_id: str, batch_size: int = 500) -> torch.Tensor:
    out = [extractor.taps(images[i:i + batch_size], (layer_id,))[1][layer_id] for i in range(0, len(images), batch_size)]
    return torch.cat(out)


def _pool(diff: torch.Tensor, how: str) -> torch.Tensor:
    if diff.dim() == 2:
        return diff
    flat = diff.flatten(2)
    return flat.mean(2) if how == "avg" else flat.amax(2)


@dataclass
class ReconErrorFeature:
    vector: torch.Tensor  # [N, D]
    layer_ids: tuple[str, ...]
    layer_dims: tuple[int, ...] = ()

    def layer_slice(self, layer_id: str) -> torch.Tensor:
        start = 0
        for lid, dim in zip(self.layer_ids, self.layer_dims):
            if lid == layer_id:
                return self.vector[:, start:start + dim]
            start += dim
        raise KeyError(layer_id)


@torch.no_grad()
def reconstruction_error(
    extractor: Extractor,
    originals: torch.Tensor,
    reconstructions: torch.Tensor,
    batch_size: int = 500,
) -> ReconErrorFeature:
    if originals.shape != reconstructions.shape:
        raise ValueError(f"shape mismatch: {tuple(originals.shape)} vs {tuple(reconstructions.shape)}")
    layers = extractor.spec.layer_ids
    chunks, dims = [], ()
    for i in range(0, len(originals), batch_size):
        _, a_o = extractor.taps(originals[i:i + batch_size])
        _, a_r = extractor.taps(reconstructions[i:i + batch_size])
        parts = [_pool((a_r[l] - a_o[l]).abs(), extractor.spec.pooling) for l in layers]
        dims = tuple(p.shape[1] for p in parts)
        chunks.append(torch.cat(parts, 1))
    if not chunks:
        dims = tuple(a.shape[1] for a in extractor.taps(originals.new_zeros(1, *originals.shape[1:]))[1].values())
        return ReconErrorFeature(originals.new_zeros(0, sum(dims)), layers, dims)
    return ReconErrorFeature(torch.cat(chunks), layers, dims)


def save_feature_dump(
    path, features: torch.Tensor, labels: torch.Tensor, layer_ids, fingerprint: str,
    source_index: torch.Tensor | None = None, layer_dims=(), **meta,
) -> Path:
    """npz container: features [N, D], labels [N], source indices, layer ids and widths,
    extractor fingerprint, JSON metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(
        tmp,
        features=features.numpy().astype(np.float32),
        labels=labels.numpy().astype(np.int64),
        layer_ids=np.array(list(layer_ids)),
        layer_dims=np.array(list(layer_dims), dtype=np.int64),
        source_index=(np.arange(len(labels)) if source_index is None else source_index.numpy()).astype(np.int64),
        fingerprint=np.array(fingerprint),
        meta=np.array(json.dumps(meta, sort_keys=True, default=str)),
    )
    tmp.replace(path)
    return path


def load_feature_dump(path) -> dict:
    with np.load(path) as d:
        return {
            "features": torch.from_numpy(d["features"]),
            "labels": torch.from_numpy(d["labels"]),
            "layer_ids": tuple(str(s) for s in d["layer_ids"]),
            "layer_dims": tuple(int(v) for v in d["layer_dims"]),
            "source_index": torch.from_numpy(d["source_index"]),
            "fingerprint": str(d["fingerprint"]),
            "meta": json.loads(str(d["meta"])),
        }
