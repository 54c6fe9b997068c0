from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import random
from pathlib import Path
from typing import Any, Callable, Iterator

import numpy as np
import torch

log = logging.getLogger("recondet")

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def seed_everything(seed: int, strict: bool = False) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if strict:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def to_jsonable(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def config_hash(obj: Any) -> str:
    blob = json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def batches(n: int, batch_size: int, order: torch.Tensor | None = None) -> Iterator[torch.Tensor]:
    idx = torch.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]


def batched_apply(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, batch_size: int = 500) -> torch.Tensor:
    outs = [fn(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return torch.cat(outs) if outs else x[:0]


@torch.no_grad()
def predict(model: torch.nn.Module, images: torch.Tensor, batch_size: int = 500) -> torch.Tensor:
    model.eval()
    return batched_apply(lambda b: model(b).argmax(1), images, batch_size)


def save_checkpoint(path: str | os.PathLike, kind: str, config: Any, state: dict, **extra: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": to_jsonable(config),
        "config_hash": config_hash(config),
        "state_dict": state,
        **extra,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(
    path: str | os.PathLike,
    kind: str,
    expected_hash: str | None = None,
    force: bool = False,
    expected_stage: str | None = None,
) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path}: not a recondet checkpoint")
    if payload["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {payload['format_version']} != {FORMAT_VERSION}")
    if payload["kind"] != kind:
        raise CheckpointError(f"{path}: holds a {payload['kind']!r}, expected {kind!r}")
    if expected_hash is not None and payload["config_hash"] != expected_hash and not force:
        raise CheckpointError(
            f"{path}: produced by config {payload['config_hash']}, current config is {expected_hash} "
            "(pass force to mix artifacts)"
        )
    if expected_stage is not None and payload.get("stage_hash") != expected_stage and not force:
        raise CheckpointError(
            f"{path}: built by pipeline stage {payload.get('stage_hash')}, expected {expected_stage} "
            "(pass force to mix artifacts)"
        )
    return payload


def load_state_strict(module: torch.nn.Module, state: dict, path: Any = "<memory>") -> None:
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as err:
        raise CheckpointError(f"{path}: parameters disagree with the stored config: {err}") from err
