"""Locations and loaders for the desk-scale run (scripts/desk_run.py)."""
import functools
from pathlib import Path

import pytest

from conftest import REPO
from recondet.harness.report import load_report

DESK = REPO / "runs" / "desk"
REPEAT = REPO / "runs" / "desk_repeat"
CONFIG = REPO / "scripts" / "configs" / "desk.yaml"
HOW = "run `RECONDETECT_CACHE=... python3 scripts/desk_run.py` first"


def require(path: Path) -> Path:
    if not path.exists():
        pytest.fail(f"{path} is missing; {HOW}", pytrace=False)
    return path


@functools.lru_cache(maxsize=None)
def report(kind: str, root: Path = DESK):
    return load_report(require(root / f"{kind}.json"))


@functools.lru_cache(maxsize=None)
def pipeline():
    """Pipeline bound to the desk store; every artifact it touches is already built."""
    from recondet.harness.config import load_config
    from recondet.harness.data import cache_root
    from recondet.harness.pipeline import Pipeline

    report("bad")
    return Pipeline(load_config(CONFIG), cache_root() / "artifacts")
