"""Desk-scale acceptance run, executed twice from independent artifact stores.

The first run writes reports to runs/desk, the second (fresh store, same
config and seeds) to runs/desk_repeat; the two are then compared byte by byte.

    RECONDETECT_CACHE=/path/to/cache python scripts/desk_run.py [--skip-repeat]
"""
import argparse
import filecmp
import logging
import sys
from pathlib import Path

from recondet.harness.config import load_config
from recondet.harness.data import cache_root
from recondet.harness.pipeline import run_all

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(ROOT / "scripts/configs/desk.yaml"))
    ap.add_argument("--skip-repeat", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    config = load_config(args.config)
    runs = [("desk", cache_root() / "artifacts")]
    if not args.skip_repeat:
        runs.append(("desk_repeat", cache_root() / "artifacts_repeat"))
    for name, store in runs:
        out = ROOT / "runs" / name
        logging.info("run %s -> %s (store %s)", name, out, store)
        run_all(config, out, store)

    if args.skip_repeat:
        return 0
    a, b = ROOT / "runs/desk", ROOT / "runs/desk_repeat"
    names = sorted(p.name for p in a.iterdir() if p.suffix in (".json", ".csv") and p.name != "timings.json")
    match, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    for n in names:
        print(f"{'same' if n in match else 'DIFF'} {n}")
    return 0 if not mismatch and not errors else 1


if __name__ == "__main__":
    sys.exit(main())
