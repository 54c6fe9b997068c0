"""Command-line entry point. Exit codes: 0 success, 2 partial report, 1 failure."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, Variant, dump_config, load_config
from .pipeline import Pipeline, preflight, run_all
from .report import emit_report, load_report, write_timings

log = logging.getLogger("recondet")

EXIT_OK, EXIT_FAIL, EXIT_PARTIAL = 0, 1, 2


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON experiment config (defaults apply when omitted)")
    p.add_argument("--scale", choices=["tiny", "desk", "full"])
    p.add_argument("--seed", type=int)
    p.add_argument("--strict", action="store_true", help="deterministic kernels, one thread")
    p.add_argument("--output-dir", help="where reports are written")
    p.add_argument("--artifacts", help="artifact store (default: $RECONDETECT_CACHE/artifacts)")
    p.add_argument("--force", action="store_true", help="accept artifacts built under a different config hash")


def _config(args) -> ExperimentConfig:
    overrides = {"scale": args.scale, "seed": args.seed, "output_dir": args.output_dir}
    if args.strict:
        overrides["strict_determinism"] = True
    if args.config:
        return load_config(args.config, **overrides)
    return ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recondet", description="reconstruction-error adversarial detection experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-vae", help="train (or load) one VAE")
    _common(p)
    p.add_argument("--target", choices=["pixel", "amplitude", "phase"], required=True)

    p = sub.add_parser("train-classifier", help="train (or load) a victim, threat or pretrained classifier")
    _common(p)
    p.add_argument("--arch", choices=["RESNET18", "VGG16", "WRN28"], required=True)
    p.add_argument("--strategy", choices=["NT", "AT"], default="NT")
    p.add_argument("--role", choices=["victim", "threat", "pretrained"], default="threat")

    p = sub.add_parser("attack", help="craft an adversarial archive")
    _common(p)
    p.add_argument("--family", default="PGD_LINF")
    p.add_argument("--epsilon", type=float, default=8.0, help="in 1/255 units (l2 attacks: raw radius)")
    p.add_argument("--source", default="victim", help="'victim' or a black-box setting such as SM-NT")
    p.add_argument("--pool", choices=["train", "test"], default="test")

    p = sub.add_parser("build-features", help="reconstruction-error features for one archive")
    _common(p)
    p.add_argument("--variant", required=True)
    p.add_argument("--family", default="PGD_LINF")
    p.add_argument("--epsilon", type=float, default=8.0)
    p.add_argument("--pool", choices=["train", "test"], default="train")

    p = sub.add_parser("train-detector", help="train one detector on white-box examples and report its white-box AUC")
    _common(p)
    p.add_argument("--variant", required=True)
    p.add_argument("--family", default="PGD_LINF")
    p.add_argument("--epsilon", type=float, default=8.0)

    for name, text in [
        ("evaluate-bad", "fill the black-box detection matrix"),
        ("sweep-layers", "AUC per tapped-layer set"),
        ("sweep-strengths", "AUC per training strength plus pooled datasets"),
        ("analyze", "patch differences, KDE, similarity, CTR, probe"),
        ("run-all", "every stage above, in order"),
    ]:
        p = sub.add_parser(name, help=text)
        _common(p)

    p = sub.add_parser("report", help="re-emit a saved JSON report")
    p.add_argument("report_json")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--formats", default="csv,json,plots")
    return parser


def _epsilon(family: str, value: float) -> float:
    return value if family == "PGD_L2" else value / 255


def _source(pipe: Pipeline, name: str):
    if name == "victim":
        return "victim"
    threats = pipe.config.threats.get(name)
    if not threats:
        raise SystemExit(f"unknown source {name!r}; use 'victim' or one of {sorted(pipe.config.threats)}")
    return threats[0]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return _dispatch(args)
    except Exception as err:  # noqa: BLE001
        log.error("%s: %s", type(err).__name__, err, exc_info=args.verbose)
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_FAIL


def _dispatch(args) -> int:
    if args.command == "report":
        report = load_report(args.report_json)
        for p in emit_report(report, preflight(args.output_dir), tuple(args.formats.split(","))):
            print(p)
        return EXIT_PARTIAL if report.partial else EXIT_OK

    config = _config(args)
    out = preflight(config.output_dir)
    dump_config(config, out / "config.yaml")

    if args.command == "run-all":
        reports = run_all(config, out, args.artifacts, args.force)
        return EXIT_PARTIAL if any(r.partial for r in reports.values()) else EXIT_OK

    pipe = Pipeline(config, args.artifacts, args.force)
    result: dict = {}
    if args.command == "train-vae":
        model, h = pipe.vae(args.target)
        result = {"stage_hash": h, "final_loss": model.history[-1] if model.history else None}
    elif args.command == "train-classifier":
        model, h = pipe.classifier(args.arch, args.strategy, args.role)
        result = {"stage_hash": h, "clean_accuracy": model.clean_accuracy}
    elif args.command == "attack":
        spec = pipe.attack_spec(args.family, _epsilon(args.family, args.epsilon))
        adv, h = pipe.archive(spec, _source(pipe, args.source), args.pool)
        result = {"stage_hash": h, "samples": len(adv), "victim_fooled": float((adv.victim_predictions != adv.labels).float().mean())}
    elif args.command == "build-features":
        spec = pipe.attack_spec(args.family, _epsilon(args.family, args.epsilon))
        adv, ah = pipe.archive(spec, "victim", args.pool)
        ds, h = pipe.features(Variant.parse(args.variant), adv, ah)
        result = {"stage_hash": h, "counts": ds.class_counts(), "dim": int(ds.features.shape[1])}
    elif args.command == "train-detector":
        spec = pipe.attack_spec(args.family, _epsilon(args.family, args.epsilon))
        result = {"white_box_auc": round(pipe.white_box_auc(Variant.parse(args.variant), spec), 4)}
    else:
        method = {
            "evaluate-bad": pipe.run_bad_matrix,
            "sweep-layers": pipe.sweep_layers,
            "sweep-strengths": pipe.sweep_strengths,
            "analyze": lambda: pipe.analyze(out),
        }[args.command]
        report = method()
        formats = ("csv", "json") if report.kind == "analysis" else ("csv", "json", "plots")
        for p in emit_report(report, out, formats):
            print(p)
        write_timings(out / f"timings_{report.kind}.json", pipe.timings)
        return EXIT_PARTIAL if report.partial else EXIT_OK
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
