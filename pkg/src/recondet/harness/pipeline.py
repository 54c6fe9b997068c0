"""Stage pipeline: classifiers, VAEs, attack archives, features, detectors and the
evaluation matrix, all cached in a write-once artifact store.

Every artifact lives at ``<store>/<kind>/<stage_hash>.<ext>`` where the stage
hash covers the stage's own settings and the hashes of everything upstream.
The hash is embedded in the file and checked on load, so a stale or foreign
artifact is refused unless ``force`` is set.
"""
from __future__ import annotations

import contextlib
import logging
import time
import warnings
from pathlib import Path

import numpy as np
import torch
from scipy.stats import mannwhitneyu

from .. import analysis as an
from ..attacks import (
    AdversarialSet,
    AttackSpec,
    ClassifierConfig,
    ClassifierModel,
    ThreatModelSpec,
    add_matched_noise,
    as_model,
    craft,
    load_archive,
    load_classifier,
    save_archive,
    save_classifier,
    train_classifier,
)
from ..detector import (
    ADVERSARIAL,
    CLEAN,
    DetectionSet,
    DetectorModel,
    build_detection_dataset,
    detection_auc,
    detector_config_for,
    load_detector,
    save_detector,
    train_detector,
)
from ..features import Extractor, ExtractorSpec, extract_activation, load_feature_dump, save_feature_dump
from ..reconstruction import VaeConfig, VaeModel, load_vae, reconstruct, save_vae, train_vae
from ..utils import config_hash, predict, seed_everything, to_jsonable
from ..zoo import DEFAULT_TAPS, STAGE_TAPS
from .config import SETTINGS, ExperimentConfig, Variant, _six_attacks
from .data import cache_root, ingest_dataset
from .report import EvaluationReport, Table

log = logging.getLogger(__name__)

WHITE_BOX = SETTINGS[0]
EVAL_EPSILON = 8 / 255
_ROLE_SEED = {"victim": 0, "threat": 1, "pretrained": 2}


class StageFailure(RuntimeError):
    pass


class ArtifactStore:
    """Write-once files keyed by stage hash."""

    def __init__(self, root, force: bool = False):
        self.root = Path(root)
        self.force = force

    def locate(self, kind: str, key, suffix: str) -> tuple[Path, str]:
        h = config_hash(key)
        return self.root / kind / f"{h}{suffix}", h

    def fetch(self, kind: str, key, suffix: str, build, save, load):
        path, h = self.locate(kind, key, suffix)
        if path.exists():
            return load(path, h), h
        obj = build()
        path.parent.mkdir(parents=True, exist_ok=True)
        save(obj, path, h)
        return obj, h


def preflight(out_dir) -> Path:
    """Fail fast when the output directory cannot be written."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("ok")
        probe.unlink()
    except OSError as err:
        raise PermissionError(f"output directory {out} is not writable: {err}") from err
    return out


class Pipeline:
    def __init__(self, config: ExperimentConfig, artifact_root=None, force: bool = False, cache_dir=None):
        self.config = config
        self.scale = config.resolved_scale
        seed_everything(config.seed, config.strict_determinism)
        self.store = ArtifactStore(artifact_root or cache_root(cache_dir) / "artifacts", force)
        self.cache_dir = cache_dir
        self.splits = ingest_dataset(config.dataset, cache_dir)
        self.timings: dict[str, float] = {}
        self._memo: dict = {}

    # -- bookkeeping -------------------------------------------------------

    @contextlib.contextmanager
    def _timed(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0

    def _memoize(self, key, fn):
        k = config_hash(key)
        if k not in self._memo:
            self._memo[k] = fn()
        return self._memo[k]

    def metadata(self) -> dict:
        return {
            "config_hash": self.config.fingerprint(),
            "dataset": self.config.dataset,
            "scale": self.config.scale,
            "seed": self.config.seed,
            "strict_determinism": self.config.strict_determinism,
            "composition": self.config.composition,
            "adversarial_filter": self.config.adversarial_filter,
        }

    # -- classifiers -------------------------------------------------------

    def classifier(self, arch: str, strategy: str, role: str) -> tuple[ClassifierModel, str]:
        s, c = self.scale, self.config
        at = strategy == "AT"
        cfg = ClassifierConfig(
            architecture=arch,
            strategy=strategy,
            width=s.widths[arch],
            num_classes=self.splits.num_classes,
            dataset=c.dataset,
            epochs=s.at_epochs if at else s.classifier_epochs,
            accuracy_floor=s.accuracy_floor[strategy],
            seed=c.seed + 7919 * _ROLE_SEED[role],
        )
        n = s.at_subset if at else s.train_subset
        key = {"stage": "classifier", "dataset": c.dataset, "config": cfg, "subset": [n, c.seed]}

        def build():
            idx = self.splits.train.subset_indices(n, c.seed)
            ev = self.splits.test.subset_indices(min(2000, len(self.splits.test)), c.seed + 1)
            with self._timed(f"classifier:{arch}({strategy})/{role}"):
                return train_classifier(
                    cfg, self.splits.train.floats(idx), self.splits.train.labels[idx],
                    self.splits.test.floats(ev), self.splits.test.labels[ev],
                )

        def load(path, h):
            return load_classifier(path, force=self.store.force, expected_stage=h)

        model, h = self._memoize(
            key, lambda: self.store.fetch("classifier", key, ".pt", build, lambda m, p, h: save_classifier(m, p, stage_hash=h), load)
        )
        if not model.usable:
            raise StageFailure(
                f"{arch}({strategy}) clean accuracy {model.clean_accuracy:.3f} is below the floor {cfg.accuracy_floor}"
            )
        return model, h

    def victim(self):
        return self.classifier(self.config.victim_architecture, "NT", "victim")

    def pretrained(self):
        return self.classifier(self.config.pretrained_architecture, "NT", "pretrained")

    def threat_models(self, spec: ThreatModelSpec) -> tuple[list[ClassifierModel], list[str]]:
        models, hashes = [], []
        for arch in spec.architectures:
            if arch == self.config.victim_architecture and spec.strategy == "NT":
                # the victim itself: the degenerate "black-box" case
                m, h = self.victim()
            else:
                m, h = self.classifier(arch, spec.strategy, "threat")
            models.append(m)
            hashes.append(h)
        return models, hashes

    # -- VAEs --------------------------------------------------------------

    def vae(self, target: str) -> tuple[VaeModel, str]:
        s, c, v = self.scale, self.config, self.config.vae
        cfg = VaeConfig(
            target=target, latent_dim=s.vae_latent, beta=v.beta, epochs=s.vae_epochs,
            learning_rate=v.learning_rate, momentum=v.momentum, weight_decay=v.weight_decay,
            batch_size=v.batch_size, channels=s.vae_channels, seed=c.seed,
        )
        source = c.vae_dataset or c.dataset
        key = {"stage": "vae", "dataset": source, "config": cfg, "subset": [s.train_subset, c.seed]}

        def build():
            train = self.splits.train if source == c.dataset else ingest_dataset(source, self.cache_dir).train
            idx = train.subset_indices(s.train_subset, c.seed)
            with self._timed(f"vae:{target}"):
                return train_vae(train.floats(idx), cfg)

        return self._memoize(key, lambda: self.store.fetch(
            "vae", key, ".pt", build,
            lambda m, p, h: save_vae(m, p, stage_hash=h),
            lambda p, h: load_vae(p, force=self.store.force, expected_stage=h),
        ))

    def vaes_for(self, recon: str) -> tuple[dict[str, VaeModel], list[str]]:
        targets = {"pixel": ["pixel"], "pha": ["phase"], "amp": ["amplitude"], "joint": ["amplitude", "phase"]}[recon]
        pairs = {t: self.vae(t) for t in targets}
        return {t: m for t, (m, _) in pairs.items()}, [pairs[t][1] for t in targets]

    # -- detection pools ---------------------------------------------------

    def pools(self) -> dict[str, torch.Tensor]:
        """Disjoint train/test pools of test-split images the victim classifies correctly."""

        def build():
            victim, _ = self.victim()
            test = self.splits.test
            perm = test.subset_indices(len(test), self.config.seed + 23)
            ok = predict(victim, test.floats(perm)) == test.labels[perm]
            keep = perm[ok]
            need = self.scale.detect_train + self.scale.detect_test
            if len(keep) < need:
                raise StageFailure(f"only {len(keep)} correctly classified images; pools need {need}")
            return {"train": keep[: self.scale.detect_train], "test": keep[self.scale.detect_train: need]}

        return self._memoize({"pools": self.victim()[1], "seed": self.config.seed}, build)

    # -- attacks -----------------------------------------------------------

    def attack_spec(self, family: str, epsilon: float, **kw) -> AttackSpec:
        steps = self.scale.attack_steps.get(family)
        if steps is not None and family != "FGSM":
            kw.setdefault("steps", steps)
        return AttackSpec(family, epsilon, **kw)

    def eval_spec(self, setting: str, train_spec: AttackSpec) -> AttackSpec:
        # ensemble settings are evaluated with PGD-linf only
        if setting.startswith("EM"):
            return self.attack_spec("PGD_LINF", EVAL_EPSILON)
        return train_spec

    def archive(self, spec: AttackSpec, source: str | ThreatModelSpec, pool: str) -> tuple[AdversarialSet, str]:
        victim, vh = self.victim()
        if source == "victim":
            models, hashes = [victim], [vh]
        else:
            models, hashes = self.threat_models(source)
        idx = self.pools()[pool]
        key = {
            "stage": "attack", "spec": spec, "source": hashes, "pool": pool,
            "indices": config_hash(idx.tolist()), "seed": self.config.seed,
        }

        def build():
            x, y = self.splits.test.floats(idx), self.splits.test.labels[idx]
            src = as_model(models)
            with self._timed(f"attack:{spec.name}"):
                adv = craft(spec, models, x, y, seed=self.config.seed + 31)
            return AdversarialSet(adv, x, y, predict(victim, adv), predict(src, adv), to_jsonable(key))

        def save(a, path, h):
            a.config_hash = h
            save_archive(path, a)

        return self._memoize(key, lambda: self.store.fetch(
            "attack", key, ".npz", build, save, lambda p, h: load_archive(p, h, force=self.store.force)
        ))

    def keep_mask(self, adv: AdversarialSet, rule: str | None = None) -> torch.Tensor:
        rule = rule or self.config.adversarial_filter
        if rule == "none":
            return torch.ones(len(adv), dtype=torch.bool)
        preds = adv.source_predictions if rule == "fooled_source" else adv.victim_predictions
        return preds != adv.labels

    # -- features ----------------------------------------------------------

    def extractor(self, kind: str, layer_ids=None) -> Extractor:
        model, h = self.victim() if kind == "base" else self.pretrained()
        arch = model.config.architecture
        layers = tuple(layer_ids or self.all_layers(arch))
        return Extractor(ExtractorSpec(h, "VICTIM" if kind == "base" else "PRETRAINED", layers), model)

    @staticmethod
    def all_layers(arch: str) -> tuple[str, ...]:
        return STAGE_TAPS[arch] + tuple(t for t in DEFAULT_TAPS[arch] if t not in STAGE_TAPS[arch])

    def default_layers(self, variant: Variant) -> tuple[str, ...]:
        if self.config.layer_ids:
            return tuple(self.config.layer_ids)
        arch = self.config.victim_architecture if variant.extractor == "base" else self.config.pretrained_architecture
        return DEFAULT_TAPS[arch]

    def features(self, variant: Variant, adv: AdversarialSet, adv_hash: str, rule: str | None = None) -> tuple[DetectionSet, str]:
        """Reconstruction-error features over every tap, for clean, noisy and adversarial images."""
        rule = rule or self.config.adversarial_filter
        vaes, vae_hashes = self.vaes_for(variant.recon)
        extractor = self.extractor(variant.extractor)
        key = {
            "stage": "features", "recon": variant.recon, "vaes": vae_hashes, "extractor": extractor.fingerprint,
            "archive": adv_hash, "filter": rule, "noise_seed": self.config.seed + 47,
        }

        def build():
            victim, _ = self.victim()
            noisy = add_matched_noise(adv.clean, adv.images, seed=self.config.seed + 47)
            with self._timed(f"features:{variant.name}"):
                return build_detection_dataset(
                    adv.clean, noisy, adv.images, adv.labels, victim, vaes, extractor, variant.recon,
                    adversarial_keep=self.keep_mask(adv, rule), provenance={"archive": adv_hash},
                )

        def save(ds, path, h):
            dims = tuple(a.shape[1] for a in extractor.taps(adv.clean[:1])[1].values())
            save_feature_dump(
                path, ds.features, ds.labels, extractor.spec.layer_ids, extractor.fingerprint,
                source_index=ds.source_index, layer_dims=dims, stage_hash=h,
            )

        def load(path, h):
            d = load_feature_dump(path)
            if d["meta"].get("stage_hash") != h and not self.store.force:
                raise ValueError(f"{path}: feature dump from stage {d['meta'].get('stage_hash')}, expected {h}")
            return DetectionSet(d["features"], d["labels"], d["source_index"], {"archive": adv_hash})

        ds, h = self._memoize(key, lambda: self.store.fetch("features", key, ".npz", build, save, load))
        ds.provenance.update(layer_ids=extractor.spec.layer_ids, layer_dims=self._layer_dims(extractor))
        return ds, h

    def _layer_dims(self, extractor: Extractor) -> tuple[int, ...]:
        return self._memoize(
            {"dims": extractor.fingerprint},
            lambda: tuple(a.shape[1] for a in extractor.taps(torch.zeros(1, 3, 32, 32))[1].values()),
        )

    @staticmethod
    def select_layers(ds: DetectionSet, layers) -> DetectionSet:
        ids, dims = ds.provenance["layer_ids"], ds.provenance["layer_dims"]
        offsets = np.cumsum((0,) + tuple(dims))
        cols = []
        for layer in layers:
            if layer not in ids:
                raise KeyError(f"layer {layer!r} not among the extracted taps {ids}")
            i = ids.index(layer)
            cols.append(torch.arange(int(offsets[i]), int(offsets[i + 1])))
        cols = torch.cat(cols)
        return DetectionSet(ds.features[:, cols], ds.labels, ds.source_index, dict(ds.provenance, layer_ids=tuple(layers)))

    # -- detectors ---------------------------------------------------------

    def detector(
        self, variant: Variant, family: str, train: list[tuple[DetectionSet, str]], layers, tag: str = "",
        shuffle_labels: bool = False,
    ) -> tuple[DetectorModel, str]:
        cfg = detector_config_for(
            variant.method, self.config.dataset, family, epochs=self.scale.detector_epochs, seed=self.config.seed
        )
        extractor = self.extractor(variant.extractor, layers)
        key = {
            "stage": "detector", "config": cfg, "features": [h for _, h in train], "layers": list(layers),
            "tag": tag, "shuffled": shuffle_labels,
        }

        def build():
            parts = [self.select_layers(ds, layers) for ds, _ in train]
            data = DetectionSet.concat(parts)
            labels = data.labels
            if shuffle_labels:
                labels = labels[torch.randperm(len(labels), generator=torch.Generator().manual_seed(self.config.seed + 59))]
            with self._timed("detector"):
                return train_detector(data.features, labels, cfg, extractor.fingerprint)

        return self._memoize(key, lambda: self.store.fetch(
            "detector", key, ".pt", build,
            lambda m, p, h: save_detector(m, p, stage_hash=h),
            lambda p, h: load_detector(p, extractor.fingerprint, force=self.store.force, expected_stage=h),
        ))

    def auc(self, det: DetectorModel, eval_sets: list[DetectionSet], layers) -> float:
        parts = [self.select_layers(ds, layers) for ds in eval_sets]
        if len(parts) > 1:
            # union composition: each clean image counted once
            first = parts[0]
            rest = [p.subset((p.labels != CLEAN).nonzero().flatten()) for p in parts[1:]]
            parts = [first] + rest
        return detection_auc(det, DetectionSet.concat(parts))

    # -- evaluation sets ---------------------------------------------------

    def setting_sources(self, setting: str) -> list[str | ThreatModelSpec]:
        if setting == WHITE_BOX:
            return ["victim"]
        if setting not in self.config.threats:
            raise StageFailure(f"no threat models configured for {setting}")
        return list(self.config.threats[setting])

    def eval_sets(self, variant: Variant, setting: str, train_spec: AttackSpec) -> list[tuple[str, list[DetectionSet]]]:
        """One entry per threat model in the setting; each holds the sets its AUC is computed over."""
        if self.config.composition == "union-of-six" and not setting.startswith("EM"):
            specs = [self.attack_spec(a.family, a.epsilon) for a in _six_attacks()]
        else:
            specs = [self.eval_spec(setting, train_spec)]
        out = []
        for source in self.setting_sources(setting):
            sets = []
            for spec in specs:
                adv, h = self.archive(spec, source, "test")
                sets.append(self.features(variant, adv, h)[0])
            out.append(("victim" if source == "victim" else source.name, sets))
        return out

    def train_set(self, variant: Variant, spec: AttackSpec, rule: str | None = None) -> tuple[DetectionSet, str]:
        adv, h = self.archive(spec, "victim", "train")
        return self.features(variant, adv, h, rule)

    def white_box_auc(self, variant: Variant, spec: AttackSpec, layers=None) -> float:
        """Standalone white-box evaluation, independent of the matrix loop."""
        layers = tuple(layers or self.default_layers(variant))
        det, _ = self.detector(variant, spec.family, [self.train_set(variant, spec)], layers)
        adv, h = self.archive(spec, "victim", "test")
        return self.auc(det, [self.features(variant, adv, h)[0]], layers)

    # -- BAD matrix --------------------------------------------------------

    def _fill_row(self, table, details, row, variant, det, spec, layers, failures, eval_spec_of=None):
        for setting in SETTINGS:
            try:
                per_model = []
                train_like = spec if eval_spec_of is None else eval_spec_of
                for name, sets in self.eval_sets(variant, setting, train_like):
                    a = self.auc(det, sets, layers)
                    per_model.append(a)
                    if details is not None:
                        col = f"{setting}:{name}"
                        if col not in details.columns:
                            details.columns.append(col)
                            for cells in details.rows.values():
                                cells.setdefault(col, None)
                        details.set(row, col, a)
                table.set(row, setting, float(np.mean(per_model)))
            except Exception as err:  # noqa: BLE001 - any stage failure marks the cell
                log.exception("cell %s/%s failed", row, setting)
                failures.append(f"{row}/{setting}: {type(err).__name__}: {err}")

    def run_bad_matrix(self) -> EvaluationReport:
        report = EvaluationReport("bad", metadata=self.metadata())
        report.metadata["variants"] = list(self.config.variants)
        for vname in self.config.variants:
            variant = Variant.parse(vname)
            layers = self.default_layers(variant)
            table = Table("training_attack", list(SETTINGS))
            details = Table("training_attack", [])
            for a in self.config.training_attacks:
                spec = self.attack_spec(a.family, a.epsilon)
                row = spec.name
                table.rows.setdefault(row, {c: None for c in table.columns})
                details.rows.setdefault(row, {c: None for c in details.columns})
                try:
                    det, _ = self.detector(variant, spec.family, [self.train_set(variant, spec)], layers)
                except Exception as err:  # noqa: BLE001
                    log.exception("detector %s/%s failed", vname, row)
                    report.failures.append(f"{vname}/{row}: {type(err).__name__}: {err}")
                    continue
                self._fill_row(table, details, row, variant, det, spec, layers, report.failures)
            report.tables[vname] = table
            report.tables[f"{vname} per threat model"] = details
        return report

    # -- sweeps ------------------------------------------------------------

    def sweep_layers(self, layer_sets=None) -> EvaluationReport:
        variant = Variant.parse(self.config.variants[0])
        arch = self.config.victim_architecture if variant.extractor == "base" else self.config.pretrained_architecture
        requested = layer_sets or self.config.layer_sets or [[t] for t in STAGE_TAPS[arch]]
        seen, sets = set(), []
        for ls in requested:
            k = tuple(ls)
            if k in seen:
                warnings.warn(f"duplicate layer set {list(k)} dropped", RuntimeWarning)
                continue
            seen.add(k)
            sets.append(k)
        spec = self.attack_spec(self.config.training_attacks[0].family, self.config.training_attacks[0].epsilon)
        report = EvaluationReport("layers", metadata=dict(self.metadata(), variant=variant.name, training_attack=spec.name))
        table = Table("layers", list(SETTINGS))
        train = self.train_set(variant, spec)
        for layers in sets:
            row = "+".join(layers)
            table.rows.setdefault(row, {c: None for c in table.columns})
            try:
                det, _ = self.detector(variant, spec.family, [train], layers)
            except Exception as err:  # noqa: BLE001
                report.failures.append(f"{row}: {type(err).__name__}: {err}")
                continue
            self._fill_row(table, None, row, variant, det, spec, layers, report.failures)
        report.tables[variant.name] = table
        return report

    def strength_pools(self, variant: Variant) -> dict:
        """Per-strength training sets plus the LC masks of their kept adversarial samples."""
        victim, _ = self.victim()
        vaes, _ = self.vaes_for(variant.recon)
        out = {}
        for eps in self.config.strengths:
            spec = self.attack_spec("PGD_LINF", eps / 255)
            adv, ah = self.archive(spec, "victim", "train")
            ds, h = self.features(variant, adv, ah)
            adv_rows = (ds.labels == ADVERSARIAL).nonzero().flatten()
            src = ds.source_index[adv_rows]
            images = adv.images[src]
            lc = an.label_consistency(victim, images, reconstruct(vaes, images, variant.recon))
            out[f"{eps}/255"] = {"set": ds, "hash": h, "adv_rows": adv_rows, "lc": lc}
        return out

    def sweep_strengths(self) -> EvaluationReport:
        variant = Variant.parse(self.config.strength_variant)
        layers = self.default_layers(variant)
        eval_like = self.attack_spec("PGD_LINF", EVAL_EPSILON)
        report = EvaluationReport("strengths", metadata=dict(self.metadata(), variant=variant.name, eval_epsilon="8/255"))
        table = Table("training_pool", list(SETTINGS))
        try:
            pools = self.strength_pools(variant)
        except Exception as err:  # noqa: BLE001
            report.failures.append(f"pools: {type(err).__name__}: {err}")
            report.tables[variant.name] = table
            return report
        for key, p in pools.items():
            det, _ = self.detector(variant, "PGD_LINF", [(p["set"], p["hash"])], layers, tag=key)
            self._fill_row(table, None, key, variant, det, eval_like, layers, report.failures, eval_spec_of=eval_like)

        total = [(p["set"], p["hash"]) for p in pools.values()]
        det, _ = self.detector(variant, "PGD_LINF", total, layers, tag="total")
        self._fill_row(table, None, "total", variant, det, eval_like, layers, report.failures, eval_spec_of=eval_like)

        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            balanced, _ = an.ctr_balance_sample({k: p["lc"] for k, p in pools.items()}, seed=self.config.seed)
        if caught:
            report.metadata["ctr_balance_fallback"] = True
        parts, hashes = [], []
        for k, p in pools.items():
            ds = p["set"]
            chosen_src = set(ds.source_index[p["adv_rows"][balanced[k]]].tolist())
            # keep whole triples: the chosen adversarial rows plus their clean and noisy partners
            rows = torch.tensor([i for i, s in enumerate(ds.source_index.tolist()) if s in chosen_src], dtype=torch.long)
            parts.append(ds.subset(rows))
            hashes.append(config_hash([p["hash"], sorted(chosen_src)]))
        report.metadata["ctr_balance_adversarial_per_strength"] = {k: int(len(v)) for k, v in balanced.items()}
        det, _ = self.detector(variant, "PGD_LINF", list(zip(parts, hashes)), layers, tag="ctr_balance")
        self._fill_row(table, None, "ctr_balance", variant, det, eval_like, layers, report.failures, eval_spec_of=eval_like)
        report.tables[variant.name] = table
        return report

    # -- controls ----------------------------------------------------------

    def controls(self) -> EvaluationReport:
        variant = Variant.parse(self.config.variants[0])
        layers = self.default_layers(variant)
        report = EvaluationReport("controls", metadata=dict(self.metadata(), variant=variant.name))
        table = Table("control", [WHITE_BOX])

        zero = self.attack_spec("PGD_LINF", 0.0)
        train = self.train_set(variant, zero, rule="none")
        det, _ = self.detector(variant, "PGD_LINF", [train], layers, tag="eps0")
        adv, h = self.archive(zero, "victim", "test")
        table.set("epsilon=0", WHITE_BOX, self.auc(det, [self.features(variant, adv, h, rule="none")[0]], layers))

        spec = self.attack_spec("PGD_LINF", EVAL_EPSILON)
        det, _ = self.detector(variant, "PGD_LINF", [self.train_set(variant, spec)], layers, tag="shuffled", shuffle_labels=True)
        adv, h = self.archive(spec, "victim", "test")
        table.set("shuffled_labels", WHITE_BOX, self.auc(det, [self.features(variant, adv, h)[0]], layers))
        report.tables[variant.name] = table
        return report

    # -- diagnostics -------------------------------------------------------

    def analyze(self, out_dir=None) -> EvaluationReport:
        c, s = self.config, self.scale
        variant = Variant.parse(c.analysis.variant)
        victim, _ = self.victim()
        report = EvaluationReport("analysis", metadata=dict(self.metadata(), variant=variant.name))
        spec = self.attack_spec("PGD_LINF", EVAL_EPSILON)
        adv, _ = self.archive(spec, "victim", "test")

        # patch-wise logit differences, pixel vs frequency
        fooled = (adv.victim_predictions != adv.labels).nonzero().flatten()[: s.analysis_samples]
        x, xa, y = adv.clean[fooled], adv.images[fooled], adv.labels[fooled]
        eq1 = Table("domain", ["mean", "d_o_mean", "d_t_mean", "samples", "skipped"], check_unit=False)
        values, maps_by_domain = {}, {}
        with self._timed("analysis:eq1"):
            for domain in ("pixel", "amplitude", "phase"):
                maps, skipped = an.difference_values(victim, x, xa, y, domain, c.analysis.grid, c.analysis.xi)
                maps_by_domain[domain] = maps
                d_o = torch.cat([m.d_o for m in maps]).double()
                d_t = torch.cat([m.d_t for m in maps]).double()
                values[domain] = torch.cat([d_o, d_t]).numpy()
                eq1.set(domain, "mean", values[domain].mean())
                eq1.set(domain, "d_o_mean", d_o.mean())
                eq1.set(domain, "d_t_mean", d_t.mean())
                eq1.set(domain, "samples", len(maps))
                eq1.set(domain, "skipped", skipped)
        values["frequency"] = np.concatenate([values["amplitude"], values["phase"]])
        eq1.set("frequency", "mean", values["frequency"].mean())
        eq1.set("frequency", "samples", len(maps_by_domain["amplitude"]) + len(maps_by_domain["phase"]))
        report.tables["eq1"] = eq1
        kdes = {d: an.kde_summary(np.log10(values[d]), c.analysis.kde_bandwidth) for d in ("pixel", "frequency")}

        # feature similarity and label consistency across strengths
        vaes, _ = self.vaes_for(variant.recon)
        n = s.ctr_samples
        clean = adv.clean[:n]
        layer = c.analysis.similarity_layer
        ext = self.extractor("base", (layer,))
        sim = Table("population", ["cosine"], check_unit=False)
        ctr = Table("population", ["lc_rate", "li_rate", "samples"], check_unit=False)
        rec_clean = reconstruct(vaes, clean, variant.recon)
        sim.set("normal", "cosine", an.feature_cosine_similarity(ext, clean, rec_clean, layer))
        rec = an.ctr_scores(victim, clean, rec_clean, "normal")
        ctr.set("normal", "lc_rate", rec.lc_rate)
        ctr.set("normal", "li_rate", rec.li_rate)
        ctr.set("normal", "samples", rec.lc_count + rec.li_count)
        for eps in c.strengths:
            a, _ = self.archive(self.attack_spec("PGD_LINF", eps / 255), "victim", "test")
            ok = (a.victim_predictions[:n] != a.labels[:n]).nonzero().flatten()
            if len(ok) == 0:
                report.failures.append(f"ctr {eps}/255: no successful adversarial examples")
                continue
            xa_eps = a.images[:n][ok]
            rec_adv = reconstruct(vaes, xa_eps, variant.recon)
            key = f"adversarial {eps}/255"
            sim.set(key, "cosine", an.feature_cosine_similarity(ext, xa_eps, rec_adv, layer))
            r = an.ctr_scores(victim, xa_eps, rec_adv, key)
            ctr.set(key, "lc_rate", r.lc_rate)
            ctr.set(key, "li_rate", r.li_rate)
            ctr.set(key, "samples", r.lc_count + r.li_count)
        # adversarial similarity per BAD setting, on each setting's 8/255 evaluation archives
        for setting in SETTINGS:
            try:
                per_model = []
                for source in self.setting_sources(setting):
                    a, _ = self.archive(spec, source, "test")
                    ok = (a.source_predictions != a.labels).nonzero().flatten()[:n]
                    xs = a.images[ok]
                    per_model.append(an.feature_cosine_similarity(ext, xs, reconstruct(vaes, xs, variant.recon), layer))
                sim.set(f"adversarial {setting}", "cosine", float(np.mean(per_model)))
            except Exception as err:  # noqa: BLE001
                report.failures.append(f"similarity {setting}: {type(err).__name__}: {err}")
        report.tables["similarity"] = sim
        report.tables["ctr"] = ctr

        # inner-class probe on label-consistent pairs, penultimate activations before/after reconstruction
        try:
            xa8 = adv.images[:n][(adv.victim_predictions[:n] != adv.labels[:n])]
            rec_a8 = reconstruct(vaes, xa8, variant.recon)
            lc_n = an.label_consistency(victim, clean, rec_clean)
            lc_a = an.label_consistency(victim, xa8, rec_a8)
            pen = lambda imgs: extract_activation(ext, imgs, layer).flatten(1)
            nb, na = pen(clean[lc_n]), pen(rec_clean[lc_n])
            ab, aa = pen(xa8[lc_a]), pen(rec_a8[lc_a])
            p_norm, p_adv = an.inner_class_probe(nb, na, ab, aa, seed=c.seed)
            probe = Table("population", ["probe_accuracy"])
            probe.set("normal", "probe_accuracy", p_norm)
            probe.set("adversarial", "probe_accuracy", p_adv)
            report.tables["probe"] = probe
        except ValueError as err:
            report.failures.append(f"probe: {err}")

        report.tables["separability"] = self.separability()

        if out_dir is not None:
            out = Path(out_dir)
            an.plot_kde(kdes, out / "analysis_kde.png", "log10 patch difference")
            for domain, maps in maps_by_domain.items():
                if maps:
                    an.plot_heatmap(x[0], maps[0], out / f"analysis_heatmap_{domain}.png")
        return report

    def separability(self) -> Table:
        """Feature-norm gap between adversarial and normal test samples, per reconstruction."""
        table = Table("variant", ["adversarial_norm", "normal_norm", "p_value", "adversarial_n", "normal_n"], check_unit=False)
        spec = self.attack_spec("PGD_LINF", EVAL_EPSILON)
        adv, h = self.archive(spec, "victim", "test")
        for name in ("PRD-base", "FRD-base(amp)"):
            variant = Variant.parse(name)
            ds = self.select_layers(self.features(variant, adv, h)[0], self.default_layers(variant))
            norms = ds.features.double().norm(dim=1).numpy()
            is_adv = (ds.labels == ADVERSARIAL).numpy()
            a, nrm = norms[is_adv], norms[~is_adv]
            p = mannwhitneyu(a, nrm, alternative="greater").pvalue
            table.set(name, "adversarial_norm", a.mean())
            table.set(name, "normal_norm", nrm.mean())
            table.set(name, "p_value", p)
            table.set(name, "adversarial_n", len(a))
            table.set(name, "normal_n", len(nrm))
        return table


def run_all(config: ExperimentConfig, out_dir=None, artifact_root=None, force: bool = False, stages=None) -> dict[str, EvaluationReport]:
    """Every report of a full run, written to ``out_dir``."""
    from .report import emit_report, write_timings

    out = preflight(out_dir or config.output_dir)
    pipe = Pipeline(config, artifact_root, force)
    stages = stages or ("bad", "layers", "strengths", "controls", "analysis")
    reports = {}
    runners = {
        "bad": pipe.run_bad_matrix,
        "layers": pipe.sweep_layers,
        "strengths": pipe.sweep_strengths,
        "controls": pipe.controls,
        "analysis": lambda: pipe.analyze(out),
    }
    for stage in stages:
        if stage not in runners:
            raise ValueError(f"unknown stage {stage!r}")
        with pipe._timed(f"stage:{stage}"):
            try:
                r = runners[stage]()
            except Exception as err:  # noqa: BLE001 - a failed stage still yields a (partial) report
                log.exception("stage %s failed", stage)
                r = EvaluationReport(stage, metadata=pipe.metadata(), failures=[f"{type(err).__name__}: {err}"])
        emit_report(r, out, ("csv", "json") if stage == "analysis" else ("csv", "json", "plots"))
        reports[stage] = r
        log.info("stage %s done (%.0fs)", stage, pipe.timings[f"stage:{stage}"])
    write_timings(out / "timings.json", pipe.timings)
    return reports
