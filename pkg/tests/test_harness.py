import json
import os
import warnings

import pytest
import torch

from conftest import needs_cifar
from recondet.attacks import AttackSpec
from recondet.harness.cli import main
from recondet.harness.config import ExperimentConfig, Variant, dump_config, load_config
from recondet.harness.pipeline import ArtifactStore, Pipeline, preflight, run_all
from recondet.harness.report import EvaluationReport, Table, emit_report, load_report
from recondet.utils import CheckpointError, load_checkpoint, save_checkpoint


class TestConfig:
    @pytest.mark.parametrize(
        "name, parsed",
        [
            ("FRD-base(amp)", ("FRD", "base", "amp")),
            ("FRD-online(pha)", ("FRD", "online", "pha")),
            ("PRD-online", ("PRD", "online", "pixel")),
        ],
    )
    def test_variant_parse(self, name, parsed):
        v = Variant.parse(name)
        assert (v.method, v.extractor, v.recon) == parsed and v.name == name

    @pytest.mark.parametrize("name", ["FRD-base", "PRD-base(amp)", "XRD-base", "FRD-base(phase)"])
    def test_bad_variant(self, name):
        with pytest.raises(ValueError):
            Variant.parse(name)

    @pytest.mark.parametrize(
        "kw",
        [{"scale": "huge"}, {"composition": "mixed"}, {"dataset": "MNIST"}, {"threats": {"XX": []}},
         {"variants": ["nope"]}, {"schema_version": 9}, {"adversarial_filter": "maybe"}],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ExperimentConfig(**kw)

    def test_scale_overrides(self):
        c = ExperimentConfig(scale="tiny", scale_overrides={"detect_train": 7})
        assert c.resolved_scale.detect_train == 7 and c.resolved_scale.classifier_epochs == 3
        with pytest.raises(ValueError, match="overrides"):
            ExperimentConfig(scale_overrides={"bogus": 1}).resolved_scale

    def test_yaml_round_trip_and_fingerprint(self, tmp_path):
        c = ExperimentConfig(scale="tiny", seed=3, output_dir="a")
        path = dump_config(c, tmp_path / "c.yaml")
        back = load_config(path)
        assert back.fingerprint() == c.fingerprint()
        assert load_config(path, output_dir="b").fingerprint() == c.fingerprint()
        assert load_config(path, seed=4).fingerprint() != c.fingerprint()
        assert isinstance(back.training_attacks[0], AttackSpec)

    def test_json_and_unknown_keys(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"scale": "tiny", "composition": "union-of-six"}))
        assert load_config(p).composition == "union-of-six"
        p.write_text(json.dumps({"scael": "tiny"}))
        with pytest.raises(ValueError, match="unknown config keys"):
            load_config(p)

    def test_shipped_configs_load(self):
        root = os.path.join(os.path.dirname(__file__), "..", "scripts", "configs")
        for name in sorted(os.listdir(root)):
            load_config(os.path.join(root, name))


def sample_report():
    t = Table("training_attack", ["white-box", "SM-NT"])
    t.set("PGD_LINF(0.0314)", "white-box", 0.912345678)
    t.set("FGSM(0.0314)", "SM-NT", 0.5)
    return EvaluationReport("bad", {"FRD-base(amp)": t}, {"config_hash": "abc", "composition": "same-attack"})


class TestReport:
    def test_rounding_average_and_na(self):
        r = sample_report()
        t = r.tables["FRD-base(amp)"]
        assert t.get("PGD_LINF(0.0314)", "white-box") == 0.9123
        assert t.average("FGSM(0.0314)") == 0.5
        assert r.partial and ("PGD_LINF(0.0314)", "SM-NT") in t.missing()
        lines = t.to_csv().splitlines()
        assert lines[0] == "training_attack,white-box,SM-NT,Avg"
        assert lines[1] == "PGD_LINF(0.0314),0.9123,NA,0.9123"

    def test_out_of_range_rejected(self):
        t = Table("x", ["a"])
        for bad in (1.2, -0.1):
            with pytest.raises(ValueError, match="outside"):
                t.set("r", "a", bad)
        with pytest.raises(KeyError):
            t.set("r", "b", 0.5)
        free = Table("x", ["a"], check_unit=False)
        free.set("r", "a", 1234.5)
        assert free.average("r") is None and "Avg" not in free.to_csv()

    def test_json_round_trip_and_byte_identical_emission(self, tmp_path):
        r = sample_report()
        assert EvaluationReport.from_json(r.to_json()).to_json() == r.to_json()
        a = emit_report(r, tmp_path / "a", ("csv", "json"))
        b = emit_report(load_report(tmp_path / "a" / "bad.json"), tmp_path / "b", ("csv", "json"))
        assert [p.name for p in a] == [p.name for p in b]
        for pa, pb in zip(a, b):
            assert pa.read_bytes() == pb.read_bytes()
        assert (tmp_path / "a" / "bad_FRD_base_amp.csv").read_text().startswith(
            "# report=bad config_hash=abc composition=same-attack\n"
        )

    def test_plots(self, tmp_path):
        paths = emit_report(sample_report(), tmp_path, ("plots",))
        assert paths and all(p.suffix == ".png" and p.stat().st_size > 0 for p in paths)


class TestStore:
    def test_write_once_and_reuse(self, tmp_path):
        store = ArtifactStore(tmp_path)
        calls = []

        def build():
            calls.append(1)
            return {"v": 1}

        save = lambda o, p, h: p.write_text(json.dumps(dict(o, h=h)))
        load = lambda p, h: json.loads(p.read_text())
        a, h1 = store.fetch("thing", {"k": 1}, ".json", build, save, load)
        b, h2 = store.fetch("thing", {"k": 1}, ".json", build, save, load)
        assert len(calls) == 1 and a["v"] == b["v"] and h1 == h2 and b["h"] == h1
        _, h3 = store.fetch("thing", {"k": 2}, ".json", build, save, load)
        assert h3 != h1 and len(calls) == 2

    def test_stage_hash_mismatch_refused_unless_forced(self, tmp_path):
        path = save_checkpoint(tmp_path / "m.pt", "vae", {"a": 1}, {}, stage_hash="aaa")
        with pytest.raises(CheckpointError, match="expected bbb"):
            load_checkpoint(path, "vae", expected_stage="bbb")
        assert load_checkpoint(path, "vae", expected_stage="bbb", force=True)["stage_hash"] == "aaa"
        with pytest.raises(CheckpointError, match="holds a 'vae'"):
            load_checkpoint(path, "detector")

    def test_preflight(self, tmp_path):
        assert preflight(tmp_path / "new" / "dir").is_dir()
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(PermissionError, match="not writable"):
            preflight(blocker / "sub")


class TestCli:
    def test_report_exit_codes(self, tmp_path, capsys):
        r = sample_report()
        (tmp_path / "bad.json").write_text(r.to_json())
        assert main(["report", str(tmp_path / "bad.json"), "--output-dir", str(tmp_path / "o"), "--formats", "csv"]) == 2
        r.tables["FRD-base(amp)"].set("PGD_LINF(0.0314)", "SM-NT", 0.7)
        r.tables["FRD-base(amp)"].set("FGSM(0.0314)", "white-box", 0.7)
        (tmp_path / "ok.json").write_text(r.to_json())
        assert main(["report", str(tmp_path / "ok.json"), "--output-dir", str(tmp_path / "o")]) == 0
        assert main(["report", str(tmp_path / "missing.json"), "--output-dir", str(tmp_path / "o")]) == 1
        assert "error" in capsys.readouterr().err

    def test_bad_config_fails(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("scale: enormous\n")
        assert main(["evaluate-bad", "--config", str(p), "--output-dir", str(tmp_path)]) == 1


@needs_cifar
class TestData:
    def test_splits_and_subsets(self):
        from recondet.harness.data import ingest_dataset

        s = ingest_dataset("CIFAR10")
        assert (len(s.train), len(s.test), s.num_classes) == (50000, 10000, 10)
        assert s.train.images.dtype == torch.uint8 and s.train.images.shape[1:] == (3, 32, 32)
        assert torch.equal(s.train.subset_indices(100, 5), s.train.subset_indices(100, 5))
        assert not torch.equal(s.train.subset_indices(100, 5), s.train.subset_indices(100, 6))
        with pytest.raises(ValueError, match="exceeds"):
            s.test.subset_indices(10001, 0)
        assert 0.0 <= s.test.floats(torch.arange(4)).min() and s.test.floats(torch.arange(4)).max() <= 1.0


def tiny_config(out):
    return ExperimentConfig(
        scale="tiny",
        scale_overrides={
            "vae_epochs": 1,
            "detect_train": 60, "detect_test": 40, "detector_epochs": 3,
        },
        seed=11,
        strict_determinism=True,
        # every threat model is the victim itself, so black-box must equal white-box
        threats={"SM-NT": [{"architectures": ["RESNET18"], "strategy": "NT", "mode": "SINGLE"}]},
        variants=["PRD-base"],
        strength_variant="PRD-base",
        layer_sets=[["stage3"], ["stage4"], ["stage3"], ["stage3", "stage4"]],
        output_dir=str(out),
    )


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = tiny_config(root / "out")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        reports = run_all(cfg, root / "out", root / "store", stages=("bad", "layers", "controls", "analysis"))
    return cfg, root, reports, caught


@needs_cifar
@pytest.mark.slow
class TestTinyPipeline:
    def test_degenerate_matrix(self, run):
        _, _, reports, _ = run
        t = reports["bad"].tables["PRD-base"]
        row = next(iter(t.rows))
        assert t.get(row, "SM-NT") == t.get(row, "white-box") is not None
        assert t.get(row, "EM-NT") is None and reports["bad"].partial

    def test_white_box_column_matches_standalone(self, run):
        cfg, root, reports, _ = run
        pipe = Pipeline(cfg, root / "store")
        spec = pipe.attack_spec("PGD_LINF", 8 / 255)
        t = reports["bad"].tables["PRD-base"]
        assert round(pipe.white_box_auc(Variant.parse("PRD-base"), spec), 4) == t.get(spec.name, "white-box")

    def test_layer_sweep(self, run):
        _, _, reports, caught = run
        t = reports["layers"].tables["PRD-base"]
        assert list(t.rows) == ["stage3", "stage4", "stage3+stage4"]
        assert any("duplicate layer set" in str(w.message) for w in caught)

    def test_zero_epsilon_control(self, run):
        _, _, reports, _ = run
        assert reports["controls"].tables["PRD-base"].get("epsilon=0", "white-box") == 0.5

    def test_analysis_tables(self, run):
        _, _, reports, _ = run
        r = reports["analysis"]
        assert {"eq1", "similarity", "ctr", "separability"} <= set(r.tables)
        eq1 = r.tables["eq1"]
        assert eq1.get("frequency", "samples") == eq1.get("amplitude", "samples") + eq1.get("phase", "samples")
        sim = r.tables["similarity"]
        assert sim.get("adversarial white-box", "cosine") is not None
        assert sim.get("adversarial SM-NT", "cosine") == sim.get("adversarial white-box", "cosine")
        assert any(f.startswith("similarity EM-AT") for f in r.failures)
        ctr = r.tables["ctr"]
        assert ctr.get("normal", "lc_rate") + ctr.get("normal", "li_rate") == pytest.approx(1.0)

    def test_outputs_written(self, run):
        _, root, _, _ = run
        names = {p.name for p in (root / "out").iterdir()}
        assert {"bad.json", "layers.json", "controls.json", "analysis.json", "timings.json", "bad_PRD_base.csv"} <= names
        assert "analysis_kde.png" in names

    def test_fresh_store_is_byte_identical(self, run, tmp_path):
        cfg, root, _, _ = run
        run_all(tiny_config(tmp_path / "out"), tmp_path / "out", tmp_path / "store", stages=("bad", "controls"))
        for name in ("bad.json", "controls.json", "bad_PRD_base.csv", "controls_PRD_base.csv"):
            assert (tmp_path / "out" / name).read_bytes() == (root / "out" / name).read_bytes(), name
