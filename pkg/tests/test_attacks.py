import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from conftest import ToyNet
from recondet.attacks import (
    AdversarialSet,
    AttackSpec,
    ClassifierConfig,
    Ensemble,
    ThreatModelSpec,
    add_matched_noise,
    craft,
    fooling_rate,
    load_archive,
    load_classifier,
    save_archive,
    save_classifier,
    train_classifier,
)
from recondet.utils import CheckpointError, predict


def toy_data(n=64, seed=0):
    g = torch.Generator().manual_seed(seed)
    y = torch.randint(0, 3, (n,), generator=g)
    # class k brightens channel k; noise keeps the task learnable but not trivial
    x = 0.35 + 0.1 * torch.rand(n, 3, 8, 8, generator=g)
    x[torch.arange(n), y] += 0.15
    return x.clamp(0, 1), y


@pytest.fixture(scope="module")
def trained():
    x, y = toy_data(256)
    net = ToyNet(seed=1)
    opt = torch.optim.Adam(net.parameters(), lr=0.02)
    for _ in range(150):
        opt.zero_grad()
        F.cross_entropy(net(x), y).backward()
        opt.step()
    net.eval()
    xt, yt = toy_data(128, seed=5)
    keep = predict(net, xt) == yt
    assert keep.float().mean() > 0.9
    return net, xt[keep], yt[keep]


class TestSpecs:
    def test_defaults(self):
        assert AttackSpec("FGSM", 8 / 255, steps=7).steps == 1
        pgd = AttackSpec("PGD_LINF", 8 / 255)
        assert pgd.steps == 20 and pgd.step_size == pytest.approx(0.8 / 255)
        assert AttackSpec("CW").steps == 100 and AttackSpec("DEEPFOOL").steps == 50
        assert AttackSpec("DEEPFOOL").overshoot == 0.02 and AttackSpec("CW").confidence == 0.0

    @pytest.mark.parametrize(
        "kw", [{"family": "JSMA"}, {"epsilon": -0.1}, {"steps": 0}, {"targeted": True}]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            AttackSpec(**{"family": "PGD_LINF", **kw})

    def test_names(self):
        assert AttackSpec("PGD_LINF", 8 / 255).name == "PGD_LINF-8"
        assert AttackSpec("PGD_L2", 0.5).name == "PGD_L2-0.5"
        assert ThreatModelSpec(("VGG16", "WRN28"), "AT", "ENSEMBLE").name == "VGG16&WRN28(AT)"

    @pytest.mark.parametrize(
        "archs,mode", [(("VGG16", "WRN28"), "SINGLE"), (("VGG16",), "ENSEMBLE"), (("LENET",), "SINGLE")]
    )
    def test_threat_model_arity(self, archs, mode):
        with pytest.raises(ValueError):
            ThreatModelSpec(archs, "NT", mode)


class TestCraft:
    def test_fgsm_zero_budget_is_identity(self, trained):
        net, x, y = trained
        assert torch.equal(craft(AttackSpec("FGSM", 0.0), net, x, y), x)

    @settings(max_examples=12)
    @given(st.sampled_from(["FGSM", "BIM", "PGD_LINF"]), st.floats(0.0, 0.1), st.integers(0, 100))
    def test_linf_budget_and_range(self, trained, family, eps, seed):
        net, x, y = trained
        adv = craft(AttackSpec(family, eps, steps=5), net, x, y, seed=seed)
        assert ((adv - x).flatten(1).abs().amax(1) <= eps + 1e-6).all()
        assert adv.min() >= 0 and adv.max() <= 1

    def test_pgd_l2_budget(self, trained):
        net, x, y = trained
        adv = craft(AttackSpec("PGD_L2", 0.5, steps=10), net, x, y)
        assert ((adv - x).flatten(1).norm(dim=1) <= 0.5 + 1e-5).all()

    def test_pgd_at_least_as_strong_as_fgsm(self, trained):
        net, x, y = trained
        eps = 0.1
        fg = fooling_rate(net, craft(AttackSpec("FGSM", eps), net, x, y), y)
        pgd = fooling_rate(net, craft(AttackSpec("PGD_LINF", eps, steps=20, step_size=eps / 8), net, x, y), y)
        assert pgd >= fg and pgd > 0.5

    def test_seeded(self, trained):
        net, x, y = trained
        spec = AttackSpec("PGD_LINF", 0.05, steps=5)
        assert torch.equal(craft(spec, net, x, y, seed=3), craft(spec, net, x, y, seed=3))
        assert not torch.equal(craft(spec, net, x, y, seed=3), craft(spec, net, x, y, seed=4))

    @pytest.mark.parametrize("family", ["DEEPFOOL", "CW"])
    def test_minimal_attacks_flip_labels(self, trained, family):
        net, x, y = trained
        stats = {}
        adv = craft(AttackSpec(family, steps=30 if family == "DEEPFOOL" else 200, cw_lr=0.05), net, x, y, stats=stats)
        assert fooling_rate(net, adv, y) > 0.8
        assert adv.min() >= 0 and adv.max() <= 1

    @pytest.mark.parametrize("family", ["DEEPFOOL", "CW"])
    def test_dead_gradient_falls_back_to_clean(self, family):
        class Constant(torch.nn.Module):
            def __init__(self):
                super().__init__()
                self.w = torch.nn.Parameter(torch.zeros(1))

            def forward(self, x):
                logits = torch.zeros(len(x), 3) + self.w * 0
                logits[:, 0] = 1.0
                return logits + 0 * x.sum((1, 2, 3), keepdim=False)[:, None]

        x, _ = toy_data(8)
        y = torch.zeros(8, dtype=torch.long)
        stats = {}
        adv = craft(AttackSpec(family, steps=5), Constant(), x, y, stats=stats)
        assert torch.equal(adv, x)
        assert stats["fallbacks"] == 8

    def test_one_member_ensemble_is_bit_identical(self, trained):
        net, x, y = trained
        spec = AttackSpec("PGD_LINF", 0.05, steps=5)
        assert torch.equal(craft(spec, [net], x, y, seed=1), craft(spec, net, x, y, seed=1))
        assert torch.equal(craft(spec, Ensemble([net]), x, y, seed=1), craft(spec, net, x, y, seed=1))

    def test_ensemble_averages_logits(self):
        a, b = ToyNet(seed=1).eval(), ToyNet(seed=2).eval()
        x, _ = toy_data(4)
        assert torch.allclose(Ensemble([a, b])(x), (a(x) + b(x)) / 2)


class TestMatchedNoise:
    def test_zero_perturbation(self):
        x, _ = toy_data(5)
        assert torch.equal(add_matched_noise(x, x.clone()), x)

    @given(st.integers(0, 1000), st.floats(0.0, 0.1))
    def test_magnitude_matches(self, seed, eps):
        g = torch.Generator().manual_seed(seed)
        x = 0.2 + 0.6 * torch.rand(6, 3, 8, 8, generator=g)
        scale = torch.rand(6, 1, 1, 1, generator=g)
        adv = x + eps * scale * torch.sign(torch.randn(6, 3, 8, 8, generator=g))
        noisy = add_matched_noise(x, adv, seed=seed)
        want = (adv - x).flatten(1).abs().amax(1)
        got = (noisy - x).flatten(1).abs().amax(1)
        assert torch.allclose(got, want, atol=1e-6)

    def test_within_one_level_after_clipping(self):
        x, _ = toy_data(16)
        x[:, :, :4] = 1.0  # saturated region
        adv = (x + 8 / 255).clamp(0, 1)
        adv[:, 0, 5, 5] = x[:, 0, 5, 5] - 8 / 255
        noisy = add_matched_noise(x, adv)
        assert noisy.min() >= 0 and noisy.max() <= 1
        diff = (noisy - x).flatten(1).abs().amax(1) - (adv - x).flatten(1).abs().amax(1)
        assert diff.abs().max() <= 1 / 255

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            add_matched_noise(torch.zeros(2, 3, 8, 8), torch.zeros(2, 3, 8, 4))


def _images32(n, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, 32, 32, generator=g), torch.randint(0, 10, (n,), generator=g)


class TestClassifierTraining:
    @pytest.mark.parametrize("arch", ["RESNET18", "VGG16", "WRN28"])
    def test_deterministic_given_seed(self, arch):
        x, y = _images32(24)
        cfg = ClassifierConfig(architecture=arch, width=2 if arch != "WRN28" else 1, epochs=1, batch_size=12, seed=5)
        a = train_classifier(cfg, x, y)
        b = train_classifier(cfg, x, y)
        for (k, va), vb in zip(a.state_dict().items(), b.state_dict().values()):
            assert torch.equal(va, vb), k

    def test_floor_marks_unusable(self):
        x, y = _images32(24)
        cfg = ClassifierConfig(architecture="VGG16", width=2, epochs=1, batch_size=12, accuracy_floor=0.99)
        model = train_classifier(cfg, x, y, x, y)
        assert model.clean_accuracy is not None and not model.usable

    def test_adversarial_training_runs(self):
        x, y = _images32(16)
        cfg = ClassifierConfig(architecture="VGG16", strategy="AT", width=2, epochs=1, batch_size=8, at_steps=2)
        model = train_classifier(cfg, x, y)
        assert all(torch.isfinite(p).all() for p in model.parameters())

    def test_checkpoint_round_trip_and_hash_guard(self, tmp_path):
        x, y = _images32(16)
        cfg = ClassifierConfig(architecture="RESNET18", width=2, epochs=1, batch_size=8)
        model = train_classifier(cfg, x, y, x, y)
        path = save_classifier(model, tmp_path / "c.pt", stage_hash="abc")
        back = load_classifier(path, expected_stage="abc")
        assert torch.equal(back(x), model(x)) and back.clean_accuracy == model.clean_accuracy
        with pytest.raises(CheckpointError, match="pipeline stage"):
            load_classifier(path, expected_stage="other")
        assert load_classifier(path, expected_stage="other", force=True) is not None


def test_archive_round_trip(tmp_path):
    x, y = toy_data(6)
    adv = AdversarialSet(x + 0.01, x, y, y.clone(), (y + 1) % 3, {"family": "FGSM", "epsilon": 0.03}, "h1")
    path = save_archive(tmp_path / "a.npz", adv)
    back = load_archive(path, expected_hash="h1")
    for field in ("images", "clean", "labels", "victim_predictions", "source_predictions"):
        assert torch.equal(getattr(back, field), getattr(adv, field))
    assert back.config == adv.config
    with pytest.raises(ValueError, match="expected h2"):
        load_archive(path, expected_hash="h2")
