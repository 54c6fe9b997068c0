"""Diagnostics: patch-wise logit differences, KDE curves, cosine similarity,
class transfer rate (CTR), CTR-balanced sampling and the inner-class probe."""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .frequency import patch_substitute
from .utils import batched_apply, generator, predict

log = logging.getLogger(__name__)


class SampleSkipped(ValueError):
    """The perturbation did not change the predicted label."""


@dataclass
class PatchDifferenceMap:
    d_o: torch.Tensor  # [m] suppression of the correct label
    d_t: torch.Tensor  # [m] promotion of the target label
    domain: str
    grid: tuple[int, int]
    xi: float

    def as_grid(self, which: str = "d_o") -> torch.Tensor:
        return getattr(self, which).view(*self.grid)


def hybrids(x: torch.Tensor, delta: torch.Tensor, domain: str, grid: tuple[int, int]) -> torch.Tensor:
    """All m hybrid inputs x (+) delta_i for one image [C, H, W]."""
    m = grid[0] * grid[1]
    base, pert = x.unsqueeze(0), delta.unsqueeze(0)
    donor = pert if domain == "pixel" else base + pert
    return torch.cat([patch_substitute(base, donor, i, domain, grid) for i in range(m)])


@torch.no_grad()
def difference_map(
    x: torch.Tensor,
    delta: torch.Tensor,
    model: torch.nn.Module,
    o: int,
    t: int | None = None,
    domain: str = "pixel",
    grid: tuple[int, int] = (4, 4),
    xi: float = 1e-3,
) -> PatchDifferenceMap:
    """Per-patch change of the correct-label and target-label logits.

    ``t`` defaults to the model's prediction on ``x + delta``. Raises
    ``SampleSkipped`` when that prediction equals ``o``.
    """
    if xi <= 0:
        raise ValueError("xi must be positive")
    model.eval()
    if t is None:
        t = int(model((x + delta).unsqueeze(0)).argmax(1))
    if t == o:
        raise SampleSkipped(f"target label equals true label {o}")
    logits_x = model(x.unsqueeze(0))[0]
    logits_h = model(hybrids(x, delta, domain, grid))
    d_o = (logits_x[o] - logits_h[:, o]).clamp_min(xi)
    d_t = (logits_h[:, t] - logits_x[t]).clamp_min(xi)
    return PatchDifferenceMap(d_o, d_t, domain, tuple(grid), xi)


def difference_values(model, clean, adversarial, labels, domain, grid=(4, 4), xi=1e-3) -> tuple[list[PatchDifferenceMap], int]:
    """Maps for every sample whose attack changed the label; returns (maps, skipped)."""
    maps, skipped = [], 0
    targets = predict(model, adversarial)
    for x, xa, o, t in zip(clean, adversarial, labels.tolist(), targets.tolist()):
        try:
            maps.append(difference_map(x, xa - x, model, o, t, domain, grid, xi))
        except SampleSkipped:
            skipped += 1
    return maps, skipped


@dataclass
class KdeSummary:
    support: np.ndarray
    density: np.ndarray
    mean: float
    bandwidth: float
    degenerate: bool = False


def silverman_bandwidth(values: np.ndarray) -> float:
    n = len(values)
    sd = values.std(ddof=1)
    iqr = np.subtract(*np.percentile(values, [75, 25]))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * spread * n ** (-0.2)


def kde_summary(values, bandwidth: float | None = None, n_points: int = 512) -> KdeSummary:
    """Gaussian KDE on an even grid spanning at least [min - 3h, max + 3h]."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if len(v) < 2:
        raise ValueError("KDE needs at least two values")
    mean = float(v.mean())
    h = silverman_bandwidth(v) if bandwidth is None else float(bandwidth)
    if not h > 0:
        # zero spread: unit mass on the grid point holding the value
        support = np.linspace(mean - 1.0, mean + 1.0, n_points)
        density = np.zeros(n_points)
        k = int(np.abs(support - mean).argmin())
        density[k] = 1.0 / (support[1] - support[0])
        return KdeSummary(support, density, mean, 0.0, degenerate=True)
    support = np.linspace(v.min() - 4 * h, v.max() + 4 * h, n_points)
    density = np.zeros(n_points)
    for start in range(0, len(v), 4096):
        chunk = v[start:start + 4096]
        density += np.exp(-0.5 * ((support[:, None] - chunk[None, :]) / h) ** 2).sum(1)
    density /= len(v) * h * math.sqrt(2 * math.pi)
    return KdeSummary(support, density, mean, h)


@torch.no_grad()
def feature_cosine_similarity(extractor, originals, reconstructions, layer: str, stats: dict | None = None) -> float:
    """Mean per-sample cosine between flattened activations; zero-norm samples are excluded."""
    if originals.shape != reconstructions.shape:
        raise ValueError("batches are not aligned")
    from .features import extract_activation

    a = extract_activation(extractor, originals, layer).flatten(1).double()
    b = extract_activation(extractor, reconstructions, layer).flatten(1).double()
    na, nb = a.norm(dim=1), b.norm(dim=1)
    ok = (na > 0) & (nb > 0)
    if stats is not None:
        stats["excluded"] = int((~ok).sum())
    if not ok.any():
        raise ValueError("every sample has a zero-norm activation")
    cos = (a[ok] * b[ok]).sum(1) / (na[ok] * nb[ok])
    return float(cos.mean())


@dataclass
class CtrRecord:
    lc_count: int
    li_count: int
    population: str = ""

    @property
    def lc_rate(self) -> float:
        return self.lc_count / (self.lc_count + self.li_count)

    @property
    def li_rate(self) -> float:
        return 1.0 - self.lc_rate


def label_consistency(victim, originals, reconstructions) -> torch.Tensor:
    """True where the victim's prediction survives reconstruction."""
    return predict(victim, originals) == predict(victim, reconstructions)


def ctr_scores(victim, originals, reconstructions, population: str = "") -> CtrRecord:
    if len(originals) == 0:
        raise ValueError("empty batch")
    lc = label_consistency(victim, originals, reconstructions)
    n_lc = int(lc.sum())
    return CtrRecord(n_lc, len(lc) - n_lc, population)


def ctr_balance_sample(lc_masks: dict, seed: int = 0) -> tuple[dict, dict]:
    """Balanced and total index pools over strengths and LC/LI cases.

    ``lc_masks`` maps a strength key to a boolean LC mask over that strength's
    adversarial pool. The balanced pool draws the same number of samples from
    every (strength, case) cell; the total pool keeps everything.
    """
    gen = generator(seed)
    cells = {}
    for key, mask in lc_masks.items():
        mask = torch.as_tensor(mask, dtype=torch.bool)
        cells[(key, "LC")] = mask.nonzero().flatten()
        cells[(key, "LI")] = (~mask).nonzero().flatten()
    total = {key: torch.arange(len(torch.as_tensor(m))) for key, m in lc_masks.items()}
    sizes = {c: len(v) for c, v in cells.items()}
    balanced = {}
    if min(sizes.values()) > 0:
        k = min(sizes.values())
        for key in lc_masks:
            picks = [cells[(key, case)][torch.randperm(sizes[(key, case)], generator=gen)[:k]] for case in ("LC", "LI")]
            balanced[key] = torch.cat(picks).sort().values
        return balanced, total
    empty = [c for c, n in sizes.items() if n == 0]
    warnings.warn(f"empty CTR cells {empty}; falling back to proportional sampling", RuntimeWarning)
    per_strength = min(len(v) for v in total.values())
    for key, mask in lc_masks.items():
        n = len(total[key])
        picks = []
        for case in ("LC", "LI"):
            share = int(round(per_strength * sizes[(key, case)] / n))
            picks.append(cells[(key, case)][torch.randperm(sizes[(key, case)], generator=gen)[:share]])
        balanced[key] = torch.cat(picks).sort().values
    return balanced, total


def inner_class_probe(
    normal_before: torch.Tensor,
    normal_after: torch.Tensor,
    adversarial_before: torch.Tensor,
    adversarial_after: torch.Tensor,
    min_samples: int = 100,
    seed: int = 0,
) -> tuple[float, float]:
    """Held-out accuracy of a linear before/after classifier within each population."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import train_test_split
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    def probe(before, after, name):
        if len(before) < min_samples:
            raise ValueError(f"{name} population has {len(before)} samples; at least {min_samples} required")
        x = torch.cat([before, after]).flatten(1).double().numpy()
        y = np.r_[np.zeros(len(before)), np.ones(len(after))]
        # split by source image so a pair never straddles train and test
        pair = np.r_[np.arange(len(before)), np.arange(len(after))]
        ids_train, _ = train_test_split(np.arange(len(before)), test_size=0.3, random_state=seed)
        train = np.isin(pair, ids_train)
        clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
        clf.fit(x[train], y[train])
        return float(clf.score(x[~train], y[~train]))

    return probe(normal_before, normal_after, "normal"), probe(adversarial_before, adversarial_after, "adversarial")


# -- outputs ------------------------------------------------------------------


def write_rows_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])
    return path


def plot_kde(curves: dict[str, KdeSummary], path, title: str = "") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, k in curves.items():
        ax.plot(k.support, k.density, label=f"{name} (mean {k.mean:.3f})")
        ax.axvline(k.mean, ls="--", lw=0.8, color=ax.lines[-1].get_color())
    ax.set_xlabel("difference value")
    ax.set_ylabel("density")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_heatmap(image: torch.Tensor, dmap: PatchDifferenceMap, path, which: str = "d_o") -> Path:
    """Overlay a patch map on its image.

    Patch values are min-max normalised to [0, 1] within the map (a constant
    map renders as all zeros) and upsampled with nearest-neighbour blocks.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    g = dmap.as_grid(which).double()
    span = (g.max() - g.min()).item()
    g = (g - g.min()) / span if span > 0 else torch.zeros_like(g)
    heat = F.interpolate(g[None, None], size=image.shape[-2:], mode="nearest")[0, 0]
    fig, ax = plt.subplots(figsize=(3, 3))
    ax.imshow(image.permute(1, 2, 0).clamp(0, 1).numpy())
    ax.imshow(heat.numpy(), cmap="jet", alpha=0.45, vmin=0, vmax=1)
    ax.set_axis_off()
    ax.set_title(f"{dmap.domain} {which}", fontsize=8)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
