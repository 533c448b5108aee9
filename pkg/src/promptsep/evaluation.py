"""Scoring, video-level metrics, robustness sweeps, and artifact exports.

Frame scores aggregate to video scores by arithmetic mean (the dominant
convention for video-level reporting; the alternative max/median rules are
not implemented). EER is reported canonically in [0, 0.5] with an inversion
flag rather than ever exceeding 0.5.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .data import (PERTURB_FAMILIES, PerturbationSpec, Sample,
                   load_image, perturb, save_image)
from .backend import DTYPE
from .metrics import ap, auc, eer_detail
from .model import ForgeryDetector
from .prompts import encode_stream

log = logging.getLogger(__name__)


@dataclass
class ScoreTable:
    """Per-frame scores with video grouping."""

    video_ids: list[str]
    frame_idx: list[int]
    scores: np.ndarray
    labels: np.ndarray

    def validate(self) -> None:
        n = len(self.video_ids)
        if not (len(self.frame_idx) == self.scores.shape[0] == self.labels.shape[0] == n):
            raise ValueError("score table columns differ in length")
        if n == 0:
            raise ValueError("empty score table")
        if self.scores.min() < 0.0 or self.scores.max() > 1.0:
            raise ValueError("scores must lie in [0,1]")
        self._video_labels()

    def _video_labels(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for vid, lab in zip(self.video_ids, self.labels):
            lab = int(lab)
            if out.setdefault(vid, lab) != lab:
                raise ValueError(f"inconsistent labels within video {vid!r}")
        return out


def aggregate_video(table: ScoreTable) -> list[tuple[str, float, int]]:
    """One (video_id, mean frame score, label) row per video, sorted by id."""
    table.validate()
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    labels = table._video_labels()
    for vid, score in zip(table.video_ids, table.scores):
        sums[vid] = sums.get(vid, 0.0) + float(score)
        counts[vid] = counts.get(vid, 0) + 1
    return [(vid, sums[vid] / counts[vid], labels[vid]) for vid in sorted(sums)]


@dataclass
class EvalReport:
    """Video-level metrics for one evaluation run."""

    auc: float
    ap: float
    eer: float
    eer_inverted: bool
    n_samples: int
    n_videos: int
    config_hash: str = ""
    frame_auc: float = float("nan")
    grid: Optional[dict] = None

    def validate(self) -> None:
        if not (0.0 <= self.auc <= 1.0 and 0.0 <= self.ap <= 1.0):
            raise ValueError("AUC and AP must lie in [0,1]")
        if not 0.0 <= self.eer <= 0.5:
            raise ValueError("canonical EER must lie in [0,0.5]")

    def to_dict(self) -> dict:
        out = {"auc": self.auc, "ap": self.ap, "eer": self.eer,
               "eer_inverted": self.eer_inverted, "n_samples": self.n_samples,
               "n_videos": self.n_videos, "config_hash": self.config_hash,
               "frame_auc": self.frame_auc}
        if self.grid is not None:
            out["grid"] = self.grid
        return out

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")


def _batched(seq: Sequence, size: int):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def score_samples(model: ForgeryDetector, samples: Sequence[Sample],
                  batch_size: int = 32,
                  images: Optional[Sequence[np.ndarray]] = None) -> ScoreTable:
    """Deterministic forward scoring in manifest order (no shuffling).

    ``images`` overrides file loading when the caller already holds (possibly
    perturbed) arrays aligned with ``samples``.
    """
    if not samples:
        raise ValueError("no samples to score")
    arrays = images if images is not None else [load_image(s.path) for s in samples]
    scores = np.empty(len(samples), dtype=np.float64)
    model.eval()
    pos = 0
    for chunk in _batched(list(range(len(samples))), batch_size):
        x = torch.from_numpy(np.stack([arrays[i] for i in chunk])).to(DTYPE)
        scores[pos:pos + len(chunk)] = model.predict_scores(x).numpy()
        pos += len(chunk)
    frame_counter: dict[str, int] = {}
    frame_idx = []
    for s in samples:
        frame_idx.append(frame_counter.get(s.video_id, 0))
        frame_counter[s.video_id] = frame_idx[-1] + 1
    return ScoreTable(video_ids=[s.video_id for s in samples], frame_idx=frame_idx,
                      scores=scores, labels=np.array([s.label for s in samples]))


def video_metrics(table: ScoreTable) -> tuple[float, float, float, bool]:
    rows = aggregate_video(table)
    scores = np.array([r[1] for r in rows])
    labels = np.array([r[2] for r in rows])
    e, inverted = eer_detail(scores, labels)
    return auc(scores, labels), ap(scores, labels), e, inverted


def evaluate(model: ForgeryDetector, samples: Sequence[Sample],
             batch_size: int = 32, config_hash: str = "") -> EvalReport:
    """Score a split and compute video-level AUC/AP/EER."""
    table = score_samples(model, samples, batch_size=batch_size)
    a, p, e, inv = video_metrics(table)
    report = EvalReport(
        auc=a, ap=p, eer=e, eer_inverted=inv,
        n_samples=len(samples), n_videos=len(set(table.video_ids)),
        config_hash=config_hash,
        frame_auc=auc(table.scores, table.labels),
    )
    report.validate()
    return report


def robustness_sweep(model: ForgeryDetector, samples: Sequence[Sample],
                     families: Sequence[str] = PERTURB_FAMILIES,
                     severities: Sequence[int] = (1, 2, 3, 4, 5),
                     seed: int = 0, batch_size: int = 32,
                     plot_path: Optional[str] = None) -> dict:
    """Video-level AUC per (family, severity), plus the across-family average.

    Severity 0 is the unperturbed control, identical for every family by
    construction. Per-sample perturbation seeds derive from ``seed`` and the
    sample index, so the grid is reproducible.
    """
    unknown = [f for f in families if f not in PERTURB_FAMILIES]
    if unknown:
        raise ValueError(f"unknown perturbation families {unknown}")
    clean_images = [load_image(s.path) for s in samples]
    clean_table = score_samples(model, samples, batch_size, images=clean_images)
    clean_auc = video_metrics(clean_table)[0]
    grid: dict[str, dict[str, float]] = {}
    for family in families:
        grid[family] = {"0": clean_auc}
        for severity in severities:
            imgs = []
            for i, img in enumerate(clean_images):
                per_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
                imgs.append(perturb(img, PerturbationSpec(family, severity, per_seed)))
            table = score_samples(model, samples, batch_size, images=imgs)
            grid[family][str(severity)] = video_metrics(table)[0]
    average = {}
    for severity in ["0"] + [str(s) for s in severities]:
        average[severity] = float(np.mean([grid[f][severity] for f in families]))
    result = {"grid": grid, "average": average, "clean_auc": clean_auc}
    if plot_path is not None:
        _plot_sweep(result, families, ["0"] + [str(s) for s in severities], plot_path)
    return result


def _plot_sweep(result: dict, families: Sequence[str], severities: Sequence[str],
                path: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(families) + 1
    fig, axes = plt.subplots(1, n, figsize=(3 * n, 3), sharey=True)
    xs = [int(s) for s in severities]
    for ax, family in zip(axes[:-1], families):
        ax.plot(xs, [result["grid"][family][s] for s in severities], marker="o")
        ax.set_title(family, fontsize=8)
        ax.set_xlabel("severity")
    axes[-1].plot(xs, [result["average"][s] for s in severities], marker="o", color="k")
    axes[-1].set_title("average", fontsize=8)
    axes[0].set_ylabel("video AUC")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


_EMBED_CHOICES = ("backbone", "specific", "irrelevant")


def export_embeddings(model: ForgeryDetector, samples: Sequence[Sample], which: str,
                      out_path: str, seed: int = 0, batch_size: int = 32,
                      max_points: int = 2000,
                      plot_path: Optional[str] = None) -> np.ndarray:
    """Write per-sample features as a TSV point file; optional 2-D projection plot.

    ``which`` selects the backbone joint feature, f_A, or f_B. At most
    ``max_points`` rows are kept (seeded subsample). The point file is the
    deterministic artifact; the projection plot is illustrative.
    """
    if which not in _EMBED_CHOICES:
        raise ValueError(f"which must be one of {_EMBED_CHOICES}, got {which!r}")
    if not samples:
        raise ValueError("no samples to export")
    idx = np.arange(len(samples))
    if len(samples) > max_points:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x75E])))
        idx = np.sort(rng.choice(len(samples), size=max_points, replace=False))
    chosen = [samples[int(i)] for i in idx]
    feats = []
    model.eval()
    with torch.no_grad():
        for chunk in _batched(chosen, batch_size):
            x = torch.from_numpy(np.stack([load_image(s.path) for s in chunk])).to(DTYPE)
            bundle = model.forward_features(x)
            f = {"backbone": bundle.vision.joint, "specific": bundle.f_a,
                 "irrelevant": bundle.f_b}[which]
            feats.append(f.numpy())
    points = np.concatenate(feats, axis=0)
    with open(out_path, "w", encoding="utf-8") as fh:
        dims = "\t".join(f"f{j}" for j in range(points.shape[1]))
        fh.write(f"video_id\tlabel\t{dims}\n")
        for s, row in zip(chosen, points):
            vals = "\t".join(repr(float(v)) for v in row)
            fh.write(f"{s.video_id}\t{s.label}\t{vals}\n")
    if plot_path is not None:
        _plot_projection(points, np.array([s.label for s in chosen]), seed, plot_path)
    return points


def _plot_projection(points: np.ndarray, labels: np.ndarray, seed: int, path: str) -> None:
    from sklearn.manifold import TSNE

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    perplexity = max(2.0, min(30.0, (len(points) - 1) / 4.0))
    coords = TSNE(n_components=2, random_state=seed, init="pca",
                  perplexity=perplexity).fit_transform(points)
    fig, ax = plt.subplots(figsize=(4, 4))
    for lab, color, name in ((0, "tab:blue", "real"), (1, "tab:red", "fake")):
        mask = labels == lab
        ax.scatter(coords[mask, 0], coords[mask, 1], s=6, c=color, label=name)
    ax.legend()
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def saliency_map(model: ForgeryDetector, image: np.ndarray) -> np.ndarray:
    """Gradient-weighted activation map over the backbone's pre-pool grid.

    Returns the (G, G) map normalized to [0,1]. The fake-class logit is
    differentiated with respect to the grid activations; gradient times
    activation, summed over channels and clamped at zero.
    """
    x = torch.from_numpy(np.asarray(image)[None]).to(DTYPE).requires_grad_(True)
    vision = model.encoder.encode_image(x, with_grid=True)
    if vision.grid is None:
        raise ValueError("backend does not expose a spatial feature grid")
    t_a = encode_stream(vision, model.prompt_a, model.encoder)
    f_a = model._fuse(model.align_a, vision.joint, t_a)
    logit_fake = model.head(f_a)[0, 1]
    grad = torch.autograd.grad(logit_fake, vision.grid)[0]
    cam = (grad * vision.grid).sum(dim=-1).clamp_min(0.0)[0].detach().numpy()
    span = cam.max() - cam.min()
    if span > 0:
        cam = (cam - cam.min()) / span
    else:
        cam = np.zeros_like(cam)
    return cam


def export_saliency(model: ForgeryDetector, image: np.ndarray, out_path: str) -> np.ndarray:
    """Write the saliency overlay PNG; returns the raw (G, G) map."""
    cam = saliency_map(model, image)
    h, w = image.shape[:2]
    up = np.kron(cam, np.ones((h // cam.shape[0], w // cam.shape[1])))
    gray = np.asarray(image).mean(axis=2)
    overlay = np.stack([
        np.clip(0.4 * gray + 0.6 * up, 0.0, 1.0),  # heat in red
        0.4 * gray,
        0.4 * gray,
    ], axis=2)
    save_image(out_path, overlay)
    return cam


def linear_probe(train_x: np.ndarray, train_y: np.ndarray,
                 test_x: np.ndarray, test_y: np.ndarray, seed: int = 0) -> float:
    """Accuracy of a standardized logistic-regression probe."""
    from sklearn.linear_model import LogisticRegression

    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0)
    sd[sd == 0] = 1.0
    clf = LogisticRegression(max_iter=2000, random_state=seed)
    clf.fit((train_x - mu) / sd, train_y)
    return float(clf.score((test_x - mu) / sd, test_y))
