"""Dataset plumbing: manifests, augmentation, perturbations, toy corpus.

Manifest format: newline-delimited JSON, one record per line, fields
``path`` (image file, relative to the manifest's directory or absolute),
``label`` (0 real / 1 fake), ``video_id`` (non-empty string), ``method``
(free-form tag), ``split`` (train/val/test).

Every image operation works on float arrays in [0,1] of shape (H, W, C),
preserves shape and range, and is pure given its seed or spec. Severity
parameters for the six perturbation families live in a committed JSON table
(``severity_table.json``); the exact values are an interpretation of the
robustness protocol, chosen to span mild to severe, since the source
protocol publishes no numbers.
"""

from __future__ import annotations

import io
import json
import logging
import math
import os
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .backend import DTYPE

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
AUGMENT_FAMILIES = ("flip", "rotation", "blur", "brightness_contrast")
PERTURB_FAMILIES = ("block_wise", "color_saturation", "color_contrast",
                    "gaussian_noise", "gaussian_blur", "jpeg_compression")

_REQUIRED_FIELDS = ("path", "label", "video_id", "method", "split")


class ManifestError(ValueError):
    """Malformed manifest record; message carries the line number."""


@dataclass(frozen=True)
class Sample:
    path: str
    label: int
    video_id: str
    method: str
    split: str

    def validate(self) -> None:
        if self.label not in (0, 1):
            raise ManifestError(f"label must be 0 or 1, got {self.label!r}")
        if not self.video_id:
            raise ManifestError("video_id must be non-empty")
        if self.split not in SPLITS:
            raise ManifestError(f"split must be one of {SPLITS}, got {self.split!r}")


@dataclass(frozen=True)
class PerturbationSpec:
    family: str
    severity: int
    seed: int = 0

    def validate(self) -> None:
        if self.family not in PERTURB_FAMILIES:
            raise ValueError(f"unknown perturbation family {self.family!r}")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must be in [1,5], got {self.severity}")


def load_manifest(path: str) -> list[Sample]:
    """Parse and validate a manifest; paths are resolved against its directory."""
    root = os.path.dirname(os.path.abspath(path))
    samples: list[Sample] = []
    seen_paths: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise ManifestError(f"{path}:{lineno}: record is not an object")
            missing = [f for f in _REQUIRED_FIELDS if f not in rec]
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing field(s) {missing}")
            sample_path = rec["path"]
            if not os.path.isabs(sample_path):
                sample_path = os.path.join(root, sample_path)
            if sample_path in seen_paths:
                raise ManifestError(f"{path}:{lineno}: duplicate path {rec['path']!r}")
            seen_paths.add(sample_path)
            sample = Sample(path=sample_path, label=rec["label"], video_id=str(rec["video_id"]),
                            method=str(rec["method"]), split=rec["split"])
            try:
                sample.validate()
            except ManifestError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            samples.append(sample)
    if not samples:
        log.warning("manifest %s is empty", path)
    else:
        counts = {s: sum(1 for x in samples if x.split == s) for s in SPLITS}
        log.info("manifest %s: %d samples (%s)", path, len(samples),
                 ", ".join(f"{k}={v}" for k, v in counts.items()))
    return samples


def load_image(path: str) -> np.ndarray:
    """PNG/raster file -> float64 array in [0,1], shape (H, W, C)."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def save_image(path: str, image: np.ndarray) -> None:
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


# --------------------------------------------------------------------------
# training-time augmentation

def augment(image: np.ndarray, seed: int,
            families: Sequence[str] = AUGMENT_FAMILIES,
            probability: float = 0.5) -> np.ndarray:
    """Seeded random flip / rotation / blur / brightness-contrast.

    Each requested family fires independently with the given probability.
    ``families=()`` is the identity; ``families=("flip",), probability=1.0``
    is an exact horizontal mirror (column reversal).
    """
    unknown = [f for f in families if f not in AUGMENT_FAMILIES]
    if unknown:
        raise ValueError(f"unknown augmentation families {unknown}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xA06])))
    out = image
    # draw order is fixed by AUGMENT_FAMILIES, not by the requested subset,
    # so enabling one family never changes another family's draws
    for family in AUGMENT_FAMILIES:
        gate = rng.random()
        if family == "flip":
            if "flip" in families and gate < probability:
                out = out[:, ::-1, :].copy()
        elif family == "rotation":
            angle = rng.uniform(-15.0, 15.0)
            if "rotation" in families and gate < probability:
                out = ndimage.rotate(out, angle, axes=(1, 0), reshape=False,
                                     order=1, mode="nearest")
        elif family == "blur":
            sigma = rng.uniform(0.3, 1.2)
            if "blur" in families and gate < probability:
                out = ndimage.gaussian_filter(out, sigma=(sigma, sigma, 0.0))
        else:  # brightness_contrast
            contrast = rng.uniform(0.8, 1.2)
            brightness = rng.uniform(-0.1, 0.1)
            if "brightness_contrast" in families and gate < probability:
                out = (out - 0.5) * contrast + 0.5 + brightness
    return np.clip(out, 0.0, 1.0)


# --------------------------------------------------------------------------
# robustness perturbations

_SEVERITY_TABLE: Optional[dict] = None


def severity_table() -> dict:
    global _SEVERITY_TABLE
    if _SEVERITY_TABLE is None:
        text = resources.files("promptsep").joinpath("severity_table.json").read_text()
        _SEVERITY_TABLE = json.loads(text)
    return _SEVERITY_TABLE


def _severity_params(family: str, severity: int) -> dict:
    return severity_table()[family][str(severity)]


def perturb(image: np.ndarray, spec: PerturbationSpec) -> np.ndarray:
    """Apply one perturbation family at one severity; pure given the spec.

    Distortion (MSE against the clean image) is non-decreasing in severity
    for a fixed family and seed: noise scales one fixed draw, block masks are
    nested, and the remaining families use monotone parameter ramps.
    """
    spec.validate()
    params = _severity_params(spec.family, spec.severity)
    if spec.family == "block_wise":
        out = image.copy()
        cell = params["cell"]
        h, w = image.shape[:2]
        if h % cell or w % cell:
            raise ValueError(f"image dims {h}x{w} not divisible by cell {cell}")
        ch, cw = h // cell, w // cell
        n_cells = ch * cw
        # severity-independent permutation -> masked sets are nested across
        # severities, which forces monotone distortion
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, 0xB10C])))
        order = rng.permutation(n_cells)
        n_masked = int(round(params["fraction"] * n_cells))
        for idx in order[:n_masked]:
            r, c = divmod(int(idx), cw)
            out[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell, :] = params["fill"]
        return out
    if spec.family == "color_saturation":
        gray = image.mean(axis=2, keepdims=True)
        out = gray + params["factor"] * (image - gray)
        return np.clip(out, 0.0, 1.0)
    if spec.family == "color_contrast":
        out = (image - 0.5) * params["factor"] + 0.5
        return np.clip(out, 0.0, 1.0)
    if spec.family == "gaussian_noise":
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, 0x4015E])))
        unit = rng.standard_normal(image.shape)
        return np.clip(image + params["sigma"] * unit, 0.0, 1.0)
    if spec.family == "gaussian_blur":
        out = ndimage.gaussian_filter(image, sigma=(params["sigma"], params["sigma"], 0.0))
        return np.clip(out, 0.0, 1.0)
    # jpeg_compression
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="JPEG", quality=params["quality"])
    buf.seek(0)
    with Image.open(buf) as decoded:
        out = np.asarray(decoded.convert("RGB"), dtype=np.float64) / 255.0
    return out


# --------------------------------------------------------------------------
# synthetic toy corpus

TOY_PATCH = 8  # checkerboard patch side, pixels


def _video_params(rng: np.random.Generator, size: int = 32) -> dict:
    """Per-video draws in fixed order; shared by generation and tests."""
    return {
        "freq": rng.uniform(0.5, 1.5, size=2),
        "phase": rng.uniform(0.0, 2 * math.pi, size=3),
        "amp": rng.uniform(0.25, 0.35),
        # even offsets keep the checkerboard's phase consistent across videos:
        # a cyclic shift by (r, c) multiplies the pattern by (-1)^(r+c), and a
        # sign-varying artifact would be invisible to the linear toy backbone
        "patch": (2 * int(rng.integers(0, (size - TOY_PATCH) // 2 + 1)),
                  2 * int(rng.integers(0, (size - TOY_PATCH) // 2 + 1))),
    }


def toy_video_rng(seed: int, label: int, video_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed, label, video_index])))


def toy_patch_location(seed: int, video_index: int) -> tuple[int, int]:
    """Top-left corner of the checkerboard patch for one fake toy video."""
    return _video_params(toy_video_rng(seed, 1, video_index))["patch"]


def _toy_video_frames(rng: np.random.Generator, fake: bool, frames: int,
                      size: int = 32) -> np.ndarray:
    """Frames of one toy video: smooth sinusoid base, checkerboard patch if fake."""
    params = _video_params(rng, size)
    fx, fy = params["freq"]
    phase = params["phase"]
    amp = params["amp"]
    patch_r, patch_c = params["patch"]
    yy, xx = np.mgrid[0:size, 0:size] / size
    checker = (np.indices((TOY_PATCH, TOY_PATCH)).sum(axis=0) % 2) * 2.0 - 1.0
    out = np.empty((frames, size, size, 3))
    for t in range(frames):
        jitter = rng.normal(0.0, 0.15, size=3)
        frame = np.stack(
            [0.5 + amp * np.sin(2 * math.pi * (fx * xx + fy * yy) + phase[c] + jitter[c])
             for c in range(3)],
            axis=2,
        )
        if fake:
            frame[patch_r:patch_r + TOY_PATCH, patch_c:patch_c + TOY_PATCH, :] += \
                0.12 * checker[..., None]
        frame += rng.normal(0.0, 0.02, size=frame.shape)
        out[t] = np.clip(frame, 0.0, 1.0)
    return out


def _split_videos(per_class: int) -> list[str]:
    """Split assignment for one class's videos: 60/20/20, at least 1 each."""
    n_test = max(1, per_class // 5)
    n_val = max(1, per_class // 5)
    n_train = per_class - n_val - n_test
    return ["train"] * n_train + ["val"] * n_val + ["test"] * n_test


def make_toy_dataset(root: str, n_videos: int, frames_per_video: int, seed: int) -> str:
    """Write a balanced synthetic corpus under ``root``; returns manifest path.

    Half the videos are real (smooth multi-frequency patterns), half are fake
    (same patterns plus a low-amplitude checkerboard patch at a per-video
    location). Video splits are disjoint and stratified by label. Rerunning
    with the same arguments reproduces every byte.
    """
    if n_videos < 4:
        raise ValueError(f"need at least 4 videos, got {n_videos}")
    if n_videos % 2:
        raise ValueError(f"n_videos must be even, got {n_videos}")
    if frames_per_video < 1:
        raise ValueError("frames_per_video must be >= 1")
    os.makedirs(root, exist_ok=True)
    per_class = n_videos // 2
    splits = _split_videos(per_class)
    records = []
    for label, tag in ((0, "toy_real"), (1, "toy_checker")):
        for v in range(per_class):
            video_id = f"{tag}_{v:04d}"
            rng = toy_video_rng(seed, label, v)
            frames = _toy_video_frames(rng, fake=bool(label), frames=frames_per_video)
            video_dir = os.path.join(root, "images", video_id)
            os.makedirs(video_dir, exist_ok=True)
            for t in range(frames_per_video):
                rel = os.path.join("images", video_id, f"frame_{t:03d}.png")
                save_image(os.path.join(root, rel), frames[t])
                records.append({"path": rel, "label": label, "video_id": video_id,
                                "method": tag, "split": splits[v]})
    manifest_path = os.path.join(root, "manifest.jsonl")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest_path


def probe_features(images: np.ndarray) -> np.ndarray:
    """Hand-rolled pixel statistics that expose the toy artifact.

    Per image: channel means, channel stds, and mean absolute first
    differences along each axis (the checkerboard patch inflates both).
    """
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 3:
        imgs = imgs[None]
    means = imgs.mean(axis=(1, 2))
    stds = imgs.std(axis=(1, 2))
    dx = np.abs(np.diff(imgs, axis=2)).mean(axis=(1, 2, 3))
    dy = np.abs(np.diff(imgs, axis=1)).mean(axis=(1, 2, 3))
    return np.concatenate([means, stds, dx[:, None], dy[:, None]], axis=1)


# --------------------------------------------------------------------------
# deterministic batching

class DataExhaustedError(RuntimeError):
    """The batch stream cannot supply the requested step."""


@dataclass
class Batch:
    images: torch.Tensor  # (N, H, W, C) float64 in [0,1]
    labels: torch.Tensor  # (N,) long
    video_ids: list[str]


class BatchStream:
    """Stateless deterministic batcher over one manifest split.

    ``batch(step)`` is a pure function of (samples, batch_size, seed, step):
    epoch permutations derive from the seed and the epoch index, so resuming
    at any step reproduces the exact batch sequence of an uninterrupted run.
    A partial trailing batch is kept when it has at least 2 samples, else
    dropped. ``max_epochs`` bounds the stream for exhaustion testing;
    unbounded by default.
    """

    def __init__(self, samples: Sequence[Sample], batch_size: int, seed: int,
                 augment_train: bool = False, max_epochs: Optional[int] = None):
        if batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {batch_size}")
        self.samples = list(samples)
        self.batch_size = batch_size
        self.seed = seed
        self.augment_train = augment_train
        self.max_epochs = max_epochs
        n = len(self.samples)
        full, rem = divmod(n, batch_size)
        self.batches_per_epoch = full + (1 if rem >= 2 else 0)
        self._cache: dict[str, np.ndarray] = {}

    def _image(self, sample: Sample) -> np.ndarray:
        if sample.path not in self._cache:
            self._cache[sample.path] = load_image(sample.path)
        return self._cache[sample.path]

    def batch(self, step: int) -> Batch:
        if self.batches_per_epoch == 0:
            raise DataExhaustedError(
                f"no batches: {len(self.samples)} samples at batch size {self.batch_size}"
            )
        epoch, slot = divmod(step, self.batches_per_epoch)
        if self.max_epochs is not None and epoch >= self.max_epochs:
            raise DataExhaustedError(
                f"stream exhausted after {self.max_epochs} epoch(s) at step {step}"
            )
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([self.seed, 0xE70C, epoch])))
        perm = rng.permutation(len(self.samples))
        idx = perm[slot * self.batch_size:(slot + 1) * self.batch_size]
        images, labels, vids = [], [], []
        for i in idx:
            s = self.samples[int(i)]
            img = self._image(s)
            if self.augment_train:
                aug_seed = int(np.random.SeedSequence(
                    [self.seed, 0xA065, step, int(i)]).generate_state(1)[0])
                img = augment(img, aug_seed)
            images.append(img)
            labels.append(s.label)
            vids.append(s.video_id)
        return Batch(
            images=torch.from_numpy(np.stack(images)).to(DTYPE),
            labels=torch.tensor(labels, dtype=torch.long),
            video_ids=vids,
        )


def split_samples(samples: Iterable[Sample], split: str) -> list[Sample]:
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    return [s for s in samples if s.split == split]
