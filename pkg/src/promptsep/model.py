"""Full detector: frozen dual encoder, two prompt streams, alignment, head.

Composition (stream A = forgery specific, stream B = forgery irrelevant):

    image -> encoder -> pooled/joint visual feature
    pooled -> meta_a/meta_b -> prompts -> encoder text path -> T_a / T_b
    (joint, T) -> alignment block -> f_a / f_b
    f_a -> linear head -> logits

Inference touches stream A only; stream B exists to absorb content the
detector should ignore and is exercised purely through the training losses.

Parameter names are exchanged with checkpoints under a stable dotted scheme
(``prompt.A.*``, ``prompt.B.*``, ``align.A.*``, ``align.B.*``, ``encoder.*``,
``sigma.*``, ``head.*``) that is independent of attribute naming here.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Optional

import torch
from torch import nn

from .alignment import AlignmentBlock, ConcatFusion, SigmaProjection
from .backend import DTYPE, DualEncoder, TextEmbedding, ToyDualEncoder, VisionFeature
from .config import ModelConfig
from .prompts import PromptStream, encode_stream

FROZEN_PREFIX = "encoder.base."
STAGE1_TRAINABLE_PREFIXES = ("prompt.B.",)

_ARCHIVE_RENAMES = (
    ("prompt_a.", "prompt.A."),
    ("prompt_b.", "prompt.B."),
    ("align_a.", "align.A."),
    ("align_b.", "align.B."),
)

FUSION_MODES = ("attention", "concat")


def to_archive_name(key: str) -> str:
    """Module state-dict key -> stable checkpoint name."""
    for attr, arch in _ARCHIVE_RENAMES:
        if key.startswith(attr):
            return arch + key[len(attr):]
    return key


def from_archive_name(name: str) -> str:
    """Stable checkpoint name -> module state-dict key."""
    for attr, arch in _ARCHIVE_RENAMES:
        if name.startswith(arch):
            return attr + name[len(arch):]
    return name


@dataclass
class FeatureBundle:
    """Everything the stage-2 objective consumes for one batch."""

    vision: VisionFeature
    t_a: TextEmbedding
    t_b: TextEmbedding
    f_a: torch.Tensor
    f_b: torch.Tensor


class ForgeryDetector(nn.Module):
    """Detector over a frozen dual encoder.

    ``fusion`` selects how the visual feature meets the prompt embedding:
    "attention" is the supported cross-attention path, "concat" swaps in the
    ablation-only concatenation fusion. The classifier head starts at zero,
    so an untrained detector scores every input exactly 0.5.
    """

    def __init__(self, config: ModelConfig, encoder: DualEncoder, seed: int = 0,
                 fusion: str = "attention"):
        super().__init__()
        if fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {fusion!r}")
        config.validate()
        self.config = config
        self.fusion = fusion
        self.encoder = encoder
        self.encoder.inject_adapters(config.adapter_rank, seed=seed * 10 + 2)
        self.prompt_a = PromptStream(config, seed=seed * 10 + 3)
        self.prompt_b = PromptStream(config, seed=seed * 10 + 4)
        if fusion == "attention":
            self.align_a = AlignmentBlock(config.joint_dim, encoder.text_width, seed=seed * 10 + 5)
            self.align_b = AlignmentBlock(config.joint_dim, encoder.text_width, seed=seed * 10 + 6)
        else:
            self.align_a = ConcatFusion(config.joint_dim, seed=seed * 10 + 5)
            self.align_b = ConcatFusion(config.joint_dim, seed=seed * 10 + 6)
        self.sigma = SigmaProjection(config.joint_dim)
        self.head = nn.Linear(config.joint_dim, config.num_classes, dtype=DTYPE)
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()

    def _fuse(self, block: nn.Module, joint: torch.Tensor, text: TextEmbedding) -> torch.Tensor:
        if self.fusion == "attention":
            return block(joint, text.tokens)
        return block(joint, text.pooled)

    def forward_features(self, images: torch.Tensor, with_grid: bool = False) -> FeatureBundle:
        """Run both streams; the training path."""
        vision = self.encoder.encode_image(images, with_grid=with_grid)
        t_a = encode_stream(vision, self.prompt_a, self.encoder)
        t_b = encode_stream(vision, self.prompt_b, self.encoder)
        f_a = self._fuse(self.align_a, vision.joint, t_a)
        f_b = self._fuse(self.align_b, vision.joint, t_b)
        return FeatureBundle(vision=vision, t_a=t_a, t_b=t_b, f_a=f_a, f_b=f_b)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Stream-A logits; stream B is never evaluated here."""
        vision = self.encoder.encode_image(images)
        t_a = encode_stream(vision, self.prompt_a, self.encoder)
        f_a = self._fuse(self.align_a, vision.joint, t_a)
        return self.head(f_a)

    @torch.no_grad()
    def predict_scores(self, images: torch.Tensor) -> torch.Tensor:
        """Probability that each image is fake, shape (N,)."""
        logits = self.forward(images)
        return torch.softmax(logits, dim=-1)[..., 1]

    def archive_state(self) -> dict[str, torch.Tensor]:
        """State dict under stable checkpoint names."""
        return {to_archive_name(k): v for k, v in self.state_dict().items()}

    def load_archive_state(self, state: dict[str, torch.Tensor]) -> None:
        self.load_state_dict({from_archive_name(k): v for k, v in state.items()})

    def named_archive_parameters(self) -> Iterable[tuple[str, nn.Parameter]]:
        for key, p in self.named_parameters():
            yield to_archive_name(key), p

    def stage2_trainable_prefixes(self) -> tuple[str, ...]:
        """Everything except the frozen encoder base."""
        prefixes = set()
        for name, _ in self.named_archive_parameters():
            if name.startswith(FROZEN_PREFIX):
                continue
            prefixes.add(name.split(".")[0] + ".")
        # adapters live inside the encoder but are trainable
        if any(n.startswith("encoder.adapters.") for n, _ in self.named_archive_parameters()):
            prefixes.discard("encoder.")
            prefixes.add("encoder.adapters.")
        return tuple(sorted(prefixes))

    def set_trainable(self, prefixes: tuple[str, ...]) -> None:
        """Mark exactly the parameters under ``prefixes`` trainable.

        The frozen encoder base stays frozen no matter what is passed.
        """
        for name, p in self.named_archive_parameters():
            trainable = any(name.startswith(pref) for pref in prefixes)
            if name.startswith(FROZEN_PREFIX):
                trainable = False
            p.requires_grad_(trainable)

    def trainable_archive_names(self) -> list[str]:
        return sorted(n for n, p in self.named_archive_parameters() if p.requires_grad)


def parameter_checksum(model: ForgeryDetector, prefix: Optional[str] = None,
                       exclude: tuple[str, ...] = ()) -> str:
    """SHA-256 over (name, raw bytes) of parameters, sorted by archive name.

    With ``prefix``, only parameters under that archive prefix contribute;
    ``exclude`` drops prefixes from the sum (for "everything but X changed"
    freeze contracts). Identical checksums mean bit-identical values.
    """
    digest = hashlib.sha256()
    for name, p in sorted(model.named_archive_parameters()):
        if prefix is not None and not name.startswith(prefix):
            continue
        if any(name.startswith(e) for e in exclude):
            continue
        digest.update(name.encode())
        digest.update(p.detach().contiguous().cpu().numpy().tobytes())
    return digest.hexdigest()


def build_toy_detector(config: ModelConfig, seed: int = 0, fusion: str = "attention",
                       image_size: int = 32, grid: int = 4) -> ForgeryDetector:
    """Detector over the seeded toy backend; the test-suite entry point."""
    encoder = ToyDualEncoder(config, seed=seed * 10 + 1, image_size=image_size, grid=grid)
    return ForgeryDetector(config, encoder, seed=seed, fusion=fusion)
