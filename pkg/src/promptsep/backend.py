"""Frozen dual encoder (vision + text) with continuous-prompt injection.

Two implementations share one interface: a deterministic seeded toy backend
used throughout the test suite, and an abstract slot for wiring a real
pretrained dual encoder (see README). The toy backend preserves every
dimensional relationship of a real backbone — pooled visual width differs
from the shared joint width, which differs from the text token width — at
test speed.

Continuous prompts bypass tokenization entirely: ``encode_prompt`` consumes
embedding vectors directly, and the backend appends its own fixed end-token
embedding, so the content sequence handed in is ``[q, c_1, ..., c_k]``.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Optional

import torch
from torch import nn

from .config import ModelConfig

DTYPE = torch.float64


@dataclass
class VisionFeature:
    """Backbone output for a batch of images.

    ``joint`` is a fixed linear function of ``pooled`` within one backend
    instance. ``grid`` (pre-pool spatial features, N x G x G x visual_dim) is
    populated only when the caller asks for it.
    """

    pooled: torch.Tensor
    joint: torch.Tensor
    grid: Optional[torch.Tensor] = None


@dataclass
class TextEmbedding:
    """Encoded prompt: token-level sequence plus pooled joint-space vector."""

    tokens: torch.Tensor
    pooled: torch.Tensor


def _seeded_linear(in_dim: int, out_dim: int, seed: int, std: float | None = None) -> nn.Linear:
    gen = torch.Generator().manual_seed(seed)
    layer = nn.Linear(in_dim, out_dim, dtype=DTYPE)
    scale = std if std is not None else in_dim ** -0.5
    with torch.no_grad():
        layer.weight.copy_(torch.randn(out_dim, in_dim, generator=gen, dtype=DTYPE) * scale)
        layer.bias.copy_(torch.randn(out_dim, generator=gen, dtype=DTYPE) * 0.01)
    return layer


class LowRankAdapter(nn.Module):
    """Additive low-rank delta on a frozen linear map.

    The up-projection starts at zero so the adapted map is bit-identical to
    the frozen map until the first optimizer step touches it.
    """

    def __init__(self, in_dim: int, out_dim: int, rank: int, seed: int):
        super().__init__()
        if rank > min(in_dim, out_dim):
            raise ValueError(
                f"adapter rank {rank} exceeds target weight dims ({out_dim} x {in_dim})"
            )
        gen = torch.Generator().manual_seed(seed)
        self.down = nn.Parameter(torch.randn(rank, in_dim, generator=gen, dtype=DTYPE) * 0.01)
        self.up = nn.Parameter(torch.zeros(out_dim, rank, dtype=DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x @ self.down.T @ self.up.T


class DualEncoder(ABC, nn.Module):
    """Interface every backend implements.

    Base weights are frozen; only injected adapter parameters may receive
    gradients. Implementations must be deterministic for a fixed seed.
    """

    @property
    @abstractmethod
    def visual_dim(self) -> int: ...

    @property
    @abstractmethod
    def joint_dim(self) -> int: ...

    @property
    @abstractmethod
    def text_width(self) -> int: ...

    @property
    @abstractmethod
    def special_tokens(self) -> torch.Tensor:
        """Fixed (n_special, text_width) embeddings appended to every prompt."""

    @abstractmethod
    def encode_image(self, images: torch.Tensor, with_grid: bool = False) -> VisionFeature: ...

    @abstractmethod
    def encode_prompt(self, tokens: torch.Tensor) -> TextEmbedding: ...

    @abstractmethod
    def inject_adapters(self, rank: int, seed: int = 0,
                        factory: Optional[Callable[..., nn.Module]] = None) -> None: ...


class _FrozenBase(nn.Module):
    """The four frozen linear maps plus the fixed special-token embedding.

    Grouping them under one submodule keeps every frozen parameter behind a
    single state-dict prefix, which is what the freeze checksums key on.
    """

    MAP_NAMES = ("vision_patch", "vision_joint", "text_token", "text_pool")

    def __init__(self, patch_in: int, config: ModelConfig, seed: int):
        super().__init__()
        self.vision_patch = _seeded_linear(patch_in, config.visual_dim, seed * 1000 + 1)
        self.vision_joint = _seeded_linear(config.visual_dim, config.joint_dim, seed * 1000 + 2)
        self.text_token = _seeded_linear(config.text_hidden_dim, config.text_hidden_dim, seed * 1000 + 3)
        self.text_pool = _seeded_linear(config.text_hidden_dim, config.joint_dim, seed * 1000 + 4)
        gen = torch.Generator().manual_seed(seed * 1000 + 5)
        specials = torch.randn(1, config.text_hidden_dim, generator=gen, dtype=DTYPE) * 0.02
        self.special_tokens = nn.Parameter(specials)
        for p in self.parameters():
            p.requires_grad_(False)


class ToyDualEncoder(DualEncoder):
    """Seeded linear dual encoder over 32x32x3 images.

    Vision path: the image splits into a ``grid x grid`` array of patches, a
    shared frozen linear map embeds each patch, the pooled feature is the
    patch mean, and a second frozen map projects it into the joint space.
    Text path: a frozen per-token map produces token-level outputs and the
    mean of the raw token embeddings projects into the joint space.
    """

    _TARGET_SEED_OFFSETS = {"vision_patch": 11, "vision_joint": 12, "text_token": 13, "text_pool": 14}

    def __init__(self, config: ModelConfig, seed: int = 7, image_size: int = 32,
                 channels: int = 3, grid: int = 4):
        super().__init__()
        if image_size % grid != 0:
            raise ValueError(f"image_size {image_size} not divisible by grid {grid}")
        self._visual_dim = config.visual_dim
        self._joint_dim = config.joint_dim
        self._text_width = config.text_hidden_dim
        self.image_size = image_size
        self.channels = channels
        self.grid = grid
        self.seed = seed
        patch = image_size // grid
        self.patch_in = patch * patch * channels
        self.base = _FrozenBase(self.patch_in, config, seed)
        self.adapters = nn.ModuleDict()

    @property
    def visual_dim(self) -> int:
        return self._visual_dim

    @property
    def joint_dim(self) -> int:
        return self._joint_dim

    @property
    def text_width(self) -> int:
        return self._text_width

    @property
    def special_tokens(self) -> torch.Tensor:
        return self.base.special_tokens

    def inject_adapters(self, rank: int, seed: int = 0,
                        factory: Optional[Callable[..., nn.Module]] = None) -> None:
        """Attach zero-init low-rank adapters to every frozen linear map.

        Rank 0 is a no-op. Outputs are bit-identical to the frozen model
        until the adapters move away from initialization. ``factory``
        substitutes a third-party adapter: a callable of
        (in_dim, out_dim, rank, seed) returning a module whose forward maps
        the layer input to an additive output delta.
        """
        if rank < 0:
            raise ValueError(f"adapter rank must be >= 0, got {rank}")
        if rank == 0:
            self.adapters = nn.ModuleDict()
            return
        make = factory if factory is not None else LowRankAdapter
        adapters = {}
        for name in _FrozenBase.MAP_NAMES:
            layer = getattr(self.base, name)
            adapters[name] = make(
                layer.in_features, layer.out_features, rank,
                seed * 1000 + self._TARGET_SEED_OFFSETS[name],
            )
        self.adapters = nn.ModuleDict(adapters)

    def _apply_map(self, name: str, x: torch.Tensor) -> torch.Tensor:
        out = getattr(self.base, name)(x)
        if name in self.adapters:
            out = out + self.adapters[name](x)
        return out

    def _patchify(self, images: torch.Tensor) -> torch.Tensor:
        n = images.shape[0]
        p = self.image_size // self.grid
        # (N, G, p, G, p, C) -> (N, G, G, p*p*C)
        x = images.reshape(n, self.grid, p, self.grid, p, self.channels)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(n, self.grid, self.grid, self.patch_in)
        return x

    def encode_image(self, images: torch.Tensor, with_grid: bool = False) -> VisionFeature:
        squeeze = images.dim() == 3
        if squeeze:
            images = images.unsqueeze(0)
        expected = (self.image_size, self.image_size, self.channels)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ValueError(
                f"expected image batch of shape (N, {expected[0]}, {expected[1]}, {expected[2]}), "
                f"got {tuple(images.shape)}"
            )
        images = images.to(DTYPE)
        patches = self._patchify(images)
        grid_feats = self._apply_map("vision_patch", patches)
        pooled = grid_feats.mean(dim=(1, 2))
        joint = self._apply_map("vision_joint", pooled)
        if squeeze:
            pooled, joint = pooled.squeeze(0), joint.squeeze(0)
            grid_feats = grid_feats.squeeze(0)
        return VisionFeature(pooled=pooled, joint=joint, grid=grid_feats if with_grid else None)

    def encode_prompt(self, tokens: torch.Tensor) -> TextEmbedding:
        squeeze = tokens.dim() == 2
        if squeeze:
            tokens = tokens.unsqueeze(0)
        if tokens.dim() != 3 or tokens.shape[-1] != self._text_width or tokens.shape[1] < 1:
            raise ValueError(
                f"expected prompt batch of shape (N, L>=1, {self._text_width}), got {tuple(tokens.shape)}"
            )
        tokens = tokens.to(DTYPE)
        token_out = self._apply_map("text_token", tokens)
        pooled = self._apply_map("text_pool", tokens.mean(dim=1))
        if squeeze:
            token_out, pooled = token_out.squeeze(0), pooled.squeeze(0)
        return TextEmbedding(tokens=token_out, pooled=pooled)
