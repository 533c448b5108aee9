"""Learnable prompt streams: instance-conditional vector + global context.

Each stream owns a small meta-network mapping the pooled visual feature to
one conditional vector, plus ``k`` shared context vectors. The assembled
content sequence is ``[q, c_1, ..., c_k]`` (conditional vector first), with
the backend's fixed special tokens appended at the end. Streams A (forgery
specific) and B (forgery irrelevant) are two independent instances sharing
no parameters.
"""

from __future__ import annotations

import torch
from torch import nn

from .backend import DTYPE, DualEncoder, TextEmbedding, VisionFeature
from .config import ModelConfig


class PromptStream(nn.Module):
    """One prompt stream: meta-network plus global context matrix.

    Context rows start from a 0.02-std normal; the meta-network's final layer
    starts at zero so prompts begin as pure global context and the
    conditional part only enters once training moves it.
    """

    def __init__(self, config: ModelConfig, seed: int):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.context = nn.Parameter(
            torch.randn(config.context_len, config.text_hidden_dim, generator=gen, dtype=DTYPE) * 0.02
        )
        fc1 = nn.Linear(config.visual_dim, config.meta_hidden, dtype=DTYPE)
        fc2 = nn.Linear(config.meta_hidden, config.text_hidden_dim, dtype=DTYPE)
        with torch.no_grad():
            fc1.weight.copy_(
                torch.randn(config.meta_hidden, config.visual_dim, generator=gen, dtype=DTYPE)
                * config.visual_dim ** -0.5
            )
            fc1.bias.zero_()
            fc2.weight.zero_()
            fc2.bias.zero_()
        self.meta = nn.Sequential(fc1, nn.ReLU(), fc2)
        self.visual_dim = config.visual_dim
        self.context_len = config.context_len

    def meta_forward(self, pooled: torch.Tensor) -> torch.Tensor:
        """Conditional prompt vector for a pooled visual feature (batched or single)."""
        if pooled.shape[-1] != self.visual_dim:
            raise ValueError(
                f"meta-network expects input width {self.visual_dim}, got {pooled.shape[-1]}"
            )
        return self.meta(pooled)

    def assemble_prompt(self, q: torch.Tensor, special_tokens: torch.Tensor) -> torch.Tensor:
        """Full token-embedding sequence [q, c_1..c_k, specials].

        Accepts a single vector (returns L x d) or a batch (returns N x L x d);
        L = context_len + 1 + n_special.
        """
        if q.shape[-1] != self.context.shape[1]:
            raise ValueError(
                f"conditional vector width {q.shape[-1]} != context width {self.context.shape[1]}"
            )
        if q.dim() == 1:
            return torch.cat([q.unsqueeze(0), self.context, special_tokens], dim=0)
        n = q.shape[0]
        ctx = self.context.unsqueeze(0).expand(n, -1, -1)
        spec = special_tokens.unsqueeze(0).expand(n, -1, -1)
        return torch.cat([q.unsqueeze(1), ctx, spec], dim=1)


def encode_stream(feature: VisionFeature, stream: PromptStream, encoder: DualEncoder) -> TextEmbedding:
    """Meta-forward, assemble, and encode one stream's prompt for a batch."""
    q = stream.meta_forward(feature.pooled)
    tokens = stream.assemble_prompt(q, encoder.special_tokens)
    return encoder.encode_prompt(tokens)
